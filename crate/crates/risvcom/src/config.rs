//! Scenario configuration: every simulation constant with full-scale
//! defaults, a reduced desk-scale preset for fast runs, JSON round-tripping
//! with unknown-key rejection, and `RISVCOM_`-prefixed environment
//! overrides.

use crate::channel::LinkGeometry;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment override {0}={1} is not valid JSON for that field")]
    BadOverride(String, String),
}

/// All simulation constants. Defaults are the full-scale values; call
/// [`ScenarioConfig::desk_scale`] for the reduced preset used in fast runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    // antennas and surface
    pub n_t: usize,
    pub n_r: usize,
    pub m: usize,
    /// Pilot blocks used by the grouped estimator.
    pub i_blocks: usize,
    // geometry and fading
    pub d_br: f64,
    pub d_rv: f64,
    pub alpha_br: f64,
    pub alpha_rv: f64,
    /// Reference path loss at 1 m, in dB.
    pub p0_db: f64,
    pub rician_k_db: f64,
    /// LoS coherence time as a multiple of the fast (NLoS) coherence time.
    pub los_coh_multiple: f64,
    // radio constants
    pub n0_dbm_hz: f64,
    pub f_c: f64,
    pub bandwidth_nb: f64,
    pub bandwidth_bb: f64,
    pub p_u_dbm: f64,
    pub p_t_dbm: f64,
    pub tau_rms: f64,
    // broadband multi-VUE system
    pub k_vues: usize,
    pub n_carriers: usize,
    /// Per-VUE BS-RIS distances in meters; length must equal `k_vues`.
    pub distances: Vec<f64>,
    /// Per-VUE effective Doppler velocities for the ICI model; length must
    /// equal `k_vues`.
    pub velocities_bb: Vec<f64>,
    pub c_min: f64,
    /// Per-carrier power cap for the broadband allocator, in watts.
    pub p_max_bb: f64,
    /// Total broadband power budget, in watts.
    pub p_tot_bb: f64,
    // experiment axes
    pub seeds: usize,
    pub i_sweep: Vec<usize>,
    pub speeds_kmh: Vec<f64>,
    pub n_sweep: Vec<usize>,
    /// Phase-quantization bits for the resolution-variant NMSE column.
    pub quant_bits: u32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_t: 16,
            n_r: 25,
            m: 100,
            i_blocks: 20,
            d_br: 1500.0,
            d_rv: 2.0,
            alpha_br: 2.2,
            alpha_rv: 2.8,
            p0_db: -30.0,
            rician_k_db: 5.0,
            los_coh_multiple: 50.0,
            n0_dbm_hz: -174.0,
            f_c: 3.5e9,
            bandwidth_nb: 1e6,
            bandwidth_bb: 1e7,
            p_u_dbm: 30.0,
            p_t_dbm: 20.0,
            tau_rms: 1e-6,
            k_vues: 3,
            n_carriers: 32,
            distances: vec![800.0, 1000.0, 1500.0],
            velocities_bb: vec![0.002, 0.0025, 0.003],
            c_min: 3e7,
            p_max_bb: 0.5,
            p_tot_bb: 1.0,
            seeds: 20,
            i_sweep: vec![1, 2, 4, 8, 16, 20, 32, 50, 100],
            speeds_kmh: vec![5.0, 15.0, 30.0, 50.0, 75.0, 100.0, 125.0, 150.0],
            n_sweep: vec![32, 64, 128],
            quant_bits: 3,
        }
    }
}

impl ScenarioConfig {
    /// Reduced preset: small antenna counts and surfaces so every experiment
    /// finishes in seconds-to-minutes.
    pub fn desk_scale() -> Self {
        Self {
            n_t: 4,
            n_r: 4,
            m: 16,
            i_blocks: 8,
            k_vues: 2,
            n_carriers: 8,
            distances: vec![800.0, 1500.0],
            velocities_bb: vec![0.002, 0.003],
            i_sweep: vec![1, 4, 8, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.n_t == 0 || self.n_r == 0 || self.m == 0 {
            return err("antenna/element counts must be positive".into());
        }
        if self.i_blocks == 0 || self.i_blocks > self.m {
            return err(format!("i_blocks must be in 1..=m, got {}", self.i_blocks));
        }
        if self.distances.len() != self.k_vues {
            return err(format!(
                "distances has {} entries for {} VUEs",
                self.distances.len(),
                self.k_vues
            ));
        }
        if self.velocities_bb.len() != self.k_vues {
            return err(format!(
                "velocities_bb has {} entries for {} VUEs",
                self.velocities_bb.len(),
                self.k_vues
            ));
        }
        if self.p_max_bb <= 0.0 || self.p_tot_bb <= 0.0 {
            return err("broadband power budgets must be positive".into());
        }
        for &i in &self.i_sweep {
            if i == 0 || i > self.m {
                return err(format!("i_sweep entry {i} outside 1..=m"));
            }
        }
        if self.seeds == 0 {
            return err("need at least one seed".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Apply `RISVCOM_<FIELD>` environment overrides: the variable's value is
    /// parsed as the JSON for that field (numbers bare, arrays bracketed).
    pub fn apply_env_overrides(self) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(&self).expect("config serializes");
        let map = value.as_object_mut().expect("config is a JSON object");
        let keys: Vec<String> = map.keys().cloned().collect();
        for key in keys {
            let var = format!("RISVCOM_{}", key.to_uppercase());
            if let Ok(raw) = std::env::var(&var) {
                let parsed: serde_json::Value = serde_json::from_str(&raw)
                    .map_err(|_| ConfigError::BadOverride(var.clone(), raw.clone()))?;
                map.insert(key, parsed);
            }
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    // ---- derived quantities ----

    pub fn p_u_watts(&self) -> f64 {
        10f64.powf((self.p_u_dbm - 30.0) / 10.0)
    }

    pub fn p_t_watts(&self) -> f64 {
        10f64.powf((self.p_t_dbm - 30.0) / 10.0)
    }

    /// Noise PSD in W/Hz.
    pub fn n0_w_hz(&self) -> f64 {
        10f64.powf((self.n0_dbm_hz - 30.0) / 10.0)
    }

    /// Narrowband receiver noise power in watts.
    pub fn sigma2_nb(&self) -> f64 {
        self.n0_w_hz() * self.bandwidth_nb
    }

    /// Symbol slot duration: one over the narrowband bandwidth.
    pub fn slot(&self) -> f64 {
        1.0 / self.bandwidth_nb
    }

    pub fn geometry(&self) -> LinkGeometry {
        self.geometry_at(self.d_br)
    }

    pub fn geometry_at(&self, d_br: f64) -> LinkGeometry {
        LinkGeometry {
            d_br,
            d_rv: self.d_rv,
            alpha_br: self.alpha_br,
            alpha_rv: self.alpha_rv,
            p0_db: self.p0_db,
        }
    }
}
