//! Two-timescale Rician fading synthesis for the BS-RIS and RIS-VUE links,
//! with distance-based path loss and coherence-time modeling.
//!
//! The BS-RIS channel is `H = H_los + H_nlos` with CSCG components; the
//! RIS-VUE channel `G` and the LoS component vary on the slow timescale while
//! `H_nlos` is redrawn every fast coherence interval.

use crate::numerics::{khatri_rao, sample_cscg, CMat, RngStream};
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 3.0e8;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("speed must be positive, got {0}")]
    NonPositiveSpeed(f64),
}

/// Large-scale geometry of the two hops.
#[derive(Debug, Clone, Copy)]
pub struct LinkGeometry {
    pub d_br: f64,
    pub d_rv: f64,
    pub alpha_br: f64,
    pub alpha_rv: f64,
    /// Reference path loss in dB at d0 = 1 m.
    pub p0_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hop {
    BsRis,
    RisVue,
}

/// `P_L = P0 (d/d0)^(-alpha)` in linear scale.
pub fn path_loss_linear(d: f64, geo: &LinkGeometry, hop: Hop) -> Result<f64, ChannelError> {
    if d <= 0.0 {
        return Err(ChannelError::NonPositiveDistance(d));
    }
    let alpha = match hop {
        Hop::BsRis => geo.alpha_br,
        Hop::RisVue => geo.alpha_rv,
    };
    let p0 = 10f64.powf(geo.p0_db / 10.0);
    Ok(p0 * d.powf(-alpha))
}

/// One realization of the composite channel. `H = h_los + h_nlos` is the
/// BS-RIS link (M x N_t); `g` is the RIS-VUE link (N_r x M).
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub h_los: CMat,
    pub h_nlos: CMat,
    pub g: CMat,
    pub rician_k: f64,
    pub pl_br: f64,
    pub pl_rv: f64,
}

impl ChannelSet {
    pub fn m(&self) -> usize {
        self.h_los.nrows()
    }

    pub fn nt(&self) -> usize {
        self.h_los.ncols()
    }

    pub fn nr(&self) -> usize {
        self.g.nrows()
    }

    pub fn h(&self) -> CMat {
        &self.h_los + &self.h_nlos
    }

    /// Cascaded channel `(H^T ⊙ G)^T`, M x (N_t N_r). Row m is the
    /// per-element cascade through RIS element m.
    pub fn cascaded(&self) -> CMat {
        cascade(&self.h(), &self.g)
    }

    /// Cascade built from the LoS component only.
    pub fn cascaded_los(&self) -> CMat {
        cascade(&self.h_los, &self.g)
    }

    /// Restrict to the first `m` RIS elements (rows of H, columns of G).
    pub fn truncate_elements(&self, m: usize) -> ChannelSet {
        ChannelSet {
            h_los: self.h_los.rows(0, m).into_owned(),
            h_nlos: self.h_nlos.rows(0, m).into_owned(),
            g: self.g.columns(0, m).into_owned(),
            ..*self
        }
    }
}

pub fn cascade(h: &CMat, g: &CMat) -> CMat {
    khatri_rao(&h.transpose(), g)
        .expect("H^T and G have M columns each")
        .transpose()
}

/// Draw a fresh channel realization. LoS per-entry variance is
/// `P_L K/(1+K)`, NLoS `P_L/(1+K)`, and `G` carries the RIS-VUE path loss.
pub fn sample_channels(
    nt: usize,
    nr: usize,
    m: usize,
    geo: &LinkGeometry,
    k_db: f64,
    rng: &mut RngStream,
) -> ChannelSet {
    let k_lin = 10f64.powf(k_db / 10.0);
    let pl_br = path_loss_linear(geo.d_br, geo, Hop::BsRis).expect("distance checked");
    let pl_rv = path_loss_linear(geo.d_rv, geo, Hop::RisVue).expect("distance checked");
    let var_los = pl_br * k_lin / (1.0 + k_lin);
    let var_nlos = pl_br / (1.0 + k_lin);
    let h_los = sample_cscg(var_los, m, nt, rng).expect("non-negative variance");
    let h_nlos = sample_cscg(var_nlos, m, nt, rng).expect("non-negative variance");
    let g = sample_cscg(pl_rv, nr, m, rng).expect("non-negative variance");
    ChannelSet { h_los, h_nlos, g, rician_k: k_lin, pl_br, pl_rv }
}

/// Redraw only the NLoS component; LoS and G are carried over bit-identical.
pub fn refresh_nlos(cs: &ChannelSet, rng: &mut RngStream) -> ChannelSet {
    let var_nlos = cs.pl_br / (1.0 + cs.rician_k);
    let h_nlos =
        sample_cscg(var_nlos, cs.m(), cs.nt(), rng).expect("non-negative variance");
    ChannelSet { h_nlos, ..cs.clone() }
}

/// Clarke-model coherence time `0.423 c / (f_c v)` for the fast (NLoS)
/// timescale.
pub fn coherence_from_speed(v: f64, f_c: f64) -> Result<f64, ChannelError> {
    if v <= 0.0 {
        return Err(ChannelError::NonPositiveSpeed(v));
    }
    Ok(0.423 * SPEED_OF_LIGHT / (f_c * v))
}

/// Coherence budget of one scenario: slow/fast coherence times and the pilot
/// block layout within one fast interval.
#[derive(Debug, Clone, Copy)]
pub struct TimescaleModel {
    pub t_coh_los: f64,
    pub t_coh_nlos: f64,
    /// Symbol slot duration in seconds.
    pub slot: f64,
    /// Slots per pilot block; `T >= N_t` is required for pilot invertibility.
    pub t_slots: usize,
}

impl TimescaleModel {
    pub fn new(v: f64, f_c: f64, los_multiple: f64, slot: f64, t_slots: usize, nt: usize) -> Result<Self, ChannelError> {
        assert!(t_slots >= nt, "T >= N_t required for pilot invertibility");
        let t_coh_nlos = coherence_from_speed(v, f_c)?;
        Ok(Self {
            t_coh_los: los_multiple * t_coh_nlos,
            t_coh_nlos,
            slot,
            t_slots,
        })
    }

    /// Training time spent on `i` pilot blocks.
    pub fn estimation_time(&self, i_blocks: usize) -> f64 {
        i_blocks as f64 * self.t_slots as f64 * self.slot
    }
}
