//! Seeded batch experiments mirroring the evaluation figures: NMSE versus
//! pilot blocks, narrowband convergence traces, rate versus pilot blocks,
//! achievable rate versus speed, and broadband allocation traces/sweeps.
//! Every command produces a [`ResultTable`] whose CSV body is a pure
//! function of (config, seeds).

use crate::beamform_nb::{
    achievable_rate, alternating_optimize, rate_nb, BeamformError, CsiSource,
    EquivalentChannel, NBSolution, PhaseVector, Schedule,
};
use crate::channel::{
    refresh_nlos, sample_channels, ChannelError, ChannelSet, TimescaleModel,
};
use crate::config::{ConfigError, ScenarioConfig};
use crate::estimation::{
    aggregate_rows, build_grouping, build_pilots, estimate_aggregated, estimate_los,
    expand_to_elements, nmse, select_pilot_blocks, simulate_training_rx,
    unfold_and_equalize, AggregatedEstimate, EstimationError, GroupingScheme,
};
use crate::numerics::{C64, CMat, RngStream};
use crate::ofdm_mvue::{BroadbandScenario, OfdmError};
use crate::resource_alloc::{alternate_p1, P1Config, ResourceError};
use crate::stats::mean_std;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Beamform(#[from] BeamformError),
    #[error(transparent)]
    Ofdm(#[from] OfdmError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error("cannot write results: {0}")]
    Io(#[from] std::io::Error),
}

/// Run provenance written next to each CSV.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub wall_time_s: f64,
}

/// Numeric result rows plus provenance. The first column is always `agg`
/// (0 = data row, 1 = mean row, 2 = std row; aggregate rows carry -1 in the
/// seed column).
#[derive(Debug, Clone)]
pub struct ResultTable {
    pub experiment: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub manifest: Manifest,
}

impl ResultTable {
    /// Deterministic CSV body: header plus one record per row.
    pub fn csv_body(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Write `<out>/<experiment>.csv` and `<out>/<experiment>.manifest.json`.
    pub fn write(&self, out_dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join(format!("{}.csv", self.experiment)), self.csv_body())?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("serializes");
        std::fs::write(
            out_dir.join(format!("{}.manifest.json", self.experiment)),
            manifest,
        )?;
        Ok(())
    }
}

fn manifest_for(experiment: &str, cfg: &ScenarioConfig, seeds: &[u64], wall: f64) -> Manifest {
    let mut hasher = Sha256::new();
    hasher.update(cfg.to_json().as_bytes());
    Manifest {
        experiment: experiment.to_string(),
        config_sha256: hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>(),
        seeds: seeds.to_vec(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: wall,
    }
}

fn seed_list(cfg: &ScenarioConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).collect()
}

fn sort_rows(rows: &mut [Vec<f64>]) {
    rows.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
}

/// Append mean (agg=1) and std (agg=2) rows grouped by `key_cols`; the seed
/// column of aggregate rows is set to -1.
fn append_aggregates(
    rows: &mut Vec<Vec<f64>>,
    key_cols: &[usize],
    seed_col: usize,
    val_cols: &[usize],
) {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for (idx, row) in rows.iter().enumerate() {
        let key: Vec<u64> = key_cols.iter().map(|&c| row[c].to_bits()).collect();
        groups.entry(key).or_default().push(idx);
    }
    let mut agg_rows = Vec::new();
    for members in groups.values() {
        let template = rows[members[0]].clone();
        for (agg_tag, stat) in [(1.0, 0usize), (2.0, 1usize)] {
            let mut row = template.clone();
            row[0] = agg_tag;
            row[seed_col] = -1.0;
            for &c in val_cols {
                let vals: Vec<f64> = members.iter().map(|&i| rows[*&i][c]).collect();
                let (m, s) = mean_std(&vals);
                row[c] = if stat == 0 { m } else { s };
            }
            agg_rows.push(row);
        }
    }
    rows.extend(agg_rows);
}

// ---------------------------------------------------------------------------
// shared pipeline pieces
// ---------------------------------------------------------------------------

/// Pilot-train, receive, unfold, and solve for the aggregated channel.
fn estimate_at(
    cs: &ChannelSet,
    grouping: &GroupingScheme,
    cfg: &ScenarioConfig,
    quant_bits: Option<u32>,
    rng: &mut RngStream,
) -> Result<AggregatedEstimate, ExperimentError> {
    let sched = build_pilots(grouping, cfg.n_t, cfg.n_t, cfg.p_u_watts(), quant_bits, rng)?;
    let y = simulate_training_rx(cs, &sched, cfg.sigma2_nb(), rng);
    let ybar = unfold_and_equalize(&y, &sched.x)?;
    Ok(estimate_aggregated(&ybar, &sched)?)
}

/// LoS estimate averaged over `t_coh` fast intervals with fresh NLoS draws.
fn estimate_los_at(
    cs: &ChannelSet,
    grouping: &GroupingScheme,
    cfg: &ScenarioConfig,
    t_coh: usize,
    rng: &mut RngStream,
) -> Result<AggregatedEstimate, ExperimentError> {
    let sched = build_pilots(grouping, cfg.n_t, cfg.n_t, cfg.p_u_watts(), None, rng)?;
    let mut ybars = Vec::with_capacity(t_coh);
    for _ in 0..t_coh {
        let fresh = refresh_nlos(cs, rng);
        let y = simulate_training_rx(&fresh, &sched, cfg.sigma2_nb(), rng);
        ybars.push(unfold_and_equalize(&y, &sched.x)?);
    }
    Ok(estimate_los(&ybars, &sched)?)
}

fn group_sizes(grouping: &GroupingScheme, block_i: usize) -> Vec<usize> {
    grouping.groups(block_i).iter().map(|r| r.len()).collect()
}

/// Alternating optimization on a given aggregated CSI matrix.
fn optimize_on(
    h_agg: &CMat,
    sizes: &[usize],
    source: CsiSource,
    cfg: &ScenarioConfig,
    init: PhaseVector,
    schedule: &Schedule,
) -> Result<NBSolution, ExperimentError> {
    let ec = EquivalentChannel::from_aggregated(h_agg, cfg.n_r, cfg.n_t, source)?;
    Ok(alternating_optimize(
        &ec,
        sizes,
        cfg.sigma2_nb(),
        cfg.p_t_watts(),
        init,
        schedule,
    )?)
}

/// Evaluate a grouped solution on the true element-level channel: the group
/// phases are broadcast to their elements and the rate is computed against
/// the exact cascade with the solution's precoder.
fn eval_rate_on_truth(
    cs: &ChannelSet,
    grouping: &GroupingScheme,
    block_i: usize,
    sol: &NBSolution,
    cfg: &ScenarioConfig,
) -> Result<f64, ExperimentError> {
    let theta_e: Vec<C64> = (0..cs.m())
        .map(|el| sol.theta.theta()[grouping.group_of(block_i, el)])
        .collect();
    let ec = EquivalentChannel::from_aggregated(
        &cs.cascaded(),
        cs.nr(),
        cs.nt(),
        CsiSource::Perfect,
    )?
    .with_precoder(&sol.f);
    Ok(rate_nb(&PhaseVector::new(theta_e, 0), &ec, cfg.sigma2_nb())?)
}

/// Full estimate-then-optimize pipeline at `block_i` groups, evaluated on
/// the true channel.
fn proposed_rate_at(
    cs: &ChannelSet,
    block_i: usize,
    cfg: &ScenarioConfig,
    schedule: &Schedule,
    rng: &mut RngStream,
) -> Result<f64, ExperimentError> {
    let grouping = build_grouping(cs.m(), block_i)?;
    let est = estimate_at(cs, &grouping, cfg, None, rng)?;
    let sol = optimize_on(
        &est.h_agg,
        &group_sizes(&grouping, block_i),
        CsiSource::EstimatedSmall,
        cfg,
        PhaseVector::ones(block_i),
        schedule,
    )?;
    eval_rate_on_truth(cs, &grouping, block_i, &sol, cfg)
}

// ---------------------------------------------------------------------------
// experiment commands
// ---------------------------------------------------------------------------

/// NMSE of the adaptive estimator versus the number of pilot blocks.
pub fn cmd_nmse_vs_blocks(cfg: &ScenarioConfig) -> Result<ResultTable, ExperimentError> {
    cfg.validate()?;
    let t0 = std::time::Instant::now();
    let seeds = seed_list(cfg);
    let tasks: Vec<(usize, u64)> = cfg
        .i_sweep
        .iter()
        .enumerate()
        .flat_map(|(si, _)| seeds.iter().map(move |&s| (si, s)))
        .collect();
    let mut rows: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(si, seed)| -> Result<Vec<f64>, ExperimentError> {
            let i = cfg.i_sweep[si];
            let mut rng = RngStream::new(seed, (10 + si) as u64);
            let cs = sample_channels(cfg.n_t, cfg.n_r, cfg.m, &cfg.geometry(), cfg.rician_k_db, &mut rng);
            let grouping = build_grouping(cfg.m, i)?;
            let truth_agg = aggregate_rows(&cs.cascaded(), &grouping, i);
            let est = estimate_at(&cs, &grouping, cfg, None, &mut rng)?;
            let n_agg = nmse(&est.h_agg, &truth_agg)?;
            let n_full = nmse(&expand_to_elements(&est, i), &cs.cascaded())?;
            let est_q = estimate_at(&cs, &grouping, cfg, Some(cfg.quant_bits), &mut rng)?;
            let n_quant = nmse(&est_q.h_agg, &truth_agg)?;
            Ok(vec![0.0, i as f64, seed as f64, n_agg, n_full, n_quant])
        })
        .collect::<Result<_, _>>()?;
    sort_rows(&mut rows);
    append_aggregates(&mut rows, &[1], 2, &[3, 4, 5]);
    Ok(ResultTable {
        experiment: "nmse".into(),
        columns: vec![
            "agg".into(),
            "i".into(),
            "seed".into(),
            "nmse_agg".into(),
            "nmse_full".into(),
            "nmse_agg_quant".into(),
        ],
        rows,
        manifest: manifest_for("nmse", cfg, &seeds, t0.elapsed().as_secs_f64()),
    })
}

/// Inner/outer iteration rate traces for random and LoS-CSI phase inits.
pub fn cmd_nb_convergence(cfg: &ScenarioConfig) -> Result<ResultTable, ExperimentError> {
    cfg.validate()?;
    let t0 = std::time::Instant::now();
    let seeds = seed_list(cfg);
    let i = cfg.i_blocks;
    let mut rows: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<Vec<f64>>, ExperimentError> {
            let mut rng = RngStream::new(seed, 20);
            let cs = sample_channels(cfg.n_t, cfg.n_r, cfg.m, &cfg.geometry(), cfg.rician_k_db, &mut rng);
            let grouping = build_grouping(cfg.m, i)?;
            let sizes = group_sizes(&grouping, i);
            let est = estimate_at(&cs, &grouping, cfg, None, &mut rng)?;
            let schedule = Schedule::default();
            // LoS init: short pre-run on the large-timescale estimate
            let los = estimate_los_at(&cs, &grouping, cfg, 4, &mut rng)?;
            let pre = optimize_on(
                &los.h_agg,
                &sizes,
                CsiSource::EstimatedLos,
                cfg,
                PhaseVector::ones(i),
                &Schedule { max_outer: 3, ..schedule },
            )?;
            let runs = [
                (0.0, PhaseVector::random(i, 8, &mut rng)),
                (1.0, pre.theta.clone()),
            ];
            let mut out = Vec::new();
            for (tag, init) in runs {
                let sol = optimize_on(
                    &est.h_agg,
                    &sizes,
                    CsiSource::EstimatedSmall,
                    cfg,
                    init,
                    &schedule,
                )?;
                for pt in &sol.trace {
                    out.push(vec![
                        0.0,
                        tag,
                        seed as f64,
                        pt.outer as f64,
                        pt.inner as f64,
                        pt.rate,
                    ]);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    sort_rows(&mut rows);
    append_aggregates(&mut rows, &[1, 3, 4], 2, &[5]);
    Ok(ResultTable {
        experiment: "nb_converge".into(),
        columns: vec![
            "agg".into(),
            "init".into(),
            "seed".into(),
            "outer".into(),
            "inner".into(),
            "rate".into(),
        ],
        rows,
        manifest: manifest_for("nb_converge", cfg, &seeds, t0.elapsed().as_secs_f64()),
    })
}

/// Data rate versus pilot blocks for the five CSI regimes, all evaluated on
/// the true channels.
pub fn cmd_rate_vs_blocks(cfg: &ScenarioConfig) -> Result<ResultTable, ExperimentError> {
    cfg.validate()?;
    let t0 = std::time::Instant::now();
    let seeds = seed_list(cfg);
    let tasks: Vec<(usize, u64)> = cfg
        .i_sweep
        .iter()
        .enumerate()
        .flat_map(|(si, _)| seeds.iter().map(move |&s| (si, s)))
        .collect();
    let schedule = Schedule::default();
    let mut rows: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(si, seed)| -> Result<Vec<f64>, ExperimentError> {
            let i = cfg.i_sweep[si];
            let mut rng = RngStream::new(seed, (40 + si) as u64);
            let cs = sample_channels(cfg.n_t, cfg.n_r, cfg.m, &cfg.geometry(), cfg.rician_k_db, &mut rng);
            let m = cfg.m;
            let ungrouped = build_grouping(m, m)?;
            let singleton_sizes = vec![1usize; m];
            // perfect-CSI ungrouped
            let sol_pu = optimize_on(
                &cs.cascaded(),
                &singleton_sizes,
                CsiSource::Perfect,
                cfg,
                PhaseVector::ones(m),
                &schedule,
            )?;
            let r_pu = eval_rate_on_truth(&cs, &ungrouped, m, &sol_pu, cfg)?;
            // estimated ungrouped (full-resolution training)
            let est_full = estimate_at(&cs, &ungrouped, cfg, None, &mut rng)?;
            let sol_eu = optimize_on(
                &est_full.h_agg,
                &singleton_sizes,
                CsiSource::EstimatedSmall,
                cfg,
                PhaseVector::ones(m),
                &schedule,
            )?;
            let r_eu = eval_rate_on_truth(&cs, &ungrouped, m, &sol_eu, cfg)?;
            // grouped regimes at I = i
            let grouping = build_grouping(m, i)?;
            let sizes = group_sizes(&grouping, i);
            let sol_pg = optimize_on(
                &aggregate_rows(&cs.cascaded(), &grouping, i),
                &sizes,
                CsiSource::Perfect,
                cfg,
                PhaseVector::ones(i),
                &schedule,
            )?;
            let r_pg = eval_rate_on_truth(&cs, &grouping, i, &sol_pg, cfg)?;
            let sol_sg = optimize_on(
                &aggregate_rows(&cs.cascaded_los(), &grouping, i),
                &sizes,
                CsiSource::EstimatedLos,
                cfg,
                PhaseVector::ones(i),
                &schedule,
            )?;
            let r_sg = eval_rate_on_truth(&cs, &grouping, i, &sol_sg, cfg)?;
            let r_prop = proposed_rate_at(&cs, i, cfg, &schedule, &mut rng)?;
            Ok(vec![0.0, i as f64, seed as f64, r_pu, r_eu, r_pg, r_sg, r_prop])
        })
        .collect::<Result<_, _>>()?;
    sort_rows(&mut rows);
    append_aggregates(&mut rows, &[1], 2, &[3, 4, 5, 6, 7]);
    Ok(ResultTable {
        experiment: "rate_vs_blocks".into(),
        columns: vec![
            "agg".into(),
            "i".into(),
            "seed".into(),
            "rate_perfect_ungrouped".into(),
            "rate_estimated_ungrouped".into(),
            "rate_perfect_grouped".into(),
            "rate_statistical_grouped".into(),
            "rate_proposed".into(),
        ],
        rows,
        manifest: manifest_for("rate_vs_blocks", cfg, &seeds, t0.elapsed().as_secs_f64()),
    })
}

/// Achievable (overhead-discounted) rate versus vehicle speed for the
/// adaptive-I, fixed-I, fixed-surface full-estimation, full-estimation, and
/// statistical-CSI schemes.
pub fn cmd_rate_vs_speed(cfg: &ScenarioConfig) -> Result<ResultTable, ExperimentError> {
    cfg.validate()?;
    let t0 = std::time::Instant::now();
    let seeds = seed_list(cfg);
    let schedule = Schedule::default();
    let i_fix = cfg.i_blocks.min(cfg.m);
    let m_small = i_fix.min(cfg.m);
    // candidate pilot-block counts for the adaptive scheme (0 = statistical)
    let mut cands: Vec<usize> = cfg.i_sweep.iter().copied().filter(|&i| i <= cfg.m).collect();
    if !cands.contains(&i_fix) {
        cands.push(i_fix);
    }
    cands.sort_unstable();
    cands.dedup();

    // per-seed rates are speed-independent; only the overhead discount moves
    struct SeedRates {
        seed: u64,
        per_cand: Vec<(usize, f64)>,
        r_stat: f64,
        r_full: f64,
        r_small: f64,
    }
    let seed_rates: Vec<SeedRates> = seeds
        .par_iter()
        .map(|&seed| -> Result<SeedRates, ExperimentError> {
            let mut rng = RngStream::new(seed, 60);
            let cs = sample_channels(cfg.n_t, cfg.n_r, cfg.m, &cfg.geometry(), cfg.rician_k_db, &mut rng);
            let mut per_cand = Vec::new();
            for &i in &cands {
                per_cand.push((i, proposed_rate_at(&cs, i, cfg, &schedule, &mut rng)?));
            }
            // statistical CSI: LoS-only optimization, zero training overhead
            let grouping = build_grouping(cfg.m, i_fix)?;
            let sol_stat = optimize_on(
                &aggregate_rows(&cs.cascaded_los(), &grouping, i_fix),
                &group_sizes(&grouping, i_fix),
                CsiSource::EstimatedLos,
                cfg,
                PhaseVector::ones(i_fix),
                &schedule,
            )?;
            let r_stat = eval_rate_on_truth(&cs, &grouping, i_fix, &sol_stat, cfg)?;
            // full estimation of the whole surface
            let r_full = proposed_rate_at(&cs, cfg.m, cfg, &schedule, &mut rng)?;
            // fixed reduced surface with full per-element estimation
            let cs_small = cs.truncate_elements(m_small);
            let small_grouping = build_grouping(m_small, m_small)?;
            let est_small = estimate_at(&cs_small, &small_grouping, cfg, None, &mut rng)?;
            let sol_small = optimize_on(
                &est_small.h_agg,
                &vec![1usize; m_small],
                CsiSource::EstimatedSmall,
                cfg,
                PhaseVector::ones(m_small),
                &schedule,
            )?;
            let r_small = eval_rate_on_truth(&cs_small, &small_grouping, m_small, &sol_small, cfg)?;
            Ok(SeedRates { seed, per_cand, r_stat, r_full, r_small })
        })
        .collect::<Result<_, _>>()?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for &v_kmh in &cfg.speeds_kmh {
        let v = v_kmh / 3.6;
        let model = TimescaleModel::new(
            v,
            cfg.f_c,
            cfg.los_coh_multiple,
            cfg.slot(),
            cfg.n_t,
            cfg.n_t,
        )?;
        for sr in &seed_rates {
            let mut cand_pairs: Vec<(usize, f64)> = vec![(0, sr.r_stat)];
            cand_pairs.extend(sr.per_cand.iter().copied());
            let chosen = select_pilot_blocks(&model, &cand_pairs)?;
            let rate_of = |i: usize| -> f64 {
                cand_pairs.iter().find(|(c, _)| *c == i).map(|(_, r)| *r).unwrap()
            };
            let discounted = |i: usize, r: f64| -> f64 {
                if i == 0 {
                    r
                } else {
                    achievable_rate(r, model.estimation_time(i), model.t_coh_nlos)
                }
            };
            let r_adapt = discounted(chosen, rate_of(chosen));
            let r_fixed_i = discounted(i_fix, rate_of(i_fix));
            let r_fixed_m = discounted(m_small, sr.r_small);
            let r_full = discounted(cfg.m, sr.r_full);
            rows.push(vec![
                0.0,
                v_kmh,
                sr.seed as f64,
                r_adapt,
                r_fixed_i,
                r_fixed_m,
                r_full,
                sr.r_stat,
            ]);
        }
    }
    sort_rows(&mut rows);
    append_aggregates(&mut rows, &[1], 2, &[3, 4, 5, 6, 7]);
    Ok(ResultTable {
        experiment: "rate_vs_speed".into(),
        columns: vec![
            "agg".into(),
            "v_kmh".into(),
            "seed".into(),
            "rate_adaptive".into(),
            "rate_fixed_i".into(),
            "rate_fixed_m_full".into(),
            "rate_full_estimation".into(),
            "rate_statistical".into(),
        ],
        rows,
        manifest: manifest_for("rate_vs_speed", cfg, &seeds, t0.elapsed().as_secs_f64()),
    })
}

/// Frequency-selective broadband scenario: per-VUE tapped cascades combined
/// into per-carrier aggregated equivalent channels (no precoder baked in).
pub fn build_bb_scenario(
    cfg: &ScenarioConfig,
    n_carriers: usize,
    c_min: f64,
    seed: u64,
) -> Result<BroadbandScenario, ExperimentError> {
    const TAPS: usize = 4;
    let delta_f = cfg.bandwidth_bb / n_carriers as f64;
    let grouping = build_grouping(cfg.m, cfg.i_blocks)?;
    // exponential power-delay profile, unit total power
    let weights: Vec<f64> = {
        let raw: Vec<f64> = (0..TAPS).map(|l| (-(l as f64)).exp()).collect();
        let tot: f64 = raw.iter().sum();
        raw.iter().map(|w| (w / tot).sqrt()).collect()
    };
    let mut ec = Vec::with_capacity(cfg.k_vues);
    for k in 0..cfg.k_vues {
        let mut rng = RngStream::new(seed, 900 + k as u64);
        let geo = cfg.geometry_at(cfg.distances[k]);
        let taps: Vec<CMat> = (0..TAPS)
            .map(|_| {
                sample_channels(cfg.n_t, cfg.n_r, cfg.m, &geo, cfg.rician_k_db, &mut rng)
                    .cascaded()
            })
            .collect();
        let mut row = Vec::with_capacity(n_carriers);
        for n in 0..n_carriers {
            let mut casc = CMat::zeros(cfg.m, cfg.n_r * cfg.n_t);
            for (l, tap) in taps.iter().enumerate() {
                let phase = -2.0 * PI * n as f64 * delta_f * l as f64 * cfg.tau_rms;
                casc += tap * C64::from_polar(weights[l], phase);
            }
            let h_agg = aggregate_rows(&casc, &grouping, cfg.i_blocks);
            row.push(EquivalentChannel::from_aggregated(
                &h_agg,
                cfg.n_r,
                cfg.n_t,
                CsiSource::Perfect,
            )?);
        }
        ec.push(row);
    }
    Ok(BroadbandScenario {
        k_vues: cfg.k_vues,
        n_carriers,
        delta_f,
        f_c: cfg.f_c,
        velocities: cfg.velocities_bb.clone(),
        distances: cfg.distances.clone(),
        p_max: cfg.p_max_bb,
        p_tot: cfg.p_tot_bb,
        c_min,
        n0: cfg.n0_w_hz(),
        ec,
    })
}

/// Broadband allocation: per-round throughput/power traces at the configured
/// carrier count (kind = 0) plus a total-throughput sweep over `n_sweep`
/// carrier counts (kind = 1; run without the QoS floor so every carrier
/// count is feasible and the ordering is an apples-to-apples comparison).
pub fn cmd_bb_allocate(cfg: &ScenarioConfig) -> Result<ResultTable, ExperimentError> {
    cfg.validate()?;
    let t0 = std::time::Instant::now();
    let seeds = seed_list(cfg);

    let trace_rows: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<Vec<f64>>, ExperimentError> {
            let scen = build_bb_scenario(cfg, cfg.n_carriers, cfg.c_min, seed)?;
            let (_, _, records) = alternate_p1(&scen, &P1Config::default())?;
            let mut out = Vec::new();
            for rec in &records {
                for k in 0..cfg.k_vues {
                    out.push(vec![
                        0.0,
                        0.0,
                        cfg.n_carriers as f64,
                        seed as f64,
                        rec.round as f64,
                        k as f64,
                        rec.per_vue[k],
                        rec.per_vue_power[k],
                    ]);
                }
                out.push(vec![
                    0.0,
                    0.0,
                    cfg.n_carriers as f64,
                    seed as f64,
                    rec.round as f64,
                    -1.0,
                    rec.total,
                    rec.per_vue_power.iter().sum(),
                ]);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();

    let sweep_tasks: Vec<(usize, u64)> = cfg
        .n_sweep
        .iter()
        .enumerate()
        .flat_map(|(si, _)| seeds.iter().map(move |&s| (si, s)))
        .collect();
    let sweep_cfg = P1Config { rounds: 4, ..P1Config::default() };
    let sweep_rows: Vec<Vec<f64>> = sweep_tasks
        .par_iter()
        .map(|&(si, seed)| -> Result<Vec<f64>, ExperimentError> {
            let n = cfg.n_sweep[si];
            let scen = build_bb_scenario(cfg, n, 0.0, seed)?;
            let (_, _, records) = alternate_p1(&scen, &sweep_cfg)?;
            let last = records.last().expect("at least one round");
            Ok(vec![
                0.0,
                1.0,
                n as f64,
                seed as f64,
                -1.0,
                -1.0,
                last.total,
                last.per_vue_power.iter().sum(),
            ])
        })
        .collect::<Result<_, _>>()?;

    let mut rows = trace_rows;
    rows.extend(sweep_rows);
    sort_rows(&mut rows);
    append_aggregates(&mut rows, &[1, 2, 4, 5], 3, &[6, 7]);
    Ok(ResultTable {
        experiment: "bb_allocate".into(),
        columns: vec![
            "agg".into(),
            "kind".into(),
            "n_carriers".into(),
            "seed".into(),
            "round".into(),
            "vue".into(),
            "throughput".into(),
            "power".into(),
        ],
        rows,
        manifest: manifest_for("bb_allocate", cfg, &seeds, t0.elapsed().as_secs_f64()),
    })
}
