//! Resource allocation and hybrid beamforming for the broadband multi-VUE
//! system: relaxed-penalized D.C. subcarrier/power allocation and the outer
//! alternation with per-carrier water-filling and per-VUE passive
//! beamforming.
//!
//! The binary indicators are relaxed to column-stochastic `rho_hat` with the
//! penalty `G = sum rho_hat (1 - rho_hat)` driven to zero by an increasing
//! multiplier schedule; the rho-p product is replaced by the auxiliary
//! `p_hat`, and the objective splits into concave `F1` minus concave `F2`
//! handled by majorize-maximize (Taylor-linearized `F2`). The coupling
//! `p_hat <= rho_hat * P_max` (the relaxation of the per-carrier power box
//! under exclusive assignment) and the surrogate QoS floor are enforced by
//! quadratic penalties with doubling multipliers inside each convex solve.

use crate::beamform_nb::{
    effective_mimo, opt_active_waterfill, BeamformError, PhaseVector,
};
use crate::numerics::{eigvals_hermitian, CMat, C64};
use crate::ofdm_mvue::{
    ici_from_powers, total_throughput, Allocation, BroadbandScenario, OfdmError, RISProfiles,
    RMat,
};
use crate::optimizer::{pga_maximize, FeasibleRegion, OptimizerError, PgaConfig, RVec};
use std::f64::consts::LN_2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("rho_hat entry {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("expansion point violates the surrogate QoS floor (VUE {k}, margin {margin})")]
    SurrogateInfeasible { k: usize, margin: f64 },
    #[error("no QoS-feasible starting point found after the repair heuristic")]
    QoSInfeasible,
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Ofdm(#[from] OfdmError),
    #[error(transparent)]
    Beamform(#[from] BeamformError),
}

/// Relaxed allocation point: auxiliary powers `p_hat` (the rho-p product)
/// and relaxed indicators `rho_hat` in `[0,1]` with unit column sums.
#[derive(Debug, Clone)]
pub struct RelaxedAllocation {
    pub p_hat: RMat,
    pub rho_hat: RMat,
    /// Binary-penalty multiplier active when this point was produced.
    pub lambda: f64,
}

/// One accepted D.C. iteration.
#[derive(Debug, Clone)]
pub struct DCIter {
    pub lambda: f64,
    pub upsilon: f64,
    pub upsilon_app: f64,
    pub penalty_g: f64,
    /// Per-VUE relaxed QoS margin `delta_f (F1 - F2) - C_min` in bits/s.
    pub qos_margin: Vec<f64>,
}

/// Trace of the D.C. loop.
#[derive(Debug, Clone, Default)]
pub struct DCTrace {
    pub iters: Vec<DCIter>,
}

/// Per-(VUE, carrier) eigenvalues of `H H^H` for the current profiles and
/// precoders; everything in the D.C. objective reduces to these gains.
#[derive(Debug, Clone)]
pub struct Gains {
    pub mu: Vec<Vec<Vec<f64>>>,
}

pub fn precompute_gains(profiles: &RISProfiles, scen: &BroadbandScenario) -> Gains {
    let mu = (0..scen.k_vues)
        .map(|k| {
            (0..scen.n_carriers)
                .map(|n| {
                    let h = effective_mimo(&profiles.theta[k], &scen.ec[k][n])
                        .expect("profile length matches");
                    eigvals_hermitian(&(&h * h.adjoint()))
                        .into_iter()
                        .map(|l| l.max(0.0))
                        .collect()
                })
                .collect()
        })
        .collect();
    Gains { mu }
}

/// Binary-deviation penalty `sum rho_hat (1 - rho_hat)`.
pub fn penalty_g(rho_hat: &RMat) -> Result<f64, ResourceError> {
    let mut acc = 0.0;
    for &r in rho_hat.iter() {
        if !(-1e-9..=1.0 + 1e-9).contains(&r) {
            return Err(ResourceError::OutOfRange(r));
        }
        acc += r * (1.0 - r);
    }
    Ok(acc)
}

/// `grad G = 1 - 2 rho_hat` elementwise.
pub fn grad_g_rho(rho_hat: &RMat) -> RMat {
    rho_hat.map(|r| 1.0 - 2.0 * r)
}

/// Per-carrier interference-plus-noise `S_n = ICI_hat_n + N0 delta_f` under
/// the relaxed powers.
pub fn s_values(p_hat: &RMat, scen: &BroadbandScenario) -> Vec<f64> {
    (0..scen.n_carriers)
        .map(|n| ici_from_powers(p_hat, n, scen) + scen.noise_per_carrier())
        .collect()
}

/// `F1^k = sum_n log2 det(S_n I + p_hat_{k,n} H H^H)` via the eigenvalue
/// gains.
pub fn f1(k: usize, p_hat: &RMat, gains: &Gains, scen: &BroadbandScenario) -> f64 {
    let s = s_values(p_hat, scen);
    f1_with_s(k, p_hat, &s, gains)
}

fn f1_with_s(k: usize, p_hat: &RMat, s: &[f64], gains: &Gains) -> f64 {
    let mut acc = 0.0;
    for (n, &sn) in s.iter().enumerate() {
        for &mu in &gains.mu[k][n] {
            acc += (sn + p_hat[(k, n)] * mu).log2();
        }
    }
    acc
}

/// `F2^k = N_r sum_n log2(S_n)` (identical for every `k`).
pub fn f2(_k: usize, p_hat: &RMat, scen: &BroadbandScenario) -> f64 {
    let nr = scen.nr() as f64;
    s_values(p_hat, scen).iter().map(|&sn| nr * sn.log2()).sum()
}

/// Per-VUE relaxed rate `delta_f (F1^k - F2^k)` in bits/s.
pub fn relaxed_rate(k: usize, p_hat: &RMat, gains: &Gains, scen: &BroadbandScenario) -> f64 {
    scen.delta_f * (f1(k, p_hat, gains, scen) - f2(k, p_hat, scen))
}

/// Gradient of `F1^k` with respect to every `p_hat` entry: the own-power
/// signal term plus the ICI chain through every other carrier.
pub fn grad_f1_p(k: usize, p_hat: &RMat, gains: &Gains, scen: &BroadbandScenario) -> RMat {
    let s = s_values(p_hat, scen);
    grad_f1_p_with_s(k, p_hat, &s, gains, scen)
}

fn grad_f1_p_with_s(
    k: usize,
    p_hat: &RMat,
    s: &[f64],
    gains: &Gains,
    scen: &BroadbandScenario,
) -> RMat {
    let pre = scen.ici_prefactor();
    // B_n = sum_r 1/(S_n + p_hat_{k,n} mu_r): sensitivity of F1^k to S_n
    let b: Vec<f64> = (0..scen.n_carriers)
        .map(|n| {
            gains.mu[k][n]
                .iter()
                .map(|&mu| 1.0 / (s[n] + p_hat[(k, n)] * mu))
                .sum()
        })
        .collect();
    RMat::from_fn(scen.k_vues, scen.n_carriers, |d, l| {
        let mut g = 0.0;
        if d == k {
            for &mu in &gains.mu[k][l] {
                g += mu / (s[l] + p_hat[(k, l)] * mu);
            }
        }
        let vd2 = scen.velocities[d] * scen.velocities[d];
        if vd2 > 0.0 {
            let mut ici_part = 0.0;
            for (n, &bn) in b.iter().enumerate() {
                if n != l {
                    let gap = n as f64 - l as f64;
                    ici_part += bn / (gap * gap);
                }
            }
            g += pre * vd2 * ici_part;
        }
        g / LN_2
    })
}

/// Gradient of `sum_k F1^k` in one pass: the per-carrier sensitivities are
/// accumulated over VUEs before the ICI convolution.
fn grad_f1_sum_with_s(
    p_hat: &RMat,
    s: &[f64],
    gains: &Gains,
    scen: &BroadbandScenario,
) -> RMat {
    let (kk, nn) = (scen.k_vues, scen.n_carriers);
    let pre = scen.ici_prefactor();
    let mut b_sum = vec![0.0; nn];
    let mut own = RMat::zeros(kk, nn);
    for k in 0..kk {
        for n in 0..nn {
            let mut o = 0.0;
            let mut b = 0.0;
            for &mu in &gains.mu[k][n] {
                let den = s[n] + p_hat[(k, n)] * mu;
                o += mu / den;
                b += 1.0 / den;
            }
            own[(k, n)] = o;
            b_sum[n] += b;
        }
    }
    let conv: Vec<f64> = (0..nn)
        .map(|l| {
            (0..nn)
                .filter(|&n| n != l)
                .map(|n| {
                    let gap = n as f64 - l as f64;
                    b_sum[n] / (gap * gap)
                })
                .sum()
        })
        .collect();
    RMat::from_fn(kk, nn, |d, l| {
        let vd2 = scen.velocities[d] * scen.velocities[d];
        (own[(d, l)] + pre * vd2 * conv[l]) / LN_2
    })
}

/// Gradient of `F2^k` with respect to every `p_hat` entry: the velocity of
/// the differentiated entry's VUE factors out of the carrier sum.
pub fn grad_f2_p(_k: usize, p_hat: &RMat, scen: &BroadbandScenario) -> RMat {
    let s = s_values(p_hat, scen);
    let pre = scen.ici_prefactor();
    let nr = scen.nr() as f64;
    RMat::from_fn(scen.k_vues, scen.n_carriers, |d, l| {
        let vd2 = scen.velocities[d] * scen.velocities[d];
        if vd2 == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for (n, &sn) in s.iter().enumerate() {
            if n != l {
                let gap = n as f64 - l as f64;
                acc += 1.0 / (sn * gap * gap);
            }
        }
        nr * pre * vd2 * acc / LN_2
    })
}

/// Cached expansion point for the Taylor surrogates.
#[derive(Debug, Clone)]
pub struct Expansion {
    pub point: RelaxedAllocation,
    pub f1_0: Vec<f64>,
    pub f2_0: Vec<f64>,
    pub grad_f2_0: Vec<RMat>,
    pub g_0: f64,
    pub grad_g_0: RMat,
}

pub fn expansion_at(
    point: &RelaxedAllocation,
    gains: &Gains,
    scen: &BroadbandScenario,
) -> Result<Expansion, ResourceError> {
    let f1_0 = (0..scen.k_vues).map(|k| f1(k, &point.p_hat, gains, scen)).collect();
    let f2_0 = (0..scen.k_vues).map(|k| f2(k, &point.p_hat, scen)).collect();
    let grad_f2_0 = (0..scen.k_vues).map(|k| grad_f2_p(k, &point.p_hat, scen)).collect();
    Ok(Expansion {
        point: point.clone(),
        f1_0,
        f2_0,
        grad_f2_0,
        g_0: penalty_g(&point.rho_hat)?,
        grad_g_0: grad_g_rho(&point.rho_hat),
    })
}

/// Linearized `F2^k` at the expansion point, evaluated at `p_hat`.
pub fn f2_tilde(exp: &Expansion, k: usize, p_hat: &RMat) -> f64 {
    let diff = p_hat - &exp.point.p_hat;
    exp.f2_0[k] + exp.grad_f2_0[k].iter().zip(diff.iter()).map(|(g, d)| g * d).sum::<f64>()
}

/// Surrogate bundle at a candidate: per-VUE `F2~`, the majorant `J`, and the
/// approximated objective `Upsilon_app = sum F1 - J`.
pub fn taylor_surrogates(
    exp: &Expansion,
    cand: &RelaxedAllocation,
    lambda: f64,
    gains: &Gains,
    scen: &BroadbandScenario,
) -> (Vec<f64>, f64, f64) {
    let f2t: Vec<f64> = (0..scen.k_vues).map(|k| f2_tilde(exp, k, &cand.p_hat)).collect();
    let rho_diff = &cand.rho_hat - &exp.point.rho_hat;
    let g_lin = exp.g_0
        + exp
            .grad_g_0
            .iter()
            .zip(rho_diff.iter())
            .map(|(g, d)| g * d)
            .sum::<f64>();
    let j = f2t.iter().sum::<f64>() + lambda * g_lin;
    let f1_sum: f64 = (0..scen.k_vues).map(|k| f1(k, &cand.p_hat, gains, scen)).sum();
    (f2t, j, f1_sum - j)
}

/// Exact penalized objective `Upsilon = sum(F1 - F2) - lambda G`.
pub fn upsilon(
    point: &RelaxedAllocation,
    lambda: f64,
    gains: &Gains,
    scen: &BroadbandScenario,
) -> Result<f64, ResourceError> {
    let mut acc = 0.0;
    for k in 0..scen.k_vues {
        acc += f1(k, &point.p_hat, gains, scen) - f2(k, &point.p_hat, scen);
    }
    Ok(acc - lambda * penalty_g(&point.rho_hat)?)
}

/// Convex-solve configuration for one P3 instance.
#[derive(Debug, Clone, Copy)]
pub struct P3Config {
    pub pga: PgaConfig,
    pub max_penalty_doublings: u32,
    /// Error out when the expansion point violates the surrogate QoS floor
    /// (otherwise the quadratic penalty pulls the iterate back).
    pub strict_qos_start: bool,
}

impl Default for P3Config {
    fn default() -> Self {
        Self {
            pga: PgaConfig {
                max_iters: 150,
                grad_map_tol: 1e-5,
                ..PgaConfig::default()
            },
            max_penalty_doublings: 10,
            strict_qos_start: false,
        }
    }
}

fn encode(p_hat: &RMat, rho_hat: &RMat) -> RVec {
    let mut v = p_hat.as_slice().to_vec();
    v.extend_from_slice(rho_hat.as_slice());
    RVec::from_vec(v)
}

fn decode(x: &RVec, k: usize, n: usize) -> (RMat, RMat) {
    let p = RMat::from_column_slice(k, n, &x.as_slice()[..k * n]);
    let r = RMat::from_column_slice(k, n, &x.as_slice()[k * n..]);
    (p, r)
}

fn allocation_region(scen: &BroadbandScenario) -> FeasibleRegion {
    FeasibleRegion {
        box_len: scen.k_vues * scen.n_carriers,
        lo: 0.0,
        hi: scen.p_max,
        sum_bound: scen.p_tot,
        simplex_rows: scen.k_vues,
        simplex_cols: scen.n_carriers,
    }
}

/// Clamp `p_hat` under the coupling `p_hat <= rho_hat P_max` so expansion
/// points carry zero penalty.
fn repair_coupling(mut point: RelaxedAllocation, p_max: f64) -> RelaxedAllocation {
    for k in 0..point.p_hat.nrows() {
        for n in 0..point.p_hat.ncols() {
            let cap = point.rho_hat[(k, n)].clamp(0.0, 1.0) * p_max;
            point.p_hat[(k, n)] = point.p_hat[(k, n)].clamp(0.0, cap);
        }
    }
    point
}

/// One majorize-maximize step: maximize `Upsilon_app` over the relaxed
/// feasible set, with the coupling and surrogate-QoS constraints handled by
/// quadratic penalties whose multipliers double on violation.
pub fn solve_p3(
    exp: &Expansion,
    lambda: f64,
    gains: &Gains,
    scen: &BroadbandScenario,
    cfg: &P3Config,
) -> Result<RelaxedAllocation, ResourceError> {
    let (kk, nn) = (scen.k_vues, scen.n_carriers);
    let qos_unit = scen.c_min / scen.delta_f;
    if cfg.strict_qos_start && scen.c_min > 0.0 {
        for k in 0..kk {
            let margin = exp.f1_0[k] - exp.f2_0[k] - qos_unit;
            if margin < -1e-3 * qos_unit.max(1e-12) {
                return Err(ResourceError::SurrogateInfeasible { k, margin: margin * scen.delta_f });
            }
        }
    }
    let region = allocation_region(scen);
    let scale = 1.0 + exp.f1_0.iter().map(|v| v.abs()).sum::<f64>();
    let mut lam_couple = scale / (scen.p_max * scen.p_max);
    let mut lam_qos = if scen.c_min > 0.0 { scale / (qos_unit * qos_unit).max(1e-30) } else { 0.0 };
    let grad_f2_sum: RMat = {
        let mut g = RMat::zeros(kk, nn);
        for gk in &exp.grad_f2_0 {
            g += gk;
        }
        g
    };
    let mut x0 = encode(&exp.point.p_hat, &exp.point.rho_hat);

    let mut best: Option<RelaxedAllocation> = None;
    for _ in 0..=cfg.max_penalty_doublings {
        let objective = |x: &RVec| -> f64 {
            let (p, r) = decode(x, kk, nn);
            let s = s_values(&p, scen);
            let mut f1_sum = 0.0;
            let mut qos_pen = 0.0;
            for k in 0..kk {
                let f1k = f1_with_s(k, &p, &s, gains);
                f1_sum += f1k;
                if lam_qos > 0.0 {
                    let m = qos_unit - (f1k - f2_tilde(exp, k, &p));
                    if m > 0.0 {
                        qos_pen += lam_qos * m * m;
                    }
                }
            }
            let f2t_sum: f64 = (0..kk).map(|k| f2_tilde(exp, k, &p)).sum();
            let rho_diff = &r - &exp.point.rho_hat;
            let g_lin = exp.g_0
                + exp
                    .grad_g_0
                    .iter()
                    .zip(rho_diff.iter())
                    .map(|(g, d)| g * d)
                    .sum::<f64>();
            let mut couple_pen = 0.0;
            for k in 0..kk {
                for n in 0..nn {
                    let v = (p[(k, n)] - r[(k, n)] * scen.p_max).max(0.0);
                    couple_pen += lam_couple * v * v;
                }
            }
            f1_sum - f2t_sum - lambda * g_lin - couple_pen - qos_pen
        };
        let gradient = |x: &RVec| -> RVec {
            let (p, r) = decode(x, kk, nn);
            let s = s_values(&p, scen);
            let mut dp = grad_f1_sum_with_s(&p, &s, gains, scen);
            dp -= &grad_f2_sum;
            // constant ascent direction on the indicator block
            let mut dr = exp.grad_g_0.map(|g| -lambda * g);
            for k in 0..kk {
                for n in 0..nn {
                    let v = (p[(k, n)] - r[(k, n)] * scen.p_max).max(0.0);
                    if v > 0.0 {
                        dp[(k, n)] -= 2.0 * lam_couple * v;
                        dr[(k, n)] += 2.0 * lam_couple * v * scen.p_max;
                    }
                }
            }
            if lam_qos > 0.0 {
                for k in 0..kk {
                    let m = qos_unit - (f1_with_s(k, &p, &s, gains) - f2_tilde(exp, k, &p));
                    if m > 0.0 {
                        let gk = grad_f1_p_with_s(k, &p, &s, gains, scen) - &exp.grad_f2_0[k];
                        dp += gk * (2.0 * lam_qos * m);
                    }
                }
            }
            encode(&dp, &dr)
        };
        let (x, _report) = pga_maximize(objective, gradient, &region, &x0, &cfg.pga)?;
        let (p, r) = decode(&x, kk, nn);
        let cand = RelaxedAllocation { p_hat: p, rho_hat: r, lambda };
        // violation check
        let mut couple_viol: f64 = 0.0;
        for k in 0..kk {
            for n in 0..nn {
                couple_viol = couple_viol
                    .max(cand.p_hat[(k, n)] - cand.rho_hat[(k, n)] * scen.p_max);
            }
        }
        let mut qos_viol: f64 = 0.0;
        if scen.c_min > 0.0 {
            for k in 0..kk {
                let m = qos_unit - (f1(k, &cand.p_hat, gains, scen) - f2_tilde(exp, k, &cand.p_hat));
                qos_viol = qos_viol.max(m);
            }
        }
        x0 = x;
        let couple_ok = couple_viol <= 1e-6 * scen.p_max;
        let qos_ok = qos_viol <= 1e-4 * qos_unit.max(1e-12);
        best = Some(cand);
        if couple_ok && qos_ok {
            break;
        }
        if !couple_ok {
            lam_couple *= 2.0;
        }
        if !qos_ok {
            lam_qos = (lam_qos * 2.0).max(scale / (qos_unit * qos_unit).max(1e-30));
        }
    }
    Ok(best.expect("at least one solve ran"))
}

/// Round a relaxed point to a binary allocation: per-column argmax of
/// `rho_hat` (ties to the VUE with the smaller QoS margin), powers taken
/// from `p_hat` at the winner and clamped into the box.
pub fn round_allocation(
    relaxed: &RelaxedAllocation,
    gains: &Gains,
    scen: &BroadbandScenario,
) -> Allocation {
    let (kk, nn) = (scen.k_vues, scen.n_carriers);
    let margins: Vec<f64> = (0..kk)
        .map(|k| relaxed_rate(k, &relaxed.p_hat, gains, scen) - scen.c_min)
        .collect();
    let mut rho = RMat::zeros(kk, nn);
    let mut p = RMat::zeros(kk, nn);
    for n in 0..nn {
        let mut winner = 0;
        for k in 1..kk {
            let d = relaxed.rho_hat[(k, n)] - relaxed.rho_hat[(winner, n)];
            if d > 1e-9 || (d.abs() <= 1e-9 && margins[k] < margins[winner]) {
                winner = k;
            }
        }
        rho[(winner, n)] = 1.0;
        p[(winner, n)] = relaxed.p_hat[(winner, n)].clamp(0.0, scen.p_max);
    }
    Allocation { rho, p }
}

/// Re-optimize the rounded powers on the fixed carrier ownership: rounding
/// discards the losers' relaxed power, so the budget is typically underspent.
/// Projected gradient ascent on the total rate over the owner powers (box
/// plus sum budget) with a doubling QoS penalty; the refined point is kept
/// only when it does not trade away QoS feasibility or total rate.
pub fn refine_powers(
    alloc: &Allocation,
    gains: &Gains,
    scen: &BroadbandScenario,
    cfg: &P3Config,
) -> Result<Allocation, ResourceError> {
    let (kk, nn) = (scen.k_vues, scen.n_carriers);
    let nr = scen.nr() as f64;
    let owner: Vec<usize> = (0..nn)
        .map(|n| (0..kk).find(|&k| alloc.rho[(k, n)] == 1.0).expect("unit column"))
        .collect();
    let to_p = |x: &RVec| -> RMat {
        let mut p = RMat::zeros(kk, nn);
        for n in 0..nn {
            p[(owner[n], n)] = x[n];
        }
        p
    };
    let rates = |p: &RMat| -> Vec<f64> {
        let s = s_values(p, scen);
        let f2_val: f64 = s.iter().map(|&sn| nr * sn.log2()).sum();
        (0..kk).map(|k| f1_with_s(k, p, &s, gains) - f2_val).collect()
    };
    let region = FeasibleRegion {
        box_len: nn,
        lo: 0.0,
        hi: scen.p_max,
        sum_bound: scen.p_tot,
        simplex_rows: 0,
        simplex_cols: 0,
    };
    let x0 = RVec::from_fn(nn, |n, _| alloc.p[(owner[n], n)]);
    let qos_unit = scen.c_min / scen.delta_f;
    let before = rates(&to_p(&x0));
    let qos_tol = qos_unit * (1.0 - 1e-6);

    let mut lam_qos = if scen.c_min > 0.0 { 1.0 } else { 0.0 };
    let mut best_x = x0.clone();
    for _ in 0..=cfg.max_penalty_doublings {
        let objective = |x: &RVec| -> f64 {
            let p = to_p(x);
            let r = rates(&p);
            let mut val: f64 = r.iter().sum();
            if lam_qos > 0.0 {
                for &rk in &r {
                    let m = (qos_unit - rk).max(0.0);
                    val -= lam_qos * m * m;
                }
            }
            val
        };
        let gradient = |x: &RVec| -> RVec {
            let p = to_p(x);
            let s = s_values(&p, scen);
            let df2 = grad_f2_p(0, &p, scen);
            let mut dp = grad_f1_sum_with_s(&p, &s, gains, scen) - &df2 * kk as f64;
            if lam_qos > 0.0 {
                let f2_val: f64 = s.iter().map(|&sn| nr * sn.log2()).sum();
                for k in 0..kk {
                    let m = qos_unit - (f1_with_s(k, &p, &s, gains) - f2_val);
                    if m > 0.0 {
                        let gk = grad_f1_p_with_s(k, &p, &s, gains, scen) - &df2;
                        dp += gk * (2.0 * lam_qos * m);
                    }
                }
            }
            RVec::from_fn(nn, |n, _| dp[(owner[n], n)])
        };
        let (x, _) = pga_maximize(objective, gradient, &region, &best_x, &cfg.pga)?;
        best_x = x;
        if lam_qos == 0.0 {
            break;
        }
        let r = rates(&to_p(&best_x));
        if r.iter().all(|&rk| rk >= qos_tol) {
            break;
        }
        lam_qos *= 2.0;
    }

    let after = rates(&to_p(&best_x));
    let ok = |r: &[f64]| r.iter().all(|&rk| rk >= qos_tol);
    let tot = |r: &[f64]| r.iter().sum::<f64>();
    let accept = if scen.c_min > 0.0 && ok(&before) && !ok(&after) {
        false
    } else if scen.c_min > 0.0 && !ok(&before) && ok(&after) {
        true
    } else {
        tot(&after) >= tot(&before)
    };
    if !accept {
        return Ok(alloc.clone());
    }
    let mut p = RMat::zeros(kk, nn);
    for n in 0..nn {
        p[(owner[n], n)] = best_x[n].clamp(0.0, scen.p_max);
    }
    Ok(Allocation { rho: alloc.rho.clone(), p })
}

/// Per-VUE rates (in bits/s/Hz summed over carriers) of a binary allocation
/// under the precomputed gains.
fn rounded_rates(alloc: &Allocation, gains: &Gains, scen: &BroadbandScenario) -> Vec<f64> {
    let q = alloc.effective_power();
    let s = s_values(&q, scen);
    let nr = scen.nr() as f64;
    let f2_val: f64 = s.iter().map(|&sn| nr * sn.log2()).sum();
    (0..scen.k_vues).map(|k| f1_with_s(k, &q, &s, gains) - f2_val).collect()
}

/// QoS repair of a rounded allocation: the relaxed point can satisfy the
/// floor through power mass on carriers the VUE does not win, which argmax
/// rounding then strips away. Greedily transfer carriers from the VUE with
/// the largest margin to the most violating one (picking the carrier the
/// receiver values most), re-optimizing the powers after each transfer.
pub fn repair_qos(
    alloc: Allocation,
    gains: &Gains,
    scen: &BroadbandScenario,
    cfg: &P3Config,
) -> Result<Allocation, ResourceError> {
    let mut alloc = refine_powers(&alloc, gains, scen, cfg)?;
    if scen.c_min <= 0.0 {
        return Ok(alloc);
    }
    let (kk, nn) = (scen.k_vues, scen.n_carriers);
    let qos_unit = scen.c_min / scen.delta_f;
    let qos_tol = qos_unit * (1.0 - 1e-6);
    for _ in 0..nn {
        let rates = rounded_rates(&alloc, gains, scen);
        let Some(k_bad) = (0..kk)
            .filter(|&k| rates[k] < qos_tol)
            .min_by(|&a, &b| rates[a].partial_cmp(&rates[b]).unwrap())
        else {
            break;
        };
        // donors ordered by margin, richest first; each must keep one carrier
        let mut donors: Vec<usize> = (0..kk).filter(|&k| k != k_bad).collect();
        donors.sort_by(|&a, &b| rates[b].partial_cmp(&rates[a]).unwrap());
        let mut transferred = false;
        for d in donors {
            let owned: Vec<usize> =
                (0..nn).filter(|&n| alloc.rho[(d, n)] == 1.0).collect();
            if owned.len() <= 1 || rates[d] <= rates[k_bad] {
                continue;
            }
            let n_best = owned
                .into_iter()
                .max_by(|&a, &b| {
                    let sa: f64 = gains.mu[k_bad][a].iter().sum();
                    let sb: f64 = gains.mu[k_bad][b].iter().sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .expect("nonempty");
            let p_n = alloc.p[(d, n_best)];
            alloc.rho[(d, n_best)] = 0.0;
            alloc.p[(d, n_best)] = 0.0;
            alloc.rho[(k_bad, n_best)] = 1.0;
            alloc.p[(k_bad, n_best)] = p_n;
            alloc = refine_powers(&alloc, gains, scen, cfg)?;
            transferred = true;
            break;
        }
        if !transferred {
            break;
        }
    }
    Ok(alloc)
}

/// D.C. loop: majorize-maximize under an increasing binary-penalty schedule,
/// then round. Accepted iterations keep `Upsilon_app` non-decreasing within
/// each penalty stage.
pub fn dc_loop(
    init: &RelaxedAllocation,
    gains: &Gains,
    scen: &BroadbandScenario,
    lambda_schedule: &[f64],
    max_outer: usize,
    cfg: &P3Config,
) -> Result<(RelaxedAllocation, Allocation, DCTrace), ResourceError> {
    let region = allocation_region(scen);
    let x = region.project(&encode(&init.p_hat, &init.rho_hat))?;
    let (p, mut r) = decode(&x, scen.k_vues, scen.n_carriers);
    // The linearized binary penalty has zero gradient on a column whose
    // entries tie exactly (grad G = 1 - 2/K at rho_hat = 1/K cancels on the
    // simplex), so the D.C. iteration can never leave a uniform start.
    // Re-weight tied columns by channel strength to break the symmetry.
    for n in 0..scen.n_carriers {
        let col: Vec<f64> = (0..scen.k_vues).map(|k| r[(k, n)]).collect();
        let spread = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - col.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread < 1e-9 {
            let s: Vec<f64> = (0..scen.k_vues)
                .map(|k| gains.mu[k][n].iter().sum::<f64>())
                .collect();
            let tot: f64 = s.iter().sum();
            if tot > 0.0 {
                for k in 0..scen.k_vues {
                    r[(k, n)] = s[k] / tot;
                }
            }
        }
    }
    let mut cur = repair_coupling(
        RelaxedAllocation { p_hat: p, rho_hat: r, lambda: lambda_schedule[0] },
        scen.p_max,
    );
    let mut trace = DCTrace::default();
    let per_stage = (max_outer / lambda_schedule.len()).max(1);

    for &lam in lambda_schedule {
        cur.lambda = lam;
        let mut prev_val = upsilon(&cur, lam, gains, scen)?;
        for _ in 0..per_stage {
            let exp = expansion_at(&cur, gains, scen)?;
            let cand = solve_p3(&exp, lam, gains, scen, cfg)?;
            let (_, _, ua) = taylor_surrogates(&exp, &cand, lam, gains, scen);
            let u_new = upsilon(&cand, lam, gains, scen)?;
            let margins: Vec<f64> = (0..scen.k_vues)
                .map(|k| relaxed_rate(k, &cand.p_hat, gains, scen) - scen.c_min)
                .collect();
            trace.iters.push(DCIter {
                lambda: lam,
                upsilon: u_new,
                upsilon_app: ua,
                penalty_g: penalty_g(&cand.rho_hat)?,
                qos_margin: margins,
            });
            let tol = 1e-9 * (1.0 + prev_val.abs());
            if ua < prev_val - tol {
                // majorize-maximize failed to improve; keep the current point
                trace.iters.pop();
                break;
            }
            cur = repair_coupling(cand, scen.p_max);
            let converged = (u_new - prev_val).abs() <= 1e-5 * (1.0 + prev_val.abs());
            prev_val = u_new;
            if converged {
                break;
            }
        }
    }
    let alloc = repair_qos(round_allocation(&cur, gains, scen), gains, scen, cfg)?;
    Ok((cur, alloc, trace))
}

/// Default binary-penalty schedule scaled to the objective magnitude of the
/// initial point.
pub fn default_lambda_schedule(
    init: &RelaxedAllocation,
    gains: &Gains,
    scen: &BroadbandScenario,
) -> Result<Vec<f64>, ResourceError> {
    let u0 = upsilon(init, 0.0, gains, scen)?;
    let base = (1.0 + u0.abs()) / (scen.k_vues * scen.n_carriers) as f64;
    Ok(vec![base, 10.0 * base, 100.0 * base, 1000.0 * base])
}

/// Relaxed-objective value of one VUE profile on its allocated carriers:
/// `sum_n log2 det(I + c_n (theta . H)(theta . H)^H)` with complex `theta`
/// allowed inside the unit disk.
fn passive_objective(
    theta: &[C64],
    carriers: &[(usize, f64)],
    slices: &[Vec<CMat>],
) -> f64 {
    let mut acc = 0.0;
    for (idx, &(_, c)) in carriers.iter().enumerate() {
        let sl = &slices[idx];
        let nr = sl[0].nrows();
        let mut h = CMat::zeros(nr, sl[0].ncols());
        for (t, s) in theta.iter().zip(sl) {
            h += s * *t;
        }
        let m = CMat::identity(nr, nr) + (&h * h.adjoint()) * C64::new(c, 0.0);
        acc += crate::numerics::logdet_hpd(&m).expect("HPD") / LN_2;
    }
    acc
}

/// Passive beamforming for one VUE with resources fixed: coordinate ascent
/// over the groups on the relaxed unit disk (projected Wirtinger gradient),
/// then amplitude normalization; the previous profile is kept when the
/// normalized result does not improve the true objective.
pub fn opt_passive_bb(
    k: usize,
    profiles: &RISProfiles,
    alloc: &Allocation,
    scen: &BroadbandScenario,
) -> Result<PhaseVector, ResourceError> {
    let q = alloc.effective_power();
    let s: Vec<f64> = (0..scen.n_carriers)
        .map(|n| ici_from_powers(&q, n, scen) + scen.noise_per_carrier())
        .collect();
    let carriers: Vec<(usize, f64)> = (0..scen.n_carriers)
        .filter(|&n| q[(k, n)] > 0.0)
        .map(|n| (n, q[(k, n)] / s[n]))
        .collect();
    if carriers.is_empty() {
        return Ok(profiles.theta[k].clone());
    }
    let i_groups = scen.ec[k][0].i_groups();
    let slices: Vec<Vec<CMat>> = carriers
        .iter()
        .map(|&(n, _)| (0..i_groups).map(|i| scen.ec[k][n].slice(i).clone()).collect())
        .collect();
    let mut theta: Vec<C64> = profiles.theta[k].theta().to_vec();
    let mut obj = passive_objective(&theta, &carriers, &slices);

    for _sweep in 0..6 {
        let sweep_start = obj;
        for m in 0..i_groups {
            // Wirtinger ascent on theta_m within the closed unit disk. With
            // the other coordinates fixed the per-carrier Gram matrix is
            // quadratic in theta_m,
            //   M(t) = K0 + |t|^2 Q + t A1 + conj(t) A1^H,
            // so precompute (K0, A1, Q) once per coordinate and each trial
            // evaluation only costs a small logdet.
            let forms: Vec<(CMat, CMat, CMat)> = carriers
                .iter()
                .enumerate()
                .map(|(idx, &(_, c))| {
                    let sl = &slices[idx];
                    let nr = sl[0].nrows();
                    let mut rest = CMat::zeros(nr, sl[0].ncols());
                    for (j, (t, s)) in theta.iter().zip(sl).enumerate() {
                        if j != m {
                            rest += s * *t;
                        }
                    }
                    let cc = C64::new(c, 0.0);
                    let k0 = CMat::identity(nr, nr) + (&rest * rest.adjoint()) * cc;
                    let a1 = (&sl[m] * rest.adjoint()) * cc;
                    let q = (&sl[m] * sl[m].adjoint()) * cc;
                    (k0, a1, q)
                })
                .collect();
            let m_of = |t: C64, k0: &CMat, a1: &CMat, q: &CMat| -> CMat {
                k0 + q * C64::new(t.norm_sqr(), 0.0) + a1 * t + a1.adjoint() * t.conj()
            };
            let eval = |t: C64| -> f64 {
                forms
                    .iter()
                    .map(|(k0, a1, q)| {
                        crate::numerics::logdet_hpd(&m_of(t, k0, a1, q)).expect("HPD") / LN_2
                    })
                    .sum()
            };
            let mut step = 0.5;
            for _ in 0..25 {
                // gradient wrt theta_m^*: sum_n tr(M^-1 (theta_m Q + A1^H))/ln2
                let mut grad = C64::new(0.0, 0.0);
                for (k0, a1, q) in &forms {
                    let m_inv = m_of(theta[m], k0, a1, q).try_inverse().expect("HPD");
                    let d = m_inv * (q * theta[m] + a1.adjoint());
                    let tr: C64 = (0..d.nrows()).map(|r| d[(r, r)]).sum();
                    grad += tr;
                }
                grad /= C64::new(LN_2, 0.0);
                if grad.norm() < 1e-9 * (1.0 + obj.abs()) {
                    break;
                }
                let mut advanced = false;
                let mut t = step;
                for _ in 0..15 {
                    let mut cand = theta[m] + grad * C64::new(t, 0.0);
                    if cand.norm() > 1.0 {
                        cand /= C64::new(cand.norm(), 0.0);
                    }
                    let o2 = eval(cand);
                    if o2 > obj {
                        theta[m] = cand;
                        obj = o2;
                        advanced = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !advanced {
                    break;
                }
                step = (step * 2.0).min(10.0);
            }
        }
        if obj - sweep_start <= 1e-6 * (1.0 + sweep_start.abs()) {
            break;
        }
    }
    // normalize to unit modulus and keep the better true-objective profile
    let unit: Vec<C64> = theta
        .iter()
        .map(|t| {
            if t.norm() < 1e-12 {
                C64::new(1.0, 0.0)
            } else {
                t / C64::new(t.norm(), 0.0)
            }
        })
        .collect();
    let old = profiles.theta[k].theta().to_vec();
    let o_new = passive_objective(&unit, &carriers, &slices);
    let o_old = passive_objective(&old, &carriers, &slices);
    if o_new >= o_old {
        Ok(PhaseVector::new(unit, 0))
    } else {
        Ok(profiles.theta[k].clone())
    }
}

/// Per-round summary of the outer alternation.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub total: f64,
    pub per_vue: Vec<f64>,
    pub per_vue_power: Vec<f64>,
}

/// Outer-alternation configuration.
#[derive(Debug, Clone)]
pub struct P1Config {
    pub rounds: usize,
    pub rel_tol: f64,
    pub max_dc_outer: usize,
    pub p3: P3Config,
}

impl Default for P1Config {
    fn default() -> Self {
        Self { rounds: 10, rel_tol: 1e-4, max_dc_outer: 12, p3: P3Config::default() }
    }
}

/// Precoded view of a raw scenario: bake `F[n]` into every VUE's channel on
/// carrier `n`.
pub fn apply_precoders(scen: &BroadbandScenario, f: &[CMat]) -> BroadbandScenario {
    let ec = scen
        .ec
        .iter()
        .map(|row| row.iter().zip(f).map(|(e, fm)| e.with_precoder(fm)).collect())
        .collect();
    BroadbandScenario { ec, ..scen.clone() }
}

fn uniform_start(scen: &BroadbandScenario) -> RelaxedAllocation {
    let (kk, nn) = (scen.k_vues, scen.n_carriers);
    let rho = RMat::from_element(kk, nn, 1.0 / kk as f64);
    let share = (scen.p_tot / (kk * nn) as f64).min(scen.p_max / kk as f64);
    let p = RMat::from_element(kk, nn, share);
    RelaxedAllocation { p_hat: p, rho_hat: rho, lambda: 0.0 }
}

/// Greedy QoS repair: give each VUE its strongest `ceil(N/K)` carriers
/// (neediest VUE picks first) and split the budget evenly.
fn greedy_start(gains: &Gains, scen: &BroadbandScenario) -> RelaxedAllocation {
    let (kk, nn) = (scen.k_vues, scen.n_carriers);
    let strength = |k: usize, n: usize| gains.mu[k][n].iter().sum::<f64>();
    // neediest first: ascending total channel strength
    let mut order: Vec<usize> = (0..kk).collect();
    order.sort_by(|&a, &b| {
        let sa: f64 = (0..nn).map(|n| strength(a, n)).sum();
        let sb: f64 = (0..nn).map(|n| strength(b, n)).sum();
        sa.partial_cmp(&sb).unwrap()
    });
    let quota = nn.div_ceil(kk);
    let mut owner = vec![usize::MAX; nn];
    let mut taken = vec![0usize; kk];
    for &k in &order {
        let mut prefs: Vec<usize> = (0..nn).filter(|&n| owner[n] == usize::MAX).collect();
        prefs.sort_by(|&a, &b| strength(k, b).partial_cmp(&strength(k, a)).unwrap());
        for n in prefs.into_iter().take(quota) {
            owner[n] = k;
            taken[k] += 1;
        }
    }
    for n in 0..nn {
        if owner[n] == usize::MAX {
            // leftovers to whichever VUE likes them most
            owner[n] = (0..kk)
                .max_by(|&a, &b| strength(a, n).partial_cmp(&strength(b, n)).unwrap())
                .unwrap();
        }
    }
    let mut rho = RMat::zeros(kk, nn);
    let mut p = RMat::zeros(kk, nn);
    let share = (scen.p_tot / nn as f64).min(scen.p_max);
    for n in 0..nn {
        rho[(owner[n], n)] = 1.0;
        p[(owner[n], n)] = share;
    }
    RelaxedAllocation { p_hat: p, rho_hat: rho, lambda: 0.0 }
}

/// Alternating solution of P1 (resources first): D.C. resource allocation
/// with beams fixed, then per-carrier water-filled precoders and per-VUE
/// passive profiles with resources fixed. An allocation update is kept only
/// when it does not reduce the true total throughput under the current
/// beams, so the per-round trace is non-decreasing.
pub fn alternate_p1(
    scen_raw: &BroadbandScenario,
    cfg: &P1Config,
) -> Result<(Allocation, RISProfiles, Vec<RoundRecord>), ResourceError> {
    let (kk, nn) = (scen_raw.k_vues, scen_raw.n_carriers);
    let nt = scen_raw.ec[0][0].nt();
    let i_groups = scen_raw.ec[0][0].i_groups();
    let iso = CMat::identity(nt, nt) * C64::new(1.0 / (nt as f64).sqrt(), 0.0);
    let mut f: Vec<CMat> = vec![iso; nn];
    let mut profiles = RISProfiles { theta: vec![PhaseVector::ones(i_groups); kk] };
    let mut warm: Option<RelaxedAllocation> = None;
    let mut alloc: Option<Allocation> = None;
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut prev_total = 0.0;

    for round in 1..=cfg.rounds {
        let scen_f = apply_precoders(scen_raw, &f);
        let gains = precompute_gains(&profiles, &scen_f);

        // resource allocation with beams fixed
        let init = match warm.take() {
            Some(w) => w,
            None => {
                let mut start = uniform_start(&scen_f);
                if scen_f.c_min > 0.0 {
                    let feasible = (0..kk).all(|k| {
                        relaxed_rate(k, &start.p_hat, &gains, &scen_f)
                            >= scen_f.c_min * (1.0 - 1e-6)
                    });
                    if !feasible {
                        start = greedy_start(&gains, &scen_f);
                        let total_possible: f64 = (0..kk)
                            .map(|k| relaxed_rate(k, &start.p_hat, &gains, &scen_f))
                            .sum();
                        if total_possible < 0.1 * kk as f64 * scen_f.c_min {
                            return Err(ResourceError::QoSInfeasible);
                        }
                    }
                }
                start
            }
        };
        let schedule = default_lambda_schedule(&init, &gains, &scen_f)?;
        let (relaxed, cand_alloc, _trace) =
            dc_loop(&init, &gains, &scen_f, &schedule, cfg.max_dc_outer, &cfg.p3)?;
        warm = Some(relaxed);

        // keep the better allocation under the current beams; QoS feasibility
        // outranks raw total
        let (cand_total, cand_per) = total_throughput(&cand_alloc, &profiles, &scen_f)?;
        let qos_ok =
            |per: &[f64]| per.iter().all(|&r| r >= scen_f.c_min * (1.0 - 1e-3));
        let keep_old = match &alloc {
            Some(old) => {
                let (old_total, old_per) = total_throughput(old, &profiles, &scen_f)?;
                match (qos_ok(&old_per), qos_ok(&cand_per)) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => old_total > cand_total,
                }
            }
            None => false,
        };
        if !keep_old {
            alloc = Some(cand_alloc);
        }
        let a = alloc.as_ref().unwrap();

        // beamforming with resources fixed: water-filled F per active carrier
        let q = a.effective_power();
        for n in 0..nn {
            let owner = (0..kk).find(|&k| a.rho[(k, n)] == 1.0).unwrap();
            let qn = q[(owner, n)];
            if qn <= 0.0 {
                continue;
            }
            let s_n = ici_from_powers(&q, n, scen_raw) + scen_raw.noise_per_carrier();
            let h_eff = effective_mimo(&profiles.theta[owner], &scen_raw.ec[owner][n])?;
            if h_eff.norm() == 0.0 {
                continue;
            }
            f[n] = opt_active_waterfill(&h_eff, s_n / qn, 1.0)?;
        }
        let scen_f2 = apply_precoders(scen_raw, &f);
        for k in 0..kk {
            profiles.theta[k] = opt_passive_bb(k, &profiles, a, &scen_f2)?;
        }

        let scen_eval = apply_precoders(scen_raw, &f);
        let (total, per_vue) = total_throughput(a, &profiles, &scen_eval)?;
        let per_vue_power: Vec<f64> =
            (0..kk).map(|k| (0..nn).map(|n| q[(k, n)]).sum()).collect();
        records.push(RoundRecord { round, total, per_vue, per_vue_power });
        if round > 1 && (total - prev_total).abs() <= cfg.rel_tol * (1.0 + prev_total.abs()) {
            break;
        }
        prev_total = total;
    }
    Ok((alloc.expect("at least one round ran"), profiles, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamform_nb::{
        opt_theta_closed, phase_subproblem_matrices, CsiSource, EquivalentChannel,
    };
    use crate::channel::{sample_channels, LinkGeometry};
    use crate::estimation::{aggregate_rows, build_grouping};
    use crate::numerics::RngStream;
    use approx::assert_relative_eq;

    fn geo() -> LinkGeometry {
        LinkGeometry { d_br: 100.0, d_rv: 2.0, alpha_br: 2.2, alpha_rv: 2.8, p0_db: -30.0 }
    }

    /// Desk-size scenario with unit-power isotropic precoders baked in.
    fn scen(k: usize, n: usize, vels: Vec<f64>, seed: u64) -> BroadbandScenario {
        let m = 8;
        let i = 4;
        let (nt, nr) = (2, 2);
        let grouping = build_grouping(m, i).unwrap();
        let iso = CMat::identity(nt, nt) * C64::new(1.0 / (nt as f64).sqrt(), 0.0);
        let mut ec = Vec::new();
        for kk in 0..k {
            let mut row = Vec::new();
            for nn in 0..n {
                let mut rng = RngStream::new(seed, (kk * n + nn) as u64);
                let cs = sample_channels(nt, nr, m, &geo(), 5.0, &mut rng);
                let h_agg = aggregate_rows(&cs.cascaded(), &grouping, i);
                row.push(
                    EquivalentChannel::from_aggregated(&h_agg, nr, nt, CsiSource::Perfect)
                        .unwrap()
                        .with_precoder(&iso),
                );
            }
            ec.push(row);
        }
        BroadbandScenario {
            k_vues: k,
            n_carriers: n,
            delta_f: 1e6,
            f_c: 3.5e9,
            velocities: vels,
            distances: vec![100.0; k],
            p_max: 0.05,
            p_tot: 0.1,
            c_min: 0.0,
            n0: 10f64.powf(-20.4),
            ec,
        }
    }

    fn ones_profiles(scen: &BroadbandScenario) -> RISProfiles {
        RISProfiles {
            theta: vec![PhaseVector::ones(scen.ec[0][0].i_groups()); scen.k_vues],
        }
    }

    fn random_relaxed(scen: &BroadbandScenario, seed: u64) -> RelaxedAllocation {
        let mut rng = RngStream::new(seed, 7);
        let p = RMat::from_fn(scen.k_vues, scen.n_carriers, |_, _| {
            0.8 * scen.p_max * rng.uniform() / scen.k_vues as f64
        });
        let mut rho = RMat::from_fn(scen.k_vues, scen.n_carriers, |_, _| rng.uniform());
        for n in 0..scen.n_carriers {
            let s: f64 = rho.column(n).iter().sum();
            for k in 0..scen.k_vues {
                rho[(k, n)] /= s;
            }
        }
        RelaxedAllocation { p_hat: p, rho_hat: rho, lambda: 1.0 }
    }

    #[test]
    fn penalty_trivials() {
        let binary = RMat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(penalty_g(&binary).unwrap(), 0.0);
        let mut half = binary.clone();
        half[(0, 0)] = 0.5;
        assert_relative_eq!(penalty_g(&half).unwrap(), 0.25);
        assert!(penalty_g(&RMat::from_element(1, 1, 1.5)).is_err());
    }

    #[test]
    fn penalty_matches_elementwise_loop() {
        let mut rng = RngStream::new(1, 0);
        let r = RMat::from_fn(3, 5, |_, _| rng.uniform());
        let mut oracle = 0.0;
        for k in 0..3 {
            for n in 0..5 {
                oracle += r[(k, n)] * (1.0 - r[(k, n)]);
            }
        }
        assert_relative_eq!(penalty_g(&r).unwrap(), oracle, epsilon = 1e-14);
    }

    #[test]
    fn grad_g_trivials() {
        let r = RMat::from_element(2, 2, 0.5);
        assert_eq!(grad_g_rho(&r), RMat::zeros(2, 2));
        let r = RMat::from_element(1, 1, 0.0);
        assert_eq!(grad_g_rho(&r)[(0, 0)], 1.0);
    }

    #[test]
    fn f1_equals_f2_at_zero_power() {
        let s = scen(2, 4, vec![0.0, 0.0], 2);
        let gains = precompute_gains(&ones_profiles(&s), &s);
        let p = RMat::zeros(2, 4);
        for k in 0..2 {
            assert_relative_eq!(
                f1(k, &p, &gains, &s),
                f2(k, &p, &s),
                epsilon = 1e-9 * f2(k, &p, &s).abs()
            );
        }
    }

    #[test]
    fn f1_minus_f2_matches_throughput_at_binary_points() {
        let s = scen(2, 4, vec![11.0, 23.0], 3);
        let profiles = ones_profiles(&s);
        let gains = precompute_gains(&profiles, &s);
        let mut rho = RMat::zeros(2, 4);
        let mut p = RMat::zeros(2, 4);
        for n in 0..4 {
            rho[(n % 2, n)] = 1.0;
            p[(n % 2, n)] = 0.015 + 0.005 * n as f64;
        }
        let alloc = Allocation { rho, p };
        let p_hat = alloc.effective_power();
        let lhs: f64 = (0..2).map(|k| f1(k, &p_hat, &gains, &s) - f2(k, &p_hat, &s)).sum();
        let (total, _) = total_throughput(&alloc, &profiles, &s).unwrap();
        assert_relative_eq!(lhs, total / s.delta_f, epsilon = 1e-9 * lhs.abs());
    }

    #[test]
    fn f1_concave_along_segments() {
        let s = scen(2, 4, vec![9.0, 17.0], 4);
        let gains = precompute_gains(&ones_profiles(&s), &s);
        let mut rng = RngStream::new(4, 9);
        for _ in 0..20 {
            let a = RMat::from_fn(2, 4, |_, _| s.p_max * rng.uniform());
            let b = RMat::from_fn(2, 4, |_, _| s.p_max * rng.uniform());
            let mid = (&a + &b) * 0.5;
            for k in 0..2 {
                let fm = f1(k, &mid, &gains, &s);
                let avg = 0.5 * (f1(k, &a, &gains, &s) + f1(k, &b, &gains, &s));
                assert!(fm >= avg - 1e-9 * avg.abs().max(1.0));
            }
        }
    }

    #[test]
    fn grad_f2_zero_velocity() {
        let s = scen(2, 4, vec![0.0, 0.0], 5);
        let p = RMat::from_element(2, 4, 0.01);
        assert_eq!(grad_f2_p(0, &p, &s), RMat::zeros(2, 4));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = scen(2, 4, vec![8.0, 19.0], 6);
        let gains = precompute_gains(&ones_profiles(&s), &s);
        let mut rng = RngStream::new(6, 3);
        for case in 0..10 {
            let p = RMat::from_fn(2, 4, |_, _| 0.9 * s.p_max * rng.uniform() + 1e-4);
            for k in 0..2 {
                let g1 = grad_f1_p(k, &p, &gains, &s);
                let g2 = grad_f2_p(k, &p, &s);
                for d in 0..2 {
                    for l in 0..4 {
                        let h = 1e-8;
                        let mut pp = p.clone();
                        pp[(d, l)] += h;
                        let mut pm = p.clone();
                        pm[(d, l)] -= h;
                        let fd1 = (f1(k, &pp, &gains, &s) - f1(k, &pm, &gains, &s)) / (2.0 * h);
                        let fd2 = (f2(k, &pp, &s) - f2(k, &pm, &s)) / (2.0 * h);
                        let s1 = g1[(d, l)].abs().max(fd1.abs()).max(1e-6);
                        let s2 = g2[(d, l)].abs().max(fd2.abs()).max(1e-6);
                        assert!(
                            (g1[(d, l)] - fd1).abs() / s1 < 1e-4,
                            "case {case} F1 k{k} ({d},{l}): {} vs {fd1}",
                            g1[(d, l)]
                        );
                        assert!(
                            (g2[(d, l)] - fd2).abs() / s2 < 1e-4,
                            "case {case} F2 k{k} ({d},{l}): {} vs {fd2}",
                            g2[(d, l)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn surrogate_exact_at_expansion_point() {
        let s = scen(2, 4, vec![7.0, 21.0], 7);
        let gains = precompute_gains(&ones_profiles(&s), &s);
        let pt = random_relaxed(&s, 7);
        let exp = expansion_at(&pt, &gains, &s).unwrap();
        for k in 0..2 {
            assert_relative_eq!(
                f2_tilde(&exp, k, &pt.p_hat),
                f2(k, &pt.p_hat, &s),
                epsilon = 1e-12 * f2(k, &pt.p_hat, &s).abs()
            );
        }
        let (_, _, ua) = taylor_surrogates(&exp, &pt, 1.0, &gains, &s);
        let u = upsilon(&pt, 1.0, &gains, &s).unwrap();
        assert_relative_eq!(ua, u, epsilon = 1e-9 * u.abs().max(1.0));
    }

    #[test]
    fn majorization_on_random_pairs() {
        let s = scen(2, 4, vec![13.0, 29.0], 8);
        let gains = precompute_gains(&ones_profiles(&s), &s);
        for seed in 0..20 {
            let a = random_relaxed(&s, 100 + seed);
            let b = random_relaxed(&s, 200 + seed);
            let exp = expansion_at(&a, &gains, &s).unwrap();
            let (f2t, _, ua) = taylor_surrogates(&exp, &b, 2.0, &gains, &s);
            for k in 0..2 {
                assert!(
                    f2(k, &b.p_hat, &s) <= f2t[k] + 1e-9 * f2t[k].abs().max(1.0),
                    "seed {seed}: F2 > F2~"
                );
            }
            let u = upsilon(&b, 2.0, &gains, &s).unwrap();
            assert!(u >= ua - 1e-9 * ua.abs().max(1.0), "seed {seed}: Upsilon < Upsilon_app");
        }
    }

    #[test]
    fn solve_p3_matches_grid_on_single_vue() {
        // K=1, N=2, v=0, no QoS: the problem is pure concave power splitting.
        let s = scen(1, 2, vec![0.0], 9);
        let gains = precompute_gains(&ones_profiles(&s), &s);
        let init = RelaxedAllocation {
            p_hat: RMat::from_element(1, 2, s.p_tot / 4.0),
            rho_hat: RMat::from_element(1, 2, 1.0),
            lambda: 1.0,
        };
        let exp = expansion_at(&init, &gains, &s).unwrap();
        let sol = solve_p3(&exp, 1.0, &gains, &s, &P3Config::default()).unwrap();
        let val = upsilon(&sol, 1.0, &gains, &s).unwrap();
        // 2-D grid oracle
        let mut best = f64::NEG_INFINITY;
        let steps = 200;
        for a in 0..=steps {
            for b in 0..=steps {
                let p0 = s.p_max * a as f64 / steps as f64;
                let p1 = s.p_max * b as f64 / steps as f64;
                if p0 + p1 > s.p_tot {
                    continue;
                }
                let p = RMat::from_row_slice(1, 2, &[p0, p1]);
                let pt = RelaxedAllocation {
                    p_hat: p,
                    rho_hat: RMat::from_element(1, 2, 1.0),
                    lambda: 1.0,
                };
                best = best.max(upsilon(&pt, 1.0, &gains, &s).unwrap());
            }
        }
        assert!(
            val >= best - 1e-3 * best.abs().max(1.0),
            "solver {val} vs grid {best}"
        );
    }

    #[test]
    fn solve_p3_never_worse_than_expansion() {
        let s = scen(2, 4, vec![10.0, 30.0], 10);
        let gains = precompute_gains(&ones_profiles(&s), &s);
        for seed in 0..5 {
            let pt = repair_coupling(random_relaxed(&s, 300 + seed), s.p_max);
            let lam = 1.0;
            let exp = expansion_at(&pt, &gains, &s).unwrap();
            let sol = solve_p3(&exp, lam, &gains, &s, &P3Config::default()).unwrap();
            let (_, _, ua) = taylor_surrogates(&exp, &sol, lam, &gains, &s);
            let u0 = upsilon(&pt, lam, &gains, &s).unwrap();
            assert!(ua >= u0 - 1e-9 * u0.abs().max(1.0), "seed {seed}: {ua} < {u0}");
        }
    }

    #[test]
    fn solve_p3_strict_qos_rejects_bad_expansion() {
        let mut s = scen(2, 4, vec![0.0, 0.0], 11);
        s.c_min = 1e12; // impossible floor
        let gains = precompute_gains(&ones_profiles(&s), &s);
        let pt = repair_coupling(random_relaxed(&s, 11), s.p_max);
        let exp = expansion_at(&pt, &gains, &s).unwrap();
        let cfg = P3Config { strict_qos_start: true, ..P3Config::default() };
        assert!(matches!(
            solve_p3(&exp, 1.0, &gains, &s, &cfg),
            Err(ResourceError::SurrogateInfeasible { .. })
        ));
    }

    #[test]
    fn dc_loop_monotone_and_nearly_binary() {
        for seed in 0..5 {
            let s = scen(2, 4, vec![0.02, 0.05], 400 + seed);
            let gains = precompute_gains(&ones_profiles(&s), &s);
            let init = uniform_start(&s);
            let schedule = default_lambda_schedule(&init, &gains, &s).unwrap();
            let (relaxed, alloc, trace) =
                dc_loop(&init, &gains, &s, &schedule, 12, &P3Config::default()).unwrap();
            // per-stage monotone surrogate objective
            for w in trace.iters.windows(2) {
                if w[0].lambda == w[1].lambda {
                    assert!(
                        w[1].upsilon_app >= w[0].upsilon_app - 1e-9 * (1.0 + w[0].upsilon_app.abs()),
                        "seed {seed}"
                    );
                }
            }
            assert!(
                penalty_g(&relaxed.rho_hat).unwrap() < 1e-3,
                "seed {seed}: G = {}",
                penalty_g(&relaxed.rho_hat).unwrap()
            );
            // rounded allocation is structurally feasible
            let (total, _) = total_throughput(&alloc, &ones_profiles(&s), &s).unwrap();
            assert!(total > 0.0, "seed {seed}");
        }
    }

    #[test]
    fn rounding_respects_constraints() {
        let s = scen(3, 5, vec![0.01, 0.02, 0.03], 12);
        let gains = precompute_gains(&ones_profiles(&s), &s);
        let relaxed = random_relaxed(&s, 12);
        let alloc = round_allocation(&relaxed, &gains, &s);
        for n in 0..5 {
            let col: f64 = (0..3).map(|k| alloc.rho[(k, n)]).sum();
            assert_eq!(col, 1.0);
        }
        assert!(alloc.p.iter().all(|&p| (0.0..=s.p_max + 1e-12).contains(&p)));
        assert!(alloc.effective_power().iter().sum::<f64>() <= s.p_tot + 1e-12);
    }

    #[test]
    fn passive_bb_zero_power_vue_unchanged() {
        let s = scen(2, 4, vec![0.0, 0.0], 13);
        let profiles = ones_profiles(&s);
        let mut rho = RMat::zeros(2, 4);
        let mut p = RMat::zeros(2, 4);
        for n in 0..4 {
            rho[(0, n)] = 1.0; // all carriers to VUE 0
            p[(0, n)] = 0.02;
        }
        let alloc = Allocation { rho, p };
        let out = opt_passive_bb(1, &profiles, &alloc, &s).unwrap();
        assert_eq!(out.theta(), profiles.theta[1].theta());
    }

    #[test]
    fn passive_bb_improves_throughput() {
        let s = scen(1, 3, vec![0.0], 14);
        let profiles = ones_profiles(&s);
        let rho = RMat::from_element(1, 3, 1.0);
        let p = RMat::from_element(1, 3, 0.03);
        let alloc = Allocation { rho, p };
        let before = total_throughput(&alloc, &profiles, &s).unwrap().0;
        let theta = opt_passive_bb(0, &profiles, &alloc, &s).unwrap();
        let after = total_throughput(
            &alloc,
            &RISProfiles { theta: vec![theta] },
            &s,
        )
        .unwrap()
        .0;
        assert!(after >= before - 1e-9 * before, "{after} < {before}");
        assert!(after > before * 1.001, "no meaningful improvement: {after} vs {before}");
    }

    #[test]
    fn passive_bb_single_carrier_matches_closed_form_stationarity() {
        // Singleton groups and one carrier: each coordinate of the converged
        // profile must agree with the Eq.-(29) closed form.
        let m = 3;
        let grouping = build_grouping(m, m).unwrap();
        let mut rng = RngStream::new(15, 0);
        let cs = sample_channels(2, 2, m, &geo(), 5.0, &mut rng);
        let h_agg = aggregate_rows(&cs.cascaded(), &grouping, m);
        let iso = CMat::identity(2, 2) * C64::new((0.5f64).sqrt(), 0.0);
        let ec = EquivalentChannel::from_aggregated(&h_agg, 2, 2, CsiSource::Perfect)
            .unwrap()
            .with_precoder(&iso);
        let s = BroadbandScenario {
            k_vues: 1,
            n_carriers: 1,
            delta_f: 1e6,
            f_c: 3.5e9,
            velocities: vec![0.0],
            distances: vec![100.0],
            p_max: 0.05,
            p_tot: 0.05,
            c_min: 0.0,
            n0: 10f64.powf(-20.4),
            ec: vec![vec![ec.clone()]],
        };
        let profiles = ones_profiles(&s);
        let alloc = Allocation {
            rho: RMat::from_element(1, 1, 1.0),
            p: RMat::from_element(1, 1, 0.05),
        };
        let theta = opt_passive_bb(0, &profiles, &alloc, &s).unwrap();
        // effective sigma^2 of the single-carrier reduction is S / q
        let sigma2 = s.noise_per_carrier() / 0.05;
        for i in 0..m {
            let (a, b) = phase_subproblem_matrices(i, &theta, &ec, sigma2).unwrap();
            let t_star = opt_theta_closed(&a, &b).unwrap();
            let mut dphi = (theta.theta()[i].arg() - t_star.arg()).abs();
            if dphi > std::f64::consts::PI {
                dphi = 2.0 * std::f64::consts::PI - dphi;
            }
            assert!(dphi < 1e-3, "group {i}: phase gap {dphi}");
        }
    }

    #[test]
    fn alternate_p1_single_carrier_degenerate() {
        let s = scen(1, 1, vec![0.0], 16);
        let (alloc, profiles, records) = alternate_p1(&s, &P1Config::default()).unwrap();
        assert_eq!(alloc.rho[(0, 0)], 1.0);
        assert!(alloc.p[(0, 0)] > 0.0);
        assert_eq!(profiles.theta.len(), 1);
        assert!(records.last().unwrap().total > 0.0);
    }

    #[test]
    fn alternate_p1_round_trace_nondecreasing() {
        for seed in 0..3 {
            let s = scen(2, 4, vec![0.02, 0.04], 500 + seed);
            let (_, _, records) = alternate_p1(&s, &P1Config::default()).unwrap();
            for w in records.windows(2) {
                assert!(
                    w[1].total >= w[0].total * (1.0 - 1e-6),
                    "seed {seed}: round {} dropped {} -> {}",
                    w[1].round,
                    w[0].total,
                    w[1].total
                );
            }
        }
    }
}
