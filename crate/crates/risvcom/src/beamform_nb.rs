//! Narrowband single-VUE hybrid beamforming: rate evaluation, water-filled
//! active precoding, passive phase optimization (closed form, gradient
//! ascent, quantized exhaustive search), and the alternating loop.
//!
//! The equivalent channel stores one `N_r x N_t` slice per RIS group; the
//! effective MIMO channel for a phase vector `theta` is the theta-weighted
//! slice sum, so the active precoder reduces to eigenbeamforming with
//! water-filling on that sum and each passive phase reduces to a scalar
//! subproblem `det(A_i + theta B_i + theta* B_i^H)`.

use crate::numerics::{
    logdet_hpd, svd, unvec_slice, water_fill, CMat, NumericsError, RngStream, C64,
};
use std::f64::consts::{LN_2, PI};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BeamformError {
    #[error("phase vector has {0} entries but the channel has {1} groups")]
    LengthMismatch(usize, usize),
    #[error("aggregated channel row length {0} does not factor as N_r*N_t = {1}*{2}")]
    BadRowLength(usize, usize, usize),
    #[error("effective channel is numerically zero")]
    ZeroChannel,
    #[error("A^-1 B has numerical rank > 1; closed form does not apply")]
    RankTooHigh,
    #[error("closed-form passive mode needs singleton groups or N_r <= 2")]
    ClosedFormUnavailable,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Provenance of the CSI behind an equivalent channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsiSource {
    Perfect,
    EstimatedSmall,
    EstimatedLos,
}

/// Per-group equivalent channels: slice `i` is the `N_r x N_t` reshape of row
/// `i` of the aggregated cascaded channel, optionally with an active precoder
/// multiplied in on the right.
#[derive(Debug, Clone)]
pub struct EquivalentChannel {
    slices: Vec<CMat>,
    f_used: Option<CMat>,
    pub source: CsiSource,
}

impl EquivalentChannel {
    /// Reshape the `I x (N_r N_t)` aggregated channel into per-group slices
    /// (column-major rows, so entry `a*N_r + r` lands at `(r, a)`).
    pub fn from_aggregated(
        h_agg: &CMat,
        nr: usize,
        nt: usize,
        source: CsiSource,
    ) -> Result<Self, BeamformError> {
        if h_agg.ncols() != nr * nt {
            return Err(BeamformError::BadRowLength(h_agg.ncols(), nr, nt));
        }
        let slices = (0..h_agg.nrows())
            .map(|i| {
                let row: Vec<C64> = h_agg.row(i).iter().copied().collect();
                unvec_slice(&row, nr, nt).expect("length checked")
            })
            .collect();
        Ok(Self { slices, f_used: None, source })
    }

    /// Bake an active precoder into every slice: `H_i -> H_i F`.
    pub fn with_precoder(&self, f: &CMat) -> Self {
        Self {
            slices: self.slices.iter().map(|h| h * f).collect(),
            f_used: Some(f.clone()),
            source: self.source,
        }
    }

    pub fn i_groups(&self) -> usize {
        self.slices.len()
    }

    pub fn nr(&self) -> usize {
        self.slices[0].nrows()
    }

    pub fn nt(&self) -> usize {
        self.slices[0].ncols()
    }

    pub fn slice(&self, i: usize) -> &CMat {
        &self.slices[i]
    }

    pub fn f_used(&self) -> Option<&CMat> {
        self.f_used.as_ref()
    }
}

/// Unit-modulus phase vector, optionally restricted to `2^bits` levels
/// (`bits = 0` means continuous).
#[derive(Debug, Clone)]
pub struct PhaseVector {
    theta: Vec<C64>,
    bits: u32,
}

impl PhaseVector {
    pub fn new(theta: Vec<C64>, bits: u32) -> Self {
        assert!(
            theta.iter().all(|t| (t.norm() - 1.0).abs() < 1e-9),
            "phases must be unit modulus"
        );
        Self { theta, bits }
    }

    pub fn ones(i: usize) -> Self {
        Self { theta: vec![C64::new(1.0, 0.0); i], bits: 0 }
    }

    pub fn random(i: usize, bits: u32, rng: &mut RngStream) -> Self {
        let theta = (0..i)
            .map(|_| {
                let phi = if bits == 0 {
                    2.0 * PI * rng.uniform()
                } else {
                    2.0 * PI * rng.below(1usize << bits) as f64 / (1u64 << bits) as f64
                };
                C64::from_polar(1.0, phi)
            })
            .collect();
        Self { theta, bits }
    }

    pub fn theta(&self) -> &[C64] {
        &self.theta
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn set(&mut self, i: usize, v: C64) {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9);
        self.theta[i] = v;
    }
}

/// Effective MIMO channel for a phase vector: the theta-weighted slice sum.
pub fn effective_mimo(
    theta: &PhaseVector,
    ec: &EquivalentChannel,
) -> Result<CMat, BeamformError> {
    if theta.len() != ec.i_groups() {
        return Err(BeamformError::LengthMismatch(theta.len(), ec.i_groups()));
    }
    let mut h = CMat::zeros(ec.nr(), ec.nt());
    for (t, s) in theta.theta().iter().zip(&ec.slices) {
        h += s * *t;
    }
    Ok(h)
}

/// Narrowband rate `log2 det(I + H H^H / sigma^2)` in bits/s/Hz.
pub fn rate_nb(theta: &PhaseVector, ec: &EquivalentChannel, sigma2: f64) -> Result<f64, BeamformError> {
    assert!(sigma2 > 0.0, "noise power must be positive");
    let h = effective_mimo(theta, ec)?;
    let m = CMat::identity(ec.nr(), ec.nr()) + (&h * h.adjoint()) / C64::new(sigma2, 0.0);
    Ok(logdet_hpd(&m)? / LN_2)
}

/// Water-filled eigenbeamformer for the effective channel with the precoder
/// removed: `F = V diag(p*)^{1/2}` (zero-padded to `N_t x N_t`), spending
/// exactly `P_t`.
pub fn opt_active_waterfill(h_eff: &CMat, sigma2: f64, p_t: f64) -> Result<CMat, BeamformError> {
    assert!(p_t > 0.0, "transmit power must be positive");
    if h_eff.norm() == 0.0 {
        return Err(BeamformError::ZeroChannel);
    }
    let (_, sig, v) = svd(h_eff)?;
    let gains: Vec<f64> = sig.iter().map(|s| s * s).collect();
    let powers = water_fill(&gains, sigma2, p_t)?;
    let nt = h_eff.ncols();
    let mut f = CMat::zeros(nt, nt);
    for (r, &p) in powers.iter().enumerate() {
        f.set_column(r, &(v.column(r) * C64::new(p.sqrt(), 0.0)));
    }
    Ok(f)
}

/// Scalar phase subproblem for group `i`: rate(theta_i) =
/// `log2 det(A_i + theta_i B_i + theta_i^* B_i^H)` with
/// `A_i = I + (H_i H_i^H + H_-i H_-i^H)/sigma^2`, `B_i = H_i H_-i^H/sigma^2`,
/// and `H_-i` the theta-weighted sum over the other groups.
pub fn phase_subproblem_matrices(
    i: usize,
    theta: &PhaseVector,
    ec: &EquivalentChannel,
    sigma2: f64,
) -> Result<(CMat, CMat), BeamformError> {
    if theta.len() != ec.i_groups() {
        return Err(BeamformError::LengthMismatch(theta.len(), ec.i_groups()));
    }
    let nr = ec.nr();
    let hi = &ec.slices[i];
    let mut h_rest = CMat::zeros(nr, ec.nt());
    for (n, (t, s)) in theta.theta().iter().zip(&ec.slices).enumerate() {
        if n != i {
            h_rest += s * *t;
        }
    }
    let s = C64::new(sigma2, 0.0);
    let a = CMat::identity(nr, nr) + (hi * hi.adjoint() + &h_rest * h_rest.adjoint()) / s;
    let b = hi * h_rest.adjoint() / s;
    Ok((a, b))
}

fn rate_from_ab(a: &CMat, b: &CMat, theta: C64) -> f64 {
    let x = a + b * theta + b.adjoint() * theta.conj();
    logdet_hpd(&x).expect("A + theta B + theta* B^H stays HPD for |theta| = 1") / LN_2
}

/// Closed-form phase update for rank-1 `A^-1 B`: `theta* = e^{-j arg(lambda)}`
/// with `lambda` the sole nonzero eigenvalue (the trace), or 1 when `B`
/// vanishes.
pub fn opt_theta_closed(a: &CMat, b: &CMat) -> Result<C64, BeamformError> {
    let a_inv = a.clone().try_inverse().ok_or(BeamformError::Numerics(NumericsError::NotHpd))?;
    let m = a_inv * b;
    let (_, sig, _) = svd(&m)?;
    if sig.len() > 1 && sig[1] > 1e-9 * sig[0].max(1e-300) {
        return Err(BeamformError::RankTooHigh);
    }
    let lambda: C64 = (0..m.nrows()).map(|r| m[(r, r)]).sum();
    if lambda.norm() < 1e-12 {
        return Ok(C64::new(1.0, 0.0));
    }
    Ok(C64::from_polar(1.0, -lambda.arg()))
}

/// Derivative of the rate with respect to the phase angle `phi` of group `i`:
/// `d(phi) = (j/ln 2) tr(X^-1 (theta B - theta^* B^H))`.
pub fn rate_phase_derivative(a: &CMat, b: &CMat, theta: C64) -> f64 {
    let x = a + b * theta + b.adjoint() * theta.conj();
    let x_inv = x.try_inverse().expect("X is HPD");
    let d = x_inv * (b * theta - b.adjoint() * theta.conj());
    let tr: C64 = (0..d.nrows()).map(|r| d[(r, r)]).sum();
    (C64::i() * tr).re / LN_2
}

/// Gradient ascent on the phase angle of group `i`, with backtracking when a
/// step would decrease the rate. Returns the best unit-modulus iterate.
pub fn opt_theta_gradient(
    i: usize,
    theta: &PhaseVector,
    ec: &EquivalentChannel,
    sigma2: f64,
    beta: f64,
    max_iters: usize,
    tol: f64,
) -> Result<C64, BeamformError> {
    assert!(beta > 0.0, "learning rate must be positive");
    let (a, b) = phase_subproblem_matrices(i, theta, ec, sigma2)?;
    let mut phi = theta.theta()[i].arg();
    let mut best = (phi, rate_from_ab(&a, &b, C64::from_polar(1.0, phi)));
    for _ in 0..max_iters {
        let d = rate_phase_derivative(&a, &b, C64::from_polar(1.0, phi));
        if d.abs() < tol {
            break;
        }
        let mut step = beta;
        let mut advanced = false;
        for _ in 0..30 {
            let cand = phi + step * d;
            let r = rate_from_ab(&a, &b, C64::from_polar(1.0, cand));
            if r >= best.1 {
                phi = cand;
                if r > best.1 {
                    best = (cand, r);
                }
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced {
            break;
        }
    }
    Ok(C64::from_polar(1.0, best.0))
}

/// Exhaustive search over the `2^bits` quantized phases for group `i`; ties
/// resolve to the smallest phase.
pub fn opt_theta_exhaustive(
    i: usize,
    theta: &PhaseVector,
    ec: &EquivalentChannel,
    sigma2: f64,
    bits: u32,
) -> Result<C64, BeamformError> {
    assert!(bits >= 1, "need at least one quantization bit");
    let (a, b) = phase_subproblem_matrices(i, theta, ec, sigma2)?;
    let levels = 1u64 << bits;
    let mut best = (C64::new(1.0, 0.0), f64::NEG_INFINITY);
    for q in 0..levels {
        let t = C64::from_polar(1.0, 2.0 * PI * q as f64 / levels as f64);
        let r = rate_from_ab(&a, &b, t);
        if r > best.1 {
            best = (t, r);
        }
    }
    Ok(best.0)
}

/// Passive-update strategy for the alternating loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassiveMode {
    /// Eq.-(29)-style closed form; valid only when every group is a
    /// singleton or `N_r <= 2`.
    ClosedForm,
    Gradient,
    Exhaustive(u32),
    /// Closed form for all-singleton groupings, otherwise exhaustive with
    /// 8 bits up to 64 groups and gradient ascent beyond.
    Auto,
}

/// Alternating-loop schedule.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub max_outer: usize,
    pub rel_tol: f64,
    pub passive: PassiveMode,
    pub grad_beta: f64,
    pub grad_iters: usize,
    pub grad_tol: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            max_outer: 20,
            rel_tol: 1e-5,
            passive: PassiveMode::Auto,
            grad_beta: 0.1,
            grad_iters: 500,
            grad_tol: 1e-6,
        }
    }
}

/// One rate sample along the alternating trajectory; `inner = 0` marks the
/// precoder update, `inner = i` the update of group `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub outer: usize,
    pub inner: usize,
    pub rate: f64,
}

/// Converged precoder/phase pair with the rate trace of the run.
#[derive(Debug, Clone)]
pub struct NBSolution {
    pub f: CMat,
    pub theta: PhaseVector,
    pub trace: Vec<TracePoint>,
}

impl NBSolution {
    pub fn final_rate(&self) -> f64 {
        self.trace.last().map(|t| t.rate).unwrap_or(0.0)
    }
}

fn resolve_mode(
    schedule: &Schedule,
    group_sizes: &[usize],
    nr: usize,
) -> Result<PassiveMode, BeamformError> {
    let all_singleton = group_sizes.iter().all(|&s| s == 1);
    match schedule.passive {
        PassiveMode::ClosedForm if !all_singleton && nr > 2 => {
            Err(BeamformError::ClosedFormUnavailable)
        }
        PassiveMode::Auto => Ok(if all_singleton {
            PassiveMode::ClosedForm
        } else if group_sizes.len() <= 64 {
            PassiveMode::Exhaustive(8)
        } else {
            PassiveMode::Gradient
        }),
        m => Ok(m),
    }
}

/// Alternate water-filled precoding and per-group phase updates until the
/// rate improves by less than `rel_tol` between outer iterations. Every
/// accepted update is checked against the previous rate; an update that would
/// decrease it is discarded, so the trace is non-decreasing by construction.
pub fn alternating_optimize(
    ec: &EquivalentChannel,
    group_sizes: &[usize],
    sigma2: f64,
    p_t: f64,
    init: PhaseVector,
    schedule: &Schedule,
) -> Result<NBSolution, BeamformError> {
    assert_eq!(group_sizes.len(), ec.i_groups(), "one size per group");
    let mode = resolve_mode(schedule, group_sizes, ec.nr())?;
    let mut theta = init;
    let mut f = CMat::zeros(ec.nt(), ec.nt());
    let mut trace = Vec::new();
    let mut prev_outer_rate = f64::NEG_INFINITY;
    let mut rate = f64::NEG_INFINITY;

    for outer in 1..=schedule.max_outer {
        let h_eff = effective_mimo(&theta, ec)?;
        let f_new = opt_active_waterfill(&h_eff, sigma2, p_t)?;
        let ec_f_new = ec.with_precoder(&f_new);
        let r_new = rate_nb(&theta, &ec_f_new, sigma2)?;
        if r_new >= rate {
            f = f_new;
            rate = r_new;
        }
        let ec_f = ec.with_precoder(&f);
        trace.push(TracePoint { outer, inner: 0, rate });

        for i in 0..ec.i_groups() {
            let cand = match mode {
                PassiveMode::ClosedForm => {
                    let (a, b) = phase_subproblem_matrices(i, &theta, &ec_f, sigma2)?;
                    match opt_theta_closed(&a, &b) {
                        Ok(t) => t,
                        // noisy CSI can lift B above rank one even for
                        // singleton groups; fall back to gradient ascent
                        Err(BeamformError::RankTooHigh) => opt_theta_gradient(
                            i,
                            &theta,
                            &ec_f,
                            sigma2,
                            schedule.grad_beta,
                            schedule.grad_iters,
                            schedule.grad_tol,
                        )?,
                        Err(e) => return Err(e),
                    }
                }
                PassiveMode::Gradient => opt_theta_gradient(
                    i,
                    &theta,
                    &ec_f,
                    sigma2,
                    schedule.grad_beta,
                    schedule.grad_iters,
                    schedule.grad_tol,
                )?,
                PassiveMode::Exhaustive(b) => {
                    opt_theta_exhaustive(i, &theta, &ec_f, sigma2, b)?
                }
                PassiveMode::Auto => unreachable!("resolved above"),
            };
            let mut cand_theta = theta.clone();
            cand_theta.set(i, cand);
            let r = rate_nb(&cand_theta, &ec_f, sigma2)?;
            if r >= rate {
                theta = cand_theta;
                rate = r;
            }
            trace.push(TracePoint { outer, inner: i + 1, rate });
        }

        if rate - prev_outer_rate <= schedule.rel_tol * rate.abs().max(1e-12) {
            break;
        }
        prev_outer_rate = rate;
    }
    Ok(NBSolution { f, theta, trace })
}

/// Overhead-discounted achievable rate `(1 - T_e/T_c) R`, clamped at zero.
pub fn achievable_rate(r: f64, t_e: f64, t_c: f64) -> f64 {
    assert!(t_e >= 0.0 && t_c > 0.0, "need T_e >= 0 and T_c > 0");
    ((1.0 - t_e / t_c) * r).max(0.0)
}
