//! Adaptive grouped-pilot cascaded channel estimation on two timescales.
//!
//! The RIS elements are partitioned into `I` groups by recursive halving; one
//! pilot block per group, with a shared unit-modulus phase per group and
//! block. Unfolding the received pilot tensor and equalizing by the pilot
//! matrix exposes the aggregated cascaded channel, which the inverse of the
//! stacked group-phase matrix recovers. At `I = M` this degenerates to the
//! plain unfolded least-squares estimate of the full cascaded channel.

use crate::channel::{ChannelSet, TimescaleModel};
use crate::numerics::{CMat, CTensor3, CVec, C64, RngStream, sample_cscg, vec_of};
use std::f64::consts::PI;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("invalid grouping range: need 1 <= I_max <= M, got I_max={i_max}, M={m}")]
    BadRange { i_max: usize, m: usize },
    #[error("group-phase matrix stayed singular after {0} redraws")]
    SingularPsi(usize),
    #[error("pilot matrix is rank deficient")]
    RankDeficientPilot,
    #[error("truth matrix has zero norm")]
    ZeroTruth,
    #[error("no candidate block count fits into the coherence time")]
    NoFeasibleCandidate,
}

/// Recursive partition of the `M` RIS elements: block `i` (1-based) splits
/// the largest group of block `i-1` into contiguous halves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingScheme {
    m: usize,
    /// `blocks[i-1]` holds the `i` contiguous groups of block `i`.
    blocks: Vec<Vec<Range<usize>>>,
    /// `split_history[i-2]` is the (0-based) group index of block `i-1`
    /// that was split to form block `i`.
    split_history: Vec<usize>,
}

impl GroupingScheme {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn i_max(&self) -> usize {
        self.blocks.len()
    }

    /// Groups of block `i` (1-based).
    pub fn groups(&self, block_i: usize) -> &[Range<usize>] {
        &self.blocks[block_i - 1]
    }

    pub fn split_history(&self) -> &[usize] {
        &self.split_history
    }

    /// Group index (0-based) of element `m` within block `i`.
    pub fn group_of(&self, block_i: usize, elem: usize) -> usize {
        self.groups(block_i)
            .iter()
            .position(|r| r.contains(&elem))
            .expect("element within 0..M")
    }
}

/// Block 1 is the whole element set; each later block splits the largest
/// group (ties: lowest start index) into ceil/floor halves.
pub fn build_grouping(m: usize, i_max: usize) -> Result<GroupingScheme, EstimationError> {
    if i_max < 1 || i_max > m {
        return Err(EstimationError::BadRange { i_max, m });
    }
    let mut blocks = vec![vec![0..m]];
    let mut split_history = Vec::new();
    for _ in 1..i_max {
        let prev = blocks.last().unwrap();
        let j = prev
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap();
        let g = prev[j].clone();
        let half = g.start + g.len().div_ceil(2);
        let mut next = prev.clone();
        next.splice(j..=j, [g.start..half, half..g.end]);
        blocks.push(next);
        split_history.push(j);
    }
    Ok(GroupingScheme { m, blocks, split_history })
}

/// Pilot design for one estimation phase: the time-domain pilot matrix `X`,
/// the per-block group phases, and the stacked group-phase matrix.
#[derive(Debug, Clone)]
pub struct PilotSchedule {
    pub grouping: GroupingScheme,
    /// N_t x T pilot; rows of a T-point DFT scaled to transmit power.
    pub x: CMat,
    /// Row `i-1` holds the `i` group phases of block `i`.
    pub psi_rows: Vec<Vec<C64>>,
    /// I x I stacked group-phase matrix.
    pub psi: CMat,
}

impl PilotSchedule {
    pub fn i_blocks(&self) -> usize {
        self.psi_rows.len()
    }

    /// Element-level phase vector applied during block `i` (1-based).
    pub fn expanded_phases(&self, block_i: usize) -> CVec {
        let row = &self.psi_rows[block_i - 1];
        let mut out = CVec::zeros(self.grouping.m());
        for (k, range) in self.grouping.groups(block_i).iter().enumerate() {
            for m in range.clone() {
                out[m] = row[k];
            }
        }
        out
    }

    /// Element-level phase matrix `Xi` (M x I), column `i` = block-`i` phases.
    pub fn xi(&self) -> CMat {
        let m = self.grouping.m();
        let i_blocks = self.i_blocks();
        let mut out = CMat::zeros(m, i_blocks);
        for i in 1..=i_blocks {
            out.set_column(i - 1, &self.expanded_phases(i));
        }
        out
    }
}

const MAX_PSI_REDRAWS: usize = 64;
const SIGMA_MIN_FLOOR: f64 = 1e-3;

fn draw_phase(bits: Option<u32>, rng: &mut RngStream) -> C64 {
    let phi = match bits {
        None => 2.0 * PI * rng.uniform(),
        Some(b) => 2.0 * PI * rng.below(1usize << b) as f64 / (1usize << b) as f64,
    };
    C64::from_polar(1.0, phi)
}

fn sigma_min(a: &CMat) -> f64 {
    match crate::numerics::svd(a) {
        Ok((_, sig, _)) => sig.last().copied().unwrap_or(0.0),
        Err(_) => 0.0,
    }
}

/// Build the pilot matrix and the group-phase recursion. `Psi^i` stacks
/// `Psi^{i-1}` with the split column duplicated plus a new row. The new row
/// copies the previous block's phases onto the children of the split and
/// flips the sign on the second child, under a fresh global phase: this keeps
/// the recursion well conditioned at any depth, while fully random rows make
/// `Psi^i` nearly singular already for moderate `i`. Rows failing a smallest-
/// singular-value floor are redrawn, falling back to fully random rows.
/// `quant_bits` restricts phases to `{2 pi q / 2^b}` (sign flips stay in-set
/// for `b >= 1`).
pub fn build_pilots(
    grouping: &GroupingScheme,
    t_slots: usize,
    nt: usize,
    pilot_power: f64,
    quant_bits: Option<u32>,
    rng: &mut RngStream,
) -> Result<PilotSchedule, EstimationError> {
    assert!(t_slots >= nt, "T >= N_t required");
    let scale = (pilot_power / nt as f64).sqrt();
    let x = CMat::from_fn(nt, t_slots, |r, c| {
        C64::from_polar(scale, -2.0 * PI * (r * c) as f64 / t_slots as f64)
    });

    let i_max = grouping.i_max();
    let mut psi_rows: Vec<Vec<C64>> = Vec::with_capacity(i_max);
    let mut psi = CMat::zeros(0, 0);
    for i in 1..=i_max {
        // Top block: previous Psi with the split column duplicated.
        let mut next = CMat::zeros(i, i);
        if i > 1 {
            let j = grouping.split_history()[i - 2];
            for r in 0..i - 1 {
                for c in 0..i {
                    let src = if c <= j { c } else { c - 1 };
                    next[(r, c)] = psi[(r, src)];
                }
            }
        }
        let mut accepted = false;
        for attempt in 0..MAX_PSI_REDRAWS {
            let row: Vec<C64> = if i == 1 {
                vec![draw_phase(quant_bits, rng)]
            } else if attempt < MAX_PSI_REDRAWS / 2 {
                // Child-copy row with second-child sign flip.
                let j = grouping.split_history()[i - 2];
                let prev = &psi_rows[i - 2];
                let gphase = draw_phase(quant_bits, rng);
                (0..i)
                    .map(|c| {
                        let src = if c <= j { c } else { c - 1 };
                        let sign = if c == j + 1 { -1.0 } else { 1.0 };
                        prev[src] * gphase * sign
                    })
                    .collect()
            } else {
                (0..i).map(|_| draw_phase(quant_bits, rng)).collect()
            };
            for (c, v) in row.iter().enumerate() {
                next[(i - 1, c)] = *v;
            }
            if sigma_min(&next) >= SIGMA_MIN_FLOOR {
                psi_rows.push(row);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(EstimationError::SingularPsi(MAX_PSI_REDRAWS));
        }
        psi = next;
    }
    Ok(PilotSchedule { grouping: grouping.clone(), x, psi_rows, psi })
}

/// Received pilot tensor: frontal slice `i` is `G Phi_i H X + N_i` with the
/// block-`i` expanded phases on the diagonal of `Phi_i`.
pub fn simulate_training_rx(
    cs: &ChannelSet,
    sched: &PilotSchedule,
    noise_var: f64,
    rng: &mut RngStream,
) -> CTensor3 {
    let h = cs.h();
    let t = sched.x.ncols();
    let slices = (1..=sched.i_blocks())
        .map(|i| {
            let theta = sched.expanded_phases(i);
            let phi = CMat::from_diagonal(&theta);
            let mut y = &cs.g * phi * &h * &sched.x;
            if noise_var > 0.0 {
                y += sample_cscg(noise_var, cs.nr(), t, rng).expect("non-negative variance");
            }
            y
        })
        .collect();
    CTensor3::from_slices(slices)
}

/// PARAFAC unfolding plus pilot equalization: row `i` of the result is
/// `vec(Y_i X^+)` with `X^+` the right pseudo-inverse. Noiseless output
/// equals `Xi^T (H^T ⊙ G)^T`.
pub fn unfold_and_equalize(y: &CTensor3, x: &CMat) -> Result<CMat, EstimationError> {
    let (nr, _t, i_blocks) = y.dims();
    let nt = x.nrows();
    let gram = x * x.adjoint();
    let gram_inv = gram
        .clone()
        .try_inverse()
        .filter(|_| {
            // reject near-singular pilots
            let (_, sig, _) = crate::numerics::svd(&gram).unwrap_or_else(|_| {
                (CMat::zeros(0, 0), vec![0.0], CMat::zeros(0, 0))
            });
            sig.last().copied().unwrap_or(0.0) > 1e-12 * sig[0].max(1e-300)
        })
        .ok_or(EstimationError::RankDeficientPilot)?;
    let x_pinv = x.adjoint() * gram_inv;
    let mut out = CMat::zeros(i_blocks, nr * nt);
    for i in 0..i_blocks {
        let eq = y.slice(i) * &x_pinv; // N_r x N_t
        out.set_row(i, &vec_of(&eq).transpose());
    }
    Ok(out)
}

/// Which CSI an estimate represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timescale {
    Small,
    Los,
}

/// Estimated aggregated cascaded channel, one row per element group.
#[derive(Debug, Clone)]
pub struct AggregatedEstimate {
    pub h_agg: CMat,
    pub grouping: GroupingScheme,
    pub timescale: Timescale,
    /// Number of fast coherence intervals averaged (LoS estimates only).
    pub t_coh_count: usize,
}

fn invert_psi(psi: &CMat) -> Result<CMat, EstimationError> {
    psi.clone()
        .try_inverse()
        .ok_or(EstimationError::SingularPsi(0))
}

/// Small-timescale estimate: `(Psi^I)^{-1} Ybar`.
pub fn estimate_aggregated(
    ybar: &CMat,
    sched: &PilotSchedule,
) -> Result<AggregatedEstimate, EstimationError> {
    let psi_inv = invert_psi(&sched.psi)?;
    Ok(AggregatedEstimate {
        h_agg: psi_inv * ybar,
        grouping: sched.grouping.clone(),
        timescale: Timescale::Small,
        t_coh_count: 0,
    })
}

/// Large-timescale (LoS) estimate: average the equalized block stacks over
/// `t_coh` fast intervals, then invert the group-phase matrix. The NLoS and
/// noise error terms shrink as `1/sqrt(t_coh)`.
pub fn estimate_los(
    ybar_per_coh: &[CMat],
    sched: &PilotSchedule,
) -> Result<AggregatedEstimate, EstimationError> {
    assert!(!ybar_per_coh.is_empty(), "need at least one coherence interval");
    let mut mean = ybar_per_coh[0].clone();
    for y in &ybar_per_coh[1..] {
        mean += y;
    }
    mean /= C64::new(ybar_per_coh.len() as f64, 0.0);
    let psi_inv = invert_psi(&sched.psi)?;
    Ok(AggregatedEstimate {
        h_agg: psi_inv * mean,
        grouping: sched.grouping.clone(),
        timescale: Timescale::Los,
        t_coh_count: ybar_per_coh.len(),
    })
}

/// Sum the rows of a full cascaded channel per group of block `i`: the
/// aggregated truth the estimator targets.
pub fn aggregate_rows(cascaded: &CMat, grouping: &GroupingScheme, block_i: usize) -> CMat {
    let groups = grouping.groups(block_i);
    let mut out = CMat::zeros(groups.len(), cascaded.ncols());
    for (k, range) in groups.iter().enumerate() {
        for m in range.clone() {
            let row = cascaded.row(m).into_owned();
            out.set_row(k, &(out.row(k) + row));
        }
    }
    out
}

/// Expand an aggregated estimate to element resolution by splitting each
/// group row evenly — the minimum-norm completion when only the group sums
/// are identifiable.
pub fn expand_to_elements(est: &AggregatedEstimate, block_i: usize) -> CMat {
    let groups = est.grouping.groups(block_i);
    let mut out = CMat::zeros(est.grouping.m(), est.h_agg.ncols());
    for (k, range) in groups.iter().enumerate() {
        let share = est.h_agg.row(k) / C64::new(range.len() as f64, 0.0);
        for m in range.clone() {
            out.set_row(m, &share);
        }
    }
    out
}

/// `||est - truth||_F^2 / ||truth||_F^2`.
pub fn nmse(est: &CMat, truth: &CMat) -> Result<f64, EstimationError> {
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return Err(EstimationError::ZeroTruth);
    }
    Ok((est - truth).norm_squared() / denom)
}

/// Velocity-aware pilot block selection: maximize the overhead-discounted
/// predicted rate `(1 - I T slot / T_coh) R_hat(I)` over the candidates.
/// `I = 0` denotes statistical-CSI-only operation (no per-interval training).
/// Ties break toward the smaller `I`.
pub fn select_pilot_blocks(
    model: &TimescaleModel,
    candidates: &[(usize, f64)],
) -> Result<usize, EstimationError> {
    assert!(!candidates.is_empty(), "candidates must be nonempty");
    let mut best: Option<(usize, f64)> = None;
    for &(i, r_hat) in candidates {
        let frac = if i == 0 {
            1.0
        } else {
            let te = model.estimation_time(i);
            if te >= model.t_coh_nlos {
                continue;
            }
            1.0 - te / model.t_coh_nlos
        };
        let val = frac * r_hat;
        let better = match best {
            None => true,
            Some((bi, bv)) => val > bv + 1e-15 * bv.abs() || ((val - bv).abs() <= 1e-15 * bv.abs().max(1.0) && i < bi),
        };
        if better {
            best = Some((i, val));
        }
    }
    best.map(|(i, _)| i).ok_or(EstimationError::NoFeasibleCandidate)
}
