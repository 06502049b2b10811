//! Generic constrained concave-maximization engine: exact Euclidean
//! projections onto the allocation feasible set (box + sum budget on the
//! power block, per-column probability simplex on the indicator block) and
//! projected gradient ascent with Barzilai-Borwein steps and Armijo
//! backtracking. Also houses the exhaustive allocation oracle used to
//! validate the solver on tiny instances.

use crate::ofdm_mvue::{total_throughput, Allocation, BroadbandScenario, RISProfiles, RMat};
use nalgebra::DVector;
use thiserror::Error;

pub type RVec = DVector<f64>;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("feasible region is empty: box [{lo}, {hi}]^{n} cannot meet sum bound {total}")]
    InfeasibleRegion { lo: f64, hi: f64, n: usize, total: f64 },
    #[error("brute force space of {0} combinations exceeds the {1} cap")]
    TooLarge(f64, f64),
    #[error("no feasible allocation in the enumerated grid")]
    NoFeasiblePoint,
}

/// Euclidean projection onto `{lo <= x_i <= hi, sum x <= total}` via
/// bisection on the shift multiplier of the KKT system.
pub fn project_box_sum(x: &[f64], lo: f64, hi: f64, total: f64) -> Result<Vec<f64>, OptimizerError> {
    assert!(lo <= hi, "box must be nonempty");
    let n = x.len();
    if lo * n as f64 > total * (1.0 + 1e-12) + 1e-15 {
        return Err(OptimizerError::InfeasibleRegion { lo, hi, n, total });
    }
    let clip = |v: f64| v.clamp(lo, hi);
    let clipped: Vec<f64> = x.iter().map(|&v| clip(v)).collect();
    if clipped.iter().sum::<f64>() <= total + 1e-12 * total.abs().max(1.0) {
        return Ok(clipped);
    }
    // find tau >= 0 with sum clip(x - tau) == total
    let mut t_lo = 0.0;
    let mut t_hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - lo;
    let sum_at = |tau: f64| x.iter().map(|&v| clip(v - tau)).sum::<f64>();
    for _ in 0..80 {
        let mid = 0.5 * (t_lo + t_hi);
        if sum_at(mid) > total {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
    }
    let tau = 0.5 * (t_lo + t_hi);
    Ok(x.iter().map(|&v| clip(v - tau)).collect())
}

/// Project one vector onto the probability simplex `{y >= 0, sum y = 1}` by
/// the sorted-threshold rule.
pub fn project_simplex(x: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // threshold from the largest j with sorted[j] > (cumsum_j - 1)/(j+1)
    let mut theta = 0.0;
    let mut cum = 0.0;
    let mut rho = 0;
    for (j, &v) in sorted.iter().enumerate() {
        cum += v;
        if v - (cum - 1.0) / (j + 1) as f64 > 0.0 {
            rho = j + 1;
            theta = (cum - 1.0) / (j + 1) as f64;
        }
    }
    debug_assert!(rho >= 1);
    x.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Project each column of a K x N matrix onto the probability simplex.
pub fn project_simplex_columns(rho: &RMat) -> RMat {
    let mut out = rho.clone();
    for n in 0..rho.ncols() {
        let col: Vec<f64> = rho.column(n).iter().copied().collect();
        let proj = project_simplex(&col);
        for (k, v) in proj.into_iter().enumerate() {
            out[(k, n)] = v;
        }
    }
    out
}

/// Feasible set of the relaxed allocation problem: the first `box_len`
/// coordinates carry a box plus a global sum budget, the remaining
/// coordinates form column-simplex blocks of height `simplex_rows`.
#[derive(Debug, Clone)]
pub struct FeasibleRegion {
    pub box_len: usize,
    pub lo: f64,
    pub hi: f64,
    pub sum_bound: f64,
    pub simplex_rows: usize,
    pub simplex_cols: usize,
}

impl FeasibleRegion {
    pub fn dim(&self) -> usize {
        self.box_len + self.simplex_rows * self.simplex_cols
    }

    /// Exact projection: the two blocks are separable, so projecting each
    /// independently is the joint Euclidean projection.
    pub fn project(&self, x: &RVec) -> Result<RVec, OptimizerError> {
        assert_eq!(x.len(), self.dim(), "dimension mismatch");
        let head: Vec<f64> = x.as_slice()[..self.box_len].to_vec();
        let mut out = project_box_sum(&head, self.lo, self.hi, self.sum_bound)?;
        let k = self.simplex_rows;
        for c in 0..self.simplex_cols {
            let start = self.box_len + c * k;
            let col = &x.as_slice()[start..start + k];
            out.extend(project_simplex(col));
        }
        Ok(RVec::from_vec(out))
    }

    /// One interior feasible point (used to certify non-emptiness).
    pub fn feasible_point(&self) -> Result<RVec, OptimizerError> {
        let x = RVec::zeros(self.dim());
        self.project(&x)
    }
}

/// Solver configuration.
#[derive(Debug, Clone, Copy)]
pub struct PgaConfig {
    pub max_iters: usize,
    pub grad_map_tol: f64,
    pub armijo_shrink: f64,
    pub armijo_slope: f64,
    pub bb_clip: (f64, f64),
}

impl Default for PgaConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            grad_map_tol: 1e-6,
            armijo_shrink: 0.5,
            armijo_slope: 1e-4,
            bb_clip: (1e-6, 1e3),
        }
    }
}

/// Outcome summary of a projected-gradient solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub objective: f64,
    pub grad_map_norm: f64,
    /// Line search could not find an ascent step (best iterate returned).
    pub stalled: bool,
}

/// Projected gradient ascent with Armijo backtracking. Guarantees a
/// non-decreasing objective along accepted iterates; with a concave
/// objective this converges to the constrained maximum.
pub fn pga_maximize<F, G>(
    objective: F,
    gradient: G,
    region: &FeasibleRegion,
    x0: &RVec,
    cfg: &PgaConfig,
) -> Result<(RVec, SolveReport), OptimizerError>
where
    F: Fn(&RVec) -> f64,
    G: Fn(&RVec) -> RVec,
{
    let mut x = region.project(x0)?;
    let mut f = objective(&x);
    let mut step = 1.0;
    let mut prev: Option<(RVec, RVec)> = None; // (x, grad)
    let mut stalled = false;
    let mut grad_map_norm = f64::INFINITY;
    let mut iterations = 0;

    for it in 0..cfg.max_iters {
        iterations = it + 1;
        let g = gradient(&x);
        grad_map_norm = (region.project(&(&x + &g))? - &x).norm();
        if grad_map_norm < cfg.grad_map_tol * (1.0 + f.abs()) {
            break;
        }
        if let Some((xp, gp)) = &prev {
            let s = &x - xp;
            let y = &g - gp;
            let sy = -s.dot(&y); // ascent: curvature sign flipped
            let ss = s.dot(&s);
            if sy > 0.0 && ss > 0.0 {
                step = (ss / sy).clamp(cfg.bb_clip.0, cfg.bb_clip.1);
            }
        }
        let mut t = step;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = region.project(&(&x + &g * t))?;
            let d = &cand - &x;
            let fc = objective(&cand);
            if fc >= f + cfg.armijo_slope * g.dot(&d) && fc >= f {
                prev = Some((x.clone(), g.clone()));
                x = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= cfg.armijo_shrink;
        }
        if !accepted {
            stalled = true;
            break;
        }
    }
    Ok((
        x,
        SolveReport { iterations, objective: f, grad_map_norm, stalled },
    ))
}

const BRUTE_FORCE_CAP: f64 = 1e7;

/// Exhaustive search over all exclusive carrier assignments and per-carrier
/// grid powers `{0, P_max/(G-1), ..., P_max}` subject to the power budget
/// and the QoS floor. Ties resolve to the lexicographically smallest
/// `(assignment, power-index)` tuple by enumeration order.
pub fn brute_force_alloc(
    scen: &BroadbandScenario,
    profiles: &RISProfiles,
    grid_levels: usize,
) -> Result<(Allocation, f64), OptimizerError> {
    assert!(grid_levels >= 2, "need at least the {{0, P_max}} grid");
    let (k, n) = (scen.k_vues, scen.n_carriers);
    let combos = (k as f64).powi(n as i32) * (grid_levels as f64).powi(n as i32);
    if combos > BRUTE_FORCE_CAP {
        return Err(OptimizerError::TooLarge(combos, BRUTE_FORCE_CAP));
    }
    let grid: Vec<f64> = (0..grid_levels)
        .map(|g| scen.p_max * g as f64 / (grid_levels - 1) as f64)
        .collect();

    let mut best: Option<(Allocation, f64)> = None;
    let mut assign = vec![0usize; n]; // owner VUE per carrier
    loop {
        let mut pow_idx = vec![0usize; n];
        loop {
            let total: f64 = pow_idx.iter().map(|&g| grid[g]).sum();
            if total <= scen.p_tot * (1.0 + 1e-12) {
                let mut rho = RMat::zeros(k, n);
                let mut p = RMat::zeros(k, n);
                for c in 0..n {
                    rho[(assign[c], c)] = 1.0;
                    p[(assign[c], c)] = grid[pow_idx[c]];
                }
                let alloc = Allocation { rho, p };
                let (tp, per) =
                    total_throughput(&alloc, profiles, scen).expect("constructed feasible");
                let qos_ok = per.iter().all(|&s| s >= scen.c_min * (1.0 - 1e-9));
                if qos_ok && best.as_ref().map_or(true, |(_, b)| tp > *b) {
                    best = Some((alloc, tp));
                }
            }
            // advance the power-index odometer
            let mut c = n;
            loop {
                if c == 0 {
                    break;
                }
                c -= 1;
                pow_idx[c] += 1;
                if pow_idx[c] < grid_levels {
                    break;
                }
                pow_idx[c] = 0;
            }
            if pow_idx.iter().all(|&g| g == 0) {
                break;
            }
        }
        // advance the assignment odometer
        let mut c = n;
        loop {
            if c == 0 {
                break;
            }
            c -= 1;
            assign[c] += 1;
            if assign[c] < k {
                break;
            }
            assign[c] = 0;
        }
        if assign.iter().all(|&a| a == 0) {
            break;
        }
    }
    best.ok_or(OptimizerError::NoFeasiblePoint)
}
