//! Fast/slow decomposition of a singularly perturbed system.
//!
//! The fast subsystem is the boundary layer in stretched time tau = t/eps,
//! driven only by the stiff channel with the slow components frozen. The slow
//! subsystem replaces the stiff channel by the algebraic variable z that keeps
//! the constraint k constant, which reduces the index-1 DAE obtained in the
//! eps -> 0 limit to an ODE on the manifold k = 0. The composite solution
//! adds the boundary layer to the slow solution and subtracts their shared
//! limit, the fast steady state.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrate::{self, Trajectory, TruthOptions};
use crate::model::{InputSignal, TwoTimeScaleSystem};
use crate::numdiff;

/// State components driven through the stiff channel, in increasing order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FastStateMap {
    indices: Vec<usize>,
    nx: usize,
}

impl FastStateMap {
    pub fn new(mut indices: Vec<usize>, nx: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::Config("fast state map needs at least one index".into()));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("fast state map has duplicate indices".into()));
        }
        if *indices.last().unwrap() >= nx {
            return Err(Error::DimensionMismatch {
                context: "fast state map",
                expected: nx,
                actual: *indices.last().unwrap() + 1,
            });
        }
        Ok(FastStateMap { indices, nx })
    }

    pub fn n_fast(&self) -> usize {
        self.indices.len()
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Fast components of a full state.
    pub fn extract(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| full[i]))
    }

    /// Full state with the fast components replaced.
    pub fn overlay(&self, fast: &DVector<f64>, base: &DVector<f64>) -> DVector<f64> {
        let mut out = base.clone();
        for (j, &i) in self.indices.iter().enumerate() {
            out[i] = fast[j];
        }
        out
    }

    /// Full state with a fast-coordinate increment added in place.
    pub fn add_fast(&self, base: &DVector<f64>, delta: &DVector<f64>) -> DVector<f64> {
        let mut out = base.clone();
        for (j, &i) in self.indices.iter().enumerate() {
            out[i] += delta[j];
        }
        out
    }

    /// Columns of a full-state Jacobian belonging to the fast components.
    pub fn select_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<_> = self.indices.iter().map(|&i| m.column(i)).collect();
        DMatrix::from_columns(&cols)
    }

    /// Rows of a full-state matrix belonging to the fast components.
    pub fn select_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<_> = self.indices.iter().map(|&i| m.row(i)).collect();
        DMatrix::from_rows(&rows)
    }
}

/// Boundary-layer field in stretched time: the fast rows of b(x) k(x) with
/// the remaining components of `context` frozen.
pub fn boundary_field(
    sys: &TwoTimeScaleSystem,
    map: &FastStateMap,
    fast: &DVector<f64>,
    context: &DVector<f64>,
) -> DVector<f64> {
    let x = map.overlay(fast, context);
    map.extract(&((sys.b)(&x) * (sys.k)(&x)))
}

pub struct SubsystemPair {
    pub sys: Arc<TwoTimeScaleSystem>,
    pub map: FastStateMap,
}

impl SubsystemPair {
    pub fn fast(&self, base: DVector<f64>) -> FastSubsystem {
        FastSubsystem {
            sys: Arc::clone(&self.sys),
            map: self.map.clone(),
            base,
        }
    }

    pub fn slow(&self) -> SlowSubsystem {
        SlowSubsystem {
            sys: Arc::clone(&self.sys),
            map: self.map.clone(),
        }
    }
}

/// Derives the fast state map from the sparsity of b at a reference point and
/// verifies the rank conditions there.
pub fn derive(
    sys: Arc<TwoTimeScaleSystem>,
    x_ref: &DVector<f64>,
    u_ref: &DVector<f64>,
) -> Result<SubsystemPair> {
    sys.check_shapes(x_ref, u_ref)?;
    let b = (sys.b)(x_ref);
    let scale = b.amax();
    if scale <= 0.0 {
        return Err(Error::RankCondition(
            "stiff input matrix vanishes at the reference point".into(),
        ));
    }
    let indices: Vec<usize> = (0..sys.nx)
        .filter(|&i| b.row(i).amax() > 1e-12 * scale)
        .collect();
    let map = FastStateMap::new(indices, sys.nx)?;
    sys.check_rank_conditions(x_ref)?;
    Ok(SubsystemPair { sys, map })
}

/// The boundary layer with a fixed slow context.
pub struct FastSubsystem {
    sys: Arc<TwoTimeScaleSystem>,
    map: FastStateMap,
    base: DVector<f64>,
}

impl FastSubsystem {
    pub fn field(&self, fast: &DVector<f64>) -> DVector<f64> {
        boundary_field(&self.sys, &self.map, fast, &self.base)
    }

    pub fn map(&self) -> &FastStateMap {
        &self.map
    }

    pub fn base(&self) -> &DVector<f64> {
        &self.base
    }

    pub fn system(&self) -> &Arc<TwoTimeScaleSystem> {
        &self.sys
    }
}

/// The reduced model on the constraint manifold.
pub struct SlowSubsystem {
    sys: Arc<TwoTimeScaleSystem>,
    map: FastStateMap,
}

impl SlowSubsystem {
    /// z = -[(dk/dx) b]^{-1} (dk/dx)(f + g u), the value of the stiff term
    /// that keeps k constant along the flow.
    pub fn algebraic_input(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let jk = self.sys.k_jac(x);
        let lbk = &jk * (self.sys.b)(x);
        let rhs = &jk * ((self.sys.f)(x) + (self.sys.g)(x) * u);
        lbk.lu().solve(&(-rhs)).ok_or(Error::Singular {
            context: "algebraic variable solve",
        })
    }

    /// f + g u + b z.
    pub fn field(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.algebraic_input(x, u)?;
        Ok((self.sys.f)(x) + (self.sys.g)(x) * u + (self.sys.b)(x) * z)
    }

    pub fn rk4_step(&self, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
        let k1 = self.field(x, u)?;
        let k2 = self.field(&(x + &k1 * (h / 2.0)), u)?;
        let k3 = self.field(&(x + &k2 * (h / 2.0)), u)?;
        let k4 = self.field(&(x + &k3 * h), u)?;
        Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
    }

    /// Initial state matched to the boundary layer: the original slow
    /// components with the fast ones moved to the fast steady state, which
    /// places the state on the manifold k = 0.
    pub fn consistent_initial_state(
        &self,
        x0: &DVector<f64>,
        x_fss: &DVector<f64>,
    ) -> DVector<f64> {
        self.map.overlay(x_fss, x0)
    }

    pub fn map(&self) -> &FastStateMap {
        &self.map
    }

    pub fn system(&self) -> &Arc<TwoTimeScaleSystem> {
        &self.sys
    }
}

/// Orthonormal basis of the left null space of a tall full-column-rank matrix.
fn left_null_basis(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = b.nrows();
    let gram = b.transpose() * b;
    let inv = gram.try_inverse().ok_or(Error::Singular {
        context: "conserved-direction projector",
    })?;
    let proj = DMatrix::identity(n, n) - b * inv * b.transpose();
    let proj = (proj.transpose() + &proj) * 0.5;
    let eig = proj.symmetric_eigen();
    let mut cols = Vec::new();
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > 0.5 {
            cols.push(eig.eigenvectors.column(i).into_owned());
        }
    }
    if cols.is_empty() {
        Ok(DMatrix::zeros(n, 0))
    } else {
        Ok(DMatrix::from_columns(&cols))
    }
}

/// Boundary-layer equilibrium reached from `fast0`: integrate the stretched
/// field until it vanishes, then polish with Newton on the constraint
/// augmented by the directions the fast flow conserves.
pub fn fast_steady_state(fast: &FastSubsystem, fast0: &DVector<f64>) -> Result<DVector<f64>> {
    let jac = numdiff::jacobian_central(|p| fast.field(p), fast0);
    let rates: Vec<f64> = jac
        .complex_eigenvalues()
        .iter()
        .map(|c| c.re.abs())
        .filter(|r| *r > 1e-12)
        .collect();
    if rates.is_empty() {
        return Err(Error::NonConvergence(
            "boundary layer has no decaying direction at the initial point".into(),
        ));
    }
    let fastest = rates.iter().cloned().fold(0.0_f64, f64::max);
    let slowest = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let h = 0.05 / fastest;
    let tau_max = 50.0 / slowest;

    let mut x = fast0.clone();
    let mut tau = 0.0;
    while tau < tau_max {
        x = integrate::rk4_step(&|p| fast.field(p), &x, h);
        tau += h;
        let norm = x.norm();
        if !norm.is_finite() || norm > integrate::DEFAULT_MAX_NORM {
            return Err(Error::Diverged { time: tau, norm });
        }
        if fast.field(&x).amax() < 1e-10 {
            break;
        }
    }

    // Newton polish: drive k to zero exactly while pinning the conserved
    // directions at their integrated values.
    let sys = fast.system();
    let map = fast.map();
    let x_full = map.overlay(&x, fast.base());
    let b_fast = map.select_rows(&(sys.b)(&x_full));
    let w = left_null_basis(&b_fast)?;
    let anchor = w.transpose() * &x;

    let residual = |xf: &DVector<f64>| -> DVector<f64> {
        let full = map.overlay(xf, fast.base());
        let k = (sys.k)(&full);
        let mut r = DVector::zeros(k.len() + anchor.len());
        r.rows_mut(0, k.len()).copy_from(&k);
        if !anchor.is_empty() {
            r.rows_mut(k.len(), anchor.len())
                .copy_from(&(w.transpose() * xf - &anchor));
        }
        r
    };

    for _ in 0..50 {
        let r = residual(&x);
        if r.amax() < 1e-12 {
            return Ok(x);
        }
        let full = map.overlay(&x, fast.base());
        let jk_fast = map.select_columns(&sys.k_jac(&full));
        let mut jac = DMatrix::zeros(r.len(), x.len());
        jac.rows_mut(0, jk_fast.nrows()).copy_from(&jk_fast);
        if !anchor.is_empty() {
            jac.rows_mut(jk_fast.nrows(), anchor.len())
                .copy_from(&w.transpose());
        }
        let delta = jac.lu().solve(&(-&r)).ok_or(Error::Singular {
            context: "boundary-layer equilibrium polish",
        })?;
        x += delta;
    }
    let leftover = residual(&x).amax();
    if leftover < 1e-10 {
        Ok(x)
    } else {
        Err(Error::NonConvergence(format!(
            "boundary-layer equilibrium polish stalled at residual {leftover:.3e}"
        )))
    }
}

/// Cubic spline resampling with the not-a-knot end rule. With fewer than four
/// samples the unique interpolant of matching degree is used: constant for
/// one sample, linear for two, parabolic for three. Queries outside the
/// sample range are an error.
pub fn resample_cubic(
    times: &[f64],
    values: &[DVector<f64>],
    queries: &[f64],
) -> Result<Vec<DVector<f64>>> {
    if times.is_empty() || times.len() != values.len() {
        return Err(Error::Config(
            "resampling needs matching, nonempty time and value lists".into(),
        ));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "resampling times must be strictly increasing".into(),
        ));
    }
    let lo = times[0];
    let hi = *times.last().unwrap();
    let tol = 1e-9 * (1.0 + (hi - lo).abs());
    for &q in queries {
        if q < lo - tol || q > hi + tol {
            return Err(Error::OutOfRange { query: q, lo, hi });
        }
    }
    let clamp = |q: f64| q.clamp(lo, hi);
    let n = times.len();
    let dim = values[0].len();

    match n {
        1 => Ok(queries.iter().map(|_| values[0].clone()).collect()),
        2 => {
            let h = times[1] - times[0];
            Ok(queries
                .iter()
                .map(|&q| {
                    let s = (clamp(q) - times[0]) / h;
                    &values[0] * (1.0 - s) + &values[1] * s
                })
                .collect())
        }
        3 => Ok(queries
            .iter()
            .map(|&q| {
                let t = clamp(q);
                let mut out = DVector::zeros(dim);
                for i in 0..3 {
                    let mut basis = 1.0;
                    for j in 0..3 {
                        if j != i {
                            basis *= (t - times[j]) / (times[i] - times[j]);
                        }
                    }
                    out += &values[i] * basis;
                }
                out
            })
            .collect()),
        _ => {
            // second-derivative (moment) formulation; the knot matrix is shared
            // across components, so factor it once
            let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
            let mut a = DMatrix::zeros(n, n);
            a[(0, 0)] = h[1];
            a[(0, 1)] = -(h[0] + h[1]);
            a[(0, 2)] = h[0];
            for i in 1..n - 1 {
                a[(i, i - 1)] = h[i - 1] / 6.0;
                a[(i, i)] = (h[i - 1] + h[i]) / 3.0;
                a[(i, i + 1)] = h[i] / 6.0;
            }
            a[(n - 1, n - 3)] = h[n - 2];
            a[(n - 1, n - 2)] = -(h[n - 3] + h[n - 2]);
            a[(n - 1, n - 1)] = h[n - 3];
            let lu = a.lu();

            // moments per component
            let mut moments: Vec<DVector<f64>> = Vec::with_capacity(dim);
            for c in 0..dim {
                let mut rhs = DVector::zeros(n);
                for i in 1..n - 1 {
                    let d1 = (values[i + 1][c] - values[i][c]) / h[i];
                    let d0 = (values[i][c] - values[i - 1][c]) / h[i - 1];
                    rhs[i] = d1 - d0;
                }
                moments.push(lu.solve(&rhs).ok_or(Error::Singular {
                    context: "spline moment system",
                })?);
            }

            let mut out = Vec::with_capacity(queries.len());
            for &q in queries {
                let t = clamp(q);
                let idx = times.partition_point(|&knot| knot <= t).saturating_sub(1);
                let i = idx.min(n - 2);
                let hi_ = h[i];
                let dl = times[i + 1] - t;
                let dr = t - times[i];
                let mut v = DVector::zeros(dim);
                for c in 0..dim {
                    let m0 = moments[c][i];
                    let m1 = moments[c][i + 1];
                    v[c] = m0 * dl.powi(3) / (6.0 * hi_)
                        + m1 * dr.powi(3) / (6.0 * hi_)
                        + (values[i][c] / hi_ - m0 * hi_ / 6.0) * dl
                        + (values[i + 1][c] / hi_ - m1 * hi_ / 6.0) * dr;
                }
                out.push(v);
            }
            Ok(out)
        }
    }
}

/// Composite reconstruction on a shared grid: slow solution plus boundary
/// layer minus the fast steady state. The stretched-time grid must satisfy
/// tau_i = t_i / eps.
pub fn composite(
    fast_tau: &Trajectory,
    slow: &Trajectory,
    x_fss: &DVector<f64>,
    map: &FastStateMap,
    epsilon: f64,
) -> Result<Trajectory> {
    if fast_tau.len() != slow.len() {
        return Err(Error::DimensionMismatch {
            context: "composite grids",
            expected: slow.len(),
            actual: fast_tau.len(),
        });
    }
    let mut states = Vec::with_capacity(slow.len());
    for i in 0..slow.len() {
        let t = slow.times[i];
        if (fast_tau.times[i] * epsilon - t).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(Error::GridMismatch(format!(
                "stretched time {} does not match t/eps = {} at index {i}",
                fast_tau.times[i],
                t / epsilon
            )));
        }
        let delta = &fast_tau.states[i] - x_fss;
        states.push(map.add_fast(&slow.states[i], &delta));
    }
    Ok(Trajectory {
        times: slow.times.clone(),
        states,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct DecompositionOptions {
    pub fast_step: f64,
    pub slow_step: f64,
    pub horizon: f64,
    /// substep the truth and boundary-layer integrations to stay inside the
    /// explicit stability region; the output grids are unchanged
    pub auto_substeps: bool,
    pub max_norm: f64,
}

impl Default for DecompositionOptions {
    fn default() -> Self {
        DecompositionOptions {
            fast_step: 0.01,
            slow_step: 0.1,
            horizon: 40.0,
            auto_substeps: true,
            max_norm: integrate::DEFAULT_MAX_NORM,
        }
    }
}

pub struct DecompositionRun {
    /// full model on the fast grid
    pub truth: Trajectory,
    /// boundary layer on the stretched grid, fast coordinates
    pub fast: Trajectory,
    /// reduced model on the slow grid
    pub slow: Trajectory,
    /// reduced model resampled to the fast grid
    pub slow_dense: Trajectory,
    /// composite reconstruction on the fast grid
    pub composite: Trajectory,
    /// fast coordinates of the boundary-layer equilibrium
    pub x_fss: DVector<f64>,
}

/// Runs the full pipeline: boundary layer, equilibrium, reduced model,
/// resampling, composite, and the reference truth integration.
pub fn decomposition_run(
    pair: &SubsystemPair,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    opts: &DecompositionOptions,
) -> Result<DecompositionRun> {
    let sys = &pair.sys;
    let n_fast = integrate::steps_in(opts.fast_step, opts.horizon)?;
    let n_slow = integrate::steps_in(opts.slow_step, opts.horizon)?;

    // boundary layer in stretched time
    let fast_sub = pair.fast(x0.clone());
    let xf0 = pair.map.extract(x0);
    let tau_step = opts.fast_step / sys.epsilon;
    let jac = numdiff::jacobian_central(|p| fast_sub.field(p), &xf0);
    let rate = jac
        .complex_eigenvalues()
        .iter()
        .map(|c| c.re.abs())
        .fold(0.0_f64, f64::max);
    let substeps = if opts.auto_substeps {
        integrate::stability_substeps(rate, tau_step)
    } else {
        1
    };
    let h_tau = tau_step / substeps as f64;
    let mut fast_states = Vec::with_capacity(n_fast + 1);
    let mut fast_times = Vec::with_capacity(n_fast + 1);
    let mut xf = xf0.clone();
    fast_states.push(xf.clone());
    fast_times.push(0.0);
    for i in 0..n_fast {
        for _ in 0..substeps {
            xf = integrate::rk4_step(&|p| fast_sub.field(p), &xf, h_tau);
        }
        let tau = (i + 1) as f64 * tau_step;
        let norm = xf.norm();
        if !norm.is_finite() || norm > opts.max_norm {
            return Err(Error::Diverged {
                time: tau * sys.epsilon,
                norm,
            });
        }
        fast_times.push(tau);
        fast_states.push(xf.clone());
    }
    let fast = Trajectory {
        times: fast_times,
        states: fast_states,
    };

    let x_fss = fast_steady_state(&fast_sub, &xf0)?;

    // reduced model on the slow grid
    let slow_sub = pair.slow();
    let mut xs = slow_sub.consistent_initial_state(x0, &x_fss);
    let mut slow_times = Vec::with_capacity(n_slow + 1);
    let mut slow_states = Vec::with_capacity(n_slow + 1);
    slow_times.push(0.0);
    slow_states.push(xs.clone());
    for i in 0..n_slow {
        xs = slow_sub.rk4_step(&xs, u, opts.slow_step)?;
        let t = (i + 1) as f64 * opts.slow_step;
        let norm = xs.norm();
        if !norm.is_finite() || norm > opts.max_norm {
            return Err(Error::Diverged { time: t, norm });
        }
        slow_times.push(t);
        slow_states.push(xs.clone());
    }
    let slow = Trajectory {
        times: slow_times,
        states: slow_states,
    };

    // resample to the fast grid and build the composite
    let grid: Vec<f64> = (0..=n_fast).map(|i| i as f64 * opts.fast_step).collect();
    let slow_dense = Trajectory {
        times: grid.clone(),
        states: resample_cubic(&slow.times, &slow.states, &grid)?,
    };
    let comp = composite(&fast, &slow_dense, &x_fss, &pair.map, sys.epsilon)?;

    // reference truth on the same grid
    let truth_substeps = if opts.auto_substeps {
        let (rate, _) = integrate::stiffness_probe(sys, x0, u);
        integrate::stability_substeps(rate, opts.fast_step)
    } else {
        1
    };
    let (truth, _) = integrate::simulate_truth(
        sys,
        x0,
        &InputSignal::Constant(u.clone()),
        &TruthOptions {
            step: opts.fast_step,
            n_steps: n_fast,
            substeps: truth_substeps,
            max_norm: opts.max_norm,
        },
        None,
    )?;

    Ok(DecompositionRun {
        truth,
        fast,
        slow,
        slow_dense,
        composite: comp,
        x_fss,
    })
}
