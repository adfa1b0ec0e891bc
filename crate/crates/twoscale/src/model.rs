//! System description for singularly perturbed dynamics
//! dx/dt = f(x) + g(x) u + (1/eps) b(x) k(x), y = h(x).
//!
//! The stiff channel b(x) k(x) / eps carries the fast response. Which state
//! components it drives is not declared here; it is recovered from the
//! sparsity of b by the decomposition module.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numdiff;

pub type VectorFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Relative singular value cutoff used for rank decisions.
pub const RANK_TOL: f64 = 1e-8;

pub struct TwoTimeScaleSystem {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    /// number of constraint components, the column count of b
    pub nk: usize,
    pub epsilon: f64,
    /// drift term
    pub f: VectorFn,
    /// input matrix, nx by nu
    pub g: MatrixFn,
    /// stiff input matrix, nx by nk
    pub b: MatrixFn,
    /// constraint map whose zero set is the slow manifold
    pub k: VectorFn,
    /// measurement map
    pub h: VectorFn,
    /// analytic Jacobian of k; finite differences are used when absent
    pub k_jacobian: Option<MatrixFn>,
}

impl TwoTimeScaleSystem {
    /// Full right-hand side at state `x` and input `u`.
    pub fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f)(x) + (self.g)(x) * u + (self.b)(x) * (self.k)(x) / self.epsilon
    }

    /// Jacobian of the constraint map, analytic when provided.
    pub fn k_jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.k_jacobian {
            Some(jac) => jac(x),
            None => numdiff::jacobian_central(|p| (self.k)(p), x),
        }
    }

    /// Verifies that every callable returns the declared dimensions at a point.
    pub fn check_shapes(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let expect = |context, expected, actual| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                })
            }
        };
        expect("state vector", self.nx, x.len())?;
        expect("input vector", self.nu, u.len())?;
        expect("drift output", self.nx, (self.f)(x).len())?;
        let g = (self.g)(x);
        expect("input matrix rows", self.nx, g.nrows())?;
        expect("input matrix columns", self.nu, g.ncols())?;
        let b = (self.b)(x);
        expect("stiff matrix rows", self.nx, b.nrows())?;
        expect("stiff matrix columns", self.nk, b.ncols())?;
        expect("constraint output", self.nk, (self.k)(x).len())?;
        expect("measurement output", self.ny, (self.h)(x).len())?;
        let jk = self.k_jac(x);
        expect("constraint Jacobian rows", self.nk, jk.nrows())?;
        expect("constraint Jacobian columns", self.nx, jk.ncols())?;
        Ok(())
    }

    /// Checks the decomposition rank conditions at a point: b has full column
    /// rank and the pairing (dk/dx) b is nonsingular.
    pub fn check_rank_conditions(&self, x: &DVector<f64>) -> Result<()> {
        let b = (self.b)(x);
        let rank_b = effective_rank(&b);
        if rank_b != self.nk {
            return Err(Error::RankCondition(format!(
                "stiff input matrix has rank {rank_b}, need {}",
                self.nk
            )));
        }
        let lbk = self.k_jac(x) * &b;
        let rank_lbk = effective_rank(&lbk);
        if rank_lbk != self.nk {
            return Err(Error::RankCondition(format!(
                "constraint-channel pairing has rank {rank_lbk}, need {}",
                self.nk
            )));
        }
        Ok(())
    }

    /// Newton iteration on the full right-hand side at constant input.
    pub fn refine_steady_state(
        &self,
        x0: &DVector<f64>,
        u: &DVector<f64>,
        tol: f64,
        max_iters: usize,
    ) -> Result<DVector<f64>> {
        let mut x = x0.clone();
        for _ in 0..max_iters {
            let r = self.rhs(&x, u);
            if r.amax() < tol {
                return Ok(x);
            }
            let jac = numdiff::jacobian_central(|p| self.rhs(p, u), &x);
            let delta = jac.lu().solve(&(-&r)).ok_or(Error::Singular {
                context: "steady-state Newton step",
            })?;
            x += delta;
        }
        let residual = self.rhs(&x, u).amax();
        if residual < tol {
            Ok(x)
        } else {
            Err(Error::NonConvergence(format!(
                "steady-state Newton stalled at residual {residual:.3e}"
            )))
        }
    }
}

/// Rank from singular values with a relative cutoff.
pub fn effective_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

/// Input as a function of time.
pub enum InputSignal {
    Constant(DVector<f64>),
    /// zero-order hold: values[i] applies from times[i] until the next knot
    Steps {
        times: Vec<f64>,
        values: Vec<DVector<f64>>,
    },
}

impl InputSignal {
    pub fn constant(values: &[f64]) -> Self {
        InputSignal::Constant(DVector::from_column_slice(values))
    }

    pub fn steps(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::Config(
                "input signal needs matching, nonempty knot and value lists".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "input signal knots must be strictly increasing".into(),
            ));
        }
        Ok(InputSignal::Steps { times, values })
    }

    pub fn value(&self, t: f64) -> DVector<f64> {
        match self {
            InputSignal::Constant(u) => u.clone(),
            InputSignal::Steps { times, values } => {
                let idx = times.partition_point(|&knot| knot <= t);
                values[idx.saturating_sub(1)].clone()
            }
        }
    }
}
