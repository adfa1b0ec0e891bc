//! Finite-difference Jacobians with relative step scaling.

use nalgebra::{DMatrix, DVector};

/// Step factor for central differences.
pub const CENTRAL_STEP: f64 = 1e-6;

/// Step factor for forward differences.
pub const FORWARD_STEP: f64 = 1e-7;

/// Central-difference Jacobian of `f` at `x`, column step 1e-6 * (1 + |x_j|).
pub fn jacobian_central<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if x.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    let mut xp = x.clone();
    let mut xm = x.clone();
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = CENTRAL_STEP * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        cols.push((f(&xp) - f(&xm)) / (2.0 * h));
        xp[j] = x[j];
        xm[j] = x[j];
    }
    DMatrix::from_columns(&cols)
}

/// Forward-difference Jacobian reusing `fx = f(x)`, column step 1e-7 * (1 + |x_j|).
pub fn jacobian_forward<F>(f: F, x: &DVector<f64>, fx: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if x.is_empty() {
        return DMatrix::zeros(fx.len(), 0);
    }
    let mut xp = x.clone();
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = FORWARD_STEP * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        cols.push((f(&xp) - fx) / h);
        xp[j] = x[j];
    }
    DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn map(x: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[x[0] * x[0] + x[1], (x[0] * x[1]).sin()])
    }

    fn map_jacobian(x: &DVector<f64>) -> DMatrix<f64> {
        let c = (x[0] * x[1]).cos();
        DMatrix::from_row_slice(2, 2, &[2.0 * x[0], 1.0, x[1] * c, x[0] * c])
    }

    #[test]
    fn central_matches_analytic() {
        let x = DVector::from_column_slice(&[0.7, -1.3]);
        let jac = jacobian_central(map, &x);
        let exact = map_jacobian(&x);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(jac[(i, j)], exact[(i, j)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn forward_matches_analytic_coarsely() {
        let x = DVector::from_column_slice(&[0.7, -1.3]);
        let fx = map(&x);
        let jac = jacobian_forward(map, &x, &fx);
        let exact = map_jacobian(&x);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(jac[(i, j)], exact[(i, j)], epsilon = 1e-5);
            }
        }
    }
}
