//! Extended Kalman filter on the boundary-layer subsystem in stretched time.
//!
//! Prediction propagates mean and covariance jointly through the stretched
//! dynamics with the slow components frozen at the value supplied by the slow
//! estimator. The update forms its innovation on the composite state, so the
//! filter corrects the fast components against measurements of the full
//! plant.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::decomposition::{boundary_field, FastStateMap};
use crate::error::{Error, Result};
use crate::model::TwoTimeScaleSystem;
use crate::numdiff;

#[derive(Clone, Debug)]
pub struct EkfConfig {
    pub process_cov: DMatrix<f64>,
    pub measurement_cov: DMatrix<f64>,
    pub initial_cov: DMatrix<f64>,
    /// integrator substeps per prediction interval
    pub predict_substeps: usize,
    /// base state the correction is added to: the prediction when true, the
    /// previous filtered estimate when false
    pub update_from_prediction: bool,
}

pub struct FastEkf {
    sys: Arc<TwoTimeScaleSystem>,
    map: FastStateMap,
    cfg: EkfConfig,
    x: DVector<f64>,
    p: DMatrix<f64>,
    /// filtered estimate before the most recent prediction
    x_filtered: DVector<f64>,
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (m.transpose() + &m) * 0.5
}

impl FastEkf {
    pub fn new(
        sys: Arc<TwoTimeScaleSystem>,
        map: FastStateMap,
        guess: DVector<f64>,
        cfg: EkfConfig,
    ) -> Result<Self> {
        let nf = map.n_fast();
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
        expect("filter initial guess", nf, guess.len())?;
        expect("filter process covariance", nf, cfg.process_cov.nrows())?;
        expect("filter process covariance", nf, cfg.process_cov.ncols())?;
        expect("filter initial covariance", nf, cfg.initial_cov.nrows())?;
        expect("filter measurement covariance", sys.ny, cfg.measurement_cov.nrows())?;
        if cfg.predict_substeps == 0 {
            return Err(Error::Config("predict substeps must be at least 1".into()));
        }
        let p = cfg.initial_cov.clone();
        Ok(FastEkf {
            sys,
            map,
            cfg,
            x_filtered: guess.clone(),
            x: guess,
            p,
        })
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Propagates mean and covariance over one stretched-time interval. The
    /// covariance follows dP/dtau = A P + P A' + Q with A refreshed by finite
    /// differences at the start of every substep; P is symmetrized after each
    /// step to keep roundoff from accumulating.
    pub fn predict(&mut self, slow_context: &DVector<f64>, d_tau: f64) -> Result<()> {
        self.x_filtered = self.x.clone();
        let h = d_tau / self.cfg.predict_substeps as f64;
        let q = &self.cfg.process_cov;
        for _ in 0..self.cfg.predict_substeps {
            let field =
                |xf: &DVector<f64>| boundary_field(&self.sys, &self.map, xf, slow_context);
            let a = numdiff::jacobian_central(&field, &self.x);
            let pdot = |p: &DMatrix<f64>| &a * p + p * a.transpose() + q;

            let k1x = field(&self.x);
            let k1p = pdot(&self.p);
            let k2x = field(&(&self.x + &k1x * (h / 2.0)));
            let k2p = pdot(&(&self.p + &k1p * (h / 2.0)));
            let k3x = field(&(&self.x + &k2x * (h / 2.0)));
            let k3p = pdot(&(&self.p + &k2p * (h / 2.0)));
            let k4x = field(&(&self.x + &k3x * h));
            let k4p = pdot(&(&self.p + &k3p * h));

            let x_next = &self.x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
            let p_next = &self.p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
            self.x = x_next;
            self.p = symmetrize(p_next);
        }
        if self.x.iter().any(|v| !v.is_finite()) || self.p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonConvergence(
                "fast filter state became non-finite during prediction".into(),
            ));
        }
        Ok(())
    }

    /// Measurement update. The innovation compares `y` with the measurement
    /// map evaluated on the composite state assembled from the fast estimate,
    /// the supplied slow estimate and the boundary-layer equilibrium.
    pub fn update(
        &mut self,
        y: &DVector<f64>,
        slow_estimate: &DVector<f64>,
        x_fss: &DVector<f64>,
    ) -> Result<f64> {
        let delta = &self.x - x_fss;
        let x_cp = self.map.add_fast(slow_estimate, &delta);
        let innovation = y - (self.sys.h)(&x_cp);
        let jh = numdiff::jacobian_central(|p| (self.sys.h)(p), &x_cp);
        let h_mat = self.map.select_columns(&jh);

        let hp = &h_mat * &self.p;
        let s = &hp * h_mat.transpose() + &self.cfg.measurement_cov;
        let solved = s.clone().lu().solve(&hp).or_else(|| {
            // one jitter retry for a numerically singular innovation covariance
            let mut s2 = s;
            for i in 0..s2.nrows() {
                s2[(i, i)] += 1e-12;
            }
            s2.lu().solve(&hp)
        });
        let gain_t = solved.ok_or(Error::Singular {
            context: "innovation covariance",
        })?;
        let gain = gain_t.transpose();

        let base = if self.cfg.update_from_prediction {
            &self.x
        } else {
            &self.x_filtered
        };
        let x_new = base + &gain * &innovation;
        let identity = DMatrix::identity(self.map.n_fast(), self.map.n_fast());
        self.p = symmetrize((identity - gain * h_mat) * &self.p);
        self.x = x_new;
        self.x_filtered = self.x.clone();
        Ok(innovation.norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// pure two-state boundary layer: both components fast, k = x2 - x1,
    /// b = [1, -2]^T, measured output x2
    fn toy() -> (Arc<TwoTimeScaleSystem>, FastStateMap) {
        let sys = Arc::new(TwoTimeScaleSystem {
            nx: 2,
            nu: 1,
            ny: 1,
            nk: 1,
            epsilon: 0.1,
            f: Box::new(|_| DVector::zeros(2)),
            g: Box::new(|_| DMatrix::zeros(2, 1)),
            b: Box::new(|_| DMatrix::from_column_slice(2, 1, &[1.0, -2.0])),
            k: Box::new(|x| DVector::from_column_slice(&[x[1] - x[0]])),
            h: Box::new(|x| DVector::from_column_slice(&[x[1]])),
            k_jacobian: Some(Box::new(|_| DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]))),
        });
        let map = FastStateMap::new(vec![0, 1], 2).unwrap();
        (sys, map)
    }

    fn config(nf: usize, ny: usize) -> EkfConfig {
        EkfConfig {
            process_cov: DMatrix::identity(nf, nf) * 1e-2,
            measurement_cov: DMatrix::identity(ny, ny) * 1e-6,
            initial_cov: DMatrix::identity(nf, nf) * 1e-8,
            predict_substeps: 20,
            update_from_prediction: true,
        }
    }

    fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
        p.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let (sys, map) = toy();
        let guess = DVector::from_column_slice(&[0.4, 1.6]);
        let mut ekf = FastEkf::new(Arc::clone(&sys), map, guess, config(2, 1)).unwrap();
        let context = DVector::from_column_slice(&[0.5, 1.5]);
        let fss = DVector::from_column_slice(&[a_fss(), a_fss()]);
        for step in 0..300 {
            ekf.predict(&context, 0.1).unwrap();
            let y = DVector::from_column_slice(&[a_fss()]);
            ekf.update(&y, &context, &fss).unwrap();
            let p = ekf.covariance();
            let asym = (p - p.transpose()).amax();
            assert!(asym < 1e-14, "asymmetry {asym} at step {step}");
            assert!(min_eigenvalue(p) > -1e-12, "indefinite at step {step}");
        }
    }

    /// equilibrium of the toy boundary layer from (0.5, 1.5): conserves
    /// 2 x1 + x2 = 2.5, k = 0 at x1 = x2 = 2.5 / 3
    fn a_fss() -> f64 {
        2.5 / 3.0
    }

    #[test]
    fn covariance_prediction_matches_fine_reference() {
        let (sys, map) = toy();
        let guess = DVector::from_column_slice(&[0.4, 1.6]);
        let context = DVector::from_column_slice(&[0.5, 1.5]);

        let mut coarse = FastEkf::new(
            Arc::clone(&sys),
            map.clone(),
            guess.clone(),
            config(2, 1),
        )
        .unwrap();
        coarse.predict(&context, 0.1).unwrap();

        let mut fine_cfg = config(2, 1);
        fine_cfg.predict_substeps = 2000;
        let mut fine = FastEkf::new(Arc::clone(&sys), map, guess, fine_cfg).unwrap();
        fine.predict(&context, 0.1).unwrap();

        let dx = (coarse.estimate() - fine.estimate()).amax();
        let dp = (coarse.covariance() - fine.covariance()).amax();
        assert!(dx < 1e-9, "mean gap {dx}");
        assert!(dp < 1e-8, "covariance gap {dp}");
    }

    #[test]
    fn update_pulls_measured_component() {
        let (sys, map) = toy();
        let guess = DVector::from_column_slice(&[0.9, 0.9]);
        let mut cfg = config(2, 1);
        cfg.initial_cov = DMatrix::identity(2, 2) * 1e-2;
        let mut ekf = FastEkf::new(Arc::clone(&sys), map, guess, cfg).unwrap();
        let context = DVector::zeros(2);
        let fss = DVector::zeros(2);
        // composite equals the fast estimate here, so y targets x2 = 0.2
        let y = DVector::from_column_slice(&[0.2]);
        ekf.update(&y, &context, &fss).unwrap();
        assert_relative_eq!(ekf.estimate()[1], 0.2, epsilon = 1e-3);
    }

    #[test]
    fn singular_innovation_reports_after_jitter() {
        let (sys, map) = toy();
        let guess = DVector::from_column_slice(&[0.9, 0.9]);
        let mut cfg = config(2, 1);
        // zero covariances make the innovation covariance exactly singular;
        // the jitter retry turns the update into a harmless no-op
        cfg.measurement_cov = DMatrix::zeros(1, 1);
        cfg.initial_cov = DMatrix::zeros(2, 2);
        let mut ekf = FastEkf::new(Arc::clone(&sys), map, guess, cfg).unwrap();
        let y = DVector::from_column_slice(&[0.2]);
        let out = ekf.update(&y, &DVector::zeros(2), &DVector::zeros(2));
        assert!(out.is_ok());
    }
}
