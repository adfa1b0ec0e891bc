//! Multi-rate coordination of the slow and fast estimators.
//!
//! One sampling grid at the fast period drives everything. The slow node
//! solves its horizon problem at every slow instant (once per `ratio` fast
//! instants, including the very first) and bridges the gap in between by
//! propagating its latest estimate open loop through the reduced model. At
//! every fast instant the slow information is produced and, in the
//! distributed scheme, delivered before the fast filter corrects, so the
//! fast update always sees a current slow context. The fast node never
//! transmits.
//!
//! The decentralized scheme runs the same two estimators without the link:
//! the fast filter substitutes a constant context assembled from the initial
//! guesses, and only the monitoring layer that assembles the composite
//! estimate sees both streams. The centralized reference solves a
//! full-model horizon problem at every fast instant instead.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::decomposition::{fast_steady_state, SubsystemPair};
use crate::error::{Error, Result};
use crate::estimators::{
    EkfConfig, EstimationModel, FastEkf, LmConfig, MheConfig, MovingHorizonEstimator,
};
use crate::integrate::{self, NoiseSpec, Trajectory, TruthOptions};
use crate::model::{InputSignal, TwoTimeScaleSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeKind {
    Distributed,
    Decentralized,
    Centralized,
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SchemeKind::Distributed => "distributed",
            SchemeKind::Decentralized => "decentralized",
            SchemeKind::Centralized => "centralized",
        };
        f.write_str(name)
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "distributed" => Ok(SchemeKind::Distributed),
            "decentralized" => Ok(SchemeKind::Decentralized),
            "centralized" => Ok(SchemeKind::Centralized),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Fast sampling period and the integer ratio of the slow period to it.
#[derive(Clone, Copy, Debug)]
pub struct SamplingSchedule {
    fast_step: f64,
    ratio: usize,
}

impl SamplingSchedule {
    pub fn new(fast_step: f64, ratio: usize) -> Result<Self> {
        if fast_step <= 0.0 || !fast_step.is_finite() {
            return Err(Error::Config(format!(
                "fast sampling period must be positive, got {fast_step}"
            )));
        }
        if ratio == 0 {
            return Err(Error::Config(
                "slow-to-fast sampling ratio must be at least 1".into(),
            ));
        }
        Ok(SamplingSchedule { fast_step, ratio })
    }

    pub fn fast_step(&self) -> f64 {
        self.fast_step
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn slow_step(&self) -> f64 {
        self.fast_step * self.ratio as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Node {
    SlowEstimator,
    FastEstimator,
}

/// One directed transmission between the estimator nodes.
#[derive(Clone, Copy, Debug)]
pub struct MessageEvent {
    pub time: f64,
    pub from: Node,
    pub to: Node,
}

pub struct EstimationScenario {
    pub x0_truth: DVector<f64>,
    pub input: InputSignal,
    pub horizon: f64,
    pub schedule: SamplingSchedule,
    pub noise: Option<NoiseSpec>,
    /// full-state initial guess shared by the slow and centralized estimators
    pub full_guess: DVector<f64>,
    /// fast-coordinate initial guess for the fast filter
    pub fast_guess: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct EstimatorGains {
    pub fast_process_var: f64,
    pub fast_measurement_var: f64,
    pub fast_initial_var: f64,
    pub slow_process_var: f64,
    pub slow_measurement_var: f64,
    pub slow_initial_var: f64,
    /// horizon length of the moving horizon estimators
    pub window: usize,
    pub state_lower: DVector<f64>,
    pub state_upper: DVector<f64>,
    pub noise_bound: f64,
    pub residual_bound: f64,
    pub predict_substeps: usize,
    pub update_from_prediction: bool,
    pub solver: LmConfig,
    /// largest stage step the centralized full-model estimator accepts
    pub centralized_max_stage_step: f64,
}

/// Everything a single estimation run produces.
pub struct RunRecord {
    pub scheme: SchemeKind,
    pub truth: Trajectory,
    pub measurements: Vec<DVector<f64>>,
    /// the reported estimate on the fast grid: composite for the estimator
    /// pair, the horizon solution for the centralized reference
    pub estimate: Trajectory,
    /// fast-coordinate filter estimates, pair schemes only
    pub fast_estimates: Option<Trajectory>,
    /// slow-node estimate stream on the fast grid, pair schemes only
    pub slow_stream: Option<Trajectory>,
    pub x_fss_from_guess: Option<DVector<f64>>,
    pub x_fss_from_truth: Option<DVector<f64>>,
    pub messages: Vec<MessageEvent>,
    pub mhe_solves: usize,
    pub mhe_nonconverged: usize,
    pub open_loop_predictions: usize,
    pub innovation_norms: Vec<f64>,
    /// wall-clock seconds spent inside estimator work
    pub estimator_seconds: f64,
}

/// Reduced model advanced one slow period per stage.
pub struct SlowStageModel {
    slow: crate::decomposition::SlowSubsystem,
    step: f64,
}

impl SlowStageModel {
    pub fn new(pair: &SubsystemPair, step: f64) -> Result<Self> {
        if step <= 0.0 || !step.is_finite() {
            return Err(Error::Config(format!(
                "slow stage step must be positive, got {step}"
            )));
        }
        Ok(SlowStageModel {
            slow: pair.slow(),
            step,
        })
    }
}

impl EstimationModel for SlowStageModel {
    fn nx(&self) -> usize {
        self.slow.system().nx
    }

    fn ny(&self) -> usize {
        self.slow.system().ny
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.slow.rk4_step(x, u, self.step)
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.slow.system().h)(x)
    }
}

/// Full stiff model advanced one fast period per stage. The explicit stage
/// integrator is only stable well below the boundary-layer time constant, so
/// stage steps above `max_stage_step` are rejected at construction.
pub struct FullStageModel {
    sys: Arc<TwoTimeScaleSystem>,
    step: f64,
}

impl FullStageModel {
    pub fn new(
        sys: Arc<TwoTimeScaleSystem>,
        step: f64,
        max_stage_step: f64,
    ) -> Result<Self> {
        if step <= 0.0 || !step.is_finite() {
            return Err(Error::Config(format!(
                "full-model stage step must be positive, got {step}"
            )));
        }
        if step > max_stage_step {
            return Err(Error::Config(format!(
                "full-model stage step {step} exceeds the stability limit {max_stage_step}"
            )));
        }
        Ok(FullStageModel { sys, step })
    }
}

impl EstimationModel for FullStageModel {
    fn nx(&self) -> usize {
        self.sys.nx
    }

    fn ny(&self) -> usize {
        self.sys.ny
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(integrate::rk4_step(&|p| self.sys.rhs(p, u), x, self.step))
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.sys.h)(x)
    }
}

/// Simulates the truth once and runs the requested estimation scheme on its
/// measurement record.
pub fn run_scheme(
    pair: &SubsystemPair,
    scenario: &EstimationScenario,
    gains: &EstimatorGains,
    scheme: SchemeKind,
) -> Result<RunRecord> {
    let sys = &pair.sys;
    if scenario.full_guess.len() != sys.nx {
        return Err(Error::DimensionMismatch {
            context: "full-state initial guess",
            expected: sys.nx,
            actual: scenario.full_guess.len(),
        });
    }
    if scenario.fast_guess.len() != pair.map.n_fast() {
        return Err(Error::DimensionMismatch {
            context: "fast-coordinate initial guess",
            expected: pair.map.n_fast(),
            actual: scenario.fast_guess.len(),
        });
    }
    let n = integrate::steps_in(scenario.schedule.fast_step(), scenario.horizon)?;
    let (truth, measurements) = integrate::simulate_truth(
        sys,
        &scenario.x0_truth,
        &scenario.input,
        &TruthOptions {
            step: scenario.schedule.fast_step(),
            n_steps: n,
            substeps: 1,
            max_norm: integrate::DEFAULT_MAX_NORM,
        },
        scenario.noise.as_ref(),
    )?;

    match scheme {
        SchemeKind::Centralized => {
            run_centralized(pair, scenario, gains, truth, measurements, n)
        }
        _ => run_pair(pair, scenario, gains, scheme, truth, measurements, n),
    }
}

fn pair_mhe_config(sys: &TwoTimeScaleSystem, gains: &EstimatorGains) -> MheConfig {
    MheConfig {
        window: gains.window,
        arrival_cov: DMatrix::identity(sys.nx, sys.nx) * gains.slow_initial_var,
        process_cov: DMatrix::identity(sys.nx, sys.nx) * gains.slow_process_var,
        measurement_cov: DMatrix::identity(sys.ny, sys.ny) * gains.slow_measurement_var,
        state_lower: gains.state_lower.clone(),
        state_upper: gains.state_upper.clone(),
        noise_bound: gains.noise_bound,
        residual_bound: gains.residual_bound,
        solver: gains.solver,
    }
}

fn run_pair(
    pair: &SubsystemPair,
    scenario: &EstimationScenario,
    gains: &EstimatorGains,
    scheme: SchemeKind,
    truth: Trajectory,
    measurements: Vec<DVector<f64>>,
    n: usize,
) -> Result<RunRecord> {
    let sys = &pair.sys;
    let map = &pair.map;
    let nf = map.n_fast();
    let dt_f = scenario.schedule.fast_step();
    let dt_s = scenario.schedule.slow_step();
    let ratio = scenario.schedule.ratio();
    let d_tau = dt_f / sys.epsilon;
    let distributed = scheme == SchemeKind::Distributed;

    // boundary-layer equilibrium as the estimators see it (from the guesses)
    // and as the plant has it (from the true initial state, for diagnostics)
    let x_fss_guess =
        fast_steady_state(&pair.fast(scenario.full_guess.clone()), &scenario.fast_guess)?;
    let x_fss_truth = fast_steady_state(
        &pair.fast(scenario.x0_truth.clone()),
        &map.extract(&scenario.x0_truth),
    )?;

    let slow_model = SlowStageModel::new(pair, dt_s)?;
    let mut mhe = MovingHorizonEstimator::new(
        slow_model,
        scenario.full_guess.clone(),
        pair_mhe_config(sys, gains),
    )?;

    let ekf_cfg = EkfConfig {
        process_cov: DMatrix::identity(nf, nf) * gains.fast_process_var,
        measurement_cov: DMatrix::identity(sys.ny, sys.ny) * gains.fast_measurement_var,
        initial_cov: DMatrix::identity(nf, nf) * gains.fast_initial_var,
        predict_substeps: gains.predict_substeps,
        update_from_prediction: gains.update_from_prediction,
    };
    let mut ekf = FastEkf::new(
        Arc::clone(sys),
        map.clone(),
        scenario.fast_guess.clone(),
        ekf_cfg,
    )?;

    let slow_sub = pair.slow();
    // what the unlinked fast filter substitutes for slow information
    let dec_context = map.overlay(&x_fss_guess, &scenario.full_guess);

    let mut composite_states = Vec::with_capacity(n + 1);
    let mut fast_states = Vec::with_capacity(n + 1);
    let mut slow_states = Vec::with_capacity(n + 1);
    let mut messages = Vec::new();
    let mut innovation_norms = Vec::with_capacity(n + 1);
    let mut open_loop = 0usize;
    let mut xs_now = scenario.full_guess.clone();
    let mut elapsed = 0.0_f64;

    for q in 0..=n {
        let t = q as f64 * dt_f;
        let started = Instant::now();

        // slow node first, so its estimate exists before the fast update
        if q % ratio == 0 {
            let u_stage = scenario.input.value((t - dt_s).max(0.0));
            mhe.advance(measurements[q].clone(), &u_stage);
            xs_now = mhe.solve()?.estimate;
        } else {
            let u_prev = scenario.input.value(t - dt_f);
            xs_now = slow_sub.rk4_step(&xs_now, &u_prev, dt_f)?;
            open_loop += 1;
        }
        if distributed {
            messages.push(MessageEvent {
                time: t,
                from: Node::SlowEstimator,
                to: Node::FastEstimator,
            });
        }

        let context = if distributed { &xs_now } else { &dec_context };
        if q > 0 {
            ekf.predict(context, d_tau)?;
        }
        innovation_norms.push(ekf.update(&measurements[q], context, &x_fss_guess)?);

        let delta = ekf.estimate() - &x_fss_guess;
        let x_cp = map.add_fast(&xs_now, &delta);
        elapsed += started.elapsed().as_secs_f64();

        composite_states.push(x_cp);
        fast_states.push(ekf.estimate().clone());
        slow_states.push(xs_now.clone());
    }

    let times: Vec<f64> = (0..=n).map(|i| i as f64 * dt_f).collect();
    Ok(RunRecord {
        scheme,
        truth,
        measurements,
        estimate: Trajectory {
            times: times.clone(),
            states: composite_states,
        },
        fast_estimates: Some(Trajectory {
            times: times.clone(),
            states: fast_states,
        }),
        slow_stream: Some(Trajectory {
            times,
            states: slow_states,
        }),
        x_fss_from_guess: Some(x_fss_guess),
        x_fss_from_truth: Some(x_fss_truth),
        messages,
        mhe_solves: mhe.solves(),
        mhe_nonconverged: mhe.nonconverged(),
        open_loop_predictions: open_loop,
        innovation_norms,
        estimator_seconds: elapsed,
    })
}

fn run_centralized(
    pair: &SubsystemPair,
    scenario: &EstimationScenario,
    gains: &EstimatorGains,
    truth: Trajectory,
    measurements: Vec<DVector<f64>>,
    n: usize,
) -> Result<RunRecord> {
    let sys = &pair.sys;
    let dt_f = scenario.schedule.fast_step();
    let model = FullStageModel::new(
        Arc::clone(sys),
        dt_f,
        gains.centralized_max_stage_step,
    )?;
    let mut mhe = MovingHorizonEstimator::new(
        model,
        scenario.full_guess.clone(),
        pair_mhe_config(sys, gains),
    )?;

    let mut states = Vec::with_capacity(n + 1);
    let mut nonconverged_seen = 0usize;
    let mut elapsed = 0.0_f64;
    for q in 0..=n {
        let t = q as f64 * dt_f;
        let started = Instant::now();
        let u_stage = scenario.input.value((t - dt_f).max(0.0));
        mhe.advance(measurements[q].clone(), &u_stage);
        let out = mhe.solve()?;
        elapsed += started.elapsed().as_secs_f64();
        if !out.converged {
            nonconverged_seen += 1;
        }
        states.push(out.estimate);
    }
    debug_assert_eq!(nonconverged_seen, mhe.nonconverged());

    let times: Vec<f64> = (0..=n).map(|i| i as f64 * dt_f).collect();
    Ok(RunRecord {
        scheme: SchemeKind::Centralized,
        truth,
        measurements,
        estimate: Trajectory { times, states },
        fast_estimates: None,
        slow_stream: None,
        x_fss_from_guess: None,
        x_fss_from_truth: None,
        messages: Vec::new(),
        mhe_solves: mhe.solves(),
        mhe_nonconverged: mhe.nonconverged(),
        open_loop_predictions: 0,
        innovation_norms: Vec::new(),
        estimator_seconds: elapsed,
    })
}
