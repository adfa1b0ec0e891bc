//! Fixed-step explicit integration, noisy truth simulation, stiffness probing.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{InputSignal, TwoTimeScaleSystem};
use crate::numdiff;

pub const DEFAULT_MAX_NORM: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug)]
pub struct StepperConfig {
    pub method: Method,
    pub step: f64,
    /// state norm beyond which the run is declared divergent
    pub max_norm: f64,
}

impl Default for StepperConfig {
    fn default() -> Self {
        StepperConfig {
            method: Method::Rk4,
            step: 0.01,
            max_norm: DEFAULT_MAX_NORM,
        }
    }
}

/// Uniformly sampled state history.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }
}

pub fn euler_step<F>(field: &F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    x + field(x) * h
}

pub fn rk4_step<F>(field: &F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k1 = field(x);
    let k2 = field(&(x + &k1 * (h / 2.0)));
    let k3 = field(&(x + &k2 * (h / 2.0)));
    let k4 = field(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

pub fn step_once<F>(method: Method, field: &F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    match method {
        Method::Euler => euler_step(field, x, h),
        Method::Rk4 => rk4_step(field, x, h),
    }
}

/// Number of steps covering `duration`, requiring an exact division.
pub fn steps_in(step: f64, duration: f64) -> Result<usize> {
    if step <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    if duration < 0.0 {
        return Err(Error::Config(format!(
            "duration must be nonnegative, got {duration}"
        )));
    }
    let n = (duration / step).round();
    if (n * step - duration).abs() > 1e-12 * duration.abs().max(1.0) {
        return Err(Error::StepMismatch {
            step,
            interval: duration,
        });
    }
    Ok(n as usize)
}

fn check_state(x: &DVector<f64>, t: f64, max_norm: f64) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() || norm > max_norm {
        return Err(Error::Diverged { time: t, norm });
    }
    Ok(())
}

/// Integrates an autonomous field over `duration` starting at `t0`.
pub fn integrate_fixed<F>(
    field: &F,
    x0: &DVector<f64>,
    t0: f64,
    duration: f64,
    cfg: &StepperConfig,
) -> Result<Trajectory>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = steps_in(cfg.step, duration)?;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut x = x0.clone();
    times.push(t0);
    states.push(x.clone());
    for i in 0..n {
        let t = t0 + (i + 1) as f64 * cfg.step;
        x = step_once(cfg.method, field, &x, cfg.step);
        check_state(&x, t, cfg.max_norm)?;
        times.push(t);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Additive process and measurement noise levels with a reproducible seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub process_std: f64,
    pub measurement_std: f64,
    pub seed: u64,
}

/// Two independent counter-mode streams derived from one seed, so the
/// process and measurement draws never interleave.
pub struct NoiseStreams {
    process: ChaCha20Rng,
    measurement: ChaCha20Rng,
    process_dist: Normal<f64>,
    measurement_dist: Normal<f64>,
}

impl NoiseSpec {
    pub fn streams(&self) -> Result<NoiseStreams> {
        let dist = |std: f64, what: &str| {
            Normal::new(0.0, std)
                .map_err(|e| Error::Config(format!("{what} noise level: {e}")))
        };
        let mut process = ChaCha20Rng::seed_from_u64(self.seed);
        process.set_stream(0);
        let mut measurement = ChaCha20Rng::seed_from_u64(self.seed);
        measurement.set_stream(1);
        Ok(NoiseStreams {
            process,
            measurement,
            process_dist: dist(self.process_std, "process")?,
            measurement_dist: dist(self.measurement_std, "measurement")?,
        })
    }
}

impl NoiseStreams {
    pub fn process_draw(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.process_dist.sample(&mut self.process))
    }

    pub fn measurement_draw(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.measurement_dist.sample(&mut self.measurement))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TruthOptions {
    pub step: f64,
    pub n_steps: usize,
    /// internal integrator substeps per grid step, 1 leaves the grid step as is
    pub substeps: usize,
    pub max_norm: f64,
}

/// Integrates the full model on a uniform grid and samples measurements at
/// every grid point. Process noise is drawn once per grid step and held over
/// its substeps; measurement noise is added per sample.
pub fn simulate_truth(
    sys: &TwoTimeScaleSystem,
    x0: &DVector<f64>,
    input: &InputSignal,
    opts: &TruthOptions,
    noise: Option<&NoiseSpec>,
) -> Result<(Trajectory, Vec<DVector<f64>>)> {
    if opts.substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    let mut streams = noise.map(|n| n.streams()).transpose()?;
    let mut times = Vec::with_capacity(opts.n_steps + 1);
    let mut states = Vec::with_capacity(opts.n_steps + 1);
    let mut measurements = Vec::with_capacity(opts.n_steps + 1);
    let mut x = x0.clone();

    let measure = |x: &DVector<f64>, streams: &mut Option<NoiseStreams>| {
        let mut y = (sys.h)(x);
        if let Some(s) = streams.as_mut() {
            y += s.measurement_draw(sys.ny);
        }
        y
    };

    times.push(0.0);
    states.push(x.clone());
    measurements.push(measure(&x, &mut streams));
    let h_sub = opts.step / opts.substeps as f64;
    for q in 0..opts.n_steps {
        let t = q as f64 * opts.step;
        let u = input.value(t);
        let w = streams.as_mut().map(|s| s.process_draw(sys.nx));
        let field = |p: &DVector<f64>| {
            let mut d = sys.rhs(p, &u);
            if let Some(w) = &w {
                d += w;
            }
            d
        };
        for _ in 0..opts.substeps {
            x = rk4_step(&field, &x, h_sub);
        }
        let t_next = (q + 1) as f64 * opts.step;
        check_state(&x, t_next, opts.max_norm)?;
        times.push(t_next);
        states.push(x.clone());
        measurements.push(measure(&x, &mut streams));
    }
    Ok((Trajectory { times, states }, measurements))
}

/// Largest decay rate and stiffness ratio of the finite-difference Jacobian
/// eigenvalues at a point. Eigenvalues with |Re| below 1e-12 are ignored.
pub fn stiffness_probe(
    sys: &TwoTimeScaleSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (f64, f64) {
    let jac = numdiff::jacobian_central(|p| sys.rhs(p, u), x);
    let rates: Vec<f64> = jac
        .complex_eigenvalues()
        .iter()
        .map(|c| c.re.abs())
        .filter(|r| *r > 1e-12)
        .collect();
    let max = rates.iter().cloned().fold(0.0_f64, f64::max);
    let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    if rates.is_empty() {
        (0.0, 1.0)
    } else {
        (max, max / min)
    }
}

/// Substeps keeping `rate * h` at or below one inside each grid step.
pub fn stability_substeps(rate: f64, step: f64) -> usize {
    ((rate * step).ceil() as usize).max(1)
}
