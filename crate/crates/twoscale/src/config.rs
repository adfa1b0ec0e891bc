//! Experiment configuration: the TOML schema, the two scenario presets, and
//! dotted-key overrides of the form `section.key=value`.
//!
//! Overrides are applied to the serialized configuration tree, so a key is
//! accepted only if it already exists there, and the replacement value must
//! match the type of the value it replaces (integers widen to floats).

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cstr::CstrParams;
use crate::error::{Error, Result};
use crate::estimators::LmConfig;
use crate::integrate::NoiseSpec;
use crate::metrics::IndexOptions;
use crate::model::InputSignal;
use crate::orchestrator::{
    EstimationScenario, EstimatorGains, SamplingSchedule, SchemeKind,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub initial_state: Vec<f64>,
    /// constant input held over the whole run
    pub input: Vec<f64>,
    pub horizon: f64,
    pub fast_step: f64,
    /// slow sampling period as a multiple of the fast one
    pub slow_ratio: usize,
    pub process_noise_std: f64,
    pub measurement_noise_std: f64,
    pub noisy: bool,
    pub state_guess: Vec<f64>,
    pub fast_guess: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::nominal()
    }
}

impl ScenarioConfig {
    /// Noisy estimation benchmark started near the operating point.
    pub fn nominal() -> Self {
        ScenarioConfig {
            name: "nominal".into(),
            initial_state: vec![2.5, 0.0, 306.0, 311.0],
            input: vec![2.0, 0.1],
            horizon: 5.0,
            fast_step: 0.01,
            slow_ratio: 10,
            process_noise_std: 0.1,
            measurement_noise_std: 0.001,
            noisy: true,
            state_guess: vec![1.5, 1e-4, 308.0, 313.0],
            fast_guess: vec![308.0, 313.0],
        }
    }

    /// Noise-free reconstruction benchmark started at the feed state, far
    /// from the slow manifold so the boundary layer is visible.
    pub fn decomposition() -> Self {
        ScenarioConfig {
            name: "decomposition".into(),
            initial_state: vec![2.5, 0.0, 305.0, 330.0],
            horizon: 40.0,
            noisy: false,
            ..Self::nominal()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub fast_process_var: f64,
    pub fast_measurement_var: f64,
    pub fast_initial_var: f64,
    pub slow_process_var: f64,
    pub slow_measurement_var: f64,
    pub slow_initial_var: f64,
    pub horizon_length: usize,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub noise_bound: f64,
    pub residual_bound: f64,
    pub predict_substeps: usize,
    pub update_from_prediction: bool,
    pub max_solver_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub cost_tol: f64,
    pub centralized_max_stage_step: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            fast_process_var: 1e-2,
            fast_measurement_var: 1e-6,
            fast_initial_var: 1e-8,
            slow_process_var: 1e-2,
            slow_measurement_var: 1e-6,
            slow_initial_var: 1e-8,
            horizon_length: 3,
            state_lower: vec![0.0, 0.0, 250.0, 250.0],
            state_upper: vec![5.0, 5.0, 400.0, 400.0],
            noise_bound: 1.0,
            residual_bound: 0.1,
            predict_substeps: 20,
            update_from_prediction: true,
            max_solver_iterations: 2000,
            gradient_tol: 1e-10,
            step_tol: 1e-8,
            cost_tol: 1e-6,
            centralized_max_stage_step: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scheme: String,
    pub seed: u64,
    /// leave the first retained sample out of the error indexes
    pub skip_first_sample: bool,
    pub scenario: ScenarioConfig,
    pub model: CstrParams,
    pub estimator: EstimatorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scheme: "distributed".into(),
            seed: 0,
            skip_first_sample: true,
            scenario: ScenarioConfig::default(),
            model: CstrParams::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn scheme_kind(&self) -> Result<SchemeKind> {
        self.scheme.parse()
    }

    pub fn index_options(&self) -> IndexOptions {
        IndexOptions {
            skip_first: self.skip_first_sample,
        }
    }

    pub fn estimation_scenario(&self) -> Result<EstimationScenario> {
        let sc = &self.scenario;
        let schedule = SamplingSchedule::new(sc.fast_step, sc.slow_ratio)?;
        let noise = sc.noisy.then_some(NoiseSpec {
            process_std: sc.process_noise_std,
            measurement_std: sc.measurement_noise_std,
            seed: self.seed,
        });
        Ok(EstimationScenario {
            x0_truth: DVector::from_vec(sc.initial_state.clone()),
            input: InputSignal::constant(&sc.input),
            horizon: sc.horizon,
            schedule,
            noise,
            full_guess: DVector::from_vec(sc.state_guess.clone()),
            fast_guess: DVector::from_vec(sc.fast_guess.clone()),
        })
    }

    pub fn gains(&self) -> EstimatorGains {
        let est = &self.estimator;
        EstimatorGains {
            fast_process_var: est.fast_process_var,
            fast_measurement_var: est.fast_measurement_var,
            fast_initial_var: est.fast_initial_var,
            slow_process_var: est.slow_process_var,
            slow_measurement_var: est.slow_measurement_var,
            slow_initial_var: est.slow_initial_var,
            window: est.horizon_length,
            state_lower: DVector::from_vec(est.state_lower.clone()),
            state_upper: DVector::from_vec(est.state_upper.clone()),
            noise_bound: est.noise_bound,
            residual_bound: est.residual_bound,
            predict_substeps: est.predict_substeps,
            update_from_prediction: est.update_from_prediction,
            solver: LmConfig {
                max_iterations: est.max_solver_iterations,
                gradient_tol: est.gradient_tol,
                step_tol: est.step_tol,
                cost_tol: est.cost_tol,
                ..LmConfig::default()
            },
            centralized_max_stage_step: est.centralized_max_stage_step,
        }
    }
}

/// Reads the configuration file (falling back to `base` when no path is
/// given), applies `key=value` overrides, then lets an explicit seed flag
/// win over both.
pub fn load_config(
    path: Option<&Path>,
    base: ExperimentConfig,
    sets: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!(
                    "cannot read configuration file {}: {e}",
                    p.display()
                ))
            })?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => base,
    };
    if !sets.is_empty() {
        cfg = apply_overrides(&cfg, sets)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn apply_overrides(cfg: &ExperimentConfig, sets: &[String]) -> Result<ExperimentConfig> {
    let mut tree = toml::Value::try_from(cfg)
        .map_err(|e| Error::Config(format!("configuration serialization failed: {e}")))?;
    for set in sets {
        let (key, raw) = set.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{set}` must look like key=value"))
        })?;
        set_key(&mut tree, key.trim(), raw.trim())?;
    }
    tree.try_into()
        .map_err(|e| Error::Config(format!("override produced an invalid configuration: {e}")))
}

fn parse_raw(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.to_string()),
    }
}

fn type_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "a string",
        toml::Value::Integer(_) => "an integer",
        toml::Value::Float(_) => "a floating-point number",
        toml::Value::Boolean(_) => "a boolean",
        toml::Value::Datetime(_) => "a datetime",
        toml::Value::Array(_) => "an array",
        toml::Value::Table(_) => "a table",
    }
}

fn coerce(new: toml::Value, existing: &toml::Value, key: &str) -> Result<toml::Value> {
    use toml::Value::{Array, Boolean, Float, Integer, String as TomlString};
    match (existing, new) {
        (Float(_), Integer(i)) => Ok(Float(i as f64)),
        (Float(_), v @ Float(_))
        | (Integer(_), v @ Integer(_))
        | (Boolean(_), v @ Boolean(_))
        | (TomlString(_), v @ TomlString(_)) => Ok(v),
        (Array(old), Array(items)) => {
            let template = old.first();
            let coerced: Result<Vec<toml::Value>> = items
                .into_iter()
                .map(|item| match template {
                    Some(t) => coerce(item, t, key),
                    None => Ok(item),
                })
                .collect();
            Ok(Array(coerced?))
        }
        (exist, got) => Err(Error::Config(format!(
            "configuration key `{key}` expects {}, got {}",
            type_name(exist),
            type_name(&got)
        ))),
    }
}

fn set_key(tree: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, seg) in segments.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("unknown configuration key `{key}`"))
        })?;
        node = table.get_mut(*seg).ok_or_else(|| {
            Error::Config(format!("unknown configuration key `{key}`"))
        })?;
        if i + 1 == segments.len() {
            *node = coerce(parse_raw(raw), node, key)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let out = toml::from_str::<ExperimentConfig>("unknown_knob = 1");
        assert!(out.is_err());
        let out = toml::from_str::<ExperimentConfig>("[scenario]\nbogus = 1");
        assert!(out.is_err());
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let out = load_config(
            Some(Path::new("/no/such/config.toml")),
            ExperimentConfig::default(),
            &[],
            None,
        );
        match out {
            Err(Error::Config(msg)) => assert!(msg.contains("/no/such/config.toml")),
            other => panic!("expected a configuration error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::default();
        let sets = vec![
            "scenario.fast_step=0.05".to_string(),
            "model.jacket_from_jacket_temp=true".to_string(),
            "scheme=centralized".to_string(),
            "estimator.horizon_length=5".to_string(),
            "scenario.initial_state=[2.5, 0.0, 305.0, 330.0]".to_string(),
        ];
        let out = apply_overrides(&cfg, &sets).unwrap();
        assert_eq!(out.scenario.fast_step, 0.05);
        assert!(out.model.jacket_from_jacket_temp);
        assert_eq!(out.scheme, "centralized");
        assert_eq!(out.estimator.horizon_length, 5);
        assert_eq!(out.scenario.initial_state, vec![2.5, 0.0, 305.0, 330.0]);
    }

    #[test]
    fn override_rejects_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let out = apply_overrides(&cfg, &["scenario.bogus=1".to_string()]);
        match out {
            Err(Error::Config(msg)) => assert!(msg.contains("scenario.bogus")),
            other => panic!("expected a configuration error, got {other:?}"),
        }
    }

    #[test]
    fn override_rejects_type_mismatches() {
        let cfg = ExperimentConfig::default();
        for bad in [
            "scenario.slow_ratio=0.5",
            "scenario.noisy=3",
            "scenario.horizon=fast",
        ] {
            let out = apply_overrides(&cfg, &[bad.to_string()]);
            assert!(matches!(out, Err(Error::Config(_))), "{bad} was accepted");
        }
    }

    #[test]
    fn integers_widen_to_floats() {
        let cfg = ExperimentConfig::default();
        let out = apply_overrides(&cfg, &["scenario.horizon=10".to_string()]).unwrap();
        assert_eq!(out.scenario.horizon, 10.0);
    }

    #[test]
    fn seed_flag_wins_over_overrides() {
        let base = ExperimentConfig::default();
        let cfg = load_config(None, base.clone(), &["seed=3".to_string()], Some(7)).unwrap();
        assert_eq!(cfg.seed, 7);
        let cfg = load_config(None, base, &["seed=3".to_string()], None).unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn presets_differ_where_expected() {
        let nominal = ScenarioConfig::nominal();
        let decomposition = ScenarioConfig::decomposition();
        assert!(nominal.noisy);
        assert!(!decomposition.noisy);
        assert_eq!(nominal.horizon, 5.0);
        assert_eq!(decomposition.horizon, 40.0);
        assert_eq!(decomposition.initial_state, vec![2.5, 0.0, 305.0, 330.0]);
        assert_eq!(nominal.initial_state, vec![2.5, 0.0, 306.0, 311.0]);
    }

    #[test]
    fn scenario_conversion_carries_the_seed_into_noise() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 11;
        let scenario = cfg.estimation_scenario().unwrap();
        assert_eq!(scenario.noise.unwrap().seed, 11);
        cfg.scenario.noisy = false;
        let scenario = cfg.estimation_scenario().unwrap();
        assert!(scenario.noise.is_none());
    }
}
