//! Benchmark plant: a jacketed continuous stirred tank reactor with a first
//! order exothermic reaction A -> B, heated through a jacket whose holdup is
//! small relative to the reactor. The temperature exchange between reactor
//! and jacket is the stiff channel: with k = T_j - T it enters both energy
//! balances scaled by 1/eps, so T and T_j are the fast components while the
//! concentrations evolve on the slow scale.
//!
//! States are [C_A, C_B, T, T_j], inputs [flow rate, heating rate], measured
//! outputs [C_B, T_j].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::TwoTimeScaleSystem;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CstrParams {
    pub feed_concentration: f64,
    pub heat_capacity: f64,
    pub jacket_heat_capacity: f64,
    pub density: f64,
    pub jacket_density: f64,
    pub rate_constant: f64,
    pub activation_energy: f64,
    pub gas_constant: f64,
    pub epsilon: f64,
    pub feed_temperature: f64,
    pub heating_temperature: f64,
    pub reaction_enthalpy: f64,
    pub reactor_volume: f64,
    pub jacket_volume: f64,
    /// drive the jacket heating term with the jacket temperature instead of
    /// the reactor temperature
    pub jacket_from_jacket_temp: bool,
}

impl Default for CstrParams {
    fn default() -> Self {
        CstrParams {
            feed_concentration: 2.5,
            heat_capacity: 8.0,
            jacket_heat_capacity: 8.0,
            density: 800.0,
            jacket_density: 800.0,
            rate_constant: 5e10,
            activation_energy: 60000.0,
            gas_constant: 8.314,
            epsilon: 0.1,
            feed_temperature: 305.0,
            heating_temperature: 330.0,
            reaction_enthalpy: 20000.0,
            reactor_volume: 1.0,
            jacket_volume: 0.0494,
            jacket_from_jacket_temp: false,
        }
    }
}

impl CstrParams {
    /// Arrhenius reaction rate at the state's temperature and concentration.
    pub fn rate(&self, x: &DVector<f64>) -> f64 {
        self.rate_constant
            * (-self.activation_energy / (self.gas_constant * x[2])).exp()
            * x[0]
            * self.reactor_volume
    }
}

pub fn state_labels() -> [&'static str; 4] {
    ["C_A", "C_B", "T", "T_j"]
}

pub fn output_labels() -> [&'static str; 2] {
    ["C_B", "T_j"]
}

/// Temperature both energy balances settle to when only the stiff exchange
/// acts: the boundary layer conserves V T + V_h T_j, so its equilibrium is
/// the holdup-weighted mean of the initial temperatures.
pub fn conservation_prediction(params: &CstrParams, x0: &DVector<f64>) -> f64 {
    (params.reactor_volume * x0[2] + params.jacket_volume * x0[3])
        / (params.reactor_volume + params.jacket_volume)
}

pub fn build(params: &CstrParams) -> Arc<TwoTimeScaleSystem> {
    let p = *params;
    Arc::new(TwoTimeScaleSystem {
        nx: 4,
        nu: 2,
        ny: 2,
        nk: 1,
        epsilon: p.epsilon,
        f: Box::new(move |x| {
            let r = p.rate(x);
            DVector::from_column_slice(&[
                -r / p.reactor_volume,
                r / p.reactor_volume,
                -r * p.reaction_enthalpy
                    / (p.density * p.heat_capacity * p.reactor_volume),
                0.0,
            ])
        }),
        g: Box::new(move |x| {
            let heating_ref = if p.jacket_from_jacket_temp { x[3] } else { x[2] };
            DMatrix::from_column_slice(
                4,
                2,
                &[
                    (p.feed_concentration - x[0]) / p.reactor_volume,
                    -x[1] / p.reactor_volume,
                    (p.feed_temperature - x[2]) / p.reactor_volume,
                    0.0,
                    0.0,
                    0.0,
                    0.0,
                    (p.heating_temperature - heating_ref) / p.jacket_volume,
                ],
            )
        }),
        b: Box::new(move |_| {
            DMatrix::from_column_slice(
                4,
                1,
                &[0.0, 0.0, 1.0 / p.reactor_volume, -1.0 / p.jacket_volume],
            )
        }),
        k: Box::new(|x| DVector::from_column_slice(&[x[3] - x[2]])),
        h: Box::new(|x| DVector::from_column_slice(&[x[1], x[3]])),
        k_jacobian: Some(Box::new(|_| {
            DMatrix::from_row_slice(1, 4, &[0.0, 0.0, -1.0, 1.0])
        })),
    })
}
