//! Fully known synthetic vapor-compression plant.
//!
//! Serves two roles: training-data generator for the learned component models
//! and benchmark ("reference") trajectory source for every solver comparison.
//! Property behavior is a smooth affine stand-in for a real refrigerant; the
//! component laws are the simplest ones with the right monotonicities.

pub mod cycle;
pub mod dataset;
pub mod profile;

pub use cycle::{
    eval_cycle, nominal_initial_state, sample_profile, simulate, AirSample, BoundarySample,
    CompressorParams, CycleEval, HxKind, HxParams, HxRecord, HxSeries, OracleRun, PlantConfig,
    PlantState, ValveParams, N_INPUTS, N_OUTPUTS,
};
pub use dataset::{
    dataset_from_run, generate_dataset, load_dataset, save_dataset, Dataset, HxTable,
    INPUT_COLUMNS, OUTPUT_COLUMNS,
};
pub use profile::{constant_profile, generate_profile, ActuationProfile, AirSeries, ProfileSpec};

use crate::error::{Error, Result};

/// Operating envelope shared by the oracle and the pressure solvers.
pub const P_MIN: f64 = 2.0e5;
pub const P_MAX: f64 = 6.0e6;
pub const H_MIN: f64 = 1.2e5;
pub const H_MAX: f64 = 5.5e5;

/// Affine map (p, h) -> (T, rho). Coefficients are chosen so that T and rho
/// stay positive over the whole envelope, density rises with pressure and
/// falls with enthalpy, and the state inversion below stays well conditioned
/// for the densities the cycle visits.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PropertyMap {
    pub p0: f64,
    pub h0: f64,
    pub t0: f64,
    pub rho0: f64,
    /// dT/dp (K/Pa)
    pub a_p: f64,
    /// dT/dh (K/(J/kg))
    pub a_h: f64,
    /// drho/dp (kg/m^3/Pa)
    pub b_p: f64,
    /// drho/dh (kg/m^3/(J/kg)), negative
    pub b_h: f64,
}

impl Default for PropertyMap {
    fn default() -> Self {
        PropertyMap {
            p0: 1.0e6,
            h0: 2.5e5,
            t0: 300.0,
            rho0: 80.0,
            a_p: 1.0e-5,
            a_h: 3.0e-4,
            b_p: 2.2e-5,
            b_h: -2.0e-4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PropEval {
    pub t: f64,
    pub rho: f64,
    /// Set when (p, h) had to be clamped into the envelope.
    pub clamped: bool,
}

impl PropertyMap {
    pub fn eval(&self, p: f64, h: f64) -> PropEval {
        let pc = p.clamp(P_MIN, P_MAX);
        let hc = h.clamp(H_MIN, H_MAX);
        let t = self.t0 + self.a_p * (pc - self.p0) + self.a_h * (hc - self.h0);
        let rho = self.rho0 + self.b_p * (pc - self.p0) + self.b_h * (hc - self.h0);
        PropEval { t, rho, clamped: pc != p || hc != h }
    }

    /// Inverts (M_r, E_hx, V) to the bulk (p, h): with rho* = M/V und
    /// u* = E/M, solve rho(p, h) = rho* together with h = u* + p/rho*.
    /// Closed form because the map is affine.
    pub fn state_to_ph(&self, m: f64, e: f64, volume: f64) -> Result<(f64, f64)> {
        if m <= 0.0 || volume <= 0.0 {
            return Err(Error::contract("state inversion needs positive mass and volume"));
        }
        let rho_star = m / volume;
        let u_star = e / m;
        let denom = self.b_p + self.b_h / rho_star;
        // The denominator vanishes at rho* = -b_h/b_p (~9 kg/m^3 for the
        // default map); cycles are parameterized to stay far above it.
        if denom.abs() < 1e-9 {
            return Err(Error::contract(format!(
                "state inversion singular at rho = {rho_star:.3} kg/m^3"
            )));
        }
        let p = (rho_star - self.rho0 + self.b_p * self.p0 - self.b_h * (u_star - self.h0)) / denom;
        let h = u_star + p / rho_star;
        Ok((p, h))
    }

    /// (M_r, E_hx) for a chosen bulk (p, h): used to construct initial states.
    pub fn ph_to_state(&self, p: f64, h: f64, volume: f64) -> (f64, f64) {
        let rho = self.eval(p, h).rho;
        let m = rho * volume;
        let u = h - p / rho;
        (m, m * u)
    }
}
