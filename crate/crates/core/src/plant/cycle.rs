//! Lumped-parameter cycle dynamics and the fixed-step reference integrator.
//!
//! Topology: n_c compressors, each discharging into its own condenser; the
//! condenser outlets merge in a liquid manifold feeding n_v expansion valves,
//! each metering into its own evaporator; evaporator outlets merge in a
//! suction manifold shared by all compressors. Manifolds are massless, so
//! device flows are assigned directly and branch outflows are equal splits
//! of the opposite side's total. Total mass is conserved by construction.

use serde::{Deserialize, Serialize};

use super::profile::ActuationProfile;
use super::{PropertyMap, P_MAX, P_MIN};
use crate::error::{Error, Result};

pub const N_INPUTS: usize = 8;
pub const N_OUTPUTS: usize = 9;

// Input column indices.
pub const IN_T_AIR: usize = 0;
pub const IN_PHI: usize = 1;
pub const IN_MDOT_AIR: usize = 2;
pub const IN_P_AMB: usize = 3;
pub const IN_MDOT_R: usize = 4;
pub const IN_H_IN: usize = 5;
pub const IN_H_OUT: usize = 6;
pub const IN_P_OUT: usize = 7;

// Output column indices.
pub const OUT_P_FIRST: usize = 0;
pub const OUT_P_LAST: usize = 1;
pub const OUT_H_FIRST: usize = 2;
pub const OUT_H_LAST: usize = 3;
pub const OUT_T_AIR: usize = 4;
pub const OUT_QDOT_AIR: usize = 5;
pub const OUT_MASS: usize = 6;
pub const OUT_ENERGY: usize = 7;
pub const OUT_QDOT_LAT: usize = 8;

pub const C_P_AIR: f64 = 1005.0;
/// Fraction of positive air-side heat flow reported as the latent channel.
pub const LATENT_FRACTION: f64 = 0.3;
/// Relative manifold split sensitivity to branch pressure deviation (1/Pa).
/// A branch above its manifold mean sheds proportionally more outflow, which
/// is what makes parallel branches with unequal actuation settle instead of
/// draining one another. Zero total flow still means zero branch outflow.
pub const MANIFOLD_BALANCE: f64 = 5.0e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HxKind {
    Condenser,
    Evaporator,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressorParams {
    pub eta_vol: f64,
    pub v_disp: f64,
    pub eta_isen: f64,
}

impl Default for CompressorParams {
    fn default() -> Self {
        CompressorParams { eta_vol: 0.92, v_disp: 1.0e-5, eta_isen: 0.75 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValveParams {
    pub c_v: f64,
}

impl Default for ValveParams {
    fn default() -> Self {
        ValveParams { c_v: 9.0e-6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HxParams {
    pub volume: f64,
    pub ua: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantConfig {
    pub n_cond: usize,
    pub n_evap: usize,
    pub cond: HxParams,
    pub evap: HxParams,
    pub compressor: CompressorParams,
    pub valve: ValveParams,
    pub props: PropertyMap,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            n_cond: 2,
            n_evap: 1,
            cond: HxParams { volume: 0.01, ua: 120.0 },
            evap: HxParams { volume: 0.01, ua: 200.0 },
            compressor: CompressorParams::default(),
            valve: ValveParams::default(),
            props: PropertyMap::default(),
        }
    }
}

impl PlantConfig {
    pub fn scaled(n: usize) -> Self {
        PlantConfig { n_cond: n, n_evap: n, ..PlantConfig::default() }
    }

    pub fn n_hx(&self) -> usize {
        self.n_cond + self.n_evap
    }

    /// State layout: [M, E] per exchanger, condensers first.
    pub fn state_len(&self) -> usize {
        2 * self.n_hx()
    }

    pub fn hx_kind(&self, i: usize) -> HxKind {
        if i < self.n_cond {
            HxKind::Condenser
        } else {
            HxKind::Evaporator
        }
    }

    pub fn hx_params(&self, i: usize) -> &HxParams {
        match self.hx_kind(i) {
            HxKind::Condenser => &self.cond,
            HxKind::Evaporator => &self.evap,
        }
    }
}

/// Flattened state vector. Ordering is fixed by `PlantConfig::state_len`.
pub type PlantState = Vec<f64>;

/// Start from round-number bulk conditions on both sides.
pub fn nominal_initial_state(cfg: &PlantConfig) -> PlantState {
    let mut state = Vec::with_capacity(cfg.state_len());
    for i in 0..cfg.n_hx() {
        let (p, h) = match cfg.hx_kind(i) {
            HxKind::Condenser => (2.5e6, 2.6e5),
            HxKind::Evaporator => (5.0e5, 2.3e5),
        };
        let (m, e) = cfg.props.ph_to_state(p, h, cfg.hx_params(i).volume);
        state.push(m);
        state.push(e);
    }
    state
}

#[derive(Debug, Clone, Copy)]
pub struct AirSample {
    pub t_in: f64,
    pub phi: f64,
    pub mdot: f64,
    pub p_amb: f64,
}

/// Actuation and air-side boundary values frozen over one integration step.
#[derive(Debug, Clone)]
pub struct BoundarySample {
    pub speeds: Vec<f64>,
    pub openings: Vec<f64>,
    pub air_cond: AirSample,
    pub air_evap: AirSample,
}

pub fn sample_profile(profile: &ActuationProfile, step: usize) -> BoundarySample {
    BoundarySample {
        speeds: (0..profile.speeds.len()).map(|c| profile.speed(c, step)).collect(),
        openings: (0..profile.openings.len()).map(|v| profile.opening(v, step)).collect(),
        air_cond: AirSample {
            t_in: profile.air_cond.t_at(step),
            phi: profile.air_cond.phi,
            mdot: profile.air_cond.mdot,
            p_amb: profile.air_cond.p_amb,
        },
        air_evap: AirSample {
            t_in: profile.air_evap.t_at(step),
            phi: profile.air_evap.phi,
            mdot: profile.air_evap.mdot,
            p_amb: profile.air_evap.p_amb,
        },
    }
}

/// Instantaneous view of one exchanger: the model-facing input/output rows
/// plus the boundary flows behind them.
#[derive(Debug, Clone)]
pub struct HxRecord {
    pub inputs: [f64; N_INPUTS],
    pub outputs: [f64; N_OUTPUTS],
    pub mdot_in: f64,
    pub mdot_out: f64,
    pub mass_rate: f64,
    pub energy_rate: f64,
}

#[derive(Debug, Clone)]
pub struct CycleEval {
    pub deriv: Vec<f64>,
    pub hx: Vec<HxRecord>,
    pub p_liquid: f64,
    pub p_suction: f64,
}

pub fn eval_cycle(cfg: &PlantConfig, state: &[f64], bc: &BoundarySample) -> Result<CycleEval> {
    if state.len() != cfg.state_len() {
        return Err(Error::contract("state length does not match plant layout"));
    }
    if bc.speeds.len() != cfg.n_cond || bc.openings.len() != cfg.n_evap {
        return Err(Error::contract("boundary sample does not match device counts"));
    }

    let n_hx = cfg.n_hx();
    let mut p = vec![0.0; n_hx];
    let mut h = vec![0.0; n_hx];
    let mut temp = vec![0.0; n_hx];
    for i in 0..n_hx {
        let (m, e) = (state[2 * i], state[2 * i + 1]);
        let (pi, hi) = cfg.props.state_to_ph(m, e, cfg.hx_params(i).volume)?;
        if !pi.is_finite() || pi < 0.5 * P_MIN || pi > 2.0 * P_MAX {
            return Err(Error::Envelope { p: pi, lo: P_MIN, hi: P_MAX });
        }
        let ev = cfg.props.eval(pi, hi);
        p[i] = pi;
        h[i] = hi;
        temp[i] = ev.t;
    }

    let p_suction = p[cfg.n_cond..].iter().sum::<f64>() / cfg.n_evap as f64;
    let h_suction = h[cfg.n_cond..].iter().sum::<f64>() / cfg.n_evap as f64;
    let rho_suction = cfg.props.eval(p_suction, h_suction).rho;
    let p_liquid = p[..cfg.n_cond].iter().sum::<f64>() / cfg.n_cond as f64;
    let h_liquid = h[..cfg.n_cond].iter().sum::<f64>() / cfg.n_cond as f64;
    let rho_liquid = cfg.props.eval(p_liquid, h_liquid).rho;

    // Compressor k discharges against its own condenser pressure.
    let comp = &cfg.compressor;
    let mut mdot_comp = vec![0.0; cfg.n_cond];
    let mut dh_comp = vec![0.0; cfg.n_cond];
    for k in 0..cfg.n_cond {
        mdot_comp[k] = comp.eta_vol * bc.speeds[k] * rho_suction * comp.v_disp;
        dh_comp[k] = (p[k] - p_suction) / (rho_suction * comp.eta_isen);
    }
    let mut mdot_valve = vec![0.0; cfg.n_evap];
    for j in 0..cfg.n_evap {
        let drive = rho_liquid * (p_liquid - p[cfg.n_cond + j]);
        mdot_valve[j] = cfg.valve.c_v * bc.openings[j] * drive.max(0.0).sqrt();
    }
    let total_comp: f64 = mdot_comp.iter().sum();
    let total_valve: f64 = mdot_valve.iter().sum();
    // Branch outflow is the equal share scaled by a pressure-deviation
    // correction. Deviations from the manifold mean sum to rounding noise,
    // so the telescoped mass balance stays at machine precision.
    let cond_out: Vec<f64> = (0..cfg.n_cond)
        .map(|k| {
            total_valve
                * (1.0 / cfg.n_cond as f64 + MANIFOLD_BALANCE * (p[k] - p_liquid))
        })
        .collect();
    let evap_out: Vec<f64> = (0..cfg.n_evap)
        .map(|j| {
            total_comp
                * (1.0 / cfg.n_evap as f64
                    + MANIFOLD_BALANCE * (p[cfg.n_cond + j] - p_suction))
        })
        .collect();
    // Downstream exchangers receive the flow-weighted mix of what the
    // branches actually shed, so energy crossing a manifold is conserved.
    let weighted_h = |out: &[f64], hs: &[f64], fallback: f64| -> f64 {
        let total: f64 = out.iter().sum();
        if total.abs() < 1e-12 {
            fallback
        } else {
            out.iter().zip(hs).map(|(o, hv)| o * hv).sum::<f64>() / total
        }
    };
    let h_liquid_mix = weighted_h(&cond_out, &h[..cfg.n_cond], h_liquid);
    let h_suction_mix = weighted_h(&evap_out, &h[cfg.n_cond..], h_suction);

    let mut deriv = vec![0.0; cfg.state_len()];
    let mut hx = Vec::with_capacity(n_hx);
    for i in 0..n_hx {
        let kind = cfg.hx_kind(i);
        let (air, ua, mdot_in, h_in, mdot_out, p_out) = match kind {
            HxKind::Condenser => (
                &bc.air_cond,
                cfg.cond.ua,
                mdot_comp[i],
                h_suction_mix + dh_comp[i],
                cond_out[i],
                p_liquid,
            ),
            HxKind::Evaporator => {
                let j = i - cfg.n_cond;
                (&bc.air_evap, cfg.evap.ua, mdot_valve[j], h_liquid_mix, evap_out[j], p_suction)
            }
        };
        let qdot_air = ua * (temp[i] - air.t_in);
        let mass_rate = mdot_in - mdot_out;
        let energy_rate = mdot_in * h_in - mdot_out * h[i] - qdot_air;
        deriv[2 * i] = mass_rate;
        deriv[2 * i + 1] = energy_rate;

        let t_air_out = air.t_in + qdot_air / (air.mdot * C_P_AIR);
        let mut inputs = [0.0; N_INPUTS];
        inputs[IN_T_AIR] = air.t_in;
        inputs[IN_PHI] = air.phi;
        inputs[IN_MDOT_AIR] = air.mdot;
        inputs[IN_P_AMB] = air.p_amb;
        inputs[IN_MDOT_R] = mdot_in;
        inputs[IN_H_IN] = h_in;
        inputs[IN_H_OUT] = h[i];
        inputs[IN_P_OUT] = p_out;
        let mut outputs = [0.0; N_OUTPUTS];
        outputs[OUT_P_FIRST] = p[i];
        outputs[OUT_P_LAST] = p[i];
        outputs[OUT_H_FIRST] = h_in;
        outputs[OUT_H_LAST] = h[i];
        outputs[OUT_T_AIR] = t_air_out;
        outputs[OUT_QDOT_AIR] = qdot_air;
        outputs[OUT_MASS] = state[2 * i];
        outputs[OUT_ENERGY] = state[2 * i + 1];
        outputs[OUT_QDOT_LAT] = LATENT_FRACTION * qdot_air.max(0.0);
        hx.push(HxRecord { inputs, outputs, mdot_in, mdot_out, mass_rate, energy_rate, });
    }

    Ok(CycleEval { deriv, hx, p_liquid, p_suction })
}

/// Per-exchanger time series produced by `simulate`.
#[derive(Debug, Clone)]
pub struct HxSeries {
    pub kind: HxKind,
    pub inputs: Vec<[f64; N_INPUTS]>,
    pub outputs: Vec<[f64; N_OUTPUTS]>,
    pub mdot_in: Vec<f64>,
    pub mdot_out: Vec<f64>,
    pub mass_rate: Vec<f64>,
    pub energy_rate: Vec<f64>,
}

impl HxSeries {
    fn new(kind: HxKind) -> Self {
        HxSeries {
            kind,
            inputs: Vec::new(),
            outputs: Vec::new(),
            mdot_in: Vec::new(),
            mdot_out: Vec::new(),
            mass_rate: Vec::new(),
            energy_rate: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<PlantState>,
    pub hx: Vec<HxSeries>,
    pub p_liquid: Vec<f64>,
    pub p_suction: Vec<f64>,
    /// Per exchanger, the accumulated integral of the boundary energy terms,
    /// using the same stage weights as the state update.
    pub energy_integral: Vec<f64>,
}

/// Classic fourth-order Runge-Kutta with the boundary sample frozen over
/// each step. Records the exchanger views at the start of every step.
pub fn simulate(
    cfg: &PlantConfig,
    profile: &ActuationProfile,
    initial: &PlantState,
    steps: usize,
) -> Result<OracleRun> {
    let dt = profile.dt;
    let n = cfg.state_len();
    let mut y = initial.clone();
    let mut run = OracleRun {
        dt,
        times: Vec::with_capacity(steps),
        states: Vec::with_capacity(steps),
        hx: (0..cfg.n_hx()).map(|i| HxSeries::new(cfg.hx_kind(i))).collect(),
        p_liquid: Vec::with_capacity(steps),
        p_suction: Vec::with_capacity(steps),
        energy_integral: vec![0.0; cfg.n_hx()],
    };

    for step in 0..steps {
        let bc = sample_profile(profile, step);
        let t = step as f64 * dt;
        let k1 = eval_cycle(cfg, &y, &bc)?;

        run.times.push(t);
        run.states.push(y.clone());
        run.p_liquid.push(k1.p_liquid);
        run.p_suction.push(k1.p_suction);
        for (series, rec) in run.hx.iter_mut().zip(&k1.hx) {
            series.inputs.push(rec.inputs);
            series.outputs.push(rec.outputs);
            series.mdot_in.push(rec.mdot_in);
            series.mdot_out.push(rec.mdot_out);
            series.mass_rate.push(rec.mass_rate);
            series.energy_rate.push(rec.energy_rate);
        }

        let stage = |y0: &[f64], k: &[f64], scale: f64| -> Vec<f64> {
            y0.iter().zip(k).map(|(a, b)| a + scale * b).collect()
        };
        let k2 = eval_cycle(cfg, &stage(&y, &k1.deriv, 0.5 * dt), &bc)?;
        let k3 = eval_cycle(cfg, &stage(&y, &k2.deriv, 0.5 * dt), &bc)?;
        let k4 = eval_cycle(cfg, &stage(&y, &k3.deriv, dt), &bc)?;
        for i in 0..n {
            y[i] += dt / 6.0
                * (k1.deriv[i] + 2.0 * k2.deriv[i] + 2.0 * k3.deriv[i] + k4.deriv[i]);
        }
        for i in 0..cfg.n_hx() {
            run.energy_integral[i] += dt / 6.0
                * (k1.hx[i].energy_rate
                    + 2.0 * k2.hx[i].energy_rate
                    + 2.0 * k3.hx[i].energy_rate
                    + k4.hx[i].energy_rate);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { t, reason: "non-finite state".into() });
        }
    }

    Ok(run)
}
