//! Cycle-level orchestration: network topology, junction-pressure solves and
//! the three stepping modes (explicit Euler with embedded-pair step control,
//! and the two BDF-based modes).
//!
//! The moving parts per simulation step:
//!   1. solve the junction pressures against the component flow laws, using
//!      each exchanger's last committed surrogate outputs for its port
//!      pressures and outlet enthalpy,
//!   2. roll every exchanger's latent state forward to the evaluation time
//!      and decode fresh outputs,
//!   3. assemble mass and energy derivatives from the balanced flow set and
//!      the fresh decodes.
//! Fresh decodes become "committed" only at accepted output points, which
//! keeps trial evaluations inside the implicit solvers side-effect free.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corrector::{
    Corrector, CorrectionRecord, CorrectorRuntime, GpConfig, TrainingPair, N_CORR,
};
use crate::dae::{integrate_dassl, integrate_ida, problem_from_rhs, DaeConfig, DaeMode};
use crate::error::{Error, Result};
use crate::nn::checkpoint::WeightBundle;
use crate::nonlinear::{bounded_least_squares, solve_auto, Bounds, SolverOptions};
use crate::norm::ChannelStats;
use crate::pinode::{ModelConfig, PinodeWeights};
use crate::plant::cycle::{
    IN_H_IN, IN_H_OUT, IN_MDOT_AIR, IN_MDOT_R, IN_PHI, IN_P_AMB, IN_P_OUT, IN_T_AIR,
    OUT_ENERGY, OUT_H_FIRST, OUT_H_LAST, OUT_MASS, OUT_P_FIRST, OUT_P_LAST, OUT_QDOT_AIR,
    OUT_QDOT_LAT, OUT_T_AIR,
};
use crate::plant::{
    eval_cycle, sample_profile, ActuationProfile, OracleRun, PlantConfig, N_INPUTS, N_OUTPUTS,
    P_MAX, P_MIN,
};
use crate::static_models::StaticModel;

/// Mass-flow scale for the junction residuals, kg/s.
pub const M_SCALE: f64 = 0.01;

/// Conductance of the short connecting lines between a junction and the
/// exchanger port behind it, kg/s per Pa. Ties each junction unknown to the
/// committed port pressure of its neighbor; at operating flows the implied
/// junction-to-port offsets are a few hundred Pa, small against the 1e5 Pa
/// working range, so the closure perturbs the cycle negligibly while making
/// every residual row directly sensitive to its unknown.
pub const PORT_CONDUCTANCE: f64 = 5e-5;

// ---------------------------------------------------------------------------
// topology

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopoNode {
    Compressor(usize),
    Condenser(usize),
    Valve(usize),
    Evaporator(usize),
    Discharge(usize),
    Liquid,
    Suction,
}

impl TopoNode {
    pub fn is_component(&self) -> bool {
        matches!(
            self,
            TopoNode::Compressor(_)
                | TopoNode::Condenser(_)
                | TopoNode::Valve(_)
                | TopoNode::Evaporator(_)
        )
    }
}

/// Parallel-merge cycle: every compressor feeds its own condenser branch
/// through a discharge junction, all condensers drain into one liquid
/// manifold, valves draw from it into their evaporators, and all evaporators
/// return to one suction manifold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub n_c: usize,
    pub n_v: usize,
    pub edges: Vec<(TopoNode, TopoNode)>,
}

pub fn build_topology(n_c: usize, n_v: usize) -> Result<Topology> {
    if n_c == 0 || n_v == 0 {
        return Err(Error::contract("topology needs at least one branch per side"));
    }
    let mut edges = Vec::with_capacity(4 * n_c + 3 * n_v);
    for k in 0..n_c {
        edges.push((TopoNode::Suction, TopoNode::Compressor(k)));
        edges.push((TopoNode::Compressor(k), TopoNode::Discharge(k)));
        edges.push((TopoNode::Discharge(k), TopoNode::Condenser(k)));
        edges.push((TopoNode::Condenser(k), TopoNode::Liquid));
    }
    for j in 0..n_v {
        edges.push((TopoNode::Liquid, TopoNode::Valve(j)));
        edges.push((TopoNode::Valve(j), TopoNode::Evaporator(j)));
        edges.push((TopoNode::Evaporator(j), TopoNode::Suction));
    }
    Ok(Topology { n_c, n_v, edges })
}

impl Topology {
    pub fn n_components(&self) -> usize {
        2 * self.n_c + 2 * self.n_v
    }

    /// Unknown ordering: discharge junctions, then liquid, then suction.
    pub fn n_pressures(&self) -> usize {
        self.n_c + 2
    }

    pub fn state_len(&self) -> usize {
        2 * (self.n_c + self.n_v)
    }

    pub fn n_hx(&self) -> usize {
        self.n_c + self.n_v
    }

    /// Each component must sit on exactly one inlet and one outlet edge.
    pub fn validate(&self) -> Result<()> {
        let mut nodes: Vec<TopoNode> = Vec::new();
        for k in 0..self.n_c {
            nodes.push(TopoNode::Compressor(k));
            nodes.push(TopoNode::Condenser(k));
        }
        for j in 0..self.n_v {
            nodes.push(TopoNode::Valve(j));
            nodes.push(TopoNode::Evaporator(j));
        }
        for node in nodes {
            let outs = self.edges.iter().filter(|(a, _)| *a == node).count();
            let ins = self.edges.iter().filter(|(_, b)| *b == node).count();
            if outs != 1 || ins != 1 {
                return Err(Error::contract(format!(
                    "component {node:?} has {ins} inlets and {outs} outlets"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    Algebraic,
    Ida,
    Dassl,
}

impl std::str::FromStr for SolverMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "algebraic" => Ok(SolverMode::Algebraic),
            "ida" => Ok(SolverMode::Ida),
            "dassl" => Ok(SolverMode::Dassl),
            other => Err(Error::contract(format!("unknown solver mode {other:?}"))),
        }
    }
}

/// Step-size policy around actuation jumps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HighResConfig {
    /// Strict threshold on |Δu| between consecutive profile samples.
    pub tau: f64,
    pub n_pre: usize,
    pub n_post: usize,
    /// Output-step targets inside and outside jump windows, seconds.
    pub dt_high: f64,
    pub dt_low: f64,
    /// BDF-stepper internal increment as a fraction of the step target.
    pub dassl_increment_factor: f64,
    /// Minimum output spacing as a fraction of the step target.
    pub dassl_min_output_factor: f64,
}

impl Default for HighResConfig {
    fn default() -> Self {
        HighResConfig {
            tau: 5.0,
            n_pre: 5,
            n_post: 50,
            dt_high: 2.5,
            dt_low: 7.5,
            dassl_increment_factor: 0.5,
            dassl_min_output_factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    pub mode: SolverMode,
    /// Step-control tolerance for the embedded-pair latent probe.
    pub eps_dt: f64,
    /// Junction-pressure solve tolerance.
    pub eps_soln: f64,
    pub m_scale: f64,
    /// Explicit-mode floor on the step, seconds.
    pub dt_min: f64,
    /// Multiplier on the output-step targets, tuned alongside the solver
    /// tolerances.
    pub dt_scale: f64,
    pub dae: DaeConfig,
    pub highres: HighResConfig,
    /// Apply the trained output corrector each recorded step.
    pub corrector: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            mode: SolverMode::Algebraic,
            eps_dt: 1.1e-3,
            eps_soln: 1e-6,
            m_scale: M_SCALE,
            dt_min: 0.1,
            dt_scale: 1.0,
            dae: DaeConfig::default(),
            highres: HighResConfig::default(),
            corrector: false,
        }
    }
}

impl SystemConfig {
    fn check(&self) -> Result<()> {
        if self.eps_dt <= 0.0 || self.eps_soln <= 0.0 || self.m_scale <= 0.0 {
            return Err(Error::contract("tolerances must be positive"));
        }
        if self.dt_min <= 0.0 || self.dt_scale <= 0.0 {
            return Err(Error::contract("step bounds must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// trained artifacts

/// One exchanger surrogate with the channel statistics it was trained under.
#[derive(Debug, Clone)]
pub struct HxSurrogate {
    pub weights: PinodeWeights,
    pub in_stats: ChannelStats,
    pub out_stats: ChannelStats,
}

#[derive(Serialize, Deserialize)]
struct SurrogateMeta {
    cfg: ModelConfig,
    in_stats: ChannelStats,
    out_stats: ChannelStats,
}

impl HxSurrogate {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = SurrogateMeta {
            cfg: self.weights.cfg,
            in_stats: self.in_stats.clone(),
            out_stats: self.out_stats.clone(),
        };
        let mut bundle = WeightBundle::new(serde_json::to_value(&meta)?);
        self.weights.for_each_param(|name, t| bundle.push(name, t));
        bundle.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bundle = WeightBundle::load(path)?;
        let meta: SurrogateMeta = serde_json::from_value(bundle.meta.clone())?;
        let mut weights = PinodeWeights::new(meta.cfg, 0);
        let mut names = Vec::new();
        weights.for_each_param(|name, _| names.push(name.to_string()));
        for (name, slot) in names.iter().zip(weights.params_mut()) {
            let loaded = bundle.tensor(name)?;
            if !loaded.same_shape(slot) {
                return Err(Error::contract(format!("checkpoint shape mismatch for {name}")));
            }
            *slot = loaded;
        }
        Ok(HxSurrogate { weights, in_stats: meta.in_stats, out_stats: meta.out_stats })
    }
}

#[derive(Clone)]
pub struct CorrectorPack {
    pub model: Corrector,
    pub gp: GpConfig,
    pub ema_alpha: f64,
}

/// Everything a simulation needs besides the scenario itself.
pub struct SystemModels {
    pub cond: HxSurrogate,
    pub evap: HxSurrogate,
    pub compressor: StaticModel,
    pub valve: StaticModel,
    pub corrector: Option<CorrectorPack>,
}

impl SystemModels {
    fn surrogate(&self, hx: usize, n_c: usize) -> &HxSurrogate {
        if hx < n_c {
            &self.cond
        } else {
            &self.evap
        }
    }
}

// ---------------------------------------------------------------------------
// per-exchanger runtime

/// Committed surrogate state of one exchanger: the latent and decoder hidden
/// vectors at the last accepted point, plus the decoded outputs everyone else
/// reads until the next commit.
#[derive(Debug, Clone)]
pub struct SurrogateRuntime {
    pub t_commit: f64,
    /// Latent at the committed time. The encoder anchor before the first
    /// advance, never decoded directly.
    pub z: Vec<f64>,
    /// Trailing latents at roughly the training step spacing, ending at the
    /// committed time. The decoder replays this window from a zero hidden
    /// state, exactly as it ran during training.
    pub z_seq: Vec<Vec<f64>>,
    pub outputs: [f64; N_OUTPUTS],
    pub outputs_norm: Vec<f64>,
    pub forcing_norm: Vec<f64>,
}

impl SurrogateRuntime {
    /// Seed the latent from a constant synthesized history: the initial
    /// input row and storage levels replicated across the encoder window.
    /// The committed outputs start as the supplied reference row, so the
    /// first span's flows are anchored to the initial condition.
    fn bootstrap(
        sur: &HxSurrogate,
        t0: f64,
        inputs: &[f64; N_INPUTS],
        outputs: &[f64; N_OUTPUTS],
        mass: f64,
        energy: f64,
    ) -> Result<Self> {
        let mut row = vec![0.0; N_INPUTS + 2];
        sur.in_stats.normalize_row(inputs, &mut row[..N_INPUTS]);
        row[N_INPUTS] = sur.out_stats.normalize_value(OUT_MASS, mass);
        row[N_INPUTS + 1] = sur.out_stats.normalize_value(OUT_ENERGY, energy);
        let window = vec![row.clone(); sur.weights.cfg.enc_window];
        let z = sur.weights.encode_plain(&window)?;
        let mut y_norm = vec![0.0; N_OUTPUTS];
        for (c, slot) in y_norm.iter_mut().enumerate() {
            *slot = sur.out_stats.normalize_value(c, outputs[c]);
        }
        Ok(SurrogateRuntime {
            t_commit: t0,
            z,
            z_seq: Vec::new(),
            outputs: *outputs,
            outputs_norm: y_norm,
            forcing_norm: row[..N_INPUTS].to_vec(),
        })
    }

    /// Decoder replay over the trailing latent window extended by `path`,
    /// falling back to the committed outputs while no advance has happened.
    fn decode_tail(&self, sur: &HxSurrogate, path: &[Vec<f64>]) -> Vec<f64> {
        let window = sur.weights.cfg.dec_window;
        let total = self.z_seq.len() + path.len();
        if total == 0 {
            return self.outputs_norm.clone();
        }
        let skip = total.saturating_sub(window);
        let mut h = vec![0.0; sur.weights.cfg.dec_hidden];
        let mut y = Vec::new();
        for z in self.z_seq.iter().chain(path).skip(skip) {
            let (h_new, y_new) = sur.weights.decode_plain(z, &h);
            h = h_new;
            y = y_new;
        }
        y
    }
}

// ---------------------------------------------------------------------------
// initial condition

#[derive(Debug, Clone)]
pub struct SimInit {
    pub t0: f64,
    pub state: Vec<f64>,
    pub p_liquid: f64,
    pub p_suction: f64,
    pub hx_inputs: Vec<[f64; N_INPUTS]>,
    pub hx_outputs: Vec<[f64; N_OUTPUTS]>,
}

/// Build the initial condition by evaluating the reference plant once at the
/// given profile step, so the hybrid starts from a consistent flow picture.
pub fn init_from_oracle(
    plant: &PlantConfig,
    profile: &ActuationProfile,
    step: usize,
    state: &[f64],
) -> Result<SimInit> {
    let bc = sample_profile(profile, step);
    let ev = eval_cycle(plant, state, &bc)?;
    Ok(SimInit {
        t0: step as f64 * profile.dt,
        state: state.to_vec(),
        p_liquid: ev.p_liquid,
        p_suction: ev.p_suction,
        hx_inputs: ev.hx.iter().map(|h| h.inputs).collect(),
        hx_outputs: ev.hx.iter().map(|h| h.outputs).collect(),
    })
}

// ---------------------------------------------------------------------------
// step-size adaptation

/// Map an embedded-pair error estimate to the next output step. The formula
/// is used as published, in seconds, with clamps standing in for its missing
/// dimensional bookkeeping.
pub fn dt_from_error(eps: f64, eps_dt: f64, dt0: f64, dt_min: f64, dt_max: f64) -> f64 {
    if !eps.is_finite() {
        return dt_min;
    }
    if eps <= 0.0 {
        return dt_max;
    }
    let ratio = 0.6 * eps_dt * dt0 / eps;
    (2.5 * ratio.sqrt().sqrt()).clamp(dt_min, dt_max)
}

/// Fehlberg 4(5) probe of the latent field under frozen forcing. The error
/// between the two embedded solutions over dt0 drives the next step size.
pub fn adapt_dt_rk45(
    weights: &PinodeWeights,
    z: &[f64],
    forcing: &[f64],
    dt0: f64,
    eps_dt: f64,
    dt_min: f64,
    dt_max: f64,
) -> f64 {
    let f = |zz: &[f64]| weights.latent_rate_plain(forcing, zz);
    let stage = |coeffs: &[(f64, &Vec<f64>)]| -> Vec<f64> {
        (0..z.len())
            .map(|i| {
                let mut v = z[i];
                for (c, k) in coeffs {
                    v += dt0 * c * k[i];
                }
                v
            })
            .collect()
    };
    let k1 = f(z);
    let k2 = f(&stage(&[(0.25, &k1)]));
    let k3 = f(&stage(&[(3.0 / 32.0, &k1), (9.0 / 32.0, &k2)]));
    let k4 = f(&stage(&[
        (1932.0 / 2197.0, &k1),
        (-7200.0 / 2197.0, &k2),
        (7296.0 / 2197.0, &k3),
    ]));
    let k5 = f(&stage(&[
        (439.0 / 216.0, &k1),
        (-8.0, &k2),
        (3680.0 / 513.0, &k3),
        (-845.0 / 4104.0, &k4),
    ]));
    let k6 = f(&stage(&[
        (-8.0 / 27.0, &k1),
        (2.0, &k2),
        (-3544.0 / 2565.0, &k3),
        (1859.0 / 4104.0, &k4),
        (-11.0 / 40.0, &k5),
    ]));
    let mut err2 = 0.0;
    for i in 0..z.len() {
        let z4 = dt0
            * (25.0 / 216.0 * k1[i] + 1408.0 / 2565.0 * k3[i] + 2197.0 / 4104.0 * k4[i]
                - 0.2 * k5[i]);
        let z5 = dt0
            * (16.0 / 135.0 * k1[i] + 6656.0 / 12825.0 * k3[i] + 28561.0 / 56430.0 * k4[i]
                - 9.0 / 50.0 * k5[i]
                + 2.0 / 55.0 * k6[i]);
        let d = z4 - z5;
        err2 += d * d;
    }
    dt_from_error(err2.sqrt(), eps_dt, dt0, dt_min, dt_max)
}

/// Per-profile-index resolution flags and output-step targets. The mask is
/// the union of closed windows [j - n_pre, j + n_post] around every jump.
pub fn highres_mask(profile: &ActuationProfile, hr: &HighResConfig) -> (Vec<bool>, Vec<f64>) {
    let n = profile.steps();
    let mut mask = vec![false; n];
    for j in profile.jump_indices(hr.tau) {
        let lo = j.saturating_sub(hr.n_pre);
        let hi = (j + hr.n_post).min(n.saturating_sub(1));
        for m in &mut mask[lo..=hi] {
            *m = true;
        }
    }
    let targets = mask.iter().map(|&b| if b { hr.dt_high } else { hr.dt_low }).collect();
    (mask, targets)
}

// ---------------------------------------------------------------------------
// network evaluation

struct NetworkFlows {
    h_liquid: f64,
    mdot_comp: Vec<f64>,
    h_discharge: Vec<f64>,
    cond_in: Vec<f64>,
    cond_out: Vec<f64>,
    mdot_valve: Vec<f64>,
    evap_out: Vec<f64>,
}

struct NetCtx<'a> {
    models: &'a SystemModels,
    topo: &'a Topology,
    profile: &'a ActuationProfile,
    runtimes: &'a [SurrogateRuntime],
    m_scale: f64,
}

fn profile_index(profile: &ActuationProfile, t: f64) -> usize {
    if t <= 0.0 || profile.dt <= 0.0 {
        return 0;
    }
    ((t / profile.dt).floor() as usize).min(profile.steps().saturating_sub(1))
}

/// Weighted mean with nonnegative weights, falling back to the plain mean
/// when the weights vanish.
fn weighted_mean(pairs: &[(f64, f64)]) -> f64 {
    let total: f64 = pairs.iter().map(|(w, _)| w.max(0.0)).sum();
    if total > 1e-12 {
        pairs.iter().map(|(w, v)| w.max(0.0) * v).sum::<f64>() / total
    } else {
        pairs.iter().map(|(_, v)| v).sum::<f64>() / pairs.len() as f64
    }
}

fn network_flows(ctx: &NetCtx, t: f64, p: &[f64]) -> Result<NetworkFlows> {
    let n_c = ctx.topo.n_c;
    let n_v = ctx.topo.n_v;
    let bc = sample_profile(ctx.profile, profile_index(ctx.profile, t));
    let (cond_rt, evap_rt) = ctx.runtimes.split_at(n_c);

    // Trial iterates may wander; evaluate the laws at the nearest point
    // inside the working envelope.
    let pd: Vec<f64> = p[..n_c].iter().map(|v| v.clamp(P_MIN, P_MAX)).collect();
    let p_liq = p[n_c].clamp(P_MIN, P_MAX);
    let p_suct = p[n_c + 1].clamp(P_MIN, P_MAX);

    let h_suction = weighted_mean(
        &evap_rt
            .iter()
            .map(|r| {
                (PORT_CONDUCTANCE * (r.outputs[OUT_P_LAST] - p_suct), r.outputs[OUT_H_LAST])
            })
            .collect::<Vec<_>>(),
    );
    let h_liquid = weighted_mean(
        &cond_rt
            .iter()
            .map(|r| {
                (PORT_CONDUCTANCE * (r.outputs[OUT_P_LAST] - p_liq), r.outputs[OUT_H_LAST])
            })
            .collect::<Vec<_>>(),
    );

    let mut mdot_comp = Vec::with_capacity(n_c);
    let mut h_discharge = Vec::with_capacity(n_c);
    let mut cond_in = Vec::with_capacity(n_c);
    let mut cond_out = Vec::with_capacity(n_c);
    for k in 0..n_c {
        let (mdot, h_out) =
            ctx.models.compressor.compressor_eval(p_suct, pd[k], h_suction, bc.speeds[k])?;
        mdot_comp.push(mdot);
        h_discharge.push(h_out);
        cond_in.push(PORT_CONDUCTANCE * (pd[k] - cond_rt[k].outputs[OUT_P_FIRST]));
        cond_out.push(PORT_CONDUCTANCE * (cond_rt[k].outputs[OUT_P_LAST] - p_liq));
    }

    let mut mdot_valve = Vec::with_capacity(n_v);
    let mut evap_out = Vec::with_capacity(n_v);
    for j in 0..n_v {
        let p_down = evap_rt[j].outputs[OUT_P_FIRST];
        let (mdot, _) = ctx.models.valve.valve_eval(p_liq, p_down, h_liquid, bc.openings[j]);
        mdot_valve.push(mdot);
        evap_out.push(PORT_CONDUCTANCE * (evap_rt[j].outputs[OUT_P_LAST] - p_suct));
    }

    Ok(NetworkFlows {
        h_liquid,
        mdot_comp,
        h_discharge,
        cond_in,
        cond_out,
        mdot_valve,
        evap_out,
    })
}

fn junction_residuals(ctx: &NetCtx, t: f64, p: &[f64], out: &mut [f64]) -> Result<()> {
    let f = network_flows(ctx, t, p)?;
    let n_c = ctx.topo.n_c;
    for k in 0..n_c {
        out[k] = (f.mdot_comp[k] - f.cond_in[k]) / ctx.m_scale;
    }
    let cond_total: f64 = f.cond_out.iter().sum();
    let valve_total: f64 = f.mdot_valve.iter().sum();
    out[n_c] = (cond_total - valve_total) / ctx.m_scale;
    let evap_total: f64 = f.evap_out.iter().sum();
    let comp_total: f64 = f.mdot_comp.iter().sum();
    out[n_c + 1] = (evap_total - comp_total) / ctx.m_scale;
    Ok(())
}

// ---------------------------------------------------------------------------
// session

/// Mutable simulation state: time, storage vector, pressure warm start and
/// the committed surrogate runtimes.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub t: f64,
    pub y: Vec<f64>,
    pub p_warm: Vec<f64>,
    pub runtimes: Vec<SurrogateRuntime>,
}

/// One full field evaluation. `latents`, `dec_hidden` and the output rows
/// describe the fresh (uncommitted) surrogate advance to `t`.
#[derive(Debug, Clone)]
pub struct RhsEval {
    pub t: f64,
    pub deriv: Vec<f64>,
    pub pressures: Vec<f64>,
    pub inputs: Vec<[f64; N_INPUTS]>,
    pub forcing: Vec<Vec<f64>>,
    pub outputs: Vec<[f64; N_OUTPUTS]>,
    pub outputs_norm: Vec<Vec<f64>>,
    pub latents: Vec<Vec<f64>>,
    /// Substep latents per exchanger covering the advance to `t`, appended
    /// to the runtime's trailing window on commit.
    pub latent_path: Vec<Vec<Vec<f64>>>,
    pub solve_evals: usize,
    pub solve_method: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub pressure_method: &'static str,
    pub pressure_evals: usize,
    pub dae_internal_steps: usize,
    pub dae_order: usize,
    pub dae_newton_iters: usize,
    pub dae_rejections: usize,
}

impl StepDiagnostics {
    fn algebraic(eval: &RhsEval) -> Self {
        StepDiagnostics {
            pressure_method: eval.solve_method,
            pressure_evals: eval.solve_evals,
            dae_internal_steps: 0,
            dae_order: 0,
            dae_newton_iters: 0,
            dae_rejections: 0,
        }
    }
}

pub struct SystemSession<'a> {
    pub models: &'a SystemModels,
    pub topo: &'a Topology,
    pub profile: &'a ActuationProfile,
    pub cfg: SystemConfig,
    pub state: SystemState,
    dt_targets: Vec<f64>,
    /// Field evaluations keyed by time. Valid because the assembled field
    /// depends on time and the committed runtimes only (the storage vector
    /// feeds the recorded trajectory and the corrector, not the flow laws),
    /// so repeated implicit-solver evaluations at one time are identical.
    cache: HashMap<u64, RhsEval>,
}

impl<'a> SystemSession<'a> {
    pub fn new(
        models: &'a SystemModels,
        topo: &'a Topology,
        profile: &'a ActuationProfile,
        cfg: SystemConfig,
        init: &SimInit,
    ) -> Result<Self> {
        cfg.check()?;
        topo.validate()?;
        let n_hx = topo.n_hx();
        if init.state.len() != topo.state_len() {
            return Err(Error::contract(format!(
                "initial state has {} entries, topology needs {}",
                init.state.len(),
                topo.state_len()
            )));
        }
        if init.hx_inputs.len() != n_hx || init.hx_outputs.len() != n_hx {
            return Err(Error::contract("initial exchanger rows do not match the topology"));
        }
        if profile.speeds.len() != topo.n_c || profile.openings.len() != topo.n_v {
            return Err(Error::contract("profile actuator counts do not match the topology"));
        }
        if cfg.corrector {
            let pack = models
                .corrector
                .as_ref()
                .ok_or_else(|| Error::contract("corrector enabled without a trained model"))?;
            let want = 2 * (N_INPUTS + N_OUTPUTS);
            if topo.n_c != 2 || pack.model.d_in != want {
                return Err(Error::contract(
                    "output corrector supports the two-condenser layout only",
                ));
            }
        }
        let mut runtimes = Vec::with_capacity(n_hx);
        for i in 0..n_hx {
            let sur = models.surrogate(i, topo.n_c);
            runtimes.push(SurrogateRuntime::bootstrap(
                sur,
                init.t0,
                &init.hx_inputs[i],
                &init.hx_outputs[i],
                init.state[2 * i],
                init.state[2 * i + 1],
            )?);
        }
        let mut p_warm = vec![init.p_liquid; topo.n_pressures()];
        p_warm[topo.n_c + 1] = init.p_suction;
        let (_, dt_targets) = highres_mask(profile, &cfg.highres);
        Ok(SystemSession {
            models,
            topo,
            profile,
            cfg,
            state: SystemState { t: init.t0, y: init.state.clone(), p_warm, runtimes },
            dt_targets,
            cache: HashMap::new(),
        })
    }

    fn dt_target_at(&self, t: f64) -> f64 {
        let idx = profile_index(self.profile, t);
        let base = self.dt_targets.get(idx).copied().unwrap_or(self.cfg.highres.dt_low);
        (base * self.cfg.dt_scale).max(self.cfg.dt_min)
    }

    fn ctx(&self) -> NetCtx<'_> {
        NetCtx {
            models: self.models,
            topo: self.topo,
            profile: self.profile,
            runtimes: &self.state.runtimes,
            m_scale: self.cfg.m_scale,
        }
    }

    /// Junction residuals at a trial pressure vector, using the committed
    /// surrogate outputs. Exposed for instrumentation.
    pub fn pressure_residuals(&self, p: &[f64], t: f64) -> Result<Vec<f64>> {
        if p.len() != self.topo.n_pressures() {
            return Err(Error::contract("pressure vector length mismatch"));
        }
        let mut out = vec![0.0; p.len()];
        junction_residuals(&self.ctx(), t, p, &mut out)?;
        Ok(out)
    }

    fn solve_pressures(&mut self, t: f64) -> Result<(Vec<f64>, usize, &'static str)> {
        let n_p = self.topo.n_pressures();
        let opts =
            SolverOptions { tol: self.cfg.eps_soln, max_evals: 500, fd_scale: 1e5 };
        let guess = self.state.p_warm.clone();
        let ctx = self.ctx();
        let report = match self.cfg.mode {
            SolverMode::Algebraic => {
                solve_auto(|p, out| junction_residuals(&ctx, t, p, out), &guess, None, &opts)?
            }
            SolverMode::Ida | SolverMode::Dassl => {
                let bounds = Bounds::new(vec![P_MIN; n_p], vec![P_MAX; n_p])?;
                bounded_least_squares(
                    |p, out| junction_residuals(&ctx, t, p, out),
                    &guess,
                    n_p,
                    Some(&bounds),
                    &opts,
                )?
            }
        };
        if !report.converged {
            return Err(Error::Solve(format!(
                "pressure network stalled at t={t:.3}: residual {:.3e} after {} evaluations",
                report.residual_norm, report.evaluations
            )));
        }
        let p: Vec<f64> = report.x.iter().map(|v| v.clamp(P_MIN, P_MAX)).collect();
        self.state.p_warm = p.clone();
        Ok((p, report.evaluations, report.method))
    }

    fn validate_state(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.topo.state_len() {
            return Err(Error::contract("state vector length mismatch"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "system state" });
        }
        for i in 0..self.topo.n_hx() {
            if y[2 * i] <= 0.0 {
                return Err(Error::contract(format!(
                    "exchanger {i} refrigerant mass is nonpositive"
                )));
            }
        }
        Ok(())
    }

    /// Full field evaluation at time t: pressure solve, fresh surrogate
    /// advance, derivative assembly. Does not commit.
    pub fn system_rhs(&mut self, t: f64, y: &[f64]) -> Result<RhsEval> {
        self.validate_state(y)?;
        if let Some(hit) = self.cache.get(&t.to_bits()) {
            return Ok(hit.clone());
        }
        let (pressures, solve_evals, solve_method) = self.solve_pressures(t)?;
        let flows = network_flows(&self.ctx(), t, &pressures)?;
        let bc = sample_profile(self.profile, profile_index(self.profile, t));
        let n_c = self.topo.n_c;
        let n_hx = self.topo.n_hx();
        let p_liq = pressures[n_c];
        let p_suct = pressures[n_c + 1];

        let mut inputs = Vec::with_capacity(n_hx);
        let mut forcing = Vec::with_capacity(n_hx);
        let mut outputs = Vec::with_capacity(n_hx);
        let mut outputs_norm = Vec::with_capacity(n_hx);
        let mut latents = Vec::with_capacity(n_hx);
        let mut latent_path = Vec::with_capacity(n_hx);
        let mut deriv = vec![0.0; self.topo.state_len()];

        for i in 0..n_hx {
            let rt = &self.state.runtimes[i];
            let sur = self.models.surrogate(i, n_c);
            let (air, mdot_in, h_in, p_out) = if i < n_c {
                (&bc.air_cond, flows.cond_in[i], flows.h_discharge[i], p_liq)
            } else {
                let j = i - n_c;
                (&bc.air_evap, flows.mdot_valve[j], flows.h_liquid, p_suct)
            };
            let mut row = [0.0; N_INPUTS];
            row[IN_T_AIR] = air.t_in;
            row[IN_PHI] = air.phi;
            row[IN_MDOT_AIR] = air.mdot;
            row[IN_P_AMB] = air.p_amb;
            row[IN_MDOT_R] = mdot_in;
            row[IN_H_IN] = h_in;
            row[IN_H_OUT] = rt.outputs[OUT_H_LAST];
            row[IN_P_OUT] = p_out;

            let mut f_norm = vec![0.0; N_INPUTS];
            sur.in_stats.normalize_row(&row, &mut f_norm);
            let gap = t - rt.t_commit;
            if gap < -1e-9 {
                return Err(Error::contract("field evaluation before the committed time"));
            }
            // Advance on a grid at the training step spacing anchored at the
            // committed time, so the latent follows the dynamics it was
            // actually fitted at. Outputs are decoded at grid points and
            // interpolated in between, which keeps the assembled field
            // continuous inside a span.
            let base_dt = if self.profile.dt > 0.0 { self.profile.dt } else { 1.0 };
            let whole = (gap / base_dt).floor();
            let frac = (gap - whole * base_dt).max(0.0);
            let on_grid = frac <= 1e-9 * base_dt;
            let mut path = Vec::new();
            let mut z_cur = rt.z.clone();
            for _ in 0..whole as usize {
                z_cur = sur.weights.advance_latent_plain(&z_cur, &f_norm, base_dt);
                path.push(z_cur.clone());
            }
            let y_norm = if gap <= 0.0 || on_grid {
                rt.decode_tail(sur, &path)
            } else {
                let y_lo = rt.decode_tail(sur, &path);
                let z_next = sur.weights.advance_latent_plain(&z_cur, &f_norm, base_dt);
                path.push(z_next);
                let y_hi = rt.decode_tail(sur, &path);
                path.pop();
                let z_t = sur.weights.advance_latent_plain(&z_cur, &f_norm, frac);
                path.push(z_t);
                let w = frac / base_dt;
                y_lo.iter().zip(&y_hi).map(|(a, b)| (1.0 - w) * a + w * b).collect()
            };
            let z_new = path.last().cloned().unwrap_or_else(|| rt.z.clone());
            let y_phys = {
                let mut out = [0.0; N_OUTPUTS];
                sur.out_stats.denormalize_row(&y_norm, &mut out);
                out
            };

            let (mdot_out, qdot) = if i < n_c {
                (flows.cond_out[i], y_phys[OUT_QDOT_AIR])
            } else {
                (flows.evap_out[i - n_c], y_phys[OUT_QDOT_AIR])
            };
            deriv[2 * i] = mdot_in - mdot_out;
            deriv[2 * i + 1] = mdot_in * h_in - mdot_out * y_phys[OUT_H_LAST] - qdot;

            inputs.push(row);
            forcing.push(f_norm);
            outputs.push(y_phys);
            outputs_norm.push(y_norm);
            latents.push(z_new);
            latent_path.push(path);
        }

        let eval = RhsEval {
            t,
            deriv,
            pressures,
            inputs,
            forcing,
            outputs,
            outputs_norm,
            latents,
            latent_path,
            solve_evals,
            solve_method,
        };
        self.cache.insert(t.to_bits(), eval.clone());
        Ok(eval)
    }

    /// Adopt a fresh evaluation as the committed surrogate state.
    pub fn commit(&mut self, eval: &RhsEval) {
        let n_c = self.topo.n_c;
        for (i, rt) in self.state.runtimes.iter_mut().enumerate() {
            let window = self.models.surrogate(i, n_c).weights.cfg.dec_window;
            rt.t_commit = eval.t;
            rt.z = eval.latents[i].clone();
            rt.z_seq.extend(eval.latent_path[i].iter().cloned());
            let excess = rt.z_seq.len().saturating_sub(window);
            rt.z_seq.drain(..excess);
            rt.outputs = eval.outputs[i];
            rt.outputs_norm = eval.outputs_norm[i].clone();
            rt.forcing_norm = eval.forcing[i].clone();
        }
        self.cache.clear();
    }

    /// Corrector feature vector: normalized inputs and outputs of both
    /// condensers at the committed point.
    pub fn corrector_features(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * (N_INPUTS + N_OUTPUTS));
        for rt in &self.state.runtimes[..self.topo.n_c] {
            z.extend_from_slice(&rt.forcing_norm);
            z.extend_from_slice(&rt.outputs_norm);
        }
        z
    }

    /// Normalized storage channels the corrector adjusts, ordered as the
    /// two condenser energies then the two condenser masses.
    pub fn corrector_pred(&self, y: &[f64]) -> [f64; N_CORR] {
        let st = &self.models.cond.out_stats;
        [
            st.normalize_value(OUT_ENERGY, y[1]),
            st.normalize_value(OUT_ENERGY, y[3]),
            st.normalize_value(OUT_MASS, y[0]),
            st.normalize_value(OUT_MASS, y[2]),
        ]
    }

    fn apply_corrected(&self, y: &mut [f64], m: &[f64; N_CORR]) {
        let st = &self.models.cond.out_stats;
        y[1] = st.denormalize_value(OUT_ENERGY, m[0]);
        y[3] = st.denormalize_value(OUT_ENERGY, m[1]);
        y[0] = st.denormalize_value(OUT_MASS, m[2]);
        y[2] = st.denormalize_value(OUT_MASS, m[3]);
    }
}

// ---------------------------------------------------------------------------
// trajectory

#[derive(Debug, Clone)]
pub struct SimTrajectory {
    pub times: Vec<f64>,
    pub dts: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Committed surrogate outputs per exchanger at each recorded point.
    pub hx_outputs: Vec<Vec<[f64; N_OUTPUTS]>>,
    /// Junction pressures [discharge.., liquid, suction] at each point.
    pub pressures: Vec<Vec<f64>>,
    pub diags: Vec<StepDiagnostics>,
    pub corrections: Vec<CorrectionRecord>,
    /// Failure description with the step index; the rows above hold the
    /// partial run.
    pub failure: Option<String>,
    pub runtime_seconds: f64,
}

impl SimTrajectory {
    fn empty() -> Self {
        SimTrajectory {
            times: Vec::new(),
            dts: Vec::new(),
            states: Vec::new(),
            hx_outputs: Vec::new(),
            pressures: Vec::new(),
            diags: Vec::new(),
            corrections: Vec::new(),
            failure: None,
            runtime_seconds: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Stable column layout: time and step, per-exchanger storage and output
    /// channels, junction pressures, then solver diagnostics.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n_hx = self.hx_outputs.first().map_or(0, Vec::len);
        let n_p = self.pressures.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string(), "dt".to_string()];
        for i in 0..n_hx {
            for name in
                ["m_r", "e_hx", "p_first", "p_last", "h_first", "h_last", "t_air_out",
                 "qdot_air", "qdot_lat"]
            {
                header.push(format!("{name}_{i}"));
            }
        }
        for k in 0..n_p.saturating_sub(2) {
            header.push(format!("p_dis_{k}"));
        }
        if n_p >= 2 {
            header.push("p_liquid".into());
            header.push("p_suction".into());
        }
        header.extend(
            ["pressure_method", "pressure_evals", "dae_internal_steps", "dae_order",
             "dae_newton_iters", "dae_rejections"]
                .map(String::from),
        );
        w.write_record(&header)?;
        for row in 0..self.len() {
            let mut rec: Vec<String> =
                vec![format!("{:.6}", self.times[row]), format!("{:.6}", self.dts[row])];
            for i in 0..n_hx {
                let y = &self.states[row];
                let out = &self.hx_outputs[row][i];
                rec.push(format!("{:.9e}", y[2 * i]));
                rec.push(format!("{:.9e}", y[2 * i + 1]));
                for c in [OUT_P_FIRST, OUT_P_LAST, OUT_H_FIRST,
                          OUT_H_LAST, OUT_T_AIR,
                          OUT_QDOT_AIR, OUT_QDOT_LAT]
                {
                    rec.push(format!("{:.9e}", out[c]));
                }
            }
            for v in &self.pressures[row] {
                rec.push(format!("{:.9e}", v));
            }
            let d = &self.diags[row];
            rec.push(d.pressure_method.to_string());
            rec.push(d.pressure_evals.to_string());
            rec.push(d.dae_internal_steps.to_string());
            rec.push(d.dae_order.to_string());
            rec.push(d.dae_newton_iters.to_string());
            rec.push(d.dae_rejections.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// simulation driver

struct Recorder {
    traj: SimTrajectory,
    corrector: Option<CorrectorRuntime>,
}

impl Recorder {
    fn new(models: &SystemModels, cfg: &SystemConfig) -> Self {
        let corrector = if cfg.corrector {
            models.corrector.as_ref().map(|p| {
                CorrectorRuntime::new(p.model.clone(), p.gp.clone(), p.ema_alpha)
            })
        } else {
            None
        };
        Recorder { traj: SimTrajectory::empty(), corrector }
    }

    /// Correct the storage state if configured, then append one row.
    fn record(
        &mut self,
        session: &mut SystemSession,
        dt: f64,
        eval: &RhsEval,
        diag: StepDiagnostics,
        correct: bool,
    ) -> Result<()> {
        if correct {
            if let Some(rt) = self.corrector.as_mut() {
                let t = session.state.t;
                let z_in = session.corrector_features();
                let m_pred = session.corrector_pred(&session.state.y);
                let step = rt.step(t, &z_in, &m_pred)?;
                if !step.skipped {
                    let m = step.m_corr;
                    let mut y = session.state.y.clone();
                    session.apply_corrected(&mut y, &m);
                    session.state.y = y;
                }
                self.traj.corrections.push(CorrectionRecord {
                    t,
                    m_pred,
                    m_bench: [f64::NAN; N_CORR],
                    m_corr: step.m_corr,
                    phi_raw: step.phi_raw,
                    phi_gp: step.phi_gp,
                    phi_smooth: step.phi_smooth,
                    skipped: step.skipped,
                });
            }
        }
        self.traj.times.push(session.state.t);
        self.traj.dts.push(dt);
        self.traj.states.push(session.state.y.clone());
        self.traj.hx_outputs.push(eval.outputs.clone());
        self.traj.pressures.push(eval.pressures.clone());
        self.traj.diags.push(diag);
        Ok(())
    }
}

/// Run one simulation. The horizon counts recorded steps beyond the initial
/// point; a failed step stores the failure and returns the partial rows.
pub fn simulate(
    models: &SystemModels,
    topo: &Topology,
    profile: &ActuationProfile,
    cfg: &SystemConfig,
    init: &SimInit,
    horizon: usize,
) -> Result<SimTrajectory> {
    let started = Instant::now();
    let mut session = SystemSession::new(models, topo, profile, cfg.clone(), init)?;
    let mut rec = Recorder::new(models, cfg);

    let outcome = match cfg.mode {
        SolverMode::Algebraic => run_algebraic(&mut session, &mut rec, horizon, |_, _| Ok(())),
        SolverMode::Ida => run_ida(&mut session, &mut rec, horizon),
        SolverMode::Dassl => run_dassl(&mut session, &mut rec, horizon),
    };
    if let Err(e) = outcome {
        rec.traj.failure =
            Some(format!("step {} at t={:.3}: {e}", rec.traj.times.len(), session.state.t));
    }
    rec.traj.runtime_seconds = started.elapsed().as_secs_f64();
    Ok(rec.traj)
}

fn run_algebraic(
    session: &mut SystemSession,
    rec: &mut Recorder,
    horizon: usize,
    mut on_step: impl FnMut(&SystemSession, &RhsEval) -> Result<()>,
) -> Result<()> {
    let mut eval = {
        let (t, y) = (session.state.t, session.state.y.clone());
        let e = session.system_rhs(t, &y)?;
        session.commit(&e);
        e
    };
    rec.record(session, 0.0, &eval, StepDiagnostics::algebraic(&eval), false)?;
    on_step(session, &eval)?;
    let mut dt_prev = session.dt_target_at(session.state.t);

    for _ in 0..horizon {
        let t = session.state.t;
        let dt_tgt = session.dt_target_at(t);
        let mut dt = dt_tgt;
        for (i, rt) in session.state.runtimes.iter().enumerate() {
            let sur = session.models.surrogate(i, session.topo.n_c);
            dt = dt.min(adapt_dt_rk45(
                &sur.weights,
                &rt.z,
                &eval.forcing[i],
                dt_prev,
                session.cfg.eps_dt,
                session.cfg.dt_min,
                dt_tgt,
            ));
        }
        let y_next: Vec<f64> =
            session.state.y.iter().zip(&eval.deriv).map(|(y, d)| y + dt * d).collect();
        let t_next = t + dt;
        eval = session.system_rhs(t_next, &y_next)?;
        session.commit(&eval);
        session.state.t = t_next;
        session.state.y = y_next;
        dt_prev = dt;
        rec.record(session, dt, &eval, StepDiagnostics::algebraic(&eval), true)?;
        on_step(session, &eval)?;
    }
    Ok(())
}

/// Advance the session state over one BDF span and commit at its end.
/// Returns the end-point evaluation plus the span's step diagnostics.
fn dae_span(
    session: &mut SystemSession,
    t_end: f64,
    h_carry: &mut f64,
    mode: DaeMode,
) -> Result<(RhsEval, StepDiagnostics)> {
    let t0 = session.state.t;
    let y0 = session.state.y.clone();
    let span = t_end - t0;
    let base = session.cfg.dae.clone();
    // h_max may not undercut h_min when the span is very short
    let h_hi = base.h_max.min(span).max(2.0 * base.h_min);
    let dcfg = DaeConfig {
        mode,
        tol: base.tol,
        h_init: h_carry.clamp(base.h_min, h_hi),
        h_min: base.h_min,
        h_max: h_hi,
        // span ends are the only points this layer consumes
        dassl_min_output_dt: span,
        dassl_max_steps: base.dassl_max_steps,
    };
    let traj = {
        let cell = std::cell::RefCell::new(&mut *session);
        let rhs = |tt: f64, yy: &[f64], out: &mut [f64]| -> Result<()> {
            let e = cell.borrow_mut().system_rhs(tt, yy)?;
            out.copy_from_slice(&e.deriv);
            Ok(())
        };
        let mut problem = problem_from_rhs(rhs, t0, y0)?;
        match mode {
            DaeMode::Ida => integrate_ida(&mut problem, &[t_end], &dcfg)?,
            DaeMode::Dassl => integrate_dassl(&mut problem, t_end, &dcfg)?,
        }
    };
    if let Some(f) = &traj.failure {
        return Err(Error::Integration { t: session.state.t, reason: f.clone() });
    }
    let y_end = traj
        .states
        .last()
        .cloned()
        .ok_or_else(|| Error::Integration { t: t0, reason: "no states produced".into() })?;
    let last = traj.internal.last().map(|(d, _)| d.clone());
    if let Some(d) = &last {
        *h_carry = d.h;
    }
    let eval = session.system_rhs(t_end, &y_end)?;
    session.commit(&eval);
    session.state.t = t_end;
    session.state.y = y_end;
    let diag = StepDiagnostics {
        pressure_method: eval.solve_method,
        pressure_evals: eval.solve_evals,
        dae_internal_steps: traj.internal.len(),
        dae_order: last.as_ref().map_or(0, |d| d.order),
        dae_newton_iters: last.as_ref().map_or(0, |d| d.newton_iters),
        dae_rejections: traj.rejected_steps,
    };
    Ok((eval, diag))
}

fn run_ida(session: &mut SystemSession, rec: &mut Recorder, horizon: usize) -> Result<()> {
    let eval = {
        let (t, y) = (session.state.t, session.state.y.clone());
        let e = session.system_rhs(t, &y)?;
        session.commit(&e);
        e
    };
    rec.record(session, 0.0, &eval, StepDiagnostics::algebraic(&eval), false)?;
    let mut h_carry = session.cfg.dae.h_init;
    for _ in 0..horizon {
        let dt_tgt = session.dt_target_at(session.state.t);
        let t_end = session.state.t + dt_tgt;
        let (eval, diag) = dae_span(session, t_end, &mut h_carry, DaeMode::Ida)?;
        rec.record(session, dt_tgt, &eval, diag, true)?;
    }
    Ok(())
}

fn run_dassl(session: &mut SystemSession, rec: &mut Recorder, horizon: usize) -> Result<()> {
    let eval = {
        let (t, y) = (session.state.t, session.state.y.clone());
        let e = session.system_rhs(t, &y)?;
        session.commit(&e);
        e
    };
    rec.record(session, 0.0, &eval, StepDiagnostics::algebraic(&eval), false)?;
    let mut h_carry = session.cfg.dae.h_init;
    let mut last_record = session.state.t;
    let mut recorded = 0;
    // Increments shorter than the output gate imply some spans end without a
    // record; bound the total so a degenerate gate cannot spin forever.
    let max_spans = horizon.saturating_mul(64) + 64;
    let mut spans = 0;
    while recorded < horizon {
        spans += 1;
        if spans > max_spans {
            return Err(Error::Integration {
                t: session.state.t,
                reason: "output gate starved the recorder".into(),
            });
        }
        let dt_tgt = session.dt_target_at(session.state.t);
        let inc = session.cfg.highres.dassl_increment_factor * dt_tgt;
        let t_end = session.state.t + inc;
        let (eval, diag) = dae_span(session, t_end, &mut h_carry, DaeMode::Dassl)?;
        let gate = session.cfg.highres.dassl_min_output_factor * dt_tgt;
        let elapsed = session.state.t - last_record;
        if elapsed + 1e-12 >= gate {
            rec.record(session, elapsed, &eval, diag, true)?;
            last_record = session.state.t;
            recorded += 1;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// corrector data collection

/// Run the explicit-mode hybrid across a benchmark segment and pair each
/// recorded step with the reference storage values for corrector training.
pub fn collect_training_pairs(
    models: &SystemModels,
    topo: &Topology,
    profile: &ActuationProfile,
    plant: &PlantConfig,
    bench: &OracleRun,
    cfg: &SystemConfig,
    start_step: usize,
    n_steps: usize,
) -> Result<Vec<TrainingPair>> {
    if topo.n_c != 2 {
        return Err(Error::contract("corrector data needs the two-condenser layout"));
    }
    if start_step >= bench.states.len() {
        return Err(Error::contract("training segment starts past the benchmark"));
    }
    let init = init_from_oracle(plant, profile, start_step, &bench.states[start_step])?;
    let mut run_cfg = cfg.clone();
    run_cfg.mode = SolverMode::Algebraic;
    run_cfg.corrector = false;
    let mut session = SystemSession::new(models, topo, profile, run_cfg.clone(), &init)?;
    let mut rec = Recorder::new(models, &run_cfg);
    let pairs = std::cell::RefCell::new(Vec::with_capacity(n_steps));
    run_algebraic(&mut session, &mut rec, n_steps, |s, _| {
        let t = s.state.t;
        let idx = ((t / bench.dt).round() as usize).min(bench.states.len() - 1);
        let y_ref = &bench.states[idx];
        let st = &s.models.cond.out_stats;
        let m_bench = [
            st.normalize_value(OUT_ENERGY, y_ref[1]),
            st.normalize_value(OUT_ENERGY, y_ref[3]),
            st.normalize_value(OUT_MASS, y_ref[0]),
            st.normalize_value(OUT_MASS, y_ref[2]),
        ];
        pairs.borrow_mut().push(TrainingPair {
            z_in: s.corrector_features(),
            m_pred: s.corrector_pred(&s.state.y),
            m_bench,
        });
        Ok(())
    })?;
    Ok(pairs.into_inner())
}

// ---------------------------------------------------------------------------
// scenario file

/// On-disk description of one simulation: sizes, solver, tolerances and the
/// artifact paths. Everything the command line needs to reproduce a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub n_c: usize,
    pub n_v: usize,
    pub config: SystemConfig,
    pub profile_path: String,
    pub cond_model: String,
    pub evap_model: String,
    pub compressor_model: String,
    pub valve_model: String,
    pub corrector_model: Option<String>,
    pub horizon: usize,
}

pub fn save_scenario(path: &Path, sc: &Scenario) -> Result<()> {
    let text = serde_json::to_string_pretty(sc)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::{train_corrector, CorrectorConfig};
    use crate::pinode::{make_windows, train, TrainConfig};
    use crate::plant::{
        constant_profile, dataset_from_run, nominal_initial_state, Dataset, HxKind, ProfileSpec,
    };
    use crate::static_models::{train_compressor, train_valve, StaticTrainConfig};
    use std::sync::OnceLock;

    struct Desk {
        plant: PlantConfig,
        profile: ActuationProfile,
        bench: OracleRun,
        models: SystemModels,
        topo: Topology,
        init: SimInit,
    }

    fn train_role(ds: &Dataset, kind: HxKind, seed: u64) -> HxSurrogate {
        let mcfg = ModelConfig {
            enc_window: 6,
            dec_window: 5,
            latent_dim: 4,
            enc_hidden: 10,
            dec_hidden: 10,
            dropout: 0.05,
        };
        let windows = make_windows(ds, kind, &mcfg, 2).unwrap();
        let mut weights = PinodeWeights::new(mcfg, seed);
        let tcfg = TrainConfig {
            epochs: 12,
            batch_size: 16,
            windows_per_epoch: 96,
            max_val_windows: 24,
            lr: 2e-3,
            seed,
            ..TrainConfig::default()
        };
        train(&mut weights, &windows, &tcfg).unwrap();
        HxSurrogate {
            weights,
            in_stats: ds.input_stats(kind).clone(),
            out_stats: ds.output_stats(kind).clone(),
        }
    }

    // Shared fixture: one oracle run plus quickly trained surrogates. The
    // training budgets are tiny on purpose, these tests check plumbing and
    // solver behaviour, not model quality.
    fn desk() -> &'static Desk {
        static DESK: OnceLock<Desk> = OnceLock::new();
        DESK.get_or_init(|| {
            let plant = PlantConfig::default();
            let spec = ProfileSpec { steps: 400, ..ProfileSpec::default() };
            let profile = constant_profile(&spec, 44.0, 0.65, 305.0, 295.0);
            let y0 = nominal_initial_state(&plant);
            let bench = crate::plant::simulate(&plant, &profile, &y0, 400).unwrap();
            let ds = dataset_from_run(&bench).unwrap();
            let cond = train_role(&ds, HxKind::Condenser, 11);
            let evap = train_role(&ds, HxKind::Evaporator, 12);
            let scfg = StaticTrainConfig { epochs: 60, ..StaticTrainConfig::default() };
            let compressor = train_compressor(&plant.props, &plant.compressor, &scfg).unwrap();
            let valve = train_valve(&plant.props, &plant.valve, &scfg).unwrap();
            let mut models =
                SystemModels { cond, evap, compressor, valve, corrector: None };
            let topo = build_topology(2, 1).unwrap();
            // Start simulations from a settled stretch of the benchmark so
            // the replicated bootstrap window matches what training saw.
            let init = init_from_oracle(&plant, &profile, 300, &bench.states[300]).unwrap();
            // Fit the corrector on a short uncorrected run against the same
            // benchmark segment the simulations start from.
            let pairs = collect_training_pairs(
                &models,
                &topo,
                &profile,
                &plant,
                &bench,
                &SystemConfig::default(),
                300,
                16,
            )
            .unwrap();
            let ccfg = CorrectorConfig {
                d_in: 2 * (N_INPUTS + N_OUTPUTS),
                hidden: 12,
                scale: 0.2,
                lr: 3e-3,
                epochs: 400,
                seed: 5,
                ..CorrectorConfig::default()
            };
            let (model, _) = train_corrector(&pairs, &ccfg).unwrap();
            models.corrector =
                Some(CorrectorPack { model, gp: GpConfig::default(), ema_alpha: 0.9 });
            Desk { plant, profile, bench, models, topo, init }
        })
    }

    fn desk_cfg(mode: SolverMode) -> SystemConfig {
        SystemConfig { mode, ..SystemConfig::default() }
    }

    #[test]
    fn topology_counts_follow_the_unit_sizes() {
        let t = build_topology(2, 2).unwrap();
        assert_eq!(t.n_components(), 8);
        assert_eq!(t.n_pressures(), 4);
        assert_eq!(t.state_len(), 8);
        assert_eq!(t.n_hx(), 4);
        t.validate().unwrap();

        let t = build_topology(16, 16).unwrap();
        assert_eq!(t.state_len(), 64);
        assert_eq!(t.n_pressures(), 18);
        t.validate().unwrap();

        let t = build_topology(9, 9).unwrap();
        assert_eq!(t.n_pressures(), 11);

        assert!(build_topology(0, 1).is_err());
        assert!(build_topology(1, 0).is_err());
    }

    #[test]
    fn residual_scaling_is_flow_over_scale() {
        assert!(((0.03 - 0.01) / M_SCALE - 2.0).abs() < 1e-12);
    }

    #[test]
    fn step_formula_matches_hand_values() {
        let eps_dt = 0.3;
        let dt0 = 2.0;
        let at_target = 0.6 * eps_dt * dt0;
        // Error exactly on target: factor 2.5.
        assert_eq!(dt_from_error(at_target, eps_dt, dt0, 0.1, 100.0), 2.5);
        // Sixteen times smaller: fourth root of 16 doubles the factor.
        assert_eq!(dt_from_error(at_target / 16.0, eps_dt, dt0, 0.1, 100.0), 5.0);
        // Sixteen times larger: factor halves.
        assert_eq!(dt_from_error(at_target * 16.0, eps_dt, dt0, 0.1, 100.0), 1.25);
        // Degenerate estimates pin to the bounds.
        assert_eq!(dt_from_error(0.0, eps_dt, dt0, 0.1, 100.0), 100.0);
        assert_eq!(dt_from_error(f64::NAN, eps_dt, dt0, 0.1, 100.0), 0.1);
        assert_eq!(dt_from_error(f64::INFINITY, eps_dt, dt0, 0.1, 100.0), 0.1);
        // Clamps trim the in-range formula too.
        assert_eq!(dt_from_error(at_target, eps_dt, dt0, 0.1, 2.0), 2.0);
        assert_eq!(dt_from_error(at_target, eps_dt, dt0, 3.0, 100.0), 3.0);
    }

    #[test]
    fn latent_probe_is_clamped_and_deterministic() {
        let d = desk();
        let w = &d.models.cond.weights;
        let z = vec![0.3, -0.2, 0.1, 0.05];
        let forcing = vec![0.1; N_INPUTS];
        let dt = adapt_dt_rk45(w, &z, &forcing, 5.0, 1.1e-3, 0.1, 7.5);
        assert!((0.1..=7.5).contains(&dt), "dt {dt} outside the clamp band");
        let again = adapt_dt_rk45(w, &z, &forcing, 5.0, 1.1e-3, 0.1, 7.5);
        assert_eq!(dt, again);
        // A vanishing probe interval leaves no estimated error, so the
        // formula pins to the upper clamp.
        let wide = adapt_dt_rk45(w, &z, &forcing, 0.0, 1.1e-3, 0.1, 7.5);
        assert_eq!(wide, 7.5);
    }

    fn flat_profile(steps: usize) -> ActuationProfile {
        let spec = ProfileSpec { steps, ..ProfileSpec::default() };
        constant_profile(&spec, 40.0, 0.6, 305.0, 295.0)
    }

    #[test]
    fn jump_windows_cover_the_published_band() {
        let hr = HighResConfig::default();

        let quiet = flat_profile(200);
        let (mask, targets) = highres_mask(&quiet, &hr);
        assert!(mask.iter().all(|&m| !m));
        assert!(targets.iter().all(|&t| t == 7.5));

        let mut one = flat_profile(200);
        for s in &mut one.speeds[0][100..] {
            *s += 6.0;
        }
        let (mask, targets) = highres_mask(&one, &hr);
        for (i, &m) in mask.iter().enumerate() {
            let expect = (95..=150).contains(&i);
            assert_eq!(m, expect, "index {i}");
            assert_eq!(targets[i], if expect { 2.5 } else { 7.5 });
        }

        // A change of exactly tau is not a jump, the comparison is strict.
        let mut at_tau = flat_profile(200);
        for s in &mut at_tau.speeds[0][100..] {
            *s += hr.tau;
        }
        let (mask, _) = highres_mask(&at_tau, &hr);
        assert!(mask.iter().all(|&m| !m));

        // Overlapping windows merge.
        let mut two = flat_profile(200);
        for s in &mut two.speeds[0][100..] {
            *s += 6.0;
        }
        for s in &mut two.speeds[1][120..] {
            *s -= 6.0;
        }
        let (mask, _) = highres_mask(&two, &hr);
        for (i, &m) in mask.iter().enumerate() {
            assert_eq!(m, (95..=170).contains(&i), "index {i}");
        }
    }

    #[test]
    fn vanishing_weights_fall_back_to_plain_mean() {
        assert_eq!(weighted_mean(&[(0.0, 2.0), (0.0, 4.0)]), 3.0);
        assert_eq!(weighted_mean(&[(1.0, 2.0), (3.0, 4.0)]), 3.5);
        // Negative weights are treated as closed ports.
        assert_eq!(weighted_mean(&[(-1.0, 2.0), (1.0, 4.0)]), 4.0);
    }

    #[test]
    fn surrogate_bundle_roundtrip_preserves_inference() {
        let d = desk();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cond.model.json");
        d.models.cond.save(&path).unwrap();
        let back = HxSurrogate::load(&path).unwrap();

        let rows = vec![vec![0.1; d.models.cond.weights.cfg.enc_input_dim()]; 6];
        let a = d.models.cond.weights.encode_plain(&rows).unwrap();
        let b = back.weights.encode_plain(&rows).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.out_stats.width(), N_OUTPUTS);
    }

    #[test]
    fn junction_solve_balances_the_network() {
        let d = desk();
        let cfg = desk_cfg(SolverMode::Algebraic);
        let mut s = SystemSession::new(&d.models, &d.topo, &d.profile, cfg, &d.init).unwrap();
        let y0 = s.state.y.clone();
        let t0 = s.state.t;
        let eval = s.system_rhs(t0, &y0).unwrap();
        assert_eq!(eval.pressures.len(), 4);
        let res = s.pressure_residuals(&eval.pressures, t0).unwrap();
        for (k, r) in res.iter().enumerate() {
            assert!(r.abs() <= 10.0 * s.cfg.eps_soln, "residual {k} = {r:e}");
        }
        for &p in &eval.pressures {
            assert!((P_MIN..=P_MAX).contains(&p));
        }
    }

    #[test]
    fn mass_derivatives_telescope_to_solver_tolerance() {
        let d = desk();
        let cfg = desk_cfg(SolverMode::Algebraic);
        let mut s = SystemSession::new(&d.models, &d.topo, &d.profile, cfg, &d.init).unwrap();
        let y0 = s.state.y.clone();
        let eval = s.system_rhs(s.state.t, &y0).unwrap();
        assert_eq!(eval.deriv.len(), 6);
        let total: f64 = (0..3).map(|i| eval.deriv[2 * i]).sum();
        // Refrigerant only moves between exchangers, so the mass rates can
        // only miss closure by the solved residuals.
        let bound = 10.0 * s.cfg.eps_soln * s.cfg.m_scale;
        assert!(total.abs() <= bound, "mass closure {total:e} > {bound:e}");
        assert!(eval.deriv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn closed_valve_cannot_feed_the_evaporator() {
        let d = desk();
        let spec = ProfileSpec { steps: 40, ..ProfileSpec::default() };
        let profile = constant_profile(&spec, 0.0, 0.0, 305.0, 295.0);
        let y0 = nominal_initial_state(&d.plant);
        let init = init_from_oracle(&d.plant, &profile, 0, &y0).unwrap();
        let cfg = desk_cfg(SolverMode::Algebraic);
        let mut s = SystemSession::new(&d.models, &d.topo, &profile, cfg, &init).unwrap();
        let eval = s.system_rhs(0.0, &y0.clone()).unwrap();
        let bound = 10.0 * s.cfg.eps_soln * s.cfg.m_scale;
        // The valve law is structurally zero at zero opening, so nothing
        // enters the evaporator and its mass rate is the negated sum of
        // what the condensers gain, to solver tolerance.
        assert!(eval.deriv[4] <= bound, "evaporator gained mass {}", eval.deriv[4]);
        assert!(
            (eval.deriv[4] + eval.deriv[0] + eval.deriv[2]).abs() <= bound,
            "mass closure broke with the valve shut"
        );
        assert!(eval.deriv.iter().all(|v| v.is_finite()));
        for &p in &eval.pressures {
            assert!((P_MIN..=P_MAX).contains(&p));
        }
    }

    #[test]
    fn zero_horizon_records_the_initial_point_only() {
        let d = desk();
        let cfg = desk_cfg(SolverMode::Algebraic);
        let traj = simulate(&d.models, &d.topo, &d.profile, &cfg, &d.init, 0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.times[0], d.init.t0);
        assert_eq!(traj.dts[0], 0.0);
        assert_eq!(traj.states[0], d.init.state);
        assert!(traj.failure.is_none());
        assert!(traj.corrections.is_empty());
    }

    #[test]
    fn explicit_steps_stay_in_the_clamp_band() {
        let d = desk();
        let cfg = desk_cfg(SolverMode::Algebraic);
        let traj = simulate(&d.models, &d.topo, &d.profile, &cfg, &d.init, 12).unwrap();
        assert!(traj.failure.is_none(), "{:?}", traj.failure);
        assert_eq!(traj.len(), 13);
        for w in traj.times.windows(2) {
            assert!(w[1] > w[0]);
        }
        for (i, &dt) in traj.dts.iter().enumerate().skip(1) {
            assert!(dt >= cfg.dt_min - 1e-12, "row {i} dt {dt}");
            assert!(dt <= cfg.highres.dt_low + 1e-12, "row {i} dt {dt}");
        }
        for row in &traj.states {
            assert!(row.iter().all(|v| v.is_finite()));
        }
        for diag in &traj.diags {
            assert!(diag.pressure_method == "powell" || diag.pressure_method == "lm");
            assert!(diag.pressure_evals <= 500);
        }
    }

    #[test]
    fn warm_starts_keep_steady_solves_cheap() {
        let d = desk();
        let cfg = desk_cfg(SolverMode::Algebraic);
        let traj = simulate(&d.models, &d.topo, &d.profile, &cfg, &d.init, 12).unwrap();
        assert!(traj.failure.is_none(), "{:?}", traj.failure);
        let settled = &traj.diags[3..];
        let cheap = settled.iter().filter(|dg| dg.pressure_evals <= 12).count();
        assert!(
            cheap * 10 >= settled.len() * 9,
            "only {cheap} of {} solves reused the warm start",
            settled.len()
        );
    }

    fn interp_channel(times: &[f64], vals: &[f64], t: f64) -> f64 {
        let n = times.len();
        if t <= times[0] {
            return vals[0];
        }
        if t >= times[n - 1] {
            return vals[n - 1];
        }
        let hi = times.partition_point(|&x| x < t).max(1);
        let (t0, t1) = (times[hi - 1], times[hi]);
        let w = (t - t0) / (t1 - t0);
        vals[hi - 1] * (1.0 - w) + vals[hi] * w
    }

    #[test]
    fn implicit_and_explicit_modes_agree_on_stored_mass() {
        let d = desk();
        let alg =
            simulate(&d.models, &d.topo, &d.profile, &desk_cfg(SolverMode::Algebraic), &d.init, 12)
                .unwrap();
        let ida = simulate(&d.models, &d.topo, &d.profile, &desk_cfg(SolverMode::Ida), &d.init, 12)
            .unwrap();
        assert!(alg.failure.is_none(), "{:?}", alg.failure);
        assert!(ida.failure.is_none(), "{:?}", ida.failure);
        // The explicit run adapts its step length, so twelve of its steps
        // cover less wall time than twelve fixed spans. Compare only where
        // the records overlap.
        let t_end = *alg.times.last().unwrap();
        for ch in [0usize, 2, 4] {
            let av: Vec<f64> = alg.states.iter().map(|r| r[ch]).collect();
            let mut errs = 0.0;
            let mut count = 0usize;
            for (row, &t) in ida.states.iter().zip(&ida.times) {
                if t > t_end + 1e-9 {
                    break;
                }
                let a = interp_channel(&alg.times, &av, t);
                errs += (row[ch] - a).abs() / a.abs().max(1e-3);
                count += 1;
            }
            assert!(count >= 5, "overlap too short to compare ({count} rows)");
            let mape = 100.0 * errs / count as f64;
            assert!(mape < 5.0, "channel {ch} disagrees by {mape:.2}%");
        }
    }

    #[test]
    fn short_span_mode_records_every_increment() {
        let d = desk();
        let cfg = desk_cfg(SolverMode::Dassl);
        let traj = simulate(&d.models, &d.topo, &d.profile, &cfg, &d.init, 8).unwrap();
        assert!(traj.failure.is_none(), "{:?}", traj.failure);
        assert_eq!(traj.len(), 9);
        let (_, targets) = highres_mask(&d.profile, &cfg.highres);
        for (i, &dt) in traj.dts.iter().enumerate().skip(1) {
            let idx = profile_index(&d.profile, traj.times[i - 1]);
            let want = cfg.highres.dassl_increment_factor * targets[idx] * cfg.dt_scale;
            assert!(
                (dt - want).abs() <= 1e-9,
                "row {i} spacing {dt} instead of {want}"
            );
        }
        for diag in traj.diags.iter().skip(1) {
            assert!(diag.dae_internal_steps >= 1);
        }
    }

    #[test]
    fn corrected_runs_respect_the_output_gate() {
        let d = desk();
        let mut cfg = desk_cfg(SolverMode::Algebraic);
        cfg.corrector = true;
        let traj = simulate(&d.models, &d.topo, &d.profile, &cfg, &d.init, 12).unwrap();
        assert!(traj.failure.is_none(), "{:?}", traj.failure);
        assert_eq!(traj.len(), 13);
        // The initial row is recorded as-is, every stepped row is corrected.
        assert_eq!(traj.corrections.len(), 12);
        let mut applied = 0;
        for (k, rec) in traj.corrections.iter().enumerate() {
            for c in 0..N_CORR {
                assert!(rec.phi_raw[c].abs() <= 0.2 + 1e-12);
                assert!(rec.phi_smooth[c].abs() <= 0.4, "smoothed stage left its band");
                assert!(rec.m_bench[c].is_nan(), "deployment has no benchmark column");
            }
            if !rec.skipped {
                applied += 1;
                for c in 0..N_CORR {
                    assert!(rec.m_corr[c].abs() <= 1.0 + 1e-12);
                }
                // The recorded state carries the correction.
                let row = &traj.states[k + 1];
                let st = &d.models.cond.out_stats;
                assert!(
                    (st.normalize_value(OUT_ENERGY, row[1]) - rec.m_corr[0]).abs() <= 1e-9,
                    "corrected energy does not match the recorded state"
                );
            }
        }
        assert!(applied > 0, "gate rejected every correction");
    }

    #[test]
    fn failed_solves_leave_a_partial_trajectory() {
        let d = desk();
        let mut cfg = desk_cfg(SolverMode::Algebraic);
        cfg.eps_soln = 1e-30;
        let traj = simulate(&d.models, &d.topo, &d.profile, &cfg, &d.init, 10).unwrap();
        let msg = traj.failure.as_ref().expect("an unreachable tolerance must be reported");
        assert!(msg.contains("step"));
        assert!(traj.len() <= 1);
    }

    #[test]
    fn trajectory_csv_has_the_stable_layout() {
        let d = desk();
        let cfg = desk_cfg(SolverMode::Algebraic);
        let traj = simulate(&d.models, &d.topo, &d.profile, &cfg, &d.init, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        traj.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("t,dt,m_r_0,e_hx_0,"));
        assert!(header.contains("p_liquid,p_suction"));
        let cols = header.split(',').count();
        // 2 time columns, 9 channels for each of 3 exchangers, 4 junction
        // pressures, 6 diagnostics.
        assert_eq!(cols, 2 + 9 * 3 + 4 + 6);
        assert_eq!(lines.count(), traj.len());
    }

    #[test]
    fn scenario_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.json");
        let sc = Scenario {
            n_c: 4,
            n_v: 4,
            config: SystemConfig { mode: SolverMode::Dassl, ..SystemConfig::default() },
            profile_path: "profile.json".into(),
            cond_model: "cond.model.json".into(),
            evap_model: "evap.model.json".into(),
            compressor_model: "comp.model.json".into(),
            valve_model: "valve.model.json".into(),
            corrector_model: None,
            horizon: 500,
        };
        save_scenario(&path, &sc).unwrap();
        let back = load_scenario(&path).unwrap();
        assert_eq!(back.n_c, 4);
        assert!(matches!(back.config.mode, SolverMode::Dassl));
        assert_eq!(back.horizon, 500);
        assert!(back.corrector_model.is_none());
    }

    #[test]
    fn solver_names_parse_case_insensitively() {
        assert!(matches!("algebraic".parse::<SolverMode>().unwrap(), SolverMode::Algebraic));
        assert!(matches!("IDA".parse::<SolverMode>().unwrap(), SolverMode::Ida));
        assert!(matches!("dassl".parse::<SolverMode>().unwrap(), SolverMode::Dassl));
        assert!("rk4".parse::<SolverMode>().is_err());
    }

    #[test]
    fn bad_states_are_rejected_before_stepping() {
        let d = desk();
        let cfg = desk_cfg(SolverMode::Algebraic);
        let mut s =
            SystemSession::new(&d.models, &d.topo, &d.profile, cfg.clone(), &d.init).unwrap();
        assert!(s.system_rhs(0.0, &[1.0, 2.0]).is_err());
        let mut bad = d.init.state.clone();
        bad[0] = -0.5;
        assert!(s.system_rhs(0.0, &bad).is_err());
        bad[0] = f64::NAN;
        assert!(s.system_rhs(0.0, &bad).is_err());

        let mut short = d.init.clone();
        short.state.truncate(3);
        assert!(SystemSession::new(&d.models, &d.topo, &d.profile, cfg, &short).is_err());
    }

    #[test]
    fn training_pairs_align_with_the_benchmark() {
        let d = desk();
        let cfg = desk_cfg(SolverMode::Ida);
        let pairs = collect_training_pairs(
            &d.models, &d.topo, &d.profile, &d.plant, &d.bench, &cfg, 300, 12,
        )
        .unwrap();
        assert_eq!(pairs.len(), 13);
        for p in &pairs {
            assert_eq!(p.z_in.len(), 2 * (N_INPUTS + N_OUTPUTS));
            assert!(p.z_in.iter().all(|v| v.is_finite()));
            assert!(p.m_pred.iter().all(|v| v.is_finite()));
            assert!(p.m_bench.iter().all(|v| v.is_finite()));
        }
        // The first sample starts from the benchmark state itself.
        for c in 0..N_CORR {
            assert!((pairs[0].m_pred[c] - pairs[0].m_bench[c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn initial_condition_comes_from_one_reference_call() {
        let d = desk();
        assert_eq!(d.init.t0, 300.0);
        assert_eq!(d.init.state.len(), 6);
        assert_eq!(d.init.hx_inputs.len(), 3);
        assert_eq!(d.init.hx_outputs.len(), 3);
        assert!(d.init.p_liquid > d.init.p_suction);
    }

}
