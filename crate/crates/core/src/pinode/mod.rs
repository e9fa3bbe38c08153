//! Recurrent encoder, latent ODE and recurrent decoder for one exchanger
//! role, with rate outputs produced by pushing the latent velocity through
//! the decoder linearization on the same tape as the forward pass.
//!
//! Layout: a GRU consumes the encoder window of boundary inputs plus the two
//! measured storage channels, its final hidden state is normalized and
//! projected to the latent; each reported step advances the latent with one
//! classic Runge-Kutta step of a gated derivative field under zero-order-held
//! forcing; a second GRU decodes the latent trajectory to the nine output
//! channels. The reported rate of an output channel is (d out / d latent)
//! times the latent velocity with the previous decoder hidden state held
//! fixed, so the rate is instantaneous and needs only first-order tangents.

pub mod infer;
pub mod train;
pub mod window;

pub use train::{save_history, train, EpochRecord, TrainConfig, TrainOutcome};
pub use window::{make_windows, TrainingWindow};

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{dropout, GruBound, GruCell, LayerNorm, LayerNormBound, Linear, LinearBound};
use crate::plant::{N_INPUTS, N_OUTPUTS};
use crate::rng;

/// Index of the first of the two storage channels (mass, then energy) in the
/// output row; these feed the encoder and the conservation penalty.
pub const STORAGE_CHANNEL: usize = crate::plant::cycle::OUT_MASS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_window: usize,
    pub dec_window: usize,
    pub latent_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_window: 20,
            dec_window: 10,
            latent_dim: 8,
            enc_hidden: 64,
            dec_hidden: 64,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn enc_input_dim(&self) -> usize {
        N_INPUTS + 2
    }
}

#[derive(Debug, Clone)]
pub struct PinodeWeights {
    pub cfg: ModelConfig,
    pub enc: GruCell,
    pub enc_norm: LayerNorm,
    pub proj: Linear,
    pub lat_norm: LayerNorm,
    pub ode: GruCell,
    pub dec: GruCell,
    pub dec_norm: LayerNorm,
    pub head: Linear,
}

impl PinodeWeights {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        PinodeWeights {
            enc: GruCell::new("enc", cfg.enc_hidden, cfg.enc_input_dim(), &mut r),
            enc_norm: LayerNorm::new("enc_norm", cfg.enc_hidden),
            proj: Linear::new("proj", cfg.latent_dim, cfg.enc_hidden, &mut r),
            lat_norm: LayerNorm::new("lat_norm", cfg.latent_dim),
            ode: GruCell::new("ode", cfg.latent_dim, N_INPUTS, &mut r),
            dec: GruCell::new("dec", cfg.dec_hidden, cfg.latent_dim, &mut r),
            dec_norm: LayerNorm::new("dec_norm", cfg.dec_hidden),
            head: Linear::new("head", N_OUTPUTS, cfg.dec_hidden, &mut r),
            cfg,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> PinodeBound {
        PinodeBound {
            cfg: self.cfg,
            enc: self.enc.bind(tape),
            enc_norm: self.enc_norm.bind(tape),
            proj: self.proj.bind(tape),
            lat_norm: self.lat_norm.bind(tape),
            ode: self.ode.bind(tape),
            dec: self.dec.bind(tape),
            dec_norm: self.dec_norm.bind(tape),
            head: self.head.bind(tape),
        }
    }

    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        let gru = |g: &GruCell, f: &mut dyn FnMut(&str, &Tensor)| {
            let n = &g.name;
            f(&format!("{n}.w_r"), &g.w_r);
            f(&format!("{n}.w_z"), &g.w_z);
            f(&format!("{n}.w_h"), &g.w_h);
            f(&format!("{n}.u_r"), &g.u_r);
            f(&format!("{n}.u_z"), &g.u_z);
            f(&format!("{n}.u_h"), &g.u_h);
            f(&format!("{n}.b_r"), &g.b_r);
            f(&format!("{n}.b_z"), &g.b_z);
            f(&format!("{n}.b_h"), &g.b_h);
        };
        let ln = |l: &LayerNorm, f: &mut dyn FnMut(&str, &Tensor)| {
            f(&format!("{}.gain", l.name), &l.gain);
            f(&format!("{}.bias", l.name), &l.bias);
        };
        let lin = |l: &Linear, f: &mut dyn FnMut(&str, &Tensor)| {
            f(&format!("{}.w", l.name), &l.w);
            f(&format!("{}.b", l.name), &l.b);
        };
        gru(&self.enc, &mut f);
        ln(&self.enc_norm, &mut f);
        lin(&self.proj, &mut f);
        ln(&self.lat_norm, &mut f);
        gru(&self.ode, &mut f);
        gru(&self.dec, &mut f);
        ln(&self.dec_norm, &mut f);
        lin(&self.head, &mut f);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        fn g(g: &GruCell) -> Vec<&Tensor> {
            vec![&g.w_r, &g.w_z, &g.w_h, &g.u_r, &g.u_z, &g.u_h, &g.b_r, &g.b_z, &g.b_h]
        }
        let mut out: Vec<&Tensor> = Vec::new();
        out.extend(g(&self.enc));
        out.push(&self.enc_norm.gain);
        out.push(&self.enc_norm.bias);
        out.push(&self.proj.w);
        out.push(&self.proj.b);
        out.push(&self.lat_norm.gain);
        out.push(&self.lat_norm.bias);
        out.extend(g(&self.ode));
        out.extend(g(&self.dec));
        out.push(&self.dec_norm.gain);
        out.push(&self.dec_norm.bias);
        out.push(&self.head.w);
        out.push(&self.head.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let PinodeWeights { enc, enc_norm, proj, lat_norm, ode, dec, dec_norm, head, .. } = self;
        fn g(g: &mut GruCell) -> Vec<&mut Tensor> {
            vec![
                &mut g.w_r, &mut g.w_z, &mut g.w_h, &mut g.u_r, &mut g.u_z, &mut g.u_h,
                &mut g.b_r, &mut g.b_z, &mut g.b_h,
            ]
        }
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(g(enc));
        out.push(&mut enc_norm.gain);
        out.push(&mut enc_norm.bias);
        out.push(&mut proj.w);
        out.push(&mut proj.b);
        out.push(&mut lat_norm.gain);
        out.push(&mut lat_norm.bias);
        out.extend(g(ode));
        out.extend(g(dec));
        out.push(&mut dec_norm.gain);
        out.push(&mut dec_norm.bias);
        out.push(&mut head.w);
        out.push(&mut head.b);
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bundle =
            crate::nn::checkpoint::WeightBundle::new(serde_json::to_value(self.cfg)?);
        self.for_each_param(|name, t| bundle.push(name, t));
        bundle.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bundle = crate::nn::checkpoint::WeightBundle::load(path)?;
        let cfg: ModelConfig = serde_json::from_value(bundle.meta.clone())?;
        let mut weights = PinodeWeights::new(cfg, 0);
        let mut names = Vec::new();
        weights.for_each_param(|name, _| names.push(name.to_string()));
        for (name, slot) in names.iter().zip(weights.params_mut()) {
            let loaded = bundle.tensor(name)?;
            if !loaded.same_shape(slot) {
                return Err(Error::contract(format!("checkpoint shape mismatch for {name}")));
            }
            *slot = loaded;
        }
        Ok(weights)
    }
}

pub struct PinodeBound {
    pub cfg: ModelConfig,
    pub enc: GruBound,
    pub enc_norm: LayerNormBound,
    pub proj: LinearBound,
    pub lat_norm: LayerNormBound,
    pub ode: GruBound,
    pub dec: GruBound,
    pub dec_norm: LayerNormBound,
    pub head: LinearBound,
}

impl PinodeBound {
    /// Variable ids in the same order as `PinodeWeights::params`.
    pub fn param_ids(&self) -> Vec<NodeId> {
        let g = |g: &GruBound| -> Vec<NodeId> {
            vec![g.w_r, g.w_z, g.w_h, g.u_r, g.u_z, g.u_h, g.b_r, g.b_z, g.b_h]
        };
        let mut out = Vec::new();
        out.extend(g(&self.enc));
        out.push(self.enc_norm.gain);
        out.push(self.enc_norm.bias);
        out.push(self.proj.w);
        out.push(self.proj.b);
        out.push(self.lat_norm.gain);
        out.push(self.lat_norm.bias);
        out.extend(g(&self.ode));
        out.extend(g(&self.dec));
        out.push(self.dec_norm.gain);
        out.push(self.dec_norm.bias);
        out.push(self.head.w);
        out.push(self.head.b);
        out
    }
}

/// One classic Runge-Kutta step of dy/dt = f(t, y) with f frozen in time,
/// built entirely from tape operations.
pub fn rk4_step<F>(tape: &mut Tape, y: NodeId, dt: f64, mut f: F) -> Result<NodeId>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    let k1 = f(tape, y)?;
    let y2 = {
        let s = tape.scale(k1, 0.5 * dt)?;
        tape.add(y, s)?
    };
    let k2 = f(tape, y2)?;
    let y3 = {
        let s = tape.scale(k2, 0.5 * dt)?;
        tape.add(y, s)?
    };
    let k3 = f(tape, y3)?;
    let y4 = {
        let s = tape.scale(k3, dt)?;
        tape.add(y, s)?
    };
    let k4 = f(tape, y4)?;
    let ends = tape.add(k1, k4)?;
    let mids = tape.add(k2, k3)?;
    let mids2 = tape.scale(mids, 2.0)?;
    let total = tape.add(ends, mids2)?;
    let inc = tape.scale(total, dt / 6.0)?;
    tape.add(y, inc)
}

#[derive(Debug)]
pub struct ForwardOut {
    /// Normalized nine-channel prediction per reported step.
    pub outputs: Vec<NodeId>,
    /// Normalized per-second rate of the two storage channels per step.
    pub rates: Vec<NodeId>,
    /// Latent trajectory, one point per reported step.
    pub latents: Vec<NodeId>,
}

impl PinodeBound {
    /// Encoder window to initial latent. Dropout (train only) acts on the
    /// final encoder hidden state so the decode map stays deterministic and
    /// its tangent exact.
    pub fn encode(
        &self,
        tape: &mut Tape,
        enc_inputs: &[Vec<f64>],
        train_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<NodeId> {
        if enc_inputs.len() != self.cfg.enc_window {
            return Err(Error::contract("encoder window length mismatch"));
        }
        let mut h = tape.constant(Tensor::zeros(self.cfg.enc_hidden, 1));
        for row in enc_inputs {
            if row.len() != self.cfg.enc_input_dim() {
                return Err(Error::contract("encoder input width mismatch"));
            }
            let x = tape.constant(Tensor::vector(row));
            h = self.enc.step(tape, x, h)?;
        }
        if let Some(r) = train_rng {
            h = dropout(tape, h, self.cfg.dropout, true, r)?;
        }
        let hn = self.enc_norm.forward(tape, h)?;
        let p = self.proj.forward(tape, hn)?;
        self.lat_norm.forward(tape, p)
    }

    /// Advance the latent by one reported step under frozen forcing.
    pub fn integrate_latent(
        &self,
        tape: &mut Tape,
        z: NodeId,
        forcing: NodeId,
        dt: f64,
    ) -> Result<NodeId> {
        rk4_step(tape, z, dt, |tp, zz| self.ode.latent_derivative(tp, forcing, zz))
    }

    /// Decode one latent point given the previous decoder hidden state.
    /// Returns (new hidden, output, output rate) where the rate is the
    /// decoder linearization applied to the latent velocity.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        z: NodeId,
        zdot: NodeId,
        h_prev: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let (h_new, dh) = self.dec.step_jvp(tape, z, h_prev, zdot)?;
        let trace = self.dec_norm.forward_traced(tape, h_new)?;
        let y = self.head.forward(tape, trace.out)?;
        let dnorm = self.dec_norm.forward_jvp(tape, &trace, dh)?;
        let ydot = self.head.forward_jvp(tape, dnorm)?;
        Ok((h_new, y, ydot))
    }

    pub fn forward_window(
        &self,
        tape: &mut Tape,
        win: &TrainingWindow,
        train_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<ForwardOut> {
        let mut z = self.encode(tape, &win.enc_inputs, train_rng)?;
        let mut h_dec = tape.constant(Tensor::zeros(self.cfg.dec_hidden, 1));
        let steps = win.forcing.len();
        let mut outputs = Vec::with_capacity(steps);
        let mut rates = Vec::with_capacity(steps);
        let mut latents = Vec::with_capacity(steps);
        for t in 0..steps {
            let u = tape.constant(Tensor::vector(&win.forcing[t]));
            z = self.integrate_latent(tape, z, u, win.dt)?;
            latents.push(z);
            let zdot = self.ode.latent_derivative(tape, u, z)?;
            let (h_new, y, ydot) = self.decode_step(tape, z, zdot, h_dec)?;
            let rate = tape.slice(ydot, STORAGE_CHANNEL, 2)?;
            outputs.push(y);
            rates.push(rate);
            h_dec = h_new;
        }
        Ok(ForwardOut { outputs, rates, latents })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub data: NodeId,
    pub phys: NodeId,
    pub cons: NodeId,
}

/// Elementwise mean-square losses: `data` over all predicted channels,
/// `phys` over the two rate channels against the recorded boundary rates,
/// `cons` over the two storage channels alone. The weighted combination is
/// data + w_phys * phys + w_cons * cons.
pub fn window_loss(
    tape: &mut Tape,
    fwd: &ForwardOut,
    win: &TrainingWindow,
    w_phys: f64,
    w_cons: f64,
) -> Result<LossNodes> {
    let pred = tape.concat(&fwd.outputs)?;
    let flat: Vec<f64> = win.targets.iter().flat_map(|r| r.iter().copied()).collect();
    let target = tape.constant(Tensor::vector(&flat));
    let data = tape.mse(pred, target)?;

    let rate_pred = tape.concat(&fwd.rates)?;
    let flat_rates: Vec<f64> = win.true_rates.iter().flat_map(|r| r.iter().copied()).collect();
    let rate_target = tape.constant(Tensor::vector(&flat_rates));
    let phys = tape.mse(rate_pred, rate_target)?;

    let mut storage = Vec::with_capacity(fwd.outputs.len());
    for &y in &fwd.outputs {
        storage.push(tape.slice(y, STORAGE_CHANNEL, 2)?);
    }
    let cons_pred = tape.concat(&storage)?;
    let flat_storage: Vec<f64> = win
        .targets
        .iter()
        .flat_map(|r| r[STORAGE_CHANNEL..STORAGE_CHANNEL + 2].iter().copied())
        .collect();
    let cons_target = tape.constant(Tensor::vector(&flat_storage));
    let cons = tape.mse(cons_pred, cons_target)?;

    let wp = tape.scale(phys, w_phys)?;
    let wc = tape.scale(cons, w_cons)?;
    let pc = tape.add(wp, wc)?;
    let total = tape.add(data, pc)?;
    Ok(LossNodes { total, data, phys, cons })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            enc_window: 4,
            dec_window: 3,
            latent_dim: 4,
            enc_hidden: 8,
            dec_hidden: 8,
            dropout: 0.1,
        }
    }

    fn tiny_window(cfg: &ModelConfig, seed: u64) -> TrainingWindow {
        use rand::Rng;
        let mut r = crate::rng::seeded(seed);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(-0.9..0.9)).collect() };
        TrainingWindow {
            enc_inputs: (0..cfg.enc_window).map(|_| v(N_INPUTS + 2)).collect(),
            forcing: (0..cfg.dec_window).map(|_| v(N_INPUTS)).collect(),
            targets: (0..cfg.dec_window).map(|_| v(N_OUTPUTS)).collect(),
            true_rates: (0..cfg.dec_window).map(|_| v(2)).collect(),
            dt: 1.0,
        }
    }

    #[test]
    fn rk4_single_step_of_linear_decay_matches_hand_value() {
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::scalar(1.0));
        let y1 = rk4_step(&mut tape, y0, 0.1, |tp, y| tp.neg(y)).unwrap();
        assert_relative_eq!(tape.value(y1).scalar_value(), 0.90483750, epsilon = 1e-8);
    }

    #[test]
    fn rk4_shows_fourth_order_convergence() {
        let run = |n: usize| -> f64 {
            let mut tape = Tape::new();
            let mut y = tape.constant(Tensor::scalar(1.0));
            let dt = 1.0 / n as f64;
            for _ in 0..n {
                y = rk4_step(&mut tape, y, dt, |tp, v| tp.neg(v)).unwrap();
            }
            tape.value(y).scalar_value()
        };
        let exact = (-1.0f64).exp();
        let errs: Vec<f64> = [4usize, 8, 16].iter().map(|&n| (run(n) - exact).abs()).collect();
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!((slope - 4.0).abs() < 0.2, "slope {slope}");
        }
    }

    #[test]
    fn forward_shapes_are_consistent() {
        let cfg = tiny_cfg();
        let weights = PinodeWeights::new(cfg, 3);
        let win = tiny_window(&cfg, 4);
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape);
        let fwd = bound.forward_window(&mut tape, &win, None).unwrap();
        assert_eq!(fwd.outputs.len(), cfg.dec_window);
        assert_eq!(tape.value(fwd.outputs[0]).rows, N_OUTPUTS);
        assert_eq!(tape.value(fwd.rates[0]).rows, 2);
        assert_eq!(tape.value(fwd.latents[0]).rows, cfg.latent_dim);
    }

    #[test]
    fn reported_rate_matches_directional_difference_of_decode_map() {
        let cfg = tiny_cfg();
        let weights = PinodeWeights::new(cfg, 11);
        let win = tiny_window(&cfg, 12);
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape);
        let fwd = bound.forward_window(&mut tape, &win, None).unwrap();

        // Rebuild the decode map at the last step as a plain function of the
        // latent point and difference it along the latent velocity.
        let t_last = cfg.dec_window - 1;
        let z = tape.value(fwd.latents[t_last]).clone();
        let u = Tensor::vector(&win.forcing[t_last]);
        let h_prev = if t_last == 0 {
            Tensor::zeros(cfg.dec_hidden, 1)
        } else {
            // replay the decoder to recover the previous hidden state
            let mut tp = Tape::new();
            let b = weights.bind(&mut tp);
            let mut h = tp.constant(Tensor::zeros(cfg.dec_hidden, 1));
            for t in 0..t_last {
                let zt = tp.constant(tape.value(fwd.latents[t]).clone());
                h = b.dec.step(&mut tp, zt, h).unwrap();
            }
            tp.value(h).clone()
        };
        let zdot = {
            let mut tp = Tape::new();
            let b = weights.bind(&mut tp);
            let zn = tp.constant(z.clone());
            let un = tp.constant(u.clone());
            let d = b.ode.latent_derivative(&mut tp, un, zn).unwrap();
            tp.value(d).clone()
        };
        let psi = |zv: &Tensor| -> Tensor {
            let mut tp = Tape::new();
            let b = weights.bind(&mut tp);
            let zn = tp.constant(zv.clone());
            let hp = tp.constant(h_prev.clone());
            let h_new = b.dec.step(&mut tp, zn, hp).unwrap();
            let norm = b.dec_norm.forward(&mut tp, h_new).unwrap();
            let y = b.head.forward(&mut tp, norm).unwrap();
            tp.value(y).clone()
        };
        let eps = 1e-6;
        let mut zp = z.clone();
        let mut zm = z.clone();
        for i in 0..z.data.len() {
            zp.data[i] += eps * zdot.data[i];
            zm.data[i] -= eps * zdot.data[i];
        }
        let yp = psi(&zp);
        let ym = psi(&zm);
        let reported = tape.value(fwd.rates[t_last]).clone();
        let full = |c: usize| (yp.data[c] - ym.data[c]) / (2.0 * eps);
        for k in 0..2 {
            let fd = full(STORAGE_CHANNEL + k);
            let got = reported.data[k];
            assert!(
                (fd - got).abs() <= 1e-8 * fd.abs().max(1.0),
                "channel {k}: fd {fd} vs jvp {got}"
            );
        }
    }

    #[test]
    fn decode_tangent_is_linear_in_the_velocity() {
        let cfg = tiny_cfg();
        let weights = PinodeWeights::new(cfg, 7);
        let mut r = crate::rng::seeded(8);
        let z = Tensor::init_uniform(cfg.latent_dim, 1, 1, &mut r);
        let h = Tensor::init_uniform(cfg.dec_hidden, 1, 1, &mut r);

        let jvp = |v: &[f64]| -> Vec<f64> {
            let mut tp = Tape::new();
            let b = weights.bind(&mut tp);
            let zn = tp.constant(z.clone());
            let hn = tp.constant(h.clone());
            let vn = tp.constant(Tensor::vector(v));
            let (_, _, ydot) = b.decode_step(&mut tp, zn, vn, hn).unwrap();
            tp.value(ydot).data.clone()
        };
        // assemble the Jacobian from basis tangents, then compare J v
        // against the direct tangent along v
        let mut basis_cols: Vec<Vec<f64>> = Vec::new();
        for i in 0..cfg.latent_dim {
            let mut e = vec![0.0; cfg.latent_dim];
            e[i] = 1.0;
            basis_cols.push(jvp(&e));
        }
        let v: Vec<f64> = (0..cfg.latent_dim).map(|i| 0.3 + 0.1 * i as f64).collect();
        let direct = jvp(&v);
        for c in 0..N_OUTPUTS {
            let assembled: f64 =
                (0..cfg.latent_dim).map(|i| basis_cols[i][c] * v[i]).sum();
            assert!(
                (assembled - direct[c]).abs() <= 1e-12 * assembled.abs().max(1.0),
                "channel {c}: {assembled} vs {direct:?}"
            );
        }
    }

    #[test]
    fn zeroed_decoder_gives_constant_output_and_zero_rates() {
        let cfg = tiny_cfg();
        let mut weights = PinodeWeights::new(cfg, 5);
        for t in [
            &mut weights.dec.w_r, &mut weights.dec.w_z, &mut weights.dec.w_h,
            &mut weights.dec.u_r, &mut weights.dec.u_z, &mut weights.dec.u_h,
            &mut weights.dec.b_r, &mut weights.dec.b_z, &mut weights.dec.b_h,
        ] {
            for v in &mut t.data {
                *v = 0.0;
            }
        }
        let win = tiny_window(&cfg, 6);
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape);
        let fwd = bound.forward_window(&mut tape, &win, None).unwrap();
        let first = tape.value(fwd.outputs[0]).clone();
        for &y in &fwd.outputs[1..] {
            assert_eq!(tape.value(y).data, first.data);
        }
        for &r in &fwd.rates {
            assert!(tape.value(r).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn loss_example_single_step_single_channel() {
        let cfg = ModelConfig { dec_window: 1, ..tiny_cfg() };
        let mut win = tiny_window(&cfg, 9);
        win.targets = vec![vec![0.0; N_OUTPUTS]];
        win.true_rates = vec![vec![0.0; 2]];
        let mut tape = Tape::new();
        // fabricate a prediction with error 2 in one channel and exact rates
        let mut y = vec![0.0; N_OUTPUTS];
        y[3] = 2.0;
        let yn = tape.constant(Tensor::vector(&y));
        let rn = tape.constant(Tensor::zeros(2, 1));
        let fwd = ForwardOut { outputs: vec![yn], rates: vec![rn], latents: vec![] };
        let loss = window_loss(&mut tape, &fwd, &win, 0.5, 0.5).unwrap();
        assert_relative_eq!(
            tape.value(loss.data).scalar_value(),
            4.0 / N_OUTPUTS as f64,
            epsilon = 1e-12
        );
        assert_eq!(tape.value(loss.phys).scalar_value(), 0.0);
        assert_eq!(tape.value(loss.cons).scalar_value(), 0.0);
        assert_relative_eq!(
            tape.value(loss.total).scalar_value(),
            4.0 / N_OUTPUTS as f64,
            epsilon = 1e-12
        );
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut weights = PinodeWeights::new(cfg, 17);
        let win = tiny_window(&cfg, 18);

        let loss_value = |w: &PinodeWeights| -> f64 {
            let mut tape = Tape::new();
            let b = w.bind(&mut tape);
            let fwd = b.forward_window(&mut tape, &win, None).unwrap();
            let l = window_loss(&mut tape, &fwd, &win, 0.5, 0.5).unwrap();
            tape.value(l.total).scalar_value()
        };

        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape);
        let fwd = bound.forward_window(&mut tape, &win, None).unwrap();
        let loss = window_loss(&mut tape, &fwd, &win, 0.5, 0.5).unwrap();
        let grads = tape.backward(loss.total).unwrap();

        // spot-check a handful of coordinates across different layers
        let head_w = grads.get(bound.head.w);
        let ode_wr = grads.get(bound.ode.w_r);
        let enc_uh = grads.get(bound.enc.u_h);
        let checks: Vec<(&str, Tensor, usize)> =
            vec![("head.w", head_w, 5), ("ode.w_r", ode_wr, 3), ("enc.u_h", enc_uh, 7)];
        for (name, g, idx) in checks {
            let eps = 1e-5;
            let base = match name {
                "head.w" => &mut weights.head.w,
                "ode.w_r" => &mut weights.ode.w_r,
                _ => &mut weights.enc.u_h,
            };
            let orig = base.data[idx];
            base.data[idx] = orig + eps;
            let up = loss_value(&weights);
            let base = match name {
                "head.w" => &mut weights.head.w,
                "ode.w_r" => &mut weights.ode.w_r,
                _ => &mut weights.enc.u_h,
            };
            base.data[idx] = orig - eps;
            let down = loss_value(&weights);
            let base = match name {
                "head.w" => &mut weights.head.w,
                "ode.w_r" => &mut weights.ode.w_r,
                _ => &mut weights.enc.u_h,
            };
            base.data[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = g.data[idx];
            assert!(
                (fd - ad).abs() <= 1e-4 * fd.abs().max(1e-5),
                "{name}[{idx}]: fd {fd} vs ad {ad}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let cfg = tiny_cfg();
        let weights = PinodeWeights::new(cfg, 23);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        weights.save(&path).unwrap();
        let back = PinodeWeights::load(&path).unwrap();
        assert_eq!(back.cfg, cfg);
        assert_eq!(back.head.w.data, weights.head.w.data);
        assert_eq!(back.enc.u_z.data, weights.enc.u_z.data);
    }
}
