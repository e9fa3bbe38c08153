//! Tape-free forward evaluation for frozen weights.
//!
//! Simulation calls these methods thousands of times per run, so they skip
//! graph construction entirely. Every routine repeats the arithmetic of its
//! tape counterpart in the same order (row dots accumulate left to right,
//! reductions sum in element order), which makes the two paths bit-identical
//! and lets tests assert exact equality instead of a tolerance.

use super::{ModelConfig, PinodeWeights};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{GruCell, LayerNorm, Linear, LAYER_NORM_EPS};

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols, x.len());
    (0..w.rows)
        .map(|r| {
            let row = &w.data[r * w.cols..(r + 1) * w.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            acc
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gate_pre(w: &Tensor, u: &Tensor, b: &Tensor, x: &[f64], h: &[f64]) -> Vec<f64> {
    let wx = matvec(w, x);
    let uh = matvec(u, h);
    wx.iter()
        .zip(&uh)
        .zip(&b.data)
        .map(|((a, c), bb)| (a + c) + bb)
        .collect()
}

pub(crate) fn gru_step(g: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
    let r: Vec<f64> =
        gate_pre(&g.w_r, &g.u_r, &g.b_r, x, h).iter().map(|&v| sigmoid(v)).collect();
    let z: Vec<f64> =
        gate_pre(&g.w_z, &g.u_z, &g.b_z, x, h).iter().map(|&v| sigmoid(v)).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> =
        gate_pre(&g.w_h, &g.u_h, &g.b_h, x, &rh).iter().map(|&v| v.tanh()).collect();
    (0..h.len())
        .map(|i| z[i] * h[i] + (-1.0 * z[i] + 1.0) * cand[i])
        .collect()
}

fn gru_derivative(g: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
    let r: Vec<f64> =
        gate_pre(&g.w_r, &g.u_r, &g.b_r, x, h).iter().map(|&v| sigmoid(v)).collect();
    let z: Vec<f64> =
        gate_pre(&g.w_z, &g.u_z, &g.b_z, x, h).iter().map(|&v| sigmoid(v)).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> =
        gate_pre(&g.w_h, &g.u_h, &g.b_h, x, &rh).iter().map(|&v| v.tanh()).collect();
    (0..h.len())
        .map(|i| (-1.0 * z[i] + 1.0) * (cand[i] - h[i]))
        .collect()
}

fn layer_norm(ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let centered: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let var = centered.iter().map(|v| v * v).sum::<f64>() / n;
    let sd = (var + LAYER_NORM_EPS).sqrt();
    centered
        .iter()
        .zip(&ln.gain.data)
        .zip(&ln.bias.data)
        .map(|((c, g), b)| (c / sd) * g + b)
        .collect()
}

fn linear(l: &Linear, x: &[f64]) -> Vec<f64> {
    l.forward_plain(x)
}

impl PinodeWeights {
    /// Encoder window to initial latent, dropout off.
    pub fn encode_plain(&self, enc_inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if enc_inputs.len() != self.cfg.enc_window {
            return Err(Error::contract("encoder window length mismatch"));
        }
        let mut h = vec![0.0; self.cfg.enc_hidden];
        for row in enc_inputs {
            if row.len() != self.cfg.enc_input_dim() {
                return Err(Error::contract("encoder input width mismatch"));
            }
            h = gru_step(&self.enc, row, &h);
        }
        let hn = layer_norm(&self.enc_norm, &h);
        let p = linear(&self.proj, &hn);
        Ok(layer_norm(&self.lat_norm, &p))
    }

    /// Instantaneous latent velocity under the given forcing.
    pub fn latent_rate_plain(&self, forcing: &[f64], z: &[f64]) -> Vec<f64> {
        gru_derivative(&self.ode, forcing, z)
    }

    /// One classic Runge-Kutta step of the latent under frozen forcing,
    /// staged exactly like the tape integrator.
    pub fn advance_latent_plain(&self, z: &[f64], forcing: &[f64], dt: f64) -> Vec<f64> {
        let f = |zz: &[f64]| self.latent_rate_plain(forcing, zz);
        let k1 = f(z);
        let y2: Vec<f64> =
            z.iter().zip(&k1).map(|(y, k)| y + (0.5 * dt) * k).collect();
        let k2 = f(&y2);
        let y3: Vec<f64> =
            z.iter().zip(&k2).map(|(y, k)| y + (0.5 * dt) * k).collect();
        let k3 = f(&y3);
        let y4: Vec<f64> = z.iter().zip(&k3).map(|(y, k)| y + dt * k).collect();
        let k4 = f(&y4);
        (0..z.len())
            .map(|i| {
                let ends = k1[i] + k4[i];
                let mids2 = 2.0 * (k2[i] + k3[i]);
                z[i] + (dt / 6.0) * (ends + mids2)
            })
            .collect()
    }

    /// Decoder step: new hidden state and the nine normalized outputs.
    pub fn decode_plain(&self, z: &[f64], h_dec: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h_new = gru_step(&self.dec, z, h_dec);
        let normed = layer_norm(&self.dec_norm, &h_new);
        let y = linear(&self.head, &normed);
        (h_new, y)
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }
}

#[cfg(test)]
mod tests {
    use super::super::{PinodeBound, TrainingWindow};
    use super::*;
    use crate::autodiff::Tape;
    use crate::plant::{N_INPUTS, N_OUTPUTS};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            enc_window: 5,
            dec_window: 6,
            latent_dim: 4,
            enc_hidden: 8,
            dec_hidden: 8,
            dropout: 0.1,
        }
    }

    fn random_window(cfg: &ModelConfig, seed: u64) -> TrainingWindow {
        use rand::Rng;
        let mut r = crate::rng::seeded(seed);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(-0.9..0.9)).collect() };
        TrainingWindow {
            enc_inputs: (0..cfg.enc_window).map(|_| v(N_INPUTS + 2)).collect(),
            forcing: (0..cfg.dec_window).map(|_| v(N_INPUTS)).collect(),
            targets: (0..cfg.dec_window).map(|_| v(N_OUTPUTS)).collect(),
            true_rates: (0..cfg.dec_window).map(|_| v(2)).collect(),
            dt: 1.3,
        }
    }

    #[test]
    fn plain_rollout_is_bit_identical_to_the_tape_path() {
        let cfg = tiny_cfg();
        let weights = PinodeWeights::new(cfg, 91);
        let win = random_window(&cfg, 92);

        let mut tape = Tape::new();
        let bound: PinodeBound = weights.bind(&mut tape);
        let fwd = bound.forward_window(&mut tape, &win, None).unwrap();

        let mut z = weights.encode_plain(&win.enc_inputs).unwrap();
        let mut h_dec = vec![0.0; cfg.dec_hidden];
        for (t, forcing) in win.forcing.iter().enumerate() {
            z = weights.advance_latent_plain(&z, forcing, win.dt);
            assert_eq!(tape.value(fwd.latents[t]).data, z, "latent step {t}");
            let (h_new, y) = weights.decode_plain(&z, &h_dec);
            assert_eq!(tape.value(fwd.outputs[t]).data, y, "output step {t}");
            h_dec = h_new;
        }
    }

    #[test]
    fn latent_rate_matches_the_tape_derivative() {
        let cfg = tiny_cfg();
        let weights = PinodeWeights::new(cfg, 17);
        let mut r = crate::rng::seeded(5);
        use rand::Rng;
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| r.gen_range(-0.5..0.5)).collect();
        let u: Vec<f64> = (0..N_INPUTS).map(|_| r.gen_range(-0.5..0.5)).collect();

        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape);
        let zn = tape.constant(Tensor::vector(&z));
        let un = tape.constant(Tensor::vector(&u));
        let d = bound.ode.latent_derivative(&mut tape, un, zn).unwrap();
        assert_eq!(tape.value(d).data, weights.latent_rate_plain(&u, &z));
    }

    #[test]
    fn bad_window_shapes_are_rejected() {
        let cfg = tiny_cfg();
        let weights = PinodeWeights::new(cfg, 3);
        assert!(weights.encode_plain(&[]).is_err());
        let short_rows = vec![vec![0.0; 3]; cfg.enc_window];
        assert!(weights.encode_plain(&short_rows).is_err());
    }
}
