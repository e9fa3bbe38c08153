//! Network building blocks shared by the heat-exchanger surrogate, the static
//! component maps, and the output corrector.
//!
//! Each layer owns plain tensors; `bind` registers them on a tape and returns
//! a bound handle whose forward methods build the computation graph. Layers
//! that sit on the instantaneous output-rate path additionally provide a
//! `forward_jvp` that propagates a tangent as ordinary tape operations, which
//! keeps the rate itself differentiable with respect to the weights.

pub mod checkpoint;
pub mod optim;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Elementwise activation for MLP hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    pub fn apply_scalar(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Tangent of the activation given its forward output value node.
    fn apply_jvp(&self, tape: &mut Tape, y: NodeId, dx: NodeId) -> Result<NodeId> {
        match self {
            Activation::Tanh => {
                // tanh' = 1 - y^2
                let y2 = tape.square(y)?;
                let neg = tape.scale(y2, -1.0)?;
                let d = tape.add_const(neg, 1.0)?;
                tape.mul(d, dx)
            }
            Activation::Sigmoid => {
                // sigma' = y(1-y)
                let y2 = tape.square(y)?;
                let d = tape.sub(y, y2)?;
                tape.mul(d, dx)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(name: &str, out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            name: name.to_string(),
            w: Tensor::init_uniform(out_dim, in_dim, in_dim, rng),
            b: Tensor::init_uniform(out_dim, 1, in_dim, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearBound {
        LinearBound { w: tape.var(self.w.clone()), b: tape.var(self.b.clone()) }
    }

    /// Tape-free forward for frozen-weight inference. Accumulates each dot
    /// product left to right so the result is bit-identical to the tape path.
    pub fn forward_plain(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.w.cols;
        debug_assert_eq!(cols, x.len());
        (0..self.w.rows)
            .map(|r| {
                let row = &self.w.data[r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(x) {
                    acc += a * b;
                }
                acc + self.b.data[r]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearBound {
    pub w: NodeId,
    pub b: NodeId,
}

impl LinearBound {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let wx = tape.matvec(self.w, x)?;
        tape.add(wx, self.b)
    }

    pub fn forward_jvp(&self, tape: &mut Tape, dx: NodeId) -> Result<NodeId> {
        tape.matvec(self.w, dx)
    }
}

/// Layer normalization with learnable gain and bias, built as a composite of
/// tape primitives. Population variance, epsilon-stabilized denominator.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            name: name.to_string(),
            gain: Tensor { rows: dim, cols: 1, data: vec![1.0; dim] },
            bias: Tensor::zeros(dim, 1),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LayerNormBound {
        LayerNormBound { gain: tape.var(self.gain.clone()), bias: tape.var(self.bias.clone()) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormBound {
    pub gain: NodeId,
    pub bias: NodeId,
}

/// Intermediates kept so a tangent can be pushed through the same statistics.
pub struct LayerNormTrace {
    pub out: NodeId,
    centered: NodeId,
    xhat: NodeId,
    sd: NodeId,
}

impl LayerNormBound {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_traced(tape, x)?.out)
    }

    pub fn forward_traced(&self, tape: &mut Tape, x: NodeId) -> Result<LayerNormTrace> {
        let n = tape.value(x).rows;
        if n < 2 {
            return Err(Error::contract("layer_norm needs length >= 2"));
        }
        let mu = tape.mean(x)?;
        let mu_b = tape.broadcast(mu, n)?;
        let centered = tape.sub(x, mu_b)?;
        let c2 = tape.square(centered)?;
        let var = tape.mean(c2)?;
        let var_eps = tape.add_const(var, LAYER_NORM_EPS)?;
        let sd = tape.sqrt(var_eps)?;
        let sd_b = tape.broadcast(sd, n)?;
        let xhat = tape.div(centered, sd_b)?;
        let scaled = tape.mul(xhat, self.gain)?;
        let out = tape.add(scaled, self.bias)?;
        Ok(LayerNormTrace { out, centered, xhat, sd })
    }

    /// Tangent through the normalization statistics:
    /// d xhat = (dx - mean(dx))/sd - xhat * mean(centered .* dx)/(sd^2 ... )
    /// expressed with the forward trace's nodes so weights stay differentiable.
    pub fn forward_jvp(
        &self,
        tape: &mut Tape,
        trace: &LayerNormTrace,
        dx: NodeId,
    ) -> Result<NodeId> {
        let n = tape.value(dx).rows;
        let dmu = tape.mean(dx)?;
        let dmu_b = tape.broadcast(dmu, n)?;
        let dc = tape.sub(dx, dmu_b)?;
        // d var = 2 mean(centered .* dx); d sd = d var / (2 sd)
        let cdx = tape.mul(trace.centered, dx)?;
        let m = tape.mean(cdx)?;
        let dsd = tape.div(m, trace.sd)?;
        let sd_b = tape.broadcast(trace.sd, n)?;
        let term1 = tape.div(dc, sd_b)?;
        let dsd_over_sd = tape.div(dsd, trace.sd)?;
        let dsd_b = tape.broadcast(dsd_over_sd, n)?;
        let term2 = tape.mul(trace.xhat, dsd_b)?;
        let dxhat = tape.sub(term1, term2)?;
        tape.mul(dxhat, self.gain)
    }
}

/// GRU cell. Gates: r = sigma(W_r u + U_r h + b_r), z likewise, candidate
/// tanh(W_h u + U_h(r .* h) + b_h). The state update z .* h + (1-z) .* cand is
/// the exact Euler-1 image of the latent derivative (1-z) .* (cand - h).
#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub w_r: Tensor,
    pub w_z: Tensor,
    pub w_h: Tensor,
    pub u_r: Tensor,
    pub u_z: Tensor,
    pub u_h: Tensor,
    pub b_r: Tensor,
    pub b_z: Tensor,
    pub b_h: Tensor,
}

impl GruCell {
    pub fn new(name: &str, hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        let fan = input + hidden;
        GruCell {
            name: name.to_string(),
            w_r: Tensor::init_uniform(hidden, input, fan, rng),
            w_z: Tensor::init_uniform(hidden, input, fan, rng),
            w_h: Tensor::init_uniform(hidden, input, fan, rng),
            u_r: Tensor::init_uniform(hidden, hidden, fan, rng),
            u_z: Tensor::init_uniform(hidden, hidden, fan, rng),
            u_h: Tensor::init_uniform(hidden, hidden, fan, rng),
            b_r: Tensor::init_uniform(hidden, 1, fan, rng),
            b_z: Tensor::init_uniform(hidden, 1, fan, rng),
            b_h: Tensor::init_uniform(hidden, 1, fan, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_r.rows
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.cols
    }

    pub fn bind(&self, tape: &mut Tape) -> GruBound {
        GruBound {
            w_r: tape.var(self.w_r.clone()),
            w_z: tape.var(self.w_z.clone()),
            w_h: tape.var(self.w_h.clone()),
            u_r: tape.var(self.u_r.clone()),
            u_z: tape.var(self.u_z.clone()),
            u_h: tape.var(self.u_h.clone()),
            b_r: tape.var(self.b_r.clone()),
            b_z: tape.var(self.b_z.clone()),
            b_h: tape.var(self.b_h.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruBound {
    pub w_r: NodeId,
    pub w_z: NodeId,
    pub w_h: NodeId,
    pub u_r: NodeId,
    pub u_z: NodeId,
    pub u_h: NodeId,
    pub b_r: NodeId,
    pub b_z: NodeId,
    pub b_h: NodeId,
}

pub struct GruGates {
    pub r: NodeId,
    pub z: NodeId,
    pub cand: NodeId,
}

impl GruBound {
    fn gate_pre(
        &self,
        tape: &mut Tape,
        w: NodeId,
        u: NodeId,
        b: NodeId,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    }

    pub fn gates(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> Result<GruGates> {
        let pre_r = self.gate_pre(tape, self.w_r, self.u_r, self.b_r, x, h)?;
        let r = tape.sigmoid(pre_r)?;
        let pre_z = self.gate_pre(tape, self.w_z, self.u_z, self.b_z, x, h)?;
        let z = tape.sigmoid(pre_z)?;
        let rh = tape.mul(r, h)?;
        let pre_c = self.gate_pre(tape, self.w_h, self.u_h, self.b_h, x, rh)?;
        let cand = tape.tanh(pre_c)?;
        Ok(GruGates { r, z, cand })
    }

    /// Hidden-state update h' = z .* h + (1 - z) .* cand.
    pub fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> Result<NodeId> {
        let g = self.gates(tape, x, h)?;
        self.combine(tape, h, &g)
    }

    fn combine(&self, tape: &mut Tape, h: NodeId, g: &GruGates) -> Result<NodeId> {
        let zh = tape.mul(g.z, h)?;
        let nz = self.one_minus(tape, g.z)?;
        let nc = tape.mul(nz, g.cand)?;
        tape.add(zh, nc)
    }

    fn one_minus(&self, tape: &mut Tape, a: NodeId) -> Result<NodeId> {
        let n = tape.neg(a)?;
        tape.add_const(n, 1.0)
    }

    /// Continuous-time form d h/dt = (1 - z) .* (cand - h).
    pub fn latent_derivative(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> Result<NodeId> {
        let g = self.gates(tape, x, h)?;
        let nz = self.one_minus(tape, g.z)?;
        let d = tape.sub(g.cand, h)?;
        tape.mul(nz, d)
    }

    /// One step plus the tangent of the new hidden state with respect to the
    /// input only (previous hidden held fixed), propagated along `dx`.
    pub fn step_jvp(
        &self,
        tape: &mut Tape,
        x: NodeId,
        h: NodeId,
        dx: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let g = self.gates(tape, x, h)?;
        let out = self.combine(tape, h, &g)?;

        // dr = r(1-r) .* (W_r dx); dz likewise.
        let dpre_r = tape.matvec(self.w_r, dx)?;
        let dr = Activation::Sigmoid.apply_jvp(tape, g.r, dpre_r)?;
        let dpre_z = tape.matvec(self.w_z, dx)?;
        let dz = Activation::Sigmoid.apply_jvp(tape, g.z, dpre_z)?;
        // dpre_c = W_h dx + U_h (dr .* h)
        let whdx = tape.matvec(self.w_h, dx)?;
        let drh = tape.mul(dr, h)?;
        let uhd = tape.matvec(self.u_h, drh)?;
        let dpre_c = tape.add(whdx, uhd)?;
        let dcand = Activation::Tanh.apply_jvp(tape, g.cand, dpre_c)?;
        // dh' = dz .* (h - cand) + (1 - z) .* dcand
        let hmc = tape.sub(h, g.cand)?;
        let t1 = tape.mul(dz, hmc)?;
        let nz = self.one_minus(tape, g.z)?;
        let t2 = tape.mul(nz, dcand)?;
        let dout = tape.add(t1, t2)?;
        Ok((out, dout))
    }
}

/// Fully connected network with a shared hidden activation and linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::new(&format!("{name}.fc{i}"), dims[i + 1], dims[i], rng))
            .collect();
        Mlp { name: name.to_string(), layers, activation }
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpBound {
        MlpBound {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            activation: self.activation,
        }
    }

    /// Tape-free forward mirroring `MlpBound::forward` exactly.
    pub fn forward_plain(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_plain(&h);
            if i + 1 < self.layers.len() {
                for v in &mut h {
                    *v = self.activation.apply_scalar(*v);
                }
            }
        }
        h
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

pub struct MlpBound {
    pub layers: Vec<LinearBound>,
    pub activation: Activation,
}

impl MlpBound {
    /// Node ids in the same order as `Mlp::params`.
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Hidden layers activated, final layer linear.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }
}

/// Inverted-scaling dropout; identity when not training or p = 0.
pub fn dropout(
    tape: &mut Tape,
    x: NodeId,
    p: f64,
    train: bool,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    debug_assert!((0.0..1.0).contains(&p));
    if !train || p == 0.0 {
        return Ok(x);
    }
    let n = tape.value(x).rows;
    let keep = 1.0 - p;
    let mask: Vec<f64> =
        (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep }).collect();
    let m = tape.constant(Tensor::vector(&mask));
    tape.mul(x, m)
}
