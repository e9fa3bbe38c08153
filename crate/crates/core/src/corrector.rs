//! Output-bias corrector for the mass and energy channels of the two
//! condenser surrogates.
//!
//! A three-layer sigmoid network reads the concatenated normalized inputs
//! and outputs of both condensers and emits a bounded additive correction
//! for the four channels (E1, E2, M1, M2), trained against benchmark
//! trajectories over a fixed segment. At deployment the raw corrections are
//! smoothed by Gaussian-process regression over a sliding time window and
//! then an exponential moving average, and a range gate drops any step
//! whose corrected values would leave the normalized band.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::checkpoint::WeightBundle;
use crate::nn::optim::{clip_gradients, Adam};
use crate::nn::{Activation, Mlp};
use crate::rng;
use nalgebra::{Cholesky, DMatrix, DVector};

/// Channels corrected per step: condenser energies then masses.
pub const N_CORR: usize = 4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GpConfig {
    pub amplitude: f64,
    /// Kernel length scale in seconds.
    pub length_scale: f64,
    pub noise_var: f64,
    pub jitter: f64,
    /// Most recent points used per online solve.
    pub window: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            amplitude: 1.0,
            length_scale: 2000.0,
            noise_var: 0.3,
            jitter: 1e-10,
            window: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorConfig {
    /// First benchmark step of the training segment.
    pub segment_start: usize,
    pub segment_len: usize,
    pub d_in: usize,
    pub hidden: usize,
    /// Half-width of the output bound.
    pub scale: f64,
    pub lr: f64,
    pub epochs: usize,
    pub gp: GpConfig,
    pub ema_alpha: f64,
    pub seed: u64,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        CorrectorConfig {
            segment_start: 950,
            segment_len: 850,
            d_in: 34,
            hidden: 64,
            scale: 0.2,
            lr: 1e-3,
            epochs: 50_000,
            gp: GpConfig::default(),
            ema_alpha: 0.95,
            seed: 0,
        }
    }
}

/// One collected step: corrector input plus predicted and benchmark values
/// of the corrected channels, all normalized.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub z_in: Vec<f64>,
    pub m_pred: [f64; N_CORR],
    pub m_bench: [f64; N_CORR],
}

/// One deployed step, kept for parity reporting.
#[derive(Debug, Clone)]
pub struct CorrectionRecord {
    pub t: f64,
    pub m_pred: [f64; N_CORR],
    pub m_bench: [f64; N_CORR],
    pub m_corr: [f64; N_CORR],
    pub phi_raw: [f64; N_CORR],
    pub phi_gp: [f64; N_CORR],
    pub phi_smooth: [f64; N_CORR],
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct Corrector {
    net: Mlp,
    pub scale: f64,
    pub d_in: usize,
}

#[derive(Serialize, Deserialize)]
struct CorrectorMeta {
    d_in: usize,
    dims: Vec<usize>,
    scale: f64,
}

impl Corrector {
    pub fn new(d_in: usize, hidden: usize, scale: f64, seed: u64) -> Self {
        let net = Mlp::new(
            "corrector",
            &[d_in, hidden, hidden, N_CORR],
            Activation::Sigmoid,
            &mut rng::seeded(seed),
        );
        Corrector { net, scale, d_in }
    }

    pub fn forward(&self, z_in: &[f64]) -> Result<[f64; N_CORR]> {
        if z_in.len() != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "corrector_forward",
                detail: format!("input length {} expected {}", z_in.len(), self.d_in),
            });
        }
        let y = self.net.forward_plain(z_in);
        let mut out = [0.0; N_CORR];
        for (o, v) in out.iter_mut().zip(&y) {
            *o = self.scale * v.tanh();
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let dims: Vec<usize> = std::iter::once(self.net.layers[0].w.cols)
            .chain(self.net.layers.iter().map(|l| l.w.rows))
            .collect();
        let meta = CorrectorMeta { d_in: self.d_in, dims, scale: self.scale };
        let mut bundle = WeightBundle::new(serde_json::to_value(meta)?);
        for (i, layer) in self.net.layers.iter().enumerate() {
            bundle.push(&format!("fc{i}.w"), &layer.w);
            bundle.push(&format!("fc{i}.b"), &layer.b);
        }
        bundle.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bundle = WeightBundle::load(path)?;
        let meta: CorrectorMeta = serde_json::from_value(bundle.meta.clone())?;
        let mut net =
            Mlp::new("corrector", &meta.dims, Activation::Sigmoid, &mut rng::seeded(0));
        for (i, layer) in net.layers.iter_mut().enumerate() {
            layer.w = bundle.tensor(&format!("fc{i}.w"))?.clone();
            layer.b = bundle.tensor(&format!("fc{i}.b"))?.clone();
        }
        Ok(Corrector { net, scale: meta.scale, d_in: meta.d_in })
    }
}

/// Fits the corrector so that pred + phi matches bench in the least-squares
/// sense: the loss is the mean over records of the squared 4-vector error.
/// Full-batch Adam, one step per epoch. Returns the per-epoch loss curve.
pub fn train_corrector(
    pairs: &[TrainingPair],
    cfg: &CorrectorConfig,
) -> Result<(Corrector, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Training("no corrector training pairs".into()));
    }
    for p in pairs {
        if p.z_in.len() != cfg.d_in {
            return Err(Error::contract("training pair input width differs from d_in"));
        }
    }
    let mut model = Corrector::new(cfg.d_in, cfg.hidden, cfg.scale, cfg.seed);
    let mut adam = Adam::new(&model.net.params(), cfg.lr);
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let offsets: Vec<Tensor> = pairs
        .iter()
        .map(|p| {
            let d: Vec<f64> =
                p.m_pred.iter().zip(&p.m_bench).map(|(a, b)| a - b).collect();
            Tensor::vector(&d)
        })
        .collect();
    for _ in 0..cfg.epochs {
        tape.reset();
        let bound = model.net.bind(&mut tape);
        let mut total = None;
        for (p, off) in pairs.iter().zip(&offsets) {
            let z = tape.constant(Tensor::vector(&p.z_in));
            let pre = bound.forward(&mut tape, z)?;
            let phi = tape.constrain_tanh(pre, model.scale)?;
            let c = tape.constant(off.clone());
            let diff = tape.add(phi, c)?;
            let sq = tape.square(diff)?;
            let s = tape.sum(sq)?;
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        let root = tape.scale(total.unwrap(), 1.0 / pairs.len() as f64)?;
        let loss = tape.value(root).scalar_value();
        if !loss.is_finite() {
            return Err(Error::Training("corrector loss diverged".into()));
        }
        losses.push(loss);
        let grads = tape.backward(root)?;
        let mut gvec: Vec<Tensor> =
            bound.param_ids().iter().map(|&id| grads.get(id)).collect();
        clip_gradients(&mut gvec, 1.0);
        let mut pm = model.net.params_mut();
        adam.step(&mut pm, &gvec)?;
    }
    Ok((model, losses))
}

fn rbf(cfg: &GpConfig, a: f64, b: f64) -> f64 {
    let d = (a - b) / cfg.length_scale;
    cfg.amplitude * (-0.5 * d * d).exp()
}

/// Posterior mean of a zero-mean GP over the centered series, evaluated at
/// the observed times with the noise-free kernel. The series mean is removed
/// before the solve and restored after.
pub fn gp_smooth(times: &[f64], values: &[f64], cfg: &GpConfig) -> Result<Vec<f64>> {
    if times.len() < 2 || times.len() != values.len() {
        return Err(Error::contract("gp_smooth needs at least two aligned points"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("gp_smooth times must strictly increase"));
    }
    let n = times.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let k = DMatrix::from_fn(n, n, |i, j| {
        let noise = if i == j { cfg.noise_var + cfg.jitter } else { 0.0 };
        rbf(cfg, times[i], times[j]) + noise
    });
    let chol = Cholesky::new(k)
        .ok_or_else(|| Error::Solve("gp gram matrix not positive definite".into()))?;
    let y = DVector::from_iterator(n, values.iter().map(|v| v - mean));
    let alpha = chol.solve(&y);
    Ok((0..n)
        .map(|i| {
            let dot: f64 =
                (0..n).map(|j| rbf(cfg, times[i], times[j]) * alpha[j]).sum();
            dot + mean
        })
        .collect())
}

/// Online form of [`gp_smooth`]: each pushed sample is smoothed against the
/// most recent window, with one Cholesky factor shared by all channels.
#[derive(Debug, Clone)]
pub struct GpSmoother {
    cfg: GpConfig,
    times: Vec<f64>,
    values: Vec<[f64; N_CORR]>,
}

impl GpSmoother {
    pub fn new(cfg: GpConfig) -> Self {
        GpSmoother { cfg, times: Vec::new(), values: Vec::new() }
    }

    pub fn push(&mut self, t: f64, y: [f64; N_CORR]) -> Result<[f64; N_CORR]> {
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(Error::contract("gp smoother times must strictly increase"));
            }
        }
        self.times.push(t);
        self.values.push(y);
        let lo = self.times.len().saturating_sub(self.cfg.window);
        let times = &self.times[lo..];
        let values = &self.values[lo..];
        let n = times.len();
        if n == 1 {
            return Ok(y);
        }
        let k = DMatrix::from_fn(n, n, |i, j| {
            let noise = if i == j { self.cfg.noise_var + self.cfg.jitter } else { 0.0 };
            rbf(&self.cfg, times[i], times[j]) + noise
        });
        let chol = Cholesky::new(k)
            .ok_or_else(|| Error::Solve("gp gram matrix not positive definite".into()))?;
        let kstar =
            DVector::from_iterator(n, times.iter().map(|&tj| rbf(&self.cfg, t, tj)));
        let mut out = [0.0; N_CORR];
        for c in 0..N_CORR {
            let mean = values.iter().map(|v| v[c]).sum::<f64>() / n as f64;
            let yv = DVector::from_iterator(n, values.iter().map(|v| v[c] - mean));
            let alpha = chol.solve(&yv);
            out[c] = kstar.dot(&alpha) + mean;
        }
        Ok(out)
    }
}

/// First-order low pass: s_0 = x_0, then s_t = alpha s_{t-1} + (1-alpha) x_t.
pub fn ema(series: &[f64], alpha: f64) -> Vec<f64> {
    debug_assert!((0.0..1.0).contains(&alpha) && alpha > 0.0);
    let mut out = Vec::with_capacity(series.len());
    let mut s = match series.first() {
        Some(&x) => x,
        None => return out,
    };
    out.push(s);
    for &x in &series[1..] {
        s = alpha * s + (1.0 - alpha) * x;
        out.push(s);
    }
    out
}

/// Streaming counterpart of [`ema`] over the four corrected channels.
#[derive(Debug, Clone)]
pub struct EmaState {
    alpha: f64,
    s: Option<[f64; N_CORR]>,
}

impl EmaState {
    pub fn new(alpha: f64) -> Self {
        debug_assert!(alpha > 0.0 && alpha < 1.0);
        EmaState { alpha, s: None }
    }

    pub fn push(&mut self, x: [f64; N_CORR]) -> [f64; N_CORR] {
        let next = match self.s {
            None => x,
            Some(prev) => {
                let mut out = [0.0; N_CORR];
                for c in 0..N_CORR {
                    out[c] = self.alpha * prev[c] + (1.0 - self.alpha) * x[c];
                }
                out
            }
        };
        self.s = Some(next);
        next
    }
}

/// Adds the smoothed correction unless any corrected entry would leave the
/// normalized band, in which case the prediction passes through untouched.
pub fn apply_correction(
    m_pred: &[f64; N_CORR],
    phi: &[f64; N_CORR],
) -> ([f64; N_CORR], bool) {
    let mut out = [0.0; N_CORR];
    for c in 0..N_CORR {
        out[c] = m_pred[c] + phi[c];
        if !(-1.0..=1.0).contains(&out[c]) {
            return (*m_pred, true);
        }
    }
    (out, false)
}

/// Deployment pipeline in its fixed order: network, GP window smoothing,
/// EMA, range gate.
#[derive(Debug, Clone)]
pub struct CorrectorRuntime {
    pub model: Corrector,
    gp: GpSmoother,
    ema: EmaState,
}

pub struct CorrectionStep {
    pub phi_raw: [f64; N_CORR],
    pub phi_gp: [f64; N_CORR],
    pub phi_smooth: [f64; N_CORR],
    pub m_corr: [f64; N_CORR],
    pub skipped: bool,
}

impl CorrectorRuntime {
    pub fn new(model: Corrector, gp: GpConfig, ema_alpha: f64) -> Self {
        CorrectorRuntime { model, gp: GpSmoother::new(gp), ema: EmaState::new(ema_alpha) }
    }

    pub fn step(
        &mut self,
        t: f64,
        z_in: &[f64],
        m_pred: &[f64; N_CORR],
    ) -> Result<CorrectionStep> {
        let phi_raw = self.model.forward(z_in)?;
        let phi_gp = self.gp.push(t, phi_raw)?;
        let phi_smooth = self.ema.push(phi_gp);
        let (m_corr, skipped) = apply_correction(m_pred, &phi_smooth);
        Ok(CorrectionStep { phi_raw, phi_gp, phi_smooth, m_corr, skipped })
    }
}

/// Parity-plot export: one row per step, per-channel prediction, benchmark,
/// corrected value and the three correction stages.
pub fn save_records(path: &std::path::Path, records: &[CorrectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "skipped".to_string()];
    for ch in ["e1", "e2", "m1", "m2"] {
        for part in ["pred", "bench", "corr", "phi_raw", "phi_gp", "phi_smooth"] {
            header.push(format!("{ch}_{part}"));
        }
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![format!("{:.10e}", r.t), (r.skipped as u8).to_string()];
        for c in 0..N_CORR {
            for v in [r.m_pred[c], r.m_bench[c], r.m_corr[c], r.phi_raw[c], r.phi_gp[c], r.phi_smooth[c]]
            {
                row.push(format!("{v:.10e}"));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn total_variation(xs: &[f64]) -> f64 {
        xs.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
    }

    #[test]
    fn zeroed_network_outputs_exactly_zero_and_stays_bounded() {
        let mut model = Corrector::new(6, 8, 0.2, 3);
        for layer in &mut model.net.layers {
            layer.w.data.iter_mut().for_each(|v| *v = 0.0);
            layer.b.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let z = vec![0.4; 6];
        assert_eq!(model.forward(&z).unwrap(), [0.0; N_CORR]);

        let wild = Corrector::new(6, 8, 0.2, 9);
        let mut rng = rng::seeded(7);
        for _ in 0..50 {
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-50.0..50.0)).collect();
            for v in wild.forward(&z).unwrap() {
                assert!(v.abs() <= 0.2);
            }
        }
    }

    #[test]
    fn forward_matches_straight_line_arithmetic() {
        let model = Corrector::new(5, 7, 0.2, 11);
        let z: Vec<f64> = (0..5).map(|i| 0.1 * i as f64 - 0.2).collect();
        let mut h = DVector::from_vec(z.clone());
        for (i, layer) in model.net.layers.iter().enumerate() {
            let w = DMatrix::from_row_slice(layer.w.rows, layer.w.cols, &layer.w.data);
            let b = DVector::from_vec(layer.b.data.clone());
            h = w * h + b;
            if i + 1 < model.net.layers.len() {
                h.apply(|v| *v = 1.0 / (1.0 + (-*v).exp()));
            }
        }
        let expect: Vec<f64> = h.iter().map(|v| 0.2 * v.tanh()).collect();
        let got = model.forward(&z).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-10);
        }

        assert!(model.forward(&[0.0; 4]).is_err());
    }

    fn bias_pairs(bias: [f64; N_CORR], n: usize) -> Vec<TrainingPair> {
        let mut rng = rng::seeded(21);
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let pred: [f64; N_CORR] =
                    std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
                let bench = std::array::from_fn(|c| pred[c] + bias[c]);
                TrainingPair { z_in: z, m_pred: pred, m_bench: bench }
            })
            .collect()
    }

    fn quick_cfg(epochs: usize) -> CorrectorConfig {
        CorrectorConfig {
            d_in: 6,
            hidden: 16,
            epochs,
            lr: 1e-2,
            seed: 4,
            ..CorrectorConfig::default()
        }
    }

    #[test]
    fn learns_a_constant_bias() {
        let pairs = bias_pairs([0.1, -0.05, 0.08, 0.02], 40);
        let (model, losses) = train_corrector(&pairs, &quick_cfg(600)).unwrap();
        assert!(losses.last().unwrap() < &1e-4, "final loss {}", losses.last().unwrap());
        assert!(losses.last().unwrap() <= &losses[0]);
        let phi = model.forward(&pairs[0].z_in).unwrap();
        assert!((phi[0] - 0.1).abs() < 0.02, "phi {phi:?}");
    }

    #[test]
    fn loss_decreases_strictly_over_early_epochs_at_the_default_rate() {
        let pairs = bias_pairs([0.1, -0.05, 0.08, 0.02], 40);
        let cfg = CorrectorConfig { lr: 1e-3, epochs: 100, ..quick_cfg(100) };
        let (_, losses) = train_corrector(&pairs, &cfg).unwrap();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss not strictly decreasing: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn perfect_predictor_trains_to_negligible_corrections() {
        let pairs = bias_pairs([0.0; N_CORR], 40);
        let (model, _) = train_corrector(&pairs, &quick_cfg(2000)).unwrap();
        for p in &pairs {
            for v in model.forward(&p.z_in).unwrap() {
                assert!(v.abs() < 1e-3, "residual correction {v}");
            }
        }
    }

    #[test]
    fn gp_reproduces_constant_series_and_shrinks_isolated_points() {
        let cfg = GpConfig::default();
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 10.0).collect();
        let constant = vec![0.7; 20];
        for v in gp_smooth(&times, &constant, &cfg).unwrap() {
            assert!((v - 0.7).abs() < 1e-6);
        }

        // Points much farther apart than the length scale act as two
        // independent one-point problems on the centered series.
        let out = gp_smooth(&[0.0, 1.0e6], &[1.0, -1.0], &cfg).unwrap();
        let shrink = 1.0 / (1.0 + 0.3);
        assert!((out[0] - shrink).abs() < 1e-9, "got {}", out[0]);
        assert!((out[1] + shrink).abs() < 1e-9, "got {}", out[1]);
    }

    #[test]
    fn gp_does_not_increase_total_variation() {
        let cfg = GpConfig { length_scale: 50.0, ..GpConfig::default() };
        let mut rng = rng::seeded(13);
        let times: Vec<f64> = (0..120).map(|i| i as f64).collect();
        let noisy: Vec<f64> = times
            .iter()
            .map(|t| (t * 0.05).sin() + rng.gen_range(-0.3..0.3))
            .collect();
        let smooth = gp_smooth(&times, &noisy, &cfg).unwrap();
        assert!(total_variation(&smooth) < total_variation(&noisy));
    }

    #[test]
    fn gp_rejects_degenerate_inputs() {
        let cfg = GpConfig::default();
        assert!(gp_smooth(&[0.0], &[1.0], &cfg).is_err());
        assert!(gp_smooth(&[0.0, 0.0], &[1.0, 2.0], &cfg).is_err());
    }

    #[test]
    fn online_smoother_matches_the_batch_form_at_the_newest_point() {
        let cfg = GpConfig { length_scale: 30.0, ..GpConfig::default() };
        let mut rng = rng::seeded(17);
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 2.0).collect();
        let series: Vec<f64> = times.iter().map(|t| (t * 0.1).cos() + rng.gen_range(-0.1..0.1)).collect();
        let mut online = GpSmoother::new(cfg);
        let mut last = [0.0; N_CORR];
        for (&t, &v) in times.iter().zip(&series) {
            last = online.push(t, [v, 0.0, 0.0, 0.0]).unwrap();
        }
        let batch = gp_smooth(&times, &series, &cfg).unwrap();
        assert!((last[0] - batch.last().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn ema_matches_the_recurrence_closed_forms() {
        assert_eq!(ema(&[0.4, 0.4, 0.4], 0.95), vec![0.4, 0.4, 0.4]);

        let step = ema(&[0.0, 1.0], 0.95);
        assert!((step[1] - 0.05).abs() < 1e-15);

        let mut series = vec![0.0];
        series.extend(std::iter::repeat(1.0).take(50));
        let out = ema(&series, 0.95);
        for (t, v) in out.iter().enumerate().skip(1) {
            let expect = 1.0 - 0.95f64.powi(t as i32);
            assert!((v - expect).abs() < 1e-12, "t={t}");
        }

        let mut state = EmaState::new(0.95);
        assert_eq!(state.push([0.0; 4]), [0.0; 4]);
        let s1 = state.push([1.0, 0.0, 0.0, 0.0]);
        assert!((s1[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn gate_applies_in_range_and_skips_out_of_range() {
        let (same, skipped) = apply_correction(&[0.3, 0.0, -0.2, 0.9], &[0.0; 4]);
        assert_eq!(same, [0.3, 0.0, -0.2, 0.9]);
        assert!(!skipped);

        let (kept, skipped) =
            apply_correction(&[0.95, 0.0, 0.0, 0.0], &[0.1, 0.0, 0.0, 0.0]);
        assert_eq!(kept, [0.95, 0.0, 0.0, 0.0]);
        assert!(skipped);

        let (ok, skipped) =
            apply_correction(&[0.5, -0.5, 0.0, 0.0], &[0.1, 0.1, -0.1, 0.0]);
        assert_eq!(ok, [0.6, -0.4, -0.1, 0.0]);
        assert!(!skipped);
    }

    #[test]
    fn checkpoint_round_trips() {
        let model = Corrector::new(10, 12, 0.2, 23);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corr.json");
        model.save(&path).unwrap();
        let back = Corrector::load(&path).unwrap();
        let z: Vec<f64> = (0..10).map(|i| 0.05 * i as f64).collect();
        assert_eq!(model.forward(&z).unwrap(), back.forward(&z).unwrap());
    }

    #[test]
    fn record_csv_has_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.csv");
        let rec = CorrectionRecord {
            t: 1.0,
            m_pred: [0.1; 4],
            m_bench: [0.2; 4],
            m_corr: [0.15; 4],
            phi_raw: [0.05; 4],
            phi_gp: [0.05; 4],
            phi_smooth: [0.05; 4],
            skipped: false,
        };
        save_records(&path, &[rec.clone(), rec]).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        assert_eq!(r.headers().unwrap().len(), 2 + 24);
        assert_eq!(r.records().count(), 2);
    }
}
