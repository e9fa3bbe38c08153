//! Memoryless component surrogates for compressors and expansion valves.
//!
//! Each model is a small tanh network trained against the closed-form
//! component laws of the synthetic plant over an operating-range grid.
//! Structure carries the physics that is cheap to get exactly right: the
//! valve passes its inlet enthalpy straight through and shuts off without
//! consulting the network when the pressure drop is nonpositive, the
//! compressor predicts specific-work gain rather than raw outlet enthalpy,
//! and both clamp predicted mass flow at zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::checkpoint::WeightBundle;
use crate::nn::optim::{clip_gradients, Adam};
use crate::nn::{Activation, Mlp};
use crate::norm::ChannelStats;
use crate::plant::{CompressorParams, PropertyMap, ValveParams, P_MAX, P_MIN};
use crate::rng;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComponentKind {
    Compressor,
    Valve,
}

/// Closed-form compressor map: volumetric-efficiency mass flow and
/// isentropic-efficiency enthalpy rise at the suction density.
pub fn compressor_law(
    props: &PropertyMap,
    comp: &CompressorParams,
    p_suct: f64,
    p_dis: f64,
    h_in: f64,
    speed: f64,
) -> (f64, f64) {
    let rho = props.eval(p_suct, h_in).rho;
    let mdot = comp.eta_vol * speed * rho * comp.v_disp;
    let h_out = h_in + (p_dis - p_suct) / (rho * comp.eta_isen);
    (mdot, h_out)
}

/// Closed-form valve map: orifice flow from upstream density and pressure
/// drop. Outlet enthalpy equals inlet enthalpy.
pub fn valve_law(
    props: &PropertyMap,
    valve: &ValveParams,
    p_in: f64,
    p_out: f64,
    h_in: f64,
    opening: f64,
) -> f64 {
    let rho = props.eval(p_in, h_in).rho;
    valve.c_v * opening * (rho * (p_in - p_out)).max(0.0).sqrt()
}

/// Training boxes: suction pressure, discharge pressure, inlet enthalpy and
/// actuation for each component, spanning the band the cycle visits with
/// margin on both sides.
const COMP_BOX: [[f64; 2]; 4] =
    [[2.2e5, 1.2e6], [1.2e6, 4.8e6], [3.8e5, 5.3e5], [0.0, 60.0]];
const VALVE_BOX: [[f64; 2]; 4] =
    [[1.4e6, 4.8e6], [2.2e5, 1.0e6], [1.8e5, 3.4e5], [0.0, 1.0]];
const GRID_COUNTS: [usize; 4] = [6, 6, 5, 6];

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn grid_points(bounds: &[[f64; 2]; 4], counts: &[usize; 4], stagger: bool) -> Vec<[f64; 4]> {
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .zip(counts)
        .map(|(b, &n)| {
            let pts = linspace(b[0], b[1], n);
            if stagger {
                pts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
            } else {
                pts
            }
        })
        .collect();
    let mut out = Vec::new();
    for &a in &axes[0] {
        for &b in &axes[1] {
            for &c in &axes[2] {
                for &d in &axes[3] {
                    out.push([a, b, c, d]);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct StaticTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub plateau_patience: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for StaticTrainConfig {
    fn default() -> Self {
        StaticTrainConfig {
            epochs: 200,
            batch_size: 128,
            lr: 2e-3,
            clip_norm: 1.0,
            plateau_patience: 25,
            hidden: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StaticModel {
    pub kind: ComponentKind,
    net: Mlp,
    input_stats: ChannelStats,
    output_stats: ChannelStats,
}

#[derive(Serialize, Deserialize)]
struct StaticMeta {
    kind: ComponentKind,
    input_stats: ChannelStats,
    output_stats: ChannelStats,
    dims: Vec<usize>,
}

/// Minibatch MSE fit on normalized rows. Returns per-epoch mean loss.
fn fit(
    net: &mut Mlp,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    cfg: &StaticTrainConfig,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(&net.params(), cfg.lr);
    let mut tape = Tape::new();
    let mut rng = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut stall = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            tape.reset();
            let bound = net.bind(&mut tape);
            let mut total = None;
            for &i in chunk {
                let x = tape.constant(Tensor::vector(&xs[i]));
                let t = tape.constant(Tensor::vector(&ys[i]));
                let y = bound.forward(&mut tape, x)?;
                let l = tape.mse(y, t)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let root = tape.scale(total.unwrap(), 1.0 / chunk.len() as f64)?;
            epoch_loss += tape.value(root).scalar_value();
            batches += 1;
            let grads = tape.backward(root)?;
            let mut gvec: Vec<Tensor> =
                bound.param_ids().iter().map(|&id| grads.get(id)).collect();
            clip_gradients(&mut gvec, cfg.clip_norm);
            let mut pm = net.params_mut();
            adam.step(&mut pm, &gvec)?;
        }
        let mean = epoch_loss / batches as f64;
        losses.push(mean);
        if mean < best * (1.0 - 1e-4) {
            best = mean;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.plateau_patience {
                adam.lr *= 0.5;
                stall = 0;
            }
        }
    }
    Ok(losses)
}

fn build_model(
    kind: ComponentKind,
    inputs: Vec<[f64; 4]>,
    targets: Vec<Vec<f64>>,
    out_dim: usize,
    cfg: &StaticTrainConfig,
) -> Result<StaticModel> {
    let input_stats = ChannelStats::from_rows(inputs.iter().map(|r| &r[..]), 4)?;
    let output_stats =
        ChannelStats::from_rows(targets.iter().map(|r| &r[..]), out_dim)?;
    let xs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|r| {
            let mut out = vec![0.0; 4];
            input_stats.normalize_row(r, &mut out);
            out
        })
        .collect();
    let ys: Vec<Vec<f64>> = targets
        .iter()
        .map(|r| {
            let mut out = vec![0.0; out_dim];
            output_stats.normalize_row(r, &mut out);
            out
        })
        .collect();
    let name = match kind {
        ComponentKind::Compressor => "compressor",
        ComponentKind::Valve => "valve",
    };
    let mut net = Mlp::new(
        name,
        &[4, cfg.hidden, cfg.hidden, out_dim],
        Activation::Tanh,
        &mut rng::seeded(cfg.seed),
    );
    fit(&mut net, &xs, &ys, cfg)?;
    Ok(StaticModel { kind, net, input_stats, output_stats })
}

pub fn train_compressor(
    props: &PropertyMap,
    comp: &CompressorParams,
    cfg: &StaticTrainConfig,
) -> Result<StaticModel> {
    let inputs = grid_points(&COMP_BOX, &GRID_COUNTS, false);
    let targets: Vec<Vec<f64>> = inputs
        .iter()
        .map(|&[ps, pd, h, w]| {
            let (mdot, h_out) = compressor_law(props, comp, ps, pd, h, w);
            vec![mdot, h_out - h]
        })
        .collect();
    build_model(ComponentKind::Compressor, inputs, targets, 2, cfg)
}

pub fn train_valve(
    props: &PropertyMap,
    valve: &ValveParams,
    cfg: &StaticTrainConfig,
) -> Result<StaticModel> {
    let inputs = grid_points(&VALVE_BOX, &GRID_COUNTS, false);
    let targets: Vec<Vec<f64>> = inputs
        .iter()
        .map(|&[pi, po, h, u]| vec![valve_law(props, valve, pi, po, h, u)])
        .collect();
    build_model(ComponentKind::Valve, inputs, targets, 1, cfg)
}

fn check_envelope(p: f64) -> Result<()> {
    if !(P_MIN..=P_MAX).contains(&p) {
        return Err(Error::Envelope { p, lo: P_MIN, hi: P_MAX });
    }
    Ok(())
}

impl StaticModel {
    fn predict(&self, input: &[f64; 4]) -> Vec<f64> {
        let mut x = vec![0.0; 4];
        self.input_stats.normalize_row(input, &mut x);
        let y = self.net.forward_plain(&x);
        let mut out = vec![0.0; y.len()];
        self.output_stats.denormalize_row(&y, &mut out);
        out
    }

    /// Mass flow and outlet enthalpy for one compressor. The network predicts
    /// the enthalpy rise; flow and rise are clamped nonnegative.
    pub fn compressor_eval(
        &self,
        p_suct: f64,
        p_dis: f64,
        h_in: f64,
        speed: f64,
    ) -> Result<(f64, f64)> {
        if self.kind != ComponentKind::Compressor {
            return Err(Error::contract("compressor_eval on a non-compressor model"));
        }
        check_envelope(p_suct)?;
        check_envelope(p_dis)?;
        let out = self.predict(&[p_suct, p_dis, h_in, speed.max(0.0)]);
        Ok((out[0].max(0.0), h_in + out[1].max(0.0)))
    }

    /// Mass flow through one valve; isenthalpic, so the outlet enthalpy is
    /// the inlet enthalpy by construction. Zero flow when closed or when the
    /// pressure drop is nonpositive, without consulting the network.
    pub fn valve_eval(&self, p_in: f64, p_out: f64, h_in: f64, opening: f64) -> (f64, f64) {
        debug_assert_eq!(self.kind, ComponentKind::Valve);
        let u = opening.clamp(0.0, 1.0);
        if p_in <= p_out || u == 0.0 {
            return (0.0, h_in);
        }
        let out = self.predict(&[p_in, p_out, h_in, u]);
        (out[0].max(0.0), h_in)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let dims: Vec<usize> = std::iter::once(self.net.layers[0].w.cols)
            .chain(self.net.layers.iter().map(|l| l.w.rows))
            .collect();
        let meta = StaticMeta {
            kind: self.kind,
            input_stats: self.input_stats.clone(),
            output_stats: self.output_stats.clone(),
            dims,
        };
        let mut bundle = WeightBundle::new(serde_json::to_value(meta)?);
        for (i, layer) in self.net.layers.iter().enumerate() {
            bundle.push(&format!("fc{i}.w"), &layer.w);
            bundle.push(&format!("fc{i}.b"), &layer.b);
        }
        bundle.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bundle = WeightBundle::load(path)?;
        let meta: StaticMeta = serde_json::from_value(bundle.meta.clone())?;
        let name = match meta.kind {
            ComponentKind::Compressor => "compressor",
            ComponentKind::Valve => "valve",
        };
        let mut net = Mlp::new(name, &meta.dims, Activation::Tanh, &mut rng::seeded(0));
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let w = bundle.tensor(&format!("fc{i}.w"))?;
            let b = bundle.tensor(&format!("fc{i}.b"))?;
            if w.rows != layer.w.rows || w.cols != layer.w.cols {
                return Err(Error::contract("checkpoint layer shape mismatch"));
            }
            layer.w = w.clone();
            layer.b = b.clone();
        }
        Ok(StaticModel {
            kind: meta.kind,
            net,
            input_stats: meta.input_stats,
            output_stats: meta.output_stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn props() -> PropertyMap {
        PropertyMap::default()
    }

    fn compressor() -> &'static StaticModel {
        static MODEL: OnceLock<StaticModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            train_compressor(
                &props(),
                &CompressorParams::default(),
                &StaticTrainConfig::default(),
            )
            .unwrap()
        })
    }

    fn valve() -> &'static StaticModel {
        static MODEL: OnceLock<StaticModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            train_valve(&props(), &ValveParams::default(), &StaticTrainConfig::default())
                .unwrap()
        })
    }

    #[test]
    fn component_laws_match_hand_arithmetic() {
        // rho(5e5, 4.6e5) = 80 - 11 - 42 = 27
        let (mdot, h_out) =
            compressor_law(&props(), &CompressorParams::default(), 5e5, 2.5e6, 4.6e5, 50.0);
        assert!((mdot - 0.01242).abs() < 1e-12);
        assert!((h_out - (4.6e5 + 2.0e6 / (27.0 * 0.75))).abs() < 1e-9);

        // rho(2.5e6, 2.6e5) = 80 + 33 - 2 = 111
        let m = valve_law(&props(), &ValveParams::default(), 2.5e6, 5e5, 2.6e5, 0.6);
        let expect = 9e-6 * 0.6 * (111.0f64 * 2.0e6).sqrt();
        assert!((m - expect).abs() < 1e-12);
    }

    #[test]
    fn compressor_surrogate_tracks_the_law() {
        let model = compressor();
        let held = grid_points(&COMP_BOX, &GRID_COUNTS, true);
        let mut err_sum = 0.0;
        for &[ps, pd, h, w] in &held {
            let (m_ref, h_ref) =
                compressor_law(&props(), &CompressorParams::default(), ps, pd, h, w);
            let (m, ho) = model.compressor_eval(ps, pd, h, w).unwrap();
            let m_floor = 1e-3 * model.output_stats.span(0);
            let dh_floor = 1e-3 * model.output_stats.span(1);
            err_sum += (m - m_ref).abs() / m_ref.abs().max(m_floor);
            err_sum += (ho - h_ref).abs() / (h_ref - h).abs().max(dh_floor);
        }
        let mape = 100.0 * err_sum / (2 * held.len()) as f64;
        assert!(mape < 5.0, "held-out MAPE {mape:.2}% too high");
    }

    #[test]
    fn compressor_idles_at_zero_speed_and_grows_with_speed() {
        let model = compressor();
        let (m0, _) = model.compressor_eval(5e5, 2.5e6, 4.6e5, 0.0).unwrap();
        assert!(m0 < 1e-4, "idle flow {m0}");
        let mut prev = -1.0;
        for k in 0..10 {
            let speed = 6.0 * k as f64;
            let (m, h_out) = model.compressor_eval(5e5, 2.5e6, 4.6e5, speed).unwrap();
            assert!(m >= prev, "flow not monotone at speed {speed}");
            assert!(h_out >= 4.6e5);
            prev = m;
        }
    }

    #[test]
    fn compressor_rejects_out_of_envelope_pressure() {
        let model = compressor();
        assert!(matches!(
            model.compressor_eval(1e4, 2.5e6, 4.6e5, 50.0),
            Err(Error::Envelope { .. })
        ));
    }

    #[test]
    fn valve_surrogate_tracks_the_law_and_stays_isenthalpic() {
        let model = valve();
        let m_ref = valve_law(&props(), &ValveParams::default(), 2.5e6, 5e5, 2.6e5, 0.6);
        let (m, h_out) = model.valve_eval(2.5e6, 5e5, 2.6e5, 0.6);
        assert!((m - m_ref).abs() / m_ref < 0.05, "valve error {m} vs {m_ref}");
        assert_eq!(h_out, 2.6e5);

        let held = grid_points(&VALVE_BOX, &GRID_COUNTS, true);
        let floor = 1e-3 * model.output_stats.span(0);
        let mut err_sum = 0.0;
        for &[pi, po, h, u] in &held {
            let r = valve_law(&props(), &ValveParams::default(), pi, po, h, u);
            let (m, _) = model.valve_eval(pi, po, h, u);
            err_sum += (m - r).abs() / r.abs().max(floor);
        }
        let mape = 100.0 * err_sum / held.len() as f64;
        assert!(mape < 5.0, "held-out MAPE {mape:.2}% too high");
    }

    #[test]
    fn valve_shuts_off_without_drive() {
        let model = valve();
        assert_eq!(model.valve_eval(2.5e6, 5e5, 2.6e5, 0.0), (0.0, 2.6e5));
        assert_eq!(model.valve_eval(5e5, 5e5, 2.6e5, 0.7), (0.0, 2.6e5));
        assert_eq!(model.valve_eval(4e5, 5e5, 2.6e5, 0.7), (0.0, 2.6e5));
    }

    #[test]
    fn checkpoint_round_trips_and_kind_is_enforced() {
        let model = compressor();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("comp.json");
        model.save(&path).unwrap();
        let back = StaticModel::load(&path).unwrap();
        let a = model.compressor_eval(6e5, 2.2e6, 4.5e5, 40.0).unwrap();
        let b = back.compressor_eval(6e5, 2.2e6, 4.5e5, 40.0).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            valve().compressor_eval(5e5, 2.5e6, 4.6e5, 50.0),
            Err(Error::Contract(_))
        ));
    }
}
