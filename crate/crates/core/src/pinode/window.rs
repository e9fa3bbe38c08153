//! Slicing normalized training windows out of oracle datasets.

use super::{ModelConfig, STORAGE_CHANNEL};
use crate::error::{Error, Result};
use crate::plant::{Dataset, HxKind, N_INPUTS, N_OUTPUTS};

/// One supervised sample. All values are normalized; `true_rates` carry the
/// recorded boundary rates of the two storage channels converted to
/// normalized units per second.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    pub enc_inputs: Vec<Vec<f64>>,
    pub forcing: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub true_rates: Vec<Vec<f64>>,
    pub dt: f64,
}

/// Every admissible window with the given anchor stride, pooled over all
/// exchanger instances of the requested role.
pub fn make_windows(
    ds: &Dataset,
    kind: HxKind,
    cfg: &ModelConfig,
    stride: usize,
) -> Result<Vec<TrainingWindow>> {
    if stride == 0 {
        return Err(Error::contract("window stride must be positive"));
    }
    let in_stats = ds.input_stats(kind);
    let out_stats = ds.output_stats(kind);
    let rate_m = out_stats.rate_scale(STORAGE_CHANNEL);
    let rate_e = out_stats.rate_scale(STORAGE_CHANNEL + 1);
    let total = cfg.enc_window + cfg.dec_window;

    let mut windows = Vec::new();
    for table in ds.tables_of(kind) {
        if table.len() < total {
            continue;
        }
        let mut anchor = 0;
        while anchor + total <= table.len() {
            let mut enc_inputs = Vec::with_capacity(cfg.enc_window);
            for t in anchor..anchor + cfg.enc_window {
                let mut row = vec![0.0; N_INPUTS + 2];
                in_stats.normalize_row(&table.inputs[t], &mut row[..N_INPUTS]);
                row[N_INPUTS] = out_stats
                    .normalize_value(STORAGE_CHANNEL, table.outputs[t][STORAGE_CHANNEL]);
                row[N_INPUTS + 1] = out_stats
                    .normalize_value(STORAGE_CHANNEL + 1, table.outputs[t][STORAGE_CHANNEL + 1]);
                enc_inputs.push(row);
            }
            let dec_range = anchor + cfg.enc_window..anchor + total;
            let mut forcing = Vec::with_capacity(cfg.dec_window);
            let mut targets = Vec::with_capacity(cfg.dec_window);
            let mut true_rates = Vec::with_capacity(cfg.dec_window);
            for t in dec_range {
                let mut f = vec![0.0; N_INPUTS];
                in_stats.normalize_row(&table.inputs[t], &mut f);
                forcing.push(f);
                let mut y = vec![0.0; N_OUTPUTS];
                out_stats.normalize_row(&table.outputs[t], &mut y);
                targets.push(y);
                true_rates.push(vec![
                    table.mass_rate[t] * rate_m,
                    table.energy_rate[t] * rate_e,
                ]);
            }
            windows.push(TrainingWindow { enc_inputs, forcing, targets, true_rates, dt: ds.dt });
            anchor += stride;
        }
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{
        generate_dataset, generate_profile, nominal_initial_state, PlantConfig, ProfileSpec,
    };

    fn dataset() -> Dataset {
        let cfg = PlantConfig::default();
        let spec = ProfileSpec { steps: 200, ..ProfileSpec::default() };
        let profile = generate_profile(&spec, 31);
        generate_dataset(&cfg, &profile, &nominal_initial_state(&cfg), 200).unwrap()
    }

    #[test]
    fn window_count_and_shapes() {
        let ds = dataset();
        let cfg = ModelConfig::default();
        let wins = make_windows(&ds, HxKind::Condenser, &cfg, 10).unwrap();
        // two condenser tables, each (200 - 30)/10 + 1 = 18 anchors
        assert_eq!(wins.len(), 36);
        let w = &wins[0];
        assert_eq!(w.enc_inputs.len(), cfg.enc_window);
        assert_eq!(w.enc_inputs[0].len(), N_INPUTS + 2);
        assert_eq!(w.forcing.len(), cfg.dec_window);
        assert_eq!(w.targets[0].len(), N_OUTPUTS);
        assert_eq!(w.true_rates[0].len(), 2);
    }

    #[test]
    fn normalized_values_stay_in_unit_band() {
        let ds = dataset();
        let cfg = ModelConfig::default();
        for kind in [HxKind::Condenser, HxKind::Evaporator] {
            let wins = make_windows(&ds, kind, &cfg, 7).unwrap();
            assert!(!wins.is_empty());
            for w in &wins {
                for row in w.enc_inputs.iter().chain(&w.forcing).chain(&w.targets) {
                    assert!(row.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)));
                }
            }
        }
    }

    #[test]
    fn rates_use_the_sidecar_bridge_exactly() {
        let ds = dataset();
        let cfg = ModelConfig::default();
        let wins = make_windows(&ds, HxKind::Evaporator, &cfg, 50).unwrap();
        let table = ds.tables_of(HxKind::Evaporator).next().unwrap();
        let stats = ds.output_stats(HxKind::Evaporator);
        let w = &wins[0];
        let t0 = cfg.enc_window;
        assert_eq!(
            w.true_rates[0][0],
            table.mass_rate[t0] * stats.rate_scale(STORAGE_CHANNEL)
        );
        assert_eq!(
            w.true_rates[0][1],
            table.energy_rate[t0] * stats.rate_scale(STORAGE_CHANNEL + 1)
        );
    }

    #[test]
    fn short_series_yield_no_windows() {
        let cfg = PlantConfig::default();
        let spec = ProfileSpec { steps: 25, ..ProfileSpec::default() };
        let profile = generate_profile(&spec, 1);
        let ds =
            generate_dataset(&cfg, &profile, &nominal_initial_state(&cfg), 25).unwrap();
        let wins = make_windows(&ds, HxKind::Condenser, &ModelConfig::default(), 1).unwrap();
        assert!(wins.is_empty());
    }
}
