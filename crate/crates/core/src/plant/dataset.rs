//! Training tables extracted from oracle runs, plus their disk format.
//!
//! Each exchanger instance contributes one table of raw (unnormalized) rows.
//! Scaling statistics are pooled per exchanger role because one model is
//! trained per role and reused across parallel instances. On disk a dataset
//! is one CSV per instance with the 8 input columns followed by the 9 output
//! columns, one rates CSV per instance holding the boundary mass and energy
//! rates (needed for training, not recoverable from the main columns), and
//! one JSON sidecar carrying per-column min/max, rate scales, dt and layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cycle::{simulate, HxKind, OracleRun, PlantConfig, PlantState, N_INPUTS, N_OUTPUTS};
use super::profile::ActuationProfile;
use crate::error::{Error, Result};
use crate::norm::ChannelStats;

pub const INPUT_COLUMNS: [&str; N_INPUTS] = [
    "t_air_in", "phi_air_in", "mdot_air", "p_amb", "mdot_r_in", "h_r_in", "h_r_out", "p_r_out",
];
pub const OUTPUT_COLUMNS: [&str; N_OUTPUTS] = [
    "p_first", "p_last", "h_first", "h_last", "t_air_out", "qdot_air", "m_r", "e_hx", "qdot_lat",
];

/// Raw series for one exchanger instance.
#[derive(Debug, Clone, PartialEq)]
pub struct HxTable {
    pub kind: HxKind,
    pub inputs: Vec<[f64; N_INPUTS]>,
    pub outputs: Vec<[f64; N_OUTPUTS]>,
    pub mass_rate: Vec<f64>,
    pub energy_rate: Vec<f64>,
}

impl HxTable {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Everything the per-role models train on.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dt: f64,
    pub tables: Vec<HxTable>,
    pub cond_input_stats: ChannelStats,
    pub cond_output_stats: ChannelStats,
    pub evap_input_stats: ChannelStats,
    pub evap_output_stats: ChannelStats,
}

impl Dataset {
    pub fn input_stats(&self, kind: HxKind) -> &ChannelStats {
        match kind {
            HxKind::Condenser => &self.cond_input_stats,
            HxKind::Evaporator => &self.evap_input_stats,
        }
    }

    pub fn output_stats(&self, kind: HxKind) -> &ChannelStats {
        match kind {
            HxKind::Condenser => &self.cond_output_stats,
            HxKind::Evaporator => &self.evap_output_stats,
        }
    }

    pub fn tables_of(&self, kind: HxKind) -> impl Iterator<Item = &HxTable> {
        self.tables.iter().filter(move |t| t.kind == kind)
    }
}

fn pooled_stats(
    tables: &[HxTable],
    kind: HxKind,
) -> Result<(ChannelStats, ChannelStats)> {
    let inputs = ChannelStats::from_rows(
        tables
            .iter()
            .filter(|t| t.kind == kind)
            .flat_map(|t| t.inputs.iter().map(|r| r.as_slice())),
        N_INPUTS,
    )?;
    let outputs = ChannelStats::from_rows(
        tables
            .iter()
            .filter(|t| t.kind == kind)
            .flat_map(|t| t.outputs.iter().map(|r| r.as_slice())),
        N_OUTPUTS,
    )?;
    Ok((inputs, outputs))
}

pub fn dataset_from_run(run: &OracleRun) -> Result<Dataset> {
    let tables: Vec<HxTable> = run
        .hx
        .iter()
        .map(|s| HxTable {
            kind: s.kind,
            inputs: s.inputs.clone(),
            outputs: s.outputs.clone(),
            mass_rate: s.mass_rate.clone(),
            energy_rate: s.energy_rate.clone(),
        })
        .collect();
    let (ci, co) = pooled_stats(&tables, HxKind::Condenser)?;
    let (ei, eo) = pooled_stats(&tables, HxKind::Evaporator)?;
    Ok(Dataset {
        dt: run.dt,
        tables,
        cond_input_stats: ci,
        cond_output_stats: co,
        evap_input_stats: ei,
        evap_output_stats: eo,
    })
}

/// Run the reference plant over `steps` steps of `profile` and package the
/// result. The horizon must fit inside the schedule.
pub fn generate_dataset(
    cfg: &PlantConfig,
    profile: &ActuationProfile,
    initial: &PlantState,
    steps: usize,
) -> Result<Dataset> {
    if steps > profile.steps() {
        return Err(Error::contract(format!(
            "horizon of {steps} steps exceeds schedule length {}",
            profile.steps()
        )));
    }
    let run = simulate(cfg, profile, initial, steps)?;
    dataset_from_run(&run)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dt: f64,
    input_columns: Vec<String>,
    output_columns: Vec<String>,
    tables: Vec<TableMeta>,
    cond_input_stats: ChannelStats,
    cond_output_stats: ChannelStats,
    evap_input_stats: ChannelStats,
    evap_output_stats: ChannelStats,
    /// Per output column, 2/span of the pooled role stats: multiplying a
    /// physical per-second rate by this gives the normalized-channel rate.
    cond_output_rate_scale: Vec<f64>,
    evap_output_rate_scale: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableMeta {
    file: String,
    rates_file: String,
    kind: HxKind,
    rows: usize,
}

fn table_paths(dir: &Path, stem: &str, idx: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{stem}_hx{idx}.csv")),
        dir.join(format!("{stem}_hx{idx}_rates.csv")),
    )
}

pub fn save_dataset(ds: &Dataset, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut metas = Vec::new();
    for (idx, table) in ds.tables.iter().enumerate() {
        let (main, rates) = table_paths(dir, stem, idx);
        let mut w = csv::Writer::from_path(&main)?;
        let header: Vec<&str> =
            INPUT_COLUMNS.iter().chain(OUTPUT_COLUMNS.iter()).copied().collect();
        w.write_record(&header)?;
        for (i, o) in table.inputs.iter().zip(&table.outputs) {
            let row: Vec<String> =
                i.iter().chain(o.iter()).map(|v| format!("{v:.17e}")).collect();
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut wr = csv::Writer::from_path(&rates)?;
        wr.write_record(["mass_rate", "energy_rate"])?;
        for (m, e) in table.mass_rate.iter().zip(&table.energy_rate) {
            wr.write_record([format!("{m:.17e}"), format!("{e:.17e}")])?;
        }
        wr.flush()?;

        metas.push(TableMeta {
            file: main.file_name().unwrap().to_string_lossy().into_owned(),
            rates_file: rates.file_name().unwrap().to_string_lossy().into_owned(),
            kind: table.kind,
            rows: table.len(),
        });
    }
    let sidecar = Sidecar {
        dt: ds.dt,
        input_columns: INPUT_COLUMNS.iter().map(|s| s.to_string()).collect(),
        output_columns: OUTPUT_COLUMNS.iter().map(|s| s.to_string()).collect(),
        tables: metas,
        cond_input_stats: ds.cond_input_stats.clone(),
        cond_output_stats: ds.cond_output_stats.clone(),
        evap_input_stats: ds.evap_input_stats.clone(),
        evap_output_stats: ds.evap_output_stats.clone(),
        cond_output_rate_scale: (0..N_OUTPUTS).map(|c| ds.cond_output_stats.rate_scale(c)).collect(),
        evap_output_rate_scale: (0..N_OUTPUTS).map(|c| ds.evap_output_stats.rate_scale(c)).collect(),
    };
    let f = std::fs::File::create(dir.join(format!("{stem}_meta.json")))?;
    serde_json::to_writer_pretty(f, &sidecar)?;
    Ok(())
}

pub fn load_dataset(dir: &Path, stem: &str) -> Result<Dataset> {
    let f = std::fs::File::open(dir.join(format!("{stem}_meta.json")))?;
    let sidecar: Sidecar = serde_json::from_reader(f)?;
    let mut tables = Vec::new();
    for meta in &sidecar.tables {
        let mut r = csv::Reader::from_path(dir.join(&meta.file))?;
        let mut inputs = Vec::with_capacity(meta.rows);
        let mut outputs = Vec::with_capacity(meta.rows);
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != N_INPUTS + N_OUTPUTS {
                return Err(Error::contract("dataset row has wrong column count"));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::contract(format!("bad numeric cell: {e}")))?;
            let mut i = [0.0; N_INPUTS];
            let mut o = [0.0; N_OUTPUTS];
            i.copy_from_slice(&vals[..N_INPUTS]);
            o.copy_from_slice(&vals[N_INPUTS..]);
            inputs.push(i);
            outputs.push(o);
        }
        let mut rr = csv::Reader::from_path(dir.join(&meta.rates_file))?;
        let mut mass_rate = Vec::with_capacity(meta.rows);
        let mut energy_rate = Vec::with_capacity(meta.rows);
        for rec in rr.records() {
            let rec = rec?;
            let m: f64 = rec[0].parse().map_err(|e| Error::contract(format!("{e}")))?;
            let e: f64 = rec[1].parse().map_err(|e| Error::contract(format!("{e}")))?;
            mass_rate.push(m);
            energy_rate.push(e);
        }
        if mass_rate.len() != inputs.len() {
            return Err(Error::contract("rates file length mismatch"));
        }
        tables.push(HxTable { kind: meta.kind, inputs, outputs, mass_rate, energy_rate });
    }
    Ok(Dataset {
        dt: sidecar.dt,
        tables,
        cond_input_stats: sidecar.cond_input_stats,
        cond_output_stats: sidecar.cond_output_stats,
        evap_input_stats: sidecar.evap_input_stats,
        evap_output_stats: sidecar.evap_output_stats,
    })
}
