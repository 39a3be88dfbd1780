//! One-axis-at-a-time hyperparameter sweeps with repeated seeded runs and
//! box-plot statistics. Cells run concurrently (rayon), each owning its own
//! model; per-cell failures are recorded and never abort the table.

use super::net::LstmModel;
use super::train::train;
use super::{Dataset, LstmConfig, LstmError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    HiddenUnits,
    NumLayers,
    BatchSize,
    Epochs,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::HiddenUnits => "hidden_units",
            SweepAxis::NumLayers => "num_layers",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Epochs => "epochs",
        }
    }

    /// Default grid per axis. The epoch axis is desk-scaled (caps at 2000)
    /// unless the full grid is requested.
    pub fn default_values(&self, full_epoch_grid: bool) -> Vec<usize> {
        match self {
            SweepAxis::HiddenUnits => vec![4, 8, 16, 32, 64, 128, 256],
            SweepAxis::NumLayers => (1..=7).collect(),
            SweepAxis::BatchSize => vec![3, 6, 12, 24, 48, 96],
            SweepAxis::Epochs => {
                if full_epoch_grid {
                    vec![100, 500, 1000, 2000, 5000, 10000, 20000]
                } else {
                    vec![100, 500, 1000, 2000]
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOptions {
    pub axis: SweepAxis,
    /// Axis values; empty means the axis default grid.
    pub values: Vec<usize>,
    /// Seeded repetitions per cell; rep r uses base_seed + r.
    pub repetitions: usize,
    pub base_seed: u64,
    pub full_epoch_grid: bool,
    /// When set, non-axis hyperparameters come from this template instead of
    /// the standard companions (useful for scaled-down fixtures).
    pub override_base: Option<LstmConfig>,
}

impl SweepOptions {
    pub fn new(axis: SweepAxis) -> Self {
        SweepOptions {
            axis,
            values: Vec::new(),
            repetitions: 5,
            base_seed: 0,
            full_epoch_grid: false,
            override_base: None,
        }
    }
}

/// Companion hyperparameters while one axis varies: the layer sweep runs at
/// 16 hidden units, everything after it at 2 layers / 128 hidden units, all
/// with batch 24 and 2000 epochs unless the axis itself sets them.
pub(crate) fn config_for(opts: &SweepOptions, value: usize) -> LstmConfig {
    let mut config = opts.override_base.clone().unwrap_or(LstmConfig {
        hidden_units: if opts.axis == SweepAxis::NumLayers { 16 } else { 128 },
        num_layers: 2,
        batch_size: 24,
        epochs: 2000,
        learning_rate: 1e-3,
        seed: 0,
        sequence_length: 24,
    });
    match opts.axis {
        SweepAxis::HiddenUnits => config.hidden_units = value,
        SweepAxis::NumLayers => config.num_layers = value,
        SweepAxis::BatchSize => config.batch_size = value,
        SweepAxis::Epochs => config.epochs = value,
    }
    config.seed = opts.base_seed;
    config
}

/// Five-number summary with type-7 (linear interpolation) quartiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub n: usize,
}

fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

pub fn distribution(samples: &[f64]) -> Option<Distribution> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(Distribution {
        min: sorted[0],
        q1: quantile_type7(&sorted, 0.25),
        median: quantile_type7(&sorted, 0.5),
        q3: quantile_type7(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        n: sorted.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisCell {
    pub axis_value: usize,
    pub config: LstmConfig,
    /// Aggregation across repetitions: each sample is one rep's final test
    /// MSE (unscaled minutes²).
    pub rep_final_test: Option<Distribution>,
    /// Aggregation across repetitions: each sample is one rep's final train
    /// MSE (scaled units).
    pub rep_final_train: Option<Distribution>,
    /// Aggregation across epochs: per-epoch train MSE samples pooled over
    /// all repetitions (scaled units).
    pub pooled_epoch_train: Option<Distribution>,
    pub failures: Vec<String>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub repetitions: usize,
    /// Ranked ascending by median final test MSE; cells with no successful
    /// repetitions sort last in axis order.
    pub cells: Vec<AxisCell>,
}

pub fn sweep(data: &Dataset, opts: &SweepOptions) -> Result<SweepTable, LstmError> {
    if opts.repetitions == 0 {
        return Err(LstmError::InvalidConfig("repetitions must be positive".into()));
    }
    let values = if opts.values.is_empty() {
        opts.axis.default_values(opts.full_epoch_grid)
    } else {
        opts.values.clone()
    };

    let mut cells: Vec<AxisCell> = values
        .par_iter()
        .map(|&value| {
            let started = Instant::now();
            let base = config_for(opts, value);
            let mut final_test = Vec::new();
            let mut final_train = Vec::new();
            let mut pooled = Vec::new();
            let mut failures = Vec::new();
            for rep in 0..opts.repetitions {
                let mut config = base.clone();
                config.seed = opts.base_seed.wrapping_add(rep as u64);
                let outcome = LstmModel::new(config).and_then(|mut m| train(&mut m, data));
                match outcome {
                    Ok(trace) => {
                        if let Some(t) = trace.final_test_mse {
                            final_test.push(t);
                        }
                        final_train.push(trace.final_train_mse);
                        pooled.extend(trace.epoch_train_mse);
                    }
                    Err(e) => failures.push(format!("rep {rep}: {e}")),
                }
            }
            AxisCell {
                axis_value: value,
                config: base,
                rep_final_test: distribution(&final_test),
                rep_final_train: distribution(&final_train),
                pooled_epoch_train: distribution(&pooled),
                failures,
                wall_time_secs: started.elapsed().as_secs_f64(),
            }
        })
        .collect();

    cells.sort_by(|a, b| {
        let ka = a.rep_final_test.as_ref().map(|d| d.median).unwrap_or(f64::INFINITY);
        let kb = b.rep_final_test.as_ref().map(|d| d.median).unwrap_or(f64::INFINITY);
        ka.partial_cmp(&kb).unwrap()
    });
    Ok(SweepTable { axis: opts.axis, repetitions: opts.repetitions, cells })
}

fn push_dist(out: &mut String, d: &Option<Distribution>) {
    match d {
        Some(d) => {
            out.push_str(&format!("{},{},{},{},{}", d.min, d.q1, d.median, d.q3, d.max))
        }
        None => out.push_str(",,,,"),
    }
}

/// Ranked CSV. Column prefixes label the two aggregations: `rep_final_*`
/// pools one sample per repetition, `pooled_epoch_*` pools per-epoch samples
/// across repetitions.
pub fn sweep_to_csv(table: &SweepTable) -> String {
    let mut out = String::from(
        "rank,axis,value,hidden_units,num_layers,batch_size,epochs,reps_ok,reps_failed,\
         rep_final_test_min,rep_final_test_q1,rep_final_test_median,rep_final_test_q3,rep_final_test_max,\
         rep_final_train_min,rep_final_train_q1,rep_final_train_median,rep_final_train_q3,rep_final_train_max,\
         pooled_epoch_train_min,pooled_epoch_train_q1,pooled_epoch_train_median,pooled_epoch_train_q3,pooled_epoch_train_max\n",
    );
    for (i, cell) in table.cells.iter().enumerate() {
        let reps_ok = cell.rep_final_train.as_ref().map(|d| d.n).unwrap_or(0);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},",
            i + 1,
            table.axis.name(),
            cell.axis_value,
            cell.config.hidden_units,
            cell.config.num_layers,
            cell.config.batch_size,
            cell.config.epochs,
            reps_ok,
            cell.failures.len(),
        ));
        push_dist(&mut out, &cell.rep_final_test);
        out.push(',');
        push_dist(&mut out, &cell.rep_final_train);
        out.push(',');
        push_dist(&mut out, &cell.pooled_epoch_train);
        out.push('\n');
    }
    out
}
