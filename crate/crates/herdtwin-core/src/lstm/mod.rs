//! From-scratch stacked LSTM regression of hourly state minutes from
//! hour-of-day. Everything is f64 and seeded: same data + config + seed gives
//! bit-identical weights and training traces. No autograd — gradients are
//! hand-derived backpropagation through time, checked against finite
//! differences in the tests.

mod net;
mod sweep;
mod train;

pub use net::{forward, gradient_check, LayerWeights, LstmModel};
pub use sweep::{
    sweep, sweep_to_csv, AxisCell, Distribution, SweepAxis, SweepOptions, SweepTable,
};
pub use train::{
    load_checkpoint, predict_cycle, save_checkpoint, trace_to_csv, train, TrainingTrace,
};

use crate::model::HourlySeries;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hour-of-day features are divided by this before entering the net.
pub const INPUT_SCALE: f64 = 23.0;
/// Minute targets are divided by this; predictions multiply back out.
pub const OUTPUT_SCALE: f64 = 60.0;

pub fn scale_target(minutes: f64) -> f64 {
    minutes / OUTPUT_SCALE
}

pub fn unscale_target(y: f64) -> f64 {
    y * OUTPUT_SCALE
}

#[derive(Debug, Error)]
pub enum LstmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("series has {have} usable windows, need at least {need}")]
    SeriesTooShort { have: usize, need: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub hidden_units: usize,
    pub num_layers: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub sequence_length: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            hidden_units: 128,
            num_layers: 2,
            batch_size: 24,
            epochs: 2000,
            learning_rate: 1e-3,
            seed: 0,
            sequence_length: 24,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<(), LstmError> {
        if self.hidden_units == 0
            || self.num_layers == 0
            || self.batch_size == 0
            || self.epochs == 0
            || self.sequence_length == 0
        {
            return Err(LstmError::InvalidConfig(
                "hidden_units, num_layers, batch_size, epochs, sequence_length must be positive"
                    .into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(LstmError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One training window: per-step scaled hour-of-day features and scaled
/// minute targets, same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start_serial: u64,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequence_length: usize,
    pub train: Vec<Window>,
    pub test: Vec<Window>,
}

/// Cut a gap-free series into windows of `sequence_length` consecutive hours
/// at the given stride, then split chronologically: the first ⌊split·N⌋
/// windows train, the remainder test. `stride == sequence_length` gives the
/// default non-overlapping day-aligned windows.
pub fn make_dataset(
    series: &HourlySeries,
    split: f64,
    sequence_length: usize,
    stride: usize,
) -> Result<Dataset, LstmError> {
    if !(split > 0.0 && split < 1.0) {
        return Err(LstmError::InvalidConfig(format!("split must be in (0,1), got {split}")));
    }
    if sequence_length == 0 || stride == 0 {
        return Err(LstmError::InvalidConfig("sequence_length and stride must be positive".into()));
    }
    if !series.is_gap_free() {
        return Err(LstmError::InvalidConfig(
            "series has hour gaps; fill them before windowing".into(),
        ));
    }
    let pts = &series.points;
    let mut windows = Vec::new();
    let mut start = 0usize;
    while start + sequence_length <= pts.len() {
        let slice = &pts[start..start + sequence_length];
        windows.push(Window {
            start_serial: slice[0].hour_serial,
            features: slice.iter().map(|p| p.hour_of_day as f64 / INPUT_SCALE).collect(),
            targets: slice.iter().map(|p| scale_target(p.minutes)).collect(),
        });
        start += stride;
    }
    if windows.is_empty() {
        return Err(LstmError::SeriesTooShort { have: pts.len(), need: sequence_length });
    }
    let n_train = (split * windows.len() as f64).floor() as usize;
    let test = windows.split_off(n_train);
    Ok(Dataset { sequence_length, train: windows, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HourPoint, SeriesOrigin, StateLabel};

    pub(crate) fn flat_series(hours: usize, minutes: impl Fn(u64) -> f64) -> HourlySeries {
        let points = (0..hours as u64)
            .map(|k| HourPoint {
                hour_serial: k + 1,
                hour_of_day: (k % 24) as u8,
                minutes: minutes(k),
            })
            .collect();
        HourlySeries {
            cohort: crate::model::CohortKey {
                breed: crate::model::Breed::Brahman,
                sex: crate::model::Sex::Female,
                treatment: crate::model::parse_treatment("P").unwrap(),
            },
            state: StateLabel::Resting,
            points,
            origin: SeriesOrigin::SingleAnimal("test".into()),
        }
    }

    #[test]
    fn hundred_windows_split_ninety_ten() {
        let series = flat_series(2400, |k| (k % 60) as f64);
        let ds = make_dataset(&series, 0.9, 24, 24).unwrap();
        assert_eq!(ds.train.len(), 90);
        assert_eq!(ds.test.len(), 10);
        // Chronological: every train window starts before every test window.
        let last_train = ds.train.last().unwrap().start_serial;
        let first_test = ds.test.first().unwrap().start_serial;
        assert!(last_train < first_test);
    }

    #[test]
    fn midnight_wraparound_feature_encoding() {
        let series = flat_series(48, |_| 30.0);
        // Overlapping stride 1 so one window straddles midnight: 25 windows,
        // 22 train / 3 test, and the first test window starts at serial 23.
        let ds = make_dataset(&series, 0.9, 24, 1).unwrap();
        let w = &ds.test[0];
        assert_eq!(w.start_serial, 23);
        assert!((w.features[0] - 22.0 / 23.0).abs() < 1e-15);
        assert!((w.features[1] - 1.0).abs() < 1e-15);
        assert!((w.features[2] - 0.0).abs() < 1e-15);
        assert!((w.features[3] - 1.0 / 23.0).abs() < 1e-15);
    }

    #[test]
    fn target_scaling_endpoints() {
        let series = flat_series(24, |k| if k % 2 == 0 { 60.0 } else { 0.0 });
        let ds = make_dataset(&series, 0.5, 12, 12).unwrap();
        assert_eq!(ds.train[0].targets[0], 1.0);
        assert_eq!(ds.train[0].targets[1], 0.0);
    }

    #[test]
    fn too_short_series_is_rejected() {
        let series = flat_series(10, |_| 5.0);
        match make_dataset(&series, 0.9, 24, 24) {
            Err(LstmError::SeriesTooShort { have: 10, need: 24 }) => {}
            other => panic!("expected SeriesTooShort, got {other:?}"),
        }
    }

    #[test]
    fn gappy_series_is_rejected() {
        let mut series = flat_series(48, |_| 5.0);
        series.points.remove(7);
        assert!(matches!(
            make_dataset(&series, 0.9, 24, 24),
            Err(LstmError::InvalidConfig(_))
        ));
    }

    #[test]
    fn scaling_round_trip_within_tolerance() {
        let mut y = 0.0;
        while y <= 60.0 {
            assert!((unscale_target(scale_target(y)) - y).abs() < 1e-12);
            y += 0.0625;
        }
    }

    #[test]
    fn config_validation_catches_zeroes() {
        let mut c = LstmConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = LstmConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert!(LstmConfig::default().validate().is_ok());
    }
}
