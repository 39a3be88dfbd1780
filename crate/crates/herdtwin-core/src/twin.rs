//! The closed loop: one model per (cohort, state) key, each predicting the
//! next day's hourly budget. Each cycle compares the stored prediction with
//! the day's actuals (drift), folds the new day into the training series,
//! fine-tunes, and stores the next prediction. A registry of keys persists as
//! a directory of checkpoints plus an index.
//!
//! Pain assessment sits on top: activity deficits of treated cohorts relative
//! to the untouched baseline, walking/eating/grazing scored, panting/resting
//! reported alongside.

use crate::aggregate::{treatment_comparison, ComparisonTable, DailyProfile};
use crate::lstm::{
    load_checkpoint, predict_cycle, save_checkpoint, train, Dataset, LstmConfig, LstmError,
    LstmModel, Window, INPUT_SCALE, OUTPUT_SCALE,
};
use crate::model::{Breed, CohortKey, CombinedTreatment, HourlySeries, Sex, StateLabel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("no model registered for {cohort:?} / {state:?}")]
    UnknownKey { cohort: CohortKey, state: StateLabel },
    #[error("a model is already registered for {cohort:?} / {state:?}")]
    KeyExists { cohort: CohortKey, state: StateLabel },
    #[error("cycle data rejected: {0}")]
    CycleMismatch(String),
    #[error("not enough complete days to train on ({0})")]
    NotEnoughDays(usize),
    #[error("profiles span more than one breed/sex")]
    MixedCohort,
    #[error("need at least two treatments to rank, got {0}")]
    NotEnoughTreatments(usize),
    #[error("treatment {treatment} has no {state:?} profile")]
    MissingIndicator { treatment: String, state: StateLabel },
    #[error("indicator weights must be nonnegative with a positive sum")]
    InvalidWeights,
    #[error("registry index is corrupt: {0}")]
    CorruptIndex(String),
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

/// Outcome of one prediction-vs-actuals comparison. `actual[h]` is `None`
/// where the hour was destroyed; the MSE runs over present hours only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub cohort: CohortKey,
    pub state: StateLabel,
    pub predicted: [f64; 24],
    pub actual: [Option<f64>; 24],
    pub cycle_mse: f64,
    /// First hour serial of the compared day — the cycle's identity in data
    /// time (no wall clocks anywhere in the loop).
    pub cycle_start_serial: u64,
}

/// One key's live state: the model, everything it has been trained on, the
/// outstanding next-day prediction, and the full drift history (append-only).
#[derive(Debug, Clone)]
pub struct TwinEntry {
    pub model: LstmModel,
    pub series: HourlySeries,
    /// End of the last day grid folded into training (a multiple of 24).
    pub last_trained_serial: u64,
    pub prediction: Option<Vec<f64>>,
    pub drift_history: Vec<DriftReport>,
}

#[derive(Debug, Clone, Default)]
pub struct TwinRegistry {
    entries: BTreeMap<(CohortKey, StateLabel), TwinEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOptions {
    pub fine_tune_epochs: usize,
    /// Discard the model and retrain from scratch (fresh seeded init, the
    /// config's full epoch budget) instead of fine-tuning.
    pub full_retrain: bool,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions { fine_tune_epochs: 50, full_retrain: false }
    }
}

/// One training window per complete day: all 24 serials of the day grid
/// present. Days with destroyed hours are skipped rather than bridged.
fn day_windows(series: &HourlySeries) -> Vec<Window> {
    let mut by_serial: BTreeMap<u64, (u8, f64)> = BTreeMap::new();
    for p in &series.points {
        by_serial.insert(p.hour_serial, (p.hour_of_day, p.minutes));
    }
    let Some((&max_serial, _)) = by_serial.iter().next_back() else {
        return Vec::new();
    };
    let n_days = (max_serial + 23) / 24;
    let mut windows = Vec::new();
    for d in 0..n_days {
        let start = d * 24 + 1;
        let mut features = Vec::with_capacity(24);
        let mut targets = Vec::with_capacity(24);
        for serial in start..start + 24 {
            match by_serial.get(&serial) {
                Some(&(hod, minutes)) => {
                    features.push(hod as f64 / INPUT_SCALE);
                    targets.push(minutes / OUTPUT_SCALE);
                }
                None => break,
            }
        }
        if targets.len() == 24 {
            windows.push(Window { start_serial: start, features, targets });
        }
    }
    windows
}

/// Day-grid end covering every point in the series.
fn grid_end(series: &HourlySeries) -> u64 {
    let max = series.points.iter().map(|p| p.hour_serial).max().unwrap_or(0);
    (max + 23) / 24 * 24
}

impl TwinRegistry {
    pub fn new() -> Self {
        TwinRegistry::default()
    }

    pub fn entry(&self, cohort: CohortKey, state: StateLabel) -> Option<&TwinEntry> {
        self.entries.get(&(cohort, state))
    }

    pub fn keys(&self) -> impl Iterator<Item = &(CohortKey, StateLabel)> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Register a key by training a fresh model on its historical series
    /// (chronological 90/10 split over complete days). No prediction is
    /// stored yet: the first update cycle bootstraps one.
    ///
    /// The twin's cycle is one day, so the model's sequence length is pinned
    /// to 24 and the batch size is clamped to the available training windows.
    pub fn init_key(
        &mut self,
        series: &HourlySeries,
        config: &LstmConfig,
    ) -> Result<(), TwinError> {
        let key = (series.cohort, series.state);
        if self.entries.contains_key(&key) {
            return Err(TwinError::KeyExists { cohort: key.0, state: key.1 });
        }
        let windows = day_windows(series);
        if windows.len() < 2 {
            return Err(TwinError::NotEnoughDays(windows.len()));
        }
        let n_train = ((windows.len() as f64) * 0.9).floor().max(1.0) as usize;
        let mut train_windows = windows;
        let test_windows = train_windows.split_off(n_train);

        let mut cfg = config.clone();
        cfg.sequence_length = 24;
        cfg.batch_size = cfg.batch_size.min(train_windows.len()).max(1);
        let mut model = LstmModel::new(cfg)?;
        let data = Dataset { sequence_length: 24, train: train_windows, test: test_windows };
        train(&mut model, &data)?;

        self.entries.insert(
            key,
            TwinEntry {
                model,
                series: series.clone(),
                last_trained_serial: grid_end(series),
                prediction: None,
                drift_history: Vec::new(),
            },
        );
        Ok(())
    }

    /// Register a key around a model that was already trained on `series`
    /// elsewhere, instead of training a fresh one. Same bootstrap contract as
    /// [`TwinRegistry::init_key`]: no prediction is stored until the first
    /// update cycle.
    pub fn adopt(&mut self, series: &HourlySeries, model: LstmModel) -> Result<(), TwinError> {
        let key = (series.cohort, series.state);
        if self.entries.contains_key(&key) {
            return Err(TwinError::KeyExists { cohort: key.0, state: key.1 });
        }
        if model.config.sequence_length != 24 {
            return Err(TwinError::CycleMismatch(format!(
                "twin cycles are whole days; model sequence length is {}",
                model.config.sequence_length
            )));
        }
        if day_windows(series).is_empty() {
            return Err(TwinError::NotEnoughDays(0));
        }
        self.entries.insert(
            key,
            TwinEntry {
                model,
                series: series.clone(),
                last_trained_serial: grid_end(series),
                prediction: None,
                drift_history: Vec::new(),
            },
        );
        Ok(())
    }
}

/// Feed one day of actuals into the key owning `day`'s cohort and state.
///
/// Returns the drift report for that day, or `None` on the bootstrap cycle
/// (no prior prediction existed; one is stored now). Either way the day is
/// appended to the key's series, the model is fine-tuned (or fully retrained)
/// on the extended series, and the next day's prediction replaces the old.
pub fn update_twin(
    registry: &mut TwinRegistry,
    day: &HourlySeries,
    options: &UpdateOptions,
) -> Result<Option<DriftReport>, TwinError> {
    let key = (day.cohort, day.state);
    let entry = registry
        .entries
        .get_mut(&key)
        .ok_or(TwinError::UnknownKey { cohort: key.0, state: key.1 })?;

    let start = entry.last_trained_serial + 1;
    let end = entry.last_trained_serial + 24;
    if day.points.is_empty() {
        return Err(TwinError::CycleMismatch("day has no surviving hours".into()));
    }
    for p in &day.points {
        if p.hour_serial < start || p.hour_serial > end {
            return Err(TwinError::CycleMismatch(format!(
                "serial {} outside the expected day grid {start}..={end}",
                p.hour_serial
            )));
        }
    }

    let report = entry.prediction.as_ref().map(|prediction| {
        let mut actual: [Option<f64>; 24] = [None; 24];
        for p in &day.points {
            actual[p.hour_of_day as usize] = Some(p.minutes);
        }
        let mut sq = 0.0;
        let mut n = 0usize;
        let mut predicted = [0.0f64; 24];
        for h in 0..24 {
            predicted[h] = prediction[h];
            if let Some(a) = actual[h] {
                let d = prediction[h] - a;
                sq += d * d;
                n += 1;
            }
        }
        DriftReport {
            cohort: key.0,
            state: key.1,
            predicted,
            actual,
            cycle_mse: sq / n as f64,
            cycle_start_serial: start,
        }
    });
    if let Some(r) = &report {
        entry.drift_history.push(r.clone());
    }

    entry.series.points.extend(day.points.iter().cloned());
    entry.last_trained_serial = end;

    let windows = day_windows(&entry.series);
    if windows.is_empty() {
        return Err(TwinError::NotEnoughDays(0));
    }
    if options.full_retrain {
        let mut cfg = entry.model.config.clone();
        cfg.batch_size = cfg.batch_size.min(windows.len()).max(1);
        entry.model = LstmModel::new(cfg)?;
    } else {
        entry.model.config.epochs = options.fine_tune_epochs;
        entry.model.config.batch_size =
            entry.model.config.batch_size.min(windows.len()).max(1);
    }
    let data = Dataset { sequence_length: 24, train: windows, test: Vec::new() };
    train(&mut entry.model, &data)?;
    entry.prediction = Some(predict_cycle(&entry.model, &[])?);

    Ok(report)
}

// ---------------------------------------------------------------------------
// Registry persistence: <dir>/index.json + one checkpoint file per key.

const REGISTRY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EntryDoc {
    cohort: CohortKey,
    state: StateLabel,
    checkpoint: String,
    last_trained_serial: u64,
    series: HourlySeries,
    prediction: Option<Vec<f64>>,
    drift_history: Vec<DriftReport>,
}

#[derive(Serialize, Deserialize)]
struct RegistryDoc {
    registry_version: u32,
    entries: Vec<EntryDoc>,
}

fn checkpoint_name(cohort: &CohortKey, state: StateLabel) -> String {
    format!("{}-{}.ckpt.json", cohort.slug(), state.token())
}

impl TwinRegistry {
    pub fn save(&self, dir: &Path) -> Result<(), TwinError> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for ((cohort, state), entry) in &self.entries {
            let checkpoint = checkpoint_name(cohort, *state);
            save_checkpoint(&entry.model, &dir.join(&checkpoint))?;
            entries.push(EntryDoc {
                cohort: *cohort,
                state: *state,
                checkpoint,
                last_trained_serial: entry.last_trained_serial,
                series: entry.series.clone(),
                prediction: entry.prediction.clone(),
                drift_history: entry.drift_history.clone(),
            });
        }
        let doc = RegistryDoc { registry_version: REGISTRY_VERSION, entries };
        let file = std::fs::File::create(dir.join("index.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &doc)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TwinRegistry, TwinError> {
        let file = std::fs::File::open(dir.join("index.json"))?;
        let doc: RegistryDoc = serde_json::from_reader(std::io::BufReader::new(file))?;
        if doc.registry_version != REGISTRY_VERSION {
            return Err(TwinError::CorruptIndex(format!(
                "unsupported registry version {}",
                doc.registry_version
            )));
        }
        let mut registry = TwinRegistry::new();
        for e in doc.entries {
            let model = load_checkpoint(&dir.join(&e.checkpoint))?;
            if let Some(p) = &e.prediction {
                if p.len() != 24 {
                    return Err(TwinError::CorruptIndex(format!(
                        "stored prediction has {} values",
                        p.len()
                    )));
                }
            }
            registry.entries.insert(
                (e.cohort, e.state),
                TwinEntry {
                    model,
                    series: e.series,
                    last_trained_serial: e.last_trained_serial,
                    prediction: e.prediction,
                    drift_history: e.drift_history,
                },
            );
        }
        Ok(registry)
    }
}

// ---------------------------------------------------------------------------
// Pain assessment.

/// Relative weights of the three scored activity deficits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PainWeights {
    pub walking: f64,
    pub eating: f64,
    pub grazing: f64,
}

impl Default for PainWeights {
    fn default() -> Self {
        PainWeights { walking: 1.0, eating: 1.0, grazing: 1.0 }
    }
}

/// One treatment's indicator readout. Deficits are baseline-minus-treated
/// daily totals (positive = the treated cohort did less of the activity);
/// they are absent in raw-totals fallback mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentScore {
    pub treatment: CombinedTreatment,
    pub walking_total: f64,
    pub eating_total: f64,
    pub grazing_total: f64,
    pub panting_total: Option<f64>,
    pub resting_total: Option<f64>,
    pub walking_deficit: Option<f64>,
    pub eating_deficit: Option<f64>,
    pub grazing_deficit: Option<f64>,
    /// Weighted pain score; ranking sorts ascending (least pain first).
    pub pain_score: f64,
    /// Direction tag per indicator, e.g. `walking:down` = less walking than
    /// the baseline (a pain signal).
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PainAssessment {
    pub breed: Breed,
    pub sex: Sex,
    pub weights: PainWeights,
    /// True when no positive-control cohort was present and treatments were
    /// ranked by raw activity totals instead of deficits.
    pub fallback_raw_totals: bool,
    pub baseline: Option<TreatmentScore>,
    /// Least pain first; ties broken by canonical treatment order.
    pub ranking: Vec<TreatmentScore>,
}

fn direction_tag(name: &str, deficit: f64) -> String {
    let dir = if deficit > 0.0 {
        "down"
    } else if deficit < 0.0 {
        "up"
    } else {
        "flat"
    };
    format!("{name}:{dir}")
}

/// Rank treatments of one breed/sex by activity deficit relative to the
/// positive-control cohort: less walking/eating/grazing than the baseline
/// means more pain. Panting and resting totals ride along untouched — no
/// monotone pain direction is assumed for them. Without a baseline cohort
/// the ranking falls back to raw totals (most activity = least pain) and is
/// flagged as such.
pub fn assess_pain(
    profiles: &[DailyProfile],
    weights: &PainWeights,
) -> Result<PainAssessment, TwinError> {
    if !(weights.walking >= 0.0 && weights.eating >= 0.0 && weights.grazing >= 0.0)
        || weights.walking + weights.eating + weights.grazing <= 0.0
    {
        return Err(TwinError::InvalidWeights);
    }
    let first = match profiles.first() {
        Some(p) => p,
        None => return Err(TwinError::NotEnoughTreatments(0)),
    };
    let (breed, sex) = (first.cohort.breed, first.cohort.sex);
    if profiles.iter().any(|p| p.cohort.breed != breed || p.cohort.sex != sex) {
        return Err(TwinError::MixedCohort);
    }

    let mut by_treatment: BTreeMap<CombinedTreatment, BTreeMap<StateLabel, &DailyProfile>> =
        BTreeMap::new();
    for p in profiles {
        by_treatment.entry(p.cohort.treatment).or_default().insert(p.state, p);
    }
    if by_treatment.len() < 2 {
        return Err(TwinError::NotEnoughTreatments(by_treatment.len()));
    }

    let total = |states: &BTreeMap<StateLabel, &DailyProfile>,
                 state: StateLabel,
                 treatment: CombinedTreatment|
     -> Result<f64, TwinError> {
        states.get(&state).map(|p| p.daily_total()).ok_or(TwinError::MissingIndicator {
            treatment: treatment.code(),
            state,
        })
    };

    struct Raw {
        treatment: CombinedTreatment,
        walking: f64,
        eating: f64,
        grazing: f64,
        panting: Option<f64>,
        resting: Option<f64>,
    }
    let mut raws = Vec::new();
    for (&treatment, states) in &by_treatment {
        raws.push(Raw {
            treatment,
            walking: total(states, StateLabel::Walking, treatment)?,
            eating: total(states, StateLabel::Eating, treatment)?,
            grazing: total(states, StateLabel::Grazing, treatment)?,
            panting: states.get(&StateLabel::Panting).map(|p| p.daily_total()),
            resting: states.get(&StateLabel::Resting).map(|p| p.daily_total()),
        });
    }

    let w_sum = weights.walking + weights.eating + weights.grazing;
    let baseline_raw = raws.iter().find(|r| r.treatment.is_positive_control());
    let fallback = baseline_raw.is_none();

    let score_of = |r: &Raw| -> TreatmentScore {
        match baseline_raw {
            Some(b) => {
                let dw = b.walking - r.walking;
                let de = b.eating - r.eating;
                let dg = b.grazing - r.grazing;
                TreatmentScore {
                    treatment: r.treatment,
                    walking_total: r.walking,
                    eating_total: r.eating,
                    grazing_total: r.grazing,
                    panting_total: r.panting,
                    resting_total: r.resting,
                    walking_deficit: Some(dw),
                    eating_deficit: Some(de),
                    grazing_deficit: Some(dg),
                    pain_score: (weights.walking * dw
                        + weights.eating * de
                        + weights.grazing * dg)
                        / w_sum,
                    tags: vec![
                        direction_tag("walking", dw),
                        direction_tag("eating", de),
                        direction_tag("grazing", dg),
                    ],
                }
            }
            None => TreatmentScore {
                treatment: r.treatment,
                walking_total: r.walking,
                eating_total: r.eating,
                grazing_total: r.grazing,
                panting_total: r.panting,
                resting_total: r.resting,
                walking_deficit: None,
                eating_deficit: None,
                grazing_deficit: None,
                // Raw-totals mode: more activity sorts earlier (less pain).
                pain_score: -(weights.walking * r.walking
                    + weights.eating * r.eating
                    + weights.grazing * r.grazing)
                    / w_sum,
                tags: vec!["raw-totals".to_string()],
            },
        }
    };

    let baseline = baseline_raw.map(&score_of);
    let mut ranking: Vec<TreatmentScore> = raws
        .iter()
        .filter(|r| !r.treatment.is_positive_control())
        .map(&score_of)
        .collect();
    ranking.sort_by(|a, b| {
        a.pain_score
            .partial_cmp(&b.pain_score)
            .unwrap()
            .then(a.treatment.cmp(&b.treatment))
    });

    Ok(PainAssessment {
        breed,
        sex,
        weights: *weights,
        fallback_raw_totals: fallback,
        baseline,
        ranking,
    })
}

// ---------------------------------------------------------------------------
// Report export.

pub const REPORT_VERSION: u32 = 1;

/// Full assessment bundle: ranking, the 24xk profile matrix behind it for
/// every state present, and the drift history of the contributing models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinReport {
    pub report_version: u32,
    pub assessment: PainAssessment,
    pub profile_matrices: Vec<ComparisonTable>,
    pub drift_history: Vec<DriftReport>,
}

pub fn export_report(
    assessment: &PainAssessment,
    profiles: &[DailyProfile],
    drift_history: &[DriftReport],
) -> Result<TwinReport, TwinError> {
    let mut by_state: BTreeMap<StateLabel, Vec<DailyProfile>> = BTreeMap::new();
    for p in profiles {
        by_state.entry(p.state).or_default().push(p.clone());
    }
    let mut profile_matrices = Vec::new();
    for state in StateLabel::ALL {
        if let Some(group) = by_state.get(&state) {
            profile_matrices.push(
                treatment_comparison(group)
                    .map_err(|e| TwinError::CorruptIndex(e.to_string()))?,
            );
        }
    }
    Ok(TwinReport {
        report_version: REPORT_VERSION,
        assessment: assessment.clone(),
        profile_matrices,
        drift_history: drift_history.to_vec(),
    })
}

impl TwinReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let a = &self.assessment;
        let mut out = String::new();
        let _ = writeln!(out, "twin report v{}", self.report_version);
        let _ = writeln!(out, "cohort: {} {}", a.breed.token(), a.sex.token());
        let _ = writeln!(
            out,
            "weights: walking {:.2}  eating {:.2}  grazing {:.2}",
            a.weights.walking, a.weights.eating, a.weights.grazing
        );
        if a.fallback_raw_totals {
            let _ = writeln!(out, "NOTE: no baseline cohort; ranked by raw activity totals");
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "ranking (least -> most pain):");
        let fmt_opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:8.2}"),
            None => format!("{:>8}", "-"),
        };
        let header = format!(
            "  {:<4} {:<9} {:>9}  {:>8} {:>8} {:>8} {:>8} {:>8}  {}",
            "rank", "treatment", "score", "walk", "eat", "graze", "pant", "rest", "tags"
        );
        let _ = writeln!(out, "{header}");
        for (i, s) in a.ranking.iter().enumerate() {
            let _ = writeln!(
                out,
                "  {:<4} {:<9} {:>9.3}  {:>8.2} {:>8.2} {:>8.2} {} {}  {}",
                i + 1,
                s.treatment.code(),
                s.pain_score,
                s.walking_total,
                s.eating_total,
                s.grazing_total,
                fmt_opt(s.panting_total),
                fmt_opt(s.resting_total),
                s.tags.join(",")
            );
        }
        if let Some(b) = &a.baseline {
            let _ = writeln!(
                out,
                "  {:<4} {:<9} {:>9}  {:>8.2} {:>8.2} {:>8.2} {} {}  baseline",
                "-",
                b.treatment.code(),
                "-",
                b.walking_total,
                b.eating_total,
                b.grazing_total,
                fmt_opt(b.panting_total),
                fmt_opt(b.resting_total),
            );
        }

        for table in &self.profile_matrices {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "state {} (mean minutes/hour; columns by daily total):",
                table.state.token()
            );
            let mut head = format!("  {:>4}", "hour");
            for c in &table.columns {
                head.push_str(&format!(" {:>9}", c.treatment.code()));
            }
            let _ = writeln!(out, "{head}");
            for h in 0..24 {
                let mut row = format!("  {h:>4}");
                for c in &table.columns {
                    match c.values[h] {
                        Some(v) => row.push_str(&format!(" {v:>9.2}")),
                        None => row.push_str(&format!(" {:>9}", "-")),
                    }
                }
                let _ = writeln!(out, "{row}");
            }
            let mut totals = format!("  {:>4}", "sum");
            for c in &table.columns {
                totals.push_str(&format!(" {:>9.2}", c.daily_total));
            }
            let _ = writeln!(out, "{totals}");
        }

        let _ = writeln!(out);
        if self.drift_history.is_empty() {
            let _ = writeln!(out, "drift: none recorded");
        } else {
            let _ = writeln!(out, "drift:");
            for d in &self.drift_history {
                let _ = writeln!(
                    out,
                    "  {} {} day-start {} mse {:.4} min^2",
                    d.cohort.slug(),
                    d.state.token(),
                    d.cycle_start_serial,
                    d.cycle_mse
                );
            }
        }
        out
    }
}
