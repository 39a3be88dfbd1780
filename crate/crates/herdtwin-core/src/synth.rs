//! Synthetic herd generator with known ground truth. Every pipeline stage is
//! testable against it: per-minute state records follow per-cohort hourly
//! templates (quantized so the noiseless round-trip is exact), treatment
//! effects shift activity budgets in controlled directions, and corruption
//! is injected per minute at a configurable rate.

use crate::ingest::{load_csv, LoadOptions, RawDataset, CANONICAL_SCHEMA};
use crate::model::{Breed, CombinedTreatment, Relief, Sex, StateLabel};
use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv write: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterGroup {
    pub breed: Breed,
    pub sex: Sex,
    pub treatment: CombinedTreatment,
    pub count: usize,
}

/// Additive daily-minute offset on one state's template for every cohort on
/// the given relief arm. The offset is spread over the day proportionally to
/// the state's template mass and absorbed by MediumActivity so each hour
/// still partitions into 60 minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub relief: Relief,
    pub state: StateLabel,
    pub minutes_per_day: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerdSpec {
    pub roster: Vec<RosterGroup>,
    pub days: u32,
    pub start_date: NaiveDate,
    /// Per-(hour, state) noise on template minutes, in minutes.
    pub sigma: f64,
    /// Probability that any single minute record carries a BAD quality flag.
    pub corruption_rate: f64,
    pub seed: u64,
    pub effects: Vec<EffectSpec>,
    /// Optional replacement for the built-in daily templates; per state, 24
    /// nonnegative values whose per-hour sum over states is 60.
    pub templates: Option<BTreeMap<StateLabel, Vec<f64>>>,
}

impl Default for HerdSpec {
    fn default() -> Self {
        HerdSpec {
            roster: desk_roster(),
            days: 52,
            start_date: NaiveDate::from_ymd_opt(2024, 3, 1).unwrap(),
            sigma: 2.0,
            corruption_rate: 0.001,
            seed: 0,
            effects: default_effects(),
            templates: None,
        }
    }
}

impl HerdSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.roster.is_empty() {
            return Err(SynthError::InvalidSpec("roster is empty".into()));
        }
        if self.roster.iter().any(|g| g.count == 0) {
            return Err(SynthError::InvalidSpec("roster group with zero animals".into()));
        }
        if self.days == 0 {
            return Err(SynthError::InvalidSpec("days must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(SynthError::InvalidSpec(format!("sigma {} must be >= 0", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(SynthError::InvalidSpec(format!(
                "corruption rate {} outside [0,1)",
                self.corruption_rate
            )));
        }
        for e in &self.effects {
            if e.state == StateLabel::MediumActivity {
                return Err(SynthError::InvalidSpec(
                    "MediumActivity absorbs effect offsets and cannot carry one".into(),
                ));
            }
        }
        if let Some(templates) = &self.templates {
            for (state, t) in templates {
                if t.len() != 24 {
                    return Err(SynthError::InvalidSpec(format!(
                        "template for {state:?} has {} values, need 24",
                        t.len()
                    )));
                }
                if t.iter().any(|&v| !(0.0..=60.0).contains(&v)) {
                    return Err(SynthError::InvalidSpec(format!(
                        "template for {state:?} has values outside [0,60]"
                    )));
                }
            }
            for h in 0..24 {
                let sum: f64 =
                    StateLabel::ALL.iter().map(|s| base_template_value(self, *s, h)).sum();
                if (sum - 60.0).abs() > 1e-6 {
                    return Err(SynthError::InvalidSpec(format!(
                        "templates sum to {sum} minutes at hour {h}, need 60"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Desk-scale roster: one breed/sex across all dehorning relief arms plus the
/// untouched baseline, 14 head total.
pub fn desk_roster() -> Vec<RosterGroup> {
    let g = |treatment: &str, count: usize| RosterGroup {
        breed: Breed::Brahman,
        sex: Sex::Female,
        treatment: crate::model::parse_treatment(treatment).unwrap(),
        count,
    };
    vec![g("D,N", 2), g("D,T", 3), g("D,M", 2), g("D,T+M", 2), g("P", 5)]
}

/// Full published herd composition: per (treatment, breed, sex) head counts.
pub fn field_roster() -> Vec<RosterGroup> {
    let rows: [(&str, [(usize, usize); 5]); 13] = [
        // (treatment, [(F count, M count) for Angus, Brahman, Brangus, Charolais, Crossbred])
        ("C,M", [(0, 1), (0, 1), (0, 1), (0, 0), (0, 1)]),
        ("C,N", [(0, 1), (0, 1), (0, 0), (0, 0), (0, 1)]),
        ("C,T", [(0, 1), (0, 3), (0, 2), (0, 0), (0, 6)]),
        ("C,T+M", [(0, 1), (0, 1), (0, 0), (0, 0), (0, 1)]),
        ("D,M", [(0, 0), (70, 0), (1, 0), (2, 2), (13, 0)]),
        ("D,N", [(0, 0), (39, 0), (1, 0), (2, 2), (9, 0)]),
        ("D,T", [(0, 0), (101, 3), (3, 0), (4, 7), (20, 1)]),
        ("D,T+M", [(0, 0), (66, 2), (4, 0), (3, 0), (12, 0)]),
        ("D+C,M", [(0, 0), (0, 50), (0, 2), (0, 0), (0, 10)]),
        ("D+C,N", [(0, 0), (0, 30), (0, 2), (0, 0), (0, 7)]),
        ("D+C,T", [(0, 1), (0, 81), (0, 3), (0, 0), (0, 22)]),
        ("D+C,T+M", [(0, 0), (0, 50), (0, 1), (0, 0), (0, 13)]),
        ("P", [(13, 14), (14, 5), (10, 0), (3, 1), (38, 0)]),
    ];
    let mut roster = Vec::new();
    for (code, counts) in rows {
        let treatment = crate::model::parse_treatment(code).unwrap();
        for (b, &(f, m)) in Breed::ALL.iter().zip(counts.iter()) {
            if f > 0 {
                roster.push(RosterGroup { breed: *b, sex: Sex::Female, treatment, count: f });
            }
            if m > 0 {
                roster.push(RosterGroup { breed: *b, sex: Sex::Male, treatment, count: m });
            }
        }
    }
    roster
}

/// Built-in treatment effects: pain suppresses walking, eating and grazing,
/// most under no relief and least under the combined relief arm. The
/// untouched baseline carries no offsets.
pub fn default_effects() -> Vec<EffectSpec> {
    let e = |relief, state, minutes_per_day| EffectSpec { relief, state, minutes_per_day };
    vec![
        e(Relief::NegativeControl, StateLabel::Walking, -40.0),
        e(Relief::NegativeControl, StateLabel::Eating, -35.0),
        e(Relief::NegativeControl, StateLabel::Grazing, -30.0),
        e(Relief::TopicalAnaesthetic, StateLabel::Walking, -15.0),
        e(Relief::TopicalAnaesthetic, StateLabel::Eating, -12.0),
        e(Relief::TopicalAnaesthetic, StateLabel::Grazing, -10.0),
        e(Relief::Meloxicam, StateLabel::Walking, -10.0),
        e(Relief::Meloxicam, StateLabel::Eating, -8.0),
        e(Relief::Meloxicam, StateLabel::Grazing, -7.0),
        e(Relief::TopicalPlusMeloxicam, StateLabel::Walking, -4.0),
        e(Relief::TopicalPlusMeloxicam, StateLabel::Eating, -3.0),
        e(Relief::TopicalPlusMeloxicam, StateLabel::Grazing, -2.0),
    ]
}

/// Eight-term Gaussian fit of the bimodal day/night resting pattern: long
/// overnight plateaus, a sharp pre-dawn peak, and a midday trough. The third
/// term's huge amplitude is compensated by a far-off-axis center; it
/// contributes a slowly decaying shoulder over the visible day.
const REST_CURVE_TERMS: [(f64, f64, f64); 8] = [
    (51.29, 2.823, 2.957),
    (44.42, 24.19, 3.936),
    (1.378e14, -40.24, 7.546),
    (19.29, 13.55, 3.22),
    (16.18, 19.06, 0.9367),
    (19.25, 4.588, 0.5802),
    (29.29, 20.39, 1.802),
    (20.45, 9.812, 2.834),
];

/// Raw resting curve in minutes per hour at clock hour x (unclamped).
pub fn rest_curve(x: f64) -> f64 {
    REST_CURVE_TERMS
        .iter()
        .map(|&(a, b, c)| {
            let z = (x - b) / c;
            a * (-z * z).exp()
        })
        .sum()
}

fn bump(h: f64, center: f64, width: f64) -> f64 {
    let z = (h - center) / width;
    (-z * z).exp()
}

/// Relative weight of each non-resting state at a clock hour. The leftover
/// minutes after resting split proportionally to these.
fn activity_weight(state: StateLabel, h: f64) -> f64 {
    use std::f64::consts::TAU;
    match state {
        StateLabel::Resting => 0.0,
        StateLabel::Rumination => 1.5 + (TAU * (h - 2.0) / 24.0).cos(),
        StateLabel::HighActivity => 0.3 + 0.5 * bump(h, 11.0, 5.0),
        StateLabel::MediumActivity => 1.0,
        StateLabel::Panting => 0.02 + 1.2 * bump(h, 13.0, 3.0),
        StateLabel::Grazing => 1.2 * (bump(h, 8.0, 3.0) + bump(h, 17.0, 3.0)),
        StateLabel::Walking => 0.4 + 0.8 * bump(h, 10.0, 4.0) + 0.6 * bump(h, 16.0, 4.0),
        StateLabel::Eating => 1.6 * (bump(h, 7.0, 2.0) + bump(h, 18.0, 2.5)),
    }
}

/// Built-in 24-hour template for one state, real-valued minutes per hour.
/// Resting follows the fitted curve clamped to [0,60]; the other states
/// partition what is left of each hour.
pub fn default_template(state: StateLabel) -> [f64; 24] {
    let mut out = [0.0; 24];
    for h in 0..24 {
        let x = h as f64;
        let rest = rest_curve(x).clamp(0.0, 60.0);
        if state == StateLabel::Resting {
            out[h] = rest;
        } else {
            let total: f64 = StateLabel::ALL.iter().map(|s| activity_weight(*s, x)).sum();
            out[h] = (60.0 - rest) * activity_weight(state, x) / total;
        }
    }
    out
}

fn sidx(state: StateLabel) -> usize {
    StateLabel::ALL.iter().position(|s| *s == state).unwrap()
}

fn base_template_value(spec: &HerdSpec, state: StateLabel, hour: usize) -> f64 {
    match spec.templates.as_ref().and_then(|m| m.get(&state)) {
        Some(t) => t[hour],
        None => default_template(state)[hour],
    }
}

/// Per-cohort hourly templates: real-valued after treatment effects, and the
/// integer-minute quantization actually realized per hour.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTemplates {
    /// Indexed [state in StateLabel::ALL order][hour].
    pub real: [[f64; 24]; 8],
    pub minutes: [[u32; 24]; 8],
}

impl CohortTemplates {
    pub fn real_for(&self, state: StateLabel) -> &[f64; 24] {
        &self.real[sidx(state)]
    }

    pub fn minutes_for(&self, state: StateLabel) -> &[u32; 24] {
        &self.minutes[sidx(state)]
    }
}

/// Largest-remainder quantization of one hour's real-valued state minutes
/// into integers summing exactly 60. Ties go to the lower state index.
pub fn quantize_hour(real: &[f64; 8]) -> [u32; 8] {
    let raw_sum: f64 = real.iter().sum();
    let scale = if raw_sum > 1e-12 { 60.0 / raw_sum } else { 0.0 };
    let mut base = [0u32; 8];
    let mut rem = [0.0f64; 8];
    let mut used = 0u32;
    for s in 0..8 {
        let q = if scale > 0.0 { real[s] * scale } else { if s == 0 { 60.0 } else { 0.0 } };
        base[s] = q.floor() as u32;
        rem[s] = q - q.floor();
        used += base[s];
    }
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| rem[b].partial_cmp(&rem[a]).unwrap().then(a.cmp(&b)));
    let deficit = 60u32.saturating_sub(used);
    for &s in order.iter().take(deficit as usize) {
        base[s] += 1;
    }
    base
}

pub fn cohort_templates(
    spec: &HerdSpec,
    treatment: CombinedTreatment,
) -> Result<CohortTemplates, SynthError> {
    let mut real = [[0.0f64; 24]; 8];
    for (i, s) in StateLabel::ALL.iter().enumerate() {
        for h in 0..24 {
            real[i][h] = base_template_value(spec, *s, h);
        }
    }
    let medium = sidx(StateLabel::MediumActivity);
    for e in spec.effects.iter().filter(|e| e.relief == treatment.relief()) {
        let i = sidx(e.state);
        let mass: f64 = real[i].iter().sum();
        for h in 0..24 {
            let delta = if mass > 1e-9 {
                e.minutes_per_day * real[i][h] / mass
            } else {
                e.minutes_per_day / 24.0
            };
            real[i][h] += delta;
            real[medium][h] -= delta;
        }
    }
    for (i, s) in StateLabel::ALL.iter().enumerate() {
        for h in 0..24 {
            if real[i][h] < -1e-9 || real[i][h] > 60.0 + 1e-9 {
                return Err(SynthError::InvalidSpec(format!(
                    "effects push {s:?} to {} minutes at hour {h}",
                    real[i][h]
                )));
            }
            real[i][h] = real[i][h].clamp(0.0, 60.0);
        }
    }
    let mut minutes = [[0u32; 24]; 8];
    for h in 0..24 {
        let column: [f64; 8] = std::array::from_fn(|i| real[i][h]);
        let q = quantize_hour(&column);
        for i in 0..8 {
            minutes[i][h] = q[i];
        }
    }
    Ok(CohortTemplates { real, minutes })
}

/// Per-animal generator streams are decorrelated by index, independent of
/// roster ordering.
fn animal_rng(seed: u64, animal_idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ animal_idx.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generate the herd: the canonical 11-column sensor CSV, a ground-truth CSV
/// (animal_id, hour_serial, state, true_minutes — pre-corruption), and the
/// ingested dataset. Byte-identical output for identical specs.
pub fn generate(
    spec: &HerdSpec,
    sensor_path: &Path,
    truth_path: &Path,
) -> Result<RawDataset, SynthError> {
    spec.validate()?;

    let mut sensor = csv::Writer::from_writer(std::io::BufWriter::new(std::fs::File::create(
        sensor_path,
    )?));
    sensor.write_record(CANONICAL_SCHEMA)?;
    let mut truth = std::io::BufWriter::new(std::fs::File::create(truth_path)?);
    writeln!(truth, "animal_id,hour_serial,state,true_minutes")?;

    let mut record_id = 0u64;
    let mut animal_idx = 0u64;
    for group in &spec.roster {
        let templates = cohort_templates(spec, group.treatment)?;
        for _ in 0..group.count {
            animal_idx += 1;
            let animal_id = format!("A{animal_idx:04}");
            let device_id = format!("DEV{animal_idx:04}");
            let mut rng = animal_rng(spec.seed, animal_idx);
            for day in 0..spec.days {
                let date = spec
                    .start_date
                    .checked_add_days(Days::new(day as u64))
                    .ok_or_else(|| SynthError::InvalidSpec("date overflow".into()))?;
                let date_str = date.format("%Y-%m-%d").to_string();
                for hour in 0..24usize {
                    // Perturb the hour's template column; the noise draws
                    // happen unconditionally so sigma variants of one seed
                    // stay sample-aligned.
                    let mut perturbed = [0.0f64; 8];
                    for i in 0..8 {
                        let z: f64 = rng.sample(StandardNormal);
                        perturbed[i] =
                            (templates.real[i][hour] + spec.sigma * z).max(0.0);
                    }
                    if perturbed.iter().sum::<f64>() <= 1e-9 {
                        perturbed = std::array::from_fn(|i| templates.real[i][hour]);
                    }
                    let minutes = if spec.sigma == 0.0 {
                        // Exact noiseless path: realized minutes are the
                        // quantized template itself.
                        std::array::from_fn(|i| templates.minutes[i][hour])
                    } else {
                        quantize_hour(&perturbed)
                    };

                    let hour_serial = 1 + day as u64 * 24 + hour as u64;
                    for (i, s) in StateLabel::ALL.iter().enumerate() {
                        writeln!(
                            truth,
                            "{animal_id},{hour_serial},{},{}",
                            s.token(),
                            minutes[i]
                        )?;
                    }

                    let mut slots: Vec<StateLabel> = Vec::with_capacity(60);
                    for (i, s) in StateLabel::ALL.iter().enumerate() {
                        for _ in 0..minutes[i] {
                            slots.push(*s);
                        }
                    }
                    slots.shuffle(&mut rng);

                    for (minute, state) in slots.iter().enumerate() {
                        let corrupt: f64 = rng.gen();
                        let flag = if corrupt < spec.corruption_rate { "BAD" } else { "OK" };
                        record_id += 1;
                        sensor.write_record([
                            format!("R{record_id:09}").as_str(),
                            &animal_id,
                            group.breed.token(),
                            group.sex.token(),
                            group.treatment.procedure().code(),
                            group.treatment.relief().code(),
                            &date_str,
                            &format!("{hour:02}:{minute:02}"),
                            state.token(),
                            flag,
                            &device_id,
                        ])?;
                    }
                }
            }
        }
    }
    sensor.flush()?;
    truth.flush()?;
    drop(sensor);
    drop(truth);

    Ok(load_csv(sensor_path, &CANONICAL_SCHEMA, &LoadOptions::default())?)
}
