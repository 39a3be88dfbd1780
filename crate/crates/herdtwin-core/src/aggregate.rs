//! Minute records -> hourly state budgets -> cohort averages -> daily
//! profiles and treatment comparison tables.
//!
//! The corruption rule: an hour containing at least one `Corrupted` record is
//! destroyed outright — it contributes nothing downstream, and its serial is
//! simply absent from the budget series (never renumbered).

use std::collections::BTreeMap;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    hour_serial, Breed, CohortKey, CombinedTreatment, HourPoint, HourlySeries, Quality,
    SensorRecord, SeriesOrigin, Sex, StateLabel,
};

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("no input series")]
    EmptyInput,
    #[error("input series disagree on cohort or state")]
    MixedSeries,
    #[error("series has no points")]
    EmptySeries,
    #[error("profiles mix states: {0:?} vs {1:?}")]
    MixedState(StateLabel, StateLabel),
    #[error("profiles mix cohorts beyond treatment (breed/sex differ)")]
    MixedCohort,
    #[error("record at {0} precedes the dataset epoch")]
    RecordBeforeEpoch(NaiveDateTime),
    #[error("series csv row {row}: {reason}")]
    MalformedSeriesCsv { row: usize, reason: String },
}

/// 24-value mean-by-clock-hour summary of one state series. `values[h]` is
/// `None` exactly when no surviving hour had clock hour `h` (`support[h] == 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyProfile {
    pub cohort: CohortKey,
    pub state: StateLabel,
    pub values: [Option<f64>; 24],
    pub support: [u32; 24],
}

impl DailyProfile {
    /// Sum of the 24 mean values, skipping missing hours.
    pub fn daily_total(&self) -> f64 {
        self.values.iter().flatten().sum()
    }
}

/// Count minutes spent in `state` per clock hour for one animal's sorted
/// record list. Hours touched by any corrupted record are destroyed; partial
/// hours at the dataset edges are kept as-is.
pub fn hourly_budget(
    animal_id: &str,
    cohort: CohortKey,
    records: &[SensorRecord],
    state: StateLabel,
    epoch: NaiveDateTime,
) -> Result<HourlySeries, AggregateError> {
    debug_assert!(records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    let mut points = Vec::new();
    let mut current: Option<(u64, u8, f64, bool)> = None; // serial, hod, minutes, destroyed
    for rec in records {
        let serial = hour_serial(rec.timestamp, epoch)
            .map_err(|_| AggregateError::RecordBeforeEpoch(rec.timestamp))?;
        let hod = rec.timestamp.hour() as u8;
        match current {
            Some((s, _, _, _)) if s == serial => {}
            Some((s, h, m, destroyed)) => {
                debug_assert!(serial > s, "records must be sorted");
                if !destroyed {
                    points.push(HourPoint { hour_serial: s, hour_of_day: h, minutes: m });
                }
                current = Some((serial, hod, 0.0, false));
            }
            None => current = Some((serial, hod, 0.0, false)),
        }
        let slot = current.as_mut().unwrap();
        if rec.quality == Quality::Corrupted {
            slot.3 = true;
        } else if rec.state == Some(state) {
            slot.2 += 1.0;
        }
    }
    if let Some((s, h, m, destroyed)) = current {
        if !destroyed {
            points.push(HourPoint { hour_serial: s, hour_of_day: h, minutes: m });
        }
    }
    Ok(HourlySeries {
        cohort,
        state,
        points,
        origin: SeriesOrigin::SingleAnimal(animal_id.to_string()),
    })
}

/// Average same-cohort, same-state series by hour serial. Each serial's mean
/// runs over only the animals that still have that hour, so a destroyed hour
/// in one animal does not destroy the cohort's hour.
pub fn cohort_average(series: &[HourlySeries]) -> Result<HourlySeries, AggregateError> {
    let first = series.first().ok_or(AggregateError::EmptyInput)?;
    if series.iter().any(|s| s.cohort != first.cohort || s.state != first.state) {
        return Err(AggregateError::MixedSeries);
    }
    // serial -> (hod, sum, count); BTreeMap fixes both iteration order and
    // the accumulation order within each serial (input list order).
    let mut acc: BTreeMap<u64, (u8, f64, u32)> = BTreeMap::new();
    for s in series {
        for p in &s.points {
            let e = acc.entry(p.hour_serial).or_insert((p.hour_of_day, 0.0, 0));
            e.1 += p.minutes;
            e.2 += 1;
        }
    }
    let points = acc
        .into_iter()
        .map(|(serial, (hod, sum, n))| HourPoint {
            hour_serial: serial,
            hour_of_day: hod,
            minutes: sum / n as f64,
        })
        .collect();
    Ok(HourlySeries {
        cohort: first.cohort,
        state: first.state,
        points,
        origin: SeriesOrigin::CohortAverage(series.len()),
    })
}

/// Collapse a series to its 24-hour mean profile by clock hour.
pub fn daily_profile(series: &HourlySeries) -> Result<DailyProfile, AggregateError> {
    if series.points.is_empty() {
        return Err(AggregateError::EmptySeries);
    }
    let mut sums = [0.0f64; 24];
    let mut support = [0u32; 24];
    for p in &series.points {
        let h = p.hour_of_day as usize;
        sums[h] += p.minutes;
        support[h] += 1;
    }
    let mut values = [None; 24];
    for h in 0..24 {
        if support[h] > 0 {
            values[h] = Some(sums[h] / support[h] as f64);
        }
    }
    Ok(DailyProfile { cohort: series.cohort, state: series.state, values, support })
}

/// One treatment's column in a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonColumn {
    pub treatment: CombinedTreatment,
    pub values: [Option<f64>; 24],
    pub daily_total: f64,
}

/// Aligned 24 x k matrix of one state's profiles across treatments, columns
/// sorted by descending daily total (ties in canonical treatment order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub breed: Breed,
    pub sex: Sex,
    pub state: StateLabel,
    pub columns: Vec<ComparisonColumn>,
}

pub fn treatment_comparison(profiles: &[DailyProfile]) -> Result<ComparisonTable, AggregateError> {
    let first = profiles.first().ok_or(AggregateError::EmptyInput)?;
    for p in profiles {
        if p.state != first.state {
            return Err(AggregateError::MixedState(first.state, p.state));
        }
        if p.cohort.breed != first.cohort.breed || p.cohort.sex != first.cohort.sex {
            return Err(AggregateError::MixedCohort);
        }
    }
    let mut columns: Vec<ComparisonColumn> = profiles
        .iter()
        .map(|p| ComparisonColumn {
            treatment: p.cohort.treatment,
            values: p.values,
            daily_total: p.daily_total(),
        })
        .collect();
    columns.sort_by(|a, b| {
        b.daily_total
            .partial_cmp(&a.daily_total)
            .unwrap()
            .then(a.treatment.cmp(&b.treatment))
    });
    Ok(ComparisonTable {
        breed: first.cohort.breed,
        sex: first.cohort.sex,
        state: first.state,
        columns,
    })
}

/// CSV rows `hour_serial,hour_of_day,minutes,n_animals` for a series.
pub fn series_to_csv(series: &HourlySeries) -> String {
    let n = match &series.origin {
        SeriesOrigin::SingleAnimal(_) => 1,
        SeriesOrigin::CohortAverage(n) => *n,
    };
    let mut out = String::from("hour_serial,hour_of_day,minutes,n_animals\n");
    for p in &series.points {
        out.push_str(&format!("{},{},{},{}\n", p.hour_serial, p.hour_of_day, p.minutes, n));
    }
    out
}

/// Inverse of [`series_to_csv`]. The CSV carries no cohort or state columns,
/// so the caller supplies both; origin is reconstructed as a cohort average
/// of the recorded animal count (single-animal identity is not stored).
pub fn series_from_csv(
    text: &str,
    cohort: CohortKey,
    state: StateLabel,
) -> Result<HourlySeries, AggregateError> {
    let malformed = |row: usize, reason: &str| AggregateError::MalformedSeriesCsv {
        row,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "hour_serial,hour_of_day,minutes,n_animals")) => {}
        _ => return Err(malformed(1, "missing or unrecognized header")),
    }
    let mut points = Vec::new();
    let mut n_animals = 1usize;
    for (idx, line) in lines {
        let row = idx + 1;
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields.next().ok_or_else(|| malformed(row, &format!("missing {name}")))
        };
        let hour_serial: u64 = next("hour_serial")?
            .parse()
            .map_err(|_| malformed(row, "hour_serial is not an integer"))?;
        let hour_of_day: u8 = next("hour_of_day")?
            .parse()
            .map_err(|_| malformed(row, "hour_of_day is not an integer"))?;
        let minutes: f64 =
            next("minutes")?.parse().map_err(|_| malformed(row, "minutes is not a number"))?;
        n_animals =
            next("n_animals")?.parse().map_err(|_| malformed(row, "n_animals is not an integer"))?;
        if hour_of_day > 23 {
            return Err(malformed(row, "hour_of_day exceeds 23"));
        }
        if let Some(prev) = points.last() {
            let prev: &HourPoint = prev;
            if hour_serial <= prev.hour_serial {
                return Err(malformed(row, "hour_serial must increase strictly"));
            }
        }
        points.push(HourPoint { hour_serial, hour_of_day, minutes });
    }
    if points.is_empty() {
        return Err(AggregateError::EmptySeries);
    }
    Ok(HourlySeries { cohort, state, points, origin: SeriesOrigin::CohortAverage(n_animals) })
}

/// CSV rows `hour_of_day,minutes,support` for a daily profile; missing hours
/// render an empty minutes cell.
pub fn profile_to_csv(profile: &DailyProfile) -> String {
    let mut out = String::from("hour_of_day,minutes,support\n");
    for h in 0..24 {
        match profile.values[h] {
            Some(v) => out.push_str(&format!("{},{},{}\n", h, v, profile.support[h])),
            None => out.push_str(&format!("{},,0\n", h)),
        }
    }
    out
}
