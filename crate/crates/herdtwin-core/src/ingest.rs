//! Sensor CSV ingestion: schema validation, row quarantine, per-animal
//! deduplication, registry construction, and cohort segmentation.
//!
//! The parse is single-pass and bounded-memory: accepted records accumulate
//! in per-animal buffers that spill to temporary JSON-lines segments once a
//! configurable row budget is exceeded. Only the registry and the duplicate
//! index stay resident.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Breed, CohortKey, CombinedTreatment, Procedure, Quality, Relief, SensorRecord, Sex,
    StateLabel,
};

/// The canonical 11-column input schema, in order.
pub const CANONICAL_SCHEMA: [&str; 11] = [
    "record_id",
    "animal_id",
    "breed",
    "sex",
    "procedure",
    "pain_relief",
    "date",
    "time",
    "state",
    "quality_flag",
    "device_id",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input file not found: {0}")]
    MissingFile(PathBuf),
    #[error("header mismatch: expected {expected:?}, found {found:?}")]
    SchemaMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("no rows were accepted from {0}")]
    EmptyDataset(PathBuf),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv read failure: {0}")]
    Csv(#[from] csv::Error),
    #[error("segment decode failure: {0}")]
    SegmentDecode(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Where quarantined rows go; defaults to `<input>.rejects.csv` next to
    /// the input file.
    pub rejects_path: Option<PathBuf>,
    /// Accepted records held in memory before spilling to a temp segment.
    pub row_budget: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { rejects_path: None, row_budget: 2_000_000 }
    }
}

/// Parsed dataset: the animal registry plus accepted records, some possibly
/// spilled to disk segments.
pub struct RawDataset {
    pub source_path: PathBuf,
    pub animal_registry: BTreeMap<String, (Breed, Sex, CombinedTreatment)>,
    pub row_count: u64,
    pub reject_count: u64,
    pub rejects_path: PathBuf,
    buffered: BTreeMap<String, Vec<SensorRecord>>,
    segments: Vec<PathBuf>,
    // Owns the spill directory for the dataset's lifetime.
    _spill_dir: Option<tempfile::TempDir>,
    earliest: Option<NaiveDateTime>,
}

impl RawDataset {
    /// Midnight of the earliest accepted record's date: the dataset epoch, so
    /// hour serial 1 is always 00:00 of the first day.
    pub fn epoch(&self) -> Option<NaiveDateTime> {
        self.earliest.map(|dt| dt.date().and_hms_opt(0, 0, 0).unwrap())
    }

    /// All accepted records (buffered + spilled), in no particular order.
    pub fn collect_records(&self) -> Result<Vec<SensorRecord>, IngestError> {
        let mut out: Vec<SensorRecord> = Vec::with_capacity(self.row_count as usize);
        for seg in &self.segments {
            let reader = BufReader::new(File::open(seg)?);
            for line in reader.lines() {
                out.push(serde_json::from_str(&line?)?);
            }
        }
        for records in self.buffered.values() {
            out.extend(records.iter().cloned());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub key: CohortKey,
    /// Animal id -> records sorted by timestamp, duplicates already removed.
    pub animals: BTreeMap<String, Vec<SensorRecord>>,
}

fn parse_timestamp(date: &str, time: &str) -> Option<NaiveDateTime> {
    let d = NaiveDate::parse_from_str(date.trim(), "%Y-%m-%d").ok()?;
    let t = NaiveTime::parse_from_str(time.trim(), "%H:%M").ok()?;
    Some(d.and_time(t))
}

/// Load and validate the sensor CSV against `schema` (normally
/// [`CANONICAL_SCHEMA`]). Malformed rows are quarantined to the rejects
/// sidecar with a reason column; rows whose only defect is an unreadable
/// state cell are accepted as `Corrupted` instead.
pub fn load_csv(
    path: &Path,
    schema: &[&str],
    options: &LoadOptions,
) -> Result<RawDataset, IngestError> {
    if !path.is_file() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header: Vec<String> =
        reader.headers()?.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    let expected: Vec<String> = schema.iter().map(|s| s.to_ascii_lowercase()).collect();
    if header != expected {
        return Err(IngestError::SchemaMismatch { expected, found: header });
    }

    let rejects_path = options.rejects_path.clone().unwrap_or_else(|| {
        let mut os = path.as_os_str().to_owned();
        os.push(".rejects.csv");
        PathBuf::from(os)
    });
    // Flexible: quarantined rows keep their original (possibly wrong) column
    // count, plus the trailing reason.
    let mut rejects =
        csv::WriterBuilder::new().flexible(true).from_path(&rejects_path)?;
    let mut reject_header: Vec<&str> = schema.to_vec();
    reject_header.push("reject_reason");
    rejects.write_record(&reject_header)?;

    let mut registry: BTreeMap<String, (Breed, Sex, CombinedTreatment)> = BTreeMap::new();
    let mut animal_index: HashMap<String, u32> = HashMap::new();
    let mut seen: HashSet<(u32, i64)> = HashSet::new();
    let mut buffered: BTreeMap<String, Vec<SensorRecord>> = BTreeMap::new();
    let mut buffered_rows = 0usize;
    let mut segments = Vec::new();
    let mut spill_dir: Option<tempfile::TempDir> = None;
    let mut row_count = 0u64;
    let mut reject_count = 0u64;
    let mut earliest: Option<NaiveDateTime> = None;

    fn reject<W: std::io::Write>(
        rejects: &mut csv::Writer<W>,
        record: &csv::StringRecord,
        reason: &str,
        count: &mut u64,
    ) -> Result<(), IngestError> {
        let mut row: Vec<&str> = record.iter().collect();
        row.push(reason);
        rejects.write_record(&row)?;
        *count += 1;
        Ok(())
    }

    for record in reader.records() {
        let record = record?;
        if record.len() != schema.len() {
            reject(&mut rejects, &record, "column_count", &mut reject_count)?;
            continue;
        }
        let animal_id = record[1].trim().to_string();
        if animal_id.is_empty() {
            reject(&mut rejects, &record, "empty_animal_id", &mut reject_count)?;
            continue;
        }
        let Ok(breed) = Breed::parse_token(&record[2]) else {
            reject(&mut rejects, &record, "bad_breed", &mut reject_count)?;
            continue;
        };
        let Ok(sex) = Sex::parse_token(&record[3]) else {
            reject(&mut rejects, &record, "bad_sex", &mut reject_count)?;
            continue;
        };
        let Ok(procedure) = Procedure::parse_code(&record[4]) else {
            reject(&mut rejects, &record, "bad_procedure", &mut reject_count)?;
            continue;
        };
        let Ok(relief) = Relief::parse_code(&record[5]) else {
            reject(&mut rejects, &record, "bad_relief", &mut reject_count)?;
            continue;
        };
        let Ok(treatment) = CombinedTreatment::new(procedure, relief) else {
            reject(&mut rejects, &record, "illegal_treatment", &mut reject_count)?;
            continue;
        };
        let Some(timestamp) = parse_timestamp(&record[6], &record[7]) else {
            reject(&mut rejects, &record, "bad_timestamp", &mut reject_count)?;
            continue;
        };
        let quality_flag = record[9].trim().to_ascii_uppercase();
        let flagged_bad = match quality_flag.as_str() {
            "OK" => false,
            "BAD" => true,
            _ => {
                reject(&mut rejects, &record, "bad_quality_flag", &mut reject_count)?;
                continue;
            }
        };

        // Registry: first row for an animal defines it; later rows must agree.
        match registry.get(&animal_id) {
            Some(&(b, s, t)) => {
                if (b, s, t) != (breed, sex, treatment) {
                    reject(&mut rejects, &record, "registry_conflict", &mut reject_count)?;
                    continue;
                }
            }
            None => {
                registry.insert(animal_id.clone(), (breed, sex, treatment));
            }
        }

        let next_idx = animal_index.len() as u32;
        let idx = *animal_index.entry(animal_id.clone()).or_insert(next_idx);
        if !seen.insert((idx, timestamp.and_utc().timestamp())) {
            reject(&mut rejects, &record, "duplicate_minute", &mut reject_count)?;
            continue;
        }

        // An unreadable state cell corrupts the record but does not reject
        // the row: the minute slot is still occupied.
        let state = StateLabel::parse_token(&record[8]).ok();
        let quality =
            if flagged_bad || state.is_none() { Quality::Corrupted } else { Quality::Valid };

        earliest = Some(match earliest {
            Some(e) if e <= timestamp => e,
            _ => timestamp,
        });
        buffered
            .entry(animal_id.clone())
            .or_default()
            .push(SensorRecord { animal_id, timestamp, state, quality });
        row_count += 1;
        buffered_rows += 1;

        if buffered_rows >= options.row_budget {
            let dir = match &spill_dir {
                Some(d) => d.path().to_path_buf(),
                None => {
                    let d = tempfile::tempdir()?;
                    let p = d.path().to_path_buf();
                    spill_dir = Some(d);
                    p
                }
            };
            let seg_path = dir.join(format!("segment-{:04}.jsonl", segments.len()));
            let mut w = std::io::BufWriter::new(File::create(&seg_path)?);
            for records in buffered.values() {
                for r in records {
                    serde_json::to_writer(&mut w, r)?;
                    w.write_all(b"\n")?;
                }
            }
            w.flush()?;
            segments.push(seg_path);
            buffered.clear();
            buffered_rows = 0;
        }
    }
    rejects.flush()?;

    if row_count == 0 {
        return Err(IngestError::EmptyDataset(path.to_path_buf()));
    }
    Ok(RawDataset {
        source_path: path.to_path_buf(),
        animal_registry: registry,
        row_count,
        reject_count,
        rejects_path,
        buffered,
        segments,
        _spill_dir: spill_dir,
        earliest,
    })
}

/// Group accepted records into cohorts keyed by (breed, sex, treatment).
/// Membership comes solely from the registry; animals with zero records
/// cannot occur (registry entries are created by accepted rows).
pub fn segment(dataset: &RawDataset) -> Result<BTreeMap<CohortKey, Cohort>, IngestError> {
    let mut by_animal: BTreeMap<String, Vec<SensorRecord>> = BTreeMap::new();
    for rec in dataset.collect_records()? {
        by_animal.entry(rec.animal_id.clone()).or_default().push(rec);
    }
    let mut cohorts: BTreeMap<CohortKey, Cohort> = BTreeMap::new();
    for (animal_id, mut records) in by_animal {
        records.sort_by_key(|r| r.timestamp);
        let (breed, sex, treatment) = dataset.animal_registry[&animal_id];
        let key = CohortKey { breed, sex, treatment };
        cohorts
            .entry(key)
            .or_insert_with(|| Cohort { key, animals: BTreeMap::new() })
            .animals
            .insert(animal_id, records);
    }
    Ok(cohorts)
}

/// One row per non-empty cohort with its distinct-animal count.
pub fn cohort_census(cohorts: &BTreeMap<CohortKey, Cohort>) -> Vec<(CohortKey, usize)> {
    cohorts.iter().map(|(k, c)| (*k, c.animals.len())).collect()
}

pub fn census_to_csv(census: &[(CohortKey, usize)]) -> String {
    let mut out = String::from("breed,sex,treatment,n_animals\n");
    for (key, n) in census {
        out.push_str(&format!(
            "{},{},\"{}\",{}\n",
            key.breed.token(),
            key.sex.token(),
            key.treatment.code(),
            n
        ));
    }
    out
}
