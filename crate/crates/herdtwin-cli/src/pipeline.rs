//! End-to-end run: synth -> ingest -> aggregate -> filter -> fit -> train ->
//! twin -> report, with every artifact content-hashed into `manifest.json`.
//!
//! Two runs with the same effective config produce byte-identical manifests:
//! nothing time- or host-dependent is written to any artifact. A failed stage
//! still writes the manifest for whatever completed, tagged with the failure.

use std::collections::BTreeMap;
use std::fs;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use herdtwin_core::aggregate::{
    cohort_average, daily_profile, hourly_budget, profile_to_csv, series_to_csv, DailyProfile,
};
use herdtwin_core::filter::{
    apply, design_lowpass, fill_gaps, FirWindow, DEFAULT_FIR_CUTOFF, DEFAULT_FIR_LENGTH,
    DEFAULT_FIR_WINDOW,
};
use herdtwin_core::fit::{model_selection, selection_to_csv, ArityGrids};
use herdtwin_core::ingest::{census_to_csv, cohort_census, segment, Cohort};
use herdtwin_core::lstm::{make_dataset, save_checkpoint, trace_to_csv, train, LstmConfig, LstmModel};
use herdtwin_core::model::{CohortKey, HourlySeries, StateLabel};
use herdtwin_core::synth::{field_roster, generate, HerdSpec};
use herdtwin_core::twin::{
    assess_pain, export_report, update_twin, DriftReport, PainWeights, TwinRegistry, UpdateOptions,
};

use crate::stages::{cycle_to_csv, parse_cohort_slug, parse_state, parse_window, Ctx};
use crate::StageError;

#[derive(Args)]
pub struct PipelineArgs {
    /// Built-in roster: "desk" (14 animals) or "field" (759 animals).
    #[arg(long)]
    pub roster: Option<String>,
    #[arg(long)]
    pub days: Option<u32>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub corruption: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// State the twin tracks (token, e.g. REST).
    #[arg(long)]
    pub focus_state: Option<String>,
    /// Cohort the twin tracks (slug); default: largest positive-control
    /// cohort in the herd.
    #[arg(long)]
    pub focus_cohort: Option<String>,
    /// FIR window override: hamming or rectangular.
    #[arg(long)]
    pub fir_window: Option<String>,
    #[arg(long)]
    pub fir_length: Option<usize>,
    #[arg(long)]
    pub fir_cutoff: Option<f64>,
    /// Train the forecaster on the filtered series instead of the raw
    /// hourly aggregate.
    #[arg(long)]
    pub train_on_filtered: bool,
    #[arg(long)]
    pub fine_tune_epochs: Option<usize>,
}

/// Effective pipeline configuration; also the `--config` file schema and the
/// `config` block echoed into the manifest.
#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub herd: HerdSpec,
    /// Cohort slug the twin tracks; None picks the largest positive-control
    /// cohort.
    pub focus_cohort: Option<String>,
    pub focus_state: StateLabel,
    pub fir_length: usize,
    pub fir_cutoff: f64,
    pub fir_window: FirWindow,
    /// The filter exists to denoise what people look at; the forecaster
    /// learns the raw hourly aggregate unless this is set.
    pub train_on_filtered: bool,
    pub lstm: LstmConfig,
    pub split: f64,
    pub stride: usize,
    pub fine_tune_epochs: usize,
    pub weights: PainWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            herd: HerdSpec::default(),
            focus_cohort: None,
            focus_state: StateLabel::Resting,
            fir_length: DEFAULT_FIR_LENGTH,
            fir_cutoff: DEFAULT_FIR_CUTOFF,
            fir_window: DEFAULT_FIR_WINDOW,
            train_on_filtered: false,
            lstm: LstmConfig {
                hidden_units: 128,
                num_layers: 2,
                batch_size: 24,
                epochs: 2000,
                learning_rate: 1e-3,
                seed: 0,
                sequence_length: 24,
            },
            split: 0.9,
            stride: 24,
            fine_tune_epochs: 50,
            weights: PainWeights::default(),
        }
    }
}

fn effective_config(ctx: &Ctx, args: &PipelineArgs) -> Result<PipelineConfig, StageError> {
    let mut cfg: PipelineConfig = ctx.file_config()?;
    if let Some(roster) = &args.roster {
        cfg.herd.roster = match roster.as_str() {
            "desk" => herdtwin_core::synth::desk_roster(),
            "field" => field_roster(),
            other => {
                return Err(StageError::Data(format!(
                    "unknown roster {other:?} (want desk or field)"
                )))
            }
        };
    }
    if let Some(days) = args.days {
        cfg.herd.days = days;
    }
    if let Some(sigma) = args.sigma {
        cfg.herd.sigma = sigma;
    }
    if let Some(corruption) = args.corruption {
        cfg.herd.corruption_rate = corruption;
    }
    if let Some(epochs) = args.epochs {
        cfg.lstm.epochs = epochs;
    }
    if let Some(hidden) = args.hidden {
        cfg.lstm.hidden_units = hidden;
    }
    if let Some(layers) = args.layers {
        cfg.lstm.num_layers = layers;
    }
    if let Some(batch) = args.batch {
        cfg.lstm.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        cfg.lstm.learning_rate = lr;
    }
    if let Some(state) = &args.focus_state {
        cfg.focus_state = parse_state(state)?;
    }
    if args.focus_cohort.is_some() {
        cfg.focus_cohort = args.focus_cohort.clone();
    }
    if let Some(window) = &args.fir_window {
        cfg.fir_window = parse_window(window)?;
    }
    if let Some(length) = args.fir_length {
        cfg.fir_length = length;
    }
    if let Some(cutoff) = args.fir_cutoff {
        cfg.fir_cutoff = cutoff;
    }
    if args.train_on_filtered {
        cfg.train_on_filtered = true;
    }
    if let Some(epochs) = args.fine_tune_epochs {
        cfg.fine_tune_epochs = epochs;
    }
    // Seed precedence: --seed flag, config file, $HERDTWIN_SEED, 0. The env
    // fallback only applies when no config file was given (a file's absent
    // seed is indistinguishable from an explicit 0).
    let seed = if let Some(s) = ctx.seed_flag {
        Some(s)
    } else if ctx.config.is_none() {
        ctx.seed_env
    } else {
        None
    };
    if let Some(s) = seed {
        cfg.herd.seed = s;
        cfg.lstm.seed = s;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct ArtifactDigest {
    bytes: u64,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects completed stages and content digests as the run progresses, so
/// the manifest can be written whether the run finishes or dies mid-stage.
struct ManifestBuilder {
    config: Value,
    stages: Vec<String>,
    current: &'static str,
    artifacts: BTreeMap<String, ArtifactDigest>,
}

impl ManifestBuilder {
    fn new(config: Value) -> Self {
        ManifestBuilder { config, stages: Vec::new(), current: "", artifacts: BTreeMap::new() }
    }

    fn begin(&mut self, stage: &'static str) {
        self.current = stage;
    }

    fn done(&mut self) {
        self.stages.push(self.current.to_string());
    }

    /// Hash an artifact already written under --out, keyed by relative path.
    fn record(&mut self, ctx: &Ctx, name: &str) -> Result<(), StageError> {
        let bytes = fs::read(ctx.path(name))?;
        self.artifacts.insert(
            name.replace('\\', "/"),
            ArtifactDigest { bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) },
        );
        Ok(())
    }

    /// Write an artifact under --out and record it in one go.
    fn write(&mut self, ctx: &Ctx, name: &str, contents: &str) -> Result<(), StageError> {
        ctx.write(name, contents)?;
        self.record(ctx, name)
    }

    fn finish(&self, ctx: &Ctx, failure: Option<&StageError>) -> Result<String, StageError> {
        let mut doc = json!({
            "manifest_version": 1,
            "config": self.config,
            "stages": self.stages,
            "artifacts": self.artifacts,
        });
        if let Some(e) = failure {
            doc["failed_stage"] = json!(self.current);
            doc["error"] = json!(e.to_string());
        }
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        ctx.write("manifest.json", &text)?;
        Ok(sha256_hex(text.as_bytes()))
    }
}

pub fn run_pipeline(ctx: &Ctx, args: PipelineArgs) -> Result<Value, StageError> {
    let cfg = effective_config(ctx, &args)?;
    fs::create_dir_all(&ctx.out)?;
    let mut manifest = ManifestBuilder::new(serde_json::to_value(&cfg)?);
    match execute(ctx, &cfg, &mut manifest) {
        Ok(mut summary) => {
            let digest = manifest.finish(ctx, None)?;
            if let Some(map) = summary.as_object_mut() {
                map.insert("manifest".into(), json!("manifest.json"));
                map.insert("manifest_sha256".into(), json!(digest));
                map.insert("artifacts".into(), json!(manifest.artifacts.len()));
            }
            Ok(summary)
        }
        Err(e) => {
            // Best effort: the partial manifest documents how far the run got.
            let _ = manifest.finish(ctx, Some(&e));
            Err(e)
        }
    }
}

/// The focus cohort: explicit slug if configured, else the largest
/// positive-control cohort (first in key order on ties).
fn pick_focus_cohort(
    cfg: &PipelineConfig,
    cohorts: &BTreeMap<CohortKey, Cohort>,
) -> Result<CohortKey, StageError> {
    if let Some(slug) = &cfg.focus_cohort {
        let key = parse_cohort_slug(slug)?;
        if !cohorts.contains_key(&key) {
            return Err(StageError::Data(format!("focus cohort {slug} not in the herd")));
        }
        return Ok(key);
    }
    let mut best: Option<(CohortKey, usize)> = None;
    for (key, cohort) in cohorts {
        if !key.treatment.is_positive_control() {
            continue;
        }
        let n = cohort.animals.len();
        if best.is_none_or(|(_, bn)| n > bn) {
            best = Some((*key, n));
        }
    }
    best.map(|(k, _)| k).ok_or_else(|| {
        StageError::Data(
            "herd has no positive-control cohort; set focus_cohort explicitly".into(),
        )
    })
}

/// Points with serials in `start..=end`, labels preserved.
fn slice_serials(series: &HourlySeries, start: u64, end: u64) -> HourlySeries {
    HourlySeries {
        cohort: series.cohort,
        state: series.state,
        points: series
            .points
            .iter()
            .filter(|p| (start..=end).contains(&p.hour_serial))
            .copied()
            .collect(),
        origin: series.origin.clone(),
    }
}

fn execute(ctx: &Ctx, cfg: &PipelineConfig, man: &mut ManifestBuilder) -> Result<Value, StageError> {
    // synth ------------------------------------------------------------
    man.begin("synth");
    let dataset = generate(&cfg.herd, &ctx.path("herd.csv"), &ctx.path("truth.csv"))?;
    man.record(ctx, "herd.csv")?;
    man.record(ctx, "truth.csv")?;
    if ctx.path("herd.csv.rejects.csv").is_file() {
        man.record(ctx, "herd.csv.rejects.csv")?;
    }
    man.done();

    // ingest -----------------------------------------------------------
    man.begin("ingest");
    let epoch = dataset
        .epoch()
        .ok_or_else(|| StageError::Data("generated herd has no records".into()))?;
    let cohorts = segment(&dataset)?;
    man.write(ctx, "census.csv", &census_to_csv(&cohort_census(&cohorts)))?;
    man.done();

    // aggregate ---------------------------------------------------------
    man.begin("aggregate");
    let focus = pick_focus_cohort(cfg, &cohorts)?;
    let state = cfg.focus_state;
    let slug = focus.slug();
    let token = state.token();
    let per_animal: Vec<HourlySeries> = cohorts[&focus]
        .animals
        .iter()
        .map(|(animal_id, records)| hourly_budget(animal_id, focus, records, state, epoch))
        .collect::<Result<_, _>>()?;
    let raw = cohort_average(&per_animal)?;
    man.write(ctx, &format!("series-{slug}-{token}.csv"), &series_to_csv(&raw))?;
    let profile = daily_profile(&raw)?;
    man.write(ctx, &format!("profile-{slug}-{token}.csv"), &profile_to_csv(&profile))?;
    man.done();

    // filter ------------------------------------------------------------
    man.begin("filter");
    let (filled, _) = fill_gaps(&raw);
    let fir = design_lowpass(cfg.fir_length, cfg.fir_cutoff, cfg.fir_window)?;
    let filtered = apply(&fir, &filled)?;
    man.write(ctx, &format!("filtered-{slug}-{token}.csv"), &series_to_csv(&filtered))?;
    man.done();

    // fit ----------------------------------------------------------------
    man.begin("fit");
    let fit_profile = daily_profile(&filtered)?;
    let points: Vec<(f64, f64)> = fit_profile
        .values
        .iter()
        .enumerate()
        .filter_map(|(h, v)| v.map(|v| (h as f64, v)))
        .collect();
    let selection = model_selection(&points, &ArityGrids::default(), cfg.lstm.seed)?;
    man.write(ctx, "selection.csv", &selection_to_csv(&selection))?;
    let mut fit_doc = serde_json::to_string_pretty(&selection)?;
    fit_doc.push('\n');
    man.write(ctx, "fit.json", &fit_doc)?;
    man.done();

    // train ---------------------------------------------------------------
    man.begin("train");
    // Whole days only: serials [s0, e0] with s0 on a day start, e0 on a day
    // end. The last two days are withheld from training so the twin can
    // bootstrap on one and report drift on the other.
    let train_input = if cfg.train_on_filtered { &filtered } else { &filled };
    let first = train_input.points.first().map(|p| p.hour_serial).unwrap_or(1);
    let last = train_input.points.last().map(|p| p.hour_serial).unwrap_or(0);
    let s0 = (first - 1).div_ceil(24) * 24 + 1;
    let e0 = last / 24 * 24;
    let days = if e0 >= s0 { (e0 - s0 + 1) / 24 } else { 0 };
    if days < 4 {
        return Err(StageError::Data(format!(
            "pipeline needs at least 4 complete days of hourly data, got {days}"
        )));
    }
    let history_end = s0 + (days - 2) * 24 - 1;
    let history = slice_serials(train_input, s0, history_end);
    let data = make_dataset(&history, cfg.split, 24, cfg.stride)?;
    let mut lstm_cfg = cfg.lstm.clone();
    lstm_cfg.sequence_length = 24;
    lstm_cfg.batch_size = lstm_cfg.batch_size.min(data.train.len()).max(1);
    let mut model = LstmModel::new(lstm_cfg)?;
    let trace = train(&mut model, &data)?;
    save_checkpoint(&model, &ctx.path("checkpoint.json"))?;
    man.record(ctx, "checkpoint.json")?;
    man.write(ctx, "trace.csv", &trace_to_csv(&trace))?;
    man.done();

    // twin -----------------------------------------------------------------
    man.begin("twin");
    let mut registry = TwinRegistry::new();
    registry.adopt(&history, model)?;
    let options =
        UpdateOptions { fine_tune_epochs: cfg.fine_tune_epochs, full_retrain: false };
    // Day slices come from the raw aggregate: drift is measured against what
    // was observed, not against interpolated or filtered values.
    let mut drift_reports: Vec<DriftReport> = Vec::new();
    for day in [days - 2, days - 1] {
        let lo = s0 + day * 24;
        let day_series = slice_serials(&raw, lo, lo + 23);
        if let Some(report) = update_twin(&mut registry, &day_series, &options)? {
            drift_reports.push(report);
        }
    }
    let registry_dir = ctx.path("registry");
    registry.save(&registry_dir)?;
    let mut entries: Vec<String> = fs::read_dir(&registry_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| format!("registry/{}", e.file_name().to_string_lossy()))
        .collect();
    entries.sort();
    for name in &entries {
        man.record(ctx, name)?;
    }
    let entry = registry.entry(focus, state).expect("adopted key");
    if let Some(prediction) = &entry.prediction {
        man.write(ctx, "prediction.csv", &cycle_to_csv(prediction))?;
    }
    let mut drift_doc = serde_json::to_string_pretty(&drift_reports)?;
    drift_doc.push('\n');
    man.write(ctx, "drift.json", &drift_doc)?;
    man.done();

    // report ------------------------------------------------------------
    man.begin("report");
    let mut profiles: Vec<DailyProfile> = Vec::new();
    for (key, cohort) in &cohorts {
        if key.breed != focus.breed || key.sex != focus.sex {
            continue;
        }
        for st in StateLabel::ALL {
            let per_animal: Vec<HourlySeries> = cohort
                .animals
                .iter()
                .map(|(animal_id, records)| hourly_budget(animal_id, *key, records, st, epoch))
                .collect::<Result<_, _>>()?;
            profiles.push(daily_profile(&cohort_average(&per_animal)?)?);
        }
    }
    let assessment = assess_pain(&profiles, &cfg.weights)?;
    let report = export_report(&assessment, &profiles, &drift_reports)?;
    man.write(ctx, "report.json", &report.to_json())?;
    man.write(ctx, "report.txt", &report.to_text())?;
    man.done();

    let drift_rms: Option<f64> = drift_reports.last().map(|r| r.cycle_mse.sqrt());
    let ranking: Vec<String> = assessment.ranking.iter().map(|s| s.treatment.code()).collect();
    Ok(json!({
        "focus_cohort": slug,
        "focus_state": token,
        "animals": dataset.animal_registry.len(),
        "rows": dataset.row_count,
        "rejects": dataset.reject_count,
        "days": days,
        "train_windows": data.train.len(),
        "test_windows": data.test.len(),
        "final_test_mse_minutes2": trace.final_test_mse,
        "drift_rms_minutes": drift_rms,
        "least_pain": ranking.first(),
        "most_pain": ranking.last(),
        "seed": cfg.lstm.seed,
    }))
}
