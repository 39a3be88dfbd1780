//! Single-stage subcommands: flag/config-file merging, shared output-directory
//! plumbing, and one runner per command.
//!
//! Every command accepts `--config <json>` whose keys are the snake_case field
//! names of its flags; flags take precedence over file values. The merged,
//! effective values are what the JSON summary line reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use herdtwin_core::aggregate::{
    cohort_average, daily_profile, hourly_budget, profile_to_csv, series_from_csv, series_to_csv,
    DailyProfile,
};
use herdtwin_core::filter::{design_lowpass, fill_gaps, FirWindow};
use herdtwin_core::fit::{fit, model_selection, ArityGrids, CurveFamily};
use herdtwin_core::ingest::{
    census_to_csv, cohort_census, load_csv, segment, Cohort, LoadOptions, RawDataset,
    CANONICAL_SCHEMA,
};
use herdtwin_core::lstm::{
    load_checkpoint, make_dataset, predict_cycle, save_checkpoint, sweep, sweep_to_csv,
    trace_to_csv, train, LstmConfig, SweepAxis, SweepOptions,
};
use herdtwin_core::model::{parse_treatment, Breed, CohortKey, HourlySeries, Sex, StateLabel};
use herdtwin_core::synth::{field_roster, generate, HerdSpec};
use herdtwin_core::twin::{
    assess_pain, export_report, update_twin, PainWeights, TwinRegistry, UpdateOptions,
};

use crate::StageError;

/// Shared run context from the global flags.
pub struct Ctx {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed_flag: Option<u64>,
    /// $HERDTWIN_SEED; lowest-precedence seed source above built-in defaults.
    pub seed_env: Option<u64>,
}

impl Ctx {
    /// Parse `--config` into the command's own file-config type; defaults
    /// when no file was given.
    pub fn file_config<T: DeserializeOwned + Default>(&self) -> Result<T, StageError> {
        match &self.config {
            None => Ok(T::default()),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| StageError::Data(format!("config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| StageError::Data(format!("config {}: {e}", path.display())))
            }
        }
    }

    /// Seed precedence: `--seed` flag, then the command's config-file value,
    /// then $HERDTWIN_SEED, then `default`.
    pub fn seed(&self, file: Option<u64>, default: u64) -> u64 {
        self.seed_flag.or(file).or(self.seed_env).unwrap_or(default)
    }

    /// Write an artifact inside --out, creating directories as needed.
    /// Returns the name back for summary plumbing.
    pub fn write(&self, name: &str, contents: &str) -> Result<String, StageError> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        Ok(name.to_string())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Fill unset flags from the config file: `merge!(flags, file; a, b, c)`.
macro_rules! merge {
    ($flags:expr, $file:expr; $($f:ident),+ $(,)?) => {{
        let mut merged = $flags;
        let file = $file;
        $( if merged.$f.is_none() { merged.$f = file.$f; } )+
        merged
    }};
}

pub(crate) fn parse_state(token: &str) -> Result<StateLabel, StageError> {
    StateLabel::parse_token(token).map_err(|e| StageError::Data(e.to_string()))
}

/// Parse a cohort slug such as `BRAHMAN-F-D+C,T+M` (breed and sex tokens
/// never contain dashes, treatment codes never do either).
pub(crate) fn parse_cohort_slug(slug: &str) -> Result<CohortKey, StageError> {
    let mut parts = slug.splitn(3, '-');
    let (Some(breed), Some(sex), Some(code)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(StageError::Data(format!(
            "cohort slug must look like BREED-SEX-TREATMENT, got {slug:?}"
        )));
    };
    Ok(CohortKey {
        breed: Breed::parse_token(breed)?,
        sex: Sex::parse_token(sex)?,
        treatment: parse_treatment(code)?,
    })
}

fn read_input(path: &Path) -> Result<String, StageError> {
    fs::read_to_string(path)
        .map_err(|e| StageError::Data(format!("input {}: {e}", path.display())))
}

fn load_series(path: &Path, cohort: CohortKey, state: StateLabel) -> Result<HourlySeries, StageError> {
    Ok(series_from_csv(&read_input(path)?, cohort, state)?)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// Full herd specification JSON (roster, effects, templates, ...).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in roster: "desk" (14 animals) or "field" (759 animals).
    #[arg(long)]
    pub roster: Option<String>,
    /// Observation days per animal.
    #[arg(long)]
    pub days: Option<u32>,
    /// Per-(hour, state) noise on template minutes, in minutes.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Probability that a minute record carries a BAD quality flag.
    #[arg(long)]
    pub corruption: Option<f64>,
    /// First calendar day, YYYY-MM-DD.
    #[arg(long)]
    pub start_date: Option<String>,
    /// Sensor CSV name inside --out.
    #[arg(long)]
    pub sensor: Option<String>,
    /// Ground-truth CSV name inside --out.
    #[arg(long)]
    pub truth: Option<String>,
    #[arg(skip)]
    pub seed: Option<u64>,
}

fn roster_by_name(name: &str) -> Result<Vec<herdtwin_core::synth::RosterGroup>, StageError> {
    match name {
        "desk" => Ok(herdtwin_core::synth::desk_roster()),
        "field" => Ok(field_roster()),
        other => Err(StageError::Data(format!("unknown roster {other:?} (want desk or field)"))),
    }
}

pub fn run_synth(ctx: &Ctx, args: SynthArgs) -> Result<Value, StageError> {
    let file: SynthArgs = ctx.file_config()?;
    let args = merge!(args, file; spec, roster, days, sigma, corruption, start_date, sensor, truth, seed);

    let mut spec = match &args.spec {
        Some(path) => serde_json::from_str::<HerdSpec>(&read_input(path)?)
            .map_err(|e| StageError::Data(format!("herd spec {}: {e}", path.display())))?,
        None => HerdSpec::default(),
    };
    if let Some(roster) = &args.roster {
        spec.roster = roster_by_name(roster)?;
    }
    if let Some(days) = args.days {
        spec.days = days;
    }
    if let Some(sigma) = args.sigma {
        spec.sigma = sigma;
    }
    if let Some(corruption) = args.corruption {
        spec.corruption_rate = corruption;
    }
    if let Some(date) = &args.start_date {
        spec.start_date = date
            .parse()
            .map_err(|e| StageError::Data(format!("start date {date:?}: {e}")))?;
    }
    // Flag beats config beats spec file; $HERDTWIN_SEED only fills in when no
    // spec file was given (a spec's absent seed reads as an explicit 0).
    if let Some(s) = ctx.seed_flag.or(args.seed) {
        spec.seed = s;
    } else if args.spec.is_none() {
        if let Some(s) = ctx.seed_env {
            spec.seed = s;
        }
    }

    let sensor = args.sensor.unwrap_or_else(|| "herd.csv".into());
    let truth = args.truth.unwrap_or_else(|| "truth.csv".into());
    fs::create_dir_all(&ctx.out)?;
    let dataset = generate(&spec, &ctx.path(&sensor), &ctx.path(&truth))?;
    let cohorts = segment(&dataset)?;

    Ok(json!({
        "sensor": sensor,
        "truth": truth,
        "animals": dataset.animal_registry.len(),
        "cohorts": cohorts.len(),
        "rows": dataset.row_count,
        "rejects": dataset.reject_count,
        "days": spec.days,
        "sigma": spec.sigma,
        "corruption": spec.corruption_rate,
        "seed": spec.seed,
    }))
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IngestArgs {
    /// Sensor CSV to validate and load.
    #[arg(long = "in")]
    #[serde(alias = "in")]
    pub input: Option<PathBuf>,
    /// Quarantine CSV name inside --out (default <input>.rejects.csv).
    #[arg(long)]
    pub rejects: Option<String>,
    /// Census CSV name inside --out.
    #[arg(long)]
    pub census: Option<String>,
    /// Accepted records held in memory before spilling to temp segments.
    #[arg(long)]
    pub row_budget: Option<usize>,
}

fn require_input(input: Option<PathBuf>) -> Result<PathBuf, StageError> {
    input.ok_or_else(|| StageError::Data("no input file; pass --in".into()))
}

/// Load a sensor CSV with the quarantine sidecar directed into --out.
fn load_sensor(ctx: &Ctx, input: &Path, row_budget: Option<usize>) -> Result<RawDataset, StageError> {
    let mut options = LoadOptions::default();
    let name = input.file_name().map(|s| s.to_string_lossy().into_owned());
    options.rejects_path =
        Some(ctx.path(&format!("{}.rejects.csv", name.as_deref().unwrap_or("input"))));
    if let Some(budget) = row_budget {
        options.row_budget = budget;
    }
    fs::create_dir_all(&ctx.out)?;
    Ok(load_csv(input, &CANONICAL_SCHEMA, &options)?)
}

pub fn run_ingest(ctx: &Ctx, args: IngestArgs) -> Result<Value, StageError> {
    let file: IngestArgs = ctx.file_config()?;
    let args = merge!(args, file; input, rejects, census, row_budget);
    let input = require_input(args.input)?;

    let mut options = LoadOptions::default();
    if let Some(budget) = args.row_budget {
        options.row_budget = budget;
    }
    let rejects_name = args.rejects.unwrap_or_else(|| {
        format!(
            "{}.rejects.csv",
            input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or("input".into())
        )
    });
    fs::create_dir_all(&ctx.out)?;
    options.rejects_path = Some(ctx.path(&rejects_name));
    let dataset = load_csv(&input, &CANONICAL_SCHEMA, &options)?;

    let cohorts = segment(&dataset)?;
    let census = cohort_census(&cohorts);
    let census_name = args.census.unwrap_or_else(|| "census.csv".into());
    ctx.write(&census_name, &census_to_csv(&census))?;

    Ok(json!({
        "input": input,
        "rows": dataset.row_count,
        "rejects": dataset.reject_count,
        "rejects_file": rejects_name,
        "animals": dataset.animal_registry.len(),
        "cohorts": cohorts.len(),
        "epoch": dataset.epoch().map(|e| e.to_string()),
        "census": census_name,
    }))
}

// ---------------------------------------------------------------------------
// aggregate

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateArgs {
    /// Sensor CSV to aggregate.
    #[arg(long = "in")]
    #[serde(alias = "in")]
    pub input: Option<PathBuf>,
    /// State token (REST, GRAZE, ...) or "all".
    #[arg(long)]
    pub state: Option<String>,
    /// Cohort slug (e.g. BRAHMAN-F-P) or "all".
    #[arg(long)]
    pub cohort: Option<String>,
}

fn selected_states(arg: &Option<String>) -> Result<Vec<StateLabel>, StageError> {
    match arg.as_deref() {
        None | Some("all") => Ok(StateLabel::ALL.to_vec()),
        Some(token) => Ok(vec![parse_state(token)?]),
    }
}

/// Per-animal hourly budgets averaged into the cohort series for one state.
fn cohort_state_series(
    cohort: &Cohort,
    state: StateLabel,
    epoch: chrono::NaiveDateTime,
) -> Result<HourlySeries, StageError> {
    let per_animal: Vec<HourlySeries> = cohort
        .animals
        .iter()
        .map(|(animal_id, records)| hourly_budget(animal_id, cohort.key, records, state, epoch))
        .collect::<Result<_, _>>()?;
    Ok(cohort_average(&per_animal)?)
}

pub fn run_aggregate(ctx: &Ctx, args: AggregateArgs) -> Result<Value, StageError> {
    let file: AggregateArgs = ctx.file_config()?;
    let args = merge!(args, file; input, state, cohort);
    let input = require_input(args.input)?;

    let dataset = load_sensor(ctx, &input, None)?;
    let epoch = dataset
        .epoch()
        .ok_or_else(|| StageError::Data("dataset has no records".into()))?;
    let cohorts = segment(&dataset)?;
    let states = selected_states(&args.state)?;
    let wanted = match args.cohort.as_deref() {
        None | Some("all") => None,
        Some(slug) => Some(parse_cohort_slug(slug)?),
    };

    let mut files = 0usize;
    let mut cohorts_done = 0usize;
    for (key, cohort) in &cohorts {
        if wanted.is_some_and(|w| w != *key) {
            continue;
        }
        cohorts_done += 1;
        for &state in &states {
            let series = cohort_state_series(cohort, state, epoch)?;
            let slug = key.slug();
            ctx.write(&format!("series-{slug}-{}.csv", state.token()), &series_to_csv(&series))?;
            let profile = daily_profile(&series)?;
            ctx.write(
                &format!("profile-{slug}-{}.csv", state.token()),
                &profile_to_csv(&profile),
            )?;
            files += 2;
        }
    }
    if cohorts_done == 0 {
        return Err(StageError::Data("no cohort matched the selection".into()));
    }

    Ok(json!({
        "input": input,
        "cohorts": cohorts_done,
        "states": states.len(),
        "files": files,
    }))
}

// ---------------------------------------------------------------------------
// filter

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FilterArgs {
    /// Hourly series CSV to filter.
    #[arg(long = "in")]
    #[serde(alias = "in")]
    pub input: Option<PathBuf>,
    /// Cohort label for the output series (the CSV does not store one).
    #[arg(long)]
    pub cohort: Option<String>,
    /// State label for the output series.
    #[arg(long)]
    pub state: Option<String>,
    /// Filter length in taps.
    #[arg(long)]
    pub fir_length: Option<usize>,
    /// Cutoff as a fraction of Nyquist on the hourly grid.
    #[arg(long)]
    pub fir_cutoff: Option<f64>,
    /// Window function: hamming or rectangular.
    #[arg(long)]
    pub fir_window: Option<String>,
    /// Output CSV name inside --out.
    #[arg(long)]
    pub output: Option<String>,
}

pub(crate) fn parse_window(name: &str) -> Result<FirWindow, StageError> {
    match name {
        "hamming" => Ok(FirWindow::Hamming),
        "rectangular" | "rect" => Ok(FirWindow::Rectangular),
        other => Err(StageError::Data(format!(
            "unknown window {other:?} (want hamming or rectangular)"
        ))),
    }
}

pub fn run_filter(ctx: &Ctx, args: FilterArgs) -> Result<Value, StageError> {
    let file: FilterArgs = ctx.file_config()?;
    let args = merge!(args, file; input, cohort, state, fir_length, fir_cutoff, fir_window, output);
    let input = require_input(args.input)?;

    let cohort = parse_cohort_slug(args.cohort.as_deref().unwrap_or("BRAHMAN-F-P"))?;
    let state = parse_state(args.state.as_deref().unwrap_or("REST"))?;
    let length = args.fir_length.unwrap_or(herdtwin_core::filter::DEFAULT_FIR_LENGTH);
    let cutoff = args.fir_cutoff.unwrap_or(herdtwin_core::filter::DEFAULT_FIR_CUTOFF);
    let window = parse_window(args.fir_window.as_deref().unwrap_or("hamming"))?;

    let series = load_series(&input, cohort, state)?;
    let (filled, interpolated) = fill_gaps(&series);
    let filter = design_lowpass(length, cutoff, window)?;
    let filtered = herdtwin_core::filter::apply(&filter, &filled)?;

    let output = args
        .output
        .unwrap_or_else(|| format!("filtered-{}.csv", file_stem(&input)));
    ctx.write(&output, &series_to_csv(&filtered))?;

    Ok(json!({
        "input": input,
        "output": output,
        "fir_length": length,
        "fir_cutoff": cutoff,
        "fir_window": args.fir_window.as_deref().unwrap_or("hamming"),
        "points": filtered.points.len(),
        "interpolated": interpolated.iter().filter(|f| **f).count(),
    }))
}

// ---------------------------------------------------------------------------
// fit

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FitArgs {
    /// Daily profile CSV (or an hourly series CSV, fitted on raw points).
    #[arg(long = "in")]
    #[serde(alias = "in")]
    pub input: Option<PathBuf>,
    /// Fit one family only: gaussian, sine, polynomial, or fourier.
    /// Omitted: rank all four families over the standard arity grids.
    #[arg(long)]
    pub family: Option<String>,
    /// Term count / degree / harmonic count for --family.
    #[arg(long)]
    pub terms: Option<usize>,
    /// Ranked-selection CSV name inside --out.
    #[arg(long)]
    pub selection: Option<String>,
    /// Fitted-curve JSON name inside --out.
    #[arg(long)]
    pub output: Option<String>,
    #[arg(skip)]
    pub seed: Option<u64>,
}

/// Points to fit, from either CSV layout. Profile rows give one point per
/// clock hour; series rows give one point per surviving hour (x = clock).
fn fit_points(text: &str) -> Result<Vec<(f64, f64)>, StageError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut points = Vec::new();
    match header {
        "hour_of_day,minutes,support" => {
            for line in lines {
                let mut cells = line.split(',');
                let (Some(h), Some(m)) = (cells.next(), cells.next()) else { continue };
                if m.is_empty() {
                    continue; // hour never observed
                }
                let h: f64 = h.parse().map_err(|_| {
                    StageError::Data(format!("bad hour_of_day in profile row {line:?}"))
                })?;
                let m: f64 = m.parse().map_err(|_| {
                    StageError::Data(format!("bad minutes in profile row {line:?}"))
                })?;
                points.push((h, m));
            }
        }
        "hour_serial,hour_of_day,minutes,n_animals" => {
            for line in lines {
                let mut cells = line.split(',');
                let (_, Some(h), Some(m)) = (cells.next(), cells.next(), cells.next()) else {
                    continue;
                };
                let h: f64 = h.parse().map_err(|_| {
                    StageError::Data(format!("bad hour_of_day in series row {line:?}"))
                })?;
                let m: f64 = m.parse().map_err(|_| {
                    StageError::Data(format!("bad minutes in series row {line:?}"))
                })?;
                points.push((h, m));
            }
        }
        other => {
            return Err(StageError::Data(format!(
                "unrecognized fit input header {other:?} (want a profile or series CSV)"
            )))
        }
    }
    if points.is_empty() {
        return Err(StageError::Data("fit input has no usable points".into()));
    }
    Ok(points)
}

fn family_by_name(name: &str, arity: Option<usize>) -> Result<CurveFamily, StageError> {
    // Default arities are the four headline fits: 8 terms except the
    // degree-9 polynomial.
    Ok(match name {
        "gaussian" => CurveFamily::GaussianSum(arity.unwrap_or(8)),
        "sine" => CurveFamily::SineSum(arity.unwrap_or(8)),
        "polynomial" | "poly" => CurveFamily::Polynomial(arity.unwrap_or(9)),
        "fourier" => CurveFamily::FourierSeries(arity.unwrap_or(8)),
        other => {
            return Err(StageError::Data(format!(
                "unknown family {other:?} (want gaussian, sine, polynomial, or fourier)"
            )))
        }
    })
}

pub fn run_fit(ctx: &Ctx, args: FitArgs) -> Result<Value, StageError> {
    let file: FitArgs = ctx.file_config()?;
    let args = merge!(args, file; input, family, terms, selection, output, seed);
    let input = require_input(args.input)?;
    let points = fit_points(&read_input(&input)?)?;
    let seed = ctx.seed(args.seed, 0);
    let output = args.output.unwrap_or_else(|| "fit.json".into());

    match &args.family {
        Some(name) => {
            let family = family_by_name(name, args.terms)?;
            let curve = fit(family, &points, seed)?;
            let mut doc = serde_json::to_string_pretty(&curve)?;
            doc.push('\n');
            ctx.write(&output, &doc)?;
            Ok(json!({
                "input": input,
                "output": output,
                "family": curve.family.name(),
                "arity": curve.family.arity(),
                "sse": curve.sse,
                "residual_variance": curve.residual_variance,
                "converged": curve.converged,
                "points": points.len(),
                "seed": seed,
            }))
        }
        None => {
            let table = model_selection(&points, &ArityGrids::default(), seed)?;
            let selection = args.selection.unwrap_or_else(|| "selection.csv".into());
            ctx.write(&selection, &herdtwin_core::fit::selection_to_csv(&table))?;
            let mut doc = serde_json::to_string_pretty(&table)?;
            doc.push('\n');
            ctx.write(&output, &doc)?;
            let winner = table
                .rows
                .first()
                .ok_or_else(|| StageError::Data("every family failed to fit".into()))?;
            Ok(json!({
                "input": input,
                "output": output,
                "selection": selection,
                "winner_family": winner.curve.family.name(),
                "winner_arity": winner.curve.family.arity(),
                "winner_residual_variance": winner.curve.residual_variance,
                "families_ranked": table.rows.len(),
                "families_failed": table.failures.len(),
                "points": points.len(),
                "seed": seed,
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// train

#[derive(Args, Deserialize, Default, Clone)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Hourly series CSV to train on.
    #[arg(long = "in")]
    #[serde(alias = "in")]
    pub input: Option<PathBuf>,
    /// Cohort label for the series (the CSV does not store one).
    #[arg(long)]
    pub cohort: Option<String>,
    /// State label for the series.
    #[arg(long)]
    pub state: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Window length in hours.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Window stride in hours (seq_len gives non-overlapping windows).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Chronological train fraction.
    #[arg(long)]
    pub split: Option<f64>,
    /// Checkpoint JSON name inside --out.
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Per-epoch loss CSV name inside --out.
    #[arg(long)]
    pub trace: Option<String>,
    #[arg(skip)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    fn lstm_config(&self, seed: u64) -> LstmConfig {
        LstmConfig {
            hidden_units: self.hidden.unwrap_or(128),
            num_layers: self.layers.unwrap_or(2),
            batch_size: self.batch.unwrap_or(24),
            epochs: self.epochs.unwrap_or(2000),
            learning_rate: self.lr.unwrap_or(1e-3),
            seed,
            sequence_length: self.seq_len.unwrap_or(24),
        }
    }
}

fn series_labels(
    cohort: &Option<String>,
    state: &Option<String>,
) -> Result<(CohortKey, StateLabel), StageError> {
    Ok((
        parse_cohort_slug(cohort.as_deref().unwrap_or("BRAHMAN-F-P"))?,
        parse_state(state.as_deref().unwrap_or("REST"))?,
    ))
}

pub fn run_train(ctx: &Ctx, args: TrainArgs) -> Result<Value, StageError> {
    let file: TrainArgs = ctx.file_config()?;
    let args = merge!(args, file; input, cohort, state, hidden, layers, batch, epochs, lr,
        seq_len, stride, split, checkpoint, trace, seed);
    let input = require_input(args.input.clone())?;
    let (cohort, state) = series_labels(&args.cohort, &args.state)?;

    let series = load_series(&input, cohort, state)?;
    let (filled, flags) = fill_gaps(&series);
    let interpolated = flags.iter().filter(|f| **f).count();

    let seq_len = args.seq_len.unwrap_or(24);
    let data = make_dataset(
        &filled,
        args.split.unwrap_or(0.9),
        seq_len,
        args.stride.unwrap_or(seq_len),
    )?;
    let mut config = args.lstm_config(ctx.seed(args.seed, 0));
    config.batch_size = config.batch_size.min(data.train.len()).max(1);
    let mut model = herdtwin_core::lstm::LstmModel::new(config)?;
    let trace = train(&mut model, &data)?;

    let checkpoint = args.checkpoint.unwrap_or_else(|| "checkpoint.json".into());
    fs::create_dir_all(&ctx.out)?;
    save_checkpoint(&model, &ctx.path(&checkpoint))?;
    let trace_name = args.trace.unwrap_or_else(|| "trace.csv".into());
    ctx.write(&trace_name, &trace_to_csv(&trace))?;

    Ok(json!({
        "input": input,
        "checkpoint": checkpoint,
        "trace": trace_name,
        "train_windows": data.train.len(),
        "test_windows": data.test.len(),
        "interpolated_hours": interpolated,
        "final_train_mse_scaled": trace.final_train_mse,
        "final_test_mse_minutes2": trace.final_test_mse,
        "seed": model.config.seed,
    }))
}

// ---------------------------------------------------------------------------
// predict

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PredictArgs {
    /// Model checkpoint JSON.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Prediction CSV name inside --out.
    #[arg(long)]
    pub output: Option<String>,
}

pub fn run_predict(ctx: &Ctx, args: PredictArgs) -> Result<Value, StageError> {
    let file: PredictArgs = ctx.file_config()?;
    let args = merge!(args, file; checkpoint, output);
    let checkpoint = args
        .checkpoint
        .ok_or_else(|| StageError::Data("no checkpoint; pass --checkpoint".into()))?;

    let model = load_checkpoint(&checkpoint)?;
    let cycle = predict_cycle(&model, &[])?;
    let output = args.output.unwrap_or_else(|| "prediction.csv".into());
    ctx.write(&output, &cycle_to_csv(&cycle))?;

    let (peak_hour, peak) = cycle
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .expect("24 values");
    Ok(json!({
        "checkpoint": checkpoint,
        "output": output,
        "daily_total_minutes": cycle.iter().sum::<f64>(),
        "peak_hour": peak_hour,
        "peak_minutes": peak,
    }))
}

pub(crate) fn cycle_to_csv(cycle: &[f64]) -> String {
    let mut out = String::from("hour_of_day,minutes\n");
    for (h, v) in cycle.iter().enumerate() {
        out.push_str(&format!("{h},{v}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepArgs {
    /// Hourly series CSV to sweep on.
    #[arg(long = "in")]
    #[serde(alias = "in")]
    pub input: Option<PathBuf>,
    /// Axis to vary: hidden, layers, batch, or epochs.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated axis values (default: the axis' standard grid).
    #[arg(long)]
    pub values: Option<String>,
    /// Seeded repetitions per cell.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Use the full epoch grid up to 20000 instead of capping at 2000.
    #[arg(long)]
    pub full_sweep: bool,
    /// Cohort label for the series.
    #[arg(long)]
    pub cohort: Option<String>,
    /// State label for the series.
    #[arg(long)]
    pub state: Option<String>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub split: Option<f64>,
    /// Sweep table CSV name inside --out (default sweep-<axis>.csv).
    #[arg(long)]
    pub output: Option<String>,
    #[arg(skip)]
    pub seed: Option<u64>,
}

fn parse_axis(name: &str) -> Result<SweepAxis, StageError> {
    match name {
        "hidden" | "hidden_units" => Ok(SweepAxis::HiddenUnits),
        "layers" | "num_layers" => Ok(SweepAxis::NumLayers),
        "batch" | "batch_size" => Ok(SweepAxis::BatchSize),
        "epochs" => Ok(SweepAxis::Epochs),
        other => Err(StageError::Data(format!(
            "unknown axis {other:?} (want hidden, layers, batch, or epochs)"
        ))),
    }
}

fn parse_value_list(list: &str) -> Result<Vec<usize>, StageError> {
    list.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| StageError::Data(format!("bad axis value {v:?} in --values")))
        })
        .collect()
}

pub fn run_sweep(ctx: &Ctx, args: SweepArgs) -> Result<Value, StageError> {
    let file: SweepArgs = ctx.file_config()?;
    let full_sweep = args.full_sweep || file.full_sweep;
    let args = merge!(args, file; input, axis, values, reps, cohort, state, seq_len, stride, split, output, seed);
    let input = require_input(args.input)?;
    let (cohort, state) = series_labels(&args.cohort, &args.state)?;

    let series = load_series(&input, cohort, state)?;
    let (filled, _) = fill_gaps(&series);
    let seq_len = args.seq_len.unwrap_or(24);
    let data = make_dataset(
        &filled,
        args.split.unwrap_or(0.9),
        seq_len,
        args.stride.unwrap_or(seq_len),
    )?;

    let axis = parse_axis(args.axis.as_deref().unwrap_or("hidden"))?;
    let mut opts = SweepOptions::new(axis);
    if let Some(values) = &args.values {
        opts.values = parse_value_list(values)?;
    }
    if let Some(reps) = args.reps {
        opts.repetitions = reps;
    }
    opts.base_seed = ctx.seed(args.seed, 0);
    opts.full_epoch_grid = full_sweep;
    // Standard companions, adapted to the dataset at hand: batch cannot
    // exceed the train count and the window length is whatever the windows
    // were cut with. At full scale this is identical to the defaults.
    opts.override_base = Some(LstmConfig {
        hidden_units: if axis == SweepAxis::NumLayers { 16 } else { 128 },
        num_layers: 2,
        batch_size: 24.min(data.train.len()).max(1),
        epochs: 2000,
        learning_rate: 1e-3,
        seed: 0,
        sequence_length: seq_len,
    });

    let table = sweep(&data, &opts)?;
    let output = args.output.unwrap_or_else(|| format!("sweep-{}.csv", axis.name()));
    ctx.write(&output, &sweep_to_csv(&table))?;

    let best = table
        .cells
        .first()
        .ok_or_else(|| StageError::Data("sweep produced no cells".into()))?;
    Ok(json!({
        "input": input,
        "output": output,
        "axis": axis.name(),
        "cells": table.cells.len(),
        "repetitions": table.repetitions,
        "best_value": best.axis_value,
        "best_median_test_mse": best.rep_final_test.as_ref().map(|d| d.median),
        "seed": opts.base_seed,
    }))
}

// ---------------------------------------------------------------------------
// twin

#[derive(clap::Subcommand)]
pub enum TwinAction {
    /// Register a cohort/state key by training its model on a history series.
    Init(TwinInitArgs),
    /// Feed one day of actuals: compare against the standing prediction,
    /// fold the day in, and predict the next cycle.
    Update(TwinUpdateArgs),
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TwinInitArgs {
    /// History series CSV for the key.
    #[arg(long = "in")]
    #[serde(alias = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<String>,
    #[arg(long)]
    pub state: Option<String>,
    /// Registry directory name inside --out.
    #[arg(long)]
    pub registry: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(skip)]
    pub seed: Option<u64>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TwinUpdateArgs {
    /// One day of actuals as a series CSV (the next day grid for the key).
    #[arg(long = "in")]
    #[serde(alias = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<String>,
    #[arg(long)]
    pub state: Option<String>,
    /// Registry directory name inside --out.
    #[arg(long)]
    pub registry: Option<String>,
    /// Fine-tuning epochs per update cycle.
    #[arg(long)]
    pub fine_tune_epochs: Option<usize>,
    /// Retrain from scratch instead of fine-tuning.
    #[arg(long)]
    pub full_retrain: bool,
}

fn registry_dir(ctx: &Ctx, name: &Option<String>) -> PathBuf {
    ctx.path(name.as_deref().unwrap_or("registry"))
}

pub fn run_twin(ctx: &Ctx, action: TwinAction) -> Result<Value, StageError> {
    match action {
        TwinAction::Init(args) => {
            let file: TwinInitArgs = ctx.file_config()?;
            let args = merge!(args, file; input, cohort, state, registry, hidden, layers, batch, epochs, lr, seed);
            let input = require_input(args.input)?;
            let (cohort, state) = series_labels(&args.cohort, &args.state)?;
            let series = load_series(&input, cohort, state)?;

            let dir = registry_dir(ctx, &args.registry);
            let mut registry = if dir.join("index.json").is_file() {
                TwinRegistry::load(&dir)?
            } else {
                TwinRegistry::new()
            };
            let config = LstmConfig {
                hidden_units: args.hidden.unwrap_or(128),
                num_layers: args.layers.unwrap_or(2),
                batch_size: args.batch.unwrap_or(24),
                epochs: args.epochs.unwrap_or(2000),
                learning_rate: args.lr.unwrap_or(1e-3),
                seed: ctx.seed(args.seed, 0),
                sequence_length: 24,
            };
            registry.init_key(&series, &config)?;
            registry.save(&dir)?;

            let entry = registry.entry(cohort, state).expect("just registered");
            Ok(json!({
                "registry": dir,
                "cohort": cohort.slug(),
                "state": state.token(),
                "keys": registry.len(),
                "last_trained_serial": entry.last_trained_serial,
                "seed": config.seed,
            }))
        }
        TwinAction::Update(args) => {
            let file: TwinUpdateArgs = ctx.file_config()?;
            let full_retrain = args.full_retrain || file.full_retrain;
            let args = merge!(args, file; input, cohort, state, registry, fine_tune_epochs);
            let input = require_input(args.input)?;
            let (cohort, state) = series_labels(&args.cohort, &args.state)?;
            let day = load_series(&input, cohort, state)?;

            let dir = registry_dir(ctx, &args.registry);
            let mut registry = TwinRegistry::load(&dir)?;
            let options = UpdateOptions {
                fine_tune_epochs: args.fine_tune_epochs.unwrap_or(50),
                full_retrain,
            };
            let report = update_twin(&mut registry, &day, &options)?;
            registry.save(&dir)?;

            match report {
                None => Ok(json!({
                    "registry": dir,
                    "cohort": cohort.slug(),
                    "state": state.token(),
                    "bootstrap": true,
                })),
                Some(report) => Ok(json!({
                    "registry": dir,
                    "cohort": cohort.slug(),
                    "state": state.token(),
                    "bootstrap": false,
                    "cycle_start_serial": report.cycle_start_serial,
                    "cycle_mse": report.cycle_mse,
                    "cycle_rms_minutes": report.cycle_mse.sqrt(),
                })),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// report

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ReportArgs {
    /// Sensor CSV; profiles are recomputed from it.
    #[arg(long = "in")]
    #[serde(alias = "in")]
    pub input: Option<PathBuf>,
    /// Breed token selecting the comparison group.
    #[arg(long)]
    pub breed: Option<String>,
    /// Sex token selecting the comparison group.
    #[arg(long)]
    pub sex: Option<String>,
    /// walking,eating,grazing deficit weights.
    #[arg(long)]
    pub weights: Option<String>,
    /// Twin registry directory name inside --out; its drift history is
    /// embedded in the report when present.
    #[arg(long)]
    pub registry: Option<String>,
    /// Report JSON name inside --out.
    #[arg(long)]
    pub report: Option<String>,
    /// Human-readable report name inside --out.
    #[arg(long)]
    pub text: Option<String>,
}

fn parse_weights(arg: &Option<String>) -> Result<PainWeights, StageError> {
    match arg {
        None => Ok(PainWeights::default()),
        Some(list) => {
            let vals: Vec<f64> = list
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| StageError::Data(format!("bad weight {v:?} in --weights")))
                })
                .collect::<Result<_, _>>()?;
            let [walking, eating, grazing] = vals[..] else {
                return Err(StageError::Data(
                    "--weights needs exactly three values: walking,eating,grazing".into(),
                ));
            };
            Ok(PainWeights { walking, eating, grazing })
        }
    }
}

/// Daily profiles for every state of every cohort in the breed/sex group.
fn group_profiles(
    cohorts: &BTreeMap<CohortKey, Cohort>,
    breed: Breed,
    sex: Sex,
    epoch: chrono::NaiveDateTime,
) -> Result<Vec<DailyProfile>, StageError> {
    let mut profiles = Vec::new();
    for (key, cohort) in cohorts {
        if key.breed != breed || key.sex != sex {
            continue;
        }
        for state in StateLabel::ALL {
            let series = cohort_state_series(cohort, state, epoch)?;
            profiles.push(daily_profile(&series)?);
        }
    }
    Ok(profiles)
}

pub fn run_report(ctx: &Ctx, args: ReportArgs) -> Result<Value, StageError> {
    let file: ReportArgs = ctx.file_config()?;
    let args = merge!(args, file; input, breed, sex, weights, registry, report, text);
    let input = require_input(args.input)?;

    let breed = Breed::parse_token(args.breed.as_deref().unwrap_or("BRAHMAN"))?;
    let sex = Sex::parse_token(args.sex.as_deref().unwrap_or("F"))?;
    let weights = parse_weights(&args.weights)?;

    let dataset = load_sensor(ctx, &input, None)?;
    let epoch = dataset
        .epoch()
        .ok_or_else(|| StageError::Data("dataset has no records".into()))?;
    let cohorts = segment(&dataset)?;
    let profiles = group_profiles(&cohorts, breed, sex, epoch)?;
    if profiles.is_empty() {
        return Err(StageError::Data(format!(
            "no {} {} cohorts in the input",
            breed.token(),
            sex.token()
        )));
    }

    let assessment = assess_pain(&profiles, &weights)?;

    let mut drift_history = Vec::new();
    if let Some(name) = &args.registry {
        let dir = ctx.path(name);
        if dir.join("index.json").is_file() {
            let registry = TwinRegistry::load(&dir)?;
            let keys: Vec<_> = registry.keys().cloned().collect();
            for (cohort, state) in keys {
                if cohort.breed != breed || cohort.sex != sex {
                    continue;
                }
                let entry = registry.entry(cohort, state).expect("listed key");
                drift_history.extend(entry.drift_history.iter().cloned());
            }
        }
    }

    let report = export_report(&assessment, &profiles, &drift_history)?;
    let report_name = args.report.unwrap_or_else(|| "report.json".into());
    ctx.write(&report_name, &report.to_json())?;
    let text_name = args.text.unwrap_or_else(|| "report.txt".into());
    ctx.write(&text_name, &report.to_text())?;

    let ranking: Vec<String> =
        assessment.ranking.iter().map(|s| s.treatment.code()).collect();
    Ok(json!({
        "input": input,
        "report": report_name,
        "text": text_name,
        "breed": breed.token(),
        "sex": sex.token(),
        "treatments_ranked": ranking.len(),
        "least_pain": ranking.first(),
        "most_pain": ranking.last(),
        "fallback_raw_totals": assessment.fallback_raw_totals,
        "drift_cycles": drift_history.len(),
    }))
}
