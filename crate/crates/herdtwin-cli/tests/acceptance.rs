//! Acceptance gate: ten end-to-end criteria, one test (and one pass/fail
//! line) each. Tolerances and runtime budgets are asserted, not advisory.
//! Run with `--nocapture` to see the per-criterion summary lines.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tempfile::TempDir;

use herdtwin_core::aggregate::{cohort_average, daily_profile, hourly_budget, DailyProfile};
use herdtwin_core::filter::{design_lowpass, FirWindow};
use herdtwin_core::fit::{model_selection, ArityGrids, CurveFamily};
use herdtwin_core::ingest::segment;
use herdtwin_core::lstm::{
    gradient_check, make_dataset, predict_cycle, train, LstmConfig, LstmModel,
};
use herdtwin_core::model::{
    parse_treatment, Breed, CohortKey, HourPoint, HourlySeries, Quality, SensorRecord,
    SeriesOrigin, Sex, StateLabel,
};
use herdtwin_core::synth::{cohort_templates, generate, rest_curve, HerdSpec, RosterGroup};
use herdtwin_core::twin::assess_pain;

fn epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

fn brahman_f(treatment: &str) -> CohortKey {
    CohortKey {
        breed: Breed::Brahman,
        sex: Sex::Female,
        treatment: parse_treatment(treatment).unwrap(),
    }
}

fn pass(n: usize, label: &str, started: Instant) {
    println!("ACCEPTANCE {n:2} {label}: PASS ({:.1}s)", started.elapsed().as_secs_f64());
}

// -------------------------------------------------------------------- 1

/// The printed 8-term resting curve vs an independent compensated
/// (Kahan) term-by-term summation, 1e-9 relative at every clock hour.
#[test]
fn criterion_01_resting_curve_matches_independent_summation() {
    let started = Instant::now();
    // The printed coefficient table, restated here on purpose.
    let terms: [(f64, f64, f64); 8] = [
        (51.29, 2.823, 2.957),
        (44.42, 24.19, 3.936),
        (1.378e14, -40.24, 7.546),
        (19.29, 13.55, 3.22),
        (16.18, 19.06, 0.9367),
        (19.25, 4.588, 0.5802),
        (29.29, 20.39, 1.802),
        (20.45, 9.812, 2.834),
    ];
    for h in 0..24 {
        let x = h as f64;
        // Evaluate smallest-first with compensated summation so the
        // accumulation order differs from the implementation's.
        let mut parts: Vec<f64> = terms
            .iter()
            .map(|&(a, b, c)| a * (-((x - b) * (x - b)) / (c * c)).exp())
            .collect();
        parts.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for p in parts {
            let y = p - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let got = rest_curve(x);
        let rel = (got - sum).abs() / sum.abs().max(1e-30);
        assert!(rel < 1e-9, "hour {h}: {got} vs oracle {sum}, rel {rel}");
    }
    assert!(started.elapsed().as_secs_f64() < 1.0, "budget 1 s");
    pass(1, "resting-curve oracle", started);
}

// -------------------------------------------------------------------- 2

/// Family ranking on noisy samples of the resting curve: the 8-term Gaussian
/// sum wins and the degree-9 polynomial has the worst residual variance, on
/// at least 9 of 10 seeds.
#[test]
fn criterion_02_family_ranking_on_noisy_curve_samples() {
    let started = Instant::now();
    let grids = ArityGrids {
        gaussian: vec![8],
        sine: vec![8],
        polynomial: vec![9],
        fourier: vec![8],
    };
    let mut good = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let points: Vec<(f64, f64)> = (0..24)
            .map(|h| (h as f64, rest_curve(h as f64) + noise.sample(&mut rng)))
            .collect();
        let table = model_selection(&points, &grids, seed).unwrap();
        assert!(table.failures.is_empty(), "seed {seed}: {:?}", table.failures);
        assert_eq!(table.rows.len(), 4, "seed {seed}: all four families must rank");
        let first = &table.rows[0].curve.family;
        let last = &table.rows[3].curve.family;
        if *first == CurveFamily::GaussianSum(8) && *last == CurveFamily::Polynomial(9) {
            good += 1;
        }
    }
    assert!(good >= 9, "only {good}/10 seeds ranked gaussian first and polynomial last");
    assert!(started.elapsed().as_secs_f64() < 120.0, "budget 2 min");
    pass(2, "family ranking (Table-III shape)", started);
}

// -------------------------------------------------------------------- 3

/// Hourly budgets vs a brute-force recount on 1000 randomized record
/// streams, exact equality including destroyed hours.
#[test]
fn criterion_03_hourly_budget_matches_brute_force_recount() {
    let started = Instant::now();
    let cohort = brahman_f("P");
    for fixture in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(fixture);
        let n_hours: u64 = rng.gen_range(1..=40);
        let target = StateLabel::ALL[rng.gen_range(0..8)];
        let mut records = Vec::new();
        for hour in 0..n_hours {
            if rng.gen_bool(0.3) {
                continue; // silent hour: no records at all
            }
            let n_records: u32 = rng.gen_range(1..=60);
            let mut minutes: Vec<u32> = (0..n_records).map(|_| rng.gen_range(0..60)).collect();
            minutes.sort_unstable();
            for minute in minutes {
                let corrupted = rng.gen_bool(0.05);
                let state = if corrupted && rng.gen_bool(0.5) {
                    None
                } else {
                    Some(StateLabel::ALL[rng.gen_range(0..8)])
                };
                records.push(SensorRecord {
                    animal_id: "A1".into(),
                    timestamp: epoch()
                        + chrono::Duration::minutes((hour * 60 + minute as u64) as i64),
                    state,
                    quality: if corrupted { Quality::Corrupted } else { Quality::Valid },
                });
            }
        }

        // Brute force: independent serial arithmetic, then the §IV-A2 rule —
        // any corrupted record destroys its hour outright.
        let mut by_hour: BTreeMap<u64, (bool, f64, u8)> = BTreeMap::new();
        for rec in &records {
            let elapsed = rec.timestamp.signed_duration_since(epoch());
            let serial = elapsed.num_hours() as u64 + 1;
            let slot = by_hour.entry(serial).or_insert((false, 0.0, rec.timestamp.hour() as u8));
            if rec.quality == Quality::Corrupted {
                slot.0 = true;
            } else if rec.state == Some(target) {
                slot.1 += 1.0;
            }
        }
        let expected: Vec<(u64, u8, f64)> = by_hour
            .iter()
            .filter(|(_, (destroyed, _, _))| !destroyed)
            .map(|(&serial, &(_, minutes, hod))| (serial, hod, minutes))
            .collect();

        let series = hourly_budget("A1", cohort, &records, target, epoch()).unwrap();
        let got: Vec<(u64, u8, f64)> =
            series.points.iter().map(|p| (p.hour_serial, p.hour_of_day, p.minutes)).collect();
        assert_eq!(got, expected, "fixture {fixture} (state {target:?})");
    }
    assert!(started.elapsed().as_secs_f64() < 30.0, "budget 30 s");
    pass(3, "hourly-budget recount oracle", started);
}

// -------------------------------------------------------------------- 4

/// The default 5-tap low-pass: symmetric taps, unit DC gain, impulse
/// response equal to the taps, and a high tone attenuated at least 3x more
/// than a low tone.
#[test]
fn criterion_04_fir_contract() {
    let started = Instant::now();
    let filter = design_lowpass(5, 0.4, FirWindow::Hamming).unwrap();
    let taps = &filter.taps;
    assert_eq!(taps.len(), 5);
    for i in 0..5 {
        assert_eq!(taps[i], taps[4 - i], "taps must be exactly symmetric");
    }
    let dc: f64 = taps.iter().sum();
    assert!((dc - 1.0).abs() <= 1e-12, "DC gain {dc}");

    // Impulse response: a centered unit impulse comes back as the tap vector.
    let mut impulse = vec![0.0; 33];
    impulse[16] = 1.0;
    let response = filter.convolve_zero_phase(&impulse);
    for i in 0..5 {
        assert!(
            (response[14 + i] - taps[i]).abs() <= 1e-12,
            "impulse response tap {i}: {} vs {}",
            response[14 + i],
            taps[i]
        );
    }
    for (i, v) in response.iter().enumerate() {
        if !(14..19).contains(&i) {
            assert!(v.abs() <= 1e-12, "impulse leakage at {i}: {v}");
        }
    }

    // Tone attenuation, RMS over the interior to ignore edge effects.
    let n = 4096;
    let rms = |xs: &[f64]| {
        let body = &xs[64..xs.len() - 64];
        (body.iter().map(|v| v * v).sum::<f64>() / body.len() as f64).sqrt()
    };
    let tone = |freq_of_nyquist: f64| -> (f64, f64) {
        let x: Vec<f64> = (0..n)
            .map(|i| (std::f64::consts::PI * freq_of_nyquist * i as f64).sin())
            .collect();
        let y = filter.convolve_zero_phase(&x);
        (rms(&x), rms(&y))
    };
    let (hi_in, hi_out) = tone(0.8);
    let (lo_in, lo_out) = tone(0.05);
    let hi_gain = hi_out / hi_in;
    let lo_gain = lo_out / lo_in;
    assert!(
        hi_gain * 3.0 <= lo_gain,
        "0.8-Nyquist gain {hi_gain} not 3x below 0.05-Nyquist gain {lo_gain}"
    );
    assert!(started.elapsed().as_secs_f64() < 5.0, "budget 5 s");
    pass(4, "FIR contract", started);
}

// -------------------------------------------------------------------- 5

/// Analytic BPTT gradients vs central finite differences on a 2-layer,
/// 3-unit, 4-step model: 1e-5 max relative error across 20 seeds.
#[test]
fn criterion_05_bptt_gradients_match_finite_differences() {
    let started = Instant::now();
    for seed in 0..20u64 {
        let config = LstmConfig {
            hidden_units: 3,
            num_layers: 2,
            batch_size: 2,
            epochs: 1,
            learning_rate: 1e-3,
            seed,
            sequence_length: 4,
        };
        let model = LstmModel::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1F7);
        let row = |rng: &mut ChaCha8Rng| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let feats: Vec<Vec<f64>> = (0..2).map(|_| row(&mut rng)).collect();
        let targs: Vec<Vec<f64>> = (0..2).map(|_| row(&mut rng)).collect();
        let worst = gradient_check(&model, &feats, &targs).unwrap();
        assert!(worst < 1e-5, "seed {seed}: max relative error {worst}");
    }
    assert!(started.elapsed().as_secs_f64() < 60.0, "budget 1 min");
    pass(5, "BPTT gradient check", started);
}

// -------------------------------------------------------------------- 6

/// A noiseless 14-animal, 52-day cohort: the trained forecaster's next cycle
/// lands within 2 minutes RMS of the template and unscaled test MSE stays
/// below 25.
#[test]
fn criterion_06_next_cycle_prediction_on_noiseless_cohort() {
    let started = Instant::now();
    let (series, spec) = noiseless_cohort_series(14, 52, 0);

    // With sigma 0 the cohort average IS the quantized template, tiled.
    let template = quantized_rest_template(&spec);
    for p in &series.points {
        assert_eq!(
            p.minutes, template[p.hour_of_day as usize],
            "noiseless series must equal the template at serial {}",
            p.hour_serial
        );
    }

    let data = make_dataset(&series, 0.9, 24, 24).unwrap();
    assert_eq!(data.train.len() + data.test.len(), 52);
    let config = LstmConfig {
        hidden_units: 128,
        num_layers: 2,
        batch_size: 24,
        epochs: 2000,
        learning_rate: 1e-3,
        seed: 0,
        sequence_length: 24,
    };
    let mut model = LstmModel::new(config).unwrap();
    let trace = train(&mut model, &data).unwrap();

    let test_mse = trace.final_test_mse.expect("test split exists");
    assert!(test_mse < 25.0, "unscaled test MSE {test_mse} >= 25");

    let cycle = predict_cycle(&model, &[]).unwrap();
    let rms = rms_vs_template(&cycle, &template);
    assert!(rms < 2.0, "next-cycle RMS vs template {rms} >= 2.0 minutes");
    assert!(started.elapsed().as_secs_f64() < 900.0, "budget 15 min");
    pass(6, "noiseless next-cycle prediction", started);
}

// -------------------------------------------------------------------- 7

/// Directional sweep reproduction at desk scale: more capacity and more
/// epochs do not hurt the median per-epoch training MSE.
#[test]
fn criterion_07_sweeps_reproduce_capacity_and_epoch_trends() {
    use herdtwin_core::lstm::{sweep, SweepAxis, SweepOptions};
    let started = Instant::now();
    let (series, _) = noiseless_cohort_series(14, 52, 0);
    let data = make_dataset(&series, 0.9, 24, 24).unwrap();

    let median_of = |table: &herdtwin_core::lstm::SweepTable, value: usize| -> f64 {
        let cell = table
            .cells
            .iter()
            .find(|c| c.axis_value == value)
            .unwrap_or_else(|| panic!("cell {value} missing"));
        assert!(cell.failures.is_empty(), "cell {value} had failures: {:?}", cell.failures);
        cell.pooled_epoch_train.as_ref().expect("pooled distribution").median
    };

    let mut hidden_opts = SweepOptions::new(SweepAxis::HiddenUnits);
    hidden_opts.values = vec![4, 8, 16, 32, 64, 128, 256];
    hidden_opts.repetitions = 1;
    let hidden = sweep(&data, &hidden_opts).unwrap();
    let mse_128 = median_of(&hidden, 128);
    let mse_4 = median_of(&hidden, 4);
    assert!(mse_128 <= mse_4, "median MSE at 128 units ({mse_128}) > at 4 units ({mse_4})");

    let mut epoch_opts = SweepOptions::new(SweepAxis::Epochs);
    epoch_opts.values = vec![100, 500, 1000, 2000];
    epoch_opts.repetitions = 1;
    let epochs = sweep(&data, &epoch_opts).unwrap();
    let mse_2000 = median_of(&epochs, 2000);
    let mse_100 = median_of(&epochs, 100);
    assert!(
        mse_2000 <= mse_100,
        "median MSE at 2000 epochs ({mse_2000}) > at 100 epochs ({mse_100})"
    );
    assert!(started.elapsed().as_secs_f64() < 2700.0, "budget 45 min");
    pass(7, "sweep trends (hidden units, epochs)", started);
}

// -------------------------------------------------------------------- 8

/// Injected treatment effects order the pain ranking: combined relief
/// suffers least, the untreated negative control most — and the whole
/// assessment is byte-stable across recomputation.
#[test]
fn criterion_08_pain_ranking_orders_reliefs() {
    let started = Instant::now();
    let run = || {
        let dir = TempDir::new().unwrap();
        let spec = HerdSpec {
            days: 6,
            sigma: 0.0,
            corruption_rate: 0.0,
            ..HerdSpec::default()
        };
        let dataset =
            generate(&spec, &dir.path().join("herd.csv"), &dir.path().join("truth.csv")).unwrap();
        let epoch = dataset.epoch().unwrap();
        let cohorts = segment(&dataset).unwrap();
        let mut profiles: Vec<DailyProfile> = Vec::new();
        for (key, cohort) in &cohorts {
            for state in StateLabel::ALL {
                let per_animal: Vec<HourlySeries> = cohort
                    .animals
                    .iter()
                    .map(|(id, recs)| hourly_budget(id, *key, recs, state, epoch).unwrap())
                    .collect();
                profiles.push(daily_profile(&cohort_average(&per_animal).unwrap()).unwrap());
            }
        }
        assess_pain(&profiles, &Default::default()).unwrap()
    };

    let a = run();
    assert_eq!(a.ranking.first().unwrap().treatment, parse_treatment("D,T+M").unwrap());
    assert_eq!(a.ranking.last().unwrap().treatment, parse_treatment("D,N").unwrap());

    let b = run();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap(),
        "assessment must be deterministic across reruns"
    );
    assert!(started.elapsed().as_secs_f64() < 60.0, "budget 1 min");
    pass(8, "pain ranking", started);
}

// -------------------------------------------------------------------- 9

/// The full pipeline, run twice with one config, produces byte-identical
/// manifests with at least 8 artifacts, and its noiseless next-cycle
/// prediction stays within 2 minutes RMS of the template.
#[test]
fn criterion_09_pipeline_determinism_end_to_end() {
    let started = Instant::now();
    let run = |dir: &Path| -> serde_json::Value {
        let output = Command::new(env!("CARGO_BIN_EXE_herdtwin"))
            .args([
                "pipeline",
                "--out",
                dir.to_str().unwrap(),
                "--sigma",
                "0",
                "--corruption",
                "0",
            ])
            .output()
            .expect("pipeline run");
        assert!(
            output.status.success(),
            "pipeline failed: {}\n{}",
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        );
        serde_json::from_slice(&output.stdout).expect("summary line")
    };

    let dir_a = TempDir::new().unwrap();
    let dir_b = TempDir::new().unwrap();
    let summary_a = run(dir_a.path());
    let summary_b = run(dir_b.path());

    let manifest_a = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
    let manifest_b = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
    assert_eq!(manifest_a, manifest_b, "manifests must be byte-identical");
    assert_eq!(summary_a["manifest_sha256"], summary_b["manifest_sha256"]);

    let manifest: serde_json::Value = serde_json::from_slice(&manifest_a).unwrap();
    let artifacts = manifest["artifacts"].as_object().unwrap();
    assert!(artifacts.len() >= 8, "only {} artifacts in the manifest", artifacts.len());

    let drift_rms = summary_a["drift_rms_minutes"].as_f64().expect("drift present");
    assert!(drift_rms < 2.0, "noiseless drift RMS {drift_rms} >= 2.0 minutes");

    // The standing forecast itself must also sit on the template.
    let template = quantized_rest_template(&HerdSpec::default());
    let prediction = read_prediction(&dir_a.path().join("prediction.csv"));
    let rms = rms_vs_template(&prediction, &template);
    assert!(rms < 2.0, "prediction.csv RMS vs template {rms} >= 2.0 minutes");
    assert!(started.elapsed().as_secs_f64() < 1800.0, "budget 2x criterion 6");
    pass(9, "pipeline determinism", started);
}

// -------------------------------------------------------------------- 10

/// A 100-window series splits into exactly 90 train and 10 test windows,
/// with every test window chronologically after every train window.
#[test]
fn criterion_10_ninety_ten_split_is_chronological() {
    let started = Instant::now();
    let points: Vec<HourPoint> = (0..2400u64)
        .map(|k| HourPoint {
            hour_serial: k + 1,
            hour_of_day: (k % 24) as u8,
            minutes: (k % 24) as f64 * 2.5,
        })
        .collect();
    let series = HourlySeries {
        cohort: brahman_f("P"),
        state: StateLabel::Resting,
        points,
        origin: SeriesOrigin::CohortAverage(14),
    };
    let data = make_dataset(&series, 0.9, 24, 24).unwrap();
    assert_eq!(data.train.len(), 90);
    assert_eq!(data.test.len(), 10);
    let last_train = data.train.iter().map(|w| w.start_serial).max().unwrap();
    let first_test = data.test.iter().map(|w| w.start_serial).min().unwrap();
    assert!(
        last_train < first_test,
        "test block must follow the train block: {last_train} vs {first_test}"
    );
    assert!(started.elapsed().as_secs_f64() < 1.0, "budget 1 s");
    pass(10, "90/10 chronological split", started);
}

// ------------------------------------------------------------ shared

/// Synthesize a noiseless single-cohort herd and return its cohort-average
/// resting series (gap-free by construction) plus the spec used.
fn noiseless_cohort_series(animals: usize, days: u32, seed: u64) -> (HourlySeries, HerdSpec) {
    let spec = HerdSpec {
        roster: vec![RosterGroup {
            breed: Breed::Brahman,
            sex: Sex::Female,
            treatment: parse_treatment("P").unwrap(),
            count: animals,
        }],
        days,
        sigma: 0.0,
        corruption_rate: 0.0,
        seed,
        ..HerdSpec::default()
    };
    let dir = TempDir::new().unwrap();
    let dataset =
        generate(&spec, &dir.path().join("herd.csv"), &dir.path().join("truth.csv")).unwrap();
    let epoch = dataset.epoch().unwrap();
    let cohorts = segment(&dataset).unwrap();
    let cohort = &cohorts[&brahman_f("P")];
    let per_animal: Vec<HourlySeries> = cohort
        .animals
        .iter()
        .map(|(id, recs)| {
            hourly_budget(id, cohort.key, recs, StateLabel::Resting, epoch).unwrap()
        })
        .collect();
    let series = cohort_average(&per_animal).unwrap();
    assert!(series.is_gap_free());
    (series, spec)
}

/// The quantized per-clock-hour resting template for the positive control.
fn quantized_rest_template(spec: &HerdSpec) -> [f64; 24] {
    let templates = cohort_templates(spec, parse_treatment("P").unwrap()).unwrap();
    let minutes = templates.minutes_for(StateLabel::Resting);
    std::array::from_fn(|h| minutes[h] as f64)
}

fn rms_vs_template(cycle: &[f64], template: &[f64; 24]) -> f64 {
    assert_eq!(cycle.len(), 24);
    let sq: f64 = cycle.iter().zip(template).map(|(a, b)| (a - b) * (a - b)).sum();
    (sq / 24.0).sqrt()
}

fn read_prediction(path: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("hour_of_day,minutes"));
    lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}
