//! Training loop (mini-batch BPTT + Adam), cycle prediction, and checkpoint
//! persistence. All randomness is ChaCha8 seeded from the config, so a run
//! is reproducible bit-for-bit.

use super::net::{batch_mse, forward, forward_batch, loss_and_grads, visit_params_mut, LstmModel};
use super::{Dataset, LstmConfig, LstmError, Window, OUTPUT_SCALE};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Batch shuffling draws from a stream distinct from weight initialization.
const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Scaled full-training-set MSE measured at the start of each epoch, so
    /// entry 0 is the freshly initialized model. Length equals epochs. These
    /// are also the per-epoch samples pooled for distribution plots.
    pub epoch_train_mse: Vec<f64>,
    /// Scaled MSE after the final update.
    pub final_train_mse: f64,
    /// Unscaled minutes² MSE on the held-out windows; None when there are none.
    pub final_test_mse: Option<f64>,
    /// Not part of determinism guarantees.
    pub wall_time_secs: f64,
}

fn batch_matrices(windows: &[&Window], seq_len: usize) -> (Array2<f64>, Array2<f64>) {
    let b = windows.len();
    let mut feats = Array2::<f64>::zeros((b, seq_len));
    let mut targs = Array2::<f64>::zeros((b, seq_len));
    for (r, w) in windows.iter().enumerate() {
        for t in 0..seq_len {
            feats[[r, t]] = w.features[t];
            targs[[r, t]] = w.targets[t];
        }
    }
    (feats, targs)
}

/// Forward-only MSE over a window set, in scaled units, deterministic order.
fn eval_mse(model: &LstmModel, windows: &[Window], batch_size: usize) -> f64 {
    let seq_len = model.config.sequence_length;
    let mut sse = 0.0;
    let mut n = 0usize;
    for chunk in windows.chunks(batch_size) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let (feats, targs) = batch_matrices(&refs, seq_len);
        let cache = forward_batch(model, &feats);
        let count = chunk.len() * seq_len;
        sse += batch_mse(&cache.preds, &targs) * count as f64;
        n += count;
    }
    sse / n as f64
}

/// Mini-batch BPTT with Adam. The trace records the full-training-set MSE at
/// the start of every epoch (epoch 0 is the untouched initial model); the
/// final numbers are measured after the last update.
pub fn train(model: &mut LstmModel, data: &Dataset) -> Result<TrainingTrace, LstmError> {
    let started = Instant::now();
    let config = model.config.clone();
    config.validate()?;
    if data.train.is_empty() {
        return Err(LstmError::EmptyTrainingSet);
    }
    if config.batch_size > data.train.len() {
        return Err(LstmError::InvalidConfig(format!(
            "batch_size {} exceeds {} training sequences",
            config.batch_size,
            data.train.len()
        )));
    }
    for w in data.train.iter().chain(data.test.iter()) {
        if w.features.len() != config.sequence_length || w.targets.len() != config.sequence_length
        {
            return Err(LstmError::ShapeMismatch(format!(
                "window length {} does not match sequence_length {}",
                w.features.len(),
                config.sequence_length
            )));
        }
    }

    let n_params = model.param_count();
    let mut adam_m = vec![0.0f64; n_params];
    let mut adam_v = vec![0.0f64; n_params];
    let mut adam_t = 0u64;
    let mut flat = Vec::with_capacity(n_params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch_train_mse = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let snapshot = eval_mse(model, &data.train, config.batch_size);
        if !snapshot.is_finite() {
            return Err(LstmError::NonFiniteLoss { epoch, batch: 0 });
        }
        epoch_train_mse.push(snapshot);

        order.shuffle(&mut shuffle_rng);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Window> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (feats, targs) = batch_matrices(&refs, config.sequence_length);
            let (loss, grads) = loss_and_grads(model, &feats, &targs);
            if !loss.is_finite() {
                return Err(LstmError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            grads.flatten_into(&mut flat);
            adam_t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(adam_t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(adam_t as i32);
            let mut idx = 0usize;
            visit_params_mut(model, |w| {
                let g = flat[idx];
                adam_m[idx] = ADAM_BETA1 * adam_m[idx] + (1.0 - ADAM_BETA1) * g;
                adam_v[idx] = ADAM_BETA2 * adam_v[idx] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = adam_m[idx] / bc1;
                let v_hat = adam_v[idx] / bc2;
                *w -= config.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                idx += 1;
            });
        }
    }

    let final_train_mse = eval_mse(model, &data.train, config.batch_size);
    if !final_train_mse.is_finite() {
        return Err(LstmError::NonFiniteLoss { epoch: config.epochs, batch: 0 });
    }
    let final_test_mse = if data.test.is_empty() {
        None
    } else {
        // Reported in minutes² so it is comparable to raw budgets.
        Some(eval_mse(model, &data.test, config.batch_size) * OUTPUT_SCALE * OUTPUT_SCALE)
    };
    model.trained = true;
    Ok(TrainingTrace {
        epoch_train_mse,
        final_train_mse,
        final_test_mse,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Predict the next full day: feed hour-of-day 0..=23 from a zero state and
/// return unscaled minutes clamped to [0, 60]. The context argument is
/// accepted for interface stability but the recurrent state always starts
/// fresh — a cycle is self-contained.
pub fn predict_cycle(model: &LstmModel, _context: &[f64]) -> Result<Vec<f64>, LstmError> {
    if !model.trained {
        return Err(LstmError::UntrainedModel);
    }
    let feats: Vec<f64> = (0..24).map(|h| h as f64 / model.input_scale).collect();
    let scaled = forward(model, &feats)?;
    Ok(scaled.iter().map(|y| (y * model.output_scale).clamp(0.0, 60.0)).collect())
}

pub fn trace_to_csv(trace: &TrainingTrace) -> String {
    let mut out = String::from("epoch,train_mse\n");
    for (e, mse) in trace.epoch_train_mse.iter().enumerate() {
        out.push_str(&format!("{e},{mse}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    w_ih: MatrixDoc,
    w_hh: MatrixDoc,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    config: LstmConfig,
    layers: Vec<LayerDoc>,
    w_head: Vec<f64>,
    b_head: f64,
    input_scale: f64,
    output_scale: f64,
    trained: bool,
}

fn matrix_doc(a: &Array2<f64>) -> MatrixDoc {
    MatrixDoc { rows: a.nrows(), cols: a.ncols(), data: a.iter().copied().collect() }
}

pub fn save_checkpoint(model: &LstmModel, path: &Path) -> Result<(), LstmError> {
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerDoc {
                w_ih: matrix_doc(&l.w_ih),
                w_hh: matrix_doc(&l.w_hh),
                bias: l.bias.to_vec(),
            })
            .collect(),
        w_head: model.w_head.to_vec(),
        b_head: model.b_head,
        input_scale: model.input_scale,
        output_scale: model.output_scale,
        trained: model.trained,
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &doc)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LstmModel, LstmError> {
    let file = std::fs::File::open(path)?;
    let doc: CheckpointDoc = serde_json::from_reader(std::io::BufReader::new(file))?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(LstmError::InvalidConfig(format!(
            "unsupported checkpoint version {}",
            doc.format_version
        )));
    }
    doc.config.validate()?;
    let h = doc.config.hidden_units;
    if doc.layers.len() != doc.config.num_layers || doc.w_head.len() != h {
        return Err(LstmError::ShapeMismatch("checkpoint blocks do not match config".into()));
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (l, ld) in doc.layers.into_iter().enumerate() {
        let expect_in = if l == 0 { 1 } else { h };
        if ld.w_ih.rows != expect_in
            || ld.w_ih.cols != 4 * h
            || ld.w_hh.rows != h
            || ld.w_hh.cols != 4 * h
            || ld.bias.len() != 4 * h
            || ld.w_ih.data.len() != ld.w_ih.rows * ld.w_ih.cols
            || ld.w_hh.data.len() != ld.w_hh.rows * ld.w_hh.cols
        {
            return Err(LstmError::ShapeMismatch(format!("layer {l} block dimensions")));
        }
        layers.push(super::LayerWeights {
            w_ih: Array2::from_shape_vec((ld.w_ih.rows, ld.w_ih.cols), ld.w_ih.data).unwrap(),
            w_hh: Array2::from_shape_vec((ld.w_hh.rows, ld.w_hh.cols), ld.w_hh.data).unwrap(),
            bias: Array1::from_vec(ld.bias),
        });
    }
    let mut model = LstmModel {
        config: doc.config,
        layers,
        w_head: Array1::from_vec(doc.w_head),
        b_head: doc.b_head,
        input_scale: doc.input_scale,
        output_scale: doc.output_scale,
        trained: doc.trained,
    };
    let mut all_finite = true;
    visit_params_mut(&mut model, |w| all_finite &= w.is_finite());
    if !all_finite {
        return Err(LstmError::ShapeMismatch("checkpoint contains non-finite weights".into()));
    }
    Ok(model)
}
