//! Stacked LSTM forward and backward passes. Gate blocks are packed
//! column-wise as [input | forget | candidate | output] so each step is two
//! GEMMs per layer; backpropagation through time mirrors the same layout.

use super::{LstmConfig, LstmError};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// (input_width, 4·hidden): layer 0 input width is 1, deeper layers hidden.
    pub w_ih: Array2<f64>,
    /// (hidden, 4·hidden)
    pub w_hh: Array2<f64>,
    /// (4·hidden)
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub config: LstmConfig,
    pub layers: Vec<LayerWeights>,
    /// Output head: scalar affine map of the top layer's hidden state.
    pub w_head: Array1<f64>,
    pub b_head: f64,
    pub input_scale: f64,
    pub output_scale: f64,
    pub trained: bool,
}

impl LstmModel {
    /// Fresh model with all weights (matrices, biases, head) drawn uniformly
    /// from [−1/√hidden, +1/√hidden] in a fixed order, so a seed pins every
    /// coefficient.
    pub fn new(config: LstmConfig) -> Result<LstmModel, LstmError> {
        config.validate()?;
        let h = config.hidden_units;
        let bound = 1.0 / (h as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut draw = |rows: usize, cols: usize| -> Array2<f64> {
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let input_width = if l == 0 { 1 } else { h };
            let w_ih = draw(input_width, 4 * h);
            let w_hh = draw(h, 4 * h);
            let bias = draw(1, 4 * h).into_shape_with_order(4 * h).unwrap();
            layers.push(LayerWeights { w_ih, w_hh, bias });
        }
        let w_head = draw(1, h).into_shape_with_order(h).unwrap();
        let b_head = rng.gen_range(-bound..bound);
        Ok(LstmModel {
            config,
            layers,
            w_head,
            b_head,
            input_scale: super::INPUT_SCALE,
            output_scale: super::OUTPUT_SCALE,
            trained: false,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w_ih.len() + l.w_hh.len() + l.bias.len())
            .sum::<usize>()
            + self.w_head.len()
            + 1
    }
}

/// Visit every weight in the canonical order (per layer: w_ih row-major,
/// w_hh, bias; then head weights, head bias). The flattened gradient vector
/// uses the same order.
pub(crate) fn visit_params_mut(model: &mut LstmModel, mut f: impl FnMut(&mut f64)) {
    for layer in &mut model.layers {
        for v in layer.w_ih.iter_mut() {
            f(v);
        }
        for v in layer.w_hh.iter_mut() {
            f(v);
        }
        for v in layer.bias.iter_mut() {
            f(v);
        }
    }
    for v in model.w_head.iter_mut() {
        f(v);
    }
    f(&mut model.b_head);
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) struct StepCache {
    /// Input to this layer at this step, (batch, input_width).
    x: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

pub(crate) struct ForwardCache {
    /// steps[layer][t]
    steps: Vec<Vec<StepCache>>,
    /// (batch, time) scaled predictions
    pub preds: Array2<f64>,
}

/// Batched forward pass over (batch, time) feature rows, keeping the
/// activations needed for backprop. Initial hidden and cell states are zero.
pub(crate) fn forward_batch(model: &LstmModel, features: &Array2<f64>) -> ForwardCache {
    let (b, t_len) = features.dim();
    let h = model.config.hidden_units;
    let n_layers = model.layers.len();
    let mut steps: Vec<Vec<StepCache>> = (0..n_layers).map(|_| Vec::with_capacity(t_len)).collect();
    let mut preds = Array2::<f64>::zeros((b, t_len));

    let mut hidden: Vec<Array2<f64>> = vec![Array2::zeros((b, h)); n_layers];
    let mut cell: Vec<Array2<f64>> = vec![Array2::zeros((b, h)); n_layers];

    for t in 0..t_len {
        let mut x: Array2<f64> =
            features.column(t).insert_axis(Axis(1)).to_owned();
        for l in 0..n_layers {
            let lw = &model.layers[l];
            let mut pre = lw
                .bias
                .view()
                .insert_axis(Axis(0))
                .broadcast((b, 4 * h))
                .unwrap()
                .to_owned();
            general_mat_mul(1.0, &x, &lw.w_ih, 1.0, &mut pre);
            general_mat_mul(1.0, &hidden[l], &lw.w_hh, 1.0, &mut pre);

            let mut gi = Array2::<f64>::zeros((b, h));
            let mut gf = Array2::<f64>::zeros((b, h));
            let mut gg = Array2::<f64>::zeros((b, h));
            let mut go = Array2::<f64>::zeros((b, h));
            let mut c_new = Array2::<f64>::zeros((b, h));
            let mut tc = Array2::<f64>::zeros((b, h));
            let mut h_new = Array2::<f64>::zeros((b, h));
            {
                let pre_s = pre.as_slice().unwrap();
                let c_prev = cell[l].as_slice().unwrap();
                let gi_s = gi.as_slice_mut().unwrap();
                let gf_s = gf.as_slice_mut().unwrap();
                let gg_s = gg.as_slice_mut().unwrap();
                let go_s = go.as_slice_mut().unwrap();
                let cn_s = c_new.as_slice_mut().unwrap();
                let tc_s = tc.as_slice_mut().unwrap();
                let hn_s = h_new.as_slice_mut().unwrap();
                for r in 0..b {
                    let row = &pre_s[r * 4 * h..(r + 1) * 4 * h];
                    for k in 0..h {
                        let iv = sigmoid(row[k]);
                        let fv = sigmoid(row[h + k]);
                        let gv = row[2 * h + k].tanh();
                        let ov = sigmoid(row[3 * h + k]);
                        let cv = fv * c_prev[r * h + k] + iv * gv;
                        let tv = cv.tanh();
                        let idx = r * h + k;
                        gi_s[idx] = iv;
                        gf_s[idx] = fv;
                        gg_s[idx] = gv;
                        go_s[idx] = ov;
                        cn_s[idx] = cv;
                        tc_s[idx] = tv;
                        hn_s[idx] = ov * tv;
                    }
                }
            }
            hidden[l] = h_new.clone();
            cell[l] = c_new.clone();
            steps[l].push(StepCache {
                x: std::mem::replace(&mut x, h_new.clone()),
                i: gi,
                f: gf,
                g: gg,
                o: go,
                c: c_new,
                tanh_c: tc,
                h: h_new,
            });
        }
        let y = hidden[n_layers - 1].dot(&model.w_head);
        for r in 0..b {
            preds[[r, t]] = y[r] + model.b_head;
        }
    }
    ForwardCache { steps, preds }
}

/// Per-sequence inference: scaled predictions for each step.
pub fn forward(model: &LstmModel, features: &[f64]) -> Result<Vec<f64>, LstmError> {
    if features.is_empty() {
        return Err(LstmError::ShapeMismatch("empty input sequence".into()));
    }
    let feats = Array2::from_shape_vec((1, features.len()), features.to_vec()).unwrap();
    let cache = forward_batch(model, &feats);
    Ok(cache.preds.row(0).to_vec())
}

pub(crate) fn batch_mse(preds: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let n = preds.len() as f64;
    preds
        .iter()
        .zip(targets.iter())
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / n
}

pub(crate) struct LayerGrads {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

pub(crate) struct Grads {
    pub layers: Vec<LayerGrads>,
    pub w_head: Array1<f64>,
    pub b_head: f64,
}

impl Grads {
    /// Canonical order must match visit_params_mut.
    pub(crate) fn flatten_into(&self, out: &mut Vec<f64>) {
        out.clear();
        for l in &self.layers {
            out.extend(l.w_ih.iter());
            out.extend(l.w_hh.iter());
            out.extend(l.bias.iter());
        }
        out.extend(self.w_head.iter());
        out.push(self.b_head);
    }
}

/// Mean-squared-error loss over every step of every sequence in the batch,
/// plus the full gradient from backpropagation through time.
pub(crate) fn loss_and_grads(
    model: &LstmModel,
    features: &Array2<f64>,
    targets: &Array2<f64>,
) -> (f64, Grads) {
    let (b, t_len) = features.dim();
    let h = model.config.hidden_units;
    let n_layers = model.layers.len();
    let cache = forward_batch(model, features);
    let loss = batch_mse(&cache.preds, targets);

    // d loss / d pred
    let scale = 2.0 / (b * t_len) as f64;
    let dpred = {
        let mut d = Array2::<f64>::zeros((b, t_len));
        for r in 0..b {
            for t in 0..t_len {
                d[[r, t]] = scale * (cache.preds[[r, t]] - targets[[r, t]]);
            }
        }
        d
    };

    // Head gradients and the upstream dh for the top layer.
    let mut g_w_head = Array1::<f64>::zeros(h);
    let mut g_b_head = 0.0;
    let mut upstream: Vec<Array2<f64>> = (0..t_len).map(|_| Array2::zeros((b, h))).collect();
    for t in 0..t_len {
        let h_top = &cache.steps[n_layers - 1][t].h;
        for r in 0..b {
            let dy = dpred[[r, t]];
            g_b_head += dy;
            for k in 0..h {
                g_w_head[k] += dy * h_top[[r, k]];
                upstream[t][[r, k]] = dy * model.w_head[k];
            }
        }
    }

    let mut layer_grads: Vec<Option<LayerGrads>> = (0..n_layers).map(|_| None).collect();
    for l in (0..n_layers).rev() {
        let lw = &model.layers[l];
        let in_w = lw.w_ih.nrows();
        let mut gw_ih = Array2::<f64>::zeros((in_w, 4 * h));
        let mut gw_hh = Array2::<f64>::zeros((h, 4 * h));
        let mut gbias = Array1::<f64>::zeros(4 * h);
        let mut dh_next = Array2::<f64>::zeros((b, h));
        let mut dc_next = Array2::<f64>::zeros((b, h));
        let mut downstream: Vec<Array2<f64>> = if l > 0 {
            (0..t_len).map(|_| Array2::zeros((b, h))).collect()
        } else {
            Vec::new()
        };

        for t in (0..t_len).rev() {
            let sc = &cache.steps[l][t];
            let mut dpre = Array2::<f64>::zeros((b, 4 * h));
            {
                let dh_up = upstream[t].as_slice().unwrap();
                let dh_rec = dh_next.as_slice().unwrap();
                let dc_rec = dc_next.as_slice().unwrap();
                let i_s = sc.i.as_slice().unwrap();
                let f_s = sc.f.as_slice().unwrap();
                let g_s = sc.g.as_slice().unwrap();
                let o_s = sc.o.as_slice().unwrap();
                let tc_s = sc.tanh_c.as_slice().unwrap();
                let c_prev: Option<&[f64]> =
                    if t > 0 { Some(cache.steps[l][t - 1].c.as_slice().unwrap()) } else { None };
                let dpre_s = dpre.as_slice_mut().unwrap();
                let mut dc_new = Array2::<f64>::zeros((b, h));
                let dc_new_s = dc_new.as_slice_mut().unwrap();
                for r in 0..b {
                    for k in 0..h {
                        let idx = r * h + k;
                        let dh = dh_up[idx] + dh_rec[idx];
                        let tv = tc_s[idx];
                        let ov = o_s[idx];
                        let dov = dh * tv;
                        let dc = dh * ov * (1.0 - tv * tv) + dc_rec[idx];
                        let iv = i_s[idx];
                        let fv = f_s[idx];
                        let gv = g_s[idx];
                        let cp = c_prev.map(|c| c[idx]).unwrap_or(0.0);
                        let row = &mut dpre_s[r * 4 * h..(r + 1) * 4 * h];
                        row[k] = dc * gv * iv * (1.0 - iv);
                        row[h + k] = dc * cp * fv * (1.0 - fv);
                        row[2 * h + k] = dc * iv * (1.0 - gv * gv);
                        row[3 * h + k] = dov * ov * (1.0 - ov);
                        dc_new_s[idx] = dc * fv;
                    }
                }
                dc_next = dc_new;
            }
            general_mat_mul(1.0, &sc.x.t(), &dpre, 1.0, &mut gw_ih);
            if t > 0 {
                general_mat_mul(1.0, &cache.steps[l][t - 1].h.t(), &dpre, 1.0, &mut gw_hh);
            }
            for r in 0..b {
                for j in 0..4 * h {
                    gbias[j] += dpre[[r, j]];
                }
            }
            // Recurrent carry to step t-1 and input carry to the layer below.
            let mut dh_new = Array2::<f64>::zeros((b, h));
            general_mat_mul(1.0, &dpre, &lw.w_hh.t(), 0.0, &mut dh_new);
            dh_next = dh_new;
            if l > 0 {
                general_mat_mul(1.0, &dpre, &lw.w_ih.t(), 0.0, &mut downstream[t]);
            }
        }
        if l > 0 {
            upstream = downstream;
        }
        layer_grads[l] = Some(LayerGrads { w_ih: gw_ih, w_hh: gw_hh, bias: gbias });
    }

    (
        loss,
        Grads {
            layers: layer_grads.into_iter().map(|g| g.unwrap()).collect(),
            w_head: g_w_head,
            b_head: g_b_head,
        },
    )
}

/// Diagnostic for the hand-derived backward pass: the worst relative error
/// between analytic BPTT gradients and fourth-order central finite
/// differences, over every weight in the model. Each row of
/// `features`/`targets` is one sequence; all rows must share one length.
/// Healthy implementations stay below 1e-5.
pub fn gradient_check(
    model: &LstmModel,
    features: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<f64, LstmError> {
    let t_len = features.first().map(Vec::len).unwrap_or(0);
    if t_len == 0
        || features.len() != targets.len()
        || features.iter().any(|r| r.len() != t_len)
        || targets.iter().any(|r| r.len() != t_len)
    {
        return Err(LstmError::ShapeMismatch(
            "gradient check needs equal-length, non-empty feature/target rows".into(),
        ));
    }
    let flat = |rows: &[Vec<f64>]| {
        Array2::from_shape_vec(
            (rows.len(), t_len),
            rows.iter().flatten().copied().collect(),
        )
        .expect("checked dimensions")
    };
    let feats = flat(features);
    let targs = flat(targets);

    let (_, grads) = loss_and_grads(model, &feats, &targs);
    let mut analytic = Vec::new();
    grads.flatten_into(&mut analytic);

    // Five-point stencil: truncation is O(h^4), so a step this coarse keeps
    // both truncation and cancellation noise near 1e-12 — far below any real
    // backward-pass defect. Gradients smaller than the 1e-6 floor are at the
    // oracle's resolution limit and compare against the floor instead.
    let h_step = 1e-3;
    let mut worst = 0.0f64;
    for p in 0..analytic.len() {
        let loss_at = |delta: f64| -> f64 {
            let mut m = model.clone();
            let mut idx = 0;
            visit_params_mut(&mut m, |w| {
                if idx == p {
                    *w += delta;
                }
                idx += 1;
            });
            let cache = forward_batch(&m, &feats);
            batch_mse(&cache.preds, &targs)
        };
        let numeric = (loss_at(-2.0 * h_step) - loss_at(2.0 * h_step)
            + 8.0 * (loss_at(h_step) - loss_at(-h_step)))
            / (12.0 * h_step);
        let denom = analytic[p].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[p] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(hidden: usize, layers: usize, seed: u64) -> LstmConfig {
        LstmConfig {
            hidden_units: hidden,
            num_layers: layers,
            batch_size: 2,
            epochs: 1,
            learning_rate: 1e-3,
            seed,
            sequence_length: 4,
        }
    }

    fn zero_out(model: &mut LstmModel) {
        visit_params_mut(model, |w| *w = 0.0);
    }

    #[test]
    fn all_zero_weights_predict_the_head_bias() {
        let mut m = LstmModel::new(tiny_config(3, 2, 0)).unwrap();
        zero_out(&mut m);
        m.b_head = 0.7;
        let y = forward(&m, &[0.0, 0.5, 1.0, 0.25]).unwrap();
        for v in y {
            assert_eq!(v, 0.7);
        }
    }

    #[test]
    fn one_unit_half_weights_matches_hand_derivation() {
        // Single layer, one hidden unit, every weight and bias 0.5, input 1.0.
        // Gate preactivations are all 1.0; i=f=o=sigmoid(1), g=tanh(1);
        // c = i*g, h = o*tanh(c), y = 0.5*h + 0.5 — worked out by hand.
        let mut m = LstmModel::new(tiny_config(1, 1, 0)).unwrap();
        visit_params_mut(&mut m, |w| *w = 0.5);
        let y = forward(&m, &[1.0, 1.0]).unwrap();
        assert!((y[0] - 0.6848031764678528).abs() < 1e-12, "step 1: {}", y[0]);
        assert!((y[1] - 0.8010113830306862).abs() < 1e-12, "step 2: {}", y[1]);
    }

    #[test]
    fn repeated_inference_is_pure() {
        let m = LstmModel::new(tiny_config(5, 2, 9)).unwrap();
        let feats: Vec<f64> = (0..24).map(|h| h as f64 / 23.0).collect();
        let a = forward(&m, &feats).unwrap();
        let b = forward(&m, &feats).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn hidden_states_stay_inside_unit_box() {
        // |h| = |o * tanh(c)| < 1 pointwise regardless of input magnitude.
        let m = LstmModel::new(tiny_config(4, 2, 3)).unwrap();
        let feats = Array2::from_shape_vec(
            (1, 6),
            vec![1e6, -1e6, 42.0, -7.0, 0.0, 3.14],
        )
        .unwrap();
        let cache = forward_batch(&m, &feats);
        for layer in &cache.steps {
            for step in layer {
                for v in step.h.iter() {
                    assert!(v.is_finite() && v.abs() <= 1.0);
                }
                for v in step.c.iter() {
                    assert!(v.is_finite());
                }
            }
        }
    }

    #[test]
    fn empty_sequence_is_a_shape_error() {
        let m = LstmModel::new(tiny_config(2, 1, 0)).unwrap();
        assert!(matches!(forward(&m, &[]), Err(LstmError::ShapeMismatch(_))));
    }

    #[test]
    fn seeded_init_is_reproducible_and_bounded() {
        let a = LstmModel::new(tiny_config(8, 2, 77)).unwrap();
        let b = LstmModel::new(tiny_config(8, 2, 77)).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / (8.0f64).sqrt();
        let mut c = a.clone();
        visit_params_mut(&mut c, |w| assert!(w.abs() <= bound));
        let d = LstmModel::new(tiny_config(8, 2, 78)).unwrap();
        assert_ne!(a, d);
    }

    /// Analytic gradients vs central finite differences over every weight in
    /// a 2-layer model, through 4 time steps of recurrence.
    #[test]
    fn gradient_matches_finite_differences() {
        let config = tiny_config(3, 2, 11);
        let model = LstmModel::new(config).unwrap();
        let feats = vec![vec![0.1, 0.4, 0.9, 0.2], vec![0.8, 0.3, 0.6, 0.0]];
        let targs = vec![vec![0.5, 0.1, 0.9, 0.3], vec![0.2, 0.8, 0.4, 0.6]];
        let worst = gradient_check(&model, &feats, &targs).unwrap();
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn gradient_check_rejects_ragged_rows() {
        let model = LstmModel::new(tiny_config(3, 1, 4)).unwrap();
        let err = gradient_check(&model, &[vec![0.1, 0.2]], &[vec![0.3]]);
        assert!(matches!(err, Err(LstmError::ShapeMismatch(_))));
        let err = gradient_check(&model, &[], &[]);
        assert!(matches!(err, Err(LstmError::ShapeMismatch(_))));
    }

    #[test]
    fn batch_forward_agrees_with_sequence_forward() {
        // Batching is a pure layout change: row r of the batch equals the
        // single-sequence forward of row r.
        let m = LstmModel::new(tiny_config(4, 2, 5)).unwrap();
        let rows = [
            vec![0.0, 0.25, 0.5, 0.75],
            vec![1.0, 0.1, 0.2, 0.3],
            vec![0.9, 0.9, 0.9, 0.9],
        ];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let feats = Array2::from_shape_vec((3, 4), flat).unwrap();
        let cache = forward_batch(&m, &feats);
        for (r, row) in rows.iter().enumerate() {
            let single = forward(&m, row).unwrap();
            for t in 0..4 {
                assert!(
                    (cache.preds[[r, t]] - single[t]).abs() < 1e-12,
                    "row {r} step {t}"
                );
            }
        }
    }
}
