//! Client-side model and optimizer: a small ReLU MLP with a softmax
//! cross-entropy head, trained by seeded mini-batch SGD, plus server-side
//! evaluation.
//!
//! Parameters live in a flat [`ParamVector`] with a fixed layout: for each
//! consecutive layer pair `(n_in -> n_out)`, the weight matrix in row-major
//! order (`n_out x n_in`) followed by the `n_out` biases. All loops walk
//! that layout in ascending order, so results are deterministic.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::param::ParamVector;

/// Architecture of the MLP: layer widths from input to output.
/// Hidden layers use ReLU; the output is softmax with cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("a model needs at least input and output layers"));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total number of parameters in the flat layout.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// (weight offset, bias offset) of each layer in the flat layout.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_layers());
        let mut cursor = 0;
        for w in self.layer_sizes.windows(2) {
            let w_off = cursor;
            let b_off = cursor + w[0] * w[1];
            cursor = b_off + w[1];
            out.push((w_off, b_off));
        }
        out
    }

    pub(crate) fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_data(&self, data: &LabeledDataset) -> Result<()> {
        if data.n_features() != self.n_inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_inputs(),
                got: data.n_features(),
            });
        }
        if data.num_classes() != self.n_outputs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_outputs(),
                got: data.num_classes(),
            });
        }
        Ok(())
    }
}

/// Local SGD settings. `local_iterations` counts full passes over the
/// client's data in shuffled mini-batches; the shuffle stream comes from
/// `seed` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub local_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.local_iterations == 0 {
            return Err(Error::invalid("local_iterations must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be a positive finite real"));
        }
        Ok(())
    }
}

/// Deterministic-in-seed initialization: weights uniform in
/// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases exactly zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for w in spec.layer_sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let bound = 1.0 / (n_in as f64).sqrt();
        for _ in 0..n_in * n_out {
            values.push(rng.gen_range(-bound..bound));
        }
        values.extend(std::iter::repeat(0.0).take(n_out));
    }
    ParamVector::new(values)
}

/// Reusable forward/backward buffers sized for one model.
struct Scratch {
    // post-activation of each layer (hidden: ReLU output, last: logits)
    activations: Vec<Vec<f64>>,
    // dL/dz of the layer currently being processed, and the one below
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    probs: Vec<f64>,
}

impl Scratch {
    fn new(spec: &ModelSpec) -> Self {
        let activations = spec.layer_sizes[1..]
            .iter()
            .map(|&s| vec![0.0; s])
            .collect();
        let widest = *spec.layer_sizes.iter().max().unwrap();
        Scratch {
            activations,
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
            probs: vec![0.0; spec.n_outputs()],
        }
    }
}

/// Forward pass for one sample; leaves logits in the last activation buffer.
fn forward(
    params: &[f64],
    spec: &ModelSpec,
    offsets: &[(usize, usize)],
    x: &[f64],
    scratch: &mut Scratch,
) {
    let n_layers = spec.num_layers();
    for l in 0..n_layers {
        let n_in = spec.layer_sizes[l];
        let n_out = spec.layer_sizes[l + 1];
        let (w_off, b_off) = offsets[l];
        let last = l == n_layers - 1;
        // split so the input of this layer and its output buffer can coexist
        let (done, rest) = scratch.activations.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
        let out = &mut rest[0];
        for o in 0..n_out {
            let row = &params[w_off + o * n_in..w_off + (o + 1) * n_in];
            let mut z = params[b_off + o];
            for (wi, xi) in row.iter().zip(input) {
                z += wi * xi;
            }
            out[o] = if last { z } else { z.max(0.0) };
        }
    }
}

/// Softmax with max-subtraction; returns the cross-entropy loss for `label`
/// and fills `probs`.
fn softmax_loss(logits: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        let e = (z - m).exp();
        *p = e;
        sum += e;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    m + sum.ln() - logits[label]
}

/// Accumulates the gradient of the summed loss over `rows` into `grad`
/// (same layout as `params`); returns the summed loss.
fn accumulate_gradient(
    params: &[f64],
    spec: &ModelSpec,
    offsets: &[(usize, usize)],
    data: &LabeledDataset,
    rows: &[usize],
    scratch: &mut Scratch,
    grad: &mut [f64],
) -> f64 {
    let n_layers = spec.num_layers();
    let mut loss_sum = 0.0;
    for &row in rows {
        let x = data.feature_row(row);
        let label = data.label(row);
        forward(params, spec, offsets, x, scratch);
        let logits = &scratch.activations[n_layers - 1];
        loss_sum += softmax_loss(logits, label, &mut scratch.probs);

        // dL/dz at the output
        let out_width = spec.n_outputs();
        scratch.delta[..out_width].copy_from_slice(&scratch.probs);
        scratch.delta[label] -= 1.0;

        for l in (0..n_layers).rev() {
            let n_in = spec.layer_sizes[l];
            let n_out = spec.layer_sizes[l + 1];
            let (w_off, b_off) = offsets[l];
            let input: &[f64] = if l == 0 {
                x
            } else {
                &scratch.activations[l - 1]
            };
            for o in 0..n_out {
                let d = scratch.delta[o];
                let g_row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (gi, xi) in g_row.iter_mut().zip(input) {
                    *gi += d * xi;
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                // delta_prev = W^T delta, masked by ReLU'(input)
                scratch.delta_prev[..n_in].fill(0.0);
                for o in 0..n_out {
                    let d = scratch.delta[o];
                    let row = &params[w_off + o * n_in..w_off + (o + 1) * n_in];
                    for (dp, wi) in scratch.delta_prev[..n_in].iter_mut().zip(row) {
                        *dp += wi * d;
                    }
                }
                for (dp, &a) in scratch.delta_prev[..n_in].iter_mut().zip(input) {
                    if a <= 0.0 {
                        *dp = 0.0;
                    }
                }
                std::mem::swap(&mut scratch.delta, &mut scratch.delta_prev);
            }
        }
    }
    loss_sum
}

/// Mean cross-entropy loss over the whole dataset.
pub fn cross_entropy_loss(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("cross_entropy_loss"));
    }
    let offsets = spec.offsets();
    let mut scratch = Scratch::new(spec);
    let n_layers = spec.num_layers();
    let mut loss_sum = 0.0;
    for row in 0..data.len() {
        forward(params.values(), spec, &offsets, data.feature_row(row), &mut scratch);
        let logits = &scratch.activations[n_layers - 1];
        loss_sum += softmax_loss(logits, data.label(row), &mut scratch.probs);
    }
    Ok(loss_sum / data.len() as f64)
}

/// Mean loss and its gradient over the whole dataset.
pub fn loss_and_gradient(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("loss_and_gradient"));
    }
    let offsets = spec.offsets();
    let mut scratch = Scratch::new(spec);
    let mut grad = vec![0.0; spec.param_count()];
    let rows: Vec<usize> = (0..data.len()).collect();
    let loss_sum = accumulate_gradient(
        params.values(),
        spec,
        &offsets,
        data,
        &rows,
        &mut scratch,
        &mut grad,
    );
    let n = data.len() as f64;
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((loss_sum / n, ParamVector::new(grad)?))
}

/// Runs `cfg.local_iterations` full passes of mini-batch SGD from `start`.
///
/// Each pass reshuffles the row order from the seeded stream; each batch
/// takes one step along the mean gradient. Divergence (a non-finite loss or
/// parameter) is reported as an error rather than clamped. The result is a
/// pure function of `(start, data, cfg)`.
pub fn sgd_train(
    start: &ParamVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<ParamVector> {
    spec.check_params(start)?;
    spec.check_data(data)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("sgd_train"));
    }
    let offsets = spec.offsets();
    let mut scratch = Scratch::new(spec);
    let mut params = start.values().to_vec();
    let mut grad = vec![0.0; spec.param_count()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for _pass in 0..cfg.local_iterations {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let loss_sum =
                accumulate_gradient(&params, spec, &offsets, data, batch, &mut scratch, &mut grad);
            if !loss_sum.is_finite() {
                return Err(Error::NonFiniteResult("sgd_train loss"));
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            let mut ok = true;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= scale * g;
                ok &= p.is_finite();
            }
            if !ok {
                return Err(Error::NonFiniteResult("sgd_train parameters"));
            }
        }
    }
    ParamVector::new(params)
}

/// Fraction of test rows whose argmax prediction matches the label.
/// Ties break toward the smallest class index.
pub fn evaluate(params: &ParamVector, spec: &ModelSpec, test: &LabeledDataset) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_data(test)?;
    if test.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let offsets = spec.offsets();
    let mut scratch = Scratch::new(spec);
    let n_layers = spec.num_layers();
    let mut correct = 0usize;
    for row in 0..test.len() {
        forward(params.values(), spec, &offsets, test.feature_row(row), &mut scratch);
        let logits = &scratch.activations[n_layers - 1];
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        if best == test.label(row) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_blobs;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    /// Two samples with identical features and both labels of a 2-class
    /// problem: with all-zero parameters the softmax is uniform and the
    /// batch gradient cancels exactly.
    fn cancelling_dataset(n_features: usize) -> LabeledDataset {
        let features = vec![0.5; 2 * n_features];
        LabeledDataset::new(features, n_features, vec![0, 1], 2).unwrap()
    }

    #[test]
    fn param_count_matches_layout() {
        let spec = ModelSpec::new(vec![2, 2]).unwrap();
        assert_eq!(spec.param_count(), 6);
        let spec = ModelSpec::new(vec![784, 32, 10]).unwrap();
        assert_eq!(spec.param_count(), 784 * 32 + 32 + 32 * 10 + 10);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::new(vec![3, 4, 2]).unwrap();
        let a = init_params(&spec, 11).unwrap();
        let b = init_params(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 12).unwrap());

        // biases sit after each weight block and start at exactly zero
        let v = a.values();
        let w1 = 3 * 4;
        assert!(v[w1..w1 + 4].iter().all(|&x| x == 0.0));
        let w2_off = w1 + 4 + 4 * 2;
        assert!(v[w2_off..w2_off + 2].iter().all(|&x| x == 0.0));
        // weights bounded by 1/sqrt(fan_in)
        assert!(v[..w1].iter().all(|&x| x.abs() < 1.0 / 3.0_f64.sqrt()));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let spec = ModelSpec::new(vec![3, 4, 2]).unwrap();
        let start = ParamVector::zeros(spec.param_count()).unwrap();
        let data = cancelling_dataset(3);
        let cfg = TrainConfig {
            local_iterations: 5,
            batch_size: 2,
            learning_rate: 0.5,
            seed: 3,
        };
        let out = sgd_train(&start, &spec, &data, &cfg).unwrap();
        assert_eq!(out, start);
    }

    /// One SGD step on a 1-input softmax pair, checked against the frozen
    /// analytic gradient of the cross-entropy: dW = (p - y) x, db = p - y.
    #[test]
    fn one_step_matches_analytic_gradient() {
        let spec = ModelSpec::new(vec![1, 2]).unwrap();
        // layout: [w0, w1, b0, b1]
        let start = pv(&[0.3, -0.2, 0.1, 0.0]);
        let data = LabeledDataset::new(vec![0.5], 1, vec![1], 2).unwrap();
        let cfg = TrainConfig {
            local_iterations: 1,
            batch_size: 1,
            learning_rate: 0.1,
            seed: 0,
        };
        let out = sgd_train(&start, &spec, &data, &cfg).unwrap();

        // z = (0.25, -0.1); p0 = 1/(1+exp(-0.35))
        let p0 = 1.0 / (1.0 + (-0.35f64).exp());
        let p1 = 1.0 - p0;
        let expected = [
            0.3 - 0.1 * p0 * 0.5,
            -0.2 - 0.1 * (p1 - 1.0) * 0.5,
            0.1 - 0.1 * p0,
            0.0 - 0.1 * (p1 - 1.0),
        ];
        for (got, want) in out.values().iter().zip(&expected) {
            assert!(
                (got - want).abs() < 1e-9,
                "got {got}, want {want}"
            );
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_blobs() {
        let data = synth_blobs(20, 3, 4, 0.05, 5).unwrap();
        let spec = ModelSpec::new(vec![4, 8, 3]).unwrap();
        let start = init_params(&spec, 1).unwrap();
        let cfg = TrainConfig {
            local_iterations: 200,
            batch_size: 16,
            learning_rate: 0.1,
            seed: 2,
        };
        let before = cross_entropy_loss(&start, &spec, &data).unwrap();
        let trained = sgd_train(&start, &spec, &data, &cfg).unwrap();
        let after = cross_entropy_loss(&trained, &spec, &data).unwrap();
        assert!(after < before, "loss {after} not below {before}");
        assert_eq!(evaluate(&trained, &spec, &data).unwrap(), 1.0);
    }

    #[test]
    fn training_is_reproducible() {
        let data = synth_blobs(10, 2, 3, 0.1, 4).unwrap();
        let spec = ModelSpec::new(vec![3, 5, 2]).unwrap();
        let start = init_params(&spec, 9).unwrap();
        let cfg = TrainConfig {
            local_iterations: 3,
            batch_size: 4,
            learning_rate: 0.05,
            seed: 77,
        };
        let a = sgd_train(&start, &spec, &data, &cfg).unwrap();
        let b = sgd_train(&start, &spec, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_batch_loss_non_increasing_at_small_lr() {
        let data = synth_blobs(15, 2, 3, 0.1, 6).unwrap();
        let spec = ModelSpec::new(vec![3, 6, 2]).unwrap();
        let mut params = init_params(&spec, 2).unwrap();
        let cfg = TrainConfig {
            local_iterations: 1,
            batch_size: data.len(),
            learning_rate: 1e-3,
            seed: 0,
        };
        for _ in 0..20 {
            let before = cross_entropy_loss(&params, &spec, &data).unwrap();
            params = sgd_train(&params, &spec, &data, &cfg).unwrap();
            let after = cross_entropy_loss(&params, &spec, &data).unwrap();
            assert!(after <= before, "loss rose from {before} to {after}");
        }
    }

    #[test]
    fn uniform_model_predicts_class_zero() {
        // all-zero parameters -> equal logits -> ties break to class 0
        let spec = ModelSpec::new(vec![2, 2]).unwrap();
        let params = ParamVector::zeros(6).unwrap();
        let data = LabeledDataset::new(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 2, vec![0, 1, 0], 2)
            .unwrap();
        let acc = evaluate(&params, &spec, &data).unwrap();
        assert_eq!(acc, 2.0 / 3.0); // exactly the class-0 fraction
    }

    #[test]
    fn evaluate_stays_in_range_for_random_params() {
        let spec = ModelSpec::new(vec![4, 3]).unwrap();
        let data = synth_blobs(10, 3, 4, 0.2, 3).unwrap();
        for seed in 0..5 {
            let params = init_params(&spec, seed).unwrap();
            let acc = evaluate(&params, &spec, &data).unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let spec = ModelSpec::new(vec![3, 2]).unwrap();
        let data = synth_blobs(4, 2, 3, 0.1, 1).unwrap();
        let wrong = ParamVector::zeros(5).unwrap();
        assert!(matches!(
            evaluate(&wrong, &spec, &data),
            Err(Error::DimensionMismatch { .. })
        ));
        let wrong_data = synth_blobs(4, 2, 2, 0.1, 1).unwrap();
        let params = ParamVector::zeros(spec.param_count()).unwrap();
        assert!(matches!(
            evaluate(&params, &spec, &wrong_data),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn divergence_reports_non_finite() {
        // parameters near f64::MAX overflow the very first forward pass;
        // the failure must surface as an error, not a clamped update
        let data = synth_blobs(10, 2, 3, 0.5, 4).unwrap();
        let spec = ModelSpec::new(vec![3, 2]).unwrap();
        let huge = 1.7e308;
        let start = pv(&[huge, huge, huge, 0.1, -0.2, 0.3, 0.0, 0.0]);
        let cfg = TrainConfig {
            local_iterations: 1,
            batch_size: 4,
            learning_rate: 0.05,
            seed: 1,
        };
        match sgd_train(&start, &spec, &data, &cfg) {
            Err(Error::NonFiniteResult(_)) => {}
            other => panic!("expected NonFiniteResult, got {other:?}"),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = ModelSpec::new(vec![3, 4, 2]).unwrap();
        let data = synth_blobs(6, 2, 3, 0.2, 8).unwrap();
        let params = init_params(&spec, 21).unwrap();
        let (_, grad) = loss_and_gradient(&params, &spec, &data).unwrap();
        let h = 1e-6;
        for i in 0..spec.param_count() {
            let mut plus = params.values().to_vec();
            plus[i] += h;
            let mut minus = params.values().to_vec();
            minus[i] -= h;
            let lp = cross_entropy_loss(&pv(&plus), &spec, &data).unwrap();
            let lm = cross_entropy_loss(&pv(&minus), &spec, &data).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = grad.values()[i];
            let denom = g.abs().max(fd.abs()).max(1e-8);
            assert!(
                (g - fd).abs() / denom < 1e-4,
                "coordinate {i}: analytic {g} vs finite-difference {fd}"
            );
        }
    }
}
