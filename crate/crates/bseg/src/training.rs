//! Weighted cross-entropy training: splits, class statistics, Nadam with
//! per-epoch exponential learning-rate decay, L2 regularization, and early
//! stopping on the validation loss.

use crate::densenet::{self, ForwardMode, NetworkParams, NetworkSpec};
use crate::rng::{self, domain, CounterRng};
use crate::synthdata::{LabeledImage, Mask};
use crate::tensor::ops::weighted_cross_entropy_value;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// How per-class loss weights are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// Every class weighs 1 (UW).
    Uniform,
    /// Median class frequency over class frequency (MFW).
    MedianFrequency,
}

impl WeightScheme {
    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::Uniform => "UW",
            WeightScheme::MedianFrequency => "MFW",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "UW" => Ok(WeightScheme::Uniform),
            "MFW" => Ok(WeightScheme::MedianFrequency),
            other => Err(Error::Config(format!(
                "unknown weight scheme {other:?} (expected UW or MFW)"
            ))),
        }
    }
}

/// Class pixel counts over the training split, the derived frequencies,
/// and the per-class loss weights.
#[derive(Debug, Clone)]
pub struct ClassStats {
    pub pixel_counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub weights: Vec<f64>,
    pub scheme: WeightScheme,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.pixel_counts.len()
    }

    pub fn weights_as<S: Scalar>(&self) -> Vec<S> {
        self.weights.iter().map(|&w| S::from_f64(w)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("scheme={}\n", self.scheme.name());
        for (i, ((c, f), w)) in self
            .pixel_counts
            .iter()
            .zip(&self.frequencies)
            .zip(&self.weights)
            .enumerate()
        {
            out.push_str(&format!("class={i} count={c} frequency={f} weight={w}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::format("class stats", "empty file"))?;
        let scheme = head
            .strip_prefix("scheme=")
            .ok_or_else(|| Error::format("class stats", "missing scheme line"))
            .and_then(WeightScheme::parse)?;
        let mut pixel_counts = Vec::new();
        let mut frequencies = Vec::new();
        let mut weights = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut count = None;
            let mut freq = None;
            let mut weight = None;
            for part in line.split_whitespace() {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| Error::format("class stats", "bad field"))?;
                match k {
                    "count" => count = v.parse::<u64>().ok(),
                    "frequency" => freq = v.parse::<f64>().ok(),
                    "weight" => weight = v.parse::<f64>().ok(),
                    _ => {}
                }
            }
            pixel_counts.push(count.ok_or_else(|| Error::format("class stats", "missing count"))?);
            frequencies
                .push(freq.ok_or_else(|| Error::format("class stats", "missing frequency"))?);
            weights.push(weight.ok_or_else(|| Error::format("class stats", "missing weight"))?);
        }
        if pixel_counts.is_empty() {
            return Err(Error::format("class stats", "no class lines"));
        }
        Ok(ClassStats {
            pixel_counts,
            frequencies,
            weights,
            scheme,
        })
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Count pixels per class over training masks and derive loss weights.
/// Classes absent from the split get frequency 0 and weight 0, excluding
/// them from the loss instead of dividing by zero.
pub fn class_stats(
    masks: &[&Mask],
    num_classes: usize,
    scheme: WeightScheme,
) -> Result<ClassStats> {
    if masks.is_empty() {
        return Err(Error::Size("class_stats needs at least one mask".into()));
    }
    let mut pixel_counts = vec![0u64; num_classes];
    for mask in masks {
        for (count, per_mask) in pixel_counts.iter_mut().zip(mask.class_counts(num_classes)?) {
            *count += per_mask;
        }
    }
    let total: u64 = pixel_counts.iter().sum();
    let frequencies: Vec<f64> = pixel_counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    let weights = match scheme {
        WeightScheme::Uniform => frequencies
            .iter()
            .map(|&f| if f > 0.0 { 1.0 } else { 0.0 })
            .collect(),
        WeightScheme::MedianFrequency => {
            let mut present: Vec<f64> = frequencies.iter().copied().filter(|&f| f > 0.0).collect();
            present.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = median(&present);
            frequencies
                .iter()
                .map(|&f| if f > 0.0 { med / f } else { 0.0 })
                .collect()
        }
    };
    Ok(ClassStats {
        pixel_counts,
        frequencies,
        weights,
        scheme,
    })
}

/// Plain (graph-free) weighted cross-entropy of a softmax map.
pub fn weighted_cross_entropy<S: Scalar>(
    softmax: &Tensor<S>,
    mask: &Mask,
    stats: &ClassStats,
) -> Result<S> {
    let weights = stats.weights_as::<S>();
    let (loss, _) = weighted_cross_entropy_value(softmax, &mask.labels, &weights)?;
    Ok(loss)
}

/// Train/validation/test index partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn by_name(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, val, or test)"
            ))),
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Shuffle `0..n` and partition: 20% test, then 20% of the remainder as
/// validation, the rest as training.
pub fn split(n: usize, seed: u64) -> Result<SplitSpec> {
    if n < 5 {
        return Err(Error::Size(format!(
            "dataset of {n} is too small to split (min 5)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    CounterRng::from_parts(seed, domain::SPLIT, 0).shuffle(&mut order);
    let n_test = round_half_up(0.2 * n as f64);
    let n_val = round_half_up(0.2 * (n - n_test) as f64);
    let test = order[..n_test].to_vec();
    let val = order[n_test..n_test + n_val].to_vec();
    let train = order[n_test + n_val..].to_vec();
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Size(format!("degenerate split for n = {n}")));
    }
    Ok(SplitSpec { train, val, test })
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2_coeff: f64,
    pub weight_scheme: WeightScheme,
    pub seed: u64,
    /// MC samples per validation image when the network is Bayesian.
    pub val_samples: usize,
    /// Select checkpoints on the deterministic validation loss instead of
    /// the MC-mean one.
    pub val_deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1.0e-4,
            lr_decay_per_epoch: 0.9996,
            batch_size: 2,
            max_epochs: 200,
            patience: 15,
            l2_coeff: 1.0e-4,
            weight_scheme: WeightScheme::Uniform,
            seed: 0,
            val_samples: 10,
            val_deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate after `epoch` whole epochs of exponential decay.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

pub const NADAM_BETA1: f64 = 0.9;
pub const NADAM_BETA2: f64 = 0.999;
pub const NADAM_EPS: f64 = 1e-8;

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct NadamState<S: Scalar> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> NadamState<S> {
    pub fn new(params: &NetworkParams<S>) -> Self {
        let buffers: Vec<Vec<S>> = params
            .trainable_indices()
            .iter()
            .map(|&i| vec![S::ZERO; params.entries()[i].tensor.numel()])
            .collect();
        NadamState {
            m: buffers.clone(),
            v: buffers,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Nadam update over a parameter slice.
fn nadam_apply<S: Scalar>(
    theta: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    lr: f64,
    l2: f64,
) {
    let beta1 = S::from_f64(NADAM_BETA1);
    let beta2 = S::from_f64(NADAM_BETA2);
    let one_m_b1 = S::ONE - beta1;
    let one_m_b2 = S::ONE - beta2;
    let l2 = S::from_f64(l2);
    // Bias corrections: the momentum term looks one step ahead.
    let c_m = S::from_f64(1.0 - NADAM_BETA1.powi(t as i32 + 1));
    let c_g = S::from_f64(1.0 - NADAM_BETA1.powi(t as i32));
    let c_v = S::from_f64(1.0 - NADAM_BETA2.powi(t as i32));
    let lr = S::from_f64(lr);
    let eps = S::from_f64(NADAM_EPS);
    for i in 0..theta.len() {
        let g = grad[i] + l2 * theta[i];
        m[i] = beta1 * m[i] + one_m_b1 * g;
        v[i] = beta2 * v[i] + one_m_b2 * g * g;
        let m_hat = m[i] / c_m;
        let g_hat = g / c_g;
        let v_hat = v[i] / c_v;
        theta[i] -= lr * (beta1 * m_hat + one_m_b1 * g_hat) / (v_hat.sqrt() + eps);
    }
}

/// Apply one Nadam step at learning rate `lr_t`. `grads` must align with
/// `params.trainable_indices()`. The L2 term is added to each gradient
/// before the update.
pub fn nadam_step<S: Scalar>(
    params: &mut NetworkParams<S>,
    grads: &[Tensor<S>],
    state: &mut NadamState<S>,
    lr_t: f64,
    l2_coeff: f64,
) -> Result<()> {
    let trainable = params.trainable_indices();
    if grads.len() != trainable.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} trainable parameters",
            grads.len(),
            trainable.len()
        )));
    }
    state.step += 1;
    for (slot, (&entry_idx, grad)) in trainable.iter().zip(grads).enumerate() {
        let mut tensor = params.entries()[entry_idx].tensor.clone();
        if tensor.shape() != grad.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match parameter {:?}",
                grad.shape(),
                tensor.shape()
            )));
        }
        nadam_apply(
            tensor.data_mut(),
            grad.data(),
            &mut state.m[slot],
            &mut state.v[slot],
            state.step,
            lr_t,
            l2_coeff,
        );
        params.set_tensor(entry_idx, tensor);
    }
    Ok(())
}

/// Early stopping on the validation loss: strict improvements reset the
/// counter; `patience` stale epochs in a row stop training.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns `(improved, stop)` for the 1-based epoch just evaluated.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub is_best: bool,
}

impl EpochRecord {
    /// `epoch,lr,train_loss,val_loss,is_best`
    pub fn to_line(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.val_loss,
            u8::from(self.is_best)
        )
    }
}

pub struct FitResult<S: Scalar> {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: NetworkParams<S>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn stack_batch<S: Scalar>(
    dataset: &[LabeledImage<S>],
    indices: &[usize],
) -> Result<(Tensor<S>, Vec<u8>)> {
    let first = &dataset[indices[0]].image;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * indices.len());
    let mut labels = Vec::new();
    for &i in indices {
        let img = &dataset[i].image;
        if img.shape() != shape {
            return Err(Error::dim(format!(
                "image {i} has shape {:?}, batch expects {shape:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
        labels.extend_from_slice(&dataset[i].mask.labels);
    }
    let mut batch_shape = vec![indices.len()];
    batch_shape.extend_from_slice(&shape);
    Ok((Tensor::new(batch_shape, data)?, labels))
}

/// Mean softmax map over `n` MC samples of one image.
fn mc_mean_softmax<S: Scalar>(
    params: &NetworkParams<S>,
    spec: &NetworkSpec,
    image: &Tensor<S>,
    n: usize,
    seed: u64,
) -> Result<Tensor<S>> {
    let mut acc: Option<Tensor<S>> = None;
    for sample in 0..n {
        let one = densenet::forward(
            params,
            spec,
            image,
            ForwardMode::McSample {
                seed,
                sample: sample as u64,
            },
        )?;
        match &mut acc {
            Some(acc) => acc.accumulate(&one),
            none => *none = Some(one),
        }
    }
    let inv = S::from_f64(1.0 / n as f64);
    Ok(acc.expect("n >= 1").map(|v| v * inv))
}

/// Train a network, checkpointing on the lowest validation loss.
///
/// Bayesian networks (dropout_p > 0) compute the validation loss on the
/// MC-mean softmax with `config.val_samples` samples unless
/// `config.val_deterministic` is set.
pub fn fit<S: Scalar>(
    spec: &NetworkSpec,
    config: &TrainConfig,
    dataset: &[LabeledImage<S>],
    split: &SplitSpec,
    stats: &ClassStats,
) -> Result<FitResult<S>> {
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Size(
            "fit needs non-empty train and val splits".into(),
        ));
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::Param(
            "batch_size and max_epochs must be positive".into(),
        ));
    }
    let weights = stats.weights_as::<S>();
    let mut params = densenet::build::<S>(spec, config.seed)?;
    let mut optimizer = NadamState::new(&params);
    let mut stopper = EarlyStopping::new(config.patience.max(1));
    let mut best_params = params.clone();
    let mut log = Vec::new();
    let mut global_step = 0u64;

    for epoch in 1..=config.max_epochs {
        let lr_t = config.lr_at_epoch(epoch - 1);

        let mut order = split.train.clone();
        CounterRng::from_parts(config.seed, domain::EPOCH_SHUFFLE, epoch as u64)
            .shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut weight_sum = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let (input, labels) = stack_batch(dataset, batch)?;
            let mut pass = densenet::forward_pass(
                &params,
                spec,
                &input,
                ForwardMode::Train {
                    seed: config.seed,
                    step: global_step,
                },
            )?;
            let loss = pass
                .graph
                .weighted_cross_entropy(pass.output, &labels, &weights)?;
            pass.graph.backward(loss)?;

            let batch_weight: f64 = labels.iter().map(|&l| stats.weights[l as usize]).sum();
            loss_sum += pass.graph.value(loss).data()[0].to_f64() * batch_weight;
            weight_sum += batch_weight;

            let grads: Vec<Tensor<S>> = params
                .trainable_indices()
                .iter()
                .map(|&i| {
                    let node = pass.param_nodes[i].expect("trainable param in train graph");
                    pass.graph
                        .grad(node)
                        .expect("backward filled grads")
                        .clone()
                })
                .collect();
            nadam_step(&mut params, &grads, &mut optimizer, lr_t, config.l2_coeff)?;
            for update in pass.bn_updates.drain(..) {
                update.apply(&mut params);
            }
            global_step += 1;
        }
        let train_loss = if weight_sum > 0.0 {
            loss_sum / weight_sum
        } else {
            0.0
        };

        let mut val_loss_sum = 0.0f64;
        let mut val_weight_sum = 0.0f64;
        for &i in &split.val {
            let item = &dataset[i];
            let probs = if config.val_deterministic || spec.dropout_p == 0.0 {
                densenet::forward(&params, spec, &item.image, ForwardMode::Deterministic)?
            } else {
                let sample_seed =
                    rng::mix(&[config.seed, domain::VALIDATION, epoch as u64, i as u64]);
                mc_mean_softmax(&params, spec, &item.image, config.val_samples, sample_seed)?
            };
            let (loss, total) = weighted_cross_entropy_value(&probs, &item.mask.labels, &weights)?;
            val_loss_sum += loss.to_f64() * total.to_f64();
            val_weight_sum += total.to_f64();
        }
        let val_loss = if val_weight_sum > 0.0 {
            val_loss_sum / val_weight_sum
        } else {
            0.0
        };

        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_params = params.clone();
        }
        log.push(EpochRecord {
            epoch,
            lr: lr_t,
            train_loss,
            val_loss,
            is_best: improved,
        });
        if stop {
            break;
        }
    }

    Ok(FitResult {
        params: best_params,
        log,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SceneSpec, Task};

    #[test]
    fn split_arithmetic_small() {
        let s = split(10, 0).unwrap();
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.train.len(), 6);
    }

    #[test]
    fn split_arithmetic_crack_forest_size() {
        let s = split(118, 0).unwrap();
        assert_eq!(s.test.len(), 24);
        assert_eq!(s.val.len(), 19);
        assert_eq!(s.train.len(), 75);
    }

    #[test]
    fn split_is_deterministic_disjoint_covering() {
        let a = split(37, 5).unwrap();
        let b = split(37, 5).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert_ne!(a, split(37, 6).unwrap());
    }

    #[test]
    fn split_rejects_tiny_datasets() {
        assert!(matches!(split(4, 0), Err(Error::Size(_))));
    }

    fn mask_of(labels: Vec<u8>) -> Mask {
        let n = labels.len();
        Mask::new(1, n, labels).unwrap()
    }

    #[test]
    fn uniform_frequencies_give_unit_mfw_weights() {
        let m = mask_of(vec![0, 0, 1, 1]);
        let stats = class_stats(&[&m], 2, WeightScheme::MedianFrequency).unwrap();
        assert_eq!(stats.frequencies, vec![0.5, 0.5]);
        assert_eq!(stats.weights, vec![1.0, 1.0]);
    }

    #[test]
    fn mfw_weights_match_hand_example() {
        // f = (0.98, 0.02): median 0.5, weights (0.5102..., 25.0).
        let mut labels = vec![0u8; 98];
        labels.extend_from_slice(&[1, 1]);
        let m = mask_of(labels);
        let stats = class_stats(&[&m], 2, WeightScheme::MedianFrequency).unwrap();
        assert!((stats.weights[0] - 0.5 / 0.98).abs() < 1e-12);
        assert!((stats.weights[1] - 25.0).abs() < 1e-12);
        // w_i * f_i == median(f) for counted classes
        for (w, f) in stats.weights.iter().zip(&stats.frequencies) {
            assert!((w * f - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn uw_weights_are_all_ones() {
        let m = mask_of(vec![0, 0, 0, 1]);
        let stats = class_stats(&[&m], 2, WeightScheme::Uniform).unwrap();
        assert_eq!(stats.weights, vec![1.0, 1.0]);
    }

    #[test]
    fn absent_class_gets_zero_weight_and_frequency() {
        let m = mask_of(vec![0, 0, 2, 2]);
        let stats = class_stats(&[&m], 3, WeightScheme::MedianFrequency).unwrap();
        assert_eq!(stats.frequencies[1], 0.0);
        assert_eq!(stats.weights[1], 0.0);
        let uw = class_stats(&[&m], 3, WeightScheme::Uniform).unwrap();
        assert_eq!(uw.weights, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn out_of_range_label_reports_location() {
        let m = mask_of(vec![0, 5]);
        let err = class_stats(&[&m], 2, WeightScheme::Uniform).unwrap_err();
        assert!(matches!(err, Error::Label(_)));
        assert!(err.to_string().contains("(0, 1)"), "{err}");
    }

    fn uniform_stats(n: usize) -> ClassStats {
        ClassStats {
            pixel_counts: vec![1; n],
            frequencies: vec![1.0 / n as f64; n],
            weights: vec![1.0; n],
            scheme: WeightScheme::Uniform,
        }
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let softmax =
            Tensor::<f64>::new(vec![1, 2, 2], vec![1.0 - 1e-9, 1e-9, 1e-9, 1.0 - 1e-9]).unwrap();
        let mask = mask_of(vec![0, 1]);
        let loss = weighted_cross_entropy(&softmax, &mask, &uniform_stats(2)).unwrap();
        assert!(loss.abs() < 1e-8, "loss {loss}");
    }

    #[test]
    fn uniform_predictions_cost_ln_nb() {
        for nb in [2usize, 6] {
            let softmax = Tensor::<f64>::filled(vec![1, 4, nb], 1.0 / nb as f64);
            let mask = mask_of(vec![0, (nb - 1) as u8, 1, 0]);
            let loss = weighted_cross_entropy(&softmax, &mask, &uniform_stats(nb)).unwrap();
            assert!((loss - (nb as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_weight_cancels() {
        // One pixel, S_true = 0.25, w_true = 2: the normalizer cancels the
        // weight, leaving ln 4.
        let softmax = Tensor::<f64>::new(vec![1, 1, 2], vec![0.25, 0.75]).unwrap();
        let mask = mask_of(vec![0]);
        let stats = ClassStats {
            pixel_counts: vec![1, 1],
            frequencies: vec![0.5, 0.5],
            weights: vec![2.0, 1.0],
            scheme: WeightScheme::MedianFrequency,
        };
        let loss = weighted_cross_entropy(&softmax, &mask, &stats).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_invariant_under_weight_rescaling() {
        let softmax = Tensor::<f64>::from_fn(vec![2, 3, 2], |i| {
            if i % 2 == 0 {
                0.3 + 0.05 * (i as f64)
            } else {
                0.7 - 0.05 * (i as f64 - 1.0)
            }
        });
        let mask = mask_of(vec![0, 1, 1, 0, 1, 0]);
        let stats = ClassStats {
            pixel_counts: vec![3, 3],
            frequencies: vec![0.5, 0.5],
            weights: vec![0.7, 3.1],
            scheme: WeightScheme::MedianFrequency,
        };
        let mut scaled = stats.clone();
        for w in scaled.weights.iter_mut() {
            *w *= 10.0;
        }
        let a = weighted_cross_entropy(&softmax, &mask, &stats).unwrap();
        let b = weighted_cross_entropy(&softmax, &mask, &scaled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn nadam_zero_gradient_is_a_no_op() {
        let mut theta = vec![0.7f64, -1.3];
        let grad = vec![0.0, 0.0];
        let mut m = vec![0.0, 0.0];
        let mut v = vec![0.0, 0.0];
        nadam_apply(&mut theta, &grad, &mut m, &mut v, 1, 1e-3, 0.0);
        assert_eq!(theta, vec![0.7, -1.3]);
    }

    #[test]
    fn nadam_first_step_matches_direct_substitution() {
        // theta = 0, g = 1, t = 1, lr = 1e-3, no L2:
        //   m1 = 0.1, v1 = 1e-3
        //   m_hat = 0.1 / (1 - 0.9^2), g_hat = 1 / (1 - 0.9), v_hat = 1
        //   theta' = -lr (0.9 m_hat + 0.1 g_hat) / (sqrt(v_hat) + 1e-8)
        let mut theta = vec![0.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        nadam_apply(&mut theta, &[1.0], &mut m, &mut v, 1, 1e-3, 0.0);
        let expected = -1e-3 * (0.9 * (0.1 / (1.0 - 0.9f64.powi(2))) + 0.1 * (1.0 / 0.1))
            / (1.0f64.sqrt() + 1e-8);
        assert!(
            (theta[0] - expected).abs() < 1e-15,
            "{} vs {expected}",
            theta[0]
        );
        // Frozen value of the substitution above.
        assert!((theta[0] - (-1.4736841957e-3)).abs() < 1e-12);
    }

    #[test]
    fn nadam_with_zero_lr_changes_nothing() {
        let spec = crate::densenet::NetworkSpec::tiny(2, 1);
        let mut params = crate::densenet::build::<f64>(&spec, 0).unwrap();
        let before: Vec<Vec<u64>> = params
            .entries()
            .iter()
            .map(|e| e.tensor.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let grads: Vec<Tensor<f64>> = params
            .trainable_indices()
            .iter()
            .map(|&i| {
                Tensor::from_fn(params.entries()[i].tensor.shape().to_vec(), |j| {
                    (j as f64).sin()
                })
            })
            .collect();
        let mut state = NadamState::new(&params);
        nadam_step(&mut params, &grads, &mut state, 0.0, 1e-4).unwrap();
        for (entry, bits) in params.entries().iter().zip(&before) {
            let now: Vec<u64> = entry.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, bits, "{}", entry.id);
        }
    }

    #[test]
    fn nadam_l2_pulls_toward_zero() {
        let mut theta = vec![1.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        nadam_apply(&mut theta, &[0.0], &mut m, &mut v, 1, 1e-3, 0.1);
        assert!(theta[0] < 1.0);
    }

    #[test]
    fn lr_decay_matches_direct_exponentiation() {
        let config = TrainConfig::default();
        let lr = config.lr_at_epoch(100);
        assert!((lr - 1.0e-4 * 0.9996f64.powi(100)).abs() < 1e-20);
        assert!((lr - 9.6079e-5).abs() < 1e-8, "lr {lr}");
        assert_eq!(config.lr_at_epoch(0), 1.0e-4);
    }

    #[test]
    fn early_stopping_rule_trace() {
        // losses [1.0, 0.9, 0.95, 0.96], patience 2: stop after epoch 4,
        // best at epoch 2.
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(1, 1.0), (true, false));
        assert_eq!(es.observe(2, 0.9), (true, false));
        assert_eq!(es.observe(3, 0.95), (false, false));
        assert_eq!(es.observe(4, 0.96), (false, true));
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn patience_longer_than_run_never_stops() {
        let mut es = EarlyStopping::new(100);
        for epoch in 1..=20 {
            let (_, stop) = es.observe(epoch, 1.0 + epoch as f64);
            assert!(!stop);
        }
    }

    fn tiny_dataset() -> Vec<LabeledImage<f32>> {
        generate(&SceneSpec {
            task: Task::Crack,
            width: 24,
            height: 16,
            count: 8,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn fit_runs_and_is_deterministic() {
        let dataset = tiny_dataset();
        let split = split(dataset.len(), 0).unwrap();
        let masks: Vec<&Mask> = split.train.iter().map(|&i| &dataset[i].mask).collect();
        let stats = class_stats(&masks, 2, WeightScheme::Uniform).unwrap();
        let net = crate::densenet::NetworkSpec::tiny(2, 3);
        let config = TrainConfig {
            max_epochs: 2,
            patience: 5,
            val_samples: 2,
            ..TrainConfig::default()
        };
        let a = fit(&net, &config, &dataset, &split, &stats).unwrap();
        let b = fit(&net, &config, &dataset, &split, &stats).unwrap();
        assert_eq!(a.log.len(), 2);
        assert!(a
            .log
            .iter()
            .all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
        for (ea, eb) in a.params.entries().iter().zip(b.params.entries()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ea.tensor), bits(&eb.tensor), "{}", ea.id);
        }
        assert_eq!(
            a.log[0].to_line().split(',').count(),
            5,
            "log line format: {}",
            a.log[0].to_line()
        );
    }
}
