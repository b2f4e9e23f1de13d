//! Monte Carlo dropout inference and pixel-wise uncertainty.
//!
//! A Bayesian pass draws `N_s` stochastic forward samples (dropout active,
//! running batch-norm statistics) and stacks the softmax maps. From the
//! stack come the predictive mean, the per-class sample variance (CSV) and
//! its class average (MCSV), and the Shannon entropy of the mean — the two
//! uncertainty metrics. Decisions are per-pixel argmax rules, either plain
//! (MAP) or weighted by inverse training-class frequency (ML).

use rayon::prelude::*;

use crate::densenet::{self, ForwardMode, NetworkParams, NetworkSpec};
use crate::synthdata::Mask;
use crate::tensor::{Scalar, Tensor};
use crate::training::ClassStats;
use crate::{Error, Result};

/// Whether a stack came from stochastic sampling or one deterministic pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McSource {
    Bayesian,
    Benchmark,
}

/// Stacked softmax samples with shape `(H, W, N_b, N_s)`.
#[derive(Debug, Clone)]
pub struct McStack<S: Scalar> {
    samples: Tensor<S>,
    n_samples: usize,
    source: McSource,
}

impl<S: Scalar> McStack<S> {
    pub fn from_samples(maps: &[Tensor<S>], source: McSource) -> Result<Self> {
        let n_samples = maps.len();
        if n_samples == 0 {
            return Err(Error::Param("a stack needs at least one sample".into()));
        }
        if source == McSource::Benchmark && n_samples != 1 {
            return Err(Error::Contract(
                "a benchmark stack holds exactly one sample".into(),
            ));
        }
        let shape = maps[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::dim(format!(
                "stack samples must be (H,W,N_b) maps, got {shape:?}"
            )));
        }
        for (n, map) in maps.iter().enumerate() {
            if map.shape() != shape {
                return Err(Error::dim(format!(
                    "sample {n} has shape {:?}, expected {shape:?}",
                    map.shape()
                )));
            }
        }
        let (h, w, nb) = (shape[0], shape[1], shape[2]);
        let mut stacked = Tensor::zeros(vec![h, w, nb, n_samples]);
        {
            let out = stacked.data_mut();
            for (n, map) in maps.iter().enumerate() {
                for (cell, &v) in map.data().iter().enumerate() {
                    out[cell * n_samples + n] = v;
                }
            }
        }
        Ok(McStack {
            samples: stacked,
            n_samples,
            source,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn source(&self) -> McSource {
        self.source
    }

    /// Raw `(H, W, N_b, N_s)` tensor.
    pub fn samples(&self) -> &Tensor<S> {
        &self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.samples.shape()[0], self.samples.shape()[1])
    }

    /// Check that every (pixel, sample) slice is a probability vector.
    pub fn validate(&self) -> Result<()> {
        let nb = self.num_classes();
        let ns = self.n_samples;
        let data = self.samples.data();
        for (px, chunk) in data.chunks_exact(nb * ns).enumerate() {
            for n in 0..ns {
                let mut sum = 0.0f64;
                for c in 0..nb {
                    sum += chunk[c * ns + n].to_f64();
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Contract(format!(
                        "sample {n} at pixel {px} sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draw `n_samples` keyed Monte Carlo dropout samples. Sample `n` depends
/// only on `(params, image, seed, n)`, so results are invariant to
/// evaluation order and parallelism.
pub fn mc_sample<S: Scalar>(
    params: &NetworkParams<S>,
    spec: &NetworkSpec,
    image: &Tensor<S>,
    n_samples: usize,
    seed: u64,
) -> Result<McStack<S>> {
    if n_samples < 1 {
        return Err(Error::Param(format!(
            "n_samples must be at least 1, got {n_samples}"
        )));
    }
    let maps: Vec<Tensor<S>> = (0..n_samples)
        .into_par_iter()
        .map(|n| {
            densenet::forward(
                params,
                spec,
                image,
                ForwardMode::McSample {
                    seed,
                    sample: n as u64,
                },
            )
        })
        .collect::<Result<_>>()?;
    McStack::from_samples(&maps, McSource::Bayesian)
}

/// One deterministic pass wrapped as a single-sample benchmark stack.
pub fn benchmark_stack<S: Scalar>(
    params: &NetworkParams<S>,
    spec: &NetworkSpec,
    image: &Tensor<S>,
) -> Result<McStack<S>> {
    let map = densenet::forward(params, spec, image, ForwardMode::Deterministic)?;
    McStack::from_samples(&[map], McSource::Benchmark)
}

/// Mean over the sample axis: `E(S_i) = (1/N_s) sum_n S_i^n` per pixel/class.
pub fn predictive_mean<S: Scalar>(stack: &McStack<S>) -> Tensor<S> {
    let shape = stack.samples.shape();
    let (h, w, nb) = (shape[0], shape[1], shape[2]);
    let ns = stack.n_samples;
    let inv = S::from_f64(1.0 / ns as f64);
    let data = stack.samples.data();
    Tensor::from_fn(vec![h, w, nb], |cell| {
        let mut acc = S::ZERO;
        for n in 0..ns {
            acc += data[cell * ns + n];
        }
        acc * inv
    })
}

/// Shannon entropy per pixel, `sum_i -p_i ln p_i`, with `0 ln 0 := 0`.
pub fn entropy<S: Scalar>(probabilities: &Tensor<S>) -> Result<Tensor<S>> {
    let dims = probabilities.spatial_dims()?;
    let nb = dims.channels;
    let data = probabilities.data();
    let mut out = Tensor::zeros(vec![dims.height, dims.width]);
    for (h_out, px) in out.data_mut().iter_mut().zip(data.chunks_exact(nb)) {
        let mut acc = S::ZERO;
        for &p in px {
            if p > S::ZERO {
                acc -= p * p.ln();
            }
        }
        *h_out = acc;
    }
    Ok(out)
}

/// Unbiased per-class sample variance of the stack, `(1/(N_s-1)) sum_n
/// (S_i^n - E(S_i))^2`. Needs at least two samples.
pub fn class_softmax_variance<S: Scalar>(stack: &McStack<S>) -> Result<Tensor<S>> {
    let ns = stack.n_samples;
    if ns < 2 {
        return Err(Error::Contract(format!(
            "sample variance is undefined for N_s = {ns}"
        )));
    }
    let shape = stack.samples.shape();
    let (h, w, nb) = (shape[0], shape[1], shape[2]);
    let inv_nm1 = S::from_f64(1.0 / (ns - 1) as f64);
    let data = stack.samples.data();
    Tensor::new(
        vec![h, w, nb],
        (0..h * w * nb)
            .map(|cell| {
                // Welford accumulation: exactly zero for constant samples.
                let slice = &data[cell * ns..(cell + 1) * ns];
                let mut mean = S::ZERO;
                let mut m2 = S::ZERO;
                for (k, &v) in slice.iter().enumerate() {
                    let d = v - mean;
                    mean += d / S::from_f64((k + 1) as f64);
                    m2 += d * (v - mean);
                }
                m2 * inv_nm1
            })
            .collect(),
    )
}

/// Mean of the per-class softmax variances.
pub fn mcsv<S: Scalar>(csv: &Tensor<S>) -> Result<Tensor<S>> {
    let dims = csv.spatial_dims()?;
    let nb = dims.channels;
    let inv = S::from_f64(1.0 / nb as f64);
    let data = csv.data();
    Ok(Tensor::from_fn(vec![dims.height, dims.width], |px| {
        let mut acc = S::ZERO;
        for &v in &data[px * nb..(px + 1) * nb] {
            acc += v;
        }
        acc * inv
    }))
}

/// Per-pixel label assignment rule.
#[derive(Debug, Clone)]
pub enum DecisionRule {
    /// Maximum a-posteriori: argmax of the class probabilities.
    Map,
    /// Maximum likelihood: argmax of probabilities divided by the
    /// training-split class frequencies.
    Ml { frequencies: Vec<f64> },
}

impl DecisionRule {
    pub fn ml_from_stats(stats: &ClassStats) -> Self {
        DecisionRule::Ml {
            frequencies: stats.frequencies.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecisionRule::Map => "MAP",
            DecisionRule::Ml { .. } => "ML",
        }
    }
}

/// Assign a label per pixel. Ties break to the lowest class index.
pub fn decide<S: Scalar>(probabilities: &Tensor<S>, rule: &DecisionRule) -> Result<Mask> {
    let dims = probabilities.spatial_dims()?;
    let nb = dims.channels;
    if nb > u8::MAX as usize + 1 {
        return Err(Error::Param(format!(
            "{nb} classes exceed the u8 label range"
        )));
    }
    let scale: Option<Vec<f64>> = match rule {
        DecisionRule::Map => None,
        DecisionRule::Ml { frequencies } => {
            if frequencies.len() != nb {
                return Err(Error::Rule(format!(
                    "{} frequencies for {nb} classes",
                    frequencies.len()
                )));
            }
            if let Some(zero) = frequencies.iter().position(|&f| f <= 0.0) {
                return Err(Error::Rule(format!(
                    "ML rule needs positive frequencies, class {zero} has {}",
                    frequencies[zero]
                )));
            }
            Some(frequencies.iter().map(|&f| 1.0 / f).collect())
        }
    };
    let data = probabilities.data();
    let mut labels = Vec::with_capacity(dims.height * dims.width);
    for px in data.chunks_exact(nb) {
        let mut best_class = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (c, &p) in px.iter().enumerate() {
            let score = match &scale {
                Some(s) => p.to_f64() * s[c],
                None => p.to_f64(),
            };
            if score > best_score {
                best_score = score;
                best_class = c;
            }
        }
        labels.push(best_class as u8);
    }
    Mask::new(dims.height, dims.width, labels)
}

/// The four per-pixel uncertainty products of one analysis.
#[derive(Debug, Clone)]
pub struct UncertaintyMaps<S: Scalar> {
    /// Predictive mean, `(H, W, N_b)`.
    pub mean: Tensor<S>,
    /// Per-class softmax variance, `(H, W, N_b)`; zero for benchmark runs.
    pub csv: Tensor<S>,
    /// Entropy of the predictive mean, `(H, W)`.
    pub entropy: Tensor<S>,
    /// Mean of the per-class variances, `(H, W)`.
    pub mcsv: Tensor<S>,
}

/// Analysis products: prediction mask, uncertainty maps, and the stack.
pub struct Analysis<S: Scalar> {
    pub prediction: Mask,
    pub maps: UncertaintyMaps<S>,
    pub stack: McStack<S>,
}

/// Full inference pipeline: sample, average, decide, quantify uncertainty.
///
/// Networks without dropout take the benchmark path: one deterministic
/// pass, zero CSV/MCSV, entropy of the deterministic softmax.
pub fn analyze<S: Scalar>(
    params: &NetworkParams<S>,
    spec: &NetworkSpec,
    image: &Tensor<S>,
    n_samples: usize,
    seed: u64,
    rule: &DecisionRule,
) -> Result<Analysis<S>> {
    let stack = if spec.dropout_p > 0.0 {
        mc_sample(params, spec, image, n_samples, seed)?
    } else {
        benchmark_stack(params, spec, image)?
    };
    let mean = predictive_mean(&stack);
    let ent = entropy(&mean)?;
    let csv = if stack.n_samples() >= 2 {
        class_softmax_variance(&stack)?
    } else {
        Tensor::zeros(mean.shape().to_vec())
    };
    let mcsv_map = mcsv(&csv)?;
    let prediction = decide(&mean, rule)?;
    Ok(Analysis {
        prediction,
        maps: UncertaintyMaps {
            mean,
            csv,
            entropy: ent,
            mcsv: mcsv_map,
        },
        stack,
    })
}
