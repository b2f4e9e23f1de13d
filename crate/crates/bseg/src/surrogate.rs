//! Uncertainty-assisted surrogate refinement.
//!
//! A second network consumes the original image stacked with the base
//! model's uncertainty output — per-class predictive means, per-class
//! softmax variances, and entropy — and is trained on the same labels.
//! Uncertainty channels are min-max normalized with constants computed on
//! the training split only; the constants travel with the surrogate
//! dataset so the construction is reproducible.

use crate::bayes_uq::{self, DecisionRule, UncertaintyMaps};
use crate::densenet::{NetworkParams, NetworkSpec};
use crate::rng;
use crate::seg_metrics::{self, ConfusionMatrix, LabeledReport, MetricReport};
use crate::synthdata::LabeledImage;
use crate::tensor::{ops, Scalar, Tensor};
use crate::training::{self, ClassStats, EpochRecord, SplitSpec, TrainConfig};
use crate::{Error, Result};

/// Channel layout of the stacked surrogate input:
/// image, then E(S_i) per class, then CSV_i per class, then entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurrogateLayout {
    pub image_channels: usize,
    pub num_classes: usize,
}

impl SurrogateLayout {
    pub fn total_channels(&self) -> usize {
        self.image_channels + 2 * self.num_classes + 1
    }

    pub fn mean_offset(&self) -> usize {
        self.image_channels
    }

    pub fn csv_offset(&self) -> usize {
        self.image_channels + self.num_classes
    }

    pub fn entropy_offset(&self) -> usize {
        self.image_channels + 2 * self.num_classes
    }

    fn kind_of(&self, channel: usize) -> &'static str {
        if channel < self.mean_offset() {
            "image"
        } else if channel < self.csv_offset() {
            "mean"
        } else if channel < self.entropy_offset() {
            "csv"
        } else {
            "entropy"
        }
    }
}

/// Per-channel min/max used to normalize the stacked input. Image and
/// probability channels pass through with the fixed range [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNormalization {
    pub layout: SurrogateLayout,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl ChannelNormalization {
    /// Compute normalization constants from the training-split maps only.
    pub fn from_training_maps<S: Scalar>(
        layout: SurrogateLayout,
        train_maps: &[&UncertaintyMaps<S>],
    ) -> Result<Self> {
        if train_maps.is_empty() {
            return Err(Error::Size(
                "normalization needs at least one training map".into(),
            ));
        }
        let total = layout.total_channels();
        let mut mins = vec![0.0f64; total];
        let mut maxs = vec![1.0f64; total];
        let nb = layout.num_classes;
        for c in 0..nb {
            let channel = layout.csv_offset() + c;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for maps in train_maps {
                for px in 0..maps.csv.numel() / nb {
                    let v = maps.csv.data()[px * nb + c].to_f64();
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            mins[channel] = lo;
            maxs[channel] = hi;
        }
        {
            let channel = layout.entropy_offset();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for maps in train_maps {
                for &v in maps.entropy.data() {
                    lo = lo.min(v.to_f64());
                    hi = hi.max(v.to_f64());
                }
            }
            mins[channel] = lo;
            maxs[channel] = hi;
        }
        Ok(ChannelNormalization { layout, mins, maxs })
    }

    fn normalize(&self, channel: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[channel], self.maxs[channel]);
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    /// `normalization.txt` body: one line per stacked channel.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "image_channels={} num_classes={}\n",
            self.layout.image_channels, self.layout.num_classes
        );
        for (i, (lo, hi)) in self.mins.iter().zip(&self.maxs).enumerate() {
            out.push_str(&format!(
                "channel={i} kind={} min={lo:e} max={hi:e}\n",
                self.layout.kind_of(i)
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::format("normalization", "empty file"))?;
        let mut image_channels = None;
        let mut num_classes = None;
        for part in head.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::format("normalization", "bad header field"))?;
            match k {
                "image_channels" => image_channels = v.parse().ok(),
                "num_classes" => num_classes = v.parse().ok(),
                _ => {}
            }
        }
        let layout = SurrogateLayout {
            image_channels: image_channels
                .ok_or_else(|| Error::format("normalization", "missing image_channels"))?,
            num_classes: num_classes
                .ok_or_else(|| Error::format("normalization", "missing num_classes"))?,
        };
        let total = layout.total_channels();
        let mut mins = vec![0.0; total];
        let mut maxs = vec![1.0; total];
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut channel = None;
            let mut lo = None;
            let mut hi = None;
            for part in line.split_whitespace() {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| Error::format("normalization", "bad channel field"))?;
                match k {
                    "channel" => channel = v.parse::<usize>().ok(),
                    "min" => lo = v.parse::<f64>().ok(),
                    "max" => hi = v.parse::<f64>().ok(),
                    _ => {}
                }
            }
            let c = channel.ok_or_else(|| Error::format("normalization", "missing channel"))?;
            if c >= total {
                return Err(Error::format(
                    "normalization",
                    format!("channel {c} out of range {total}"),
                ));
            }
            mins[c] = lo.ok_or_else(|| Error::format("normalization", "missing min"))?;
            maxs[c] = hi.ok_or_else(|| Error::format("normalization", "missing max"))?;
        }
        Ok(ChannelNormalization { layout, mins, maxs })
    }
}

/// Stack image and uncertainty channels in the fixed layout order.
pub fn build_input<S: Scalar>(
    image: &Tensor<S>,
    maps: &UncertaintyMaps<S>,
    norm: &ChannelNormalization,
) -> Result<Tensor<S>> {
    let dims = image.spatial_dims()?;
    let layout = norm.layout;
    if dims.channels != layout.image_channels {
        return Err(Error::dim(format!(
            "image has {} channels, layout expects {}",
            dims.channels, layout.image_channels
        )));
    }
    let mean_dims = maps.mean.spatial_dims()?;
    if (mean_dims.height, mean_dims.width) != (dims.height, dims.width) {
        return Err(Error::dim(format!(
            "maps are {}x{} but image is {}x{}",
            mean_dims.height, mean_dims.width, dims.height, dims.width
        )));
    }
    if mean_dims.channels != layout.num_classes {
        return Err(Error::dim(format!(
            "maps carry {} classes, layout expects {}",
            mean_dims.channels, layout.num_classes
        )));
    }
    let (h, w) = (dims.height, dims.width);
    let nb = layout.num_classes;
    let c_img = layout.image_channels;
    let total = layout.total_channels();
    let mut out = Tensor::zeros(vec![h, w, total]);
    {
        let data = out.data_mut();
        for px in 0..h * w {
            let dst = &mut data[px * total..(px + 1) * total];
            dst[..c_img].copy_from_slice(&image.data()[px * c_img..(px + 1) * c_img]);
            for c in 0..nb {
                dst[layout.mean_offset() + c] = maps.mean.data()[px * nb + c];
            }
            for c in 0..nb {
                let channel = layout.csv_offset() + c;
                let v = maps.csv.data()[px * nb + c].to_f64();
                dst[channel] = S::from_f64(norm.normalize(channel, v));
            }
            let channel = layout.entropy_offset();
            dst[channel] = S::from_f64(norm.normalize(channel, maps.entropy.data()[px].to_f64()));
        }
    }
    Ok(out)
}

/// Everything the surrogate stage produced.
pub struct SurrogateOutcome<S: Scalar> {
    pub surrogate_spec: NetworkSpec,
    pub surrogate_params: NetworkParams<S>,
    pub surrogate_log: Vec<EpochRecord>,
    pub normalization: ChannelNormalization,
    /// Stacked input per dataset image, aligned with the dataset order.
    pub inputs: Vec<Tensor<S>>,
    pub base_report: MetricReport,
    pub surrogate_report: MetricReport,
    /// Mean test-split MCSV of the two models (spread of their posteriors).
    pub base_mean_mcsv: f64,
    pub surrogate_mean_mcsv: f64,
    /// Table-5-style paired comparison with signed difference rows.
    pub paired_table: String,
}

fn mean_of<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data().iter().map(|v| v.to_f64()).sum::<f64>() / t.numel() as f64
}

/// Run the full surrogate stage against a trained base model:
/// generate uncertainty maps for every image with frozen base weights,
/// build stacked inputs (training-split normalization only), train a
/// second Bayesian network that differs from the base only in its input
/// layer, and evaluate both on the shared test split.
#[allow(clippy::too_many_arguments)]
pub fn run_surrogate_pipeline<S: Scalar>(
    base_params: &NetworkParams<S>,
    base_spec: &NetworkSpec,
    dataset: &[LabeledImage<S>],
    split: &SplitSpec,
    stats: &ClassStats,
    train_config: &TrainConfig,
    rule: &DecisionRule,
    class_names: &[&str],
    map_samples: usize,
    map_seed: u64,
) -> Result<SurrogateOutcome<S>> {
    if dataset.is_empty() {
        return Err(Error::Size("surrogate pipeline needs a dataset".into()));
    }
    let image_dims = dataset[0].image.spatial_dims()?;
    let layout = SurrogateLayout {
        image_channels: image_dims.channels,
        num_classes: base_spec.num_classes,
    };

    // Base-model analysis of every image with frozen weights.
    let mut analyses = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.iter().enumerate() {
        let seed = rng::mix(&[map_seed, i as u64]);
        analyses.push(bayes_uq::analyze(
            base_params,
            base_spec,
            &item.image,
            map_samples,
            seed,
            rule,
        )?);
    }

    let train_maps: Vec<&UncertaintyMaps<S>> =
        split.train.iter().map(|&i| &analyses[i].maps).collect();
    let normalization = ChannelNormalization::from_training_maps(layout, &train_maps)?;

    let inputs: Vec<Tensor<S>> = dataset
        .iter()
        .zip(&analyses)
        .map(|(item, analysis)| build_input(&item.image, &analysis.maps, &normalization))
        .collect::<Result<_>>()?;

    let surrogate_dataset: Vec<LabeledImage<S>> = inputs
        .iter()
        .zip(dataset)
        .map(|(input, item)| LabeledImage {
            image: input.clone(),
            mask: item.mask.clone(),
        })
        .collect();

    let surrogate_spec = base_spec
        .clone()
        .with_input_channels(layout.total_channels());
    let fit = training::fit(
        &surrogate_spec,
        train_config,
        &surrogate_dataset,
        split,
        stats,
    )?;

    // Shared-test-split evaluation of both models.
    let nb = base_spec.num_classes;
    let mut base_cm = ConfusionMatrix::new(nb);
    let mut surrogate_cm = ConfusionMatrix::new(nb);
    let mut base_mcsv_sum = 0.0;
    let mut surrogate_mcsv_sum = 0.0;
    for &i in &split.test {
        let truth = &dataset[i].mask;
        let base_analysis = &analyses[i];
        base_cm.merge(&seg_metrics::confusion(
            &base_analysis.prediction,
            truth,
            nb,
        )?)?;
        base_mcsv_sum += mean_of(&base_analysis.maps.mcsv);

        let seed = rng::mix(&[map_seed, 0x5u64, i as u64]);
        let surrogate_analysis = bayes_uq::analyze(
            &fit.params,
            &surrogate_spec,
            &inputs[i],
            map_samples,
            seed,
            rule,
        )?;
        surrogate_cm.merge(&seg_metrics::confusion(
            &surrogate_analysis.prediction,
            truth,
            nb,
        )?)?;
        surrogate_mcsv_sum += mean_of(&surrogate_analysis.maps.mcsv);
    }
    let base_report = seg_metrics::metrics(&base_cm)?;
    let surrogate_report = seg_metrics::metrics(&surrogate_cm)?;
    let paired_table = seg_metrics::report_table(
        &[
            LabeledReport {
                label: "Bayesian inference".into(),
                report: base_report.clone(),
            },
            LabeledReport {
                label: "Surrogate model".into(),
                report: surrogate_report.clone(),
            },
        ],
        class_names,
        &[(0, 1)],
    )?;

    let n_test = split.test.len() as f64;
    Ok(SurrogateOutcome {
        surrogate_spec,
        surrogate_params: fit.params,
        surrogate_log: fit.log,
        normalization,
        inputs,
        base_report,
        surrogate_report,
        base_mean_mcsv: base_mcsv_sum / n_test,
        surrogate_mean_mcsv: surrogate_mcsv_sum / n_test,
        paired_table,
    })
}

/// Slice a stacked input back into its parts, inverting the recorded
/// normalization.
pub fn split_input<S: Scalar>(
    stacked: &Tensor<S>,
    norm: &ChannelNormalization,
) -> Result<(Tensor<S>, UncertaintyMaps<S>)> {
    let layout = norm.layout;
    let dims = stacked.spatial_dims()?;
    if dims.channels != layout.total_channels() {
        return Err(Error::dim(format!(
            "stacked input has {} channels, layout expects {}",
            dims.channels,
            layout.total_channels()
        )));
    }
    let image = ops::slice_channels(stacked, 0, layout.image_channels)?;
    let mean = ops::slice_channels(stacked, layout.mean_offset(), layout.num_classes)?;
    let mut csv = ops::slice_channels(stacked, layout.csv_offset(), layout.num_classes)?;
    let mut entropy_map = ops::slice_channels(stacked, layout.entropy_offset(), 1)?
        .reshaped(vec![dims.height, dims.width])?;
    let nb = layout.num_classes;
    for (i, v) in csv.data_mut().iter_mut().enumerate() {
        let channel = layout.csv_offset() + (i % nb);
        let (lo, hi) = (norm.mins[channel], norm.maxs[channel]);
        *v = S::from_f64(v.to_f64() * (hi - lo) + lo);
    }
    let channel = layout.entropy_offset();
    let (lo, hi) = (norm.mins[channel], norm.maxs[channel]);
    for v in entropy_map.data_mut().iter_mut() {
        *v = S::from_f64(v.to_f64() * (hi - lo) + lo);
    }
    let mcsv = bayes_uq::mcsv(&csv)?;
    Ok((
        image,
        UncertaintyMaps {
            mean,
            csv,
            entropy: entropy_map,
            mcsv,
        },
    ))
}
