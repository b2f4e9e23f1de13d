//! Command implementations shared by the CLI entry point and the preset
//! experiment runner.

use std::fs;
use std::path::{Path, PathBuf};

use bseg::bayes_uq::{self, DecisionRule};
use bseg::densenet::{NetworkParams, NetworkSpec};
use bseg::io::{
    btsr, load_checkpoint, read_dataset, read_image, read_split, save_checkpoint, write_dataset,
    write_heatmap_pgm, write_mask_pgm, write_split,
};
use bseg::rng;
use bseg::seg_metrics::{self, ConfusionMatrix, LabeledReport, MetricReport};
use bseg::surrogate::{run_surrogate_pipeline, SurrogateOutcome};
use bseg::synthdata::{self, class_names, LabeledImage, Task};
use bseg::tensor::Tensor;
use bseg::training::{self, ClassStats, FitResult, SplitSpec};
use bseg::{Error, Result};

use crate::config::{ExperimentKind, RunConfig, Strategy};

pub fn write_resolved_config(out: &Path, config: &RunConfig, extra: &[String]) -> Result<()> {
    let mut text = config.resolved();
    for line in extra {
        text.push_str(&format!("# {line}\n"));
    }
    fs::write(out.join("resolved_config.txt"), text)?;
    Ok(())
}

/// `generate-data --config C --out DIR`
pub fn generate_data(config: &RunConfig, out: &Path) -> Result<()> {
    let scene = config.scene();
    let items = synthdata::generate(&scene)?;
    fs::create_dir_all(out)?;
    write_dataset(out, &scene, &items)?;
    let split = training::split(items.len(), config.split_seed)?;
    write_split(out, &split)?;
    write_resolved_config(out, config, &["command: generate-data".into()])?;
    println!(
        "generated {} {} images at {}x{} into {}",
        items.len(),
        scene.task.name(),
        scene.height,
        scene.width,
        out.display()
    );
    Ok(())
}

pub struct LoadedData {
    pub task: Task,
    pub items: Vec<LabeledImage<f32>>,
    pub split: SplitSpec,
}

pub fn load_data(dir: &Path) -> Result<LoadedData> {
    let dataset = read_dataset(dir)?;
    let split = read_split(dir)?;
    let n = dataset.items.len();
    for ids in [&split.train, &split.val, &split.test] {
        if ids.iter().any(|&i| i >= n) {
            return Err(Error::Size(format!(
                "split references image index beyond the {n} in the dataset"
            )));
        }
    }
    Ok(LoadedData {
        task: dataset.scene.task,
        items: dataset.items,
        split,
    })
}

pub fn train_stats(data: &LoadedData, strategy: Strategy) -> Result<ClassStats> {
    let masks: Vec<&synthdata::Mask> = data
        .split
        .train
        .iter()
        .map(|&i| &data.items[i].mask)
        .collect();
    training::class_stats(&masks, data.task.num_classes(), strategy.scheme)
}

/// Fit a network and write checkpoint, training log, and class stats.
pub fn train_to_dir(
    net: &NetworkSpec,
    config: &RunConfig,
    data: &LoadedData,
    stats: &ClassStats,
    out: &Path,
) -> Result<FitResult<f32>> {
    fs::create_dir_all(out)?;
    let result = training::fit(net, &config.train_config(), &data.items, &data.split, stats)?;
    save_checkpoint(net, &result.params, out.join("checkpoint.ckpt"))?;
    let mut log = String::from("epoch,lr,train_loss,val_loss,is_best\n");
    for record in &result.log {
        log.push_str(&record.to_line());
        log.push('\n');
    }
    fs::write(out.join("training_log.csv"), log)?;
    fs::write(out.join("class_stats.txt"), stats.to_text())?;
    Ok(result)
}

/// `train --config C --data DIR --out DIR [--benchmark]`
pub fn train(config: &RunConfig, data_dir: &Path, out: &Path, benchmark: bool) -> Result<()> {
    let data = load_data(data_dir)?;
    if data.task != config.task {
        return Err(Error::Config(format!(
            "config task {} does not match dataset task {}",
            config.task.name(),
            data.task.name()
        )));
    }
    let stats = train_stats(&data, config.strategy)?;
    let net = config.network(benchmark);
    let result = train_to_dir(&net, config, &data, &stats, out)?;
    write_resolved_config(
        out,
        config,
        &[
            format!("command: train benchmark={benchmark}"),
            format!("data: {}", data_dir.display()),
            format!("best_epoch: {}", result.best_epoch),
            format!("best_val_loss: {:.8e}", result.best_val_loss),
        ],
    )?;
    println!(
        "trained {} for {} epochs (best epoch {}, val loss {:.6}) -> {}",
        if benchmark { "benchmark" } else { "bayesian" },
        result.log.len(),
        result.best_epoch,
        result.best_val_loss,
        out.display()
    );
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(NetworkSpec, NetworkParams<f32>)> {
    load_checkpoint::<f32>(path)
}

fn stats_next_to_model(model: &Path) -> Result<ClassStats> {
    let dir = model.parent().unwrap_or_else(|| Path::new("."));
    let text = fs::read_to_string(dir.join("class_stats.txt")).map_err(|e| {
        Error::Config(format!(
            "the ML rule needs class_stats.txt next to the checkpoint: {e}"
        ))
    })?;
    ClassStats::from_text(&text)
}

/// Replicate the bottom/right edges until both dimensions divide `divisor`.
fn pad_to_divisor(image: &Tensor<f32>, divisor: usize) -> Result<(Tensor<f32>, usize, usize)> {
    let dims = image.spatial_dims()?;
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    let new_h = h.div_ceil(divisor) * divisor;
    let new_w = w.div_ceil(divisor) * divisor;
    if (new_h, new_w) == (h, w) {
        return Ok((image.clone(), h, w));
    }
    let src = image.data();
    let padded = Tensor::from_fn(vec![new_h, new_w, c], |i| {
        let ch = i % c;
        let x = (i / c) % new_w;
        let y = i / (c * new_w);
        src[(y.min(h - 1) * w + x.min(w - 1)) * c + ch]
    });
    Ok((padded, h, w))
}

fn crop_mask(mask: &synthdata::Mask, h: usize, w: usize) -> synthdata::Mask {
    if (mask.height, mask.width) == (h, w) {
        return mask.clone();
    }
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        labels.extend_from_slice(&mask.labels[y * mask.width..y * mask.width + w]);
    }
    synthdata::Mask::new(h, w, labels).expect("crop geometry")
}

fn crop_map(map: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let dims = map.spatial_dims().expect("spatial map");
    if (dims.height, dims.width) == (h, w) {
        return map.clone();
    }
    let c = dims.channels;
    let src = map.data();
    Tensor::from_fn(vec![h, w, c], |i| {
        let ch = i % c;
        let x = (i / c) % w;
        let y = i / (c * w);
        src[(y * dims.width + x) * c + ch]
    })
}

fn crop_plane(map: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    if (mh, mw) == (h, w) {
        return map.clone();
    }
    let src = map.data();
    Tensor::from_fn(vec![h, w], |i| src[(i / w) * mw + (i % w)])
}

pub struct InferArgs {
    pub model: PathBuf,
    pub image: PathBuf,
    pub out: PathBuf,
    pub samples: usize,
    pub seed: u64,
    pub ml_rule: bool,
    pub keep_stack: bool,
}

/// `infer --model M --image I --out DIR [--samples N] [--seed S]`
pub fn infer(args: &InferArgs) -> Result<()> {
    let (spec, params) = load_model(&args.model)?;
    let image = read_image(&args.image)?;
    let dims = image.spatial_dims()?;
    if dims.channels != spec.input_channels {
        return Err(Error::Dim(format!(
            "image has {} channels, model expects {}",
            dims.channels, spec.input_channels
        )));
    }
    let rule = if args.ml_rule {
        DecisionRule::ml_from_stats(&stats_next_to_model(&args.model)?)
    } else {
        DecisionRule::Map
    };
    let (padded, h, w) = pad_to_divisor(&image, spec.spatial_divisor())?;
    let analysis = bayes_uq::analyze(&params, &spec, &padded, args.samples, args.seed, &rule)?;

    fs::create_dir_all(&args.out)?;
    write_mask_pgm(
        &crop_mask(&analysis.prediction, h, w),
        args.out.join("prediction.pgm"),
    )?;
    write_heatmap_pgm(
        &crop_plane(&analysis.maps.entropy, h, w),
        args.out.join("entropy.pgm"),
    )?;
    write_heatmap_pgm(
        &crop_plane(&analysis.maps.mcsv, h, w),
        args.out.join("mcsv.pgm"),
    )?;
    btsr::write_btsr(
        &crop_map(&analysis.maps.mean, h, w),
        args.out.join("mean.btsr"),
    )?;
    btsr::write_btsr(
        &crop_map(&analysis.maps.csv, h, w),
        args.out.join("csv.btsr"),
    )?;
    if args.keep_stack {
        btsr::write_btsr(analysis.stack.samples(), args.out.join("stack.btsr"))?;
    }
    fs::write(
        args.out.join("resolved_config.txt"),
        format!(
            "# command: infer\nmodel = {}\nimage = {}\nsamples = {}\nmc_seed = {}\nrule = {}\nkeep_stack = {}\n",
            args.model.display(),
            args.image.display(),
            args.samples,
            args.seed,
            rule.name(),
            args.keep_stack
        ),
    )?;
    println!(
        "analyzed {} with {} samples -> {}",
        args.image.display(),
        analysis.stack.n_samples(),
        args.out.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub samples: usize,
    pub seed: u64,
    pub ml_rule: bool,
}

pub struct EvalOutcome {
    pub report: MetricReport,
    pub entropy_auroc: Option<f64>,
    pub mcsv_auroc: Option<f64>,
    pub entropy_pb: Option<f64>,
    pub mean_mcsv: f64,
}

/// Evaluate a model over one split, accumulating confusion counts and
/// pooling per-pixel uncertainties against the misclassification mask.
pub fn evaluate_model(
    params: &NetworkParams<f32>,
    spec: &NetworkSpec,
    data: &LoadedData,
    split_ids: &[usize],
    rule: &DecisionRule,
    samples: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    if split_ids.is_empty() {
        return Err(Error::Size("empty evaluation split".into()));
    }
    let nb = data.task.num_classes();
    let mut cm = ConfusionMatrix::new(nb);
    let mut entropy_scores = Vec::new();
    let mut mcsv_scores = Vec::new();
    let mut errors = Vec::new();
    let mut mcsv_sum = 0.0f64;
    for &i in split_ids {
        let item = &data.items[i];
        let analysis = bayes_uq::analyze(
            params,
            spec,
            &item.image,
            samples,
            rng::mix(&[seed, i as u64]),
            rule,
        )?;
        cm.merge(&seg_metrics::confusion(
            &analysis.prediction,
            &item.mask,
            nb,
        )?)?;
        for (px, (&pred, &truth)) in analysis
            .prediction
            .labels
            .iter()
            .zip(&item.mask.labels)
            .enumerate()
        {
            errors.push(pred != truth);
            entropy_scores.push(analysis.maps.entropy.data()[px] as f64);
            mcsv_scores.push(analysis.maps.mcsv.data()[px] as f64);
        }
        mcsv_sum += analysis
            .maps
            .mcsv
            .data()
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / analysis.maps.mcsv.numel() as f64;
    }
    let report = seg_metrics::metrics(&cm)?;
    let auroc_or_none = |scores: &[f64]| match seg_metrics::auroc(scores, &errors) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(EvalOutcome {
        report,
        entropy_auroc: auroc_or_none(&entropy_scores)?,
        mcsv_auroc: auroc_or_none(&mcsv_scores)?,
        entropy_pb: seg_metrics::point_biserial(&entropy_scores, &errors),
        mean_mcsv: mcsv_sum / split_ids.len() as f64,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "n/a".into(),
    }
}

pub fn write_eval_outputs(
    outcome: &EvalOutcome,
    task: Task,
    split_name: &str,
    label: &str,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let names = class_names(task);
    let table = seg_metrics::report_table(
        &[LabeledReport {
            label: label.to_string(),
            report: outcome.report.clone(),
        }],
        &names,
        &[],
    )?;
    let mut text = format!("split: {split_name}\n\n{table}\n");
    text.push_str(&format!(
        "entropy_auroc = {}\nmcsv_auroc = {}\nentropy_point_biserial = {}\nmean_mcsv = {:.6e}\n",
        fmt_opt(outcome.entropy_auroc),
        fmt_opt(outcome.mcsv_auroc),
        fmt_opt(outcome.entropy_pb),
        outcome.mean_mcsv
    ));
    fs::write(out.join("report.txt"), text)?;
    fs::write(out.join("report.csv"), outcome.report.to_csv(&names))?;
    Ok(())
}

/// `evaluate --model M --data DIR --split S --out DIR`
pub fn evaluate(args: &EvalArgs) -> Result<()> {
    let (spec, params) = load_model(&args.model)?;
    let data = load_data(&args.data)?;
    let split_ids = data.split.by_name(&args.split)?.to_vec();
    let rule = if args.ml_rule {
        DecisionRule::ml_from_stats(&stats_next_to_model(&args.model)?)
    } else {
        DecisionRule::Map
    };
    let outcome = evaluate_model(
        &params,
        &spec,
        &data,
        &split_ids,
        &rule,
        args.samples,
        args.seed,
    )?;
    write_eval_outputs(
        &outcome,
        data.task,
        &args.split,
        if spec.dropout_p > 0.0 {
            "bayesian"
        } else {
            "benchmark"
        },
        &args.out,
    )?;
    fs::write(
        args.out.join("resolved_config.txt"),
        format!(
            "# command: evaluate\nmodel = {}\ndata = {}\nsplit = {}\nsamples = {}\nmc_seed = {}\nrule = {}\n",
            args.model.display(),
            args.data.display(),
            args.split,
            args.samples,
            args.seed,
            rule.name()
        ),
    )?;
    println!(
        "evaluated {} images of split {} -> {}",
        split_ids.len(),
        args.split,
        args.out.display()
    );
    Ok(())
}

/// Write the surrogate artifacts: checkpoint, log, normalization, paired
/// report, and the stacked-input dataset directory.
pub fn write_surrogate_outputs(
    outcome: &SurrogateOutcome<f32>,
    data: &LoadedData,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    save_checkpoint(
        &outcome.surrogate_spec,
        &outcome.surrogate_params,
        out.join("surrogate_checkpoint.ckpt"),
    )?;
    let mut log = String::from("epoch,lr,train_loss,val_loss,is_best\n");
    for record in &outcome.surrogate_log {
        log.push_str(&record.to_line());
        log.push('\n');
    }
    fs::write(out.join("surrogate_training_log.csv"), log)?;
    fs::write(
        out.join("normalization.txt"),
        outcome.normalization.to_text(),
    )?;

    let mut report = outcome.paired_table.clone();
    report.push_str(&format!(
        "\nmean test MCSV (initial)   = {:.6e}\nmean test MCSV (surrogate) = {:.6e}\n",
        outcome.base_mean_mcsv, outcome.surrogate_mean_mcsv
    ));
    let diff = outcome
        .surrogate_report
        .mean_iou()
        .zip(outcome.base_report.mean_iou());
    if let Some((s, b)) = diff {
        report.push_str(&format!(
            "mean IoU difference        = {:+.2}\n",
            100.0 * (s - b)
        ));
    }
    fs::write(out.join("paired_report.txt"), report)?;

    let input_dir = out.join("surrogate_data");
    fs::create_dir_all(input_dir.join("inputs"))?;
    fs::create_dir_all(input_dir.join("masks"))?;
    for (i, input) in outcome.inputs.iter().enumerate() {
        btsr::write_btsr(input, input_dir.join(format!("inputs/{i:04}.btsr")))?;
        write_mask_pgm(
            &data.items[i].mask,
            input_dir.join(format!("masks/{i:04}.pgm")),
        )?;
    }
    fs::write(
        input_dir.join("normalization.txt"),
        outcome.normalization.to_text(),
    )?;
    Ok(())
}

/// `surrogate --base M --data DIR --config C --out DIR`
pub fn surrogate(base: &Path, data_dir: &Path, config: &RunConfig, out: &Path) -> Result<()> {
    let (base_spec, base_params) = load_model(base)?;
    let data = load_data(data_dir)?;
    let stats = train_stats(&data, config.strategy)?;
    let rule = config.strategy.rule(&stats);
    let names = class_names(data.task);
    let outcome = run_surrogate_pipeline(
        &base_params,
        &base_spec,
        &data.items,
        &data.split,
        &stats,
        &config.train_config(),
        &rule,
        &names,
        config.map_samples,
        config.mc_seed,
    )?;
    write_surrogate_outputs(&outcome, &data, out)?;
    write_resolved_config(
        out,
        config,
        &[
            "command: surrogate".into(),
            format!("base: {}", base.display()),
            format!("data: {}", data_dir.display()),
        ],
    )?;
    println!(
        "surrogate pipeline done: initial mean IoU {} -> surrogate {} ({})",
        fmt_opt(outcome.base_report.mean_iou()),
        fmt_opt(outcome.surrogate_report.mean_iou()),
        out.display()
    );
    Ok(())
}

/// `experiment --preset P --out DIR`: regenerate one table analogue.
pub fn experiment(config: &RunConfig, out: &Path) -> Result<()> {
    let kind = config
        .experiment
        .ok_or_else(|| Error::Config("preset must set an experiment= key to run".into()))?;
    fs::create_dir_all(out)?;
    write_resolved_config(
        out,
        config,
        &[format!("command: experiment {}", kind.name())],
    )?;
    if kind == ExperimentKind::SurrogateTrio {
        // One surrogate comparison per case study, mirroring the strategies
        // each one is reported under.
        for (task, strategy) in [
            (Task::Crack, "UW-ML"),
            (Task::Damage, "UW-MAP"),
            (Task::Component, "UW-MAP"),
        ] {
            let mut sub = config.clone();
            sub.task = task;
            sub.strategy = Strategy::parse(strategy)?;
            sub.experiment = Some(ExperimentKind::SurrogatePair);
            let task_out = out.join(task.name());
            experiment(&sub, &task_out)?;
        }
        return Ok(());
    }
    let data_dir = out.join("data");
    generate_data(config, &data_dir)?;
    let data = load_data(&data_dir)?;
    match kind {
        ExperimentKind::SixCombinations => six_combinations(config, &data, out),
        ExperimentKind::BenchmarkPair => benchmark_pair(config, &data, out),
        ExperimentKind::SurrogatePair => surrogate_pair(config, &data, out),
        ExperimentKind::SurrogateTrio => unreachable!("handled above"),
    }
}

/// Benchmark and Bayesian networks under UW and MFW losses, decided with
/// MAP and ML: the six-way comparison over the crack-style task.
fn six_combinations(config: &RunConfig, data: &LoadedData, out: &Path) -> Result<()> {
    let strategies = [
        Strategy::parse("UW-MAP")?,
        Strategy::parse("UW-ML")?,
        Strategy::parse("MFW-MAP")?,
    ];
    let mut sections = Vec::new();
    for benchmark in [true, false] {
        let model_name = if benchmark { "benchmark" } else { "bayesian" };
        for scheme_name in ["UW", "MFW"] {
            let mut scheme_config = config.clone();
            scheme_config.strategy = Strategy::parse(&format!("{scheme_name}-MAP"))?;
            let stats = train_stats(data, scheme_config.strategy)?;
            let net = scheme_config.network(benchmark);
            let dir = out.join(format!(
                "models/{}-{model_name}",
                scheme_name.to_lowercase()
            ));
            let result = train_to_dir(&net, &scheme_config, data, &stats, &dir)?;
            for strategy in strategies
                .iter()
                .filter(|s| s.scheme == scheme_config.strategy.scheme)
            {
                let rule = strategy.rule(&stats);
                let outcome = evaluate_model(
                    &result.params,
                    &net,
                    data,
                    &data.split.test,
                    &rule,
                    config.samples,
                    config.mc_seed,
                )?;
                let label = format!("{model_name} {}", strategy.name());
                let eval_dir = out.join(format!(
                    "eval/{}-{}",
                    model_name,
                    strategy.name().to_lowercase()
                ));
                write_eval_outputs(&outcome, data.task, "test", &label, &eval_dir)?;
                sections.push((label, outcome));
            }
        }
    }
    let reports: Vec<LabeledReport> = sections
        .iter()
        .map(|(label, outcome)| LabeledReport {
            label: label.clone(),
            report: outcome.report.clone(),
        })
        .collect();
    let table = seg_metrics::report_table(&reports, &class_names(data.task), &[])?;
    let mut text = format!("six-combination comparison, test split\n\n{table}\n");
    for (label, outcome) in &sections {
        text.push_str(&format!(
            "{label}: entropy_auroc={} mcsv_auroc={}\n",
            fmt_opt(outcome.entropy_auroc),
            fmt_opt(outcome.mcsv_auroc)
        ));
    }
    fs::write(out.join("comparison.txt"), text)?;
    println!("six-combination comparison written to {}", out.display());
    Ok(())
}

/// One benchmark/Bayesian pair under the configured strategy.
fn benchmark_pair(config: &RunConfig, data: &LoadedData, out: &Path) -> Result<()> {
    let stats = train_stats(data, config.strategy)?;
    let rule = config.strategy.rule(&stats);
    let mut outcomes = Vec::new();
    for benchmark in [true, false] {
        let name = if benchmark { "benchmark" } else { "bayesian" };
        let net = config.network(benchmark);
        let dir = out.join(format!("models/{name}"));
        let result = train_to_dir(&net, config, data, &stats, &dir)?;
        let outcome = evaluate_model(
            &result.params,
            &net,
            data,
            &data.split.test,
            &rule,
            config.samples,
            config.mc_seed,
        )?;
        write_eval_outputs(
            &outcome,
            data.task,
            "test",
            name,
            &out.join(format!("eval/{name}")),
        )?;
        outcomes.push((name.to_string(), outcome));
    }
    let reports: Vec<LabeledReport> = outcomes
        .iter()
        .map(|(label, o)| LabeledReport {
            label: label.clone(),
            report: o.report.clone(),
        })
        .collect();
    let table = seg_metrics::report_table(&reports, &class_names(data.task), &[(0, 1)])?;
    let mut text = format!(
        "benchmark vs bayesian, task {}, strategy {}, test split\n\n{table}\n",
        data.task.name(),
        config.strategy.name()
    );
    for (label, outcome) in &outcomes {
        text.push_str(&format!(
            "{label}: entropy_auroc={} mcsv_auroc={} mean_mcsv={:.6e}\n",
            fmt_opt(outcome.entropy_auroc),
            fmt_opt(outcome.mcsv_auroc),
            outcome.mean_mcsv
        ));
    }
    fs::write(out.join("comparison.txt"), text)?;
    println!("benchmark-pair comparison written to {}", out.display());
    Ok(())
}

/// Base Bayesian model plus surrogate refinement.
fn surrogate_pair(config: &RunConfig, data: &LoadedData, out: &Path) -> Result<()> {
    let stats = train_stats(data, config.strategy)?;
    let net = config.network(false);
    let base_dir = out.join("models/base");
    let result = train_to_dir(&net, config, data, &stats, &base_dir)?;
    let rule = config.strategy.rule(&stats);
    let outcome = run_surrogate_pipeline(
        &result.params,
        &net,
        &data.items,
        &data.split,
        &stats,
        &config.train_config(),
        &rule,
        &class_names(data.task),
        config.map_samples,
        config.mc_seed,
    )?;
    write_surrogate_outputs(&outcome, data, out)?;
    println!("surrogate-pair comparison written to {}", out.display());
    Ok(())
}
