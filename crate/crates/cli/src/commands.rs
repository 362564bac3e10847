//! One function per subcommand. Each resolves its settings, writes
//! `resolved_config.json` into its output directory and then its artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use stormnet::data::container::{write_atomic, Bundle, NamedArray};
use stormnet::data::dataset::DatasetDir;
use stormnet::data::sample::{CHANNELS, PERCENTILES};
use stormnet::data::{generate as generate_dataset, prepare, write_dataset, Architecture, GenerateConfig, Prepared, SplitKind, Task};
use stormnet::metrics::{evaluate, EvalMode, EvalReport, DEFAULT_SWEEP_STEP};
use stormnet::models::{read_model, write_model};
use stormnet::tensor::derive_seed;
use stormnet::train::{hyperparameter_search, SearchSpace, TrainConfig, Trainer, PLATEAU_EPSILON};
use stormnet::xai::{
    aggregate_groups, attribute, permutation_importance, AttributionResult, Groups, ImportanceMetric, PermutationConfig,
    PermutationMode,
};
use stormnet::{Loss, Model, ModelSpec, OptimizerKind, OutputKind, Rng, Tensor};

use crate::config::{default_seed, resolve, Flags, RESOLVED_CONFIG};
use crate::{CliError, EvalArgs, ExplainArgs, FitArgs, GenerateArgs, Method, SearchArgs, TrainArgs};

pub const MODEL_FILE: &str = "model.stormnet";
pub const CHECKPOINT_FILE: &str = "checkpoint.stormnet";
pub const BEST_MODEL_FILE: &str = "best_model.stormnet";

const BACKGROUND_STREAM: u64 = 1;
const ATTRIBUTION_STREAM: u64 = 2;

type CliResult<T> = Result<T, CliError>;

fn required<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn prepare_out(out: &Path, resolved: &impl Serialize) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    write_json(&out.join(RESOLVED_CONFIG), resolved)
}

fn open_data(dir: &Path) -> CliResult<DatasetDir> {
    DatasetDir::open(dir).map_err(|e| match e {
        stormnet::Error::Io(io) => CliError::Io(format!("cannot open dataset {}: {io}", dir.display())),
        other => other.into(),
    })
}

fn load_model(path: &Path) -> CliResult<Model> {
    read_model(path).map_err(|e| match e {
        stormnet::Error::Io(io) => CliError::Io(format!("cannot read model {}: {io}", path.display())),
        other => other.into(),
    })
}

/// The task a saved model was trained for, from its output head.
pub fn model_task(model: &Model) -> Task {
    match model.spec().output {
        OutputKind::SigmoidScalar => Task::Cls,
        OutputKind::LinearScalar => Task::Reg,
        OutputKind::SigmoidMap => Task::SegCls,
        OutputKind::LinearMap | OutputKind::SoftplusMap => Task::SegReg,
    }
}

/// An architecture with the same input pipeline as `model`.
fn input_family(model: &Model, task: Task) -> Architecture {
    if model.spec().input_shape.len() == 1 {
        Architecture::MlpEng
    } else if task.is_map() {
        Architecture::Unet
    } else {
        Architecture::Cnn
    }
}

fn channel_name(c: usize) -> String {
    CHANNELS.get(c).map_or_else(|| format!("extra{c}"), |s| s.to_string())
}

/// One group per input channel, pooling the percentile features of feature models.
pub fn channel_groups(model: &Model) -> Groups {
    let shape = &model.spec().input_shape;
    if shape.len() == 1 {
        let per = PERCENTILES.len();
        let channels = shape[0] / per;
        Groups {
            names: (0..channels).map(channel_name).collect(),
            members: (0..channels).map(|c| (c * per..(c + 1) * per).collect()).collect(),
        }
    } else {
        let channels = *shape.last().unwrap_or(&1);
        Groups {
            names: (0..channels).map(channel_name).collect(),
            members: (0..channels).map(|c| vec![c]).collect(),
        }
    }
}

fn eval_split(s: SplitKind) -> CliResult<SplitKind> {
    if s == SplitKind::Train {
        return Err(CliError::Usage("--split must be val or test".into()));
    }
    Ok(s)
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRun {
    pub command: String,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub pos_rate: f64,
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    let d = GenerateConfig::default();
    let defaults = GenerateRun {
        command: "generate".into(),
        seed: default_seed()?,
        out: None,
        train: d.n_train,
        val: d.n_val,
        test: d.n_test,
        pos_rate: d.pixel_pos_rate_target,
    };
    let mut flags = Flags::default();
    flags
        .set("seed", a.seed)
        .set("out", a.out)
        .set("train", a.train)
        .set("val", a.val)
        .set("test", a.test)
        .set("pos_rate", a.pos_rate);
    let run: GenerateRun = resolve(defaults, a.config.as_deref(), flags)?;
    let out = required(&run.out, "out")?;
    for (name, n) in [("train", run.train), ("val", run.val), ("test", run.test)] {
        if n == 0 {
            return Err(CliError::Usage(format!("--{name} must be at least 1")));
        }
    }
    if !(run.pos_rate > 0.0 && run.pos_rate < 1.0) {
        return Err(CliError::Usage(format!("--pos-rate must lie in (0, 1), got {}", run.pos_rate)));
    }
    let ds = generate_dataset(&GenerateConfig {
        seed: run.seed,
        n_train: run.train,
        n_val: run.val,
        n_test: run.test,
        pixel_pos_rate_target: run.pos_rate,
    })?;
    prepare_out(&out, &run)?;
    let manifest = write_dataset(&out, &ds)?;
    println!(
        "train {} val {} test {}",
        manifest.counts.train, manifest.counts.val, manifest.counts.test
    );
    println!(
        "pixel-positive rate {:.6} (target {:.6})",
        manifest.pixel_pos_rate, manifest.pixel_pos_rate_target
    );
    Ok(())
}

// ------------------------------------------------------------ train/search

fn fit_flags(f: &FitArgs) -> Flags {
    let mut flags = Flags::default();
    flags
        .set("seed", f.seed)
        .set("data", f.data.clone())
        .set("model", f.model.clone())
        .set("task", f.task.clone())
        .set("out", f.out.clone())
        .set("max_epochs", f.max_epochs)
        .set("patience", f.patience)
        .switch("augment", f.augment);
    flags
}

struct FitData {
    arch: Architecture,
    task: Task,
    train: Prepared,
    val: Prepared,
    /// Training images before the task filter.
    train_total: usize,
    image_shape: Vec<usize>,
}

fn load_fit_data(data: &Path, arch: Architecture, task: Task) -> CliResult<FitData> {
    arch.check_task(task)?;
    let dir = open_data(data)?;
    let train = dir.load_split(SplitKind::Train)?;
    let val = dir.load_split(SplitKind::Val)?;
    Ok(FitData {
        arch,
        task,
        train_total: train.len(),
        image_shape: train.images.shape()[1..].to_vec(),
        train: prepare(&train, arch, task)?,
        val: prepare(&val, arch, task)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub command: String,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub model: Option<Architecture>,
    pub task: Option<Task>,
    pub out: Option<PathBuf>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Defaults to BCE for classification and MSE for regression.
    pub loss: Option<Loss>,
    pub patience: usize,
    pub plateau_epsilon: f64,
    pub augment: bool,
    /// Defaults to the declared architecture for the model and task.
    pub spec: Option<ModelSpec>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    model: Architecture,
    task: Task,
    parameters: usize,
    /// Training samples used after the task filter.
    n_train: usize,
    n_train_total: usize,
    n_val: usize,
    epochs: usize,
    stop_reason: Option<stormnet::train::StopReason>,
    final_train_loss: Option<f64>,
    val_loss: Option<f64>,
    val_metric: Option<f64>,
}

fn loss_flag(name: Option<String>, pos_weight: Option<f64>) -> CliResult<Option<Value>> {
    match (name, pos_weight) {
        (None, None) => Ok(None),
        (None, Some(_)) => Err(CliError::Usage("--pos-weight needs --loss weighted_bce".into())),
        (Some(n), w) => {
            let mut v = json!({ "kind": n });
            if let Some(w) = w {
                v["pos_weight"] = json!(w);
            }
            Ok(Some(v))
        }
    }
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let d = TrainConfig::default();
    let defaults = TrainRun {
        command: "train".into(),
        seed: default_seed()?,
        data: None,
        model: None,
        task: None,
        out: None,
        batch_size: d.batch_size,
        max_epochs: d.max_epochs,
        learning_rate: d.learning_rate,
        optimizer: d.optimizer,
        loss: None,
        patience: d.patience,
        plateau_epsilon: d.plateau_epsilon,
        augment: false,
        spec: None,
        resume: None,
    };
    let mut flags = fit_flags(&a.fit);
    flags
        .set("batch_size", a.batch_size)
        .set("learning_rate", a.learning_rate)
        .set("optimizer", a.optimizer)
        .set("loss", loss_flag(a.loss, a.pos_weight)?)
        .set("resume", a.resume);
    let mut run: TrainRun = resolve(defaults, a.fit.config.as_deref(), flags)?;
    let data = required(&run.data, "data")?;
    let out = required(&run.out, "out")?;
    let arch = required(&run.model, "model")?;
    let task = required(&run.task, "task")?;
    let fit = load_fit_data(&data, arch, task)?;

    let mut trainer = match &run.resume {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let mut t = Trainer::from_checkpoint(&bytes)?;
            t.set_max_epochs(run.max_epochs);
            let c = t.config;
            run.batch_size = c.batch_size;
            run.learning_rate = c.learning_rate;
            run.optimizer = c.optimizer;
            run.loss = Some(c.loss);
            run.patience = c.patience;
            run.plateau_epsilon = c.plateau_epsilon;
            run.augment = c.augment;
            run.seed = c.seed;
            run.spec = Some(t.model.spec().clone());
            t
        }
        None => {
            let spec = match run.spec.clone() {
                Some(s) => s,
                None => arch.default_spec(task, &fit.image_shape)?.with_seed(run.seed),
            };
            let cfg = TrainConfig {
                batch_size: run.batch_size,
                max_epochs: run.max_epochs,
                learning_rate: run.learning_rate,
                optimizer: run.optimizer,
                loss: run.loss.unwrap_or_else(|| task.default_loss()),
                plateau_epsilon: run.plateau_epsilon,
                patience: run.patience,
                augment: run.augment,
                seed: run.seed,
                eval_every_epoch: true,
            };
            run.loss = Some(cfg.loss);
            run.spec = Some(spec.clone());
            Trainer::new(Model::build(&spec)?, cfg)?
        }
    };
    prepare_out(&out, &run)?;

    let val = (&fit.val.x, &fit.val.y);
    trainer.run((&fit.train.x, &fit.train.y), Some(val)).map_err(|e| {
        if e.is_numeric() {
            CliError::Numeric(format!("training aborted: {e}"))
        } else {
            e.into()
        }
    })?;
    write_atomic(&out.join(CHECKPOINT_FILE), &trainer.checkpoint()?)?;
    let (model, log) = trainer.into_parts();
    write_model(&out.join(MODEL_FILE), &model)?;
    write_text(&out.join("train_log.csv"), &log.to_csv())?;

    let mode = if task.is_map() { EvalMode::Pixel } else { EvalMode::Image };
    let report = evaluate(
        &model,
        &fit.val.x,
        &fit.val.y,
        task.name(),
        task.is_classification(),
        mode,
        DEFAULT_SWEEP_STEP,
    )?;
    write_json(&out.join("eval_val.json"), &report)?;
    let last = log.last();
    let summary = TrainSummary {
        model: fit.arch,
        task: fit.task,
        parameters: model.parameter_count(),
        n_train: fit.train.indices.len(),
        n_train_total: fit.train_total,
        n_val: fit.val.indices.len(),
        epochs: log.epochs.len(),
        stop_reason: log.stop_reason,
        final_train_loss: last.map(|e| e.train_loss),
        val_loss: last.and_then(|e| e.val_loss),
        val_metric: report.primary_metric(),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    println!(
        "trained {} for {} on {} samples: {} epochs ({}), validation {} {}",
        arch.name(),
        task.name(),
        summary.n_train,
        summary.epochs,
        summary.stop_reason.map_or("unfinished", |r| match r {
            stormnet::train::StopReason::MaxEpochs => "max epochs",
            stormnet::train::StopReason::Plateau => "plateau",
        }),
        metric_name(task),
        summary.val_metric.map_or("undefined".to_string(), |m| format!("{m:.6}")),
    );
    Ok(())
}

fn metric_name(task: Task) -> &'static str {
    if task.is_classification() {
        "auc"
    } else {
        "neg_mae"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchRun {
    pub command: String,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub model: Option<Architecture>,
    pub task: Option<Task>,
    pub out: Option<PathBuf>,
    pub trials: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub plateau_epsilon: f64,
    pub augment: bool,
    /// Defaults to the standard space for the task type.
    pub space: Option<SearchSpace>,
}

pub fn search(a: SearchArgs) -> CliResult<()> {
    let d = TrainConfig::default();
    let defaults = SearchRun {
        command: "search".into(),
        seed: default_seed()?,
        data: None,
        model: None,
        task: None,
        out: None,
        trials: 100,
        max_epochs: d.max_epochs,
        patience: d.patience,
        plateau_epsilon: PLATEAU_EPSILON,
        augment: false,
        space: None,
    };
    let mut flags = fit_flags(&a.fit);
    flags.set("trials", a.trials);
    let mut run: SearchRun = resolve(defaults, a.fit.config.as_deref(), flags)?;
    let data = required(&run.data, "data")?;
    let out = required(&run.out, "out")?;
    let arch = required(&run.model, "model")?;
    let task = required(&run.task, "task")?;
    if run.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let fit = load_fit_data(&data, arch, task)?;
    let space = run
        .space
        .clone()
        .unwrap_or_else(|| SearchSpace::default_for(task.is_classification()));
    run.space = Some(space.clone());
    prepare_out(&out, &run)?;

    let base = arch.default_spec(task, &fit.image_shape)?.with_seed(run.seed);
    let base_cfg = TrainConfig {
        max_epochs: run.max_epochs,
        patience: run.patience,
        plateau_epsilon: run.plateau_epsilon,
        augment: run.augment,
        loss: task.default_loss(),
        seed: run.seed,
        ..TrainConfig::default()
    };
    let (report, best) = hyperparameter_search(
        &base,
        &base_cfg,
        &space,
        run.trials,
        (&fit.train.x, &fit.train.y),
        (&fit.val.x, &fit.val.y),
        run.seed,
    )?;
    write_json(
        &out.join("search.json"),
        &report.ranked(),
    )?;
    let failed = report.trials.iter().filter(|t| t.error.is_some()).count();
    match (best, report.best()) {
        (Some(model), Some(top)) => {
            write_model(&out.join(BEST_MODEL_FILE), &model)?;
            println!(
                "{} trials ({failed} failed); best trial {} {} {}",
                report.trials.len(),
                top.trial,
                metric_name(task),
                top.metric.map_or("undefined".to_string(), |m| format!("{m:.6}"))
            );
            Ok(())
        }
        _ => Err(CliError::Numeric(format!("all {} trials failed", report.trials.len()))),
    }
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub command: String,
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: SplitKind,
    pub sweep_step: f64,
    /// Defaults to image for scalar models and pixel for map models.
    pub mode: Option<EvalMode>,
    pub out: Option<PathBuf>,
}

/// Loads only the arrays of `split` and prepares them for `model`.
fn model_inputs(model: &Model, data: &Path, split: SplitKind) -> CliResult<(Task, Prepared)> {
    let task = model_task(model);
    let dir = open_data(data)?;
    let s = dir.load_split(split)?;
    let prepared = prepare(&s, input_family(model, task), task)?;
    Ok((task, prepared))
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let defaults = EvalRun {
        command: "eval".into(),
        seed: default_seed()?,
        model: None,
        data: None,
        split: SplitKind::Val,
        sweep_step: DEFAULT_SWEEP_STEP,
        mode: None,
        out: None,
    };
    let mut flags = Flags::default();
    flags
        .set("seed", a.seed)
        .set("model", a.model)
        .set("data", a.data)
        .set("split", a.split)
        .set("sweep_step", a.sweep_step)
        .set("mode", a.mode)
        .set("out", a.out);
    let mut run: EvalRun = resolve(defaults, a.config.as_deref(), flags)?;
    let model_path = required(&run.model, "model")?;
    let data = required(&run.data, "data")?;
    let out = required(&run.out, "out")?;
    let split = eval_split(run.split)?;
    let model = load_model(&model_path)?;
    let mode = run.mode.unwrap_or(if model.spec().output.is_map() {
        EvalMode::Pixel
    } else {
        EvalMode::Image
    });
    run.mode = Some(mode);
    let (task, p) = model_inputs(&model, &data, split)?;
    let report: EvalReport = evaluate(
        &model,
        &p.x,
        &p.y,
        task.name(),
        task.is_classification(),
        mode,
        run.sweep_step,
    )?;
    prepare_out(&out, &run)?;
    let name = split.name();
    write_json(&out.join(format!("eval_{name}.json")), &report)?;
    if task.is_classification() {
        write_text(&out.join(format!("sweep_{name}.csv")), &report.sweep_csv())?;
        write_text(&out.join(format!("roc_{name}.csv")), &report.roc_csv())?;
    }
    match (&report.regression, report.auc) {
        (Some(r), _) => println!("{name}: n {} mae {:.6} rmse {:.6} bias {:.6}", report.n, r.mae, r.rmse, r.bias),
        (None, auc) => {
            let best = report.sweep.as_ref().map(|s| (s.best_threshold, s.best_csi));
            println!(
                "{name}: n {} auc {} best csi {} at threshold {}",
                report.n,
                auc.map_or("undefined".to_string(), |a| format!("{a:.6}")),
                best.map_or("-".to_string(), |b| format!("{:.6}", b.1)),
                best.map_or("-".to_string(), |b| format!("{}", b.0)),
            );
        }
    }
    Ok(())
}

// ----------------------------------------------------------------- explain

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainRun {
    pub command: String,
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: SplitKind,
    pub method: Method,
    pub resamples: usize,
    pub sample_size: usize,
    pub multi_pass: bool,
    pub steps: usize,
    pub samples: usize,
    pub background: usize,
    pub out: Option<PathBuf>,
}

pub fn explain(a: ExplainArgs) -> CliResult<()> {
    let perm = PermutationConfig::default();
    let defaults = ExplainRun {
        command: "explain".into(),
        seed: default_seed()?,
        model: None,
        data: None,
        split: SplitKind::Val,
        method: Method::Perm,
        resamples: perm.n_resamples,
        sample_size: perm.sample_size,
        multi_pass: false,
        steps: 64,
        samples: 100,
        background: 8,
        out: None,
    };
    let mut flags = Flags::default();
    flags
        .set("seed", a.seed)
        .set("model", a.model)
        .set("data", a.data)
        .set("split", a.split)
        .set("method", a.method)
        .set("resamples", a.resamples)
        .set("sample_size", a.sample_size)
        .switch("multi_pass", a.multi_pass)
        .set("steps", a.steps)
        .set("samples", a.samples)
        .set("background", a.background)
        .set("out", a.out);
    let run: ExplainRun = resolve(defaults, a.config.as_deref(), flags)?;
    let model_path = required(&run.model, "model")?;
    let data = required(&run.data, "data")?;
    let out = required(&run.out, "out")?;
    let split = eval_split(run.split)?;
    let model = load_model(&model_path)?;
    let groups = channel_groups(&model);
    let (task, p) = model_inputs(&model, &data, split)?;
    match run.method {
        Method::Perm => {
            let cfg = PermutationConfig {
                mode: if run.multi_pass {
                    PermutationMode::Multi
                } else {
                    PermutationMode::Single
                },
                n_resamples: run.resamples,
                sample_size: run.sample_size,
                seed: run.seed,
            };
            let metric = ImportanceMetric::for_task(task.is_classification());
            let result = permutation_importance(&model, &p.x, &p.y, &groups, metric, &cfg)?;
            prepare_out(&out, &run)?;
            write_json(&out.join("importance.json"), &result)?;
            write_text(&out.join("importance.csv"), &result.to_csv())?;
            if let Some(steps) = &result.multi_pass {
                let mut csv = String::from("step,channel,score,stddev\n");
                for (i, s) in steps.iter().enumerate() {
                    csv += &format!("{},{},{},{}\n", i + 1, s.group, s.score, s.stddev);
                }
                write_text(&out.join("multi_pass.csv"), &csv)?;
            }
            println!("base score {:.6}; ranking {}", result.base_score, result.ranking().join(" > "));
        }
        Method::Attr => {
            if run.samples == 0 || run.background == 0 || run.steps == 0 {
                return Err(CliError::Usage("--samples, --background and --steps must be at least 1".into()));
            }
            let dir = open_data(&data)?;
            let train = prepare(&dir.load_split(SplitKind::Train)?, input_family(&model, task), task)?;
            let n_bg = run.background.min(train.x.batch_size());
            let mut bg_idx = Rng::derive(run.seed, &[BACKGROUND_STREAM]).choose(train.x.batch_size(), n_bg);
            bg_idx.sort_unstable();
            let background = train.x.gather(&bg_idx)?;
            let n = run.samples.min(p.x.batch_size());
            let results: Vec<AttributionResult> = (0..n)
                .map(|i| {
                    let mut rng = Rng::new(derive_seed(run.seed, &[ATTRIBUTION_STREAM, i as u64]));
                    attribute(&model, &p.x.unbatch(i), &background, run.steps, &mut rng)
                })
                .collect::<Result<_, _>>()?;
            let ratios = aggregate_groups(&results, &groups)?;
            prepare_out(&out, &run)?;
            write_attributions(&out, &run, &groups, &p, &bg_idx, &results)?;
            write_json(&out.join("global_ratios.json"), &ratios)?;
            let mut csv = String::from("channel,signed,absolute\n");
            for (i, c) in ratios.channels.iter().enumerate() {
                csv += &format!("{c},{},{}\n", ratios.signed[i], ratios.absolute[i]);
            }
            write_text(&out.join("global_ratios.csv"), &csv)?;
            let worst = results.iter().map(|r| r.completeness_residual).fold(0.0, f64::max);
            println!(
                "{n} samples; largest completeness residual {worst:.3e}; ranking {}",
                ratios.ranking(false).join(" > ")
            );
        }
    }
    Ok(())
}

fn grouped(values: &[f64], groups: &Groups) -> Vec<f64> {
    groups.members.iter().map(|m| m.iter().map(|&i| values[i]).sum()).collect()
}

fn write_attributions(
    out: &Path,
    run: &ExplainRun,
    groups: &Groups,
    p: &Prepared,
    bg_idx: &[usize],
    results: &[AttributionResult],
) -> CliResult<()> {
    let maps: Vec<Tensor> = results.iter().map(|r| r.attributions.clone()).collect();
    let samples: Vec<usize> = p.indices[..results.len()].to_vec();
    let bundle = Bundle {
        meta: json!({
            "kind": "attributions",
            "split": run.split,
            "channels": groups.names,
            "samples": samples,
            "background": bg_idx,
            "steps": run.steps,
        }),
        arrays: vec![NamedArray::f64("attributions", &Tensor::stack(&maps)?)],
    };
    write_atomic(&out.join("attributions.stormnet"), &bundle.to_bytes()?)?;

    let mut rows = Vec::with_capacity(results.len());
    let mut csv = format!(
        "sample,{},expected_value,model_output,completeness_residual\n",
        groups.names.join(",")
    );
    for (r, &sample) in results.iter().zip(&samples) {
        let sums = grouped(&r.channel_sums, groups);
        csv += &format!(
            "{sample},{},{},{},{}\n",
            sums.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            r.expected_value,
            r.model_output,
            r.completeness_residual
        );
        rows.push(json!({
            "sample": sample,
            "channel_sums": sums,
            "expected_value": r.expected_value,
            "model_output": r.model_output,
            "completeness_residual": r.completeness_residual,
        }));
    }
    write_json(&out.join("channel_sums.json"), &json!({ "channels": groups.names, "samples": rows }))?;
    write_text(&out.join("attributions.csv"), &csv)
}
