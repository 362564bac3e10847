//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test -p stormnet-cli --test acceptance`, or a
//! subset by number, e.g. `cargo test -p stormnet-cli --test acceptance -- 2 11`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use stormnet::data::container::write_atomic;
use stormnet::data::dataset::DatasetDir;
use stormnet::data::sample::CHANNELS;
use stormnet::data::{generate, prepare, Architecture, Dataset, GenerateConfig, Prepared, Task};
use stormnet::gradcheck::{numerical_gradient, FD_STEP};
use stormnet::layers::{conv2d, Activation, LayerKind, LayerNode, Mode, PoolMode};
use stormnet::metrics::{contingency, evaluate, evaluate_unet, roc_auc, Contingency, EvalMode, DEFAULT_SWEEP_STEP};
use stormnet::models::{model_to_bytes, read_model, ConvBlock};
use stormnet::train::{train, StopReason, TrainConfig, Trainer, PLATEAU_EPSILON};
use stormnet::xai::{
    aggregate_attributions, attribute, permutation_importance, AttributionResult, Groups, ImportanceMetric,
    PermutationConfig, PermutationMode,
};
use stormnet::{Error, Loss, Model, ModelSpec, OptimizerKind, OutputKind, Rng, Tensor};

type Outcome = Result<String, String>;

const GRAD_TOL: f64 = 1e-4;
const CONV_TOL: f64 = 1e-12;
const COMPLETENESS_TOL: f64 = 0.02;
const LINEAR_COMPLETENESS_TOL: f64 = 1e-10;
const ATTRIBUTION_STEPS: usize = 256;
const ATTRIBUTION_SAMPLES: usize = 100;
const ATTRIBUTION_BACKGROUND: usize = 8;
const NOISE_SHARE: f64 = 0.05;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

/// State shared between criteria, built on first use.
#[derive(Default)]
struct Ctx {
    data: Option<Dataset>,
    cnn: Option<Model>,
    cnn_val: Option<Prepared>,
}

impl Ctx {
    fn data(&mut self) -> &Dataset {
        self.data
            .get_or_insert_with(|| generate(&GenerateConfig::default()).expect("default generation"))
    }

    fn prepared(&mut self, arch: Architecture, task: Task) -> Result<(Prepared, Prepared), String> {
        let ds = self.data();
        Ok((
            prepare(&ds.train, arch, task).map_err(err)?,
            prepare(&ds.val, arch, task).map_err(err)?,
        ))
    }

    fn fit(&mut self, arch: Architecture, task: Task, cfg: TrainConfig) -> Result<(Model, Prepared, Prepared), String> {
        let (tr, va) = self.prepared(arch, task)?;
        let spec = arch.default_spec(task, &[48, 48, 4]).map_err(err)?;
        let (model, _) = train(Model::build(&spec).map_err(err)?, (&tr.x, &tr.y), Some((&va.x, &va.y)), &cfg).map_err(err)?;
        Ok((model, tr, va))
    }

    /// The classification CNN of the skill criterion, reused by the XAI criteria.
    fn cnn(&mut self) -> Result<(Model, Prepared), String> {
        if self.cnn.is_none() {
            let (model, _, va) = self.fit(Architecture::Cnn, Task::Cls, cnn_config())?;
            self.cnn = Some(model);
            self.cnn_val = Some(va);
        }
        Ok((self.cnn.clone().unwrap(), self.cnn_val.clone().unwrap()))
    }
}

fn cnn_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 10,
        ..TrainConfig::default()
    }
}

// ------------------------------------------------------------ 1: gradients

/// Multiple of the central-difference roundoff within which a coordinate
/// agrees regardless of its relative error. A forward pass accumulates
/// rounding over hundreds of operations, roughly sqrt(n) ulps of the loss.
const ROUNDOFF_MULTIPLE: f64 = 16.0;

/// Agreement between finite-difference and analytic gradients.
#[derive(Default, Clone, Copy)]
struct Agreement {
    /// Worst relative error among coordinates above the roundoff floor.
    worst: f64,
    /// Coordinates whose difference was inside the roundoff floor.
    floored: usize,
    coordinates: usize,
}

impl Agreement {
    /// Relative error `|fd - an| / max(1e-8, |fd| + |an|)` per coordinate. A
    /// central difference at step `FD_STEP` of an objective of size `f`
    /// carries roundoff of about `eps * f / FD_STEP`; differences inside a few
    /// of those are indistinguishable from zero and counted separately.
    fn add(&mut self, numerical: &Tensor, analytic: &Tensor, objective: f64) {
        let noise = ROUNDOFF_MULTIPLE * f64::EPSILON * objective.abs().max(1.0) / FD_STEP;
        for (&n, &a) in numerical.data().iter().zip(analytic.data()) {
            self.coordinates += 1;
            let rel = (n - a).abs() / (n.abs() + a.abs()).max(1e-8);
            if rel > GRAD_TOL && (n - a).abs() <= noise {
                self.floored += 1;
            } else {
                self.worst = self.worst.max(rel);
            }
        }
    }

    fn merge(&mut self, other: Agreement) {
        self.worst = self.worst.max(other.worst);
        self.floored += other.floored;
        self.coordinates += other.coordinates;
    }
}

/// Worst relative error of input and parameter gradients of `sum(R * node(x))`.
fn layer_grad_error(kind: LayerKind, inputs: Vec<Tensor>, mode: Mode, rng: &mut Rng) -> Result<Agreement, String> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape()[1..].to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut node = LayerNode::new(kind.clone(), &refs, rng).map_err(err)?;
    for p in node.params.iter_mut() {
        if p.rank() == 1 {
            let shift = Tensor::uniform(p.shape(), -0.3, 0.3, rng);
            *p = p.add(&shift).map_err(err)?;
        }
    }
    if let LayerKind::BatchNorm { features } = kind {
        node.buffers[1] = Tensor::uniform(&[features], 0.5, 1.5, rng);
    }
    let seed = rng.next_u64();
    let fwd = |n: &mut LayerNode, xs: &[Tensor]| -> stormnet::Result<Tensor> {
        let r: Vec<&Tensor> = xs.iter().collect();
        n.forward(&r, mode, &mut Rng::new(seed))
    };
    let out = fwd(&mut node, &inputs).map_err(err)?;
    let weights = Tensor::uniform(out.shape(), -1.0, 1.0, rng);
    let objective = |o: &Tensor| o.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>();
    let grads = node.backward(&weights).map_err(err)?;
    let value = objective(&out);
    let mut agreement = Agreement::default();
    for i in 0..inputs.len() {
        let num = numerical_gradient(
            |t| {
                let mut xs = inputs.clone();
                xs[i] = t.clone();
                Ok(objective(&fwd(&mut node.clone(), &xs)?))
            },
            &inputs[i],
        )
        .map_err(err)?;
        agreement.add(&num, &grads.inputs[i], value);
    }
    for p in 0..node.params.len() {
        let num = numerical_gradient(
            |t| {
                let mut probe = node.clone();
                probe.params[p] = t.clone();
                Ok(objective(&fwd(&mut probe, &inputs)?))
            },
            &node.params[p],
        )
        .map_err(err)?;
        agreement.add(&num, &grads.params[p], value);
    }
    Ok(agreement)
}

/// Worst relative error of the loss gradient w.r.t. every parameter and the input.
fn model_grad_error(spec: &ModelSpec, x: &Tensor, y: &Tensor, loss: Loss, rng: &mut Rng) -> Result<Agreement, String> {
    let mut model = Model::build(spec).map_err(err)?;
    for p in model.params_mut() {
        if p.rank() == 1 {
            let shift = Tensor::uniform(p.shape(), -0.2, 0.2, rng);
            *p = p.add(&shift).map_err(err)?;
        }
    }
    let loss_of = |m: &Model, x: &Tensor| -> stormnet::Result<f64> {
        let out = m.clone().forward(x, Mode::Train, &mut Rng::new(1))?;
        Ok(loss.loss_and_grad(&out, y)?.0)
    };
    let out = model.forward(x, Mode::Train, &mut Rng::new(1)).map_err(err)?;
    let (value, g) = loss.loss_and_grad(&out, y).map_err(err)?;
    let grads = model.backward(&g).map_err(err)?;
    let mut agreement = Agreement::default();
    agreement.add(&numerical_gradient(|t| loss_of(&model, t), x).map_err(err)?, &grads.input, value);
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    for (i, p) in params.iter().enumerate() {
        let num = numerical_gradient(
            |t| {
                let mut probe = model.clone();
                *probe.params_mut()[i] = t.clone();
                loss_of(&probe, x)
            },
            p,
        )
        .map_err(err)?;
        agreement.add(&num, &grads.params[i], value);
    }
    Ok(agreement)
}

fn random_labels(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| f64::from(rng.bernoulli(0.5))).collect()).unwrap()
}

fn criterion_1(_: &mut Ctx) -> Outcome {
    let acts = [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Linear,
        Activation::Softplus,
        Activation::Softmax,
    ];
    let mut per_kind: BTreeMap<&str, (usize, Agreement)> = BTreeMap::new();
    let mut record = |name: &'static str, a: Agreement| {
        let entry = per_kind.entry(name).or_default();
        entry.0 += 1;
        entry.1.merge(a);
    };
    for cfg in 0..20usize {
        let mut rng = Rng::derive(1, &[cfg as u64]);
        let act = acts[cfg % acts.len()];
        let (b, h, w) = (2 + rng.below(2), 2 * (1 + rng.below(3)), 2 * (1 + rng.below(3)));
        let (ci, co, n) = (1 + rng.below(3), 1 + rng.below(3), 2 + rng.below(4));
        let img = |c: usize, rng: &mut Rng| Tensor::uniform(&[b, h, w, c], -1.0, 1.0, rng);
        let vec = |rng: &mut Rng| Tensor::uniform(&[b, n], -1.5, 1.5, rng);
        let cases: Vec<(&'static str, LayerKind, Vec<Tensor>, Mode)> = vec![
            ("dense", LayerKind::Dense { inputs: n, units: 3, activation: act }, vec![vec(&mut rng)], Mode::Train),
            (
                "conv2d",
                LayerKind::Conv2d {
                    kernel: [1, 3, 5][cfg % 3],
                    in_channels: ci,
                    filters: co,
                    activation: act,
                },
                vec![img(ci, &mut rng)],
                Mode::Train,
            ),
            ("max_pool", LayerKind::Pool { mode: PoolMode::Max }, vec![img(ci, &mut rng)], Mode::Train),
            ("avg_pool", LayerKind::Pool { mode: PoolMode::Average }, vec![img(ci, &mut rng)], Mode::Train),
            ("upsample", LayerKind::Upsample, vec![img(ci, &mut rng)], Mode::Train),
            ("concat", LayerKind::Concat, vec![img(ci, &mut rng), img(co, &mut rng)], Mode::Train),
            ("dropout_off", LayerKind::Dropout { rate: 0.5 }, vec![vec(&mut rng)], Mode::Inference),
            ("batchnorm", LayerKind::BatchNorm { features: ci }, vec![img(ci, &mut rng)], Mode::Train),
            ("batchnorm_inference", LayerKind::BatchNorm { features: n }, vec![vec(&mut rng)], Mode::Inference),
        ];
        for (name, kind, inputs, mode) in cases {
            record(name, layer_grad_error(kind, inputs, mode, &mut rng)?);
        }
        for (name, a) in [
            ("relu", Activation::Relu),
            ("sigmoid", Activation::Sigmoid),
            ("linear", Activation::Linear),
            ("softplus", Activation::Softplus),
            ("softmax", Activation::Softmax),
        ] {
            let e = layer_grad_error(LayerKind::Activation { activation: a }, vec![vec(&mut rng)], Mode::Train, &mut rng)?;
            record(name, e);
        }

        // full models with a loss on top
        let side = 8;
        let c = 1 + rng.below(3);
        let hidden = [Activation::Relu, Activation::Sigmoid, Activation::Softplus][cfg % 3];
        let pool = if cfg % 2 == 0 { PoolMode::Max } else { PoolMode::Average };
        let bn = cfg % 4 >= 2;
        let x = Tensor::uniform(&[3, side, side, c], 0.0, 1.0, &mut rng);
        let blocks = 1 + rng.below(2);
        let cnn = ModelSpec {
            conv_blocks: (0..blocks)
                .map(|i| ConvBlock {
                    filters: (2 + rng.below(2)) << i,
                    convs: 1 + rng.below(2),
                })
                .collect(),
            hidden_layers: vec![3 + rng.below(3)],
            kernel: [3, 5][cfg % 2],
            activation: hidden,
            pool,
            use_batchnorm: bn,
            seed: rng.next_u64(),
            ..ModelSpec::cnn(&[side, side, c], OutputKind::SigmoidScalar)
        };
        let y = random_labels(&[3, 1], &mut rng);
        record("cnn_loss", model_grad_error(&cnn, &x, &y, Loss::Bce, &mut rng)?);
        // every pooling level must leave a map of at least 3x3
        let depth = 1 + cfg % 2;
        let side = 3 << depth;
        let x = Tensor::uniform(&[2, side, side, c], 0.0, 1.0, &mut rng);
        let (output, loss, y) = if cfg % 2 == 0 {
            (OutputKind::SigmoidMap, Loss::Bce, random_labels(&[2, side, side, 1], &mut rng))
        } else {
            (
                OutputKind::SoftplusMap,
                Loss::Mse,
                Tensor::uniform(&[2, side, side, 1], 0.0, 2.0, &mut rng),
            )
        };
        let unet = ModelSpec {
            activation: hidden,
            pool,
            use_batchnorm: bn,
            seed: rng.next_u64(),
            ..ModelSpec::unet(&[side, side, c], depth, 2 + rng.below(2), output)
        };
        record("unet_loss", model_grad_error(&unet, &x, &y, loss, &mut rng)?);
    }
    let failing: Vec<String> = per_kind
        .iter()
        .filter(|(_, (_, a))| a.worst.is_nan() || a.worst > GRAD_TOL)
        .map(|(k, (_, a))| format!("{k} {:.2e}", a.worst))
        .collect();
    let worst = per_kind.values().map(|v| v.1.worst).fold(0.0, f64::max);
    let floored: usize = per_kind.values().map(|v| v.1.floored).sum();
    let coordinates: usize = per_kind.values().map(|v| v.1.coordinates).sum();
    let min_configs = per_kind.values().map(|v| v.0).min().unwrap_or(0);
    check(failing.is_empty(), || format!("relative error above {GRAD_TOL}: {}", failing.join(", ")))?;
    check(min_configs >= 20, || format!("only {min_configs} configurations for some kind"))?;
    Ok(format!(
        "{} kinds x {min_configs} configurations, worst relative error {worst:.2e}; \
         {floored} of {coordinates} coordinates agree within {ROUNDOFF_MULTIPLE}x difference roundoff",
        per_kind.len()
    ))
}

// ---------------------------------------------------------- 2: conv oracle

/// The five-loop zero-padded window sum.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [n, h, wd, ci] = *x.shape() else { unreachable!() };
    let (k, co) = (w.shape()[0], w.shape()[3]);
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, h, wd, co]);
    for s in 0..n {
        for o in 0..co {
            for row in 0..h {
                for col in 0..wd {
                    let mut acc = b.data()[o];
                    for dy in 0..k {
                        for dx in 0..k {
                            let (r, c) = (row as isize + dy as isize - half, col as isize + dx as isize - half);
                            if r < 0 || c < 0 || r >= h as isize || c >= wd as isize {
                                continue;
                            }
                            for ch in 0..ci {
                                acc += w.data()[((dy * k + dx) * ci + ch) * co + o]
                                    * x.data()[((s * h + r as usize) * wd + c as usize) * ci + ch];
                            }
                        }
                    }
                    out.data_mut()[((s * h + row) * wd + col) * co + o] = acc;
                }
            }
        }
    }
    out
}

fn criterion_2(_: &mut Ctx) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut kernels = BTreeMap::new();
    for case in 0..100u64 {
        let mut rng = Rng::derive(2, &[case]);
        let k = [1, 3, 5][case as usize % 3];
        let (n, h, w) = (1 + rng.below(2), 1 + rng.below(9), 1 + rng.below(9));
        let (ci, co) = (1 + rng.below(4), 1 + rng.below(4));
        let x = Tensor::uniform(&[n, h, w, ci], -2.0, 2.0, &mut rng);
        let wt = Tensor::uniform(&[k, k, ci, co], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[co], -1.0, 1.0, &mut rng);
        let fast = conv2d(&x, &wt, &b).map_err(err)?;
        let slow = conv_oracle(&x, &wt, &b);
        let d = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(d);
        *kernels.entry(k).or_insert(0) += 1;
    }
    check(worst <= CONV_TOL, || format!("max abs difference {worst:.2e}"))?;
    Ok(format!("100 cases (kernel counts {kernels:?}, sides 1..9 incl. smaller than the kernel), max abs difference {worst:.2e}"))
}

// ------------------------------------------------------------- 3: overfit

fn overfit(ctx: &mut Ctx, arch: Architecture) -> Result<(usize, f64, f64), String> {
    let idx: Vec<usize> = (0..32).collect();
    let sub = ctx.data().train.subset(&idx).map_err(err)?;
    let p = prepare(&sub, arch, Task::Cls).map_err(err)?;
    let spec = arch.default_spec(Task::Cls, &[48, 48, 4]).map_err(err)?;
    let cfg = TrainConfig {
        max_epochs: 2000,
        patience: 2000,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut t = Trainer::new(Model::build(&spec).map_err(err)?, cfg).map_err(err)?;
    for epoch in 1..=2000 {
        t.run_until((&p.x, &p.y), None, epoch).map_err(err)?;
        let loss = t.log.last().map(|e| e.train_loss).unwrap_or(f64::INFINITY);
        if loss < 1e-3 {
            return Ok((epoch, loss, start.elapsed().as_secs_f64()));
        }
    }
    Err(format!(
        "{} did not reach loss 1e-3 in 2000 epochs (last {:?})",
        arch.name(),
        t.log.last().map(|e| e.train_loss)
    ))
}

fn criterion_3(ctx: &mut Ctx) -> Outcome {
    let mut parts = Vec::new();
    for arch in [Architecture::Cnn, Architecture::MlpEng] {
        let (epoch, loss, secs) = overfit(ctx, arch)?;
        check(secs < 300.0, || format!("{} took {secs:.0}s", arch.name()))?;
        parts.push(format!("{} loss {loss:.2e} at epoch {epoch} ({secs:.1}s)", arch.name()));
    }
    Ok(parts.join("; "))
}

// --------------------------------------------------------------- 4: skill

fn val_auc(model: &Model, va: &Prepared) -> Result<f64, String> {
    evaluate(model, &va.x, &va.y, "cls", true, EvalMode::Image, DEFAULT_SWEEP_STEP)
        .map_err(err)?
        .auc
        .ok_or_else(|| "validation AUC undefined".to_string())
}

fn criterion_4(ctx: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let (cnn, va) = ctx.cnn()?;
    let auc_cnn = val_auc(&cnn, &va)?;
    let (eng, _, va_eng) = ctx.fit(Architecture::MlpEng, Task::Cls, TrainConfig::default())?;
    let auc_eng = val_auc(&eng, &va_eng)?;
    let (pix, _, va_pix) = ctx.fit(Architecture::MlpPix, Task::Cls, TrainConfig::default())?;
    let auc_pix = val_auc(&pix, &va_pix)?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("AUC cnn {auc_cnn:.4}, mlp_eng {auc_eng:.4}, mlp_pix {auc_pix:.4} ({secs:.0}s)");
    check(auc_cnn >= 0.95 && auc_eng >= 0.95, || format!("image models below 0.95: {detail}"))?;
    check(auc_pix >= 0.85, || format!("mlp_pix below 0.85: {detail}"))?;
    check(auc_pix < auc_cnn && auc_pix < auc_eng, || format!("ordering violated: {detail}"))?;
    check(secs < 900.0, || format!("too slow: {detail}"))?;
    Ok(detail)
}

// ------------------------------------------------------------ 5, 6: U-Net

fn unet_config(task: Task) -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        loss: task.default_loss(),
        ..TrainConfig::default()
    }
}

fn criterion_5(ctx: &mut Ctx) -> Outcome {
    let (model, _, va) = ctx.fit(Architecture::Unet, Task::SegCls, unet_config(Task::SegCls))?;
    let report = evaluate_unet(&model, &va.x, &va.y, "seg_cls", true, EvalMode::Pixel).map_err(err)?;
    let sweep = report.sweep.ok_or("no sweep")?;
    let positives = va.y.data().iter().filter(|&&v| v > 0.5).count() as f64 / va.y.len() as f64;
    check(sweep.rows.len() == 21, || format!("{} sweep rows", sweep.rows.len()))?;
    check(sweep.best_threshold < 0.5, || format!("best threshold {}", sweep.best_threshold))?;
    Ok(format!(
        "pixel-positive rate {:.4}, best threshold {} with CSI {:.3}",
        positives, sweep.best_threshold, sweep.best_csi
    ))
}

fn criterion_6(ctx: &mut Ctx) -> Outcome {
    let (model, _, va) = ctx.fit(Architecture::Unet, Task::SegReg, unet_config(Task::SegReg))?;
    let pixel = evaluate_unet(&model, &va.x, &va.y, "seg_reg", false, EvalMode::Pixel).map_err(err)?;
    let image = evaluate_unet(&model, &va.x, &va.y, "seg_reg", false, EvalMode::ImageSum).map_err(err)?;
    let (p, i) = (pixel.regression.ok_or("no metrics")?, image.regression.ok_or("no metrics")?);
    let detail = format!(
        "pixel MAE {:.4} RMSE {:.4}; image_sum MAE {:.2} RMSE {:.2}",
        p.mae, p.rmse, i.mae, i.rmse
    );
    check(p.mae < i.mae && p.rmse < i.rmse, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------ 7, 8: attribution

/// Appends one uniform noise channel to `[N, H, W, C]` images.
fn with_noise_channel(x: &Tensor, rng: &mut Rng) -> Tensor {
    let [n, h, w, c] = *x.shape() else { unreachable!() };
    let mut out = Tensor::zeros(&[n, h, w, c + 1]);
    for i in 0..n {
        let (src, dst) = (x.item(i), out.item_mut(i));
        for p in 0..h * w {
            dst[p * (c + 1)..p * (c + 1) + c].copy_from_slice(&src[p * c..(p + 1) * c]);
            dst[p * (c + 1) + c] = rng.uniform();
        }
    }
    out
}

fn attribute_all(model: &Model, x: &Tensor, background: &Tensor) -> Result<Vec<AttributionResult>, String> {
    (0..ATTRIBUTION_SAMPLES.min(x.batch_size()))
        .map(|i| attribute(model, &x.unbatch(i), background, ATTRIBUTION_STEPS, &mut Rng::derive(7, &[i as u64])).map_err(err))
        .collect()
}

fn background(ctx: &mut Ctx, arch: Architecture) -> Result<Tensor, String> {
    let (tr, _) = ctx.prepared(arch, Task::Cls)?;
    let mut idx = Rng::new(77).choose(tr.x.batch_size(), ATTRIBUTION_BACKGROUND);
    idx.sort_unstable();
    tr.x.gather(&idx).map_err(err)
}

fn criterion_7(ctx: &mut Ctx) -> Outcome {
    let (cnn, va) = ctx.cnn()?;
    let bg = background(ctx, Architecture::Cnn)?;
    let results = attribute_all(&cnn, &va.x, &bg)?;
    let worst = results.iter().map(|r| r.completeness_residual).fold(0.0, f64::max);
    check(results.len() == ATTRIBUTION_SAMPLES, || format!("{} samples", results.len()))?;
    check(worst <= COMPLETENESS_TOL, || format!("trained CNN residual {worst:.4}"))?;

    // a linear model on the percentile features
    let (_, va_eng) = ctx.prepared(Architecture::MlpEng, Task::Cls)?;
    let mut lin = Model::build(&ModelSpec::perceptron(va_eng.x.shape()[1], OutputKind::LinearScalar).with_seed(3)).map_err(err)?;
    let mut rng = Rng::new(8);
    for p in lin.params_mut() {
        *p = Tensor::uniform(p.shape(), -1.0, 1.0, &mut rng);
    }
    let w = lin.params()[0].clone();
    let bg_lin = va_eng.x.gather(&(200..216).collect::<Vec<_>>()).map_err(err)?;
    let lin_results = attribute_all(&lin, &va_eng.x, &bg_lin)?;
    let mean_bg: Vec<f64> = (0..w.len())
        .map(|j| (0..bg_lin.batch_size()).map(|i| bg_lin.item(i)[j]).sum::<f64>() / bg_lin.batch_size() as f64)
        .collect();
    let mut lin_worst: f64 = 0.0;
    let mut exact_worst: f64 = 0.0;
    for (i, r) in lin_results.iter().enumerate() {
        lin_worst = lin_worst.max(r.completeness_residual);
        for (j, (wj, bj)) in w.data().iter().zip(&mean_bg).enumerate() {
            let expect = wj * (va_eng.x.item(i)[j] - bj);
            exact_worst = exact_worst.max((r.attributions.data()[j] - expect).abs());
        }
    }
    check(lin_results.len() == ATTRIBUTION_SAMPLES, || format!("{} linear samples", lin_results.len()))?;
    check(lin_worst <= LINEAR_COMPLETENESS_TOL, || format!("linear residual {lin_worst:.2e}"))?;
    check(exact_worst <= LINEAR_COMPLETENESS_TOL, || format!("linear attributions off by {exact_worst:.2e}"))?;
    Ok(format!(
        "trained CNN: max residual {worst:.4} over {} samples at {ATTRIBUTION_STEPS} steps; linear: max residual {lin_worst:.1e}",
        results.len()
    ))
}

/// Channel names ordered by decreasing `values`, ties broken by channel order.
fn order(names: &[String], values: &[f64]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.into_iter().map(|i| names[i].clone()).collect()
}

fn criterion_8(ctx: &mut Ctx) -> Outcome {
    let (cnn, va) = ctx.cnn()?;
    let model = cnn.with_ignored_input_channels(1).map_err(err)?;
    let mut names: Vec<String> = CHANNELS.iter().map(|s| s.to_string()).collect();
    names.push("noise".into());
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut rng = Rng::new(88);
    let x = with_noise_channel(&va.x, &mut rng);

    let groups = Groups::channels(&name_refs);
    let cfg = PermutationConfig {
        mode: PermutationMode::Single,
        n_resamples: 30,
        sample_size: 250,
        seed: 8,
    };
    let imp = permutation_importance(&model, &x, &va.y, &groups, ImportanceMetric::Auc, &cfg).map_err(err)?;
    let means: Vec<f64> = imp.single_pass.iter().map(|g| g.mean_importance).collect();
    let perm_rank = order(&names, &means);
    let perm_mag = order(&names, &means.iter().map(|v| v.abs()).collect::<Vec<_>>());

    let bg = with_noise_channel(&background(ctx, Architecture::Cnn)?, &mut rng);
    let results = attribute_all(&model, &x, &bg)?;
    let ratios = aggregate_attributions(&results, &name_refs).map_err(err)?;
    let attr_rank = order(&names, &ratios.signed);
    let attr_abs = order(&names, &ratios.absolute);

    let noise = names.len() - 1;
    let top_perm = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let top_attr = ratios.absolute.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let detail = format!(
        "permutation {} (noise {:.1e}); attribution signed {} absolute {} (noise {:.1e})",
        perm_rank.join(">"),
        means[noise],
        attr_rank.join(">"),
        attr_abs.join(">"),
        ratios.absolute[noise]
    );
    check(perm_rank[0] == "vil" && attr_rank[0] == "vil" && attr_abs[0] == "vil", || {
        format!("vil not first: {detail}")
    })?;
    check(perm_mag.last().map(String::as_str) == Some("noise") && attr_abs.last().map(String::as_str) == Some("noise"), || {
        format!("noise not last by magnitude: {detail}")
    })?;
    check(
        means[noise].abs() <= NOISE_SHARE * top_perm && ratios.absolute[noise] <= NOISE_SHARE * top_attr,
        || format!("noise above {NOISE_SHARE} of the top channel: {detail}"),
    )?;
    Ok(detail)
}

// ------------------------------------------------------------ 9: plateau

fn criterion_9(_: &mut Ctx) -> Outcome {
    let mut rng = Rng::new(9);
    let x = Tensor::uniform(&[64, 4], -1.0, 1.0, &mut rng);
    let y = Tensor::new(
        vec![64, 1],
        (0..64).map(|i| 0.7 * x.item(i)[0] - 0.2 * x.item(i)[3] + 0.3).collect(),
    )
    .map_err(err)?;
    let model = Model::build(&ModelSpec::perceptron(4, OutputKind::LinearScalar)).map_err(err)?;
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 1000,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Sgd,
        loss: Loss::Mse,
        ..TrainConfig::default()
    };
    check(cfg.plateau_epsilon == PLATEAU_EPSILON && PLATEAU_EPSILON == 1e-6 && cfg.patience == 5, || {
        "unexpected plateau defaults".into()
    })?;
    let (_, log) = train(model, (&x, &y), Some((&x, &y)), &cfg).map_err(err)?;
    check(log.stop_reason == Some(StopReason::Plateau), || format!("stop reason {:?}", log.stop_reason))?;
    check(log.epochs.len() < cfg.max_epochs, || "ran to max_epochs".into())?;
    Ok(format!("stopped on plateau after {} of {} epochs", log.epochs.len(), cfg.max_epochs))
}

// ------------------------------------------------------- 10: determinism

fn stormnet(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stormnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("STORMNET_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("stormnet {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn pipeline(dir: &Path) -> Result<(), String> {
    stormnet(dir, &["generate", "--seed", "11", "--out", "data", "--train", "240", "--val", "80", "--test", "80"])?;
    stormnet(
        dir,
        &["train", "--data", "data", "--model", "cnn", "--task", "cls", "--out", "run", "--max-epochs", "3", "--augment"],
    )?;
    stormnet(dir, &["eval", "--model", "run/model.stormnet", "--data", "data", "--split", "test", "--out", "eval"])
}

/// Every file under `dir` with `train_log.csv` stripped of its timing column.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
            let mut bytes = std::fs::read(&path).unwrap();
            if rel.ends_with("train_log.csv") {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string() + "\n")
                    .collect::<String>()
                    .into_bytes();
            }
            out.insert(rel, bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn criterion_10(_: &mut Ctx) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    check(sa.keys().eq(sb.keys()), || "runs produced different file sets".into())?;
    let differing: Vec<&String> = sa.keys().filter(|k| sa[*k] != sb[*k]).collect();
    check(differing.is_empty(), || format!("files differ: {differing:?}"))?;

    // resume: 1 epoch, then 2 more from the checkpoint, equals 3 straight
    let dir = a.path();
    stormnet(
        dir,
        &["train", "--data", "data", "--model", "cnn", "--task", "cls", "--out", "part", "--max-epochs", "1", "--augment"],
    )?;
    stormnet(
        dir,
        &["train", "--data", "data", "--model", "cnn", "--task", "cls", "--out", "resumed", "--max-epochs", "3", "--resume", "part/checkpoint.stormnet"],
    )?;
    let straight = std::fs::read(dir.join("run/model.stormnet")).unwrap();
    let resumed = std::fs::read(dir.join("resumed/model.stormnet")).unwrap();
    check(straight == resumed, || "resumed model differs from uninterrupted training".into())?;

    // containers round-trip and detect corruption
    let ds = DatasetDir::open(&dir.join("data")).map_err(err)?.load_all().map_err(err)?;
    let fresh = generate(&GenerateConfig {
        seed: 11,
        n_train: 240,
        n_val: 80,
        n_test: 80,
        ..GenerateConfig::default()
    })
    .map_err(err)?;
    check(ds.train == fresh.train && ds.val == fresh.val && ds.test == fresh.test, || {
        "reloaded dataset differs from a fresh generation".into()
    })?;
    let model = read_model(&dir.join("run/model.stormnet")).map_err(err)?;
    check(model_to_bytes(&model).map_err(err)? == straight, || "model bytes do not round-trip".into())?;
    let mut corrupt = straight.clone();
    let last = corrupt.len() - 1;
    corrupt[last] ^= 0x40;
    let bad = dir.join("corrupt.stormnet");
    write_atomic(&bad, &corrupt).map_err(err)?;
    check(matches!(read_model(&bad), Err(Error::Checksum(_))), || "corrupt model was accepted".into())?;
    let img = dir.join("data/val_images.bin");
    let mut bytes = std::fs::read(&img).unwrap();
    bytes[100] ^= 0x01;
    std::fs::write(&img, bytes).unwrap();
    let reload = DatasetDir::open(&dir.join("data")).map_err(err)?.load_all();
    check(matches!(reload, Err(Error::Checksum(_))), || "corrupt dataset was accepted".into())?;
    Ok(format!(
        "{} artifacts identical across runs; resume bitwise equal; checksums verified",
        sa.len()
    ))
}

// ------------------------------------------------------ 11: metric oracles

fn concordance(p: &[f64], l: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (pi, li) in p.iter().zip(l) {
        for (pj, lj) in p.iter().zip(l) {
            if *li == 1.0 && *lj == 0.0 {
                den += 1.0;
                num += if pi > pj {
                    1.0
                } else if pi == pj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn criterion_11(_: &mut Ctx) -> Outcome {
    let mut auc_worst: f64 = 0.0;
    for case in 0..200u64 {
        let mut rng = Rng::derive(11, &[case]);
        let n = 2 + rng.below(300);
        // coarse scores create ties
        let levels = 2 + rng.below(50);
        let p: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let mut l: Vec<f64> = (0..n).map(|_| f64::from(rng.bernoulli(0.3))).collect();
        l[0] = 1.0;
        l[1] = 0.0;
        let auc = roc_auc(&p, &l).map_err(err)?.auc;
        auc_worst = auc_worst.max((auc - concordance(&p, &l)).abs());
    }
    check(auc_worst <= 1e-12, || format!("AUC off by {auc_worst:.2e}"))?;

    let mut id_worst: f64 = 0.0;
    let mut rng = Rng::new(111);
    for _ in 0..1000 {
        let t = Contingency {
            tp: 1 + rng.below(1000) as u64,
            fp: 1 + rng.below(1000) as u64,
            fn_: 1 + rng.below(1000) as u64,
            tn: rng.below(1000) as u64,
        };
        let s = t.scores();
        id_worst = id_worst.max((1.0 / s.csi - (1.0 / s.pod + 1.0 / s.sr - 1.0)).abs());
    }
    check(id_worst <= 1e-9, || format!("CSI identity off by {id_worst:.2e}"))?;
    // the table helper agrees with a hand count
    let c = contingency(&[0.9, 0.4, 0.6, 0.1], &[1.0, 1.0, 0.0, 0.0], 0.5).map_err(err)?;
    check((c.tp, c.fp, c.fn_, c.tn) == (1, 1, 1, 1), || format!("{c:?}"))?;
    Ok(format!(
        "AUC vs pair concordance {auc_worst:.1e} over 200 tied cases; CSI identity {id_worst:.1e} over 1000 tables"
    ))
}

// ---------------------------------------------------------------- driver

type Criterion = (u32, &'static str, fn(&mut Ctx) -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "gradient fidelity", criterion_1),
    (2, "convolution oracle", criterion_2),
    (3, "overfit capacity", criterion_3),
    (4, "synthetic task skill", criterion_4),
    (5, "imbalance threshold", criterion_5),
    (6, "u-net regression accounting", criterion_6),
    (7, "attribution completeness", criterion_7),
    (8, "xai cross-method agreement", criterion_8),
    (9, "early stopping", criterion_9),
    (10, "determinism and persistence", criterion_10),
    (11, "metric oracles", criterion_11),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx::default();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut ctx)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
