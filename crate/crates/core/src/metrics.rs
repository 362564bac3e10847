//! Forecast verification: contingency scores, threshold sweeps, ROC/AUC and
//! regression errors, plus evaluation reports for scalar and map models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

pub const DEFAULT_SWEEP_STEP: f64 = 0.05;

/// Counts of a binary forecast against binary observations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub pod: f64,
    pub sr: f64,
    pub csi: f64,
    pub freq_bias: f64,
}

fn ratio_or(num: u64, den: u64, fallback: f64) -> f64 {
    if den == 0 {
        fallback
    } else {
        num as f64 / den as f64
    }
}

impl Contingency {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// POD, SR, CSI and frequency bias; `0/0` gives 0, or 1 for the bias.
    pub fn scores(&self) -> Scores {
        let Contingency { tp, fp, fn_, .. } = *self;
        Scores {
            pod: ratio_or(tp, tp + fn_, 0.0),
            sr: ratio_or(tp, tp + fp, 0.0),
            csi: ratio_or(tp, tp + fp + fn_, 0.0),
            freq_bias: ratio_or(tp + fp, tp + fn_, 1.0),
        }
    }
}

fn check_pair(probs: &[f64], labels: &[f64]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            left: vec![probs.len()],
            right: vec![labels.len()],
            context: "predictions vs labels",
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(Error::invalid(format!("labels must be 0 or 1, found {bad}")));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(())
}

/// Forecast is positive iff `prob >= threshold`.
pub fn contingency(probs: &[f64], labels: &[f64], threshold: f64) -> Result<Contingency> {
    check_pair(probs, labels)?;
    let mut c = Contingency::default();
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub pod: f64,
    pub sr: f64,
    pub csi: f64,
    pub freq_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// Lowest threshold attaining the maximum CSI.
    pub best_threshold: f64,
    pub best_csi: f64,
}

/// `0, step, 2 step, ...` up to and including 1.
pub fn sweep_thresholds(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid(format!("sweep step {step} outside (0, 1]")));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    // rounding keeps 0.15 from printing as 0.15000000000000002
    let mut t: Vec<f64> = (0..=n).map(|k| (k as f64 * step * 1e9).round() / 1e9).collect();
    if *t.last().unwrap() < 1.0 {
        t.push(1.0);
    }
    Ok(t)
}

pub fn threshold_sweep(probs: &[f64], labels: &[f64], step: f64) -> Result<Sweep> {
    check_pair(probs, labels)?;
    let thresholds = sweep_thresholds(step)?;
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&p, &l) in probs.iter().zip(labels) {
        if l == 1.0 {
            pos.push(p)
        } else {
            neg.push(p)
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let at_least = |sorted: &[f64], t: f64| (sorted.len() - sorted.partition_point(|&p| p < t)) as u64;
    let mut rows = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        let tp = at_least(&pos, t);
        let fp = at_least(&neg, t);
        let c = Contingency {
            tp,
            fp,
            fn_: pos.len() as u64 - tp,
            tn: neg.len() as u64 - fp,
        };
        let s = c.scores();
        rows.push(SweepRow {
            threshold: t,
            pod: s.pod,
            sr: s.sr,
            csi: s.csi,
            freq_bias: s.freq_bias,
        });
    }
    let best = rows
        .iter()
        .fold(None::<&SweepRow>, |b, r| match b {
            Some(b) if b.csi >= r.csi => Some(b),
            _ => Some(r),
        })
        .expect("at least one threshold");
    Ok(Sweep {
        best_threshold: best.threshold,
        best_csi: best.csi,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub pod: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC through every distinct probability (ties grouped) with trapezoidal AUC.
pub fn roc_auc(probs: &[f64], labels: &[f64]) -> Result<Roc> {
    check_pair(probs, labels)?;
    let p_total = labels.iter().filter(|&&l| l == 1.0).count();
    let n_total = labels.len() - p_total;
    if p_total == 0 || n_total == 0 {
        return Err(Error::invalid("ROC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut points = vec![RocPoint { fpr: 0.0, pod: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc2 = 0.0; // twice the area, in units of tp * fp counts
    let mut i = 0;
    while i < order.len() {
        let p = probs[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && probs[order[i]] == p {
            if labels[order[i]] == 1.0 {
                tp += 1
            } else {
                fp += 1
            }
            i += 1;
        }
        auc2 += ((fp - fp0) * (tp + tp0)) as f64;
        points.push(RocPoint {
            fpr: fp as f64 / n_total as f64,
            pod: tp as f64 / p_total as f64,
        });
    }
    Ok(Roc {
        points,
        auc: auc2 / (2.0 * p_total as f64 * n_total as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub bias: f64,
    /// Absent when the targets have zero variance.
    pub r2: Option<f64>,
}

fn regression_block(y_hat: &[f64], y: &[f64]) -> Result<RegressionMetrics> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(Error::ShapeMismatch {
            left: vec![y_hat.len()],
            right: vec![y.len()],
            context: "regression predictions vs targets",
        });
    }
    let n = y.len() as f64;
    let (mut abs, mut sq, mut diff) = (0.0, 0.0, 0.0);
    for (&p, &t) in y_hat.iter().zip(y) {
        let d = p - t;
        abs += d.abs();
        sq += d * d;
        diff += d;
    }
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|t| (t - mean) * (t - mean)).sum();
    Ok(RegressionMetrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        bias: diff / n,
        r2: (y.len() >= 2 && ss_tot > 0.0).then(|| 1.0 - sq / ss_tot),
    })
}

/// MAE, RMSE, bias and R²; errors when R² is undefined.
pub fn regression_metrics(y_hat: &[f64], y: &[f64]) -> Result<RegressionMetrics> {
    let m = regression_block(y_hat, y)?;
    if m.r2.is_none() {
        return Err(Error::invalid("R² is undefined for fewer than 2 targets or zero target variance"));
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// One prediction per image from a scalar model.
    Image,
    /// Every pixel of every map scored as one population.
    Pixel,
    /// Maps reduced per image: sum for counts, max for probabilities.
    ImageSum,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "image" => EvalMode::Image,
            "pixel" => EvalMode::Pixel,
            "image_sum" => EvalMode::ImageSum,
            _ => return Err(Error::invalid(format!("unknown evaluation mode `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub mode: EvalMode,
    pub n: usize,
    pub sweep: Option<Sweep>,
    pub roc: Option<Vec<RocPoint>>,
    pub auc: Option<f64>,
    pub regression: Option<RegressionMetrics>,
}

impl EvalReport {
    /// AUC for classification, negative MAE for regression; larger is better.
    pub fn primary_metric(&self) -> Option<f64> {
        match &self.regression {
            Some(r) => Some(-r.mae),
            None => self.auc,
        }
    }

    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("threshold,pod,sr,csi,freq_bias\n");
        for r in self.sweep.iter().flat_map(|sw| &sw.rows) {
            s += &format!("{},{},{},{},{}\n", r.threshold, r.pod, r.sr, r.csi, r.freq_bias);
        }
        s
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,pod\n");
        for p in self.roc.iter().flatten() {
            s += &format!("{},{}\n", p.fpr, p.pod);
        }
        s
    }
}

/// Scores `preds` against `targets` (same shape) under `mode`.
pub fn evaluate_predictions(
    preds: &Tensor,
    targets: &Tensor,
    task: &str,
    classification: bool,
    mode: EvalMode,
    sweep_step: f64,
) -> Result<EvalReport> {
    if preds.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            left: preds.shape().to_vec(),
            right: targets.shape().to_vec(),
            context: "evaluation predictions vs targets",
        });
    }
    let is_map = preds.rank() == 4;
    let (p, t): (Vec<f64>, Vec<f64>) = match (mode, is_map) {
        (EvalMode::Image, false) | (EvalMode::Pixel, true) => (preds.data().to_vec(), targets.data().to_vec()),
        (EvalMode::ImageSum, true) => {
            let n = preds.batch_size();
            let reduce = |x: &Tensor, i: usize| -> f64 {
                if classification {
                    x.item(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    x.item(i).iter().sum()
                }
            };
            ((0..n).map(|i| reduce(preds, i)).collect(), (0..n).map(|i| reduce(targets, i)).collect())
        }
        (m, _) => {
            return Err(Error::Spec(format!(
                "evaluation mode {m:?} does not apply to {} output",
                if is_map { "map" } else { "scalar" }
            )))
        }
    };
    let mut report = EvalReport {
        task: task.to_string(),
        mode,
        n: t.len(),
        sweep: None,
        roc: None,
        auc: None,
        regression: None,
    };
    if classification {
        report.sweep = Some(threshold_sweep(&p, &t, sweep_step)?);
        let both = t.contains(&1.0) && t.contains(&0.0);
        if both {
            let roc = roc_auc(&p, &t)?;
            report.auc = Some(roc.auc);
            report.roc = Some(roc.points);
        }
    } else {
        report.regression = Some(regression_block(&p, &t)?);
    }
    Ok(report)
}

/// Predicts `x` with `model` and scores the result against `targets`.
pub fn evaluate(
    model: &Model,
    x: &Tensor,
    targets: &Tensor,
    task: &str,
    classification: bool,
    mode: EvalMode,
    sweep_step: f64,
) -> Result<EvalReport> {
    let map = model.spec().output.is_map();
    if map != (mode != EvalMode::Image) {
        return Err(Error::Spec(format!(
            "mode {mode:?} needs a {} model",
            if map { "scalar-output" } else { "map-output" }
        )));
    }
    let preds = model.predict(x)?;
    evaluate_predictions(&preds, targets, task, classification, mode, sweep_step)
}

/// Pixel-wise or per-image evaluation of a map-output model.
pub fn evaluate_unet(
    model: &Model,
    x: &Tensor,
    targets: &Tensor,
    task: &str,
    classification: bool,
    mode: EvalMode,
) -> Result<EvalReport> {
    if !model.spec().output.is_map() {
        return Err(Error::Spec("evaluate_unet needs a map-output model".into()));
    }
    evaluate(model, x, targets, task, classification, mode, DEFAULT_SWEEP_STEP)
}
