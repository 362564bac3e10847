//! Explainability: backward permutation importance over channel groups and
//! additive expected-gradients attributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_predictions, EvalMode, DEFAULT_SWEEP_STEP};
use crate::models::Model;
use crate::tensor::{derive_seed, Rng, Tensor};

/// A partition of the input's last axis into named groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Groups {
    pub names: Vec<String>,
    pub members: Vec<Vec<usize>>,
}

impl Groups {
    /// One group per channel.
    pub fn channels(names: &[&str]) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            members: (0..names.len()).map(|c| vec![c]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Checks that the groups cover `0..features` exactly once.
    pub fn validate(&self, features: usize) -> Result<()> {
        let mut seen = vec![false; features];
        if self.names.len() != self.members.len() || self.is_empty() {
            return Err(Error::invalid("groups need one non-empty name list per member list"));
        }
        for m in self.members.iter().flatten() {
            if *m >= features || std::mem::replace(&mut seen[*m], true) {
                return Err(Error::invalid(format!(
                    "groups are not a partition of {features} features (index {m})"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid(format!("groups do not cover all {features} features")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    /// ROC AUC (per pixel for map models).
    Auc,
    /// Negative mean absolute error, so larger is better.
    NegMae,
}

impl ImportanceMetric {
    pub fn for_task(classification: bool) -> Self {
        if classification {
            ImportanceMetric::Auc
        } else {
            ImportanceMetric::NegMae
        }
    }

    fn score(self, preds: &Tensor, targets: &Tensor) -> Result<f64> {
        let mode = if preds.rank() == 4 { EvalMode::Pixel } else { EvalMode::Image };
        let classification = self == ImportanceMetric::Auc;
        let report = evaluate_predictions(preds, targets, "importance", classification, mode, DEFAULT_SWEEP_STEP)?;
        report
            .primary_metric()
            .ok_or_else(|| Error::invalid("importance metric undefined: the sample holds a single class"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub mode: PermutationMode,
    pub n_resamples: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            mode: PermutationMode::Single,
            n_resamples: 30,
            sample_size: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub group: String,
    /// Mean over resamples of `base - shuffled` score.
    pub mean_importance: f64,
    /// Sample standard deviation over resamples.
    pub stddev: f64,
    pub per_resample: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPassStep {
    pub group: String,
    /// Mean score with this and every earlier group shuffled.
    pub score: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceResult {
    pub metric: ImportanceMetric,
    pub n_resamples: usize,
    pub sample_size: usize,
    pub base_score: f64,
    pub base_stddev: f64,
    pub single_pass: Vec<GroupImportance>,
    /// Elimination order, most damaging first; present in multi-pass mode.
    pub multi_pass: Option<Vec<MultiPassStep>>,
    /// Mean score with every group shuffled.
    pub final_score: f64,
}

impl ImportanceResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,mean_importance,stddev\n");
        for g in &self.single_pass {
            s += &format!("{},{},{}\n", g.group, g.mean_importance, g.stddev);
        }
        s
    }

    /// Group names by decreasing single-pass importance.
    pub fn ranking(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.single_pass.len()).collect();
        idx.sort_by(|&a, &b| {
            self.single_pass[b]
                .mean_importance
                .total_cmp(&self.single_pass[a].mean_importance)
                .then(a.cmp(&b))
        });
        idx.into_iter().map(|i| self.single_pass[i].group.as_str()).collect()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Shuffles the features of `groups` in `x`: positions within each sample
/// first, then the assignment of samples. Each `(resample, group)` pair has
/// its own fixed permutation, so results do not depend on evaluation order.
pub fn shuffle_groups(x: &Tensor, groups: &Groups, which: &[usize], seed: u64, resample: usize) -> Tensor {
    let n = x.batch_size();
    let f = *x.shape().last().unwrap_or(&1);
    let positions = x.item_len() / f;
    let mut out = x.clone();
    for &g in which {
        let mut rng = Rng::derive(seed, &[resample as u64, 1 << 20 | g as u64]);
        let within: Vec<Vec<usize>> = (0..n).map(|_| rng.permutation(positions)).collect();
        let across = rng.permutation(n);
        for (i, &src_img) in across.iter().enumerate() {
            let src = x.item(src_img);
            let perm = &within[src_img];
            let dst = out.item_mut(i);
            for p in 0..positions {
                for &c in &groups.members[g] {
                    dst[p * f + c] = src[perm[p] * f + c];
                }
            }
        }
    }
    out
}

/// Backward permutation importance, repeated over random subsets of the data.
pub fn permutation_importance(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    groups: &Groups,
    metric: ImportanceMetric,
    cfg: &PermutationConfig,
) -> Result<ImportanceResult> {
    let features = *x.shape().last().unwrap_or(&0);
    groups.validate(features)?;
    let n = x.batch_size();
    if cfg.n_resamples == 0 || cfg.sample_size == 0 {
        return Err(Error::invalid("n_resamples and sample_size must be at least 1"));
    }
    if n < cfg.sample_size {
        return Err(Error::invalid(format!(
            "dataset has {n} samples but sample size is {}; lower --sample-size",
            cfg.sample_size
        )));
    }
    let subsets: Vec<(Tensor, Tensor)> = (0..cfg.n_resamples)
        .map(|r| {
            let idx = Rng::derive(cfg.seed, &[r as u64]).choose(n, cfg.sample_size);
            Ok((x.gather(&idx)?, y.gather(&idx)?))
        })
        .collect::<Result<_>>()?;
    let shuffle_seed = derive_seed(cfg.seed, &[u64::MAX]);
    let score_with = |shuffled: &[usize]| -> Result<Vec<f64>> {
        subsets
            .iter()
            .enumerate()
            .map(|(r, (sx, sy))| {
                let input = shuffle_groups(sx, groups, shuffled, shuffle_seed, r);
                metric.score(&model.predict(&input)?, sy)
            })
            .collect()
    };
    let base = score_with(&[])?;
    let (base_score, base_stddev) = mean_std(&base);

    let mut single_scores = Vec::with_capacity(groups.len());
    let mut single_pass = Vec::with_capacity(groups.len());
    for g in 0..groups.len() {
        let scores = score_with(&[g])?;
        let imp: Vec<f64> = base.iter().zip(&scores).map(|(b, s)| b - s).collect();
        let (mean, std) = mean_std(&imp);
        single_pass.push(GroupImportance {
            group: groups.names[g].clone(),
            mean_importance: mean,
            stddev: std,
            per_resample: imp,
        });
        single_scores.push(scores);
    }

    let all: Vec<usize> = (0..groups.len()).collect();
    let multi_pass = match cfg.mode {
        PermutationMode::Single => None,
        PermutationMode::Multi => {
            let mut frozen: Vec<usize> = Vec::new();
            let mut steps = Vec::new();
            // the first step is exactly the single pass
            let mut candidates: Vec<(usize, Vec<f64>)> = single_scores.iter().cloned().enumerate().collect();
            while !candidates.is_empty() {
                let (pick, scores) = candidates
                    .iter()
                    .min_by(|a, b| mean_std(&a.1).0.total_cmp(&mean_std(&b.1).0).then(a.0.cmp(&b.0)))
                    .cloned()
                    .expect("candidates remain");
                frozen.push(pick);
                let (score, stddev) = mean_std(&scores);
                steps.push(MultiPassStep {
                    group: groups.names[pick].clone(),
                    score,
                    stddev,
                });
                candidates = all
                    .iter()
                    .filter(|g| !frozen.contains(g))
                    .map(|&g| {
                        let mut with = frozen.clone();
                        with.push(g);
                        Ok((g, score_with(&with)?))
                    })
                    .collect::<Result<_>>()?;
            }
            Some(steps)
        }
    };
    let final_score = match &multi_pass {
        Some(steps) => steps.last().expect("at least one group").score,
        None => mean_std(&score_with(&all)?).0,
    };
    Ok(ImportanceResult {
        metric,
        n_resamples: cfg.n_resamples,
        sample_size: cfg.sample_size,
        base_score,
        base_stddev,
        single_pass,
        multi_pass,
        final_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Same shape as one input sample.
    pub attributions: Tensor,
    /// Attribution summed over all positions, per feature of the last axis.
    pub channel_sums: Vec<f64>,
    /// Mean model output over the background samples that were used.
    pub expected_value: f64,
    pub model_output: f64,
    /// `|sum(attributions) + expected_value - model_output|`.
    pub completeness_residual: f64,
}

/// Points per model call during attribution.
const ATTRIBUTION_CHUNK: usize = 64;

fn summed_outputs(out: &Tensor) -> Vec<f64> {
    (0..out.batch_size()).map(|i| out.item(i).iter().sum()).collect()
}

/// Expected-gradients attribution of one sample `x` (shaped like a single model input).
///
/// The `n_steps` path points are spread round-robin over the background,
/// each background sample receiving a midpoint grid of interpolation
/// coefficients `alpha`; `rng` only picks the background subset when there
/// are fewer steps than background samples. Each background sample's path integral is weighted
/// equally, so the attributions sum to `f(x)` minus the mean background
/// output, up to quadrature error. Map models are explained through the sum
/// of their output map.
pub fn attribute(model: &Model, x: &Tensor, background: &Tensor, n_steps: usize, rng: &mut Rng) -> Result<AttributionResult> {
    if background.is_empty() || background.batch_size() == 0 {
        return Err(Error::invalid("attribution needs a non-empty background"));
    }
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let d = x.len();
    if background.item_len() != d {
        return Err(Error::ShapeMismatch {
            left: x.shape().to_vec(),
            right: background.shape().to_vec(),
            context: "attribution sample vs background",
        });
    }
    let used = background.batch_size().min(n_steps);
    let bg_idx: Vec<usize> = if used == background.batch_size() {
        (0..used).collect()
    } else {
        let mut idx = rng.choose(background.batch_size(), used);
        idx.sort_unstable();
        idx
    };
    // (background slot, alpha) for every path point
    let mut points: Vec<(usize, f64)> = Vec::with_capacity(n_steps);
    let mut per_slot = vec![0usize; used];
    for s in 0..n_steps {
        per_slot[s % used] += 1;
    }
    for (slot, &m) in per_slot.iter().enumerate() {
        for i in 0..m {
            points.push((slot, (i as f64 + 0.5) / m as f64));
        }
    }

    let mut sample_shape = vec![1];
    sample_shape.extend_from_slice(x.shape());
    let mut grad_mean = vec![vec![0.0; d]; used];
    for chunk in points.chunks(ATTRIBUTION_CHUNK) {
        let mut batch_shape = vec![chunk.len()];
        batch_shape.extend_from_slice(x.shape());
        let mut batch = Tensor::zeros(&batch_shape);
        for (k, &(slot, alpha)) in chunk.iter().enumerate() {
            let b = background.item(bg_idx[slot]);
            for ((o, &bi), &xi) in batch.item_mut(k).iter_mut().zip(b).zip(x.data()) {
                *o = bi + alpha * (xi - bi);
            }
        }
        let (_, grads) = model.input_gradient(&batch)?;
        for (k, &(slot, _)) in chunk.iter().enumerate() {
            let w = 1.0 / per_slot[slot] as f64;
            for (acc, g) in grad_mean[slot].iter_mut().zip(grads.item(k)) {
                *acc += w * g;
            }
        }
    }

    let mut phi = vec![0.0; d];
    let inv = 1.0 / used as f64;
    for (slot, g) in grad_mean.iter().enumerate() {
        let b = background.item(bg_idx[slot]);
        for (((p, &gi), &bi), &xi) in phi.iter_mut().zip(g).zip(b).zip(x.data()) {
            *p += inv * (xi - bi) * gi;
        }
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attribution".into()));
    }

    let used_bg = background.gather(&bg_idx)?;
    let expected_value = summed_outputs(&model.predict(&used_bg)?).iter().sum::<f64>() * inv;
    let model_output = summed_outputs(&model.predict(&x.clone().reshape(&sample_shape)?)?)[0];
    let f = *x.shape().last().unwrap_or(&1);
    let mut channel_sums = vec![0.0; f];
    for (i, p) in phi.iter().enumerate() {
        channel_sums[i % f] += p;
    }
    let total: f64 = phi.iter().sum();
    Ok(AttributionResult {
        attributions: Tensor::new(x.shape().to_vec(), phi)?,
        channel_sums,
        expected_value,
        model_output,
        completeness_residual: (total + expected_value - model_output).abs(),
    })
}

/// Global channel shares of the attribution mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRatios {
    pub channels: Vec<String>,
    /// Signed per-channel sums over the total signed sum.
    pub signed: Vec<f64>,
    /// Per-channel absolute sums over the total absolute sum.
    pub absolute: Vec<f64>,
}

impl ChannelRatios {
    /// Channel names by decreasing share under the chosen variant.
    pub fn ranking(&self, absolute: bool) -> Vec<&str> {
        let v = if absolute { &self.absolute } else { &self.signed };
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| self.channels[i].as_str()).collect()
    }
}

pub fn aggregate_attributions(results: &[AttributionResult], channels: &[&str]) -> Result<ChannelRatios> {
    aggregate_groups(results, &Groups::channels(channels))
}

/// Like [`aggregate_attributions`], with features of the last axis pooled into `groups`.
pub fn aggregate_groups(results: &[AttributionResult], groups: &Groups) -> Result<ChannelRatios> {
    let first = results.first().ok_or_else(|| Error::invalid("no attributions to aggregate"))?;
    let f = first.channel_sums.len();
    if results.iter().any(|r| r.channel_sums.len() != f) {
        return Err(Error::invalid("attribution results disagree on the channel count"));
    }
    groups.validate(f)?;
    let mut owner = vec![0; f];
    for (g, members) in groups.members.iter().enumerate() {
        for &m in members {
            owner[m] = g;
        }
    }
    let mut signed = vec![0.0; groups.len()];
    let mut absolute = vec![0.0; groups.len()];
    for r in results {
        for (i, v) in r.attributions.data().iter().enumerate() {
            signed[owner[i % f]] += v;
            absolute[owner[i % f]] += v.abs();
        }
    }
    let total: f64 = signed.iter().sum();
    if total == 0.0 {
        return Err(Error::invalid("total attribution is zero; signed ratios are undefined"));
    }
    let abs_total: f64 = absolute.iter().sum();
    Ok(ChannelRatios {
        channels: groups.names.clone(),
        signed: signed.iter().map(|s| s / total).collect(),
        absolute: absolute.iter().map(|a| a / abs_total).collect(),
    })
}
