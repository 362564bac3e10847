use serde::{Deserialize, Serialize};

use super::{validation_scores, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::loss::Loss;
use crate::models::{ConvBlock, Model, ModelKind, ModelSpec};
use crate::optim::OptimizerKind;
use crate::tensor::{derive_seed, Rng, Tensor};

/// Ranges and choices sampled uniformly per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Inclusive range of dense hidden layers (MLP body, CNN head).
    pub hidden_layers: (usize, usize),
    pub widths: Vec<usize>,
    /// Inclusive range of CNN conv blocks.
    pub conv_blocks: (usize, usize),
    /// Filters of the first CNN block or the first U-Net level; doubled deeper down.
    pub filters: Vec<usize>,
    pub unet_depth: (usize, usize),
    /// Log-uniform range.
    pub learning_rate: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub dropout_rates: Vec<f64>,
    pub batchnorm: Vec<bool>,
    pub losses: Vec<Loss>,
    pub optimizers: Vec<OptimizerKind>,
}

impl SearchSpace {
    pub fn default_for(classification: bool) -> Self {
        Self {
            hidden_layers: (1, 3),
            widths: vec![8, 16, 32, 64],
            conv_blocks: (1, 3),
            filters: vec![4, 8, 16],
            unet_depth: (1, 3),
            learning_rate: (1e-4, 1e-2),
            batch_sizes: vec![16, 32, 64],
            dropout_rates: vec![0.0, 0.1, 0.25],
            batchnorm: vec![false, true],
            losses: if classification {
                vec![Loss::Bce, Loss::WeightedBce { pos_weight: 2.0 }, Loss::WeightedBce { pos_weight: 5.0 }]
            } else {
                vec![Loss::Mse, Loss::Mae]
            },
            optimizers: vec![OptimizerKind::Adam, OptimizerKind::Rmsprop, OptimizerKind::Sgd],
        }
    }

    fn validate(&self) -> Result<()> {
        let empty = self.widths.is_empty()
            || self.filters.is_empty()
            || self.batch_sizes.is_empty()
            || self.dropout_rates.is_empty()
            || self.batchnorm.is_empty()
            || self.losses.is_empty()
            || self.optimizers.is_empty();
        let bad_range = self.hidden_layers.0 > self.hidden_layers.1
            || self.conv_blocks.0 > self.conv_blocks.1
            || self.conv_blocks.0 == 0
            || self.unet_depth.0 > self.unet_depth.1
            || self.unet_depth.0 == 0
            || !(self.learning_rate.0 > 0.0 && self.learning_rate.0 <= self.learning_rate.1);
        if empty || bad_range {
            return Err(Error::invalid("search space has an empty choice or range"));
        }
        Ok(())
    }
}

fn pick<T: Clone>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())].clone()
}

fn in_range(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Draws one trial's architecture and training settings.
fn sample_trial(base: &ModelSpec, base_cfg: &TrainConfig, space: &SearchSpace, rng: &mut Rng) -> (ModelSpec, TrainConfig) {
    let mut spec = base.clone();
    let mut cfg = *base_cfg;
    match spec.kind {
        ModelKind::Perceptron => {}
        ModelKind::Mlp => {
            let k = in_range(rng, space.hidden_layers);
            spec.hidden_layers = (0..k).map(|_| pick(rng, &space.widths)).collect();
        }
        ModelKind::Cnn => {
            // no more pooling blocks than the input extent can be halved
            let (mut h, mut max_blocks) = (spec.input_shape[0].min(spec.input_shape[1]), 0);
            while h % 2 == 0 && max_blocks < space.conv_blocks.1 {
                h /= 2;
                max_blocks += 1;
            }
            let hi = max_blocks.max(1);
            let blocks = in_range(rng, (space.conv_blocks.0.min(hi), hi));
            let f0 = pick(rng, &space.filters);
            spec.conv_blocks = (0..blocks).map(|b| ConvBlock { filters: f0 << b, convs: 1 }).collect();
            let k = in_range(rng, (space.hidden_layers.0.max(1), space.hidden_layers.1.max(1)));
            spec.hidden_layers = (0..k).map(|_| pick(rng, &space.widths)).collect();
        }
        ModelKind::Unet => {
            let extent = spec.input_shape[0].min(spec.input_shape[1]);
            let mut max_depth = 0;
            while max_depth < space.unet_depth.1 && extent % (2 << max_depth) == 0 && extent / (2 << max_depth) >= 3 {
                max_depth += 1;
            }
            let hi = max_depth.max(1);
            spec.depth = in_range(rng, (space.unet_depth.0.min(hi), hi));
            spec.base_filters = pick(rng, &space.filters);
        }
    }
    if spec.kind != ModelKind::Perceptron {
        spec.dropout_rate = pick(rng, &space.dropout_rates);
        spec.use_batchnorm = pick(rng, &space.batchnorm);
    }
    let (lo, hi) = space.learning_rate;
    cfg.learning_rate = (lo.ln() + (hi.ln() - lo.ln()) * rng.uniform()).exp();
    cfg.batch_size = pick(rng, &space.batch_sizes);
    cfg.loss = pick(rng, &space.losses);
    cfg.optimizer = pick(rng, &space.optimizers);
    spec.seed = rng.next_u64();
    cfg.seed = rng.next_u64();
    (spec, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub spec: ModelSpec,
    /// Validation metric of the final model; absent for failed trials.
    pub metric: Option<f64>,
    pub status: TrialStatus,
    pub config: TrainConfig,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    /// Trials in the order they were run.
    pub trials: Vec<TrialResult>,
    /// Trial indices, best first; failed trials last.
    pub ranking: Vec<usize>,
}

impl SearchReport {
    pub fn best(&self) -> Option<&TrialResult> {
        self.ranking
            .first()
            .map(|&i| &self.trials[i])
            .filter(|t| t.status == TrialStatus::Ok)
    }

    /// Trials sorted best first, as written to `search.json`.
    pub fn ranked(&self) -> Vec<&TrialResult> {
        self.ranking.iter().map(|&i| &self.trials[i]).collect()
    }
}

fn better(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x > y,
        (Some(_), None) => true,
        _ => false,
    }
}

/// Random search: trains `n_trials` sampled configurations and ranks them by
/// validation metric. Returns the report and the best trained model.
pub fn hyperparameter_search(
    base: &ModelSpec,
    base_cfg: &TrainConfig,
    space: &SearchSpace,
    n_trials: usize,
    train: (&Tensor, &Tensor),
    val: (&Tensor, &Tensor),
    seed: u64,
) -> Result<(SearchReport, Option<Model>)> {
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be at least 1"));
    }
    space.validate()?;
    let mut trials = Vec::with_capacity(n_trials);
    let mut best: Option<(Option<f64>, Model)> = None;
    for trial in 0..n_trials {
        let mut rng = Rng::new(derive_seed(seed, &[trial as u64]));
        let (spec, cfg) = sample_trial(base, base_cfg, space, &mut rng);
        let outcome = Model::build(&spec)
            .and_then(|m| Trainer::new(m, cfg))
            .and_then(|mut t| {
                t.run(train, Some(val))?;
                let (_, metric) = validation_scores(&t.model, &cfg.loss, val.0, val.1)?;
                Ok((t, metric))
            });
        let result = match outcome {
            Ok((t, metric)) => {
                let r = TrialResult {
                    trial,
                    spec,
                    metric,
                    status: TrialStatus::Ok,
                    config: cfg,
                    epochs: t.epochs_done(),
                    error: None,
                };
                if best.as_ref().map_or(true, |(m, _)| better(metric, *m)) {
                    best = Some((metric, t.model));
                }
                r
            }
            Err(e) if e.is_io() => return Err(e),
            Err(e) => TrialResult {
                trial,
                spec,
                metric: None,
                status: TrialStatus::Failed,
                config: cfg,
                epochs: 0,
                error: Some(e.to_string()),
            },
        };
        trials.push(result);
    }
    let mut ranking: Vec<usize> = (0..trials.len()).collect();
    ranking.sort_by(|&a, &b| {
        let (ma, mb) = (trials[a].metric, trials[b].metric);
        if better(ma, mb) {
            std::cmp::Ordering::Less
        } else if better(mb, ma) {
            std::cmp::Ordering::Greater
        } else {
            a.cmp(&b)
        }
    });
    Ok((SearchReport { trials, ranking }, best.map(|(_, m)| m)))
}
