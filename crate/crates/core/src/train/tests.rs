use super::*;
use crate::models::OutputKind;

/// Images whose label is whether the first channel's mean exceeds 0.5.
fn toy_images(n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    let x = Tensor::uniform(&[n, 8, 8, 2], 0.0, 1.0, &mut rng);
    let mut x = x;
    let mut y = Tensor::zeros(&[n, 1]);
    for i in 0..n {
        let shift = rng.uniform_in(-0.3, 0.3);
        for v in x.item_mut(i).iter_mut().step_by(2) {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
        let mean = x.item(i).iter().step_by(2).sum::<f64>() / 64.0;
        y.data_mut()[i] = f64::from(mean > 0.5);
    }
    (x, y)
}

fn small_cnn(seed: u64) -> Model {
    let mut spec = ModelSpec::cnn(&[8, 8, 2], OutputKind::SigmoidScalar).with_seed(seed);
    spec.conv_blocks = vec![ConvBlockSpec { filters: 4, convs: 1 }, ConvBlockSpec { filters: 4, convs: 1 }];
    spec.hidden_layers = vec![8];
    Model::build(&spec).unwrap()
}

use crate::models::ConvBlock as ConvBlockSpec;

fn params_of(m: &Model) -> Vec<Tensor> {
    m.params().into_iter().cloned().collect()
}

#[test]
fn zero_epochs_is_identity() {
    let (x, y) = toy_images(10, 1);
    let model = small_cnn(1);
    let cfg = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    };
    let (trained, log) = train(model.clone(), (&x, &y), None, &cfg).unwrap();
    assert_eq!(params_of(&trained), params_of(&model));
    assert!(log.epochs.is_empty());
    assert_eq!(log.to_csv(), "epoch,train_loss,val_loss,val_metric,seconds\n");
}

#[test]
fn every_sample_once_per_epoch() {
    for (n, bs) in [(10, 3), (33, 32), (64, 16), (5, 10)] {
        for epoch in 0..5 {
            let batches = epoch_batches(9, epoch, n, bs, false);
            let mut seen: Vec<usize> = batches.concat();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!(batches.iter().all(|b| b.len() <= bs));
        }
    }
    let folded = epoch_batches(9, 0, 33, 32, true);
    assert_eq!(folded.len(), 1);
    assert_eq!(folded[0].len(), 33);
    assert_ne!(epoch_batches(9, 0, 20, 4, false), epoch_batches(9, 1, 20, 4, false));
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let (x, y) = toy_images(40, 2);
    let (vx, vy) = toy_images(16, 3);
    let mut spec = small_cnn(4).spec().clone();
    spec.dropout_rate = 0.2;
    spec.use_batchnorm = true;
    let model = Model::build(&spec).unwrap();
    let cfg = TrainConfig {
        batch_size: 7,
        max_epochs: 10,
        augment: true,
        seed: 5,
        ..TrainConfig::default()
    };
    let (a, log_a) = train(model.clone(), (&x, &y), Some((&vx, &vy)), &cfg).unwrap();
    let (b, _) = train(model.clone(), (&x, &y), Some((&vx, &vy)), &cfg).unwrap();
    assert_eq!(params_of(&a), params_of(&b));
    assert_eq!(log_a.epochs.len(), 10);
    assert_eq!(log_a.stop_reason, Some(StopReason::MaxEpochs));

    let mut first = Trainer::new(model, cfg).unwrap();
    first.run_until((&x, &y), Some((&vx, &vy)), 5).unwrap();
    assert_eq!(first.epochs_done(), 5);
    assert!(!first.is_finished());
    let bytes = first.checkpoint().unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(&bytes).unwrap();
    resumed.run((&x, &y), Some((&vx, &vy))).unwrap();
    let (c, log_c) = resumed.into_parts();
    assert_eq!(params_of(&c), params_of(&a));
    assert_eq!(c.buffers(), a.buffers());
    let losses = |l: &TrainLog| l.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
    assert_eq!(losses(&log_c), losses(&log_a));
}

#[test]
fn plateau_stops_early() {
    // a perceptron fitting an exactly representable linear map converges to zero loss
    let mut rng = Rng::new(6);
    let x = Tensor::uniform(&[64, 3], -1.0, 1.0, &mut rng);
    let y = Tensor::new(
        vec![64, 1],
        (0..64).map(|i| 0.5 * x.item(i)[0] - 0.25 * x.item(i)[2] + 0.1).collect(),
    )
    .unwrap();
    let model = Model::build(&ModelSpec::perceptron(3, OutputKind::LinearScalar)).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 2000,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Sgd,
        loss: Loss::Mse,
        ..TrainConfig::default()
    };
    let (_, log) = train(model, (&x, &y), Some((&x, &y)), &cfg).unwrap();
    assert_eq!(log.stop_reason, Some(StopReason::Plateau));
    assert!(log.epochs.len() < 2000);
    let tail = &log.epochs[log.epochs.len() - 6..];
    assert!(tail
        .windows(2)
        .all(|w| (w[1].val_loss.unwrap() - w[0].val_loss.unwrap()).abs() < PLATEAU_EPSILON));
}

#[test]
fn divergence_is_reported() {
    let mut rng = Rng::new(7);
    let x = Tensor::uniform(&[16, 3], 0.0, 100.0, &mut rng);
    let y = Tensor::full(&[16, 1], 1e3);
    let model = Model::build(&ModelSpec::perceptron(3, OutputKind::LinearScalar)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 10.0,
        optimizer: OptimizerKind::Sgd,
        loss: Loss::Mse,
        max_epochs: 200,
        ..TrainConfig::default()
    };
    let err = train(model, (&x, &y), None, &cfg).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(err.to_string().contains("epoch"), "{err}");
}

#[test]
fn small_cnn_learns() {
    let (x, y) = toy_images(32, 8);
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 30,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let (_, log) = train(small_cnn(3), (&x, &y), None, &cfg).unwrap();
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut first: Vec<f64> = log.epochs[..5].iter().map(|e| e.train_loss).collect();
    let mut last: Vec<f64> = log.epochs[log.epochs.len() - 5..].iter().map(|e| e.train_loss).collect();
    assert!(median(&mut last) < median(&mut first));
}

#[test]
fn search_contracts() {
    let (x, y) = toy_images(24, 9);
    let (vx, vy) = toy_images(16, 10);
    let base = ModelSpec::mlp(&[8, 8, 2], &[4], OutputKind::SigmoidScalar);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let space = SearchSpace::default_for(true);
    let (one, best) = hyperparameter_search(&base, &cfg, &space, 1, (&x, &y), (&vx, &vy), 3).unwrap();
    assert_eq!(one.trials.len(), 1);
    assert_eq!(one.best().unwrap().trial, 0);
    assert!(best.is_some());

    let run = || hyperparameter_search(&base, &cfg, &space, 5, (&x, &y), (&vx, &vy), 11).unwrap();
    let (a, best_a) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    let metrics: Vec<f64> = a.ranked().iter().filter_map(|t| t.metric).collect();
    assert!(metrics.windows(2).all(|w| w[0] >= w[1]));
    let mut sorted = metrics.clone();
    sorted.sort_by(f64::total_cmp);
    assert!(a.best().unwrap().metric.unwrap() >= sorted[sorted.len() / 2]);
    let best_model = best_a.unwrap();
    let (_, m) = validation_scores(&best_model, &a.best().unwrap().config.loss, &vx, &vy).unwrap();
    assert_eq!(m, a.best().unwrap().metric);

    // a learning rate far too large makes every trial fail without aborting the search
    let wild = SearchSpace {
        learning_rate: (1e6, 1e7),
        optimizers: vec![OptimizerKind::Sgd],
        losses: vec![Loss::Mse],
        ..space
    };
    let fx = Tensor::uniform(&[24, 3], 0.0, 10.0, &mut Rng::new(1));
    let reg_y = Tensor::full(&[24, 1], 1e3);
    let lin = ModelSpec::perceptron(3, OutputKind::LinearScalar);
    let long = TrainConfig {
        max_epochs: 100,
        ..cfg
    };
    let (failed, none) = hyperparameter_search(&lin, &long, &wild, 2, (&fx, &reg_y), (&fx, &reg_y), 1).unwrap();
    assert!(failed.trials.iter().all(|t| t.status == TrialStatus::Failed));
    assert!(failed.best().is_none() && none.is_none());
    let json = serde_json::to_value(failed.ranked()).unwrap();
    assert_eq!(json[0]["status"], "failed");
}
