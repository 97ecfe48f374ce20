mod common;

use medlego::adapter::{AdapterSet, Head, SetMetadata, TargetId};
use medlego::linalg::Matrix;
use medlego::train::{
    evaluate, finetune_from, forward, fresh_set, generate_task, loss, regularizer, train_adapter, BackboneConfig, Batch,
    ClusterGeometry, NoUpdates, Split, TaskSpec, TinyModel, TrainConfig,
};
use medlego::Error;

fn short(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::with_seed(seed)
    }
}

fn small_task(seed: u64, classes: usize) -> medlego::train::TaskData {
    let mut spec = TaskSpec::new(format!("t{seed}"), seed, classes);
    spec.train_size = 128;
    spec.val_size = 64;
    spec.test_size = 64;
    generate_task(&spec).unwrap()
}

/// Closed-form two-class LDA on pooled raw features, trained on train, scored on test.
fn lda_accuracy(train: &Split, test: &Split) -> f64 {
    let ftr = train.pooled();
    let fte = test.pooled();
    let d = ftr.cols();
    let mut mu = [vec![0.0; d], vec![0.0; d]];
    let mut n = [0.0; 2];
    for (i, &y) in train.labels.iter().enumerate() {
        n[y] += 1.0;
        for j in 0..d {
            mu[y][j] += ftr[(i, j)];
        }
    }
    for y in 0..2 {
        mu[y].iter_mut().for_each(|v| *v /= n[y]);
    }
    let mut cov = vec![vec![0.0; d]; d];
    for (i, &y) in train.labels.iter().enumerate() {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (ftr[(i, a)] - mu[y][a]) * (ftr[(i, b)] - mu[y][b]) / train.len() as f64;
            }
        }
    }
    for (a, row) in cov.iter_mut().enumerate() {
        row[a] += 1e-6;
    }
    // Solve cov·w = mu1 − mu0 by Gauss-Jordan elimination.
    let mut aug: Vec<Vec<f64>> = cov
        .iter()
        .enumerate()
        .map(|(a, row)| {
            let mut r = row.clone();
            r.push(mu[1][a] - mu[0][a]);
            r
        })
        .collect();
    for c in 0..d {
        let p = (c..d).max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs())).unwrap();
        aug.swap(c, p);
        let piv = aug[c][c];
        aug[c].iter_mut().for_each(|v| *v /= piv);
        for r in 0..d {
            if r != c {
                let f = aug[r][c];
                let pivot_row = aug[c].clone();
                aug[r].iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    let w: Vec<f64> = aug.iter().map(|r| r[d]).collect();
    let mid: Vec<f64> = (0..d).map(|j| 0.5 * (mu[0][j] + mu[1][j])).collect();
    let correct = test
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let s: f64 = (0..d).map(|j| w[j] * (fte[(i, j)] - mid[j])).sum();
            (s > 0.0) as usize == y
        })
        .count();
    correct as f64 / test.len() as f64
}

fn separated_task() -> medlego::train::TaskData {
    let g = ClusterGeometry {
        separation: 10.0,
        ..ClusterGeometry::default()
    };
    generate_task(&TaskSpec::new("wide", 42, 2).with_geometry(g)).unwrap()
}

#[test]
fn linear_probe_oracle_on_separated_task() {
    let t = separated_task();
    let acc = lda_accuracy(&t.train, &t.test);
    assert!(acc >= 0.95, "LDA accuracy {acc}");
}

#[test]
fn separated_task_trains_to_high_accuracy() {
    let model = TinyModel::new(BackboneConfig::default()).unwrap();
    let t = separated_task();
    let r = train_adapter(&model, &t, &TrainConfig::with_seed(1)).unwrap();
    assert!(r.test_acc >= 0.9, "test accuracy {}", r.test_acc);
    assert_eq!(r.curve.len(), 100);
    // Regularization pulls factors toward orthonormality.
    assert!(r.curve.last().unwrap().ortho_residual < r.curve[0].ortho_residual);
}

#[test]
fn training_is_deterministic_and_leaves_backbone_untouched() {
    let model = TinyModel::new(BackboneConfig::with_seed(3)).unwrap();
    let before = model.weights_digest();
    let t = small_task(5, 3);
    let a = train_adapter(&model, &t, &short(9, 4)).unwrap();
    let b = train_adapter(&model, &t, &short(9, 4)).unwrap();
    let bits = |r: &medlego::train::TrainResult| r.curve.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.set, b.set);
    assert_ne!(bits(&a), bits(&train_adapter(&model, &t, &short(10, 4)).unwrap()));
    assert_eq!(model.weights_digest(), before);
}

#[test]
fn recorded_test_accuracy_is_reproducible() {
    let model = TinyModel::new(BackboneConfig::default()).unwrap();
    let t = small_task(6, 2);
    let r = train_adapter(&model, &t, &short(2, 5)).unwrap();
    let again = evaluate(&model, &r.set, r.set.head().unwrap(), &t.test).unwrap();
    assert!((again - r.test_acc).abs() <= 1e-12);
    assert!(r.set.adapters().values().all(|a| a.is_canonical(1e-9)));
    assert!(r.best_epoch >= 1 && r.best_epoch <= 5);
    assert_eq!(r.best_val_acc, r.curve[r.best_epoch - 1].val_acc);
}

#[test]
fn finetune_from_fresh_is_train_adapter() {
    let model = TinyModel::new(BackboneConfig::default()).unwrap();
    let t = small_task(7, 2);
    let cfg = short(4, 3);
    let fresh = fresh_set(&model, &t, &cfg).unwrap();
    let a = finetune_from(&model, Some(&fresh), &t, &cfg).unwrap();
    let b = train_adapter(&model, &t, &cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.test_acc, b.test_acc);
}

#[test]
fn headless_init_gets_a_fresh_head_and_any_rank() {
    let model = TinyModel::new(BackboneConfig::default()).unwrap();
    let t = small_task(8, 4);
    let init = AdapterSet::fresh(model.signature(), 7, 0.02, 1, None, SetMetadata::default()).unwrap();
    let r = finetune_from(&model, Some(&init), &t, &short(1, 2)).unwrap();
    assert_eq!(r.set.head().unwrap().num_classes(), 4);
    assert_eq!(r.curve.len(), 2);

    let wrong = init.with_head(Some(Head::zeros(32, 2))).unwrap();
    assert!(matches!(finetune_from(&model, Some(&wrong), &t, &short(1, 1)), Err(Error::Model(_))));
}

#[test]
fn diverging_run_reports_context() {
    let model = TinyModel::new(BackboneConfig::default()).unwrap();
    let t = small_task(9, 2);
    let cfg = TrainConfig {
        lr: 1e200,
        epochs: 3,
        ..TrainConfig::default()
    };
    match train_adapter(&model, &t, &cfg) {
        Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn signature_mismatch_is_rejected() {
    let model = TinyModel::new(BackboneConfig::with_seed(1)).unwrap();
    let other = TinyModel::new(BackboneConfig::with_seed(2)).unwrap();
    let t = small_task(10, 2);
    let set = fresh_set(&other, &t, &short(0, 1)).unwrap();
    assert!(matches!(forward(&model, &set, &t.val.batch(&[0])), Err(Error::Model(_))));
    assert!(matches!(finetune_from(&model, Some(&set), &t, &short(0, 1)), Err(Error::Model(_))));
}

#[test]
fn evaluation_contracts() {
    let model = TinyModel::new(BackboneConfig::default()).unwrap();
    let t = small_task(11, 2);
    // Zero head: every logit ties, so class 0 is always predicted.
    let zero = Head::zeros(32, 2);
    let acc = evaluate(&model, &NoUpdates, &zero, &t.test).unwrap();
    let class0 = t.test.labels.iter().filter(|&&y| y == 0).count() as f64 / t.test.len() as f64;
    assert_eq!(acc, class0);

    let empty = Split {
        tokens: Matrix::zeros(0, 32),
        labels: vec![],
        seq_len: 8,
    };
    assert!(matches!(evaluate(&model, &NoUpdates, &zero, &empty), Err(Error::Data(_))));
}

#[test]
fn perfect_logits_give_full_accuracy_and_low_loss() {
    let sig = TinyModel::new(BackboneConfig::default()).unwrap().signature();
    let set = AdapterSet::new(sig, [], None, SetMetadata::default()).unwrap();
    let labels = vec![0, 2, 1, 2];
    let logits = Matrix::from_fn(4, 3, |i, j| if labels[i] == j { 10.0 } else { 0.0 });
    let l = loss(&logits, &labels, &set, 0.0).unwrap();
    let want = (1.0 + 2.0 * (-10f64).exp()).ln();
    assert!((l - want).abs() < 1e-12);
}

#[test]
fn regularizer_matches_elementwise_expansion() {
    let model = TinyModel::new(BackboneConfig::default()).unwrap();
    let mut r = common::rng(3);
    let adapters: Vec<_> = TargetId::all(2).into_iter().map(|t| common::messy_adapter(t, 32, 4, &mut r)).collect();
    let set = AdapterSet::new(model.signature(), adapters.clone(), None, SetMetadata::default()).unwrap();
    let mut want = 0.0;
    for a in &adapters {
        let (b, aa) = (a.b(), a.a());
        for i in 0..4 {
            for j in 0..4 {
                let btb: f64 = (0..32).map(|k| b[(k, i)] * b[(k, j)]).sum::<f64>() - if i == j { 1.0 } else { 0.0 };
                let aat: f64 = (0..32).map(|k| aa[(i, k)] * aa[(j, k)]).sum::<f64>() - if i == j { 1.0 } else { 0.0 };
                want += btb * btb + aat * aat;
            }
        }
    }
    assert!((regularizer(&set) - want).abs() <= 1e-12 * want);
    assert!(regularizer(&set.canonicalize()) < 1e-25);
}

#[test]
fn fresh_adapters_match_backbone_on_random_batches() {
    let model = TinyModel::new(BackboneConfig::with_seed(12)).unwrap();
    let t = small_task(12, 3);
    let set = fresh_set(&model, &t, &short(5, 1)).unwrap();
    let mut r = common::rng(12);
    for _ in 0..3 {
        let b = Batch {
            tokens: common::gaussian_matrix(6 * 8, 32, 5.0, &mut r),
            labels: vec![0; 6],
            seq_len: 8,
        };
        let x = forward(&model, &set, &b).unwrap();
        let y = model.logits_with(&NoUpdates, set.head().unwrap(), &b).unwrap();
        assert!(x.sub(&y).unwrap().data().iter().all(|d| d.abs() <= 1e-12));
    }
}
