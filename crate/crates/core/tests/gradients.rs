use medlego::adapter::{random_adapter, AdapterSet, Head, SetMetadata, TargetId};
use medlego::train::{generate_task, BackboneConfig, NoUpdates, TaskSpec, TinyModel};

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn instance(seed: u64, classes: usize) -> (TinyModel, AdapterSet, medlego::train::Batch) {
    let model = TinyModel::new(BackboneConfig::with_seed(seed)).unwrap();
    let adapters = TargetId::all(2)
        .into_iter()
        .map(|t| random_adapter(t, 32, 32, 4, seed * 100 + t.layer as u64 * 2 + (t.slot as u64)).unwrap());
    let set = AdapterSet::new(
        model.signature(),
        adapters,
        Some(Head::init(32, classes, 0.3, seed + 11)),
        SetMetadata::default(),
    )
    .unwrap();
    let task = generate_task(&TaskSpec::new("fd", seed + 30, classes)).unwrap();
    let batch = task.train.batch(&[0, 1, 2, 3, 4, 5]);
    (model, set, batch)
}

fn loss_of(model: &TinyModel, set: &AdapterSet, batch: &medlego::train::Batch, reg: f64) -> f64 {
    model.loss_and_gradients(set, batch, reg).unwrap().0
}

/// Relative error `‖g − fd‖ / max(‖fd‖, tiny)` for every trainable block.
fn block_errors(seed: u64, classes: usize, reg: f64) -> Vec<(usize, f64)> {
    let (model, mut set, batch) = instance(seed, classes);
    let (_, grads) = model.loss_and_gradients(&set, &batch, reg).unwrap();
    let analytic: Vec<Vec<f64>> = grads.blocks().iter().map(|b| b.to_vec()).collect();
    let n_blocks = analytic.len();
    let mut out = Vec::new();
    for bi in 0..n_blocks {
        let len = analytic[bi].len();
        let mut fd = vec![0.0; len];
        for j in 0..len {
            let orig = set.trainable_blocks_mut()[bi][j];
            set.trainable_blocks_mut()[bi][j] = orig + EPS;
            let up = loss_of(&model, &set, &batch, reg);
            set.trainable_blocks_mut()[bi][j] = orig - EPS;
            let down = loss_of(&model, &set, &batch, reg);
            set.trainable_blocks_mut()[bi][j] = orig;
            fd[j] = (up - down) / (2.0 * EPS);
        }
        let diff: f64 = analytic[bi].iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push((bi, diff / norm.max(1e-12)));
    }
    out
}

#[test]
fn analytic_gradients_match_central_differences() {
    for (seed, classes, reg) in [(1, 3, 0.1), (2, 5, 0.0), (3, 2, 0.1)] {
        for (block, err) in block_errors(seed, classes, reg) {
            assert!(err < REL_TOL, "seed {seed} block {block}: relative error {err:e}");
        }
    }
}

#[test]
fn zero_init_has_nonzero_e_gradient() {
    let model = TinyModel::new(BackboneConfig::with_seed(5)).unwrap();
    let set = AdapterSet::fresh(model.signature(), 4, 0.02, 9, Some(Head::init(32, 3, 0.1, 2)), SetMetadata::default()).unwrap();
    let task = generate_task(&TaskSpec::new("z", 4, 3)).unwrap();
    let batch = task.train.batch(&[0, 1, 2, 3]);
    let (loss, grads) = model.loss_and_gradients(&set, &batch, 0.0).unwrap();
    let base = model.logits_with(&NoUpdates, set.head().unwrap(), &batch).unwrap();
    let base_loss = medlego::train::loss(&base, &batch.labels, &set, 0.0).unwrap();
    assert!((loss - base_loss).abs() < 1e-12);
    let e_norm: f64 = grads.adapters.values().flat_map(|g| g.e.iter()).map(|v| v * v).sum::<f64>().sqrt();
    assert!(e_norm > 0.0);
}

#[test]
fn regularizer_gradient_vanishes_at_canonical_factors() {
    let model = TinyModel::new(BackboneConfig::with_seed(6)).unwrap();
    let (_, set, batch) = instance(6, 3);
    let canon = set.canonicalize();
    let (_, with_reg) = model.loss_and_gradients(&canon, &batch, 0.1).unwrap();
    let (_, no_reg) = model.loss_and_gradients(&canon, &batch, 0.0).unwrap();
    for (t, g) in &with_reg.adapters {
        let h = &no_reg.adapters[t];
        assert!(g.b.sub(&h.b).unwrap().frobenius_norm() < 1e-12, "{t}");
        assert!(g.a.sub(&h.a).unwrap().frobenius_norm() < 1e-12, "{t}");
    }
}
