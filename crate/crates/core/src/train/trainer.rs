use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{Split, TaskData};
use super::model::{TinyModel, Updates};
use super::optim::{Adam, AdamConfig};
use crate::adapter::{AdapterSet, Head, SetMetadata, DEFAULT_INIT_STD};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub reg: f64,
    pub rank: usize,
    pub init_std: f64,
    pub head_init_std: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 100,
            batch_size: 32,
            reg: 0.1,
            rank: 4,
            init_std: DEFAULT_INIT_STD,
            head_init_std: DEFAULT_INIT_STD,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.init_std, self.head_init_std, self.adam.eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Parameter(
                "lr, init_std, head_init_std and eps must be positive".into(),
            ));
        }
        if !(self.reg.is_finite() && self.reg >= 0.0) {
            return Err(Error::Parameter(format!("reg must be >= 0, got {}", self.reg)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.rank == 0 {
            return Err(Error::Parameter("epochs, batch_size and rank must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Mean over adapters of `sqrt(‖BᵀB − I‖²_F + ‖AAᵀ − I‖²_F)` after the epoch.
    pub ortho_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    /// Canonicalized best-validation checkpoint, head included.
    pub set: AdapterSet,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
}

/// Fresh adapters on every target plus a head, all seeded from `cfg.seed`.
pub fn fresh_set(model: &TinyModel, task: &TaskData, cfg: &TrainConfig) -> Result<AdapterSet> {
    cfg.validate()?;
    let head = fresh_head(model, task, cfg);
    AdapterSet::fresh(
        model.signature(),
        cfg.rank,
        cfg.init_std,
        cfg.seed,
        Some(head),
        metadata(task, cfg),
    )
}

fn fresh_head(model: &TinyModel, task: &TaskData, cfg: &TrainConfig) -> Head {
    Head::init(
        model.embed_dim(),
        task.spec.num_classes,
        cfg.head_init_std,
        rng::derive_seed(cfg.seed, 0x4845_4144),
    )
}

fn metadata(task: &TaskData, cfg: &TrainConfig) -> SetMetadata {
    SetMetadata {
        task: task.spec.name.clone(),
        seed: cfg.seed,
        train_config_digest: cfg.digest(),
        inputs: Vec::new(),
    }
}

pub fn train_adapter(model: &TinyModel, task: &TaskData, cfg: &TrainConfig) -> Result<TrainResult> {
    finetune_from(model, None, task, cfg)
}

/// Trains starting from `init` (fresh adapters when `None`). An init without a
/// head gets a fresh one drawn from the run seed.
pub fn finetune_from(
    model: &TinyModel,
    init: Option<&AdapterSet>,
    task: &TaskData,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if task.spec.dim != model.embed_dim() {
        return Err(Error::Model(format!(
            "task dim {} does not match backbone width {}",
            task.spec.dim,
            model.embed_dim()
        )));
    }
    let mut set = match init {
        None => fresh_set(model, task, cfg)?,
        Some(init) => {
            model.check_signature(init.signature())?;
            let head = match init.head() {
                Some(h) if h.num_classes() == task.spec.num_classes => h.clone(),
                Some(h) => {
                    return Err(Error::Model(format!(
                        "init head has {} classes, task has {}",
                        h.num_classes(),
                        task.spec.num_classes
                    )))
                }
                None => fresh_head(model, task, cfg),
            };
            let mut set = init.clone().with_head(Some(head))?;
            set.metadata = metadata(task, cfg);
            set
        }
    };

    let sizes: Vec<usize> = set.trainable_blocks_mut().iter().map(|b| b.len()).collect();
    let mut opt = Adam::new(cfg.lr, cfg.adam, &sizes);
    let mut order_rng = rng::stream(rng::derive_seed(cfg.seed, 0x5348_5546), 30);
    let mut order: Vec<usize> = (0..task.train.len()).collect();

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, AdapterSet)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = task.train.batch(idx);
            let (loss, grads) = model.loss_and_gradients(&set, &batch, cfg.reg)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, step, loss });
            }
            total += loss * idx.len() as f64;
            seen += idx.len();
            let g = grads.blocks();
            opt.step(&mut set.trainable_blocks_mut(), &g);
        }
        let head = set.head().expect("training set keeps its head");
        let val_acc = evaluate(model, &set, head, &task.val)?;
        let n = set.adapters().len().max(1) as f64;
        let ortho_residual = set
            .adapters()
            .values()
            .map(|a| a.orthogonality_penalty().sqrt())
            .sum::<f64>()
            / n;
        curve.push(EpochRecord {
            epoch,
            train_loss: total / seen as f64,
            val_acc,
            ortho_residual,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, set.clone()));
        }
    }

    let (best_epoch, best_val_acc, best_set) = best.expect("at least one epoch");
    let set = best_set.canonicalize();
    let head = set.head().expect("training set keeps its head");
    let test_acc = evaluate(model, &set, head, &task.test)?;
    Ok(TrainResult {
        set,
        curve,
        best_epoch,
        best_val_acc,
        test_acc,
    })
}

/// Fraction of samples whose argmax logit (lowest index on ties) is the label.
pub fn evaluate<U: Updates + ?Sized>(model: &TinyModel, updates: &U, head: &Head, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for batch in split.chunks(256) {
        let logits = model.logits_with(updates, head, &batch)?;
        correct += batch
            .labels
            .iter()
            .enumerate()
            .filter(|&(s, &y)| argmax(logits.row(s)) == y)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// First epoch (1-based) whose validation accuracy reaches `threshold`.
pub fn epochs_to_reach(curve: &[EpochRecord], threshold: f64) -> Option<usize> {
    curve.iter().find(|r| r.val_acc >= threshold).map(|r| r.epoch)
}
