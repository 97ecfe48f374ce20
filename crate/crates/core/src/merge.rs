//! Training-free merging of task adapters.
//!
//! The main method averages the per-task updates `B_i·diag(E_i)·A_i` (which works
//! for any mix of ranks), takes the SVD of the average and keeps the shortest
//! prefix of components whose cumulative singular mass reaches `threshold_v`.
//! The baselines are factor-wise averaging ("pre-merge"), the untruncated average
//! ("post-merge") and task arithmetic `λ·Σ Δ_i`.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSet, SetMetadata, SvdLoraAdapter, TargetId};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{retained_mass, select_rank, svd, MassMeasure, Matrix, SvdFactors};

/// Default singular-mass threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.997;

/// Merge strategy.
///
/// `TiesMerging`, `Dare`, `PemComposition` and `MagMax` are listed so callers can
/// name them, but they are not implemented and always return [`Error::Merge`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    /// Average of updates, SVD, singular-mass truncation.
    MedLego,
    /// Component-wise average of `B`, `E`, `A`; needs equal ranks.
    PreMergeAverage,
    /// Average of updates kept at full rank.
    PostMergeFull,
    /// `λ · Σ Δ_i`, `λ = 1/N` unless set.
    TaskArithmetic,
    TiesMerging,
    Dare,
    PemComposition,
    MagMax,
}

impl MergeMethod {
    pub fn is_implemented(self) -> bool {
        matches!(
            self,
            MergeMethod::MedLego
                | MergeMethod::PreMergeAverage
                | MergeMethod::PostMergeFull
                | MergeMethod::TaskArithmetic
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub threshold_v: f64,
    pub max_rank: Option<usize>,
    /// Task-arithmetic scale; `None` means `1/N`.
    pub lambda: Option<f64>,
    pub mass: MassMeasure,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: MergeMethod::MedLego,
            threshold_v: DEFAULT_THRESHOLD,
            max_rank: None,
            lambda: None,
            mass: MassMeasure::Magnitude,
        }
    }
}

impl MergeConfig {
    pub fn with_method(method: MergeMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.method.is_implemented() {
            return Err(Error::Merge(format!("{:?} is not implemented", self.method)));
        }
        if !(self.threshold_v > 0.0 && self.threshold_v <= 1.0) {
            return Err(Error::Parameter(format!(
                "threshold must lie in (0, 1], got {}",
                self.threshold_v
            )));
        }
        if self.max_rank == Some(0) {
            return Err(Error::Parameter("max_rank must be positive".into()));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() {
                return Err(Error::Parameter(format!("lambda must be finite, got {l}")));
            }
        }
        Ok(())
    }
}

/// Audit record for one merged target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub target: TargetId,
    pub input_ranks: Vec<usize>,
    /// Singular values of the combined update before truncation.
    pub spectrum: Vec<f64>,
    pub kept_rank: usize,
    /// Kept share of singular mass; absent for factor-wise averaging.
    pub retained_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub config: MergeConfig,
    pub inputs: Vec<String>,
    pub records: Vec<TargetRecord>,
}

/// Target → dense update, for methods that do not keep a factored form.
pub type DenseDeltas = BTreeMap<TargetId, Matrix>;

fn check_shapes<A: Borrow<SvdLoraAdapter>>(adapters: &[A]) -> Result<(usize, usize)> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::Parameter("nothing to merge".into()))?
        .borrow();
    let shape = (first.d_out(), first.d_in());
    let offending: Vec<String> = adapters
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let a: &SvdLoraAdapter = (*a).borrow();
            (a.d_out(), a.d_in()) != shape
        })
        .map(|(i, a)| format!("input {i} ({})", a.borrow().target()))
        .collect();
    if !offending.is_empty() {
        return Err(Error::Merge(format!(
            "shape mismatch against {}x{}: {}",
            shape.0,
            shape.1,
            offending.join(", ")
        )));
    }
    Ok(shape)
}

/// `Σ scale · B_i·diag(E_i)·A_i`, summed in input order.
fn summed_delta<A: Borrow<SvdLoraAdapter>>(adapters: &[A], scale: f64) -> Result<Matrix> {
    let (m, n) = check_shapes(adapters)?;
    let mut acc = Matrix::zeros(m, n);
    for a in adapters {
        let a = a.borrow();
        let be = a.b().scale_cols(a.e())?.scale(scale);
        be.matmul_acc(a.a(), &mut acc)?;
    }
    Ok(acc)
}

fn factors_to_adapter(target: TargetId, f: SvdFactors) -> Result<SvdLoraAdapter> {
    SvdLoraAdapter::new(target, f.u, f.s, f.v.transpose())
}

/// Merges the adapters of one target according to `cfg`.
pub fn merge_target<A: Borrow<SvdLoraAdapter>>(
    adapters: &[A],
    cfg: &MergeConfig,
) -> Result<(SvdLoraAdapter, TargetRecord)> {
    cfg.validate()?;
    check_shapes(adapters)?;
    let n = adapters.len();
    let target = adapters[0].borrow().target();
    let input_ranks: Vec<usize> = adapters.iter().map(|a| a.borrow().rank()).collect();

    if cfg.method == MergeMethod::PreMergeAverage {
        let merged = baseline_pre_merge(adapters)?;
        let spectrum = svd(&summed_delta(adapters, 1.0 / n as f64)?)?.s;
        let kept_rank = merged.rank();
        return Ok((
            merged,
            TargetRecord {
                target,
                input_ranks,
                spectrum,
                kept_rank,
                retained_mass: None,
            },
        ));
    }

    let scale = match cfg.method {
        MergeMethod::TaskArithmetic => cfg.lambda.unwrap_or(1.0 / n as f64),
        _ => 1.0 / n as f64,
    };
    let full = svd(&summed_delta(adapters, scale)?)?;
    let weights = cfg.mass.weights(&full.s);
    let (v, cap) = match cfg.method {
        MergeMethod::MedLego => (cfg.threshold_v, cfg.max_rank),
        _ => (1.0, None),
    };
    let k = select_rank(&weights, v, cap)?;
    let retained = retained_mass(&weights, k);
    let spectrum = full.s.clone();
    let kept = SvdFactors {
        u: full.u.leading_cols(k),
        s: full.s[..k].to_vec(),
        v: full.v.leading_cols(k),
    };
    Ok((
        factors_to_adapter(target, kept)?,
        TargetRecord {
            target,
            input_ranks,
            spectrum,
            kept_rank: k,
            retained_mass: Some(retained),
        },
    ))
}

fn check_sets(sets: &[AdapterSet]) -> Result<Vec<TargetId>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Parameter("nothing to merge".into()))?;
    let targets: BTreeSet<TargetId> = first.adapters().keys().copied().collect();
    for (i, s) in sets.iter().enumerate().skip(1) {
        if s.signature() != first.signature() {
            return Err(Error::Merge(format!(
                "input {i} was trained on a different backbone ({:?} vs {:?})",
                s.signature(),
                first.signature()
            )));
        }
        let other: BTreeSet<TargetId> = s.adapters().keys().copied().collect();
        if other != targets {
            let missing: Vec<String> = targets
                .symmetric_difference(&other)
                .map(|t| t.to_string())
                .collect();
            return Err(Error::Merge(format!(
                "input {i} covers different targets; unmatched: {}",
                missing.join(", ")
            )));
        }
    }
    Ok(targets.into_iter().collect())
}

/// Merges whole adapter sets target by target. The output carries no head.
pub fn merge_sets(sets: &[AdapterSet], cfg: &MergeConfig) -> Result<(AdapterSet, MergeReport)> {
    merge_sets_with(sets, cfg, Exec::default())
}

pub fn merge_sets_with(
    sets: &[AdapterSet],
    cfg: &MergeConfig,
    exec: Exec,
) -> Result<(AdapterSet, MergeReport)> {
    cfg.validate()?;
    let targets = check_sets(sets)?;
    let merged: Vec<Result<(SvdLoraAdapter, TargetRecord)>> = exec.map(&targets, |t| {
        let group: Vec<&SvdLoraAdapter> = sets.iter().map(|s| &s.adapters()[t]).collect();
        merge_target(&group, cfg)
    });
    let mut adapters = Vec::with_capacity(targets.len());
    let mut records = Vec::with_capacity(targets.len());
    for m in merged {
        let (a, r) = m?;
        adapters.push(a);
        records.push(r);
    }
    let inputs: Vec<String> = sets.iter().map(AdapterSet::digest).collect();
    let metadata = SetMetadata {
        task: sets
            .iter()
            .map(|s| s.metadata.task.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        seed: 0,
        train_config_digest: String::new(),
        inputs: inputs.clone(),
    };
    let set = AdapterSet::new(sets[0].signature().clone(), adapters, None, metadata)?;
    Ok((
        set,
        MergeReport {
            config: cfg.clone(),
            inputs,
            records,
        },
    ))
}

/// Component-wise average of `B`, `E` and `A` across equal-rank adapters.
pub fn baseline_pre_merge<A: Borrow<SvdLoraAdapter>>(adapters: &[A]) -> Result<SvdLoraAdapter> {
    let (m, n) = check_shapes(adapters)?;
    let first = adapters[0].borrow();
    let r = first.rank();
    if let Some((i, a)) = adapters
        .iter()
        .enumerate()
        .find(|(_, a)| {
            let a: &SvdLoraAdapter = (*a).borrow();
            a.rank() != r
        })
    {
        return Err(Error::Merge(format!(
            "factor-wise averaging needs equal ranks: input 0 has rank {r}, input {i} has rank {}",
            Borrow::<SvdLoraAdapter>::borrow(a).rank()
        )));
    }
    let w = 1.0 / adapters.len() as f64;
    let mut b = Matrix::zeros(m, r);
    let mut e = vec![0.0; r];
    let mut am = Matrix::zeros(r, n);
    for a in adapters {
        let a = a.borrow();
        b.axpy(w, a.b())?;
        am.axpy(w, a.a())?;
        for (acc, x) in e.iter_mut().zip(a.e()) {
            *acc += w * x;
        }
    }
    SvdLoraAdapter::new(first.target(), b, e, am)
}

/// Task arithmetic on adapter updates: `λ · Σ_i Δ_i` per target, kept dense.
pub fn baseline_task_arithmetic(sets: &[AdapterSet], lambda: f64) -> Result<DenseDeltas> {
    if !lambda.is_finite() {
        return Err(Error::Parameter(format!("lambda must be finite, got {lambda}")));
    }
    let targets = check_sets(sets)?;
    targets
        .into_iter()
        .map(|t| {
            let group: Vec<&SvdLoraAdapter> = sets.iter().map(|s| &s.adapters()[&t]).collect();
            Ok((t, summed_delta(&group, lambda)?))
        })
        .collect()
}

/// `‖Δ(pre-merge) − (1/N)·Σ Δ_i‖_F`.
pub fn premerge_postmerge_gap<A: Borrow<SvdLoraAdapter>>(adapters: &[A]) -> Result<f64> {
    let pre = baseline_pre_merge(adapters)?.delta();
    let post = summed_delta(adapters, 1.0 / adapters.len() as f64)?;
    Ok(pre.sub(&post)?.frobenius_norm())
}

/// Dense updates of a factored set.
pub fn dense_deltas(set: &AdapterSet) -> DenseDeltas {
    set.adapters().iter().map(|(t, a)| (*t, a.delta())).collect()
}
