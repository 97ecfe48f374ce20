//! SVD-structured low-rank adapters: `h = W·x + B·diag(E)·A·x`.
//!
//! `B` (d_m×r) and `A` (r×d_n) play the role of left/right singular vectors and
//! `E` holds the singular values. Fresh adapters start with `E = 0`, so the update
//! is exactly zero until training moves `E`. During training the factors drift
//! away from orthonormality and `E` may change sign; [`SvdLoraAdapter::canonicalize`]
//! restores the exact SVD form at save and merge boundaries.

use std::collections::BTreeMap;
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::rng;

/// Default standard deviation for the Gaussian init of `B` and `A`.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Projection matrix an adapter augments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    Q,
    V,
}

impl Slot {
    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Q => "q",
            Slot::V => "v",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TargetId {
    pub layer: usize,
    pub slot: Slot,
}

impl TargetId {
    pub fn new(layer: usize, slot: Slot) -> Self {
        Self { layer, slot }
    }

    /// Q and V of every layer, in sorted order.
    pub fn all(layers: usize) -> Vec<TargetId> {
        (0..layers)
            .flat_map(|l| [TargetId::new(l, Slot::Q), TargetId::new(l, Slot::V)])
            .collect()
    }

    fn index(self) -> u64 {
        self.layer as u64 * 2 + matches!(self.slot, Slot::V) as u64
    }
}

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.slot.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvdLoraAdapter {
    target: TargetId,
    b: Matrix,
    e: Vec<f64>,
    a: Matrix,
}

impl SvdLoraAdapter {
    pub fn new(target: TargetId, b: Matrix, e: Vec<f64>, a: Matrix) -> Result<Self> {
        let r = e.len();
        if r == 0 {
            return Err(Error::Parameter(format!("{target}: rank must be positive")));
        }
        if b.cols() != r || a.rows() != r {
            return Err(Error::Dimension {
                op: "adapter factors",
                left: b.shape(),
                right: a.shape(),
            });
        }
        if r > b.rows().min(a.cols()) {
            return Err(Error::Parameter(format!(
                "{target}: rank {r} exceeds min({}, {})",
                b.rows(),
                a.cols()
            )));
        }
        if !b.is_finite() || !a.is_finite() || e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("adapter {target}")));
        }
        Ok(Self { target, b, e, a })
    }

    pub fn target(&self) -> TargetId {
        self.target
    }

    pub fn rank(&self) -> usize {
        self.e.len()
    }

    /// Output dimension `d_m`.
    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `d_n`.
    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn with_target(mut self, target: TargetId) -> Self {
        self.target = target;
        self
    }

    /// Mutable views of `(B, E, A)` in that order.
    pub fn params_mut(&mut self) -> [&mut [f64]; 3] {
        [self.b.data_mut(), &mut self.e, self.a.data_mut()]
    }

    /// `B · diag(E) · A`, shape `d_m × d_n`.
    pub fn delta(&self) -> Matrix {
        self.b
            .scale_cols(&self.e)
            .and_then(|be| be.matmul(&self.a))
            .expect("adapter shapes are validated at construction")
    }

    /// `W·x + B·diag(E)·(A·x)` for column-major inputs `x: d_n × batch`,
    /// without forming the `d_m × d_n` update.
    pub fn apply(&self, w: &Matrix, x: &Matrix) -> Result<Matrix> {
        let (out, largest) = self.apply_traced(w, x)?;
        debug_assert!(
            largest <= self.d_out().max(self.d_in()) * self.rank().max(x.cols()),
            "apply materialized a {largest}-element temporary"
        );
        Ok(out)
    }

    /// Same as [`apply`](Self::apply), also reporting the largest temporary it built.
    pub(crate) fn apply_traced(&self, w: &Matrix, x: &Matrix) -> Result<(Matrix, usize)> {
        if w.shape() != (self.d_out(), self.d_in()) {
            return Err(Error::Dimension {
                op: "apply weight",
                left: w.shape(),
                right: (self.d_out(), self.d_in()),
            });
        }
        if x.rows() != self.d_in() {
            return Err(Error::Dimension {
                op: "apply input",
                left: w.shape(),
                right: x.shape(),
            });
        }
        let ax = self.a.matmul(x)?;
        let eax = ax.scale_rows(&self.e)?;
        let mut out = w.matmul(x)?;
        self.b.matmul_acc(&eax, &mut out)?;
        let largest = ax.data().len().max(eax.data().len());
        Ok((out, largest))
    }

    /// Row-major variant used by the model: `x · Wᵀ + ((x·Aᵀ)·diag(E))·Bᵀ` where
    /// `w_t` is the precomputed `Wᵀ` and `x` holds one token per row. Also returns
    /// `x·Aᵀ`, which backpropagation needs.
    pub(crate) fn apply_rows(&self, w_t: &Matrix, x: &Matrix) -> (Matrix, Matrix) {
        let xa = x.matmul_nt(&self.a).expect("adapter input width");
        let xae = xa.scale_cols(&self.e).expect("rank");
        let mut out = x.matmul(w_t).expect("weight width");
        xae.matmul_nt(&self.b)
            .and_then(|upd| out.add_assign(&upd))
            .expect("adapter output width");
        (out, xa)
    }

    /// `‖BᵀB − I‖²_F + ‖AAᵀ − I‖²_F`.
    pub fn orthogonality_penalty(&self) -> f64 {
        let rb = self.b.gram_residual();
        let ra = self.a.transpose().gram_residual();
        rb * rb + ra * ra
    }

    /// Exact SVD form of the same update: orthonormal `B` columns and `A` rows,
    /// non-negative non-increasing `E`, zero singular values dropped (rank ≥ 1).
    pub fn canonicalize(&self) -> SvdLoraAdapter {
        let fb = svd(&self.b).expect("finite factors");
        let fa = svd(&self.a.transpose()).expect("finite factors");
        // B·diag(E)·A = Ub · [diag(Sb)·Vbᵀ·diag(E)·Va·diag(Sa)] · Uaᵀ
        let left = fb.v.transpose().scale_rows(&fb.s).expect("rank");
        let right = fa.v.scale_cols(&fa.s).expect("rank");
        let core = left
            .scale_cols(&self.e)
            .and_then(|l| l.matmul(&right))
            .expect("rank");
        let fc = svd(&core).expect("finite core");
        let s_max = fc.s[0];
        let keep = fc
            .s
            .iter()
            .take_while(|&&s| s > s_max * 1e-12 && s > 0.0)
            .count()
            .max(1);
        let b = fb.u.matmul(&fc.u.leading_cols(keep)).expect("rank");
        let a = fa
            .u
            .matmul(&fc.v.leading_cols(keep))
            .expect("rank")
            .transpose();
        SvdLoraAdapter {
            target: self.target,
            b,
            e: fc.s[..keep].to_vec(),
            a,
        }
    }

    /// Whether the adapter satisfies the canonical-form invariants at `tol`.
    pub fn is_canonical(&self, tol: f64) -> bool {
        self.e.iter().all(|&x| x >= 0.0)
            && self.e.windows(2).all(|w| w[0] >= w[1])
            && self.b.gram_residual() <= tol
            && self.a.transpose().gram_residual() <= tol
    }

    pub fn param_count(&self) -> usize {
        self.b.data().len() + self.e.len() + self.a.data().len()
    }
}

/// Fresh adapter: `E = 0`, `B` and `A` i.i.d. `N(0, std²)` from `seed`.
pub fn init_adapter_with_std(
    target: TargetId,
    d_m: usize,
    d_n: usize,
    r: usize,
    std: f64,
    seed: u64,
) -> Result<SvdLoraAdapter> {
    if r == 0 || r > d_m.min(d_n) {
        return Err(Error::Parameter(format!(
            "rank {r} must lie in 1..=min({d_m}, {d_n})"
        )));
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Parameter(format!("init std must be positive, got {std}")));
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = rng::stream(seed, 0);
    let b = Matrix::from_fn(d_m, r, |_, _| normal.sample(&mut rng));
    let a = Matrix::from_fn(r, d_n, |_, _| normal.sample(&mut rng));
    SvdLoraAdapter::new(target, b, vec![0.0; r], a)
}

pub fn init_adapter(
    target: TargetId,
    d_m: usize,
    d_n: usize,
    r: usize,
    seed: u64,
) -> Result<SvdLoraAdapter> {
    init_adapter_with_std(target, d_m, d_n, r, DEFAULT_INIT_STD, seed)
}

/// Adapter with `N(0, 1/d)` factors and `N(0, 1)` singular weights; used by the
/// merge demonstrations where a non-zero update is needed without training.
pub fn random_adapter(
    target: TargetId,
    d_m: usize,
    d_n: usize,
    r: usize,
    seed: u64,
) -> Result<SvdLoraAdapter> {
    if r == 0 || r > d_m.min(d_n) {
        return Err(Error::Parameter(format!(
            "rank {r} must lie in 1..=min({d_m}, {d_n})"
        )));
    }
    let mut rng = rng::stream(seed, 1);
    let fb = Normal::new(0.0, 1.0 / (d_m as f64).sqrt()).expect("std");
    let fa = Normal::new(0.0, 1.0 / (d_n as f64).sqrt()).expect("std");
    let unit = Normal::new(0.0, 1.0).expect("std");
    let b = Matrix::from_fn(d_m, r, |_, _| fb.sample(&mut rng));
    let e = (0..r).map(|_| unit.sample(&mut rng)).collect();
    let a = Matrix::from_fn(r, d_n, |_, _| fa.sample(&mut rng));
    SvdLoraAdapter::new(target, b, e, a)
}

/// Backbone identity an adapter set was trained against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSignature {
    pub embed_dim: usize,
    pub layers: usize,
    pub config_hash: String,
}

/// Task-specific linear classifier on pooled features: `logits = f·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.cols() != bias.len() {
            return Err(Error::Dimension {
                op: "head",
                left: weight.shape(),
                right: (1, bias.len()),
            });
        }
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("head".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, classes),
            bias: vec![0.0; classes],
        }
    }

    pub fn init(dim: usize, classes: usize, std: f64, seed: u64) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut rng = rng::stream(seed, 2);
        Self {
            weight: Matrix::from_fn(dim, classes, |_, _| normal.sample(&mut rng)),
            bias: vec![0.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetMetadata {
    pub task: String,
    pub seed: u64,
    pub train_config_digest: String,
    /// Digests of the sets a merged set was built from; empty for trained sets.
    #[serde(default)]
    pub inputs: Vec<String>,
}

/// All adapters for one task, its classifier head and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    signature: ModelSignature,
    adapters: BTreeMap<TargetId, SvdLoraAdapter>,
    head: Option<Head>,
    pub metadata: SetMetadata,
}

impl AdapterSet {
    pub fn new(
        signature: ModelSignature,
        adapters: impl IntoIterator<Item = SvdLoraAdapter>,
        head: Option<Head>,
        metadata: SetMetadata,
    ) -> Result<Self> {
        let d = signature.embed_dim;
        let mut map = BTreeMap::new();
        for a in adapters {
            let t = a.target();
            if t.layer >= signature.layers {
                return Err(Error::Model(format!(
                    "{t} is outside a {}-layer model",
                    signature.layers
                )));
            }
            if a.d_out() != d || a.d_in() != d {
                return Err(Error::Model(format!(
                    "{t} has shape {}x{}, model needs {d}x{d}",
                    a.d_out(),
                    a.d_in()
                )));
            }
            if map.insert(t, a).is_some() {
                return Err(Error::Model(format!("duplicate adapter for {t}")));
            }
        }
        if let Some(h) = &head {
            if h.weight.rows() != d {
                return Err(Error::Model(format!(
                    "head expects {} features, model has {d}",
                    h.weight.rows()
                )));
            }
        }
        Ok(Self {
            signature,
            adapters: map,
            head,
            metadata,
        })
    }

    /// Fresh adapters on Q and V of every layer, seeded per target from `seed`.
    pub fn fresh(
        signature: ModelSignature,
        rank: usize,
        init_std: f64,
        seed: u64,
        head: Option<Head>,
        metadata: SetMetadata,
    ) -> Result<Self> {
        let d = signature.embed_dim;
        let adapters = TargetId::all(signature.layers)
            .into_iter()
            .map(|t| init_adapter_with_std(t, d, d, rank, init_std, rng::derive_seed(seed, t.index())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(signature, adapters, head, metadata)
    }

    pub fn signature(&self) -> &ModelSignature {
        &self.signature
    }

    pub fn adapters(&self) -> &BTreeMap<TargetId, SvdLoraAdapter> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut SvdLoraAdapter> {
        self.adapters.values_mut()
    }

    pub fn get(&self, target: TargetId) -> Option<&SvdLoraAdapter> {
        self.adapters.get(&target)
    }

    pub fn targets(&self) -> Vec<TargetId> {
        self.adapters.keys().copied().collect()
    }

    pub fn head(&self) -> Option<&Head> {
        self.head.as_ref()
    }

    pub fn head_mut(&mut self) -> Option<&mut Head> {
        self.head.as_mut()
    }

    pub fn with_head(mut self, head: Option<Head>) -> Result<Self> {
        if let Some(h) = &head {
            if h.weight.rows() != self.signature.embed_dim {
                return Err(Error::Model(format!(
                    "head expects {} features, model has {}",
                    h.weight.rows(),
                    self.signature.embed_dim
                )));
            }
        }
        self.head = head;
        Ok(self)
    }

    /// Every trainable buffer: per target (sorted) `B`, `E`, `A`, then head weight and bias.
    pub fn trainable_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(self.adapters.len() * 3 + 2);
        for a in self.adapters.values_mut() {
            out.extend(a.params_mut());
        }
        if let Some(h) = self.head.as_mut() {
            out.push(h.weight.data_mut());
            out.push(&mut h.bias);
        }
        out
    }

    pub fn canonicalize(&self) -> AdapterSet {
        AdapterSet {
            signature: self.signature.clone(),
            adapters: self
                .adapters
                .iter()
                .map(|(t, a)| (*t, a.canonicalize()))
                .collect(),
            head: self.head.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// SHA-256 of the serialized file image.
    pub fn digest(&self) -> String {
        crate::io::digest(self)
    }
}

/// Adapter parameters (heads excluded) and their share of `base_param_count`.
pub fn param_count(set: &AdapterSet, base_param_count: usize) -> Result<(usize, f64)> {
    param_count_of(set.adapters().values().map(|a| (a.d_out(), a.d_in(), a.rank())), base_param_count)
}

/// [`param_count`] on bare `(d_m, d_n, r)` geometries.
pub fn param_count_of(
    shapes: impl IntoIterator<Item = (usize, usize, usize)>,
    base_param_count: usize,
) -> Result<(usize, f64)> {
    if base_param_count == 0 {
        return Err(Error::Parameter("base parameter count must be positive".into()));
    }
    let count: usize = shapes
        .into_iter()
        .map(|(d_m, d_n, r)| d_m * r + r + r * d_n)
        .sum();
    Ok((count, count as f64 / base_param_count as f64))
}
