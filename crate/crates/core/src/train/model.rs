//! Frozen toy transformer with exact reverse-mode gradients for the adapters and head.
//!
//! Per layer (tokens as rows, no normalization):
//!
//! ```text
//! Q = X·W_Qᵀ + ΔQ(X)    K = X·W_Kᵀ    V = X·W_Vᵀ + ΔV(X)
//! Z = softmax(Q·Kᵀ/√d)·V                 (per sequence)
//! H = X + Z·W_Oᵀ
//! X' = H + gelu(H·W_1ᵀ + b_1)·W_2ᵀ + b_2
//! ```
//!
//! followed by mean pooling over tokens and the task head `f·W + b`.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::Batch;
use crate::adapter::{AdapterSet, Head, ModelSignature, Slot, SvdLoraAdapter, TargetId};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::merge::DenseDeltas;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            layers: 2,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Frozen parameter count: attention `4d²` plus MLP `2·h·d + h + d` per layer.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = d * self.mlp_ratio;
        self.layers * (4 * d * d + 2 * h * d + h + d)
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Weight kept in both layouts: `w` (out × in) and `wt = wᵀ`.
#[derive(Clone, Debug, PartialEq)]
struct Frozen {
    w: Matrix,
    wt: Matrix,
}

impl Frozen {
    fn random(out: usize, inp: usize, std: f64, rng: &mut impl rand::Rng) -> Self {
        let n = Normal::new(0.0, std).expect("positive std");
        let w = Matrix::from_fn(out, inp, |_, _| n.sample(rng));
        let wt = w.transpose();
        Self { w, wt }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    wq: Frozen,
    wk: Frozen,
    wv: Frozen,
    wo: Frozen,
    w1: Frozen,
    b1: Vec<f64>,
    w2: Frozen,
    b2: Vec<f64>,
}

/// Query/key gain; keeps backbone attention mild on inputs of norm ~10.
const QK_GAIN: f64 = 0.5;
const MLP_OUT_GAIN: f64 = 0.5;

/// Randomly initialized, immutable backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyModel {
    config: BackboneConfig,
    blocks: Vec<Block>,
}

/// How a target projection is modified.
pub enum Update<'a> {
    None,
    LowRank(&'a SvdLoraAdapter),
    Dense(&'a Matrix),
}

/// Source of per-target updates for a forward pass.
pub trait Updates {
    fn update(&self, target: TargetId) -> Update<'_>;
}

/// Backbone only.
pub struct NoUpdates;

impl Updates for NoUpdates {
    fn update(&self, _: TargetId) -> Update<'_> {
        Update::None
    }
}

impl Updates for AdapterSet {
    fn update(&self, target: TargetId) -> Update<'_> {
        self.get(target).map_or(Update::None, Update::LowRank)
    }
}

impl Updates for DenseDeltas {
    fn update(&self, target: TargetId) -> Update<'_> {
        self.get(&target).map_or(Update::None, Update::Dense)
    }
}

/// Activations kept for backpropagation.
struct LayerCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    xa_q: Option<Matrix>,
    xa_v: Option<Matrix>,
    /// Attention probabilities, `seq_len × seq_len` per sequence, concatenated.
    p: Vec<f64>,
    /// GELU derivative at each MLP pre-activation.
    slope: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad {
    pub b: Matrix,
    pub e: Vec<f64>,
    pub a: Matrix,
}

/// Gradient of the loss with respect to every trainable value.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub adapters: BTreeMap<TargetId, AdapterGrad>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl Gradients {
    /// Same order as the trainable buffers of an [`AdapterSet`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(self.adapters.len() * 3 + 2);
        for g in self.adapters.values() {
            out.push(g.b.data());
            out.push(&g.e);
            out.push(g.a.data());
        }
        out.push(self.head_w.data());
        out.push(&self.head_b);
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates correctly at both ends.
#[inline]
fn tanh(y: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * y).exp() + 1.0)
}

/// Tanh-approximated GELU and its derivative.
#[inline]
fn gelu_and_grad(u: f64) -> (f64, f64) {
    let t = tanh(GELU_C * (u + GELU_K * u * u * u));
    let g = 0.5 * u * (1.0 + t);
    let dg = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u);
    (g, dg)
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    let cols = m.cols();
    for row in m.data_mut().chunks_exact_mut(cols) {
        for (x, bi) in row.iter_mut().zip(b) {
            *x += bi;
        }
    }
}

impl TinyModel {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        if config.embed_dim == 0 || config.layers == 0 || config.mlp_ratio == 0 {
            return Err(Error::Parameter(format!("degenerate backbone {config:?}")));
        }
        let d = config.embed_dim;
        let h = d * config.mlp_ratio;
        let mut r = rng::stream(config.seed, 20);
        let sd = 1.0 / (d as f64).sqrt();
        let sh = 1.0 / (h as f64).sqrt();
        let bias = Normal::new(0.0, 0.1).expect("std");
        let blocks = (0..config.layers)
            .map(|_| Block {
                wq: Frozen::random(d, d, QK_GAIN * sd, &mut r),
                wk: Frozen::random(d, d, QK_GAIN * sd, &mut r),
                wv: Frozen::random(d, d, sd, &mut r),
                wo: Frozen::random(d, d, sd, &mut r),
                w1: Frozen::random(h, d, sd, &mut r),
                b1: (0..h).map(|_| bias.sample(&mut r)).collect(),
                w2: Frozen::random(d, h, MLP_OUT_GAIN * sh, &mut r),
                b2: vec![0.0; d],
            })
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn signature(&self) -> ModelSignature {
        ModelSignature {
            embed_dim: self.config.embed_dim,
            layers: self.config.layers,
            config_hash: self.config.config_hash(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Frozen weight `W_Q` or `W_V` of `target` (out × in).
    pub fn weight(&self, target: TargetId) -> Option<&Matrix> {
        let b = self.blocks.get(target.layer)?;
        Some(match target.slot {
            Slot::Q => &b.wq.w,
            Slot::V => &b.wv.w,
        })
    }

    /// SHA-256 over every frozen weight byte.
    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.blocks {
            for f in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                for v in f.w.data() {
                    h.update(v.to_le_bytes());
                }
            }
            for v in b.b1.iter().chain(&b.b2) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn check_signature(&self, sig: &ModelSignature) -> Result<()> {
        let mine = self.signature();
        if *sig != mine {
            return Err(Error::Model(format!(
                "adapter signature {sig:?} does not match backbone {mine:?}"
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize> {
        let t = batch.seq_len;
        if t == 0 || batch.tokens.rows() != batch.len() * t || batch.tokens.cols() != self.embed_dim() {
            return Err(Error::Dimension {
                op: "forward batch",
                left: batch.tokens.shape(),
                right: (batch.len() * t, self.embed_dim()),
            });
        }
        Ok(batch.len())
    }

    fn project(x: &Matrix, frozen: &Frozen, update: Update<'_>) -> (Matrix, Option<Matrix>) {
        match update {
            Update::None => (x.matmul(&frozen.wt).expect("width"), None),
            Update::LowRank(a) => {
                let (out, xa) = a.apply_rows(&frozen.wt, x);
                (out, Some(xa))
            }
            Update::Dense(delta) => {
                let mut out = x.matmul(&frozen.wt).expect("width");
                out.add_assign(&x.matmul_nt(delta).expect("delta width"))
                    .expect("delta height");
                (out, None)
            }
        }
    }

    fn run<U: Updates + ?Sized>(
        &self,
        updates: &U,
        tokens: &Matrix,
        seq_len: usize,
        keep: bool,
    ) -> (Matrix, Vec<LayerCache>) {
        let d = self.embed_dim();
        let t = seq_len;
        let n_seq = tokens.rows() / t;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut x = tokens.clone();
        let mut caches = Vec::with_capacity(if keep { self.blocks.len() } else { 0 });
        for (l, blk) in self.blocks.iter().enumerate() {
            let (q, xa_q) = Self::project(&x, &blk.wq, updates.update(TargetId::new(l, Slot::Q)));
            let k = x.matmul(&blk.wk.wt).expect("width");
            let (v, xa_v) = Self::project(&x, &blk.wv, updates.update(TargetId::new(l, Slot::V)));

            let mut p = vec![0.0; n_seq * t * t];
            let mut z = Matrix::zeros(x.rows(), d);
            for s in 0..n_seq {
                let ps = &mut p[s * t * t..(s + 1) * t * t];
                for i in 0..t {
                    let qi = q.row(s * t + i);
                    let row = &mut ps[i * t..(i + 1) * t];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, rj) in row.iter_mut().enumerate() {
                        *rj = dot(qi, k.row(s * t + j)) * inv_sqrt_d;
                        mx = mx.max(*rj);
                    }
                    let mut sum = 0.0;
                    for rj in row.iter_mut() {
                        *rj = (*rj - mx).exp();
                        sum += *rj;
                    }
                    for rj in row.iter_mut() {
                        *rj /= sum;
                    }
                    let zi = z.row_mut(s * t + i);
                    for (j, &pij) in row.iter().enumerate() {
                        for (zk, vk) in zi.iter_mut().zip(v.row(s * t + j)) {
                            *zk += pij * vk;
                        }
                    }
                }
            }

            let mut h = x.clone();
            z.matmul_acc(&blk.wo.wt, &mut h).expect("width");
            let mut u = h.matmul(&blk.w1.wt).expect("width");
            add_bias(&mut u, &blk.b1);
            let mut slope = if keep { Vec::with_capacity(u.data().len()) } else { Vec::new() };
            for v in u.data_mut() {
                let (g, dg) = gelu_and_grad(*v);
                *v = g;
                if keep {
                    slope.push(dg);
                }
            }
            let g = u;
            let mut out = h;
            g.matmul_acc(&blk.w2.wt, &mut out).expect("width");
            add_bias(&mut out, &blk.b2);

            if keep {
                caches.push(LayerCache {
                    x,
                    q,
                    k,
                    v,
                    xa_q,
                    xa_v,
                    p,
                    slope,
                });
            }
            x = out;
        }

        let pooled = Matrix::from_fn(n_seq, d, |s, j| {
            (0..t).map(|i| x[(s * t + i, j)]).sum::<f64>() / t as f64
        });
        (pooled, caches)
    }

    /// Mean-pooled final-layer features, one row per sequence.
    pub fn features<U: Updates + ?Sized>(&self, updates: &U, batch: &Batch) -> Result<Matrix> {
        self.check_batch(batch)?;
        Ok(self.run(updates, &batch.tokens, batch.seq_len, false).0)
    }

    pub fn logits_with<U: Updates + ?Sized>(&self, updates: &U, head: &Head, batch: &Batch) -> Result<Matrix> {
        let f = self.features(updates, batch)?;
        head_logits(&f, head)
    }

    /// Loss and exact gradients for the adapters and head of `set`.
    pub fn loss_and_gradients(&self, set: &AdapterSet, batch: &Batch, reg: f64) -> Result<(f64, Gradients)> {
        self.check_signature(set.signature())?;
        let head = set
            .head()
            .ok_or_else(|| Error::Model("training needs a classifier head".into()))?;
        let n_seq = self.check_batch(batch)?;
        let (pooled, caches) = self.run(set, &batch.tokens, batch.seq_len, true);
        let logits = head_logits(&pooled, head)?;
        let loss = loss(&logits, &batch.labels, set, reg)?;

        // Cross-entropy.
        let classes = head.num_classes();
        let mut dlogits = softmax_rows(&logits);
        for (s, &y) in batch.labels.iter().enumerate() {
            dlogits[(s, y)] -= 1.0;
        }
        dlogits.scale_in_place(1.0 / n_seq as f64);
        let head_w = pooled.matmul_tn(&dlogits)?;
        let head_b: Vec<f64> = (0..classes).map(|c| (0..n_seq).map(|s| dlogits[(s, c)]).sum()).collect();
        let dpooled = dlogits.matmul_nt(&head.weight)?;

        let d = self.embed_dim();
        let t = batch.seq_len;
        let inv_t = 1.0 / t as f64;
        let mut dx = Matrix::from_fn(n_seq * t, d, |r, j| dpooled[(r / t, j)] * inv_t);

        let mut grads = BTreeMap::new();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for (l, (blk, c)) in self.blocks.iter().zip(&caches).enumerate().rev() {
            // MLP: out = h + gelu(u)·W2ᵀ + b2, u = h·W1ᵀ + b1.
            let mut du = dx.matmul(&blk.w2.w)?;
            for (g, &dg) in du.data_mut().iter_mut().zip(&c.slope) {
                *g *= dg;
            }
            let mut dh = dx;
            du.matmul_acc(&blk.w1.w, &mut dh)?;

            // Attention: h = x + z·Woᵀ.
            let dz = dh.matmul(&blk.wo.w)?;
            let mut dq = Matrix::zeros(n_seq * t, d);
            let mut dk = Matrix::zeros(n_seq * t, d);
            let mut dv = Matrix::zeros(n_seq * t, d);
            let mut dp = vec![0.0; t];
            for s in 0..n_seq {
                let ps = &c.p[s * t * t..(s + 1) * t * t];
                for i in 0..t {
                    let prow = &ps[i * t..(i + 1) * t];
                    let dzi = dz.row(s * t + i);
                    let mut weighted = 0.0;
                    for j in 0..t {
                        dp[j] = dot(dzi, c.v.row(s * t + j));
                        weighted += prow[j] * dp[j];
                        let dvj = dv.row_mut(s * t + j);
                        for (a, b) in dvj.iter_mut().zip(dzi) {
                            *a += prow[j] * b;
                        }
                    }
                    for j in 0..t {
                        let ds = prow[j] * (dp[j] - weighted) * inv_sqrt_d;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = c.k.row(s * t + j);
                        let dqi = dq.row_mut(s * t + i);
                        for (a, b) in dqi.iter_mut().zip(kj) {
                            *a += ds * b;
                        }
                        let qi = c.q.row(s * t + i);
                        let dkj = dk.row_mut(s * t + j);
                        for (a, b) in dkj.iter_mut().zip(qi) {
                            *a += ds * b;
                        }
                    }
                }
            }

            let need_dx = l > 0;
            let mut dx_next = if need_dx { dh } else { Matrix::zeros(0, 0) };
            for (slot, dproj, frozen, xa) in [
                (Slot::Q, &dq, &blk.wq, &c.xa_q),
                (Slot::V, &dv, &blk.wv, &c.xa_v),
            ] {
                let target = TargetId::new(l, slot);
                if let (Some(a), Some(xa)) = (set.get(target), xa) {
                    let (g, dx_adapter) = adapter_backward(a, &c.x, xa, dproj, need_dx)?;
                    grads.insert(target, g);
                    if need_dx {
                        dx_next.add_assign(&dx_adapter)?;
                    }
                }
                if need_dx {
                    dproj.matmul_acc(&frozen.w, &mut dx_next)?;
                }
            }
            if need_dx {
                dk.matmul_acc(&blk.wk.w, &mut dx_next)?;
            }
            dx = dx_next;
        }

        // Orthogonality penalty: d/dB ‖BᵀB − I‖² = 4·B·(BᵀB − I), d/dA ‖AAᵀ − I‖² = 4·(AAᵀ − I)·A.
        if reg != 0.0 {
            for (t, a) in set.adapters() {
                let g = grads.get_mut(t).expect("every adapter receives a gradient");
                let mut btb = a.b().matmul_tn(a.b())?;
                for i in 0..btb.rows() {
                    btb[(i, i)] -= 1.0;
                }
                g.b.axpy(4.0 * reg, &a.b().matmul(&btb)?)?;
                let mut aat = a.a().matmul_nt(a.a())?;
                for i in 0..aat.rows() {
                    aat[(i, i)] -= 1.0;
                }
                g.a.axpy(4.0 * reg, &aat.matmul(a.a())?)?;
            }
        }

        Ok((
            loss,
            Gradients {
                adapters: grads,
                head_w,
                head_b,
            },
        ))
    }
}

/// Backward through `out = x·Wᵀ + ((x·Aᵀ)·diag(E))·Bᵀ` for the adapter part.
fn adapter_backward(
    a: &SvdLoraAdapter,
    x: &Matrix,
    xa: &Matrix,
    dout: &Matrix,
    need_dx: bool,
) -> Result<(AdapterGrad, Matrix)> {
    let xae = xa.scale_cols(a.e())?;
    let b = dout.matmul_tn(&xae)?;
    let dxae = dout.matmul(a.b())?;
    let r = a.rank();
    let mut e = vec![0.0; r];
    for (row_g, row_x) in dxae.data().chunks_exact(r).zip(xa.data().chunks_exact(r)) {
        for k in 0..r {
            e[k] += row_g[k] * row_x[k];
        }
    }
    let dxa = dxae.scale_cols(a.e())?;
    let ag = dxa.matmul_tn(x)?;
    let dx = if need_dx { dxa.matmul(a.a())? } else { Matrix::zeros(0, 0) };
    Ok((AdapterGrad { b, e, a: ag }, dx))
}

fn head_logits(features: &Matrix, head: &Head) -> Result<Matrix> {
    let mut out = features.matmul(&head.weight)?;
    add_bias(&mut out, &head.bias);
    Ok(out)
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Logits of `set` (which must carry a head) on `batch`.
pub fn forward(model: &TinyModel, set: &AdapterSet, batch: &Batch) -> Result<Matrix> {
    model.check_signature(set.signature())?;
    let head = set
        .head()
        .ok_or_else(|| Error::Model("adapter set has no classifier head".into()))?;
    model.logits_with(set, head, batch)
}

/// Mean cross-entropy plus `reg · Σ (‖BᵀB − I‖²_F + ‖AAᵀ − I‖²_F)`.
pub fn loss(logits: &Matrix, labels: &[usize], set: &AdapterSet, reg: f64) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "loss",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let c = logits.cols();
    let mut ce = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(s);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        ce += lse - row[y];
    }
    ce /= labels.len().max(1) as f64;
    Ok(ce + reg * regularizer(set))
}

/// `Σ_adapters ‖BᵀB − I‖²_F + ‖AAᵀ − I‖²_F`.
pub fn regularizer(set: &AdapterSet) -> f64 {
    set.adapters().values().map(SvdLoraAdapter::orthogonality_penalty).sum()
}

/// Loss and gradients; see [`TinyModel::loss_and_gradients`].
pub fn gradients(model: &TinyModel, set: &AdapterSet, batch: &Batch, reg: f64) -> Result<(f64, Gradients)> {
    model.loss_and_gradients(set, batch, reg)
}
