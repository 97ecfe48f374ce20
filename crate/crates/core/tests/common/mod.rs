//! Test-side oracles, written independently of the library's numerics.
#![allow(dead_code)]

use medlego::adapter::{AdapterSet, Head, ModelSignature, SetMetadata, Slot, SvdLoraAdapter, TargetId};
use medlego::linalg::Matrix;
use medlego::train::{Batch, TinyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Box-Muller standard normal, so the oracle shares no sampling code with the library.
pub fn gauss(r: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - r.random::<f64>();
    let u2: f64 = r.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `k` orthonormal vectors of length `n` (k ≤ n) by twice-applied classical Gram-Schmidt.
pub fn orthonormal_columns(n: usize, k: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| gauss(r)).collect();
        for _ in 0..2 {
            for q in &out {
                let p: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= p * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// `Σ s_i u_i v_iᵀ` with random orthonormal `u_i` (length m) and `v_i` (length n).
pub fn with_spectrum(m: usize, n: usize, s: &[f64], r: &mut impl Rng) -> Matrix {
    let u = orthonormal_columns(m, s.len(), r);
    let v = orthonormal_columns(n, s.len(), r);
    Matrix::from_fn(m, n, |i, j| (0..s.len()).map(|k| s[k] * u[k][i] * v[k][j]).sum())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted descending.
pub fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
pub fn gram_singular_values(m: &Matrix) -> Vec<f64> {
    let (r, c) = m.shape();
    let gram: Vec<Vec<f64>> = if c <= r {
        (0..c).map(|i| (0..c).map(|j| (0..r).map(|k| m[(k, i)] * m[(k, j)]).sum()).collect()).collect()
    } else {
        (0..r).map(|i| (0..r).map(|j| (0..c).map(|k| m[(i, k)] * m[(j, k)]).sum()).collect()).collect()
    };
    symmetric_eigenvalues(&gram).into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

/// Smallest `k` with `Σ_{i<k} s_i / Σ s_i ≥ v`, by direct enumeration.
pub fn brute_force_rank(s: &[f64], v: f64) -> usize {
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return 1;
    }
    for k in 1..=s.len() {
        let kept: f64 = s[..k].iter().sum();
        if kept / total >= v {
            return k;
        }
    }
    s.len()
}

/// Per-block relative error `‖analytic − fd‖ / ‖fd‖` with central differences.
pub fn fd_block_errors(model: &TinyModel, set: &AdapterSet, batch: &Batch, reg: f64, eps: f64) -> Vec<f64> {
    let mut set = set.clone();
    let (_, grads) = model.loss_and_gradients(&set, batch, reg).unwrap();
    let analytic: Vec<Vec<f64>> = grads.blocks().iter().map(|b| b.to_vec()).collect();
    let loss = |s: &AdapterSet| model.loss_and_gradients(s, batch, reg).unwrap().0;
    let mut errors = Vec::with_capacity(analytic.len());
    for (bi, g) in analytic.iter().enumerate() {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (j, &gj) in g.iter().enumerate() {
            let orig = set.trainable_blocks_mut()[bi][j];
            set.trainable_blocks_mut()[bi][j] = orig + eps;
            let up = loss(&set);
            set.trainable_blocks_mut()[bi][j] = orig - eps;
            let down = loss(&set);
            set.trainable_blocks_mut()[bi][j] = orig;
            let fd = (up - down) / (2.0 * eps);
            diff += (gj - fd) * (gj - fd);
            norm += fd * fd;
        }
        errors.push(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    errors
}

pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, r: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * gauss(r))
}

/// Adapter with arbitrary (non-canonical) factors.
pub fn messy_adapter(t: TargetId, d: usize, rank: usize, r: &mut impl Rng) -> SvdLoraAdapter {
    let b = gaussian_matrix(d, rank, 1.0 / (d as f64).sqrt(), r);
    let a = gaussian_matrix(rank, d, 1.0 / (d as f64).sqrt(), r);
    let e = (0..rank).map(|_| gauss(r)).collect();
    SvdLoraAdapter::new(t, b, e, a).unwrap()
}

/// Random set over a random subset of targets with random ranks, head and metadata.
pub fn random_set(r: &mut impl Rng) -> AdapterSet {
    let layers = r.random_range(1..=3usize);
    let d = r.random_range(2..=12usize);
    let sig = ModelSignature {
        embed_dim: d,
        layers,
        config_hash: format!("{:016x}", r.random::<u64>()),
    };
    let targets: Vec<TargetId> = (0..layers)
        .flat_map(|l| [TargetId::new(l, Slot::Q), TargetId::new(l, Slot::V)])
        .filter(|_| r.random_bool(0.7))
        .collect();
    let adapters: Vec<SvdLoraAdapter> = targets
        .into_iter()
        .map(|t| {
            let rank = r.random_range(1..=d);
            let mut a = messy_adapter(t, d, rank, r);
            // Exercise extreme but finite bit patterns.
            if r.random_bool(0.2) {
                let blocks = a.params_mut();
                let [b, _, _] = blocks;
                b[0] = f64::MIN_POSITIVE / 4.0;
                if b.len() > 1 {
                    b[1] = -0.0;
                }
                if b.len() > 2 {
                    b[2] = f64::MAX;
                }
            }
            a
        })
        .collect();
    let head = if r.random_bool(0.6) {
        let c = r.random_range(2..=8usize);
        Some(Head::new(gaussian_matrix(d, c, 1.0, r), (0..c).map(|_| gauss(r)).collect()).unwrap())
    } else {
        None
    };
    let names = ["", "task", "tâche-ü", "x\"y\\z", "多任务"];
    let metadata = SetMetadata {
        task: names[r.random_range(0..names.len())].to_string(),
        seed: r.random(),
        train_config_digest: format!("{:x}", r.random::<u64>()),
        inputs: (0..r.random_range(0..3)).map(|i| format!("in{i}")).collect(),
    };
    AdapterSet::new(sig, adapters, head, metadata).unwrap()
}

/// Bitwise equality of every value and all metadata.
pub fn bit_identical(a: &AdapterSet, b: &AdapterSet) -> bool {
    let bits = |m: &[f64]| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if a.signature() != b.signature() || a.metadata != b.metadata {
        return false;
    }
    if a.adapters().len() != b.adapters().len() {
        return false;
    }
    for ((ta, x), (tb, y)) in a.adapters().iter().zip(b.adapters()) {
        if ta != tb
            || x.b().shape() != y.b().shape()
            || x.a().shape() != y.a().shape()
            || bits(x.b().data()) != bits(y.b().data())
            || bits(x.e()) != bits(y.e())
            || bits(x.a().data()) != bits(y.a().data())
        {
            return false;
        }
    }
    match (a.head(), b.head()) {
        (None, None) => true,
        (Some(h), Some(g)) => {
            h.weight.shape() == g.weight.shape() && bits(h.weight.data()) == bits(g.weight.data()) && bits(&h.bias) == bits(&g.bias)
        }
        _ => false,
    }
}

/// Reassembles a file from a (possibly edited) header JSON and payload bytes.
pub fn assemble(header_json: &str, payload: &[u8]) -> Vec<u8> {
    let mut json = header_json.as_bytes().to_vec();
    while (16 + json.len()) % 8 != 0 {
        json.push(b' ');
    }
    let mut out = b"MLGO".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

/// Splits a valid file into header JSON and payload.
pub fn split_file(bytes: &[u8]) -> (serde_json::Value, Vec<u8>) {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    (header, bytes[16 + len..].to_vec())
}
