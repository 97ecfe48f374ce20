//! Synthetic sequence-classification tasks.
//!
//! Every token carries a domain-wide offset along a shared "bias" direction.
//! A few tokens per sequence are signal tokens: they also carry a shared domain
//! marker direction and the class mean of the label. The remaining tokens are
//! isotropic distractors. Mean-pooling dilutes the class signal, so attending to
//! marked tokens (a skill shared by all tasks of a domain) pays off on every task,
//! while the class-mean subspace is task specific unless tasks share a family.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterGeometry {
    /// Distance between any two class means, in units of `noise`.
    pub separation: f64,
    /// Per-coordinate standard deviation on signal tokens.
    pub noise: f64,
    /// Signal tokens per sequence.
    pub signal_tokens: usize,
    /// Per-coordinate standard deviation of distractor tokens.
    pub distractor_scale: f64,
    /// Length of the domain marker added to signal tokens.
    pub marker_scale: f64,
    /// Length of the domain offset added to every token.
    pub bias_scale: f64,
    /// Seed of the shared marker and bias directions.
    pub domain_seed: u64,
    /// Tasks with the same family draw class means from one shared subspace.
    pub family_seed: Option<u64>,
}

impl Default for ClusterGeometry {
    fn default() -> Self {
        Self {
            separation: 4.0,
            noise: 1.0,
            signal_tokens: 2,
            distractor_scale: 1.5,
            marker_scale: 8.0,
            bias_scale: 10.0,
            domain_seed: 7,
            family_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub geometry: ClusterGeometry,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, seed: u64, num_classes: usize) -> Self {
        Self {
            name: name.into(),
            seed,
            num_classes,
            seq_len: 8,
            dim: 32,
            train_size: 512,
            val_size: 128,
            test_size: 256,
            geometry: ClusterGeometry::default(),
        }
    }

    pub fn with_geometry(mut self, geometry: ClusterGeometry) -> Self {
        self.geometry = geometry;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if !(2..=8).contains(&self.num_classes) {
            return Err(Error::Parameter(format!(
                "num_classes must lie in 2..=8, got {}",
                self.num_classes
            )));
        }
        if self.seq_len == 0 || g.signal_tokens == 0 || g.signal_tokens > self.seq_len {
            return Err(Error::Parameter(format!(
                "need 1 <= signal_tokens ({}) <= seq_len ({})",
                g.signal_tokens, self.seq_len
            )));
        }
        if self.dim < self.num_classes + 2 {
            return Err(Error::Parameter(format!(
                "dim {} too small for {} classes",
                self.dim, self.num_classes
            )));
        }
        for (n, size) in [("train", self.train_size), ("val", self.val_size), ("test", self.test_size)] {
            if size < self.num_classes {
                return Err(Error::Parameter(format!(
                    "{n} split of {size} cannot hold {} classes",
                    self.num_classes
                )));
            }
        }
        let scales = [g.separation, g.noise, g.distractor_scale, g.marker_scale, g.bias_scale];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Parameter("geometry scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Labelled sequences; token rows of sample `i` are `i*seq_len .. (i+1)*seq_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub tokens: Matrix,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

/// Contiguous slice of sequences fed to the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Matrix,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.tokens.cols();
        let t = self.seq_len;
        let mut data = Vec::with_capacity(indices.len() * t * d);
        for &i in indices {
            data.extend_from_slice(&self.tokens.data()[i * t * d..(i + 1) * t * d]);
        }
        Batch {
            tokens: Matrix::from_vec(indices.len() * t, d, data).expect("rows copied from a valid split"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            seq_len: t,
        }
    }

    /// Batches of at most `size` consecutive samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let size = size.max(1);
        (0..self.len().div_ceil(size)).map(move |c| self.batch(&idx[c * size..((c + 1) * size).min(idx.len())]))
    }

    /// Mean over tokens of each raw sequence (`n × d`).
    pub fn pooled(&self) -> Matrix {
        let d = self.tokens.cols();
        let t = self.seq_len;
        Matrix::from_fn(self.len(), d, |i, j| {
            (0..t).map(|k| self.tokens[(i * t + k, j)]).sum::<f64>() / t as f64
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    /// Class means, one row per class.
    pub means: Matrix,
}

/// `count` orthonormal vectors, orthogonal to `avoid`, from Gaussian draws.
fn orthonormal_set(count: usize, dim: usize, avoid: &[Vec<f64>], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = avoid.to_vec();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &basis {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= p * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v.clone());
        out.push(v);
    }
    out
}

/// Marker and bias directions shared by every task of a domain.
pub fn domain_directions(domain_seed: u64, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(domain_seed, 10);
    let mut dirs = orthonormal_set(2, dim, &[], &mut r);
    let bias = dirs.pop().expect("two directions");
    let marker = dirs.pop().expect("two directions");
    (marker, bias)
}

fn class_means(spec: &TaskSpec, marker: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    let g = &spec.geometry;
    let avoid = [marker.to_vec(), bias.to_vec()];
    let basis = match g.family_seed {
        Some(family) => {
            let mut r = rng::stream(family, 11);
            let mut shared = orthonormal_set(spec.num_classes.max(8), spec.dim, &avoid, &mut r);
            let mut order = rng::stream(spec.seed, 12);
            shared.shuffle(&mut order);
            shared.truncate(spec.num_classes);
            shared
        }
        None => {
            let mut r = rng::stream(spec.seed, 11);
            orthonormal_set(spec.num_classes, spec.dim, &avoid, &mut r)
        }
    };
    let radius = g.separation * g.noise / std::f64::consts::SQRT_2;
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * radius).collect())
        .collect()
}

fn generate_split(
    spec: &TaskSpec,
    size: usize,
    stream: u64,
    means: &[Vec<f64>],
    marker: &[f64],
    bias: &[f64],
) -> Split {
    let g = &spec.geometry;
    let (t, d, c) = (spec.seq_len, spec.dim, spec.num_classes);
    let mut r = rng::stream(spec.seed, stream);
    let mut labels: Vec<usize> = (0..size).map(|i| i % c).collect();
    labels.shuffle(&mut r);
    let mut data = Vec::with_capacity(size * t * d);
    let mut positions: Vec<usize> = (0..t).collect();
    for &y in &labels {
        positions.shuffle(&mut r);
        let signal = &positions[..g.signal_tokens];
        for j in 0..t {
            let is_signal = signal.contains(&j);
            for k in 0..d {
                let z: f64 = r.sample(StandardNormal);
                let mut x = g.bias_scale * bias[k];
                if is_signal {
                    x += g.marker_scale * marker[k] + means[y][k] + g.noise * z;
                } else {
                    x += g.distractor_scale * z;
                }
                data.push(x);
            }
        }
    }
    Split {
        tokens: Matrix::from_vec(size * t, d, data).expect("finite draws"),
        labels,
        seq_len: t,
    }
}

/// Deterministic train/val/test splits for `spec`, each from its own RNG stream.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let (marker, bias) = domain_directions(spec.geometry.domain_seed, spec.dim);
    let means = class_means(spec, &marker, &bias);
    let train = generate_split(spec, spec.train_size, 101, &means, &marker, &bias);
    let val = generate_split(spec, spec.val_size, 102, &means, &marker, &bias);
    let test = generate_split(spec, spec.test_size, 103, &means, &marker, &bias);
    let flat: Vec<f64> = means.iter().flatten().copied().collect();
    Ok(TaskData {
        spec: spec.clone(),
        train,
        val,
        test,
        means: Matrix::from_vec(spec.num_classes, spec.dim, flat)?,
    })
}
