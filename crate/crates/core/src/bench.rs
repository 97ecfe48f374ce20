//! Desk-scale benchmark: train task adapters, merge them, evaluate the merged
//! models with each task's own head, and fine-tune new tasks from merged inits.
//!
//! Every training run is independent, so runs are dispatched through [`Exec`];
//! results are collected in input order and written with fixed formatting, which
//! makes the output directory byte-identical across reruns and job counts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSet;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::{save_adapter_set, save_curve_csv, save_merge_report};
use crate::merge::{baseline_task_arithmetic, merge_sets_with, MergeConfig, MergeMethod, MergeReport};
use crate::rng::derive_seed;
use crate::train::{
    epochs_to_reach, evaluate, finetune_from, generate_task, BackboneConfig, ClusterGeometry, EpochRecord,
    NoUpdates, TaskData, TaskSpec, TinyModel, TrainConfig,
};

/// Validation accuracy used for the epochs-to-target comparison.
pub const TARGET_VAL_ACC: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSuite {
    pub backbone_seed: u64,
    pub cross_domain: Vec<TaskSpec>,
    pub in_domain: Vec<TaskSpec>,
    pub held_out: Vec<TaskSpec>,
    /// Independent training seeds per task.
    pub seeds: usize,
    /// Template for every run; its `seed` is replaced per run.
    pub train: TrainConfig,
    pub merge: MergeConfig,
}

impl BenchSuite {
    /// Seven dissimilar tasks, three tasks sharing a class-mean family (the
    /// last one with reduced separation), three held-out tasks, five seeds.
    pub fn default_suite() -> Self {
        let domain = ClusterGeometry::default();
        let cross_domain = [8, 2, 7, 8, 8, 2, 5]
            .iter()
            .enumerate()
            .map(|(i, &c)| TaskSpec::new(format!("cross{i}"), 1000 + i as u64, c).with_geometry(domain.clone()))
            .collect();
        let family = ClusterGeometry {
            family_seed: Some(77),
            ..domain.clone()
        };
        let in_domain = [(3, 4.0), (3, 4.0), (3, 2.5)]
            .iter()
            .enumerate()
            .map(|(i, &(c, sep))| {
                TaskSpec::new(format!("family{i}"), 2000 + i as u64, c).with_geometry(ClusterGeometry {
                    separation: sep,
                    ..family.clone()
                })
            })
            .collect();
        let held_out = [3, 4, 6]
            .iter()
            .enumerate()
            .map(|(i, &c)| TaskSpec::new(format!("new{i}"), 5000 + i as u64, c).with_geometry(domain.clone()))
            .collect();
        Self {
            backbone_seed: 0,
            cross_domain,
            in_domain,
            held_out,
            seeds: 5,
            train: TrainConfig::default(),
            merge: MergeConfig::default(),
        }
    }

    /// Same structure at a fraction of the cost, for smoke tests.
    pub fn tiny_suite() -> Self {
        let mut s = Self::default_suite();
        s.cross_domain.truncate(3);
        s.in_domain.truncate(2);
        s.held_out.truncate(1);
        for t in s.cross_domain.iter_mut().chain(&mut s.in_domain).chain(&mut s.held_out) {
            t.train_size = 64;
            t.val_size = 32;
            t.test_size = 32;
        }
        s.seeds = 1;
        s.train.epochs = 3;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Parameter("suite needs at least one seed".into()));
        }
        if self.cross_domain.is_empty() || self.in_domain.is_empty() {
            return Err(Error::Parameter("suite needs cross-domain and in-domain tasks".into()));
        }
        let mut seen = BTreeSet::new();
        for t in self.cross_domain.iter().chain(&self.in_domain).chain(&self.held_out) {
            t.validate()?;
            if !seen.insert(t.seed) {
                return Err(Error::Parameter(format!("task seed {} used twice", t.seed)));
            }
        }
        self.train.validate()?;
        self.merge.validate()
    }

    fn run_config(&self, group: u64, task: usize, seed: usize) -> TrainConfig {
        let tag = (group << 32) | ((task as u64) << 16) | seed as u64;
        TrainConfig {
            seed: derive_seed(self.backbone_seed ^ 0x62_656e_6368, tag),
            ..self.train.clone()
        }
    }
}

/// Accuracy of every method on every task of a group, for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupScores {
    pub seed: usize,
    /// Each task's own adapters.
    pub individual: Vec<f64>,
    pub med_lego: Vec<f64>,
    pub pre_merge: Vec<f64>,
    pub task_arithmetic: Vec<f64>,
    /// Task head on the bare backbone.
    pub backbone: Vec<f64>,
    pub report: MergeReport,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl GroupScores {
    fn rows(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("individual", &self.individual),
            ("med_lego", &self.med_lego),
            ("pre_merge_average", &self.pre_merge),
            ("task_arithmetic", &self.task_arithmetic),
            ("backbone", &self.backbone),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Fresh,
    MergedCross,
    MergedInDomain,
}

impl InitKind {
    pub const ALL: [InitKind; 3] = [InitKind::Fresh, InitKind::MergedCross, InitKind::MergedInDomain];

    pub fn as_str(self) -> &'static str {
        match self {
            InitKind::Fresh => "fresh",
            InitKind::MergedCross => "merged_cross",
            InitKind::MergedInDomain => "merged_in_domain",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRun {
    pub task: usize,
    pub init: InitKind,
    pub seed: usize,
    pub epochs_to_target: Option<usize>,
    pub best_epoch: usize,
    pub test_acc: f64,
    pub curve: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOutcome {
    pub cross: Vec<GroupScores>,
    pub in_domain: Vec<GroupScores>,
    pub finetune: Vec<FinetuneRun>,
    pub max_epochs: usize,
    pub held_out_tasks: usize,
    pub files: Vec<PathBuf>,
}

impl BenchOutcome {
    /// Epochs to the target accuracy, counting "never" as `max_epochs + 1`.
    pub fn epochs_or_cap(&self, r: &FinetuneRun) -> usize {
        r.epochs_to_target.unwrap_or(self.max_epochs + 1)
    }

    pub fn finetune_runs(&self, task: usize, init: InitKind) -> Vec<&FinetuneRun> {
        let mut v: Vec<&FinetuneRun> = self.finetune.iter().filter(|r| r.task == task && r.init == init).collect();
        v.sort_by_key(|r| r.seed);
        v
    }

    pub fn median_epochs(&self, task: usize, init: InitKind) -> f64 {
        let mut e: Vec<usize> = self.finetune_runs(task, init).iter().map(|r| self.epochs_or_cap(r)).collect();
        e.sort_unstable();
        match e.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => e[n / 2] as f64,
            n => (e[n / 2 - 1] + e[n / 2]) as f64 / 2.0,
        }
    }

    /// Seeds on which merged init reaches the target no later than fresh init.
    pub fn merged_not_slower(&self, task: usize, init: InitKind) -> (usize, usize) {
        let fresh = self.finetune_runs(task, InitKind::Fresh);
        let merged = self.finetune_runs(task, init);
        let wins = fresh
            .iter()
            .zip(&merged)
            .filter(|(f, m)| self.epochs_or_cap(m) <= self.epochs_or_cap(f))
            .count();
        (wins, fresh.len().min(merged.len()))
    }
}

struct TrainJob<'a> {
    group: &'static str,
    task_index: usize,
    seed: usize,
    data: &'a TaskData,
    cfg: TrainConfig,
    init: Option<&'a AdapterSet>,
}

fn write_file(path: &Path, body: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    files.push(path.to_path_buf());
    Ok(())
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn scores_csv(tasks: &[TaskSpec], groups: &[GroupScores]) -> String {
    let mut out = String::from("seed,method");
    for t in tasks {
        write!(out, ",{}", t.name).expect("string write");
    }
    out.push_str(",mean\n");
    for g in groups {
        for (name, row) in g.rows() {
            write!(out, "{},{name}", g.seed).expect("string write");
            for v in row {
                write!(out, ",{v:.6}").expect("string write");
            }
            writeln!(out, ",{:.6}", mean(row)).expect("string write");
        }
    }
    // Averages over seeds.
    for (i, (name, _)) in groups[0].rows().iter().enumerate() {
        write!(out, "mean,{name}").expect("string write");
        let per_task: Vec<f64> = (0..tasks.len())
            .map(|t| mean(&groups.iter().map(|g| g.rows()[i].1[t]).collect::<Vec<_>>()))
            .collect();
        for v in &per_task {
            write!(out, ",{v:.6}").expect("string write");
        }
        writeln!(out, ",{:.6}", mean(&per_task)).expect("string write");
    }
    out
}

/// Runs the full suite and writes all artifacts under `out_dir`.
pub fn run_bench(suite: &BenchSuite, out_dir: impl AsRef<Path>, exec: Exec) -> Result<BenchOutcome> {
    suite.validate()?;
    let out = out_dir.as_ref();
    for sub in ["", "adapters", "reports", "curves"] {
        mkdir(&out.join(sub))?;
    }
    let mut files = Vec::new();
    let model = TinyModel::new(BackboneConfig::with_seed(suite.backbone_seed))?;
    let gen = |specs: &[TaskSpec]| specs.iter().map(generate_task).collect::<Result<Vec<_>>>();
    let cross_data = gen(&suite.cross_domain)?;
    let in_data = gen(&suite.in_domain)?;
    let held_data = gen(&suite.held_out)?;

    // Stage 1: every task adapter of both groups.
    let mut jobs = Vec::new();
    for seed in 0..suite.seeds {
        for (group, gid, data) in [("cross", 1u64, &cross_data), ("family", 2, &in_data)] {
            for (i, d) in data.iter().enumerate() {
                jobs.push(TrainJob {
                    group,
                    task_index: i,
                    seed,
                    data: d,
                    cfg: suite.run_config(gid, i, seed),
                    init: None,
                });
            }
        }
    }
    let trained = run_jobs(&model, &jobs, exec)?;
    for (job, r) in jobs.iter().zip(&trained) {
        let name = format!("{}_{}_seed{}", job.group, job.data.spec.name, job.seed);
        let p = out.join("adapters").join(format!("{name}.mlgo"));
        save_adapter_set(&r.set, &p)?;
        files.push(p);
        let p = out.join("curves").join(format!("{name}.csv"));
        save_curve_csv(&r.curve, &p)?;
        files.push(p);
    }

    // Stage 2: merge and evaluate per seed.
    let per_seed = suite.cross_domain.len() + suite.in_domain.len();
    let mut cross = Vec::new();
    let mut in_domain = Vec::new();
    let mut merged_cross = Vec::new();
    let mut merged_in = Vec::new();
    for seed in 0..suite.seeds {
        let chunk = &trained[seed * per_seed..(seed + 1) * per_seed];
        let (c, i) = chunk.split_at(suite.cross_domain.len());
        for (label, results, data, scores, merged) in [
            ("cross", c, &cross_data, &mut cross, &mut merged_cross),
            ("family", i, &in_data, &mut in_domain, &mut merged_in),
        ] {
            let sets: Vec<AdapterSet> = results.iter().map(|r| r.set.clone()).collect();
            let (ml, report) = merge_sets_with(&sets, &suite.merge, exec)?;
            let pre_cfg = MergeConfig {
                method: MergeMethod::PreMergeAverage,
                ..suite.merge.clone()
            };
            let (pre, _) = merge_sets_with(&sets, &pre_cfg, exec)?;
            let ta = baseline_task_arithmetic(&sets, 1.0 / sets.len() as f64)?;
            let mut g = GroupScores {
                seed,
                individual: Vec::new(),
                med_lego: Vec::new(),
                pre_merge: Vec::new(),
                task_arithmetic: Vec::new(),
                backbone: Vec::new(),
                report,
            };
            for (r, d) in results.iter().zip(data) {
                let head = r.set.head().expect("trained sets carry heads");
                g.individual.push(r.test_acc);
                g.med_lego.push(evaluate(&model, &ml, head, &d.test)?);
                g.pre_merge.push(evaluate(&model, &pre, head, &d.test)?);
                g.task_arithmetic.push(evaluate(&model, &ta, head, &d.test)?);
                g.backbone.push(evaluate(&model, &NoUpdates, head, &d.test)?);
            }
            let p = out.join("reports").join(format!("{label}_med_lego_seed{seed}.json"));
            save_merge_report(&g.report, &p)?;
            files.push(p);
            let p = out.join("adapters").join(format!("{label}_med_lego_seed{seed}.mlgo"));
            save_adapter_set(&ml, &p)?;
            files.push(p);
            scores.push(g);
            merged.push(ml);
        }
    }
    write_file(&out.join("cross_domain.csv"), &scores_csv(&suite.cross_domain, &cross), &mut files)?;
    write_file(&out.join("in_domain.csv"), &scores_csv(&suite.in_domain, &in_domain), &mut files)?;

    // Stage 3: fine-tune held-out tasks from each init.
    let mut jobs = Vec::new();
    let mut kinds = Vec::new();
    for (t, d) in held_data.iter().enumerate() {
        for seed in 0..suite.seeds {
            let cfg = suite.run_config(3, t, seed);
            for kind in InitKind::ALL {
                let init = match kind {
                    InitKind::Fresh => None,
                    InitKind::MergedCross => Some(&merged_cross[seed]),
                    InitKind::MergedInDomain => Some(&merged_in[seed]),
                };
                jobs.push(TrainJob {
                    group: "new",
                    task_index: t,
                    seed,
                    data: d,
                    cfg: cfg.clone(),
                    init,
                });
                kinds.push(kind);
            }
        }
    }
    let tuned = run_jobs(&model, &jobs, exec)?;
    let mut finetune = Vec::new();
    let mut summary = String::from("task,init,seed,epochs_to_target,best_epoch,test_acc\n");
    for ((job, kind), r) in jobs.iter().zip(&kinds).zip(tuned) {
        let e2t = epochs_to_reach(&r.curve, TARGET_VAL_ACC);
        let p = out
            .join("curves")
            .join(format!("finetune_{}_{}_seed{}.csv", job.data.spec.name, kind.as_str(), job.seed));
        save_curve_csv(&r.curve, &p)?;
        files.push(p);
        writeln!(
            summary,
            "{},{},{},{},{},{:.6}",
            job.data.spec.name,
            kind.as_str(),
            job.seed,
            e2t.map_or_else(|| "never".to_string(), |e| e.to_string()),
            r.best_epoch,
            r.test_acc
        )
        .expect("string write");
        finetune.push(FinetuneRun {
            task: job.task_index,
            init: *kind,
            seed: job.seed,
            epochs_to_target: e2t,
            best_epoch: r.best_epoch,
            test_acc: r.test_acc,
            curve: r.curve,
        });
    }
    write_file(&out.join("finetune_summary.csv"), &summary, &mut files)?;
    write_file(&out.join("finetune_curves.csv"), &long_curves(suite, &finetune), &mut files)?;

    let mut outcome = BenchOutcome {
        cross,
        in_domain,
        finetune,
        max_epochs: suite.train.epochs,
        held_out_tasks: suite.held_out.len(),
        files: Vec::new(),
    };
    let md = summary_markdown(suite, &outcome);
    write_file(&out.join("summary.md"), &md, &mut files)?;
    outcome.files = files;
    Ok(outcome)
}

fn run_jobs(model: &TinyModel, jobs: &[TrainJob<'_>], exec: Exec) -> Result<Vec<crate::train::TrainResult>> {
    exec.map(jobs, |j| finetune_from(model, j.init, j.data, &j.cfg))
        .into_iter()
        .collect()
}

fn long_curves(suite: &BenchSuite, runs: &[FinetuneRun]) -> String {
    let mut out = String::from("task,init,seed,epoch,train_loss,val_acc\n");
    for r in runs {
        for e in &r.curve {
            writeln!(
                out,
                "{},{},{},{},{:.10},{:.6}",
                suite.held_out[r.task].name,
                r.init.as_str(),
                r.seed,
                e.epoch,
                e.train_loss,
                e.val_acc
            )
            .expect("string write");
        }
    }
    out
}

fn group_section(out: &mut String, title: &str, groups: &[GroupScores]) {
    writeln!(out, "## {title}\n").expect("string write");
    out.push_str("| seed | individual | med_lego | pre_merge_average | task_arithmetic | backbone | min retained mass |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for g in groups {
        let retained = g
            .report
            .records
            .iter()
            .filter_map(|r| r.retained_mass)
            .fold(f64::INFINITY, f64::min);
        writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.6} |",
            g.seed,
            mean(&g.individual),
            mean(&g.med_lego),
            mean(&g.pre_merge),
            mean(&g.task_arithmetic),
            mean(&g.backbone),
            retained
        )
        .expect("string write");
    }
    let above = |f: fn(&GroupScores) -> &Vec<f64>| {
        groups.iter().filter(|g| mean(&g.med_lego) > mean(f(g))).count()
    };
    writeln!(
        out,
        "\nmed_lego mean above pre_merge_average on {}/{} seeds, above task_arithmetic on {}/{} seeds.\n",
        above(|g| &g.pre_merge),
        groups.len(),
        above(|g| &g.task_arithmetic),
        groups.len()
    )
    .expect("string write");
}

fn summary_markdown(suite: &BenchSuite, o: &BenchOutcome) -> String {
    let mut out = String::from("# Benchmark summary\n\n");
    writeln!(
        out,
        "Backbone seed {}, {} seeds per cell, {} epochs per run, merge threshold {}.\n",
        suite.backbone_seed, suite.seeds, suite.train.epochs, suite.merge.threshold_v
    )
    .expect("string write");
    out.push_str("Mean test accuracy over tasks; every merged model is scored with each task's own head.\n\n");
    group_section(&mut out, "Cross-domain tasks", &o.cross);
    group_section(&mut out, "In-domain tasks", &o.in_domain);
    writeln!(
        out,
        "## Fine-tuning held-out tasks\n\nMedian epochs to {TARGET_VAL_ACC} validation accuracy (never = {}).\n",
        o.max_epochs + 1
    )
    .expect("string write");
    out.push_str("| task | fresh | merged_cross | merged_in_domain | cross not slower | in-domain not slower |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for (t, spec) in suite.held_out.iter().enumerate() {
        let (wc, nc) = o.merged_not_slower(t, InitKind::MergedCross);
        let (wi, ni) = o.merged_not_slower(t, InitKind::MergedInDomain);
        writeln!(
            out,
            "| {} | {:.1} | {:.1} | {:.1} | {wc}/{nc} | {wi}/{ni} |",
            spec.name,
            o.median_epochs(t, InitKind::Fresh),
            o.median_epochs(t, InitKind::MergedCross),
            o.median_epochs(t, InitKind::MergedInDomain)
        )
        .expect("string write");
    }
    out
}
