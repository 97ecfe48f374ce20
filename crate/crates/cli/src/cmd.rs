use std::path::Path;

use medlego::adapter::{param_count, random_adapter, AdapterSet, Slot, TargetId};
use medlego::bench::{run_bench, BenchSuite};
use medlego::exec::Exec;
use medlego::io::{load_adapter_set, parse_header, save_adapter_set, save_curve_csv, save_merge_report};
use medlego::linalg::svd;
use medlego::merge::{merge_sets, premerge_postmerge_gap, MergeConfig, MergeMethod};
use medlego::rng::derive_seed;
use medlego::train::{evaluate, generate_task, train_adapter, BackboneConfig, TaskData, TaskSpec, TinyModel, TrainConfig};
use medlego::{Error, Result};

use crate::{BenchArgs, EvalArgs, GapArgs, InspectArgs, MergeArgs, Method, SplitName, SuiteName, TaskArgs, TrainArgs};

fn task_data(t: &TaskArgs) -> Result<TaskData> {
    generate_task(&TaskSpec::new(format!("task{}", t.task_seed), t.task_seed, t.classes as usize))
}

fn backbone(t: &TaskArgs) -> Result<TinyModel> {
    TinyModel::new(BackboneConfig::with_seed(t.backbone_seed))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let model = backbone(&a.task)?;
    let task = task_data(&a.task)?;
    let cfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs as usize,
        reg: a.reg,
        rank: a.rank as usize,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let r = train_adapter(&model, &task, &cfg)?;
    save_adapter_set(&r.set, &a.out)?;
    let curve = a.out.with_extension("csv");
    save_curve_csv(&r.curve, &curve)?;
    println!("task {} ({} classes), rank {}, {} epochs", task.spec.name, task.spec.num_classes, cfg.rank, cfg.epochs);
    println!("best_epoch={}", r.best_epoch);
    println!("val_acc={:.4}", r.best_val_acc);
    println!("test accuracy {:.4}", r.test_acc);
    println!("acc={:.4}", r.test_acc);
    println!("wrote {} and {}", a.out.display(), curve.display());
    Ok(())
}

pub fn merge(a: MergeArgs) -> Result<()> {
    let sets: Vec<AdapterSet> = a.inputs.iter().map(load_adapter_set).collect::<Result<_>>()?;
    let first = sets[0].signature();
    for (set, path) in sets.iter().zip(&a.inputs).skip(1) {
        if set.signature() != first {
            return Err(Error::Merge(format!(
                "signature mismatch between {} and {}",
                a.inputs[0].display(),
                path.display()
            )));
        }
    }
    let method = match a.method {
        Method::MedLego => MergeMethod::MedLego,
        Method::PreAvg => MergeMethod::PreMergeAverage,
        Method::TaskArith => MergeMethod::TaskArithmetic,
    };
    let cfg = MergeConfig {
        method,
        threshold_v: a.threshold,
        max_rank: a.max_rank.map(|r| r as usize),
        lambda: a.lambda,
        ..MergeConfig::default()
    };
    let (merged, report) = merge_sets(&sets, &cfg)?;
    save_adapter_set(&merged, &a.out)?;
    let report_path = a.report.unwrap_or_else(|| a.out.with_extension("json"));
    save_merge_report(&report, &report_path)?;
    for r in &report.records {
        match r.retained_mass {
            Some(m) => println!("{}: kept_rank={} retained_mass={m:.6}", r.target, r.kept_rank),
            None => println!("{}: kept_rank={}", r.target, r.kept_rank),
        }
    }
    println!("wrote {} and {}", a.out.display(), report_path.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = backbone(&a.task)?;
    let set = load_adapter_set(&a.adapters)?;
    model.check_signature(set.signature())?;
    let head_source = match &a.head {
        Some(p) => load_adapter_set(p)?,
        None => set.clone(),
    };
    let head_path = a.head.as_deref().unwrap_or(&a.adapters);
    let head = head_source
        .head()
        .ok_or_else(|| Error::Model(format!("{} carries no classifier head", head_path.display())))?;
    let task = task_data(&a.task)?;
    if head.num_classes() != task.spec.num_classes {
        return Err(Error::Model(format!(
            "head has {} classes, task has {}",
            head.num_classes(),
            task.spec.num_classes
        )));
    }
    let split = match a.split {
        SplitName::Train => &task.train,
        SplitName::Val => &task.val,
        SplitName::Test => &task.test,
    };
    let acc = evaluate(&model, &set, head, split)?;
    println!("accuracy {acc:.4}");
    println!("acc={acc:.4}");
    Ok(())
}

pub fn gap_demo(a: GapArgs) -> Result<()> {
    let t = TargetId::new(0, Slot::Q);
    let first = random_adapter(t, 32, 32, 4, derive_seed(a.seed, 1))?;
    let second = if a.identical {
        first.clone()
    } else {
        random_adapter(t, 32, 32, 4, derive_seed(a.seed, 2))?
    };
    let gap = premerge_postmerge_gap(&[first, second])?;
    println!("gap={gap:.12e}");
    if a.identical && gap != 0.0 {
        return Err(Error::Numeric(format!("identical inputs gave a nonzero gap {gap:e}")));
    }
    if !a.identical && (gap.is_nan() || gap <= 1e-6) {
        return Err(Error::Numeric(format!("expected a positive gap, got {gap:e}")));
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let suite = match a.suite {
        SuiteName::Default => BenchSuite::default_suite(),
        SuiteName::Tiny => BenchSuite::tiny_suite(),
    };
    let outcome = run_bench(&suite, &a.out, Exec::from_jobs(a.jobs as usize))?;
    let summary = a.out.join("summary.md");
    print!("{}", std::fs::read_to_string(&summary).map_err(|e| Error::Io { path: summary, source: e })?);
    println!("wrote {} files under {}", outcome.files.len(), a.out.display());
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let path: &Path = &a.input;
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (header, _) = parse_header(&bytes)?;
    let set = medlego::io::from_bytes(&bytes)?;
    let sig = set.signature();
    println!("file {}", path.display());
    println!("embed_dim={} layers={} config_hash={}", sig.embed_dim, sig.layers, sig.config_hash);
    let m = &set.metadata;
    println!("task={} seed={} train_config_digest={}", m.task, m.seed, m.train_config_digest);
    for input in &m.inputs {
        println!("input {input}");
    }
    match set.head() {
        Some(h) => println!("head {}x{}", h.weight.rows(), h.weight.cols()),
        None => println!("head none"),
    }
    println!("tensors {}", header.tensors.len());
    for (t, ad) in set.adapters() {
        println!("rank {t} = {}", ad.rank());
        let s = svd(&ad.delta())?.s;
        let shown: Vec<String> = s.iter().take(ad.rank()).map(|v| format!("{v:.6e}")).collect();
        println!("spectrum {t} = {}", shown.join(" "));
    }
    // The file records the backbone width and depth; the MLP ratio is the toy default.
    let base = BackboneConfig {
        embed_dim: sig.embed_dim,
        layers: sig.layers,
        ..BackboneConfig::default()
    }
    .param_count();
    let (params, fraction) = param_count(&set, base)?;
    println!("adapter_params={params} base_params={base} fraction={fraction:.6}");
    Ok(())
}
