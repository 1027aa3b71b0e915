use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use shiftser::accounting::{diff, plan};
use shiftser::blocks::{checkpoint, Model, ModelConfig};
use shiftser::data::{gen_synthetic, read_fseq, write_fseq, Dataset, FeatureSequence, Manifest};
use shiftser::gradcheck::{standard_suite, GradReport};
use shiftser::shift::{temporal_shift, Placement, ShiftConfig, ShiftPlan};
use shiftser::tensor::Tensor;
use shiftser::train::{cross_validate, evaluate, TrainConfig};

use crate::run_config::{resolve_model, DirectionArg, ModelArgs, RunConfig};

pub fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<bool> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let ds = gen_synthetic(&cfg.generator, seed).context("invalid [generator] section")?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let data_path = out.join("data.fseq");
    write_fseq(&data_path, &ds).with_context(|| format!("cannot write {}", data_path.display()))?;
    Manifest::describe(&ds, Some(seed), Some(cfg.generator.clone())).write(&out.join("manifest.toml"))?;
    println!("wrote {} records to {}", ds.len(), data_path.display());
    println!("classes {:?}", ds.class_counts());
    println!("groups {}", ds.groups().len());
    Ok(true)
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub folds: Option<usize>,
    pub model: ModelArgs,
    pub augment_prob: Option<f64>,
    pub epochs: Option<usize>,
}

/// Fully resolved run, written next to the results.
#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    data: String,
    folds: usize,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn load_dataset(cfg: &RunConfig, flag: Option<&Path>, seed: u64) -> Result<(Dataset, String)> {
    match flag.or(cfg.data.path.as_deref()) {
        Some(path) => {
            let ds = read_fseq(path).with_context(|| format!("cannot load data file {}", path.display()))?;
            Ok((ds, path.display().to_string()))
        }
        None => {
            let ds = gen_synthetic(&cfg.generator, seed).context("invalid [generator] section")?;
            Ok((ds, format!("synthetic(seed={seed})")))
        }
    }
}

pub fn train(args: TrainArgs) -> Result<bool> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let seed = args.seed.or(cfg.seed).unwrap_or(cfg.train.seed);
    let (ds, source) = load_dataset(&cfg, args.data.as_deref(), seed)?;
    let Some(first) = ds.records.first() else {
        bail!("the dataset {source} has no records");
    };

    let resolved = resolve_model(&cfg, &args.model)?;
    let mut model = resolved.model;
    if resolved.from_preset {
        model = model.with_width(first.channels);
        model.num_input_layers = first.layers;
        model.num_classes = ds.num_classes as usize;
    }
    model.validate().context("invalid model configuration")?;

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    if let Some(p) = args.augment_prob {
        train_cfg.augment_prob = p;
    }
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
        train_cfg.warmup_epochs = train_cfg.warmup_epochs.min(e.saturating_sub(1));
    }
    train_cfg.validate().context("invalid [train] section")?;
    let folds = args.folds.unwrap_or(cfg.data.folds);

    let out = &args.out;
    for dir in [out.clone(), out.join("checkpoints"), out.join("curves")] {
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let record = RunRecord {
        seed,
        data: source,
        folds,
        model: &model,
        train: &train_cfg,
    };
    fs::write(out.join("run.toml"), toml::to_string(&record)?)?;

    let report = cross_validate(&model, &train_cfg, &ds, folds, |i, outcome| {
        checkpoint::save(&outcome.model, &out.join(format!("checkpoints/fold{i}.tsck")))?;
        let mut curve = String::from("step\tlr\tloss\n");
        for p in &outcome.curve {
            curve += &format!("{}\t{:e}\t{:.6}\n", p.step, p.lr, p.loss);
        }
        fs::write(out.join(format!("curves/fold{i}.tsv")), curve)?;
        println!(
            "fold={i} ua={:.6} wa={:.6} loss={:.6}",
            outcome.metrics.ua, outcome.metrics.wa, outcome.final_loss
        );
        Ok(())
    })
    .context("cross-validation failed")?;

    let text = report.to_text();
    fs::write(out.join("metrics.txt"), &text)?;
    print!("{}", text.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
    Ok(true)
}

pub fn eval(checkpoint_path: &Path, data: &Path, group: Option<u32>, out: Option<&Path>) -> Result<bool> {
    let model: Model<f32> = checkpoint::load(checkpoint_path)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint_path.display()))?;
    let ds = read_fseq(data).with_context(|| format!("cannot load data file {}", data.display()))?;
    let records: Vec<&FeatureSequence> = ds
        .records
        .iter()
        .filter(|r| group.is_none_or(|g| r.group == g))
        .collect();
    ensure!(!records.is_empty(), "no records to evaluate in {}", data.display());
    let (metrics, _) = evaluate(&model, &records, 32, None).context("evaluation failed")?;
    let text = format!(
        "records={} ua={:.6} wa={:.6}\n{}",
        records.len(),
        metrics.ua,
        metrics.wa,
        metrics.confusion.to_table()
    );
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.txt"), &text)?;
    }
    Ok(true)
}

pub fn gradcheck(first_seed: u64, seeds: u64, filter: Option<&str>) -> Result<bool> {
    ensure!(seeds > 0, "--seeds must be at least 1");
    let mut failures = 0;
    let mut ran = 0;
    for case in standard_suite() {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let mut worst: Option<GradReport> = None;
        for seed in first_seed..first_seed + seeds {
            let r = case.run(seed).with_context(|| format!("case {} failed to run", case.name))?;
            if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
                worst = Some(r);
            }
        }
        let r = worst.expect("at least one seed");
        ran += 1;
        if !r.passed() {
            failures += 1;
        }
        println!(
            "{:<34} max_rel_err={:.3e} tol={:.0e} {}",
            r.name,
            r.max_rel_err,
            r.tol,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    ensure!(ran > 0, "no gradient check matches the filter");
    println!("{} of {ran} cases passed over {seeds} seeds", ran - failures);
    Ok(failures == 0)
}

pub fn count(config: Option<&Path>, args: &ModelArgs, frames: usize, kv: bool) -> Result<bool> {
    let cfg = RunConfig::load(config)?;
    let model = resolve_model(&cfg, args)?.model;
    model.validate().context("invalid model configuration")?;
    let report = plan(&model, frames)?;
    let base = plan(&model.baseline(), frames)?;
    if kv {
        print!("{}", report.to_kv());
    } else {
        print!("{}", report.to_table());
    }
    let d = diff(&report, &base);
    println!(
        "baseline params={} flops={}",
        base.total_params(),
        base.total_flops()
    );
    println!(
        "diff params={:+} flops={:+} matmul_flops={:+}",
        d.params, d.flops, d.matmul_flops
    );
    Ok(true)
}

pub fn shift_inspect(input: &Path, out: &Path, alpha: f64, direction: DirectionArg) -> Result<bool> {
    let ds = read_fseq(input).with_context(|| format!("cannot load data file {}", input.display()))?;
    let shift = ShiftConfig::new(alpha, direction.into(), Placement::InPlace);
    let mut records = Vec::with_capacity(ds.len());
    for (i, r) in ds.records.iter().enumerate() {
        let x = Tensor::new(&[r.layers, r.frames, r.channels], r.data.clone())?;
        let y = temporal_shift(&x, &shift).with_context(|| format!("record {i}"))?;
        records.push(FeatureSequence {
            data: y.data().to_vec(),
            ..r.clone()
        });
    }
    let shifted = Dataset::new(ds.num_classes, records);
    write_fseq(out, &shifted).with_context(|| format!("cannot write {}", out.display()))?;
    if let Some(r) = ds.records.first() {
        println!("{}", ShiftPlan::new(&shift, r.channels)?);
    }
    println!("wrote {} records to {}", shifted.len(), out.display());
    Ok(true)
}
