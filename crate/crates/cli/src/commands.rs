use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::Context as _;
use indexmap::IndexMap;
use taskblock::adversary::{attack_protocol, evaluate, AttackReport};
use taskblock::data::{export_jsonl, gen_synthetic, load_jsonl, Splits, Task, TaskDataset};
use taskblock::metrics::few_shot_improvement;
use taskblock::mlac::{adversarial_censoring_train, mlac_train, write_log_csv, BlockingOutput};
use taskblock::models::{content_hash, init_mlp, load_checkpoint, save_checkpoint, Checkpoint, Head, ParameterSet};
use taskblock::seed;
use taskblock::train::{train_supervised, SupervisedConfig};

use crate::config::{ConfigError, RunConfig};
use crate::{Baseline, CliError};

fn summarize(name: &str, ds: &TaskDataset) -> String {
    format!(
        "{name}: {} examples, desired classes {:?}, harmful classes {:?}",
        ds.len(),
        ds.class_counts(Task::Desired),
        ds.class_counts(Task::Harmful)
    )
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = gen_synthetic(&cfg.data.synthetic).context("generating synthetic data")?;
    export_jsonl(&ds, out).context("writing dataset")?;
    println!("wrote {} (input dim {})", out.display(), ds.input_dim());
    println!("{}", summarize("full", &ds));
    let s = ds.split_into(cfg.split.train, cfg.split.val, cfg.split.seed).context("splitting")?;
    for (name, part) in [("train", &s.train), ("val", &s.val), ("eval", &s.eval)] {
        println!("{}", summarize(name, part));
    }
    Ok(())
}

fn load_splits(cfg: &RunConfig, data: &Path) -> Result<Splits, CliError> {
    let ds = load_jsonl(data, cfg.data.hash_dim).with_context(|| format!("loading {}", data.display()))?;
    Ok(ds.split_into(cfg.split.train, cfg.split.val, cfg.split.seed).context("splitting")?)
}

fn check_input_dim(params: &ParameterSet<f64>, ds: &TaskDataset) -> Result<(), CliError> {
    let want = params.architecture().input_dim();
    if want != ds.input_dim() {
        return Err(ConfigError::Invalid(format!("model input dim {want} does not match data dim {}", ds.input_dim())).into());
    }
    Ok(())
}

fn write_loss_log(losses: &[f64], path: &Path) -> anyhow::Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("in-memory write");
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn supervised(
    sup: &SupervisedConfig,
    params: &ParameterSet<f64>,
    heads: Vec<(Task, Head<f64>)>,
    train: &TaskDataset,
    log: Option<&Path>,
) -> anyhow::Result<(ParameterSet<f64>, IndexMap<String, Head<f64>>)> {
    let out = train_supervised(sup, params, heads, train).context("supervised training")?;
    if let Some(path) = log {
        write_loss_log(&out.losses, path)?;
    }
    let heads = out
        .heads
        .into_iter()
        .map(|(task, h)| (if task == Task::Desired { "desired" } else { "harmful" }.to_string(), h))
        .collect();
    Ok((out.params, heads))
}

fn blocked(out: BlockingOutput<f64>, log: Option<&Path>) -> anyhow::Result<(ParameterSet<f64>, IndexMap<String, Head<f64>>)> {
    if let Some(path) = log {
        write_log_csv(&out.log, path).context("writing training log")?;
    }
    let mut heads = IndexMap::new();
    heads.insert("desired".to_string(), out.desired_head);
    heads.insert("adversary".to_string(), out.adversary.head);
    Ok((out.params, heads))
}

pub fn train(
    cfg: &RunConfig,
    data: &Path,
    baseline: Baseline,
    init: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
) -> Result<(), CliError> {
    let s = load_splits(cfg, data)?;
    let (params, init_desired) = match init {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let head = ckpt.heads.get("desired").cloned();
            (ckpt.params, head)
        }
        None => (init_mlp(&cfg.model.dims, cfg.model.activation, cfg.model.seed).context("initializing model")?, None),
    };
    check_input_dim(&params, &s.train)?;
    let feature_dim = params.architecture().feature_dim();
    let fresh = |classes: usize, tag: u64| Head::init(feature_dim, classes, seed::derive(cfg.model.seed, &[tag]));
    let desired_head = match init_desired {
        Some(h) => h,
        None => fresh(s.train.num_desired_classes(), 1).context("initializing head")?,
    };

    let started = Instant::now();
    let (run_seed, (params, heads)) = match baseline {
        Baseline::Random => {
            let mut heads = IndexMap::new();
            heads.insert("desired".to_string(), desired_head);
            (cfg.model.seed, (params, heads))
        }
        Baseline::Pretrain => {
            let harmful = fresh(s.train.num_harmful_classes(), 2).context("initializing head")?;
            let heads = vec![(Task::Desired, desired_head), (Task::Harmful, harmful)];
            (cfg.pretrain.seed, supervised(&cfg.pretrain, &params, heads, &s.train, log)?)
        }
        Baseline::Finetune => {
            (cfg.finetune.seed, supervised(&cfg.finetune, &params, vec![(Task::Desired, desired_head)], &s.train, log)?)
        }
        Baseline::Mlac => {
            let out = mlac_train(&cfg.blocking, &params, Some(&desired_head), &s.train, &s.train).context("MLAC training")?;
            (cfg.blocking.seed, blocked(out, log)?)
        }
        Baseline::Ac => {
            let out = adversarial_censoring_train(&cfg.blocking, &params, Some(&desired_head), &s.train, &s.train)
                .context("adversarial censoring training")?;
            (cfg.blocking.seed, blocked(out, log)?)
        }
    };

    let desired_acc = evaluate(&params, &heads["desired"], &s.eval, Task::Desired).context("evaluating")?;
    let ckpt = Checkpoint { seed: run_seed, config_hash: cfg.hash(), params, heads };
    save_checkpoint(&ckpt, out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{:?}: wrote {} in {:.1}s; desired-task eval accuracy {:.4}",
        baseline,
        out.display(),
        started.elapsed().as_secs_f64(),
        desired_acc
    );
    Ok(())
}

pub fn attack(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path, csv: Option<&Path>, jobs: usize) -> Result<(), CliError> {
    let s = load_splits(cfg, data)?;
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    check_input_dim(&ckpt.params, &s.val)?;
    if let Some(&n) = cfg.attack.n_grid.iter().find(|&&n| n > s.val.len()) {
        return Err(ConfigError::Invalid(format!("n = {n} exceeds the {} validation examples", s.val.len())).into());
    }
    let started = Instant::now();
    let mut report = attack_protocol(&ckpt.params, &s.val, &s.eval, &cfg.attack, jobs).context("attack")?;
    report.config_hash = cfg.attack_hash();
    report.checkpoint_hash = content_hash(&ckpt).context("hashing checkpoint")?;
    report.save(out).context("writing report")?;
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    for row in &report.summary {
        println!("n={:<5} best harmful accuracy {:.4} ± {:.4}", row.n, row.mean, row.ci_half_width);
    }
    let failed: usize = report.records.iter().map(|r| r.failed_trials).sum();
    println!("{} searches, {failed} failed trials, {:.1}s", report.records.len(), started.elapsed().as_secs_f64());
    Ok(())
}

pub fn report(model: &Path, reference: &Path, out: &Path) -> Result<(), CliError> {
    let load = |p: &Path| AttackReport::load(p).with_context(|| format!("loading {}", p.display()));
    let (m, r) = (load(model)?, load(reference)?);
    if m.config_hash != r.config_hash {
        return Err(ConfigError::Invalid(format!(
            "reports come from different attack configurations ({} vs {})",
            m.config_hash, r.config_hash
        ))
        .into());
    }
    let curve = few_shot_improvement(&m, &r).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mut csv = String::from("n,e_data_n,model_mean,model_ci95,reference_mean,reference_ci95,e_data\n");
    for p in &curve.points {
        let at = |rep: &AttackReport| rep.summary.iter().find(|s| s.n == p.n).cloned().expect("checked by few_shot_improvement");
        let (a, b) = (at(&m), at(&r));
        writeln!(csv, "{},{},{},{},{},{},{}", p.n, p.e_data_n, a.mean, a.ci_half_width, b.mean, b.ci_half_width, curve.e_data)
            .expect("in-memory write");
    }
    std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    println!("E_data = {:.4} over n = {:?}", curve.e_data, m.n_grid);
    Ok(())
}
