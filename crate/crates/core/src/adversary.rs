//! The evaluation-time adversary: fine-tune a released extractor on a few
//! harmful examples, with a random hyperparameter search whose every trial is
//! scored on the full evaluation population.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{BatchSampler, Task, TaskDataset};
use crate::error::{Error, Result};
use crate::metrics::confidence_interval;
use crate::models::{accuracy, features, head_logits, nll, Head, ParameterSet};
use crate::optim::{sgd_step, Adam, AdamConfig, OptimizerKind};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationProcedure {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// One entry per extractor layer; frozen layers are not updated.
    pub frozen: Vec<bool>,
}

impl AdaptationProcedure {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be at least 1".into()));
        }
        if self.frozen.len() != depth {
            return Err(Error::DimensionMismatch { what: "frozen-layer mask".into(), expected: depth, got: self.frozen.len() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub optimizers: Vec<OptimizerKind>,
    /// Log-uniform range.
    pub lr_min: f64,
    pub lr_max: f64,
    pub batch_sizes: Vec<usize>,
    /// Steps are drawn from `steps_min, steps_min + steps_stride, ..., steps_max`.
    pub steps_min: usize,
    pub steps_max: usize,
    pub steps_stride: usize,
    /// Search over freezing every prefix of the extractor's layers.
    pub freeze_prefixes: bool,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            optimizers: vec![OptimizerKind::Adam],
            lr_min: 1e-5,
            lr_max: 1e-1,
            batch_sizes: vec![4, 8, 16, 32],
            steps_min: 50,
            steps_max: 1000,
            steps_stride: 50,
            freeze_prefixes: true,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.optimizers.is_empty()
            && !self.batch_sizes.is_empty()
            && self.batch_sizes.iter().all(|&b| b > 0)
            && 0.0 < self.lr_min
            && self.lr_min <= self.lr_max
            && self.lr_max.is_finite()
            && self.steps_min > 0
            && self.steps_min <= self.steps_max
            && self.steps_stride > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid search space {self:?}")))
        }
    }

    pub fn sample(&self, depth: usize, rng: &mut seed::Rng) -> AdaptationProcedure {
        let optimizer = self.optimizers[rng.random_range(0..self.optimizers.len())];
        let lr = (rng.random_range(self.lr_min.ln()..=self.lr_max.ln())).exp();
        let batch_size = self.batch_sizes[rng.random_range(0..self.batch_sizes.len())];
        let choices = (self.steps_max - self.steps_min) / self.steps_stride;
        let steps = self.steps_min + self.steps_stride * rng.random_range(0..=choices);
        let prefix = if self.freeze_prefixes { rng.random_range(0..=depth) } else { 0 };
        AdaptationProcedure { optimizer, lr, steps, batch_size, frozen: (0..depth).map(|i| i < prefix).collect() }
    }
}

/// Class predictions' accuracy of `(params, head)` on every example of `ds`.
pub fn evaluate(params: &ParameterSet<f64>, head: &Head<f64>, ds: &TaskDataset, task: Task) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape, &vec![true; params.architecture().depth()]);
    let h = head.bind(&tape);
    let logits = head_logits(&h, features(&bound, tape.constant(ds.all_inputs()))?)?;
    Ok(logits.with_value(|z| accuracy(z, &ds.all_labels(task))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub accuracy: f64,
    pub failed: bool,
}

/// What an adaptation observer wants after seeing a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Flow {
    Continue,
    Stop,
}

/// Trains a copy of `params` plus a fresh head for `task` with `proc` on
/// `train` for `steps` updates. `observe(step, params, head)` runs before the
/// first update (step 0) and after each update. Returns `None` if the loss or
/// the parameters turn non-finite.
#[allow(clippy::too_many_arguments)]
pub(crate) fn adapt<F>(
    params: &ParameterSet<f64>,
    proc: &AdaptationProcedure,
    train: &TaskDataset,
    task: Task,
    steps: usize,
    seed: u64,
    mut observe: F,
) -> Result<Option<(ParameterSet<f64>, Head<f64>)>>
where
    F: FnMut(usize, &ParameterSet<f64>, &Head<f64>) -> Result<Flow>,
{
    proc.validate(params.architecture().depth())?;
    let mut params = params.clone();
    let mut head = Head::init(params.architecture().feature_dim(), train.num_classes(task), seed::derive(seed, &[0]))?;
    let trainable: Vec<usize> = (0..params.tensors().len()).filter(|&i| !proc.frozen[i / 2]).collect();
    let mut shapes: Vec<&Tensor<f64>> = trainable.iter().map(|&i| &params.tensors()[i]).collect();
    shapes.extend(head.tensors());
    let mut adam = Adam::new(AdamConfig::with_lr(proc.lr), &shapes);
    let mut sampler = BatchSampler::new(train.len(), proc.batch_size, seed::derive(seed, &[1]))?;

    if observe(0, &params, &head)? == Flow::Stop {
        return Ok(Some((params, head)));
    }
    for step in 1..=steps {
        let idx = sampler.next_batch();
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape, &proc.frozen);
        let h = head.bind(&tape);
        let loss = nll(head_logits(&h, features(&bound, tape.constant(train.inputs(&idx)))?)?, &train.labels(task, &idx))?;
        if !loss.item().is_finite() {
            return Ok(None);
        }
        let mut wrt: Vec<Var<'_, f64>> = trainable.iter().map(|&i| bound.vars()[i]).collect();
        wrt.extend(h.vars());
        let grads: Vec<Tensor<f64>> = tape.backward(loss, &wrt, false)?.iter().map(Var::value).collect();

        let (pt, hw, hb) = (params.tensors_mut(), &mut head.weight, &mut head.bias);
        let mut targets: Vec<&mut Tensor<f64>> =
            pt.iter_mut().enumerate().filter(|(i, _)| !proc.frozen[i / 2]).map(|(_, t)| t).collect();
        targets.push(hw);
        targets.push(hb);
        match proc.optimizer {
            OptimizerKind::Adam => adam.step(&mut targets, &grads),
            OptimizerKind::Sgd => sgd_step(&mut targets, &grads, proc.lr),
        }
        if !params.all_finite() || !head.weight.all_finite() || !head.bias.all_finite() {
            return Ok(None);
        }
        if observe(step, &params, &head)? == Flow::Stop {
            break;
        }
    }
    Ok(Some((params, head)))
}

/// Fine-tunes a copy of `params` plus a fresh harmful head (seeded by
/// `seed`) with `proc` on `train`, then scores it on `eval`. A trial whose
/// loss turns non-finite scores chance accuracy.
pub fn finetune(
    params: &ParameterSet<f64>,
    proc: &AdaptationProcedure,
    train: &TaskDataset,
    eval: &TaskDataset,
    seed: u64,
) -> Result<TrialOutcome> {
    let chance = 1.0 / train.num_harmful_classes() as f64;
    let failed = TrialOutcome { accuracy: chance, failed: true };
    let Some((params, head)) = adapt(params, proc, train, Task::Harmful, proc.steps, seed, |_, _, _| Ok(Flow::Continue))? else {
        return Ok(failed);
    };
    let acc = evaluate(&params, &head, eval, Task::Harmful)?;
    Ok(if acc.is_finite() { TrialOutcome { accuracy: acc, failed: false } } else { failed })
}

/// Trial `t` of a search seeded with `seed`: its procedure and fine-tuning seed
/// depend only on `(seed, t)`, so a longer search extends a shorter one.
pub fn trial_plan(space: &SearchSpace, depth: usize, seed: u64, trial: usize) -> (AdaptationProcedure, u64) {
    let proc = space.sample(depth, &mut seed::derived_rng(seed, &[trial as u64, 0]));
    (proc, seed::derive(seed, &[trial as u64, 1]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub procedure: AdaptationProcedure,
    pub accuracy: f64,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrialRecord,
    pub failed_trials: usize,
}

/// Best-of-trials reduction; ties keep the earliest trial.
fn best_of(records: Vec<TrialRecord>) -> SearchResult {
    let failed_trials = records.iter().filter(|r| r.failed).count();
    let best = records
        .into_iter()
        .reduce(|a, b| if b.accuracy > a.accuracy { b } else { a })
        .expect("at least one trial");
    SearchResult { best, failed_trials }
}

fn run_trial(
    params: &ParameterSet<f64>,
    space: &SearchSpace,
    train: &TaskDataset,
    eval: &TaskDataset,
    seed: u64,
    trial: usize,
) -> Result<TrialRecord> {
    let (procedure, ft_seed) = trial_plan(space, params.architecture().depth(), seed, trial);
    let out = finetune(params, &procedure, train, eval, ft_seed)?;
    Ok(TrialRecord { trial, procedure, accuracy: out.accuracy, failed: out.failed })
}

/// Random search over `space`; every trial is scored on `eval`.
pub fn search(
    params: &ParameterSet<f64>,
    train: &TaskDataset,
    eval: &TaskDataset,
    trials: usize,
    space: &SearchSpace,
    seed: u64,
) -> Result<SearchResult> {
    if trials == 0 {
        return Err(Error::Config("search needs at least one trial".into()));
    }
    space.validate()?;
    let records = (0..trials).map(|t| run_trial(params, space, train, eval, seed, t)).collect::<Result<Vec<_>>>()?;
    Ok(best_of(records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    pub trials: usize,
    pub space: SearchSpace,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { n_grid: vec![4, 8, 16, 32, 64, 128, 256], seeds: 6, trials: 50, space: SearchSpace::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub n: usize,
    pub seed: usize,
    pub best_accuracy: f64,
    pub best_trial: usize,
    pub best_procedure: AdaptationProcedure,
    pub failed_trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub n: usize,
    pub mean: f64,
    /// 95% confidence half-width across seeds.
    pub ci_half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    pub trials: usize,
    pub records: Vec<AttackRecord>,
    pub summary: Vec<AttackSummary>,
}

impl AttackReport {
    pub fn mean_at(&self, n: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.n == n).map(|s| s.mean)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// `n,seed,best_accuracy`, one row per record.
    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        writeln!(out, "n,seed,best_accuracy").expect("in-memory write");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.n, r.seed, r.best_accuracy).expect("in-memory write");
        }
        String::from_utf8(out).expect("ascii")
    }
}

/// For every `n` and seed: subsample `n` examples from `val`, run the search
/// scoring on `eval`, keep the best. Trials run on `jobs` threads; results
/// are keyed by `(n, seed, trial)` so the report does not depend on `jobs`.
pub fn attack_protocol(
    params: &ParameterSet<f64>,
    val: &TaskDataset,
    eval: &TaskDataset,
    cfg: &AttackConfig,
    jobs: usize,
) -> Result<AttackReport> {
    cfg.space.validate()?;
    if cfg.n_grid.is_empty() || cfg.seeds == 0 || cfg.trials == 0 {
        return Err(Error::Config("attack needs a nonempty n-grid, seeds >= 1 and trials >= 1".into()));
    }
    if cfg.seeds < 2 {
        return Err(Error::Config("confidence intervals need at least 2 seeds".into()));
    }
    if let Some(&n) = cfg.n_grid.iter().find(|&&n| n == 0 || n > val.len()) {
        return Err(Error::Config(format!("n = {n} is outside 1..={}", val.len())));
    }
    let mut subsets = BTreeMap::new();
    for &n in &cfg.n_grid {
        for s in 0..cfg.seeds {
            subsets.insert((n, s), val.subsample(n, seed::derive(cfg.seed, &[n as u64, s as u64, 0]))?);
        }
    }
    let search_seed = |n: usize, s: usize| seed::derive(cfg.seed, &[n as u64, s as u64, 1]);
    let jobs_list: Vec<(usize, usize, usize)> = subsets
        .keys()
        .flat_map(|&(n, s)| (0..cfg.trials).map(move |t| (n, s, t)))
        .collect();

    let run = || -> Result<Vec<((usize, usize, usize), TrialRecord)>> {
        jobs_list
            .par_iter()
            .map(|&(n, s, t)| Ok(((n, s, t), run_trial(params, &cfg.space, &subsets[&(n, s)], eval, search_seed(n, s), t)?)))
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: BTreeMap<_, _> = pool.install(run)?.into_iter().collect();

    let mut records = Vec::new();
    let mut summary = Vec::new();
    for &n in &cfg.n_grid {
        let mut bests = Vec::with_capacity(cfg.seeds);
        for s in 0..cfg.seeds {
            let trials = (0..cfg.trials).map(|t| results[&(n, s, t)].clone()).collect();
            let r = best_of(trials);
            bests.push(r.best.accuracy);
            records.push(AttackRecord {
                n,
                seed: s,
                best_accuracy: r.best.accuracy,
                best_trial: r.best.trial,
                best_procedure: r.best.procedure,
                failed_trials: r.failed_trials,
            });
        }
        let (mean, ci_half_width) = confidence_interval(&bests)?;
        summary.push(AttackSummary { n, mean, ci_half_width });
    }
    Ok(AttackReport {
        config_hash: String::new(),
        checkpoint_hash: String::new(),
        n_grid: cfg.n_grid.clone(),
        seeds: cfg.seeds,
        trials: cfg.trials,
        records,
        summary,
    })
}
