//! Meta-learned adversarial censoring.
//!
//! Each meta-step simulates an adversary: starting from the current blocked
//! extractor θ̃ and the adversary's head `w_h`, it takes K differentiable
//! fine-tuning steps on harmful batches at its learnable rate α_h. The
//! harmful loss of every adapted model is measured on a held-out harmful
//! batch. Then
//!
//! * θ̃ descends `ℓ^d − mean_k ℓ^h_k` (so it *ascends* the adapted harmful loss),
//! * φ = {w_h, log α_h} descends `mean_k ℓ^h_k`,
//! * the desired head `w_d` descends `ℓ^d`,
//!
//! each with its own Adam state. With `k_max = 0` and calibration off this
//! is plain adversarial censoring.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::calibration::{calibrated_nll, CalibrationConfig};
use crate::data::{Task, TaskDataset};
use crate::error::{Error, Result};
use crate::models::{features, head_logits, nll, AdversarialParams, BoundAdversary, BoundHead, BoundParams, Head, ParameterSet};
use crate::optim::{Adam, AdamConfig, OptimizerKind};
use crate::scalar::Scalar;
use crate::seed;

const INNER_BETA1: f64 = 0.9;
const INNER_BETA2: f64 = 0.999;
const INNER_EPS: f64 = 1e-8;

/// One simulated adaptation: an update rule applied for `steps` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerProcedure {
    pub optimizer: OptimizerKind,
    pub steps: usize,
}

/// The simulated adversary's procedure family: any listed optimizer, any
/// depth in `1..=k_max`, always at the learned rate α_h.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerFamily {
    pub optimizers: Vec<OptimizerKind>,
    pub k_max: usize,
}

pub fn sample_procedure(family: &InnerFamily, rng: &mut seed::Rng) -> Result<InnerProcedure> {
    if family.optimizers.is_empty() {
        return Err(Error::Config("inner procedure family has no optimizers".into()));
    }
    if family.k_max == 0 {
        return Err(Error::Config("cannot sample an adaptation procedure with k_max = 0".into()));
    }
    let optimizer = family.optimizers[rng.random_range(0..family.optimizers.len())];
    let steps = rng.random_range(1..=family.k_max);
    Ok(InnerProcedure { optimizer, steps })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_dataset(ds: &TaskDataset, task: Task, idx: &[usize]) -> Self {
        Batch { x: ds.inputs(idx), y: ds.labels(task, idx) }
    }
}

/// Models θ_1..θ_K and heads w_h^1..w_h^K produced by the inner loop.
#[derive(Clone, Debug)]
pub struct InnerTrajectory<'t, T> {
    pub params: Vec<BoundParams<'t, T>>,
    pub heads: Vec<BoundHead<'t, T>>,
    pub procedure: InnerProcedure,
}

fn batch_loss<'t, T: Scalar>(params: &BoundParams<'t, T>, head: &BoundHead<'t, T>, batch: &Batch<T>) -> Result<Var<'t, T>> {
    let tape = head.weight.tape();
    let x = tape.constant(batch.x.clone());
    nll(head_logits(head, features(params, x)?)?, &batch.y)
}

/// Runs the procedure from (θ̃, w_h), recording every update so gradients
/// reach θ̃ and φ. Adam here updates `p − α·m̂ / sqrt(v̂ + ε²)`, which keeps
/// the update differentiable where a gradient entry is exactly zero; its
/// moment state starts fresh on every call.
pub fn inner_adapt<'t, T: Scalar>(
    theta: &BoundParams<'t, T>,
    adv: &BoundAdversary<'t, T>,
    procedure: InnerProcedure,
    batches: &[Batch<T>],
) -> Result<InnerTrajectory<'t, T>> {
    if batches.len() < procedure.steps {
        return Err(Error::Config(format!("{} inner steps need as many batches, got {}", procedure.steps, batches.len())));
    }
    let arch = theta.architecture().clone();
    let n = theta.vars().len();
    let alpha = adv.inner_lr()?;
    let mut cur: Vec<Var<'t, T>> = theta.vars().iter().copied().chain(adv.head.vars()).collect();
    let mut moments: Option<(Vec<Var<'t, T>>, Vec<Var<'t, T>>)> = None;
    let mut out = InnerTrajectory { params: Vec::new(), heads: Vec::new(), procedure };

    for (k, batch) in batches[..procedure.steps].iter().enumerate() {
        let params = BoundParams::from_vars(arch.clone(), cur[..n].to_vec());
        let head = BoundHead { weight: cur[n], bias: cur[n + 1] };
        let loss = batch_loss(&params, &head, batch)?;
        let tape = loss.tape();
        let grads = tape.backward(loss, &cur, true)?;
        cur = match procedure.optimizer {
            OptimizerKind::Sgd => cur
                .iter()
                .zip(&grads)
                .map(|(p, g)| p.sub(g.mul_scalar(alpha)?))
                .collect::<std::result::Result<_, _>>()?,
            OptimizerKind::Adam => {
                let t = (k + 1) as i32;
                let (b1, b2) = (T::lit(INNER_BETA1), T::lit(INNER_BETA2));
                let c1 = T::one() / (T::one() - b1.powi(t));
                let c2 = T::one() / (T::one() - b2.powi(t));
                let (mut ms, mut vs) = (Vec::with_capacity(cur.len()), Vec::with_capacity(cur.len()));
                let mut next = Vec::with_capacity(cur.len());
                for (i, (p, g)) in cur.iter().zip(&grads).enumerate() {
                    let gm = g.scale(T::one() - b1)?;
                    let gv = g.square()?.scale(T::one() - b2)?;
                    let (m, v) = match &moments {
                        Some((m0, v0)) => (m0[i].scale(b1)?.add(gm)?, v0[i].scale(b2)?.add(gv)?),
                        None => (gm, gv),
                    };
                    let denom = v.scale(c2)?.add_const(T::lit(INNER_EPS * INNER_EPS))?.sqrt()?;
                    let step = m.scale(c1)?.div(denom)?.mul_scalar(alpha)?;
                    next.push(p.sub(step)?);
                    ms.push(m);
                    vs.push(v);
                }
                moments = Some((ms, vs));
                next
            }
        };
        out.params.push(BoundParams::from_vars(arch.clone(), cur[..n].to_vec()));
        out.heads.push(BoundHead { weight: cur[n], bias: cur[n + 1] });
    }
    Ok(out)
}

/// Outer-loop losses as tape nodes.
#[derive(Clone, Debug)]
pub struct OuterLossVars<'t, T> {
    pub desired: Var<'t, T>,
    /// One entry per inner step, or the single unadapted evaluation when K = 0.
    pub harmful: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> OuterLossVars<'t, T> {
    pub fn mean_harmful(&self) -> Result<Var<'t, T>> {
        let mut acc = self.harmful[0];
        for h in &self.harmful[1..] {
            acc = acc.add(*h)?;
        }
        Ok(acc.scale(T::one() / T::lit(self.harmful.len() as f64))?)
    }

    pub fn values(&self) -> Result<OuterLosses> {
        let harmful: Vec<f64> = self.harmful.iter().map(|h| h.item().as_f64()).collect();
        let desired = self.desired.item().as_f64();
        let mean = harmful.iter().sum::<f64>() / harmful.len() as f64;
        let out = OuterLosses { desired_nll: desired, harmful_nlls: harmful, objective: desired - mean };
        if !out.desired_nll.is_finite() || out.harmful_nlls.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("outer losses {out:?}")));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterLosses {
    pub desired_nll: f64,
    pub harmful_nlls: Vec<f64>,
    /// `desired_nll − mean(harmful_nlls)`, the quantity θ̃ descends.
    pub objective: f64,
}

/// ℓ^d at the unadapted θ̃ and ℓ^h_k of every adapted model on the held-out batch.
pub fn outer_losses<'t, T: Scalar>(
    trajectory: &InnerTrajectory<'t, T>,
    theta: &BoundParams<'t, T>,
    adv_head: &BoundHead<'t, T>,
    desired_head: &BoundHead<'t, T>,
    desired_batch: &Batch<T>,
    harmful_batch: &Batch<T>,
    calibration: Option<&CalibrationConfig>,
) -> Result<OuterLossVars<'t, T>> {
    let tape = desired_head.weight.tape();
    let desired = batch_loss(theta, desired_head, desired_batch)?;
    let x = tape.constant(harmful_batch.x.clone());
    let harmful_at = |params: &BoundParams<'t, T>, head: &BoundHead<'t, T>| -> Result<Var<'t, T>> {
        let logits = head_logits(head, features(params, x)?)?;
        calibrated_nll(logits, &harmful_batch.y, calibration)
    };
    let harmful = if trajectory.params.is_empty() {
        vec![harmful_at(theta, adv_head)?]
    } else {
        trajectory.params.iter().zip(&trajectory.heads).map(|(p, h)| harmful_at(p, h)).collect::<Result<_>>()?
    };
    Ok(OuterLossVars { desired, harmful })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockingConfig {
    pub total_steps: usize,
    pub k_max: usize,
    pub inner_optimizers: Vec<OptimizerKind>,
    /// η, for θ̃.
    pub outer_lr: f64,
    /// η_h, for φ.
    pub adversary_lr: f64,
    /// η_d, for w_d.
    pub desired_lr: f64,
    pub initial_inner_lr: f64,
    pub calibration: bool,
    pub calibration_solver: CalibrationConfig,
    pub desired_batch: usize,
    pub harmful_batch: usize,
    pub seed: u64,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        BlockingConfig {
            total_steps: 3000,
            k_max: 16,
            inner_optimizers: vec![OptimizerKind::Sgd, OptimizerKind::Adam],
            outer_lr: 1e-3,
            adversary_lr: 1e-3,
            desired_lr: 1e-3,
            initial_inner_lr: 1e-2,
            calibration: true,
            calibration_solver: CalibrationConfig::default(),
            desired_batch: 32,
            harmful_batch: 32,
            seed: 0,
        }
    }
}

impl BlockingConfig {
    /// The adversarial-censoring baseline: no inner loop, no calibration.
    pub fn adversarial_censoring(&self) -> Self {
        BlockingConfig { k_max: 0, calibration: false, ..self.clone() }
    }

    pub fn family(&self) -> InnerFamily {
        InnerFamily { optimizers: self.inner_optimizers.clone(), k_max: self.k_max }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.outer_lr, self.adversary_lr, self.desired_lr];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config(format!("outer learning rates must be finite and non-negative, got {rates:?}")));
        }
        if !(self.initial_inner_lr > 0.0 && self.initial_inner_lr.is_finite()) {
            return Err(Error::Config(format!("initial_inner_lr must be positive, got {}", self.initial_inner_lr)));
        }
        if self.k_max > 0 && self.inner_optimizers.is_empty() {
            return Err(Error::Config("inner_optimizers must not be empty".into()));
        }
        if self.desired_batch == 0 || self.harmful_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a meta-step reads and writes.
#[derive(Clone, Debug)]
pub struct MlacState<T> {
    pub params: ParameterSet<T>,
    pub desired_head: Head<T>,
    pub adversary: AdversarialParams<T>,
    opt_theta: Adam<T>,
    opt_phi: Adam<T>,
    opt_desired: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> MlacState<T> {
    pub fn new(cfg: &BlockingConfig, params: ParameterSet<T>, desired_head: Head<T>, adversary: AdversarialParams<T>) -> Self {
        let opt_theta = Adam::new(AdamConfig::with_lr(cfg.outer_lr), &params.tensors().iter().collect::<Vec<_>>());
        let opt_phi = Adam::new(
            AdamConfig::with_lr(cfg.adversary_lr),
            &[&adversary.head.weight, &adversary.head.bias, &adversary.log_lr],
        );
        let opt_desired = Adam::new(AdamConfig::with_lr(cfg.desired_lr), &[&desired_head.weight, &desired_head.bias]);
        MlacState { params, desired_head, adversary, opt_theta, opt_phi, opt_desired, step: 0 }
    }
}

/// Batches for one meta-step: b_d, the inner batches b_h^1..b_h^K and the
/// held-out b_h, all harmful batches pairwise disjoint.
#[derive(Clone, Debug)]
pub struct StepBatches<T> {
    pub procedure: Option<InnerProcedure>,
    pub desired: Batch<T>,
    pub inner: Vec<Batch<T>>,
    pub held_out: Batch<T>,
}

pub fn sample_step<T: Scalar>(cfg: &BlockingConfig, step: usize, d_d: &TaskDataset, d_h: &TaskDataset) -> Result<StepBatches<T>> {
    let mut rng = seed::derived_rng(cfg.seed, &[step as u64]);
    let procedure = if cfg.k_max == 0 { None } else { Some(sample_procedure(&cfg.family(), &mut rng)?) };
    let k = procedure.map_or(0, |p| p.steps);
    let bd = cfg.desired_batch.min(d_d.len());
    let desired_idx = rand::seq::index::sample(&mut rng, d_d.len(), bd).into_vec();
    let need = cfg.harmful_batch * (k + 1);
    if need > d_h.len() {
        return Err(Error::Data(format!("{} disjoint harmful batches of {} need {need} examples, have {}", k + 1, cfg.harmful_batch, d_h.len())));
    }
    let harmful_idx = rand::seq::index::sample(&mut rng, d_h.len(), need).into_vec();
    let mut chunks = harmful_idx.chunks(cfg.harmful_batch).map(|c| Batch::from_dataset(d_h, Task::Harmful, c));
    let inner: Vec<_> = chunks.by_ref().take(k).collect();
    let held_out = chunks.next().expect("k + 1 chunks were drawn");
    Ok(StepBatches { procedure, desired: Batch::from_dataset(d_d, Task::Desired, &desired_idx), inner, held_out })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub desired_nll: f64,
    pub mean_harmful_nll: f64,
    /// Inner learning rate after the step.
    pub alpha_h: f64,
}

/// Gradients of one recorded meta-step, per parameter group.
pub struct MetaGradients<T> {
    pub theta: Vec<Tensor<T>>,
    pub phi: Vec<Tensor<T>>,
    pub desired_head: Vec<Tensor<T>>,
    pub losses: OuterLosses,
}

/// Records the meta-objective for `state` on `batches` and differentiates it once.
///
/// With J = ℓ^d − mean ℓ^h: θ̃ takes ∂J/∂θ̃; φ takes ∂(mean ℓ^h)/∂φ = −∂J/∂φ
/// because ℓ^d does not depend on φ; w_d takes ∂J/∂w_d = ∂ℓ^d/∂w_d because
/// the harmful losses do not depend on w_d.
pub fn meta_gradients<T: Scalar>(state: &MlacState<T>, cfg: &BlockingConfig, batches: &StepBatches<T>) -> Result<MetaGradients<T>> {
    let tape = Tape::new();
    let theta = state.params.bind(&tape);
    let adv = state.adversary.bind(&tape);
    let wd = state.desired_head.bind(&tape);
    let trajectory = match batches.procedure {
        Some(p) => inner_adapt(&theta, &adv, p, &batches.inner)?,
        None => InnerTrajectory { params: vec![], heads: vec![], procedure: InnerProcedure { optimizer: OptimizerKind::Sgd, steps: 0 } },
    };
    let calibration = cfg.calibration.then_some(&cfg.calibration_solver);
    let losses = outer_losses(&trajectory, &theta, &adv.head, &wd, &batches.desired, &batches.held_out, calibration)?;
    let values = losses.values()?;
    let objective = losses.desired.sub(losses.mean_harmful()?)?;

    let n = theta.vars().len();
    let wrt: Vec<Var<'_, T>> = theta.vars().iter().copied().chain(adv.vars()).chain(wd.vars()).collect();
    let grads: Vec<Tensor<T>> = tape.backward(objective, &wrt, false)?.iter().map(Var::value).collect();
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("meta-gradient at step {}", state.step)));
    }
    let mut grads = grads.into_iter();
    let theta_g: Vec<_> = grads.by_ref().take(n).collect();
    let phi_g: Vec<_> = grads.by_ref().take(3).map(|g| g.map(|v| -v)).collect();
    let desired_g: Vec<_> = grads.collect();
    Ok(MetaGradients { theta: theta_g, phi: phi_g, desired_head: desired_g, losses: values })
}

/// One meta-step: records, differentiates, and applies the three Adam updates.
pub fn mlac_step<T: Scalar>(state: &mut MlacState<T>, cfg: &BlockingConfig, batches: &StepBatches<T>) -> Result<StepLog> {
    let g = meta_gradients(state, cfg, batches)?;
    state.opt_theta.step(&mut state.params.tensors_mut().iter_mut().collect::<Vec<_>>(), &g.theta);
    let adv = &mut state.adversary;
    state.opt_phi.step(&mut [&mut adv.head.weight, &mut adv.head.bias, &mut adv.log_lr], &g.phi);
    let wd = &mut state.desired_head;
    state.opt_desired.step(&mut [&mut wd.weight, &mut wd.bias], &g.desired_head);
    let log = StepLog {
        step: state.step,
        desired_nll: g.losses.desired_nll,
        mean_harmful_nll: g.losses.harmful_nlls.iter().sum::<f64>() / g.losses.harmful_nlls.len() as f64,
        alpha_h: state.adversary.inner_lr().as_f64(),
    };
    state.step += 1;
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct BlockingOutput<T> {
    pub params: ParameterSet<T>,
    pub desired_head: Head<T>,
    pub adversary: AdversarialParams<T>,
    pub log: Vec<StepLog>,
}

/// Seeds of the freshly initialized heads, derived from the run seed.
pub fn desired_head_seed(seed: u64) -> u64 {
    seed::derive(seed, &[u64::MAX, 1])
}

pub fn adversary_head_seed(seed: u64) -> u64 {
    seed::derive(seed, &[u64::MAX, 2])
}

/// Runs `cfg.total_steps` meta-steps from `init`. The desired head starts
/// from `desired_head` when given, otherwise from a seeded initialization.
pub fn mlac_train<T: Scalar>(
    cfg: &BlockingConfig,
    init: &ParameterSet<T>,
    desired_head: Option<&Head<T>>,
    d_d: &TaskDataset,
    d_h: &TaskDataset,
) -> Result<BlockingOutput<T>> {
    cfg.validate()?;
    let arch = init.architecture();
    for (what, ds) in [("desired data", d_d), ("harmful data", d_h)] {
        if ds.input_dim() != arch.input_dim() {
            return Err(Error::DimensionMismatch { what: what.into(), expected: arch.input_dim(), got: ds.input_dim() });
        }
    }
    let feature_dim = arch.feature_dim();
    let wd = match desired_head {
        Some(h) if h.feature_dim() == feature_dim && h.num_classes() == d_d.num_desired_classes() => h.clone(),
        Some(h) => {
            return Err(Error::Architecture(format!(
                "desired head is {}x{}, expected {}x{}",
                h.feature_dim(),
                h.num_classes(),
                feature_dim,
                d_d.num_desired_classes()
            )))
        }
        None => Head::init(feature_dim, d_d.num_desired_classes(), desired_head_seed(cfg.seed))?,
    };
    let wh = Head::init(feature_dim, d_h.num_harmful_classes(), adversary_head_seed(cfg.seed))?;
    let adversary = AdversarialParams::new(wh, cfg.initial_inner_lr)?;
    let mut state = MlacState::new(cfg, init.clone(), wd, adversary);
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batches = sample_step(cfg, step, d_d, d_h)?;
        log.push(mlac_step(&mut state, cfg, &batches)?);
    }
    Ok(BlockingOutput { params: state.params, desired_head: state.desired_head, adversary: state.adversary, log })
}

/// The adversarial-censoring baseline: [`mlac_train`] with `k_max = 0` and calibration off.
pub fn adversarial_censoring_train<T: Scalar>(
    cfg: &BlockingConfig,
    init: &ParameterSet<T>,
    desired_head: Option<&Head<T>>,
    d_d: &TaskDataset,
    d_h: &TaskDataset,
) -> Result<BlockingOutput<T>> {
    mlac_train(&cfg.adversarial_censoring(), init, desired_head, d_d, d_h)
}

pub fn write_log_csv(log: &[StepLog], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,desired_nll,mean_harmful_nll,alpha_h").expect("in-memory write");
    for r in log {
        writeln!(out, "{},{},{},{}", r.step, r.desired_nll, r.mean_harmful_nll, r.alpha_h).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
