//! Plain supervised training of an extractor with one head per task.
//!
//! Used for the fine-tuned baseline (desired task only) and for producing a
//! pretrained starting point that represents both tasks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{BatchSampler, Task, TaskDataset};
use crate::error::{Error, Result};
use crate::models::{features, head_logits, nll, Head, ParameterSet};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig { steps: 3000, lr: 1e-3, batch: 64, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SupervisedOutput<T> {
    pub params: ParameterSet<T>,
    pub heads: Vec<(Task, Head<T>)>,
    /// Summed task loss per step.
    pub losses: Vec<f64>,
}

/// Adam on the sum of the tasks' NLLs, extractor and heads jointly.
pub fn train_supervised<T: Scalar>(
    cfg: &SupervisedConfig,
    init: &ParameterSet<T>,
    heads: Vec<(Task, Head<T>)>,
    ds: &TaskDataset,
) -> Result<SupervisedOutput<T>> {
    if heads.is_empty() {
        return Err(Error::Config("supervised training needs at least one head".into()));
    }
    if ds.input_dim() != init.architecture().input_dim() {
        return Err(Error::DimensionMismatch { what: "training data".into(), expected: init.architecture().input_dim(), got: ds.input_dim() });
    }
    let mut params = init.clone();
    let mut heads = heads;
    let mut shapes: Vec<&Tensor<T>> = params.tensors().iter().collect();
    shapes.extend(heads.iter().flat_map(|(_, h)| h.tensors()));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &shapes);
    let mut sampler = BatchSampler::new(ds.len(), cfg.batch, seed::derive(cfg.seed, &[7]))?;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let bound_heads: Vec<_> = heads.iter().map(|(_, h)| h.bind(&tape)).collect();
        let f = features(&bound, tape.constant(ds.inputs(&idx)))?;
        let mut total: Option<Var<'_, T>> = None;
        for ((task, _), h) in heads.iter().zip(&bound_heads) {
            let l = nll(head_logits(h, f)?, &ds.labels(*task, &idx))?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        let total = total.expect("at least one head");
        let value = total.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("supervised loss at step {step}")));
        }
        losses.push(value);
        let mut wrt: Vec<Var<'_, T>> = bound.vars().to_vec();
        wrt.extend(bound_heads.iter().flat_map(|h| h.vars()));
        let grads: Vec<Tensor<T>> = tape.backward(total, &wrt, false)?.iter().map(Var::value).collect();
        drop(bound_heads);
        drop(bound);

        let (pt, rest) = (params.tensors_mut(), &mut heads);
        let mut targets: Vec<&mut Tensor<T>> = pt.iter_mut().collect();
        for (_, h) in rest.iter_mut() {
            targets.push(&mut h.weight);
            targets.push(&mut h.bias);
        }
        opt.step(&mut targets, &grads);
    }
    Ok(SupervisedOutput { params, heads, losses })
}
