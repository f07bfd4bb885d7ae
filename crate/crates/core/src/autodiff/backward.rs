use crate::scalar::Scalar;

use super::tape::{Prim, Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;

impl<T: Scalar> Tape<T> {
    /// Reverse-mode gradients of the rank-0 node `loss` with respect to `wrt`.
    ///
    /// The backward pass is recorded on this tape. With `create_graph` the
    /// returned gradients are differentiable nodes; without it they are
    /// constants. A `wrt` node that `loss` does not depend on gets a zero
    /// gradient.
    pub fn backward<'t>(
        &'t self,
        loss: Var<'t, T>,
        wrt: &[Var<'t, T>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t, T>>, AutodiffError> {
        self.check_owned(&loss)?;
        for w in wrt {
            self.check_owned(w)?;
        }
        let loss_shape = loss.shape();
        if !loss_shape.is_empty() {
            return Err(AutodiffError::NotScalar(loss_shape));
        }

        let n = loss.id + 1;
        // Nodes on some path from a `wrt` node.
        let mut reach = vec![false; n];
        {
            let nodes = self.nodes();
            let mut lo = n;
            for w in wrt {
                if w.id < n {
                    reach[w.id] = true;
                    lo = lo.min(w.id);
                }
            }
            for i in lo..n {
                if !reach[i] && nodes[i].prim.is_some() {
                    reach[i] = nodes[i].inputs().iter().any(|&j| reach[j]);
                }
            }
        }

        let prev = self.set_grad_enabled(create_graph);
        let result = self.propagate(loss, &reach, wrt);
        self.set_grad_enabled(prev);
        result
    }

    fn propagate<'t>(
        &'t self,
        loss: Var<'t, T>,
        reach: &[bool],
        wrt: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>, AutodiffError> {
        let n = reach.len();
        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; n];
        grads[loss.id] = Some(self.scalar_constant(T::one()));

        for i in (0..n).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let (prim, inputs) = {
                let nodes = self.nodes();
                match &nodes[i].prim {
                    Some(p) => (p.clone(), nodes[i].inputs().to_vec()),
                    None => continue,
                }
            };
            let needed: Vec<bool> = inputs.iter().map(|&j| reach[j]).collect();
            if !needed.iter().any(|&b| b) {
                continue;
            }
            let ins: Vec<Var<'t, T>> = inputs.iter().map(|&id| Var { tape: self, id }).collect();
            let out = Var { tape: self, id: i };
            let contribs = self.vjp(&prim, &ins, out, g, &needed)?;
            for ((&j, c), need) in inputs.iter().zip(contribs).zip(&needed) {
                if !need {
                    continue;
                }
                let Some(c) = c else { continue };
                grads[j] = Some(match grads[j] {
                    Some(acc) => acc.add(c)?,
                    None => c,
                });
            }
        }

        wrt.iter()
            .map(|w| {
                let g = if w.id < n { grads[w.id] } else { None };
                match g {
                    Some(g) if self.grad_enabled() => Ok(g),
                    Some(g) => Ok(g.detach()),
                    None => Ok(self.constant(Tensor::zeros(&w.shape()))),
                }
            })
            .collect()
    }

    /// Constant tensor with the same shape as `like`, filled by `f` over its values.
    fn mask<'t>(&'t self, like: Var<'t, T>, f: impl Fn(T) -> bool) -> Var<'t, T> {
        let m = like.with_value(|t| t.map(|v| if f(v) { T::one() } else { T::zero() }));
        self.constant(m)
    }

    fn vjp<'t>(
        &'t self,
        prim: &Prim<T>,
        ins: &[Var<'t, T>],
        out: Var<'t, T>,
        g: Var<'t, T>,
        needed: &[bool],
    ) -> Result<Vec<Option<Var<'t, T>>>, AutodiffError> {
        let a = ins[0];
        let need = |k: usize| needed.get(k).copied().unwrap_or(false);
        let r = match prim {
            Prim::MatMul => {
                let b = ins[1];
                let ga = if need(0) { Some(g.matmul(b.t()?)?) } else { None };
                let gb = if need(1) { Some(a.t()?.matmul(g)?) } else { None };
                vec![ga, gb]
            }
            Prim::Transpose => vec![Some(g.t()?)],
            Prim::Add | Prim::Sub => {
                let b = ins[1];
                let gb = if need(1) {
                    let reduced = if b.shape() == a.shape() { g } else { g.sum(0)? };
                    Some(if matches!(prim, Prim::Sub) { reduced.neg()? } else { reduced })
                } else {
                    None
                };
                vec![Some(g), gb]
            }
            Prim::Mul => {
                let b = ins[1];
                let ga = if need(0) { Some(g.mul(b)?) } else { None };
                let gb = if need(1) { Some(g.mul(a)?) } else { None };
                vec![ga, gb]
            }
            Prim::Div => {
                let b = ins[1];
                let ga = if need(0) { Some(g.div(b)?) } else { None };
                // d(a/b)/db = -(a/b)/b
                let gb = if need(1) { Some(g.mul(out)?.div(b)?.neg()?) } else { None };
                vec![ga, gb]
            }
            Prim::MulScalar => {
                let s = ins[1];
                let ga = if need(0) { Some(g.mul_scalar(s)?) } else { None };
                let gs = if need(1) { Some(g.mul(a)?.sum_all()?) } else { None };
                vec![ga, gs]
            }
            Prim::Scale(c) => vec![Some(g.scale(*c)?)],
            Prim::AddConst(_) => vec![Some(g)],
            Prim::Tanh => {
                // 1 - y^2
                let d = out.square()?.neg()?.add_const(T::one())?;
                vec![Some(g.mul(d)?)]
            }
            Prim::Relu => {
                let m = self.mask(a, |v| v > T::zero());
                vec![Some(g.mul(m)?)]
            }
            Prim::Exp => vec![Some(g.mul(out)?)],
            Prim::Log => vec![Some(g.div(a)?)],
            Prim::Sqrt => vec![Some(g.div(out)?.scale(T::lit(0.5))?)],
            Prim::LogSoftmax => {
                let shape = out.shape();
                let last = shape.len() - 1;
                let softmax = out.exp()?;
                let total = g.sum(last)?.expand(last, shape[last])?;
                vec![Some(g.sub(softmax.mul(total)?)?)]
            }
            Prim::Gather(idx) => {
                let classes = *a.shape().last().expect("gather input has rank >= 1");
                vec![Some(self.record(Prim::Scatter { indices: idx.clone(), classes }, &[g])?)]
            }
            Prim::Scatter { indices, .. } => vec![Some(self.record(Prim::Gather(indices.clone()), &[g])?)],
            Prim::Sum(axis) => {
                let size = a.shape()[*axis];
                vec![Some(g.expand(*axis, size)?)]
            }
            Prim::Mean(axis) => {
                let size = a.shape()[*axis];
                vec![Some(g.expand(*axis, size)?.scale(T::one() / T::lit(size as f64))?)]
            }
            Prim::Expand { axis, .. } => vec![Some(g.sum(*axis)?)],
            Prim::SumAll => vec![Some(self.record(Prim::Fill(a.shape()), &[g])?)],
            Prim::Fill(_) => {
                let total = g.sum_all()?;
                let target = a.shape();
                let total = if target.is_empty() { total } else { self.record(Prim::Fill(target), &[total])? };
                vec![Some(total)]
            }
            Prim::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let m = self.mask(a, |v| v > lo && v < hi);
                vec![Some(g.mul(m)?)]
            }
        };
        Ok(r)
    }
}
