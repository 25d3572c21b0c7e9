//! Reverse-mode differentiation over the fixed op set the kit needs.
//!
//! A `Tape` is a define-by-run graph: each op computes its value immediately
//! and records how to push gradients back. `backward` sweeps the nodes in reverse
//! creation order, which is already topological. Gradients only accumulate
//! into nodes reachable from a `requires_grad` leaf, so frozen inputs (the
//! teacher) never receive gradients.

use crate::error::{Error, Result};
use crate::kernels::imitation::{Metric, StageWeights};
use crate::kernels::{conv, detect, imitation, pool, resize};
use crate::tensor::{finite_checks_enabled, Scalar, Tensor};

/// Handle to a node on a `Tape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    BilinearResize(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows {
        inputs: Vec<Var>,
    },
    SoftmaxCeRows {
        logits: Var,
        rows: Vec<u32>,
        targets: Vec<u32>,
    },
    SmoothL1Rows {
        pred: Var,
        target: Tensor<S>,
        rows: Vec<u32>,
    },
    ImitationStage {
        student: Var,
        teacher: Var,
        metric: Metric,
        eps: S,
        weights: Option<StageWeights<S>>,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::AddBias { .. } => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::BilinearResize(_) => "bilinear_resize",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SoftmaxCeRows { .. } => "softmax_ce_rows",
            Op::SmoothL1Rows { .. } => "smooth_l1_rows",
            Op::ImitationStage { .. } => "imitation_stage",
        }
    }
}

pub struct Tape<S: Scalar> {
    vals: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    needs: Vec<bool>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs: bool) -> Var {
        if finite_checks_enabled() && !value.all_finite() {
            panic!("non-finite values produced by op `{}`", op.name());
        }
        self.vals.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        Var(self.vals.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Insert a tensor; `requires_grad` leaves collect gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.vals[v.0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.vals[x.0].map(|v| v.max(S::zero()));
        self.push(y, Op::Relu(x), self.needs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.vals[x.0].map(|v| S::one() / (S::one() + (-v).exp()));
        self.push(y, Op::Sigmoid(x), self.needs(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.vals[a.0].zip_map(&self.vals[b.0], |x, z| x + z)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.vals[a.0].zip_map(&self.vals[b.0], |x, z| x - z)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.vals[a.0].zip_map(&self.vals[b.0], |x, z| x * z)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let y = self.vals[x.0].map(|v| v * c);
        self.push(y, Op::Scale(x, c), self.needs(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let y = self.vals[x.0].map(|v| v + c);
        self.push(y, Op::AddScalar(x), self.needs(x))
    }

    /// Broadcast-add a per-channel bias to an NCHW tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.vals[x.0].dims4()?;
        if self.vals[bias.0].shape() != [c] {
            return Err(Error::Dim(format!(
                "bias {:?} for {} channels",
                self.vals[bias.0].shape(),
                c
            )));
        }
        let mut y = self.vals[x.0].clone();
        let b = self.vals[bias.0].data().to_vec();
        let plane = h * w;
        for img in 0..n {
            for ci in 0..c {
                let base = (img * c + ci) * plane;
                for v in &mut y.data_mut()[base..base + plane] {
                    *v = *v + b[ci];
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(y, Op::AddBias { x, bias }, needs))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::forward(&self.vals[input.0], &self.vals[kernel.0], stride, pad)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = pool::forward(&self.vals[input.0])?;
        let needs = self.needs(input);
        Ok(self.push(y, Op::MaxPool2 { input, argmax }, needs))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = resize::forward(&self.vals[input.0], out_h, out_w)?;
        let needs = self.needs(input);
        Ok(self.push(y, Op::BilinearResize(input), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: S = self.vals[x.0].data().iter().cloned().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), self.needs(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].numel();
        let total: S = self.vals[x.0].data().iter().cloned().sum();
        let y = total / S::from_f64(n as f64);
        self.push(Tensor::scalar(y), Op::Mean(x), self.needs(x))
    }

    /// Gather NCHW head maps into per-anchor rows. Inputs must share batch
    /// and channel counts; the output has one row per (image, map, cell) in
    /// that order, with the map's channels as columns.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Dim("concat_rows needs at least one input".into()));
        }
        let (n0, c0, _, _) = self.vals[inputs[0].0].dims4()?;
        let mut per_image = 0usize;
        for &v in inputs {
            let (n, c, h, w) = self.vals[v.0].dims4()?;
            if n != n0 || c != c0 {
                return Err(Error::Dim(format!(
                    "concat_rows inputs disagree: {:?} vs {:?}",
                    self.vals[inputs[0].0].shape(),
                    self.vals[v.0].shape()
                )));
            }
            per_image += h * w;
        }
        let mut out = Tensor::zeros(&[n0 * per_image, c0]);
        {
            let od = out.data_mut();
            let mut row0 = 0usize; // block start for current (image, input)
            for img in 0..n0 {
                for &v in inputs {
                    let (_, c, h, w) = self.vals[v.0].dims4()?;
                    let plane = h * w;
                    let data = self.vals[v.0].data();
                    for ci in 0..c {
                        let base = (img * c + ci) * plane;
                        for cell in 0..plane {
                            od[(row0 + cell) * c0 + ci] = data[base + cell];
                        }
                    }
                    row0 += plane;
                }
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// Mean softmax cross-entropy over selected rows of a logit matrix.
    pub fn softmax_ce_rows(&mut self, logits: Var, rows: Vec<u32>, targets: Vec<u32>) -> Result<Var> {
        let v = detect::ce_rows_forward(&self.vals[logits.0], &rows, &targets)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(v),
            Op::SoftmaxCeRows {
                logits,
                rows,
                targets,
            },
            needs,
        ))
    }

    /// Mean smooth-L1 over every coordinate of selected rows.
    pub fn smooth_l1_rows(&mut self, pred: Var, target: Tensor<S>, rows: Vec<u32>) -> Result<Var> {
        let v = detect::smooth_l1_rows_forward(&self.vals[pred.0], &target, &rows)?;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(v),
            Op::SmoothL1Rows { pred, target, rows },
            needs,
        ))
    }

    /// One stage's imitation term (batch-averaged, optionally re-weighted).
    pub fn imitation_stage(
        &mut self,
        student: Var,
        teacher: Var,
        metric: Metric,
        eps: S,
        weights: Option<StageWeights<S>>,
    ) -> Result<Var> {
        let (v, _skipped) = imitation::stage_forward(
            &self.vals[student.0],
            &self.vals[teacher.0],
            metric,
            eps,
            weights.as_ref(),
        )?;
        let needs = self.needs(student) || self.needs(teacher);
        Ok(self.push(
            Tensor::scalar(v),
            Op::ImitationStage {
                student,
                teacher,
                metric,
                eps,
                weights,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients land on every reachable
    /// node that requires them and stay available until the next backward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::Invariant(format!(
                "backward target must be scalar, got {:?}",
                self.vals[loss.0].shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..self.ops.len()).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            step_backward(&self.ops[i], &self.vals, &self.needs, &gout, &mut self.grads);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

fn slot<'g, S: Scalar>(
    grads: &'g mut [Option<Tensor<S>>],
    needs: &[bool],
    v: Var,
    shape: &[usize],
) -> Option<&'g mut Tensor<S>> {
    if !needs[v.0] {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
}

fn step_backward<S: Scalar>(
    op: &Op<S>,
    vals: &[Tensor<S>],
    needs: &[bool],
    gout: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    match op {
        Op::Leaf => {}
        Op::Relu(x) => {
            if let Some(d) = slot(grads, needs, *x, vals[x.0].shape()) {
                for ((dv, &g), &xv) in d.data_mut().iter_mut().zip(gout.data()).zip(vals[x.0].data())
                {
                    if xv > S::zero() {
                        *dv = *dv + g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(d) = slot(grads, needs, *x, vals[x.0].shape()) {
                // y is recomputed from x; cheaper than storing it in the op.
                for ((dv, &g), &xv) in d.data_mut().iter_mut().zip(gout.data()).zip(vals[x.0].data())
                {
                    let y = S::one() / (S::one() + (-xv).exp());
                    *dv = *dv + g * y * (S::one() - y);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = slot(grads, needs, *v, vals[v.0].shape()) {
                    for (dv, &g) in d.data_mut().iter_mut().zip(gout.data()) {
                        *dv = *dv + g;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(grads, needs, *a, vals[a.0].shape()) {
                for (dv, &g) in d.data_mut().iter_mut().zip(gout.data()) {
                    *dv = *dv + g;
                }
            }
            if let Some(d) = slot(grads, needs, *b, vals[b.0].shape()) {
                for (dv, &g) in d.data_mut().iter_mut().zip(gout.data()) {
                    *dv = *dv - g;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = slot(grads, needs, *a, vals[a.0].shape()) {
                for ((dv, &g), &bv) in d.data_mut().iter_mut().zip(gout.data()).zip(vals[b.0].data())
                {
                    *dv = *dv + g * bv;
                }
            }
            if let Some(d) = slot(grads, needs, *b, vals[b.0].shape()) {
                for ((dv, &g), &av) in d.data_mut().iter_mut().zip(gout.data()).zip(vals[a.0].data())
                {
                    *dv = *dv + g * av;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = slot(grads, needs, *x, vals[x.0].shape()) {
                for (dv, &g) in d.data_mut().iter_mut().zip(gout.data()) {
                    *dv = *dv + g * *c;
                }
            }
        }
        Op::AddScalar(x) => {
            if let Some(d) = slot(grads, needs, *x, vals[x.0].shape()) {
                for (dv, &g) in d.data_mut().iter_mut().zip(gout.data()) {
                    *dv = *dv + g;
                }
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(d) = slot(grads, needs, *x, vals[x.0].shape()) {
                for (dv, &g) in d.data_mut().iter_mut().zip(gout.data()) {
                    *dv = *dv + g;
                }
            }
            if needs[bias.0] {
                let (n, c, h, w) = vals[x.0].dims4().expect("bias input");
                let d = slot(grads, needs, *bias, vals[bias.0].shape()).expect("needs checked");
                let plane = h * w;
                for img in 0..n {
                    for ci in 0..c {
                        let base = (img * c + ci) * plane;
                        let mut acc = S::zero();
                        for &g in &gout.data()[base..base + plane] {
                            acc = acc + g;
                        }
                        d.data_mut()[ci] = d.data_mut()[ci] + acc;
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        } => {
            if needs[input.0] {
                let shape = vals[input.0].shape().to_vec();
                let d = slot(grads, needs, *input, &shape).expect("needs checked");
                conv::backward_input(&shape, &vals[kernel.0], *stride, *pad, gout, d);
            }
            if needs[kernel.0] {
                let kshape = vals[kernel.0].shape().to_vec();
                let d = slot(grads, needs, *kernel, &kshape).expect("needs checked");
                conv::backward_kernel(&vals[input.0], &kshape, *stride, *pad, gout, d);
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if let Some(d) = slot(grads, needs, *input, vals[input.0].shape()) {
                pool::backward(argmax, gout, d);
            }
        }
        Op::BilinearResize(input) => {
            if needs[input.0] {
                let shape = vals[input.0].shape().to_vec();
                let d = slot(grads, needs, *input, &shape).expect("needs checked");
                resize::backward(&shape, gout, d);
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(grads, needs, *x, vals[x.0].shape()) {
                let g = gout.item();
                for dv in d.data_mut() {
                    *dv = *dv + g;
                }
            }
        }
        Op::Mean(x) => {
            if let Some(d) = slot(grads, needs, *x, vals[x.0].shape()) {
                let g = gout.item() / S::from_f64(vals[x.0].numel() as f64);
                for dv in d.data_mut() {
                    *dv = *dv + g;
                }
            }
        }
        Op::ConcatRows { inputs } => {
            let c0 = vals[inputs[0].0].shape()[1];
            let n0 = vals[inputs[0].0].shape()[0];
            let mut row0 = 0usize;
            for img in 0..n0 {
                for &v in inputs {
                    let (_, c, h, w) = vals[v.0].dims4().expect("checked in forward");
                    let plane = h * w;
                    if needs[v.0] {
                        let d = slot(grads, needs, v, vals[v.0].shape()).expect("needs checked");
                        let dd = d.data_mut();
                        for ci in 0..c {
                            let base = (img * c + ci) * plane;
                            for cell in 0..plane {
                                dd[base + cell] = dd[base + cell] + gout.data()[(row0 + cell) * c0 + ci];
                            }
                        }
                    }
                    row0 += plane;
                }
            }
        }
        Op::SoftmaxCeRows {
            logits,
            rows,
            targets,
        } => {
            if let Some(d) = slot(grads, needs, *logits, vals[logits.0].shape()) {
                detect::ce_rows_backward(&vals[logits.0], rows, targets, gout.item(), d);
            }
        }
        Op::SmoothL1Rows { pred, target, rows } => {
            if let Some(d) = slot(grads, needs, *pred, vals[pred.0].shape()) {
                detect::smooth_l1_rows_backward(&vals[pred.0], target, rows, gout.item(), d);
            }
        }
        Op::ImitationStage {
            student,
            teacher,
            metric,
            eps,
            weights,
        } => {
            let g = gout.item();
            let s_shape = vals[student.0].shape().to_vec();
            let t_shape = vals[teacher.0].shape().to_vec();
            let want_s = needs[student.0];
            let want_t = needs[teacher.0];
            // Split-borrow the two slots.
            let (ds, dt) = if student.0 < teacher.0 {
                let (lo, hi) = grads.split_at_mut(teacher.0);
                (
                    if want_s {
                        Some(lo[student.0].get_or_insert_with(|| Tensor::zeros(&s_shape)))
                    } else {
                        None
                    },
                    if want_t {
                        Some(hi[0].get_or_insert_with(|| Tensor::zeros(&t_shape)))
                    } else {
                        None
                    },
                )
            } else {
                let (lo, hi) = grads.split_at_mut(student.0);
                (
                    if want_s {
                        Some(hi[0].get_or_insert_with(|| Tensor::zeros(&s_shape)))
                    } else {
                        None
                    },
                    if want_t {
                        Some(lo[teacher.0].get_or_insert_with(|| Tensor::zeros(&t_shape)))
                    } else {
                        None
                    },
                )
            };
            imitation::stage_backward(
                &vals[student.0],
                &vals[teacher.0],
                *metric,
                *eps,
                weights.as_ref(),
                g,
                ds,
                dt,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn chain_gradient_through_mul_and_mean() {
        // f(x) = mean(x * x), df/dx_i = 2 x_i / n
        let mut t = Tape::<f64>::new();
        let x = t.leaf(
            Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap(),
            true,
        );
        let sq = t.mul(x, x).unwrap();
        let loss = t.mean(sq);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        let want = [2.0 / 3.0, -4.0 / 3.0, 2.0];
        for (a, b) in g.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn no_gradient_reaches_constants() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::scalar(2.0), true);
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().item(), 5.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]), true);
        let y = t.relu(x);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn grad_accumulates_over_multiple_uses() {
        // f(x) = sum(x) + sum(x) => grad = 2 everywhere
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let s1 = t.sum(x);
        let s2 = t.sum(x);
        let y = t.add(s1, s2).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
    }
}
