//! Tape of recorded operations and its reverse sweep.

use super::kernels::{conv1d_backward, conv1d_forward, ConvDims};
use super::{shape_err, AutodiffError, Real, Tensor};
use crate::exec::Execution;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, dims: ConvDims },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Mask(Var, Vec<R>),
    Scale(Var, R),
    Sum(Vec<Var>),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    SmoothingMse { logprobs: Var, clamp: R, reference: Option<Tensor<R>> },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Operations recorded in topological order.
///
/// Nodes can only refer to earlier nodes, so the recording order is a valid
/// topological order and the reverse sweep visits every node once.
#[derive(Debug)]
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    exec: Execution,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self::with_execution(Execution::default())
    }

    pub fn with_execution(exec: Execution) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        let t = self.value(v);
        t.dims2()
            .ok_or_else(|| shape_err(op, format!("expected [channels, frames], got {:?}", t.shape())))
    }

    /// Dilated convolution with symmetric zero padding; output length equals
    /// input length.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var, AutodiffError> {
        let (c_in, frames) = self.dims2(x, "conv1d")?;
        let (c_out, wc_in, kernel) = match self.value(w).shape()[..] {
            [o, i, k] => (o, i, k),
            ref s => return Err(shape_err("conv1d", format!("weight must be [out, in, k], got {s:?}"))),
        };
        if wc_in != c_in {
            return Err(shape_err("conv1d", format!("input has {c_in} channels, weight expects {wc_in}")));
        }
        if kernel % 2 == 0 {
            return Err(shape_err("conv1d", format!("kernel size {kernel} must be odd")));
        }
        if dilation == 0 {
            return Err(shape_err("conv1d", "dilation must be >= 1"));
        }
        if self.value(b).shape() != [c_out] {
            return Err(shape_err(
                "conv1d",
                format!("bias must be [{c_out}], got {:?}", self.value(b).shape()),
            ));
        }
        let dims = ConvDims { c_in, c_out, kernel, frames, dilation };
        let y = conv1d_forward(
            self.exec,
            dims,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![c_out, frames], data: y }, Op::Conv1d { x, w, b, dims }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| if a > R::zero() { a } else { R::zero() }).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&p, &q)| p + q).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Stacks channels of `a` above those of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ca, ta) = self.dims2(a, "concat_channels")?;
        let (cb, tb) = self.dims2(b, "concat_channels")?;
        if ta != tb {
            return Err(shape_err("concat_channels", format!("frame counts {ta} vs {tb}")));
        }
        let mut data = Vec::with_capacity((ca + cb) * ta);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![ca + cb, ta], data }, Op::Concat(a, b), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (c, t) = self.dims2(x, "softmax")?;
        let data = column_softmax(self.value(x).data(), c, t, false);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![c, t], data }, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (c, t) = self.dims2(x, "log_softmax")?;
        let data = column_softmax(self.value(x).data(), c, t, true);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![c, t], data }, Op::LogSoftmax(x), rg))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<R>) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(shape_err("mask", format!("{} mask values for {} elements", mask.len(), v.numel())));
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mask(x, mask), rg))
    }

    pub fn scale(&mut self, x: Var, factor: R) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * factor).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Sum of equally shaped tensors.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var, AutodiffError> {
        let first = *terms.first().ok_or_else(|| shape_err("sum", "no terms"))?;
        let shape = self.value(first).shape.clone();
        let mut data = vec![R::zero(); self.value(first).numel()];
        for &v in terms {
            let t = self.value(v);
            if t.shape != shape {
                return Err(shape_err("sum", format!("{:?} vs {:?}", t.shape, shape)));
            }
            for (d, &s) in data.iter_mut().zip(&t.data) {
                *d += s;
            }
        }
        let rg = terms.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor { shape, data }, Op::Sum(terms.to_vec()), rg))
    }

    /// Mean over frames of `-log_softmax(logits)[y_t, t]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let (c, t) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != t {
            return Err(shape_err("cross_entropy", format!("{} labels for {t} frames", labels.len())));
        }
        if let Some((frame, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(AutodiffError::LabelOutOfRange { frame, label, classes: c });
        }
        let logp = column_softmax(self.value(logits).data(), c, t, true);
        let total: R = labels.iter().enumerate().map(|(f, &y)| -logp[y * t + f]).sum();
        let loss = total / R::from_f64(t as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            rg,
        ))
    }

    /// Truncated temporal smoothing: mean over classes and adjacent frame pairs
    /// of `min(|x[c,t] - x[c,t-1]|, clamp)^2`. The earlier frame is treated as
    /// a constant when differentiating. Fewer than two frames give zero.
    pub fn smoothing_mse(&mut self, logprobs: Var, clamp: R) -> Result<Var, AutodiffError> {
        self.smoothing_impl(logprobs, clamp, None)
    }

    /// As [`Graph::smoothing_mse`], but the earlier frame of every pair is read
    /// from the constant `reference` (same shape as `logprobs`). With
    /// `reference` equal to the current values both ops agree in value and
    /// gradient; this one is an ordinary differentiable function of `logprobs`.
    pub fn smoothing_mse_against(
        &mut self,
        logprobs: Var,
        reference: Tensor<R>,
        clamp: R,
    ) -> Result<Var, AutodiffError> {
        if reference.shape() != self.value(logprobs).shape() {
            return Err(shape_err(
                "smoothing_mse_against",
                format!("reference {:?} vs input {:?}", reference.shape(), self.value(logprobs).shape()),
            ));
        }
        self.smoothing_impl(logprobs, clamp, Some(reference))
    }

    fn smoothing_impl(&mut self, logprobs: Var, clamp: R, reference: Option<Tensor<R>>) -> Result<Var, AutodiffError> {
        let (c, t) = self.dims2(logprobs, "smoothing_mse")?;
        let loss = if t < 2 {
            log::warn!("smoothing term needs at least two frames, got {t}; contributing zero");
            R::zero()
        } else {
            let x = self.value(logprobs).data();
            let prev = reference.as_ref().map_or(x, |r| r.data());
            let mut acc = R::zero();
            for (row, prow) in x.chunks_exact(t).zip(prev.chunks_exact(t)) {
                for f in 1..t {
                    let d = (row[f] - prow[f - 1]).abs().min(clamp);
                    acc += d * d;
                }
            }
            acc / R::from_f64((c * (t - 1)) as f64)
        };
        let rg = self.rg(logprobs);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothingMse { logprobs, clamp, reference }, rg))
    }

    /// Reverse sweep from a scalar loss. Gradients of all leaves created with
    /// [`Graph::param`] are accumulated into the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>, AutodiffError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        let mut leaf_grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[idx] = Some(Tensor { shape: node.value.shape.clone(), data: g });
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<R>>], v: Var, contribution: impl FnOnce() -> Vec<R>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution()),
        }
    }

    fn propagate(&self, op: &Op<R>, out: &Tensor<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        match op {
            Op::Leaf => unreachable!(),
            Op::Conv1d { x, w, b, dims } => {
                let (gx, gw, gb) = conv1d_backward(
                    self.exec,
                    *dims,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                );
                self.accumulate(grads, *x, || gx);
                self.accumulate(grads, *w, || gw);
                self.accumulate(grads, *b, || gb);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, || {
                    xv.iter()
                        .zip(g)
                        .map(|(&a, &gv)| if a > R::zero() { gv } else { R::zero() })
                        .collect()
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.to_vec());
                self.accumulate(grads, *b, || g.to_vec());
            }
            Op::Concat(a, b) => {
                let split = self.value(*a).numel();
                self.accumulate(grads, *a, || g[..split].to_vec());
                self.accumulate(grads, *b, || g[split..].to_vec());
            }
            Op::Softmax(x) => {
                let (c, t) = out.dims2().unwrap();
                let s = out.data();
                self.accumulate(grads, *x, || {
                    let mut gx = vec![R::zero(); c * t];
                    for f in 0..t {
                        let dotp: R = (0..c).map(|k| g[k * t + f] * s[k * t + f]).sum();
                        for k in 0..c {
                            gx[k * t + f] = s[k * t + f] * (g[k * t + f] - dotp);
                        }
                    }
                    gx
                });
            }
            Op::LogSoftmax(x) => {
                let (c, t) = out.dims2().unwrap();
                let lp = out.data();
                self.accumulate(grads, *x, || {
                    let mut gx = vec![R::zero(); c * t];
                    for f in 0..t {
                        let gsum: R = (0..c).map(|k| g[k * t + f]).sum();
                        for k in 0..c {
                            gx[k * t + f] = g[k * t + f] - lp[k * t + f].exp() * gsum;
                        }
                    }
                    gx
                });
            }
            Op::Mask(x, mask) => {
                self.accumulate(grads, *x, || g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, || g.iter().map(|&a| a * *factor).collect());
            }
            Op::Sum(terms) => {
                for &v in terms {
                    self.accumulate(grads, v, || g.to_vec());
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (c, t) = lv.dims2().unwrap();
                let scale = g[0] / R::from_f64(t as f64);
                self.accumulate(grads, *logits, || {
                    let mut gx = column_softmax(lv.data(), c, t, false);
                    for (f, &y) in labels.iter().enumerate() {
                        gx[y * t + f] -= R::one();
                    }
                    gx.iter_mut().for_each(|v| *v *= scale);
                    gx
                });
            }
            Op::SmoothingMse { logprobs, clamp, reference } => {
                let xv = self.value(*logprobs);
                let prev = reference.as_ref().unwrap_or(xv);
                let (c, t) = xv.dims2().unwrap();
                if t < 2 {
                    return;
                }
                let scale = g[0] * R::from_f64(2.0 / (c * (t - 1)) as f64);
                self.accumulate(grads, *logprobs, || {
                    let mut gx = vec![R::zero(); c * t];
                    let rows = xv.data().chunks_exact(t).zip(prev.data().chunks_exact(t));
                    for ((row, prow), grow) in rows.zip(gx.chunks_exact_mut(t)) {
                        for f in 1..t {
                            let d = row[f] - prow[f - 1];
                            if d.abs() < *clamp {
                                grow[f] = scale * d;
                            }
                        }
                    }
                    gx
                });
            }
        }
    }
}

/// Per-column softmax (or log-softmax) of a `[c, t]` matrix.
pub fn column_softmax<R: Real>(x: &[R], c: usize, t: usize, log: bool) -> Vec<R> {
    let mut out = vec![R::zero(); c * t];
    for f in 0..t {
        let mut m = R::neg_infinity();
        for k in 0..c {
            m = m.max(x[k * t + f]);
        }
        let mut z = R::zero();
        for k in 0..c {
            z += (x[k * t + f] - m).exp();
        }
        if log {
            let lz = z.ln() + m;
            for k in 0..c {
                out[k * t + f] = x[k * t + f] - lz;
            }
        } else {
            for k in 0..c {
                out[k * t + f] = (x[k * t + f] - m).exp() / z;
            }
        }
    }
    out
}

/// Accumulated gradients of the parameter leaves of one backward sweep.
#[derive(Debug)]
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// `None` when the variable is a constant or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros if it did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<R> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(c: usize, t: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![c, t], data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.25, -1.0]));
        let w = g.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.conv1d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        for dilation in [1, 2, 5] {
            let x1 = g.constant(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
            let w = g.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
            let b = g.constant(Tensor::zeros(vec![1]));
            let y = g.conv1d(x1, w, b, dilation).unwrap();
            assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        let w = g.constant(Tensor::zeros(vec![1, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv1d(x, w, b, 1), Err(AutodiffError::Shape { .. })));
        let w2 = g.constant(Tensor::zeros(vec![1, 2, 2]));
        assert!(g.conv1d(x, w2, b, 1).is_err());
    }

    #[test]
    fn softmax_uniform_and_relu() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![4, 1]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
        let r = g.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(r);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x, loss = sum(y) via ce-free path: scale then sum scalars.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 5.0);
        let y = g.sum(&[a, b, x]).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0 + 5.0 + 1.0);
    }

    #[test]
    fn cross_entropy_uniform_and_limits() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(vec![19, 7]));
        let ce = g.cross_entropy(logits, &[3; 7]).unwrap();
        assert!((g.value(ce).item() - 19f64.ln()).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for z in [0.0, 2.0, 5.0, 10.0, 20.0] {
            let l = g.constant(t2(2, 1, &[z, 0.0]));
            let ce = g.cross_entropy(l, &[0]).unwrap();
            let v = g.value(ce).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-8);

        let l = g.constant(Tensor::zeros(vec![2, 1]));
        assert!(matches!(
            g.cross_entropy(l, &[2]),
            Err(AutodiffError::LabelOutOfRange { frame: 0, label: 2, classes: 2 })
        ));
        assert!(g.cross_entropy(l, &[0, 1]).is_err());
    }

    #[test]
    fn smoothing_cases() {
        let mut g = Graph::<f64>::new();
        let constant = g.constant(t2(2, 3, &[1.0, 1.0, 1.0, -2.0, -2.0, -2.0]));
        let s = g.smoothing_mse(constant, 4.0).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        let jump = g.constant(t2(1, 2, &[0.0, 10.0]));
        let s = g.smoothing_mse(jump, 4.0).unwrap();
        assert_eq!(g.value(s).item(), 16.0);
        let single = g.constant(t2(3, 1, &[0.0, 1.0, 2.0]));
        let s = g.smoothing_mse(single, 4.0).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }
}
