use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels::{self, ConvDims};
use crate::primitive::{conv_dims, matmul_dims, Primitive};
use crate::tensor::{axis_split, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Origin {
    /// Differentiable input.
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Applied {
        prim: Primitive,
        inputs: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    needs_grad: bool,
}

/// Records primitive applications in execution order.
///
/// Every record's inputs precede it, so walking the records backwards is a
/// valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stored: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` is unreachable.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by forward values on this tape.
    pub fn memory_bytes(&self) -> usize {
        self.stored * std::mem::size_of::<f64>()
    }

    fn push(&mut self, value: Tensor, origin: Origin, needs_grad: bool) -> Var {
        self.stored += value.numel();
        self.nodes.push(Node {
            value,
            origin,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Constant, false)
    }

    /// Handle of the `index`-th record, if it exists.
    pub fn var(&self, index: usize) -> Option<Var> {
        (index < self.nodes.len()).then_some(Var(index))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar(v.0))
        }
    }

    /// Applies `prim` to `inputs` and records it.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = prim.forward(&values)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(
            out,
            Origin::Applied {
                prim,
                inputs: inputs.to_vec(),
            },
            needs_grad,
        ))
    }

    /// Recomputes every recorded application from the stored leaves and constants.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.origin {
                Origin::Leaf | Origin::Constant => node.value.clone(),
                Origin::Applied { prim, inputs } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| &values[v.0]).collect();
                    prim.forward(&ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Contributions are accumulated in reverse record order, so repeated
    /// sweeps over the same tape produce bit-identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Origin::Applied { prim, inputs } = &self.nodes[id].origin {
                self.backprop(prim, inputs, id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop(
        &self,
        prim: &Primitive,
        inputs: &[Var],
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let out = &self.nodes[id].value;
        let input = |i: usize| &self.nodes[inputs[i].0].value;
        let wants = |i: usize| self.nodes[inputs[i].0].needs_grad;
        let acc = |i: usize, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[inputs[i].0].needs_grad {
                return;
            }
            let n = self.nodes[inputs[i].0].value.numel();
            let slot = grads[inputs[i].0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match prim {
            Primitive::MatMul => {
                let (a, b) = (input(0), input(1));
                let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
                acc(0, grads, &mut |da| {
                    for l in 0..batch {
                        kernels::gemm_nt(
                            &g[l * m * n..(l + 1) * m * n],
                            &b.data()[l * k * n..(l + 1) * k * n],
                            &mut da[l * m * k..(l + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(1, grads, &mut |db| {
                    for l in 0..batch {
                        kernels::gemm_tn(
                            &a.data()[l * m * k..(l + 1) * m * k],
                            &g[l * m * n..(l + 1) * m * n],
                            &mut db[l * k * n..(l + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Primitive::Add => {
                acc(0, grads, &mut |d| add_into(d, g));
                acc(1, grads, &mut |d| add_into(d, g));
            }
            Primitive::Sub => {
                acc(0, grads, &mut |d| add_into(d, g));
                acc(1, grads, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Primitive::Mul => {
                let (a, b) = (input(0).data(), input(1).data());
                acc(0, grads, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(b) {
                        *d += g * y;
                    }
                });
                acc(1, grads, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(a) {
                        *d += g * x;
                    }
                });
            }
            Primitive::Scale(c) => {
                acc(0, grads, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
            }
            Primitive::ScaleBy => {
                let s = input(0).data()[0];
                let x = input(1).data();
                acc(0, grads, &mut |d| {
                    d[0] += g.iter().zip(x).map(|(g, x)| g * x).sum::<f64>();
                });
                acc(1, grads, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
            }
            Primitive::Relu => {
                let x = input(0).data();
                acc(0, grads, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Primitive::Sigmoid => {
                let y = out.data();
                acc(0, grads, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Primitive::Tanh => {
                let y = out.data();
                acc(0, grads, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Primitive::Exp => {
                let y = out.data();
                acc(0, grads, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Primitive::Softmax { axis } => {
                let y = out.data();
                let (outer, extent, inner) = axis_split(out.shape(), *axis);
                acc(0, grads, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |e: usize| (o * extent + e) * inner + i;
                            let dot: f64 = (0..extent).map(|e| g[idx(e)] * y[idx(e)]).sum();
                            for e in 0..extent {
                                d[idx(e)] += y[idx(e)] * (g[idx(e)] - dot);
                            }
                        }
                    }
                });
            }
            Primitive::Concat { axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for i in 0..inputs.len() {
                    let extent = input(i).shape()[*axis];
                    acc(i, grads, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + extent) * inner];
                            add_into(&mut d[o * extent * inner..(o + 1) * extent * inner], src);
                        }
                    });
                    offset += extent;
                }
            }
            Primitive::Slice { axis, start, len } => {
                let (outer, extent, inner) = axis_split(input(0).shape(), *axis);
                acc(0, grads, &mut |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * extent + start) * inner..(o * extent + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Primitive::Reshape { .. } => acc(0, grads, &mut |d| add_into(d, g)),
            Primitive::Sum { axis } | Primitive::Mean { axis } => {
                let (outer, extent, inner) = axis_split(input(0).shape(), *axis);
                let scale = if matches!(prim, Primitive::Mean { .. }) {
                    1.0 / extent as f64
                } else {
                    1.0
                };
                acc(0, grads, &mut |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for e in 0..extent {
                            let dst = &mut d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += scale * s;
                            }
                        }
                    }
                });
            }
            Primitive::CausalConv { dilation } => {
                let (x, w) = (input(0), input(1));
                let dims: ConvDims = conv_dims(x, w, *dilation)?;
                let mut dx = wants(0).then(|| vec![0.0; x.numel()]);
                let mut dw = wants(1).then(|| vec![0.0; w.numel()]);
                kernels::causal_conv_backward(x.data(), w.data(), g, dx.as_deref_mut(), dw.as_deref_mut(), dims);
                if let Some(dx) = dx {
                    acc(0, grads, &mut |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc(1, grads, &mut |d| add_into(d, &dw));
                }
            }
            Primitive::Transpose { perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let mut back = vec![0.0; g.len()];
                kernels::permute(g, out.shape(), &inverse, &mut back);
                acc(0, grads, &mut |d| add_into(d, &back));
            }
        }
        Ok(())
    }

    // Convenience wrappers. Each records exactly one primitive.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale(factor), &[x])
    }

    /// `s · x` for a one-element `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        self.apply(Primitive::ScaleBy, &[s, x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum { axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis }, &[x])
    }

    pub fn causal_conv(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        self.apply(Primitive::CausalConv { dilation }, &[x, w])
    }

    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(x);
        }
        self.apply(Primitive::Transpose { perm: perm.to_vec() }, &[x])
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean_axis(flat, 0)
    }

    /// `x[.., d_in] · w[d_in, d_out] + b[d_out]` over the flattened leading axes.
    ///
    /// The bias is spread over rows through a ones-column matmul, keeping the
    /// no-broadcast rule intact.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (d_in, rows) = match shape.split_last() {
            Some((&d, lead)) => (d, lead.iter().product::<usize>()),
            None => return Err(shape_err("matmul", "affine input must have rank ≥ 1")),
        };
        let w_shape = self.shape(w).to_vec();
        if w_shape.len() != 2 || w_shape[0] != d_in {
            return Err(shape_err(
                "matmul",
                format!("affine weight {w_shape:?} does not accept {d_in} input features"),
            ));
        }
        let d_out = w_shape[1];
        let x2 = self.reshape(x, &[rows, d_in])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            let ones = self.constant(Tensor::ones(&[rows, 1]));
            let b_row = self.reshape(b, &[1, d_out])?;
            let spread = self.matmul(ones, b_row)?;
            y = self.add(y, spread)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank ≥ 1") = d_out;
        self.reshape(y, &out_shape)
    }

    /// Repeats `x` `times` along a new axis inserted at `axis`.
    pub fn repeat_new_axis(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        shape.insert(axis, 1);
        let x1 = self.reshape(x, &shape)?;
        let copies = vec![x1; times];
        self.concat(&copies, axis)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum_all(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_and_constant_nodes_get_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::from_vec(vec![1.0, 1.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[5.0]);
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
        assert_eq!(g.get(c).data(), &[0.0]);
        assert!(g.raw(c).is_none());
    }

    #[test]
    fn affine_adds_bias_to_every_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 2]));
        let w = tape.leaf(Tensor::ones(&[2, 4]));
        let b = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 4]);
        assert_eq!(&tape.value(y).data()[4..8], &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).data(), &[6.0; 4]);
    }

    #[test]
    fn replay_reproduces_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.1, 0.7, -0.3]));
        let e = tape.exp(x).unwrap();
        let s = tape.softmax(e, 0).unwrap();
        let t = tape.tanh(s).unwrap();
        let replayed = tape.replay().unwrap();
        assert_eq!(&replayed[t.index()], tape.value(t));
    }
}
