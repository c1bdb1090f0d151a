//! The closed set of differentiable primitives and their shape rules.
//!
//! Shape alignment is always explicit: apart from [`Primitive::ScaleBy`],
//! which multiplies a tensor by a one-element tensor, no primitive
//! broadcasts. Reductions keep the reduced axis with extent 1.

use std::collections::BTreeMap;

use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{axis_split, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[.., m, k] · [.., k, n] → [.., m, n]`; leading extents must match exactly.
    MatMul,
    Add,
    Sub,
    Mul,
    /// Multiply by a constant.
    Scale(f64),
    /// `inputs = [s, x]` with `s` holding one element: `s · x`.
    ScaleBy,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Softmax {
        axis: usize,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Sum {
        axis: usize,
    },
    Mean {
        axis: usize,
    },
    /// `inputs = [x: [batch, time, c_in], w: [taps, c_in, c_out]]`, output `[batch, time, c_out]`.
    /// Tap 0 reads the current step; the time extent is kept by left zero-padding.
    CausalConv {
        dilation: usize,
    },
    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    Transpose {
        perm: Vec<usize>,
    },
}

/// Loosely typed attributes for [`Primitive::from_name`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Attrs {
    pub ints: BTreeMap<String, usize>,
    pub lists: BTreeMap<String, Vec<usize>>,
    pub reals: BTreeMap<String, f64>,
}

impl Attrs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn int(mut self, key: &str, v: usize) -> Self {
        self.ints.insert(key.to_string(), v);
        self
    }

    pub fn list(mut self, key: &str, v: Vec<usize>) -> Self {
        self.lists.insert(key.to_string(), v);
        self
    }

    pub fn real(mut self, key: &str, v: f64) -> Self {
        self.reals.insert(key.to_string(), v);
        self
    }
}

impl Primitive {
    /// Resolves a primitive by its kind string, e.g. `"softmax-over-axis"` with `axis`.
    ///
    /// `"scalar-scale"` with a `factor` attribute scales by a constant; without one
    /// it takes the scale from a one-element first input.
    pub fn from_name(kind: &str, attrs: &Attrs) -> Result<Self> {
        let int = |p: &'static str, a: &'static str| {
            attrs
                .ints
                .get(a)
                .copied()
                .ok_or(AutodiffError::MissingAttribute { primitive: p, attr: a })
        };
        let list = |p: &'static str, a: &'static str| {
            attrs
                .lists
                .get(a)
                .cloned()
                .ok_or(AutodiffError::MissingAttribute { primitive: p, attr: a })
        };
        Ok(match kind {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "elementwise-mul" => Primitive::Mul,
            "scalar-scale" => match attrs.reals.get("factor") {
                Some(&f) => Primitive::Scale(f),
                None => Primitive::ScaleBy,
            },
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "tanh" => Primitive::Tanh,
            "exp" => Primitive::Exp,
            "softmax-over-axis" => Primitive::Softmax {
                axis: int("softmax-over-axis", "axis")?,
            },
            "concat-over-axis" => Primitive::Concat {
                axis: int("concat-over-axis", "axis")?,
            },
            "slice" => Primitive::Slice {
                axis: int("slice", "axis")?,
                start: int("slice", "start")?,
                len: int("slice", "len")?,
            },
            "reshape" => Primitive::Reshape {
                shape: list("reshape", "shape")?,
            },
            "sum-over-axis" => Primitive::Sum {
                axis: int("sum-over-axis", "axis")?,
            },
            "mean-over-axis" => Primitive::Mean {
                axis: int("mean-over-axis", "axis")?,
            },
            "causal-dilated-conv1d" => Primitive::CausalConv {
                dilation: attrs.ints.get("dilation").copied().unwrap_or(1),
            },
            "transpose" => Primitive::Transpose {
                perm: list("transpose", "perm")?,
            },
            other => return Err(AutodiffError::UnknownPrimitive(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "elementwise-mul",
            Primitive::Scale(_) | Primitive::ScaleBy => "scalar-scale",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Softmax { .. } => "softmax-over-axis",
            Primitive::Concat { .. } => "concat-over-axis",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Sum { .. } => "sum-over-axis",
            Primitive::Mean { .. } => "mean-over-axis",
            Primitive::CausalConv { .. } => "causal-dilated-conv1d",
            Primitive::Transpose { .. } => "transpose",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::ScaleBy
            | Primitive::CausalConv { .. } => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Computes the forward value, validating shapes.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        match self.arity() {
            Some(n) if inputs.len() != n => {
                return Err(shape_err(name, format!("expects {n} inputs, got {}", inputs.len())))
            }
            None if inputs.is_empty() => return Err(shape_err(name, "expects at least one input")),
            _ => {}
        }
        match self {
            Primitive::MatMul => matmul_forward(inputs[0], inputs[1]),
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(shape_err(
                        name,
                        format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
                    ));
                }
                let f: fn(f64, f64) -> f64 = match self {
                    Primitive::Add => |x, y| x + y,
                    Primitive::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Primitive::Scale(c) => Ok(inputs[0].map(|v| v * c)),
            Primitive::ScaleBy => {
                let s = inputs[0].item().ok_or_else(|| {
                    shape_err(
                        name,
                        format!("scale operand must hold one value, got shape {:?}", inputs[0].shape()),
                    )
                })?;
                Ok(inputs[1].map(|v| v * s))
            }
            Primitive::Relu => Ok(inputs[0].map(|v| v.max(0.0))),
            Primitive::Sigmoid => Ok(inputs[0].map(sigmoid)),
            Primitive::Tanh => Ok(inputs[0].map(f64::tanh)),
            Primitive::Exp => Ok(inputs[0].map(f64::exp)),
            Primitive::Softmax { axis } => {
                let x = inputs[0];
                check_axis(name, x, *axis)?;
                Ok(softmax(x, *axis))
            }
            Primitive::Concat { axis } => concat_forward(inputs, *axis),
            Primitive::Slice { axis, start, len } => {
                let x = inputs[0];
                check_axis(name, x, *axis)?;
                let extent = x.shape()[*axis];
                if *len == 0 || start + len > extent {
                    return Err(shape_err(
                        name,
                        format!("range {start}..{} exceeds axis {axis} extent {extent}", start + len),
                    ));
                }
                let (outer, _, inner) = axis_split(x.shape(), *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    data.extend_from_slice(&x.data()[base..base + len * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = *len;
                Tensor::new(shape, data)
            }
            Primitive::Reshape { shape } => {
                let x = inputs[0];
                let numel: usize = shape.iter().product();
                if numel != x.numel() || shape.contains(&0) {
                    return Err(shape_err(name, format!("cannot reshape {:?} to {shape:?}", x.shape())));
                }
                Tensor::new(shape.clone(), x.data().to_vec())
            }
            Primitive::Sum { axis } | Primitive::Mean { axis } => {
                let x = inputs[0];
                check_axis(name, x, *axis)?;
                let (outer, extent, inner) = axis_split(x.shape(), *axis);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        let src = &x.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if matches!(self, Primitive::Mean { .. }) {
                    let inv = 1.0 / extent as f64;
                    data.iter_mut().for_each(|v| *v *= inv);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = 1;
                Tensor::new(shape, data)
            }
            Primitive::CausalConv { dilation } => {
                let dims = conv_dims(inputs[0], inputs[1], *dilation)?;
                let mut y = vec![0.0; dims.batch * dims.time * dims.c_out];
                kernels::causal_conv_forward(inputs[0].data(), inputs[1].data(), &mut y, dims);
                Tensor::new(vec![dims.batch, dims.time, dims.c_out], y)
            }
            Primitive::Transpose { perm } => {
                let x = inputs[0];
                check_perm(name, x.rank(), perm)?;
                let mut data = vec![0.0; x.numel()];
                kernels::permute(x.data(), x.shape(), perm, &mut data);
                Tensor::new(perm.iter().map(|&p| x.shape()[p]).collect(), data)
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_axis(name: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(shape_err(
            name,
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn check_perm(name: &'static str, rank: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(shape_err(
            name,
            format!("permutation {perm:?} does not match rank {rank}"),
        ));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(shape_err(name, format!("{perm:?} is not a permutation of 0..{rank}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if a.len() < 2 || a.len() != b.len() {
        return Err(shape_err(
            "matmul",
            format!("operands {a:?} and {b:?} need equal rank ≥ 2"),
        ));
    }
    let r = a.len();
    if a[..r - 2] != b[..r - 2] {
        return Err(shape_err(
            "matmul",
            format!("leading extents of {a:?} and {b:?} differ"),
        ));
    }
    if a[r - 1] != b[r - 2] {
        return Err(shape_err(
            "matmul",
            format!("inner extents differ: {a:?} · {b:?} ({} vs {})", a[r - 1], b[r - 2]),
        ));
    }
    let batch = a[..r - 2].iter().product();
    Ok((batch, a[r - 2], a[r - 1], b[r - 1]))
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut c = vec![0.0; batch * m * n];
    for l in 0..batch {
        kernels::gemm_nn(
            &a.data()[l * m * k..(l + 1) * m * k],
            &b.data()[l * k * n..(l + 1) * k * n],
            &mut c[l * m * n..(l + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 1] = n;
    Tensor::new(shape, c)
}

fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * extent + e) * inner + i;
            let max = (0..extent).map(|e| out[idx(e)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in 0..extent {
                let v = (out[idx(e)] - max).exp();
                out[idx(e)] = v;
                total += v;
            }
            for e in 0..extent {
                out[idx(e)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax preserves shape")
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    check_axis("concat-over-axis", first, axis)?;
    for t in &inputs[1..] {
        let compatible = t.rank() == first.rank()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !compatible {
            return Err(shape_err(
                "concat-over-axis",
                format!(
                    "shape {:?} incompatible with {:?} along axis {axis}",
                    t.shape(),
                    first.shape()
                ),
            ));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}

pub(crate) fn conv_dims(x: &Tensor, w: &Tensor, dilation: usize) -> Result<ConvDims> {
    let name = "causal-dilated-conv1d";
    if x.rank() != 3 || w.rank() != 3 {
        return Err(shape_err(
            name,
            format!(
                "expects x [batch, time, c_in] and w [taps, c_in, c_out], got {:?} and {:?}",
                x.shape(),
                w.shape()
            ),
        ));
    }
    if x.shape()[2] != w.shape()[1] {
        return Err(shape_err(
            name,
            format!(
                "input channels {} do not match kernel channels {}",
                x.shape()[2],
                w.shape()[1]
            ),
        ));
    }
    if dilation == 0 {
        return Err(shape_err(name, "dilation must be at least 1"));
    }
    Ok(ConvDims {
        batch: x.shape()[0],
        time: x.shape()[1],
        c_in: x.shape()[2],
        c_out: w.shape()[2],
        taps: w.shape()[0],
        dilation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = Primitive::Relu.forward(&[&t(&[3], &[-1.0, 0.0, 2.0])]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let y = Primitive::Softmax { axis: 0 }
            .forward(&[&t(&[2], &[0.0, 0.0])])
            .unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_tap_conv_is_identity() {
        let x = t(&[1, 3, 1], &[5.0, 7.0, 9.0]);
        let w = t(&[2, 1, 1], &[1.0, 0.0]);
        let y = Primitive::CausalConv { dilation: 1 }.forward(&[&x, &w]).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn lag_tap_conv_shifts_right_with_zero_fill() {
        let x = t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[2, 1, 1], &[0.0, 1.0]);
        let y = Primitive::CausalConv { dilation: 2 }.forward(&[&x, &w]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn matmul_shape_error_names_extents() {
        let err = Primitive::MatMul
            .forward(&[&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("matmul"), "{msg}");
        assert!(msg.contains("3 vs 4"), "{msg}");
    }

    #[test]
    fn add_refuses_broadcast() {
        assert!(Primitive::Add
            .forward(&[&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3])])
            .is_err());
    }

    #[test]
    fn unknown_kind_fails() {
        assert_eq!(
            Primitive::from_name("conv2d", &Attrs::new()),
            Err(AutodiffError::UnknownPrimitive("conv2d".into()))
        );
        assert!(matches!(
            Primitive::from_name("slice", &Attrs::new().int("axis", 0)),
            Err(AutodiffError::MissingAttribute { .. })
        ));
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let x = t(&[2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let a = Primitive::Slice {
            axis: 1,
            start: 0,
            len: 1,
        }
        .forward(&[&x])
        .unwrap();
        let b = Primitive::Slice {
            axis: 1,
            start: 1,
            len: 3,
        }
        .forward(&[&x])
        .unwrap();
        let y = Primitive::Concat { axis: 1 }.forward(&[&a, &b]).unwrap();
        assert_eq!(y, x);
        assert!(Primitive::Slice {
            axis: 1,
            start: 3,
            len: 2
        }
        .forward(&[&x])
        .is_err());
    }

    #[test]
    fn reductions_keep_axis() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s = Primitive::Sum { axis: 1 }.forward(&[&x]).unwrap();
        assert_eq!(s.shape(), &[2, 1]);
        assert_eq!(s.data(), &[6.0, 15.0]);
        let m = Primitive::Mean { axis: 0 }.forward(&[&x]).unwrap();
        assert_eq!(m.data(), &[2.5, 3.5, 4.5]);
    }
}
