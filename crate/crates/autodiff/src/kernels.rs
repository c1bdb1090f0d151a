//! Dense inner loops shared by the forward and backward passes.

use rayon::prelude::*;

/// Rows of output below which the matmul never fans out to the thread pool.
const PAR_MIN_ROWS: usize = 64;

/// `c += a·b` for strided row-major views; `c` is `m×n` with row stride `n`.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "rhs out of bounds");
    assert!(m * n <= c.len(), "output out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let threads = rayon::current_num_threads();
    if m >= PAR_MIN_ROWS && threads > 1 {
        let rows = m.div_ceil(threads);
        c[..m * n].par_chunks_mut(rows * n).enumerate().for_each(|(i, chunk)| {
            let r = chunk.len() / n;
            dgemm(r, k, n, &a[i * rows * k..], k, 1, b, n, 1, chunk);
        });
    } else {
        dgemm(m, k, n, a, k, 1, b, n, 1, c);
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    dgemm(m, n, k, a, n, 1, b, 1, n, c);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(k, m, n, a, 1, k, b, n, 1, c);
}

/// Causal dilated convolution over `x[batch, time, c_in]` with `w[taps, c_in, c_out]`:
/// `y[b, t] = Σ_k x[b, t − k·dilation] · w[k]`, zero for negative source times.
pub(crate) fn causal_conv_forward(x: &[f64], w: &[f64], y: &mut [f64], dims: ConvDims) {
    let ConvDims {
        batch,
        time,
        c_in,
        c_out,
        taps,
        dilation,
    } = dims;
    let rows = batch * time;
    let mut z = vec![0.0; rows * c_out];
    for k in 0..taps {
        let shift = k * dilation;
        if shift >= time {
            break;
        }
        let w_k = &w[k * c_in * c_out..(k + 1) * c_in * c_out];
        if shift == 0 {
            gemm_nn(x, w_k, y, rows, c_in, c_out);
            continue;
        }
        z.fill(0.0);
        gemm_nn(x, w_k, &mut z, rows, c_in, c_out);
        for b in 0..batch {
            let base = b * time * c_out;
            let dst = &mut y[base + shift * c_out..base + time * c_out];
            let src = &z[base..base + (time - shift) * c_out];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Accumulates input and kernel gradients of [`causal_conv_forward`].
pub(crate) fn causal_conv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    dims: ConvDims,
) {
    let ConvDims {
        batch,
        time,
        c_in,
        c_out,
        taps,
        dilation,
    } = dims;
    let rows = batch * time;
    let mut dx = dx;
    let mut dw = dw;
    let mut dz = vec![0.0; rows * c_out];
    for k in 0..taps {
        let shift = k * dilation;
        if shift >= time {
            break;
        }
        // dz[b, s] = dy[b, s + shift], zero past the end
        let g: &[f64] = if shift == 0 {
            dy
        } else {
            dz.fill(0.0);
            for b in 0..batch {
                let base = b * time * c_out;
                dz[base..base + (time - shift) * c_out].copy_from_slice(&dy[base + shift * c_out..base + time * c_out]);
            }
            &dz
        };
        let span = k * c_in * c_out..(k + 1) * c_in * c_out;
        if let Some(dx) = dx.as_deref_mut() {
            gemm_nt(g, &w[span.clone()], dx, rows, c_out, c_in);
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm_tn(x, g, &mut dw[span], rows, c_in, c_out);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub time: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub taps: usize,
    pub dilation: usize,
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Writes `src` (shape `shape`) permuted by `perm` into `dst`; `dst` axis `i` is `src` axis `perm[i]`.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64]) {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let stride_in_out_order: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let rank = shape.len();
    if rank == 0 {
        dst.copy_from_slice(src);
        return;
    }
    let mut index = vec![0usize; rank];
    let mut src_off = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = stride_in_out_order[last];
    let mut out = 0usize;
    while out < dst.len() {
        for j in 0..inner {
            dst[out + j] = src[src_off + j * inner_stride];
        }
        out += inner;
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            index[ax] += 1;
            src_off += stride_in_out_order[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            src_off -= stride_in_out_order[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
}
