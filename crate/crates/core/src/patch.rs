//! Multi-patch transfer between the temporal and spatial searches.

use stnas_autodiff::{Tape, Tensor, Var};

use crate::error::{Result, StnasError};
use crate::params::{Group, Init, ParamId, ParamStore};

/// Per-patch compression and binding weights.
#[derive(Clone, Debug)]
pub struct PatchParams {
    pub w_l: ParamId,
    pub b_l: ParamId,
    pub w_bind: ParamId,
    pub b_bind: ParamId,
}

impl PatchParams {
    pub fn register(m: usize, len: usize, hidden: usize, store: &mut ParamStore, init: &mut Init) -> Self {
        let mut add = |name: &str, t: Tensor| store.add(format!("patch.m{m}.{name}"), Group::Weights, t);
        Self {
            w_l: add("w_l", init.fan_in(&[len, 1], len)),
            b_l: add("b_l", init.fan_in(&[1], len)),
            w_bind: add("w_bind", init.fan_in(&[2 * hidden, hidden], 2 * hidden)),
            b_bind: add("b_bind", init.fan_in(&[hidden], 2 * hidden)),
        }
    }
}

/// Length of each patch, or an error when `patches` does not divide `history`.
pub fn patch_len(history: usize, patches: usize) -> Result<usize> {
    if patches == 0 || !history.is_multiple_of(patches) {
        return Err(StnasError::Model(format!(
            "patch count M = {patches} must divide history P = {history}"
        )));
    }
    Ok(history / patches)
}

/// Contiguous equal slices of `h[S, P, D]` along time.
pub fn split_patches(tape: &mut Tape, h: Var, patches: usize) -> Result<Vec<Var>> {
    let p = tape.shape(h)[1];
    let len = patch_len(p, patches)?;
    if patches == 1 {
        return Ok(vec![h]);
    }
    (0..patches).map(|m| Ok(tape.slice(h, 1, m * len, len)?)).collect()
}

/// Contracts the time axis of `h[S, L, D]` with `w[L, 1]` (plus scalar bias): `[S, D]`.
pub fn compress_time(tape: &mut Tape, h: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || tape.shape(w) != [s[1], 1] {
        return Err(StnasError::Model(format!(
            "time compression of {s:?} with weights {:?}",
            tape.shape(w)
        )));
    }
    let t = tape.transpose(h, &[0, 2, 1])?;
    let y = tape.affine(t, w, b)?;
    Ok(tape.reshape(y, &[s[0], s[2]])?)
}

/// `[h′ ‖ E_emb]·W + b` over `[B, N, D]` inputs.
pub fn bind_context(tape: &mut Tape, h: Var, e_emb: Var, w: Var, b: Var) -> Result<Var> {
    if tape.shape(h) != tape.shape(e_emb) {
        return Err(StnasError::Model(format!(
            "patch binding: compressed patch {:?} vs context {:?}",
            tape.shape(h),
            tape.shape(e_emb)
        )));
    }
    let cat = tape.concat(&[h, e_emb], 2)?;
    Ok(tape.affine(cat, w, Some(b))?)
}

/// Elementwise sum of the per-patch spatial outputs.
pub fn aggregate_patches(tape: &mut Tape, outputs: &[Var]) -> Result<Var> {
    let (&first, rest) = outputs
        .split_first()
        .ok_or_else(|| StnasError::Model("no patch outputs to aggregate".into()))?;
    let mut acc = first;
    for &o in rest {
        acc = tape.add(acc, o)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap()
    }

    #[test]
    fn split_and_reassemble() {
        let mut tape = Tape::new();
        let h = tape.constant(ramp(&[2, 12, 3]));
        let parts = split_patches(&mut tape, h, 3).unwrap();
        assert_eq!(parts.len(), 3);
        assert!(parts.iter().all(|&p| tape.shape(p) == [2, 4, 3]));
        let back = tape.concat(&parts, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(h));
        assert_eq!(split_patches(&mut tape, h, 1).unwrap(), vec![h]);
        let err = split_patches(&mut tape, h, 5).unwrap_err().to_string();
        assert!(err.contains("M = 5") && err.contains("P = 12"), "{err}");
    }

    #[test]
    fn compression_examples() {
        let x = ramp(&[2, 4, 3]);
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let ones = tape.constant(Tensor::ones(&[4, 1]));
        let zero_b = tape.constant(Tensor::zeros(&[1]));
        let y = compress_time(&mut tape, h, ones, Some(zero_b)).unwrap();
        for s in 0..2 {
            for d in 0..3 {
                let sum: f64 = (0..4).map(|t| x.at(&[s, t, d])).sum();
                assert!((tape.value(y).at(&[s, d]) - sum).abs() < 1e-12);
            }
        }
        let first = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let y = compress_time(&mut tape, h, first, None).unwrap();
        for s in 0..2 {
            for d in 0..3 {
                assert_eq!(tape.value(y).at(&[s, d]), x.at(&[s, 0, d]));
            }
        }
        let z = tape.constant(Tensor::zeros(&[2, 4, 3]));
        let c = tape.constant(Tensor::scalar(0.3));
        let y = compress_time(&mut tape, z, first, Some(c)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn binding_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(ramp(&[1, 5, 8]));
        let e = tape.constant(ramp(&[1, 5, 8]).map(|v| v * 3.0));
        let mut proj = Tensor::zeros(&[16, 8]);
        for i in 0..8 {
            proj.data_mut()[i * 8 + i] = 1.0;
        }
        let w = tape.constant(proj);
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = bind_context(&mut tape, h, e, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 8]);
        assert_eq!(tape.value(y), tape.value(h));
        let z = tape.constant(Tensor::zeros(&[1, 5, 8]));
        let w = tape.constant(ramp(&[16, 8]));
        let c = tape.constant(Tensor::full(&[8], 2.5));
        let y = bind_context(&mut tape, z, z, w, c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn aggregation_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(ramp(&[2, 3]));
        assert_eq!(aggregate_patches(&mut tape, &[a]).unwrap(), a);
        let neg = tape.scale(a, -1.0).unwrap();
        let s = aggregate_patches(&mut tape, &[a, neg]).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        assert!(aggregate_patches(&mut tape, &[]).is_err());
    }
}
