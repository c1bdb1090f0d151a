//! Series embedding and the fused node/time context.

use stnas_autodiff::{Result as AdResult, Tape, Tensor, Var};

use crate::error::{Result, StnasError};
use crate::params::{Group, Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub w_t: ParamId,
    pub b_t: ParamId,
    pub e_node: ParamId,
    pub e_tod: ParamId,
    pub e_dow: ParamId,
    pub w_fuse: ParamId,
    pub b_fuse: ParamId,
}

impl EmbeddingParams {
    pub fn register(
        channels: usize,
        hidden: usize,
        nodes: usize,
        steps_per_day: usize,
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Self {
        let table = 1.0 / (hidden as f64).sqrt();
        let mut add = |name: &str, t: Tensor| store.add(format!("embed.{name}"), Group::Weights, t);
        Self {
            w_t: add("w_t", init.fan_in(&[channels, hidden], channels)),
            b_t: add("b_t", init.fan_in(&[hidden], channels)),
            e_node: add("e_node", init.uniform(&[nodes, hidden], table)),
            e_tod: add("e_tod", init.uniform(&[steps_per_day, hidden], table)),
            e_dow: add("e_dow", init.uniform(&[7, hidden], table)),
            w_fuse: add("w_fuse", init.fan_in(&[3 * hidden, hidden], 3 * hidden)),
            b_fuse: add("b_fuse", init.fan_in(&[hidden], 3 * hidden)),
        }
    }
}

/// `x·W_t + b_t` per step and node: `[B, P, N, C] → [B, P, N, D]`.
pub fn embed_series(tape: &mut Tape, x: Var, w_t: Var, b_t: Var) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap_or(&0);
    let rows = tape.shape(w_t)[0];
    if c != rows {
        return Err(StnasError::Model(format!(
            "embedding: input has {c} channels, W_t expects {rows}"
        )));
    }
    Ok(tape.affine(x, w_t, Some(b_t))?)
}

fn one_hot(indices: &[usize], size: usize, what: &str) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[indices.len(), size]);
    for (r, &i) in indices.iter().enumerate() {
        if i >= size {
            return Err(StnasError::Model(format!("{what} index {i} out of range 0..{size}")));
        }
        t.data_mut()[r * size + i] = 1.0;
    }
    Ok(t)
}

/// Tape handles for [`fuse_context`].
pub struct ContextTables {
    pub e_node: Var,
    pub e_tod: Var,
    pub e_dow: Var,
    pub w_fuse: Var,
    pub b_fuse: Var,
}

/// `FC([E_ToD[tod] ‖ E_DoW[dow] ‖ E_N])` for each sample: `[B, N, D]`.
pub fn fuse_context(tape: &mut Tape, tod: &[usize], dow: &[usize], t: &ContextTables) -> Result<Var> {
    if tod.len() != dow.len() || tod.is_empty() {
        return Err(StnasError::Model(format!(
            "context needs matching non-empty tod/dow lists, got {} and {}",
            tod.len(),
            dow.len()
        )));
    }
    let b = tod.len();
    let n = tape.shape(t.e_node)[0];
    let tod_hot = tape.constant(one_hot(tod, tape.shape(t.e_tod)[0], "time-of-day")?);
    let dow_hot = tape.constant(one_hot(dow, tape.shape(t.e_dow)[0], "day-of-week")?);
    let fused = (|| -> AdResult<Var> {
        let tod_rows = tape.matmul(tod_hot, t.e_tod)?;
        let dow_rows = tape.matmul(dow_hot, t.e_dow)?;
        let tod_n = tape.repeat_new_axis(tod_rows, 1, n)?;
        let dow_n = tape.repeat_new_axis(dow_rows, 1, n)?;
        let nodes = tape.repeat_new_axis(t.e_node, 0, b)?;
        let cat = tape.concat(&[tod_n, dow_n, nodes], 2)?;
        tape.affine(cat, t.w_fuse, Some(t.b_fuse))
    })()?;
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tables(tape: &mut Tape, n: usize, d: usize, nd: usize, bias: f64, seed: u64) -> ContextTables {
        let mut init = Init::new(seed);
        ContextTables {
            e_node: tape.constant(init.uniform(&[n, d], 1.0)),
            e_tod: tape.constant(init.uniform(&[nd, d], 1.0)),
            e_dow: tape.constant(init.uniform(&[7, d], 1.0)),
            w_fuse: tape.constant(init.uniform(&[3 * d, d], 1.0)),
            b_fuse: tape.constant(Tensor::full(&[d], bias)),
        }
    }

    #[test]
    fn embed_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 12, 5, 2]));
        let w = tape.constant(Tensor::ones(&[2, 8]));
        let b = tape.constant(Tensor::full(&[8], 0.7));
        let z = embed_series(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.shape(z), &[1, 12, 5, 8]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.7));

        let x = tape.constant(Tensor::full(&[1, 2, 3, 1], 2.0));
        let w = tape.constant(Tensor::ones(&[1, 4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let z = embed_series(&mut tape, x, w, b).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 2.0));

        let bad = tape.constant(Tensor::ones(&[3, 4]));
        assert!(embed_series(&mut tape, x, bad, b).is_err());
    }

    #[test]
    fn embed_is_affine_in_x() {
        let mut init = Init::new(1);
        let x = init.uniform(&[2, 3, 4, 2], 1.0);
        let run = |input: Tensor| {
            let mut init = Init::new(2);
            let mut tape = Tape::new();
            let xv = tape.constant(input);
            let w = tape.constant(init.uniform(&[2, 5], 1.0));
            let b = tape.constant(init.uniform(&[5], 1.0));
            let z = embed_series(&mut tape, xv, w, b).unwrap();
            tape.value(z).clone()
        };
        let z0 = run(Tensor::zeros(&[2, 3, 4, 2]));
        let z1 = run(x.clone());
        let z2 = run(x.map(|v| 2.0 * v));
        for ((a, b), c) in z2.data().iter().zip(z1.data()).zip(z0.data()) {
            assert!(((a - c) - 2.0 * (b - c)).abs() < 1e-12);
        }
    }

    #[test]
    fn context_examples() {
        let mut tape = Tape::new();
        let zero = ContextTables {
            e_node: tape.constant(Tensor::zeros(&[5, 8])),
            e_tod: tape.constant(Tensor::zeros(&[24, 8])),
            e_dow: tape.constant(Tensor::zeros(&[7, 8])),
            w_fuse: tape.constant(Tensor::zeros(&[24, 8])),
            b_fuse: tape.constant(Tensor::full(&[8], -0.5)),
        };
        let e = fuse_context(&mut tape, &[3], &[2], &zero).unwrap();
        assert_eq!(tape.shape(e), &[1, 5, 8]);
        assert!(tape.value(e).data().iter().all(|&v| v == -0.5));
        assert!(fuse_context(&mut tape, &[24], &[0], &zero).is_err());
        assert!(fuse_context(&mut tape, &[0], &[7], &zero).is_err());

        let t = tables(&mut tape, 5, 8, 24, 0.1, 3);
        let a = fuse_context(&mut tape, &[4, 4], &[1, 1], &t).unwrap();
        let v = tape.value(a);
        assert_eq!(v.data()[..40], v.data()[40..]);
    }

    #[test]
    fn identical_rows_are_interchangeable() {
        let mut tape = Tape::new();
        let t = tables(&mut tape, 3, 4, 6, 0.0, 4);
        let mut tod = tape.value(t.e_tod).clone();
        let row: Vec<f64> = tod.data()[8..12].to_vec();
        tod.data_mut()[4..8].copy_from_slice(&row);
        let t2 = ContextTables {
            e_tod: tape.constant(tod),
            ..t
        };
        let a = fuse_context(&mut tape, &[1], &[5], &t2).unwrap();
        let b = fuse_context(&mut tape, &[2], &[5], &t2).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }
}
