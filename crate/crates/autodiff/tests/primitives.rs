use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stnas_autodiff::{grad_check, grad_check_many, Attrs, Primitive, Tape, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so every output coordinate carries a distinct cotangent.
fn project(tape: &mut Tape, y: Var, seed: u64) -> stnas_autodiff::Result<Var> {
    let w = tape.constant(random(tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn check_unary(prim: Primitive, shape: &[usize], seed: u64) -> f64 {
    let x = random(shape, seed);
    grad_check(
        |t, v| {
            let y = t.apply(prim.clone(), &[v])?;
            project(t, y, seed + 100)
        },
        &x,
        EPS,
    )
    .unwrap()
}

fn check_binary(prim: Primitive, a: &[usize], b: &[usize], seed: u64) -> f64 {
    let pts = [random(a, seed), random(b, seed + 1)];
    grad_check_many(
        |t, v| {
            let y = t.apply(prim.clone(), v)?;
            project(t, y, seed + 100)
        },
        &pts,
        EPS,
    )
    .unwrap()
}

#[test]
fn every_primitive_passes_grad_check() {
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check_binary(Primitive::MatMul, &[3, 4], &[4, 2], 1)),
        (
            "matmul-batched",
            check_binary(Primitive::MatMul, &[2, 3, 4], &[2, 4, 5], 2),
        ),
        ("add", check_binary(Primitive::Add, &[2, 3], &[2, 3], 3)),
        ("sub", check_binary(Primitive::Sub, &[2, 3], &[2, 3], 4)),
        ("elementwise-mul", check_binary(Primitive::Mul, &[2, 3], &[2, 3], 5)),
        ("scalar-scale", check_unary(Primitive::Scale(-1.7), &[2, 3], 6)),
        ("scalar-scale-by", check_binary(Primitive::ScaleBy, &[1], &[2, 3], 7)),
        ("relu", {
            // keep coordinates away from the kink
            let x = random(&[2, 5], 8).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
            grad_check(
                |t, v| {
                    let y = t.relu(v)?;
                    project(t, y, 9)
                },
                &x,
                EPS,
            )
            .unwrap()
        }),
        ("sigmoid", check_unary(Primitive::Sigmoid, &[2, 4], 10)),
        ("tanh", check_unary(Primitive::Tanh, &[2, 4], 11)),
        ("exp", check_unary(Primitive::Exp, &[2, 4], 12)),
        (
            "softmax-axis0",
            check_unary(Primitive::Softmax { axis: 0 }, &[3, 4], 13),
        ),
        (
            "softmax-axis1",
            check_unary(Primitive::Softmax { axis: 1 }, &[2, 3, 4], 14),
        ),
        (
            "concat",
            check_binary(Primitive::Concat { axis: 1 }, &[2, 3, 2], &[2, 1, 2], 15),
        ),
        (
            "slice",
            check_unary(
                Primitive::Slice {
                    axis: 1,
                    start: 1,
                    len: 2,
                },
                &[2, 4, 3],
                16,
            ),
        ),
        (
            "reshape",
            check_unary(Primitive::Reshape { shape: vec![6, 2] }, &[3, 4], 17),
        ),
        ("sum-over-axis", check_unary(Primitive::Sum { axis: 1 }, &[2, 3, 4], 18)),
        (
            "mean-over-axis",
            check_unary(Primitive::Mean { axis: 0 }, &[2, 3, 4], 19),
        ),
        (
            "causal-dilated-conv1d",
            check_binary(Primitive::CausalConv { dilation: 2 }, &[2, 6, 3], &[2, 3, 4], 20),
        ),
        (
            "transpose",
            check_unary(Primitive::Transpose { perm: vec![2, 0, 1] }, &[2, 3, 4], 21),
        ),
    ];
    for (name, err) in cases {
        assert!(err <= TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn kind_strings_resolve_to_primitives() {
    let p = Primitive::from_name("softmax-over-axis", &Attrs::new().int("axis", 1)).unwrap();
    assert_eq!(p, Primitive::Softmax { axis: 1 });
    let s = Primitive::from_name("scalar-scale", &Attrs::new().real("factor", 2.0)).unwrap();
    assert_eq!(s, Primitive::Scale(2.0));
    let conv = Primitive::from_name("causal-dilated-conv1d", &Attrs::new()).unwrap();
    assert_eq!(conv.name(), "causal-dilated-conv1d");
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = tape
        .apply(Primitive::from_name("relu", &Attrs::new()).unwrap(), &[x])
        .unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

fn build(tape: &mut Tape, x: &Tensor, w: &Tensor) -> (Var, Var, Var) {
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let c = tape.causal_conv(xv, wv, 1).unwrap();
    let s = tape.softmax(c, 2).unwrap();
    let g = tape.sigmoid(c).unwrap();
    let m = tape.mul(s, g).unwrap();
    let loss = tape.mean_all(m).unwrap();
    (xv, wv, loss)
}

#[test]
fn reruns_are_bit_identical() {
    let x = random(&[3, 5, 4], 30);
    let w = random(&[2, 4, 4], 31);
    let mut t1 = Tape::new();
    let (x1, w1, l1) = build(&mut t1, &x, &w);
    let mut t2 = Tape::new();
    let (x2, w2, l2) = build(&mut t2, &x, &w);
    assert_eq!(t1.value(l1).data()[0].to_bits(), t2.value(l2).data()[0].to_bits());
    let g1 = t1.backward(l1).unwrap();
    let g2 = t2.backward(l2).unwrap();
    assert_eq!(g1.get(x1), g2.get(x2));
    assert_eq!(g1.get(w1), g2.get(w2));
    // a second sweep on the same tape
    assert_eq!(g1.get(w1), t1.backward(l1).unwrap().get(w1));
    // replay reproduces every recorded value exactly
    let replayed = t1.replay().unwrap();
    for (i, v) in replayed.iter().enumerate() {
        assert_eq!(v, t1.value(t1.var(i).unwrap()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let y = Primitive::Softmax { axis: 1 }.forward(&[&x]).unwrap();
        for row in y.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_ignores_the_future(
        vals in prop::collection::vec(-1.0f64..1.0, 16),
        t in 0usize..8,
        bump in -5.0f64..5.0,
        dilation in 1usize..4,
    ) {
        let x = Tensor::new(vec![1, 8, 2], vals).unwrap();
        let w = random(&[3, 2, 2], 40);
        let mut x2 = x.clone();
        for c in 0..2 {
            x2.data_mut()[t * 2 + c] += bump;
        }
        let conv = Primitive::CausalConv { dilation };
        let y1 = conv.forward(&[&x, &w]).unwrap();
        let y2 = conv.forward(&[&x2, &w]).unwrap();
        prop_assert_eq!(&y1.data()[..t * 2], &y2.data()[..t * 2]);
    }
}
