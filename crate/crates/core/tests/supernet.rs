use stnas_autodiff::{Tensor, Var};
use stnas_core::arch::SearchMode;
use stnas_core::data::{Batch, NormStats, Split};
use stnas_core::model::{ModelConfig, Network};
use stnas_core::ops::{OpSpace, Operator};
use stnas_core::params::{Group, Init, ParamStore, Session};

fn tiny(mode: SearchMode) -> ModelConfig {
    let mut c = ModelConfig::new(4, 1, 24);
    c.history = 4;
    c.horizon = 2;
    c.hidden = 4;
    c.patches = 2;
    c.temporal_nodes = 2;
    c.spatial_nodes = 2;
    c.heads = 2;
    c.node_emb_dim = 3;
    c.mode = mode;
    c
}

fn stats() -> NormStats {
    NormStats {
        mean: vec![1.0],
        std: vec![2.0],
    }
}

fn ring() -> Tensor {
    let mut a = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        a.data_mut()[i * 4 + (i + 1) % 4] = 0.5;
        a.data_mut()[i * 4 + (i + 3) % 4] = 0.5;
    }
    a
}

fn batch(seed: u64) -> Batch {
    let mut init = Init::new(seed);
    Batch {
        split: Split::Train,
        inputs: init.uniform(&[2, 4, 4, 1], 1.0),
        targets: init.uniform(&[2, 2, 4, 1], 1.0),
        last_observed: Tensor::zeros(&[2, 4, 1]),
        tod: vec![3, 17],
        dow: vec![0, 5],
    }
}

/// Random logits so mixtures are not uniform.
fn supernet(mode: SearchMode) -> Network {
    let mut net = Network::supernet(tiny(mode), Some(ring()), stats(), 21).unwrap();
    let mut init = Init::new(22);
    for id in net.store.ids_in(Group::Arch).collect::<Vec<_>>() {
        let shape = net.store.value(id).shape().to_vec();
        *net.store.value_mut(id) = init.uniform(&shape, 1.0);
    }
    net
}

fn projected_loss(net: &Network, sess: &mut Session<'_>, b: &Batch, proj: &Tensor) -> Var {
    let y = net.forward(sess, &b.inputs, &b.tod, &b.dow).unwrap();
    let w = sess.tape.constant(proj.clone());
    let p = sess.tape.mul(y, w).unwrap();
    sess.tape.sum_all(p).unwrap()
}

/// Largest relative gap between reverse-mode and central-difference gradients over every parameter.
fn composed_grad_error(mode: SearchMode) -> f64 {
    let net = supernet(mode);
    let b = batch(23);
    let proj = Init::new(24).uniform(&[2, 2, 4, 1], 1.0);
    let value = |store: &ParamStore| {
        let mut n = net.clone();
        n.store = store.clone();
        let mut sess = Session::new(&n.store, None);
        let l = projected_loss(&n, &mut sess, &b, &proj);
        sess.tape.value(l).data()[0]
    };
    let mut sess = Session::all_trainable(&net.store);
    let l = projected_loss(&net, &mut sess, &b, &proj);
    let grads = sess.tape.backward(l).unwrap();
    let analytic = sess.param_grads(&grads);
    assert_eq!(analytic.len(), net.store.len());
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut store = net.store.clone();
    for (id, g) in analytic {
        for i in 0..g.numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let up = value(&store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let down = value(&store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

#[test]
fn composed_supernet_gradients_match_finite_differences() {
    for mode in [SearchMode::Decoupled, SearchMode::Mixed] {
        let err = composed_grad_error(mode);
        assert!(err <= 1e-4, "{mode}: {err:e}");
    }
}

#[test]
fn zero_identity_dags_expand_to_five_quarters() {
    let mut cfg = tiny(SearchMode::Decoupled);
    let zi = [Operator::Zero, Operator::Identity];
    cfg.temporal_space = OpSpace::temporal().restricted(&zi).unwrap();
    cfg.spatial_space = OpSpace::spatial().restricted(&zi).unwrap();
    let net = Network::supernet(cfg, None, stats(), 1).unwrap();
    let mut sess = Session::new(&net.store, None);
    let z0 = Init::new(2).uniform(&[8, 4, 4], 1.0);
    let zv = sess.tape.constant(z0.clone());
    let t = net.temporal_dag_forward(&mut sess, zv).unwrap();
    assert!(sess.tape.value(t).max_abs_diff(&z0.map(|v| 1.25 * v)) <= 1e-9);
    let h = Init::new(3).uniform(&[2, 4, 4], 1.0);
    let hv = sess.tape.constant(h.clone());
    for m in 0..2 {
        let s = net.spatial_dag_forward(&mut sess, hv, m).unwrap();
        assert!(sess.tape.value(s).max_abs_diff(&h.map(|v| 1.25 * v)) <= 1e-9);
    }
}

fn spatial_outputs(net: &Network, h: &Tensor) -> Vec<Tensor> {
    let mut sess = Session::new(&net.store, None);
    let hv = sess.tape.constant(h.clone());
    (0..2)
        .map(|m| {
            let y = net.spatial_dag_forward(&mut sess, hv, m).unwrap();
            sess.tape.value(y).clone()
        })
        .collect()
}

#[test]
fn shared_weights_reach_every_patch_and_logits_stay_local() {
    let net = supernet(SearchMode::Decoupled);
    let h = Init::new(5).uniform(&[2, 4, 4], 1.0);
    let base = spatial_outputs(&net, &h);

    let mut shared = net.clone();
    let id = shared
        .store
        .find("spatial.0->1.gnn_adap.w")
        .expect("shared bank weight");
    *shared.store.value_mut(id) = shared.store.value(id).map(|v| v + 0.5);
    let out = spatial_outputs(&shared, &h);
    for m in 0..2 {
        assert!(
            out[m].max_abs_diff(&base[m]) > 1e-6,
            "patch {m} ignored the shared weight"
        );
    }

    let mut local = net.clone();
    let id = local.store.find("spatial.logits.m0.0->1").expect("patch 0 logits");
    local.store.value_mut(id).data_mut()[0] += 3.0;
    let out = spatial_outputs(&local, &h);
    assert!(out[0].max_abs_diff(&base[0]) > 1e-6);
    assert_eq!(out[1], base[1]);
}
