mod common;

use saane::config::{RunConfig, Variant};
use saane::gradcheck::{grad_check, model_grad_check};
use saane::param::{ParamId, ParamStore};
use saane::{PoolMode, Result, Tape, Tensor, Var};

const LIMIT: f64 = 1e-4;

/// Registers each tensor as a parameter and checks `op` on them, reduced to a
/// scalar through a fixed random projection so every output entry matters.
fn check(seed: u64, shapes: &[&[usize]], op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut r = common::rng(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.register(format!("x{i}"), common::uniform(&mut r, s)).unwrap())
        .collect();
    let probe_seed = seed ^ 0x5eed;
    let report = grad_check(
        |p, tape| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(p, id)).collect();
            let out = op(tape, &vars)?;
            let shape = tape.value(out).shape().to_vec();
            let proj = common::uniform(&mut common::rng(probe_seed), &shape);
            let pv = tape.constant(proj);
            let prod = tape.mul_broadcast(out, pv)?;
            Ok(tape.sum(prod))
        },
        &store,
        1e-4,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn every_operation_matches_finite_differences() {
    let cases: Vec<(&str, f64)> = vec![
        ("conv2d", check(1, &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1))),
        ("conv2d 7x7", check(2, &[&[2, 6, 6], &[1, 2, 7, 7]], |t, v| t.conv2d(v[0], v[1], None, 3))),
        ("pool_spatial avg", check(3, &[&[4, 3, 3]], |t, v| t.pool_spatial(v[0], PoolMode::Avg))),
        ("pool_spatial max", check(4, &[&[4, 3, 3]], |t, v| t.pool_spatial(v[0], PoolMode::Max))),
        ("pool_channel avg", check(5, &[&[4, 3, 3]], |t, v| t.pool_channel(v[0], PoolMode::Avg))),
        ("pool_channel max", check(6, &[&[4, 3, 3]], |t, v| t.pool_channel(v[0], PoolMode::Max))),
        ("linear", check(7, &[&[5], &[3, 5], &[3]], |t, v| t.linear(v[0], v[1], v[2]))),
        ("mlp2", check(8, &[&[6], &[3, 6], &[3], &[6, 3], &[6]], |t, v| t.mlp2(v[0], v[1], v[2], v[3], v[4]))),
        ("sigmoid", check(9, &[&[10]], |t, v| Ok(t.sigmoid(v[0])))),
        ("relu", check(10, &[&[10]], |t, v| Ok(t.relu(v[0])))),
        ("add", check(11, &[&[3, 2, 2], &[3, 2, 2]], |t, v| t.add(v[0], v[1]))),
        ("mul_broadcast channel", check(12, &[&[3, 4, 4], &[3, 1, 1]], |t, v| t.mul_broadcast(v[0], v[1]))),
        ("mul_broadcast spatial", check(13, &[&[3, 1, 1], &[1, 4, 4]], |t, v| t.mul_broadcast(v[0], v[1]))),
        ("concat_channels", check(14, &[&[1, 3, 3], &[2, 3, 3]], |t, v| t.concat_channels(v[0], v[1]))),
        ("reshape", check(15, &[&[6]], |t, v| t.reshape(v[0], &[6, 1, 1]))),
        ("spp max", check(16, &[&[3, 5, 5]], |t, v| t.spp(v[0], &[3, 2, 1], PoolMode::Max))),
        ("spp avg", check(17, &[&[3, 5, 5]], |t, v| t.spp(v[0], &[3, 2, 1], PoolMode::Avg))),
        ("normalize_scale", check(18, &[&[12]], |t, v| t.normalize_scale(v[0], 10.0))),
        ("sum", check(19, &[&[3, 3]], |t, v| Ok(t.sum(v[0])))),
    ];
    for (name, err) in &cases {
        assert!(*err < LIMIT, "{name}: {err}");
    }
}

#[test]
fn conv_sigmoid_graph_is_tight() {
    let err = check(20, &[&[2, 4, 4], &[2, 2, 3, 3]], |t, v| {
        let c = t.conv2d(v[0], v[1], None, 1)?;
        Ok(t.sigmoid(c))
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn full_network_gradients_for_every_variant() {
    for variant in [Variant::App, Variant::AppSem, Variant::Saane] {
        for share in [true, false] {
            let mut cfg = RunConfig::toy();
            cfg.model.variant = variant;
            cfg.model.share_channel_attention = share;
            let report = model_grad_check(&cfg, 7, 1e-4).unwrap();
            assert!(report.max_rel_error < LIMIT, "{variant:?} shared={share}: {report:?}");
        }
    }
}

#[test]
fn attention_parameters_receive_gradient() {
    let cfg = RunConfig::toy();
    let mut r = common::rng(3);
    let model: saane::Model<f64> = saane::Model::new(cfg.model.clone(), &mut r).unwrap();
    let f_a = common::uniform(&mut r, &[16, 8, 8]);
    let f_s = common::uniform(&mut r, &[12, 8, 8]);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &f_a, &f_s).unwrap();
    let probe = tape.constant(common::uniform(&mut r, &[cfg.model.embedding_len()]));
    let prod = tape.mul_broadcast(out.embedding, probe).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let by_index: std::collections::HashMap<usize, &Tensor<f64>> = grads.iter().map(|(id, g)| (id.index(), g)).collect();
    for (i, p) in model.params.iter().enumerate() {
        let g = by_index.get(&i).unwrap_or_else(|| panic!("{} has no gradient", p.name));
        assert!(g.data().iter().any(|&v| v != 0.0), "{} gradient is zero", p.name);
    }
}
