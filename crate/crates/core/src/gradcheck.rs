//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over all parameter entries of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

fn scalar_loss<F>(forward: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of `forward` against central differences with
/// step `eps` for every entry of every parameter.
pub fn grad_check<F>(forward: F, params: &ParamStore<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }

    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    let first = tape.value(loss).clone();
    let second = {
        let mut t = Tape::new();
        let l = forward(params, &mut t)?;
        t.value(l).clone()
    };
    if first.data().iter().map(|v| v.to_bits()).ne(second.data().iter().map(|v| v.to_bits())) {
        return Err(Error::NonDeterministic);
    }
    let grads = tape.backward(loss)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let id = crate::param::ParamId(pi);
        let zeros = Tensor::zeros(p.value.shape());
        let analytic = grads.get(id).unwrap_or(&zeros);
        for j in 0..p.value.len() {
            let orig = p.value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = scalar_loss(&forward, &work)?;
            work.get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = scalar_loss(&forward, &work)?;
            work.get_mut(id).value.data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = p.name.clone();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

/// Gradient check of the whole network in 64-bit arithmetic. Parameters,
/// input maps and the projection `r` of the scalar loss `sum(r ⊙ embedding)`
/// are all drawn from `seed`. Inputs and `r` are uniform in [-1, 1] with
/// spatial size `config.synth.height × width`.
pub fn model_grad_check(config: &RunConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Model<f64> = Model::new(config.model.clone(), &mut rng)?;
    let (h, w) = (config.synth.height, config.synth.width);
    let mut uniform = |shape: &[usize]| -> Result<Tensor<f64>> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
    };
    let f_a = uniform(&[config.model.appearance_dim, h, w])?;
    let f_s = uniform(&[config.model.semantic_dim, h, w])?;
    let r = uniform(&[config.model.embedding_len()])?;
    let mcfg = config.model.clone();
    grad_check(
        |params, tape| {
            let m = Model::from_params(mcfg.clone(), params.clone())?;
            let out = m.forward(tape, &f_a, &f_s)?;
            let rv = tape.constant(r.clone());
            let prod = tape.mul_broadcast(out.embedding, rv)?;
            Ok(tape.sum(prod))
        },
        &model.params,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PoolMode;

    #[test]
    fn linear_model_is_exact() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::from_vec(vec![0.3, -0.7, 1.1]))
            .unwrap();
        let x = Tensor::from_vec(vec![2.0, -1.0, 0.5]);
        let report = grad_check(
            |p, tape| {
                let w = tape.param(p, crate::param::ParamId(0));
                let xv = tape.constant(x.clone());
                let prod = tape.mul_broadcast(w, xv)?;
                Ok(tape.sum(prod))
            },
            &store,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn conv_sigmoid_graph() {
        let mut store = ParamStore::new();
        let w: Vec<f64> = (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let id = store.register("k", Tensor::new(vec![1, 2, 3, 3], w).unwrap()).unwrap();
        let x: Vec<f64> = (0..32).map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0).collect();
        let x = Tensor::new(vec![2, 4, 4], x).unwrap();
        let report = grad_check(
            |p, tape| {
                let xv = tape.constant(x.clone());
                let k = tape.param(p, id);
                let c = tape.conv2d(xv, k, None, 1)?;
                let s = tape.sigmoid(c);
                let pooled = tape.pool_spatial(s, PoolMode::Avg)?;
                Ok(tape.sum(pooled))
            },
            &store,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn rejects_step_out_of_range() {
        let store = ParamStore::new();
        let f = |_: &ParamStore<f64>, t: &mut Tape<f64>| Ok(t.constant(Tensor::scalar(0.0)));
        assert!(grad_check(f, &store, 1e-2).is_err());
        assert!(grad_check(f, &store, 1e-7).is_err());
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let res = grad_check(
            |p, tape| {
                calls.set(calls.get() + 1.0);
                let w = tape.param(p, crate::param::ParamId(0));
                let c = tape.constant(Tensor::scalar(calls.get()));
                let prod = tape.mul_broadcast(w, c)?;
                Ok(tape.sum(prod))
            },
            &store,
            1e-4,
        );
        assert!(matches!(res, Err(Error::NonDeterministic)));
    }
}
