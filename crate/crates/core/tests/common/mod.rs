#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;

use hddnet::config::{Config, ModelConfig};
use hddnet::model::{Group, Model};
use hddnet::{DiffArray, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DiffArray {
    let n = shape.iter().product();
    DiffArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `|a - n| / max(|a|, |n|)` on 2-norms; 0 when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error between the tape gradient of the scalar `f` and
/// central differences, over all inputs.
pub fn fd_check<F>(inputs: &[DiffArray], step: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |arrays: &[DiffArray]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| t.leaf(a.clone(), true)).collect();
        let out = f(&mut t, &vars);
        (t, vars, out)
    };
    let (mut tape, vars, out) = eval(inputs);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric: Vec<f64> = (0..inputs[k].len())
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[j] += step;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[j] -= step;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                (tp.data(op)[0] - tm.data(om)[0]) / (2.0 * step)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Scalar probe `sum(w * x)` with fixed random weights, so every output
/// element carries a distinct gradient.
pub fn probe(t: &mut Tape, x: Var, seed: u64) -> Var {
    let w = random_array(&mut rng(seed), t.shape(x), -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(x, w).unwrap();
    t.sum(p)
}

/// Smallest architecture the full pipeline accepts.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        dim: 4,
        width: 2,
        detector_width: 2,
        ..ModelConfig::default()
    }
}

pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.model = tiny_model_config();
    cfg.loss.windows = vec![8, 16];
    cfg.loss.lambdas = vec![4.0, 1.0];
    cfg.train.crop = 32;
    cfg.train.batch = 2;
    cfg.train.k = 6;
    cfg
}

/// Model with one parameter replaced.
pub fn with_param(model: &Model, name: &str, idx: usize, delta: f64) -> Model {
    let mut m = model.clone();
    m.params.get_mut(name).unwrap().value.data_mut()[idx] += delta;
    m
}

/// Moves every bias and affine offset off its zero initialisation. With
/// zero biases, dead regions put pre-activations exactly on the relu kink,
/// where finite differences are meaningless.
pub fn jitter_offsets(model: &Model, seed: u64) -> Model {
    let mut m = model.clone();
    let mut r = rng(seed);
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with(".b") || n.ends_with(".beta")).collect();
    for n in names {
        for v in m.params.get_mut(&n).unwrap().value.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    m
}

/// Trainable parameter names of `group`.
pub fn group_params(model: &Model, group: Group) -> Vec<String> {
    model
        .params
        .iter()
        .filter(|(n, p)| p.trainable && Group::of(n) == Some(group))
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Central-difference gradient of `loss` w.r.t. the listed entries of a
/// parameter.
pub fn fd_param(model: &Model, name: &str, idx: &[usize], step: f64, loss: &dyn Fn(&Model) -> f64) -> Vec<f64> {
    idx.iter()
        .map(|&i| (loss(&with_param(model, name, i, step)) - loss(&with_param(model, name, i, -step))) / (2.0 * step))
        .collect()
}

pub type Grads = BTreeMap<String, Vec<f64>>;

/// Pass/fail line in the acceptance report format.
pub fn report(criterion: usize, ok: bool, detail: &str) {
    println!("criterion {criterion}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
}
