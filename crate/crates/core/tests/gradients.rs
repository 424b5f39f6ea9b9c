//! Whole-model gradient checks on every entry of every trainable tensor.

mod common;

use common::*;
use hddnet::config::DetectorObjective;
use hddnet::descriptor::describe_image;
use hddnet::detector::score_map;
use hddnet::losses::detector_loss;
use hddnet::model::{Group, Model};
use hddnet::synth::synth_image;
use hddnet::training::{descriptor_batch_grads, detector_pair_grads, make_pair, PairParams, TrainPair};
use hddnet::Tape;

fn pairs(seed: u64, n: usize) -> Vec<TrainPair> {
    let cfg = tiny_config();
    let src = synth_image(seed, 64);
    let pp = PairParams::from_config(&cfg.train);
    let mut r = rng(seed);
    let mut out = Vec::new();
    while out.len() < n {
        if let Ok(p) = make_pair(&mut r, &src, &pp) {
            out.push(p);
        }
    }
    out
}

fn check_all(model: &Model, group: Group, grads: &Grads, loss: &dyn Fn(&Model) -> f64) -> f64 {
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for name in group_params(model, group) {
        let len = model.params.get(&name).unwrap().value.len();
        let idx: Vec<usize> = (0..len).collect();
        a.extend(grads.get(&name).cloned().unwrap_or_else(|| vec![0.0; len]));
        n.extend(fd_param(model, &name, &idx, 1e-6, loss));
    }
    rel_err(&a, &n)
}

#[test]
fn every_detector_weight_under_each_objective() {
    let base = tiny_config();
    let model = jitter_offsets(&Model::new(base.model.clone(), 1).unwrap(), 2);
    let pair = &pairs(3, 1)[0];
    let da = describe_image(&model, &pair.image_a).unwrap();
    let db = describe_image(&model, &pair.image_b).unwrap();
    for objective in [DetectorObjective::Msip, DetectorObjective::MsTrip, DetectorObjective::Combined] {
        let mut cfg = base.loss.clone();
        cfg.detector = objective;
        let (_, grads) = detector_pair_grads(&model, pair, &cfg).unwrap();
        let loss = |m: &Model| {
            let mut t = Tape::new();
            let bound = m.bind(&mut t, &[]);
            let (a, b) = (t.constant(pair.image_a.clone()), t.constant(pair.image_b.clone()));
            let sa = score_map(&mut t, &bound, a).unwrap();
            let sb = score_map(&mut t, &bound, b).unwrap();
            let (x, y) = (t.constant(da.clone()), t.constant(db.clone()));
            let l = detector_loss(&mut t, sa, sb, x, y, &pair.h_ba, &cfg).unwrap();
            t.data(l)[0]
        };
        let e = check_all(&model, Group::Detector, &grads, &loss);
        assert!(e < 1e-4, "{objective:?}: {e}");
    }
}

#[test]
fn every_descriptor_weight() {
    let cfg = tiny_config();
    let model = jitter_offsets(&Model::new(cfg.model.clone(), 5).unwrap(), 6);
    let batch = pairs(7, 2);
    let (_, grads) = descriptor_batch_grads(&model, &batch, &cfg).unwrap().unwrap();
    let loss = |m: &Model| descriptor_batch_grads(m, &batch, &cfg).unwrap().unwrap().0;
    let e = check_all(&model, Group::Descriptor, &grads, &loss);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn combined_gradient_is_the_weighted_sum() {
    let base = tiny_config();
    let model = Model::new(base.model.clone(), 8).unwrap();
    let pair = &pairs(9, 1)[0];
    let grads = |objective, beta| {
        let mut cfg = base.loss.clone();
        cfg.detector = objective;
        cfg.beta = beta;
        detector_pair_grads(&model, pair, &cfg).unwrap()
    };
    let (lm, gm) = grads(DetectorObjective::Msip, 0.4);
    let (lt, gt) = grads(DetectorObjective::MsTrip, 0.4);
    let (lc, gc) = grads(DetectorObjective::Combined, 0.4);
    assert!((lc - (lm + 0.4 * lt)).abs() < 1e-9 * lc.abs().max(1.0));
    for (name, g) in &gc {
        for (i, v) in g.iter().enumerate() {
            let want = gm[name][i] + 0.4 * gt[name][i];
            assert!((v - want).abs() < 1e-9 * want.abs().max(1.0), "{name}[{i}]");
        }
    }
    let (l0, _) = grads(DetectorObjective::Combined, 0.0);
    assert_eq!(l0, lm);
}
