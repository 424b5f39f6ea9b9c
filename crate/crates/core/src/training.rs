//! Synthetic pair generation and the alternating optimisation loop.
//!
//! Even steps update the detector, odd steps the descriptor. Every step draws
//! its batch from an RNG seeded by `(seed, step)`, so a run resumed from a
//! checkpoint follows the same trajectory as an uninterrupted one.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::{DiffArray, Tape, Var};
use crate::config::{Config, DetectorObjective, LossConfig, TrainConfig};
use crate::descriptor::{describe, sample_descriptors};
use crate::detector::{nms, score_image, score_map};
use crate::error::{Error, Result};
use crate::geometry::{sample_homography, warp_from, Homography, HomographyParams};
use crate::io::{write_csv, Checkpoint};
use crate::losses::{descriptor_hard_triplet, detector_loss, msip_loss, points, AnchorMeta};
use crate::model::{Bound, Group, Model};

/// Attempts at drawing a homography with enough coverage before a source is
/// rejected.
pub const MAX_DRAWS: usize = 20;

pub const MIN_CORPUS: usize = 10;

/// Two views of one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub image_a: DiffArray,
    pub image_b: DiffArray,
    /// Maps B pixel coordinates into A.
    pub h_ba: Homography,
    /// B pixels whose source lies inside the source image.
    pub valid: Vec<bool>,
}

impl TrainPair {
    pub fn coverage(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }
}

/// Knobs of [`make_pair`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairParams {
    pub crop: usize,
    pub homography: HomographyParams,
    pub min_valid: f64,
    pub jitter: bool,
}

impl PairParams {
    pub fn from_config(t: &TrainConfig) -> Self {
        Self {
            crop: t.crop,
            homography: HomographyParams::default(),
            min_valid: t.min_valid,
            jitter: t.jitter,
        }
    }
}

/// Crops view A from `source`, draws a homography about the crop centre and
/// renders view B from the full source through it. Out-of-source pixels of B
/// take the mean of its valid pixels. With jitter on, B also receives a
/// random brightness offset in `[-0.1, 0.1]` and contrast in `[0.8, 1.25]`.
pub fn make_pair<R: Rng + ?Sized>(rng: &mut R, source: &DiffArray, p: &PairParams) -> Result<TrainPair> {
    let (c, sh, sw) = source.dims3()?;
    if c != 1 || sh < p.crop || sw < p.crop {
        return Err(Error::InvalidArgument(format!(
            "source {sw}x{sh} smaller than the {} crop",
            p.crop
        )));
    }
    let ox = rng.gen_range(0..=sw - p.crop);
    let oy = rng.gen_range(0..=sh - p.crop);
    let image_a = DiffArray::from_fn3(1, p.crop, p.crop, |_, y, x| source.at3(0, oy + y, ox + x));
    let center = ((p.crop as f64 - 1.0) / 2.0, (p.crop as f64 - 1.0) / 2.0);
    let to_source = Homography::translation(ox as f64, oy as f64);
    for _ in 0..MAX_DRAWS {
        let h_ba = sample_homography(rng, &p.homography, center);
        // B(q) = source(T_o h_ba q): render through the inverse of that map.
        let b_to_source = to_source.compose(&h_ba);
        let (mut image_b, valid) = warp_from(&b_to_source.inverse(), source, p.crop, p.crop)?;
        let n_valid = valid.iter().filter(|&&v| v).count();
        if (n_valid as f64) < p.min_valid * valid.len() as f64 || n_valid == 0 {
            continue;
        }
        let mean = image_b.data().iter().zip(&valid).filter(|(_, &v)| v).map(|(x, _)| x).sum::<f64>() / n_valid as f64;
        for (x, &v) in image_b.data_mut().iter_mut().zip(&valid) {
            if !v {
                *x = mean;
            }
        }
        if p.jitter {
            let offset = rng.gen_range(-0.1..=0.1);
            let contrast = rng.gen_range(0.8..=1.25);
            for x in image_b.data_mut() {
                *x = (*x - 0.5) * contrast + 0.5 + offset;
            }
        }
        return Ok(TrainPair {
            image_a,
            image_b,
            h_ba,
            valid,
        });
    }
    Err(Error::Degenerate(format!(
        "no homography with {:.0}% coverage in {MAX_DRAWS} draws",
        p.min_valid * 100.0
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Detector,
    Descriptor,
}

impl Phase {
    pub fn of_step(step: usize) -> Self {
        if step % 2 == 0 {
            Phase::Detector
        } else {
            Phase::Descriptor
        }
    }

    pub fn group(self) -> Group {
        match self {
            Phase::Detector => Group::Detector,
            Phase::Descriptor => Group::Descriptor,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Detector => "detector",
            Phase::Descriptor => "descriptor",
        })
    }
}

/// One row of `losses.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub phase: Phase,
    /// Mean loss over the usable pairs of the batch; `None` when no pair was
    /// usable and the step made no update.
    pub loss: Option<f64>,
}

pub fn write_losses(path: &Path, records: &[LossRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.phase.to_string(),
                r.loss.map_or_else(|| "skipped".into(), |l| format!("{l:.17e}")),
            ]
        })
        .collect();
    write_csv(path, &["step", "phase", "loss"], &rows)
}

/// Per-step RNG.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Source indices and pairs of one batch.
pub fn draw_batch(seed: u64, step: usize, corpus: &[DiffArray], p: &PairParams, batch: usize) -> (Vec<usize>, Vec<TrainPair>) {
    let mut rng = step_rng(seed, step);
    let mut sources = Vec::with_capacity(batch);
    let mut pairs = Vec::with_capacity(batch);
    // Rejected sources are replaced by fresh draws; give up after a bound so
    // a corpus of unusable images cannot loop forever.
    let mut attempts = 0;
    while pairs.len() < batch && attempts < batch * 10 {
        attempts += 1;
        let i = rng.gen_range(0..corpus.len());
        if let Ok(pair) = make_pair(&mut rng, &corpus[i], p) {
            sources.push(i);
            pairs.push(pair);
        }
    }
    (sources, pairs)
}

type Grads = BTreeMap<String, Vec<f64>>;

fn add_grads(acc: &mut Grads, g: Grads, scale: f64) {
    for (name, v) in g {
        let slot = acc.entry(name).or_insert_with(|| vec![0.0; v.len()]);
        slot.iter_mut().zip(v).for_each(|(a, b)| *a += scale * b);
    }
}

fn detector_objective(tape: &mut Tape, model: &Model, bound: &Bound, pair: &TrainPair, cfg: &LossConfig) -> Result<Var> {
    let a = tape.constant(pair.image_a.clone());
    let b = tape.constant(pair.image_b.clone());
    let sa = score_map(tape, bound, a)?;
    let sb = score_map(tape, bound, b)?;
    if cfg.detector == DetectorObjective::Msip || cfg.beta == 0.0 && cfg.detector == DetectorObjective::Combined {
        return msip_loss(tape, sa, sb, &pair.h_ba, &cfg.windows, cfg.temperature);
    }
    let da = describe(tape, model, bound, a)?;
    let db = describe(tape, model, bound, b)?;
    detector_loss(tape, sa, sb, da, db, &pair.h_ba, cfg)
}

/// Detector-phase loss and parameter gradients for one pair.
pub fn detector_pair_grads(model: &Model, pair: &TrainPair, cfg: &LossConfig) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[Group::Detector]);
    let loss = detector_objective(&mut tape, model, &bound, pair, cfg)?;
    let value = tape.data(loss)[0];
    if !value.is_finite() {
        return Ok((value, Grads::new()));
    }
    tape.backward(loss)?;
    Ok((value, bound.grads(&tape)))
}

/// Anchor locations in A (top-`k` detections whose correspondence lands in
/// B) and their true matches in B.
pub fn anchor_points(model: &Model, pair: &TrainPair, k: usize, nms_window: usize) -> Result<Vec<((f64, f64), (f64, f64))>> {
    let scores = score_image(model, &pair.image_a)?;
    let (_, h, w) = pair.image_a.dims3()?;
    let h_ab = pair.h_ba.inverse();
    let mut out = Vec::new();
    for kp in nms(&scores, nms_window, usize::MAX)? {
        if out.len() == k {
            break;
        }
        if let Some((bx, by)) = h_ab.apply((kp.x, kp.y)) {
            if bx >= 0.0 && by >= 0.0 && bx <= (w - 1) as f64 && by <= (h - 1) as f64 {
                out.push(((kp.x, kp.y), (bx, by)));
            }
        }
    }
    Ok(out)
}

struct DescriptorForward {
    tape: Tape,
    bound: Bound,
    anchors: Var,
    positives: Var,
}

fn descriptor_forward(model: &Model, pair: &TrainPair, pts: &[((f64, f64), (f64, f64))]) -> Result<DescriptorForward> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[Group::Descriptor]);
    let a = tape.constant(pair.image_a.clone());
    let b = tape.constant(pair.image_b.clone());
    let da = describe(&mut tape, model, &bound, a)?;
    let db = describe(&mut tape, model, &bound, b)?;
    let pa = tape.constant(points(&pts.iter().map(|p| p.0).collect::<Vec<_>>()));
    let pb = tape.constant(points(&pts.iter().map(|p| p.1).collect::<Vec<_>>()));
    let anchors = sample_descriptors(&mut tape, da, pa)?;
    let positives = sample_descriptors(&mut tape, db, pb)?;
    Ok(DescriptorForward {
        tape,
        bound,
        anchors,
        positives,
    })
}

/// Descriptor-phase loss and gradients over a whole batch (negatives are
/// mined across pairs).
pub fn descriptor_batch_grads(model: &Model, pairs: &[TrainPair], cfg: &Config) -> Result<Option<(f64, Grads)>> {
    let mut forwards = Vec::new();
    let mut meta = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let pts = anchor_points(model, pair, cfg.train.k, cfg.eval.nms_window)?;
        if pts.is_empty() {
            continue;
        }
        meta.extend(pts.iter().map(|&(a, b)| AnchorMeta { pair: i, a, b }));
        forwards.push(descriptor_forward(model, pair, &pts)?);
    }
    if meta.len() < 2 {
        return Ok(None);
    }
    let dim = model.config.dim;
    let stack = |f: &dyn Fn(&DescriptorForward) -> Var| -> DiffArray {
        let data: Vec<f64> = forwards.iter().flat_map(|fw| fw.tape.data(f(fw)).to_vec()).collect();
        DiffArray::new([data.len() / dim, dim], data).expect("rows of dim")
    };
    let mut head = Tape::new();
    let anchors = head.leaf(stack(&|fw| fw.anchors), true);
    let positives = head.leaf(stack(&|fw| fw.positives), true);
    let loss = match descriptor_hard_triplet(&mut head, anchors, positives, &meta, cfg.loss.mu, cfg.loss.exclusion_px) {
        Ok(l) => l,
        Err(Error::Degenerate(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let value = head.data(loss)[0];
    if !value.is_finite() {
        return Ok(Some((value, Grads::new())));
    }
    head.backward(loss)?;
    let ga = head.grad(anchors).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; meta.len() * dim]);
    let gp = head.grad(positives).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; meta.len() * dim]);
    let mut grads = Grads::new();
    let mut row = 0;
    for mut fw in forwards {
        let n = fw.tape.shape(fw.anchors)[0];
        let span = row * dim..(row + n) * dim;
        fw.tape.backward_seeded(vec![
            (fw.anchors, ga[span.clone()].to_vec()),
            (fw.positives, gp[span].to_vec()),
        ])?;
        add_grads(&mut grads, fw.bound.grads(&fw.tape), 1.0);
        row += n;
    }
    Ok(Some((value, grads)))
}

/// Learning rate in effect at `step`.
pub fn learning_rate(t: &TrainConfig, step: usize) -> f64 {
    let halvings = if t.lr_halve_every == 0 { 0 } else { step / t.lr_halve_every };
    t.lr * 0.5f64.powi(halvings.min(1000) as i32)
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
}

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.hddw")
    }

    pub fn step_checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}.hddw"))
    }

    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }
}

fn persist_failure(out: Option<&TrainOutputs>, step: usize, seed: u64, sources: &[usize]) -> Option<PathBuf> {
    let out = out?;
    let path = out.dir.join(format!("nonfinite_step_{step:06}.txt"));
    let body = format!(
        "step = {step}\nseed = {seed}\nphase = {}\nsources = {}\n",
        Phase::of_step(step),
        sources.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    );
    fs::write(&path, body).ok().map(|_| path)
}

/// Runs `cfg.train.steps` alternating steps starting from `start`.
///
/// With `out` set, writes `losses.csv`, periodic checkpoints and
/// `final.hddw` into it.
pub fn train(cfg: &Config, corpus: &[DiffArray], start: Checkpoint, out: Option<&TrainOutputs>) -> Result<TrainRun> {
    cfg.validate()?;
    if corpus.len() < MIN_CORPUS {
        return Err(Error::InvalidArgument(format!(
            "training needs at least {MIN_CORPUS} images, got {}",
            corpus.len()
        )));
    }
    let t = &cfg.train;
    let pp = PairParams::from_config(t);
    let mut ck = start;
    let mut losses = Vec::new();
    if let Some(o) = out {
        fs::create_dir_all(&o.dir)?;
    }
    while ck.step < t.steps {
        let step = ck.step;
        let phase = Phase::of_step(step);
        let (sources, pairs) = draw_batch(t.seed, step, corpus, &pp, t.batch);
        let result = match phase {
            Phase::Detector => {
                let mut grads = Grads::new();
                let mut total = 0.0;
                let mut used = 0usize;
                for pair in &pairs {
                    match detector_pair_grads(&ck.model, pair, &cfg.loss) {
                        Ok((v, g)) => {
                            total += v;
                            used += 1;
                            add_grads(&mut grads, g, 1.0);
                        }
                        Err(Error::Degenerate(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                if used == 0 {
                    None
                } else {
                    let scale = 1.0 / used as f64;
                    grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
                    Some((total * scale, grads))
                }
            }
            Phase::Descriptor => descriptor_batch_grads(&ck.model, &pairs, cfg)?,
        };
        let loss = result.as_ref().map(|r| r.0);
        if loss.is_some_and(|l| !l.is_finite()) {
            let record = persist_failure(out, step, t.seed, &sources);
            return Err(Error::NonFinite { step, record });
        }
        if let Some((_, mut grads)) = result {
            clip_grads(&mut grads, t.clip);
            apply_sgd(&mut ck, &grads, phase.group(), learning_rate(t, step), t.momentum);
        }
        losses.push(LossRecord { step, phase, loss });
        ck.step += 1;
        if let Some(o) = out {
            if t.checkpoint_every > 0 && ck.step % t.checkpoint_every == 0 {
                ck.save(&o.step_checkpoint(ck.step))?;
            }
        }
    }
    if let Some(o) = out {
        ck.save(&o.final_checkpoint())?;
        write_losses(&o.losses(), &losses)?;
    }
    Ok(TrainRun { checkpoint: ck, losses })
}

/// Rescales `grads` so that their joint L2 norm is at most `max_norm`
/// (`0` leaves them alone). Returns the norm before clipping.
pub fn clip_grads(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Momentum SGD on the trainable parameters of `group`:
/// `v = m v + g`, `w -= lr v`.
pub fn apply_sgd(ck: &mut Checkpoint, grads: &Grads, group: Group, lr: f64, momentum: f64) {
    for (name, g) in grads {
        if Group::of(name) != Some(group) {
            continue;
        }
        let Some(p) = ck.model.params.get_mut(name) else { continue };
        if !p.trainable {
            continue;
        }
        let v = ck.momentum.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for ((w, vi), gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *w -= lr * *vi;
        }
    }
}

/// Mean detector-phase loss over `pairs` (no update).
pub fn validation_loss(model: &Model, pairs: &[TrainPair], cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for pair in pairs {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &[]);
        match detector_objective(&mut tape, model, &bound, pair, cfg) {
            Ok(l) => {
                total += tape.data(l)[0];
                used += 1;
            }
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("no usable validation pair".into()));
    }
    Ok(total / used as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_image;

    fn params() -> PairParams {
        PairParams {
            crop: 48,
            homography: HomographyParams::default(),
            min_valid: 0.7,
            jitter: true,
        }
    }

    #[test]
    fn pairs_are_deterministic() {
        let src = synth_image(1, 96);
        let a = make_pair(&mut step_rng(5, 3), &src, &params()).unwrap();
        let b = make_pair(&mut step_rng(5, 3), &src, &params()).unwrap();
        assert_eq!(a, b);
        assert!(a.coverage() >= 0.7);
        let c = make_pair(&mut step_rng(5, 4), &src, &params()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_pair_without_jitter_matches() {
        let src = synth_image(2, 96);
        let p = PairParams {
            homography: HomographyParams {
                rot_deg: 0.0,
                scale_min: 1.0,
                scale_max: 1.0,
                skew: 0.0,
            },
            jitter: false,
            ..params()
        };
        let pair = make_pair(&mut step_rng(1, 0), &src, &p).unwrap();
        assert_eq!(pair.coverage(), 1.0);
        assert!(pair.image_a.max_abs_diff(&pair.image_b) < 1e-12);
    }

    #[test]
    fn pair_geometry_is_consistent() {
        let src = synth_image(3, 96);
        let p = PairParams { jitter: false, ..params() };
        let pair = make_pair(&mut step_rng(2, 7), &src, &p).unwrap();
        // B(q) should equal A(h_ba q) wherever that lands inside A.
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for y in 0..48 {
            for x in 0..48 {
                let (ax, ay) = pair.h_ba.apply((x as f64, y as f64)).unwrap();
                if ax >= 1.0 && ay >= 1.0 && ax <= 46.0 && ay <= 46.0 {
                    let v = crate::geometry::sample_bilinear(pair.image_a.data(), 48, 48, ax, ay).unwrap();
                    worst = worst.max((v - pair.image_b.at3(0, y, x)).abs());
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn learning_rate_halves() {
        let t = TrainConfig::default();
        assert_eq!(learning_rate(&t, 0), 0.01);
        assert_eq!(learning_rate(&t, 999), 0.01);
        assert_eq!(learning_rate(&t, 1000), 0.005);
        assert_eq!(learning_rate(&t, 2500), 0.0025);
    }

    #[test]
    fn phases_alternate() {
        assert_eq!(Phase::of_step(0), Phase::Detector);
        assert_eq!(Phase::of_step(1), Phase::Descriptor);
        assert_eq!(Phase::of_step(10), Phase::Detector);
    }
}
