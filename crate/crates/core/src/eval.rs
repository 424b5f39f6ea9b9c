//! Feature extraction, mutual nearest-neighbour matching, MMA and
//! repeatability, and the ablation harness.

use std::fs;
use std::path::{Path, PathBuf};

use crate::array::{DiffArray, Tape};
use crate::config::Config;
use crate::descriptor::{describe, sample_descriptors};
use crate::detector::{nms, score_map};
use crate::error::{Error, Result};
use crate::geometry::{HomographyParams, Homography};
use crate::io::{load_image, Checkpoint, Feature, FeatureSet};
use crate::losses::points;
use crate::model::Model;
use crate::synth::synth_corpus;
use crate::training::{make_pair, step_rng, train, PairParams};

/// Side multiple required by the three-level pyramids.
pub const SIDE_MULTIPLE: usize = 4;
pub const MMA_THRESHOLD: f64 = 5.0;
pub const REPEATABILITY_THRESHOLD: f64 = 3.0;
/// Side of the synthetic source images pairs are cut from.
pub const SOURCE_SIZE: usize = 192;

/// Extends `image` to the next multiple of `m` on the bottom and right by
/// repeating the last row and column.
pub fn pad_to_multiple(image: &DiffArray, m: usize) -> Result<DiffArray> {
    let (c, h, w) = image.dims3()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    Ok(DiffArray::from_fn3(c, ph, pw, |ch, y, x| image.at3(ch, y.min(h - 1), x.min(w - 1))))
}

/// Score map, NMS and descriptor sampling for one image.
pub fn extract(model: &Model, image: &DiffArray, top: usize, nms_window: usize) -> Result<FeatureSet> {
    let (c, h, w) = image.dims3()?;
    if c != 1 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("extract expects a [1, H, W] image, got {:?}", image.shape())));
    }
    let padded = pad_to_multiple(image, SIDE_MULTIPLE)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[]);
    let img = tape.constant(padded);
    let scores = score_map(&mut tape, &bound, img)?;
    let (_, _, pw) = tape.value(scores).dims3()?;
    let cropped = DiffArray::from_fn3(1, h, w, |_, y, x| tape.data(scores)[y * pw + x]);
    let kps = nms(&cropped, nms_window, top)?;
    let dim = model.config.dim;
    let mut features = Vec::with_capacity(kps.len());
    if !kps.is_empty() {
        let map = describe(&mut tape, model, &bound, img)?;
        let pts = tape.constant(points(&kps.iter().map(|k| (k.x, k.y)).collect::<Vec<_>>()));
        let desc = sample_descriptors(&mut tape, map, pts)?;
        let rows = tape.data(desc);
        for (i, k) in kps.iter().enumerate() {
            features.push(Feature {
                x: k.x as f32,
                y: k.y as f32,
                score: k.score as f32,
                desc: rows[i * dim..(i + 1) * dim].iter().map(|&v| v as f32).collect(),
            });
        }
    }
    Ok(FeatureSet {
        dim,
        features,
        requested: Some(top),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

fn nearest(query: &[f32], set: &[Feature]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, f) in set.iter().enumerate() {
        let d = distance(query, &f.desc);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|b| b.0)
}

/// Mutual nearest neighbours in Euclidean descriptor space, ordered by the
/// index in `a`. Ties go to the lower index.
pub fn match_features(fa: &FeatureSet, fb: &FeatureSet) -> Result<Vec<Match>> {
    if fa.is_empty() || fb.is_empty() {
        return Ok(Vec::new());
    }
    if fa.dim != fb.dim {
        return Err(Error::Incompatible(format!("descriptor dims {} and {} differ", fa.dim, fb.dim)));
    }
    let b_to_a: Vec<Option<usize>> = fb.features.iter().map(|f| nearest(&f.desc, &fa.features)).collect();
    let mut out = Vec::new();
    for (i, f) in fa.features.iter().enumerate() {
        if let Some(j) = nearest(&f.desc, &fb.features) {
            if b_to_a[j] == Some(i) {
                out.push(Match {
                    a: i,
                    b: j,
                    distance: distance(&f.desc, &fb.features[j].desc),
                });
            }
        }
    }
    Ok(out)
}

/// Reprojection error of a match under `h_ab`; infinite when the point maps
/// to infinity.
pub fn transfer_error(fa: &FeatureSet, fb: &FeatureSet, m: &Match, h_ab: &Homography) -> f64 {
    let (pa, pb) = (&fa.features[m.a], &fb.features[m.b]);
    match h_ab.apply((pa.x as f64, pa.y as f64)) {
        Some((x, y)) => ((x - pb.x as f64).powi(2) + (y - pb.y as f64).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

/// Matches within `threshold` pixels of ground truth, over the number of
/// features in A.
pub fn mma(fa: &FeatureSet, fb: &FeatureSet, matches: &[Match], h_ab: &Homography, threshold: f64) -> f64 {
    if fa.is_empty() {
        return 0.0;
    }
    let correct = matches.iter().filter(|m| transfer_error(fa, fb, m, h_ab) <= threshold).count();
    correct as f64 / fa.len() as f64
}

/// Fraction of A keypoints whose projection under `h_ab` is within
/// `threshold` of a B keypoint, with a one-to-one assignment built greedily
/// from the closest pairs (ties by lower A, then B index).
pub fn repeatability(kp_a: &[(f64, f64)], kp_b: &[(f64, f64)], h_ab: &Homography, threshold: f64) -> f64 {
    if kp_a.is_empty() {
        return 0.0;
    }
    let mut cand = Vec::new();
    for (i, &p) in kp_a.iter().enumerate() {
        let Some((x, y)) = h_ab.apply(p) else { continue };
        for (j, &(bx, by)) in kp_b.iter().enumerate() {
            let d = ((x - bx).powi(2) + (y - by).powi(2)).sqrt();
            if d <= threshold {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_a, mut used_b) = (vec![false; kp_a.len()], vec![false; kp_b.len()]);
    let mut hits = 0;
    for (_, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            hits += 1;
        }
    }
    hits as f64 / kp_a.len() as f64
}

pub fn keypoints_of(set: &FeatureSet) -> Vec<(f64, f64)> {
    set.features.iter().map(|f| (f.x as f64, f.y as f64)).collect()
}

/// Two views and the homography taking A coordinates to B.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub name: String,
    pub image_a: DiffArray,
    pub image_b: DiffArray,
    pub h_ab: Homography,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairResult {
    pub name: String,
    pub features_a: usize,
    pub features_b: usize,
    pub matches: usize,
    pub correct: usize,
    pub mma: f64,
    pub repeatability: f64,
}

pub fn evaluate_pair(model: &Model, pair: &EvalPair, top: usize, nms_window: usize) -> Result<PairResult> {
    let fa = extract(model, &pair.image_a, top, nms_window)?;
    let fb = extract(model, &pair.image_b, top, nms_window)?;
    let matches = match_features(&fa, &fb)?;
    let correct = matches
        .iter()
        .filter(|m| transfer_error(&fa, &fb, m, &pair.h_ab) <= MMA_THRESHOLD)
        .count();
    Ok(PairResult {
        name: pair.name.clone(),
        features_a: fa.len(),
        features_b: fb.len(),
        matches: matches.len(),
        correct,
        mma: mma(&fa, &fb, &matches, &pair.h_ab, MMA_THRESHOLD),
        repeatability: repeatability(&keypoints_of(&fa), &keypoints_of(&fb), &pair.h_ab, REPEATABILITY_THRESHOLD),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub pairs: Vec<PairResult>,
    pub mma: f64,
    pub repeatability: f64,
}

impl EvalSummary {
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let row = |r: &PairResult| {
            vec![
                r.name.clone(),
                r.features_a.to_string(),
                r.features_b.to_string(),
                r.matches.to_string(),
                r.correct.to_string(),
                format!("{:.6}", r.mma),
                format!("{:.6}", r.repeatability),
            ]
        };
        let mut rows: Vec<_> = self.pairs.iter().map(row).collect();
        rows.push(vec![
            "mean".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            format!("{:.6}", self.mma),
            format!("{:.6}", self.repeatability),
        ]);
        rows
    }
}

pub const EVAL_HEADER: [&str; 7] = ["pair", "features_a", "features_b", "matches", "correct", "mma", "repeatability"];

/// Evaluates every pair in order and averages the per-pair metrics.
pub fn evaluate(model: &Model, pairs: &[EvalPair], top: usize, nms_window: usize) -> Result<EvalSummary> {
    let results = pairs
        .iter()
        .map(|p| evaluate_pair(model, p, top, nms_window))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len().max(1) as f64;
    Ok(EvalSummary {
        mma: results.iter().map(|r| r.mma).sum::<f64>() / n,
        repeatability: results.iter().map(|r| r.repeatability).sum::<f64>() / n,
        pairs: results,
    })
}

/// Held-out synthetic viewpoint pairs: fresh sources from `seed`, random
/// homographies, no photometric jitter.
pub fn synthetic_eval_pairs(seed: u64, count: usize, crop: usize) -> Result<Vec<EvalPair>> {
    let sources = synth_corpus(seed, count, SOURCE_SIZE);
    let params = PairParams {
        crop,
        homography: HomographyParams::default(),
        min_valid: 0.7,
        jitter: false,
    };
    let mut out = Vec::with_capacity(count);
    for (i, src) in sources.iter().enumerate() {
        let mut rng = step_rng(seed, i);
        let p = make_pair(&mut rng, src, &params)?;
        out.push(EvalPair {
            name: format!("synth_{i:03}"),
            image_a: p.image_a,
            image_b: p.image_b,
            h_ab: p.h_ba.inverse(),
        });
    }
    Ok(out)
}

/// Reads a pair list: one `image_a image_b homography` triple per line,
/// paths relative to the list file. Blank lines and `#` comments are skipped.
/// The homography file holds 9 numbers mapping A to B.
pub fn load_pair_list(path: &Path) -> Result<Vec<EvalPair>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |s: &str| -> PathBuf {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [a, b, h] = parts[..] else {
            return Err(Error::Config(format!(
                "{}:{}: expected `image_a image_b homography`",
                path.display(),
                lineno + 1
            )));
        };
        out.push(EvalPair {
            name: a.to_string(),
            image_a: load_image(&resolve(a))?,
            image_b: load_image(&resolve(b))?,
            h_ab: Homography::parse(&fs::read_to_string(resolve(h))?)?,
        });
    }
    Ok(out)
}

/// A named configuration in an ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: Config,
}

/// Parses an ablation matrix: `key = value` lines before the first
/// `[name]` header apply to every variant; each section then lists its own
/// overrides.
pub fn parse_matrix(text: &str) -> Result<Vec<Variant>> {
    let mut base: Vec<(String, String)> = Vec::new();
    let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if name.is_empty() || sections.iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("line {}: bad or duplicate variant name", lineno + 1)));
            }
            sections.push((name.to_string(), Vec::new()));
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
        };
        let kv = (k.trim().to_string(), v.trim().to_string());
        match sections.last_mut() {
            Some((_, s)) => s.push(kv),
            None => base.push(kv),
        }
    }
    if sections.is_empty() {
        return Err(Error::Config("ablation matrix has no [variant] sections".into()));
    }
    sections
        .into_iter()
        .map(|(name, overrides)| {
            let mut config = Config::default();
            for (k, v) in base.iter().chain(&overrides) {
                config.set(k, v)?;
            }
            config.validate()?;
            Ok(Variant { name, config })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub hash: String,
    pub result: std::result::Result<(f64, f64), String>,
}

pub const ABLATION_HEADER: [&str; 5] = ["variant", "config_hash", "mma", "repeatability", "status"];

impl AblationRow {
    pub fn cells(&self) -> Vec<String> {
        let (mma, rep, status) = match &self.result {
            Ok((m, r)) => (format!("{m:.6}"), format!("{r:.6}"), "ok".to_string()),
            Err(e) => (String::new(), String::new(), format!("error: {}", e.replace([',', '\n'], ";"))),
        };
        vec![self.name.clone(), self.hash.clone(), mma, rep, status]
    }
}

/// Trains one variant from its seeded initialisation and evaluates it.
pub fn run_variant(config: &Config, corpus: &[DiffArray], pairs: &[EvalPair]) -> Result<(Model, EvalSummary)> {
    let model = Model::new(config.model.clone(), config.train.seed)?;
    let run = train(config, corpus, Checkpoint::fresh(model), None)?;
    let summary = evaluate(&run.checkpoint.model, pairs, config.eval.top, config.eval.nms_window)?;
    Ok((run.checkpoint.model, summary))
}

/// One row per variant; a failing variant becomes an error row.
pub fn ablation_run(variants: &[Variant], corpus: &[DiffArray]) -> Vec<AblationRow> {
    variants
        .iter()
        .map(|v| {
            let e = &v.config.eval;
            let result = synthetic_eval_pairs(e.seed, e.pairs, v.config.train.crop)
                .and_then(|pairs| run_variant(&v.config, corpus, &pairs))
                .map(|(_, s)| (s.mma, s.repeatability))
                .map_err(|e| e.to_string());
            AblationRow {
                name: v.name.clone(),
                hash: v.config.hash(),
                result,
            }
        })
        .collect()
}
