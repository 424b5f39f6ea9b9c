//! Training objectives.
//!
//! Detector side: the multi-scale soft-argmax repeatability term, the
//! score-weighted window triplet over soft descriptors, their multi-scale sum
//! and the weighted combination. Descriptor side: a hard-negative triplet on
//! point descriptors sampled at detections.
//!
//! Score and descriptor maps are `[1, H, W]` and `[D, H, W]` tape values.
//! Pair homographies `h_ba` map image-B pixel coordinates into image A.

use crate::array::{DiffArray, Rect, Tape, Var};
use crate::config::{DetectorObjective, LossConfig};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, corresponding_window, window_grid, Homography};

const L2_EPS: f64 = 1e-12;

/// Picks `x[idx[k]]` for every `k` of a flat array.
pub fn gather(tape: &mut Tape, x: Var, idx: &[usize]) -> Result<Var> {
    let entries = idx.iter().enumerate().map(|(o, &i)| (o, i, 1.0)).collect();
    tape.linear_map(x, entries, &[idx.len()])
}

/// Writes `x[k]` to position `pos[k]` of a zero vector of length `len`.
fn scatter(tape: &mut Tape, x: Var, pos: &[usize], len: usize) -> Result<Var> {
    let entries = pos.iter().enumerate().map(|(i, &o)| (o, i, 1.0)).collect();
    tape.linear_map(x, entries, &[len])
}

/// Soft scores `[N]` and unit soft descriptors `[N, D]` of `rects`.
pub fn soft_aggregate(tape: &mut Tape, scores: Var, desc: Var, rects: &[Rect]) -> Result<(Var, Var)> {
    let d = tape.shape(desc)[0];
    let agg = tape.soft_aggregate_windows(scores, desc, rects)?;
    let r = tape.slice_cols(agg, 0, 1)?;
    let r = tape.reshape(r, [rects.len()])?;
    let raw = tape.slice_cols(agg, 1, 1 + d)?;
    let dbar = tape.l2_normalize_rows(raw, L2_EPS)?;
    Ok((r, dbar))
}

/// `score_b` resampled into A's frame, `out(p) = score_b(h_ab p)` with
/// bilinear weights, and a mask of the A pixels whose source lies inside B.
pub fn warp_scores(tape: &mut Tape, score_b: Var, h_ba: &Homography) -> Result<(Var, Vec<bool>)> {
    let (_, h, w) = tape.value(score_b).dims3()?;
    let h_ab = h_ba.inverse();
    let mut entries = Vec::with_capacity(4 * h * w);
    let mut valid = vec![false; h * w];
    for (o, ok) in valid.iter_mut().enumerate() {
        let Some((x, y)) = h_ab.apply(((o % w) as f64, (o / w) as f64)) else { continue };
        if let Some(taps) = bilinear_taps(h, w, x, y) {
            *ok = true;
            entries.extend(taps.into_iter().filter(|&(_, wt)| wt != 0.0).map(|(i, wt)| (o, i, wt)));
        }
    }
    Ok((tape.linear_map(score_b, entries, &[1, h, w])?, valid))
}

/// Sum over scales and A grid windows of the squared distance between the
/// soft-argmax of `score_a` and that of `score_b` over the corresponding
/// region, taken on `score_b` resampled into A's frame so that both windows
/// cover the same scene content whatever the scale or shear of `h_ba`.
/// Windows that reach outside B are dropped.
pub fn msip_loss(
    tape: &mut Tape,
    score_a: Var,
    score_b: Var,
    h_ba: &Homography,
    windows: &[usize],
    temperature: f64,
) -> Result<Var> {
    let (_, h, w) = tape.value(score_a).dims3()?;
    if tape.shape(score_b) != tape.shape(score_a) {
        return Err(Error::Shape("msip needs score maps of equal size".into()));
    }
    let (warped, valid) = warp_scores(tape, score_b, h_ba)?;
    let mut terms = Vec::new();
    for &s in windows {
        let rects: Vec<Rect> = window_grid(h, w, s)?
            .rects()
            .into_iter()
            .filter(|r| (r.y0..r.y0 + s).all(|y| valid[y * w + r.x0..y * w + r.x0 + s].iter().all(|&v| v)))
            .collect();
        if rects.is_empty() {
            continue;
        }
        let ua = tape.soft_argmax_windows(score_a, &rects, temperature)?;
        let ub = tape.soft_argmax_windows(warped, &rects, temperature)?;
        let diff = tape.sub(ua, ub)?;
        let sq = tape.square(diff);
        terms.push(tape.sum(sq));
    }
    if terms.is_empty() {
        return Err(Error::Degenerate("no corresponding windows at any scale".into()));
    }
    tape.add_all(&terms)
}

/// Index of the admissible candidate nearest to `anchor` (ties: lowest
/// index), or `None` if nothing is admissible. `candidates` is row-major
/// with rows of `anchor.len()`.
pub fn hardest_negative(anchor: &[f64], candidates: &[f64], admissible: impl Fn(usize) -> bool) -> Option<usize> {
    let d = anchor.len();
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in candidates.chunks(d).enumerate() {
        if !admissible(i) {
            continue;
        }
        let dist: f64 = row.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.map_or(true, |(_, b)| dist < b) {
            best = Some((i, dist));
        }
    }
    best.map(|(i, _)| i)
}

/// Chebyshev distance between grid cells.
fn cell_dist(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Where each window triplet took its negative from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    A(usize),
    B(usize),
}

/// One window triplet: anchor window in A's grid, its positive in B, the
/// mined negative.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTriplet {
    pub anchor: usize,
    pub positive: Rect,
    pub negative: NegativeSource,
}

/// Per-scale detector triplet with its bookkeeping.
#[derive(Debug)]
pub struct TripletTerm {
    pub loss: Var,
    pub triplets: Vec<WindowTriplet>,
    /// Anchors with a correspondence but no admissible negative.
    pub dropped: usize,
}

/// Score-weighted window triplet at window size `s`.
///
/// Anchors are the soft samples of A's grid windows; positives are the soft
/// samples of the corresponding windows in B. Negatives are mined among A's
/// grid windows outside the anchor's `exclusion_cells` neighbourhood and B's
/// grid windows outside the neighbourhood of the positive's cell. Descriptor
/// maps are read as constants; gradients reach the scores through the soft
/// scores and through the softmax weights of the soft descriptors.
#[allow(clippy::too_many_arguments)]
pub fn detector_triplet(
    tape: &mut Tape,
    score_a: Var,
    score_b: Var,
    desc_a: Var,
    desc_b: Var,
    h_ba: &Homography,
    s: usize,
    mu: f64,
    exclusion_cells: usize,
) -> Result<Option<TripletTerm>> {
    let (_, h, w) = tape.value(score_a).dims3()?;
    let desc_a = detach(tape, desc_a);
    let desc_b = detach(tape, desc_b);
    let grid = window_grid(h, w, s)?;
    let h_ab = h_ba.inverse();
    let rects = grid.rects();
    let (r_a, d_a) = soft_aggregate(tape, score_a, desc_a, &rects)?;
    let (_, d_b) = soft_aggregate(tape, score_b, desc_b, &rects)?;
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    for (i, win) in grid.windows.iter().enumerate() {
        if let Some(b) = corresponding_window(&h_ab, &win.rect, (h, w)) {
            anchors.push(i);
            positives.push(b);
        }
    }
    if anchors.is_empty() {
        return Ok(None);
    }
    let (_, d_p) = soft_aggregate(tape, score_b, desc_b, &positives)?;
    let dim = tape.shape(d_a)[1];
    let (va, vb) = (tape.data(d_a).to_vec(), tape.data(d_b).to_vec());
    let cells: Vec<(i64, i64)> = grid.windows.iter().map(|w| (w.row as i64, w.col as i64)).collect();
    let ex = exclusion_cells as i64;
    let mut triplets = Vec::new();
    let mut dropped = 0;
    for (&ai, pos) in anchors.iter().zip(&positives) {
        let anchor = &va[ai * dim..(ai + 1) * dim];
        let pos_cell = grid.cell_of(pos.center());
        let na = hardest_negative(anchor, &va, |j| cell_dist(cells[j], cells[ai]) > ex);
        let nb = hardest_negative(anchor, &vb, |j| cell_dist(cells[j], pos_cell) > ex);
        let dist = |row: &[f64]| row.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let negative = match (na, nb) {
            (Some(i), Some(j)) if dist(&vb[j * dim..(j + 1) * dim]) < dist(&va[i * dim..(i + 1) * dim]) => {
                NegativeSource::B(j)
            }
            (Some(i), _) => NegativeSource::A(i),
            (None, Some(j)) => NegativeSource::B(j),
            (None, None) => {
                dropped += 1;
                continue;
            }
        };
        triplets.push(WindowTriplet {
            anchor: ai,
            positive: *pos,
            negative,
        });
    }
    if triplets.is_empty() {
        return Ok(None);
    }
    let n = triplets.len();
    let pos_index: Vec<usize> = {
        let mut by_anchor = std::collections::HashMap::new();
        for (k, &ai) in anchors.iter().enumerate() {
            by_anchor.insert(ai, k);
        }
        triplets.iter().map(|t| by_anchor[&t.anchor]).collect()
    };
    let anchor_rows: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let dpos_pairs: Vec<(usize, usize)> = anchor_rows.iter().copied().zip(pos_index).collect();
    let d_pos = tape.row_distances(d_a, d_p, &dpos_pairs)?;
    let (mut from_a, mut pos_a, mut from_b, mut pos_b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, t) in triplets.iter().enumerate() {
        match t.negative {
            NegativeSource::A(j) => {
                from_a.push((t.anchor, j));
                pos_a.push(k);
            }
            NegativeSource::B(j) => {
                from_b.push((t.anchor, j));
                pos_b.push(k);
            }
        }
    }
    let mut parts = Vec::new();
    if !from_a.is_empty() {
        let v = tape.row_distances(d_a, d_a, &from_a)?;
        parts.push(scatter(tape, v, &pos_a, n)?);
    }
    if !from_b.is_empty() {
        let v = tape.row_distances(d_a, d_b, &from_b)?;
        parts.push(scatter(tape, v, &pos_b, n)?);
    }
    let d_neg = tape.add_all(&parts)?;
    let margin = tape.sub(d_pos, d_neg)?;
    let margin = tape.add_scalar(margin, mu);
    let hinge = tape.relu(margin);
    let r = gather(tape, r_a, &anchor_rows)?;
    let weighted = tape.mul(r, hinge)?;
    let loss = tape.sum(weighted);
    Ok(Some(TripletTerm { loss, triplets, dropped }))
}

/// `sum_j lambda_j * detector_triplet(s_j)`; scales without any triplet
/// contribute nothing.
#[allow(clippy::too_many_arguments)]
pub fn ms_trip(
    tape: &mut Tape,
    score_a: Var,
    score_b: Var,
    desc_a: Var,
    desc_b: Var,
    h_ba: &Homography,
    cfg: &LossConfig,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (&s, &lambda) in cfg.windows.iter().zip(&cfg.lambdas) {
        if let Some(t) = detector_triplet(tape, score_a, score_b, desc_a, desc_b, h_ba, s, cfg.mu, cfg.exclusion_cells)? {
            terms.push(tape.scale(t.loss, lambda));
        }
    }
    if terms.is_empty() {
        return Err(Error::Degenerate("no window triplets at any scale".into()));
    }
    tape.add_all(&terms)
}

/// Detector-phase objective selected by `cfg.detector`.
#[allow(clippy::too_many_arguments)]
pub fn detector_loss(
    tape: &mut Tape,
    score_a: Var,
    score_b: Var,
    desc_a: Var,
    desc_b: Var,
    h_ba: &Homography,
    cfg: &LossConfig,
) -> Result<Var> {
    match cfg.detector {
        DetectorObjective::Msip => msip_loss(tape, score_a, score_b, h_ba, &cfg.windows, cfg.temperature),
        DetectorObjective::MsTrip => ms_trip(tape, score_a, score_b, desc_a, desc_b, h_ba, cfg),
        DetectorObjective::Combined => {
            let m = msip_loss(tape, score_a, score_b, h_ba, &cfg.windows, cfg.temperature)?;
            if cfg.beta == 0.0 {
                return Ok(m);
            }
            let t = ms_trip(tape, score_a, score_b, desc_a, desc_b, h_ba, cfg)?;
            let t = tape.scale(t, cfg.beta);
            tape.add(m, t)
        }
    }
}

/// A value-only copy of `v`: downstream gradients stop here.
pub fn detach(tape: &mut Tape, v: Var) -> Var {
    let value = tape.value(v).clone();
    tape.constant(value)
}

/// Where one descriptor-loss anchor came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorMeta {
    /// Pair index within the batch.
    pub pair: usize,
    /// Anchor location in A.
    pub a: (f64, f64),
    /// True match location in B.
    pub b: (f64, f64),
}

/// Negative chosen for a descriptor-loss anchor: another anchor or another
/// positive, by row index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointNegative {
    Anchor(usize),
    Positive(usize),
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// In-batch hardest negatives for the descriptor triplet.
///
/// For anchor `i` the pool is every other anchor and every non-matching
/// positive in the batch. Candidates from the same pair are skipped when they
/// lie within `exclusion_px` of anchor `i` (anchors, in A) or of its true
/// match (positives, in B). Ties prefer anchors, then lower rows.
pub fn mine_point_negatives(
    anchors: &[f64],
    positives: &[f64],
    meta: &[AnchorMeta],
    exclusion_px: f64,
) -> Vec<Option<PointNegative>> {
    let n = meta.len();
    let d = if n == 0 { 0 } else { anchors.len() / n };
    let row = |m: &[f64], i: usize| m[i * d..(i + 1) * d].to_vec();
    (0..n)
        .map(|i| {
            let a = row(anchors, i);
            let ok_anchor = |j: usize| j != i && !(meta[j].pair == meta[i].pair && euclid(meta[j].a, meta[i].a) <= exclusion_px);
            let ok_pos = |j: usize| j != i && !(meta[j].pair == meta[i].pair && euclid(meta[j].b, meta[i].b) <= exclusion_px);
            let na = hardest_negative(&a, anchors, ok_anchor);
            let np = hardest_negative(&a, positives, ok_pos);
            let dist = |m: &[f64], j: usize| m[j * d..(j + 1) * d].iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            match (na, np) {
                (Some(x), Some(y)) if dist(positives, y) < dist(anchors, x) => Some(PointNegative::Positive(y)),
                (Some(x), _) => Some(PointNegative::Anchor(x)),
                (None, Some(y)) => Some(PointNegative::Positive(y)),
                (None, None) => None,
            }
        })
        .collect()
}

/// Mean over anchors of `max(0, mu + |a_i - p_i| - |a_i - n_i|)` with
/// in-batch hardest negatives. `anchors` and `positives` are `[N, D]` rows
/// aligned with `meta`. Anchors without an admissible negative are skipped.
pub fn descriptor_hard_triplet(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    meta: &[AnchorMeta],
    mu: f64,
    exclusion_px: f64,
) -> Result<Var> {
    let n = meta.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("descriptor triplet needs at least 2 anchors, got {n}")));
    }
    if tape.shape(anchors) != tape.shape(positives) || tape.shape(anchors)[0] != n {
        return Err(Error::Shape("anchors, positives and metadata must align".into()));
    }
    let negs = mine_point_negatives(tape.data(anchors), tape.data(positives), meta, exclusion_px);
    let used: Vec<usize> = (0..n).filter(|&i| negs[i].is_some()).collect();
    if used.is_empty() {
        return Err(Error::Degenerate("no anchor has an admissible negative".into()));
    }
    let m = used.len();
    let pos_pairs: Vec<(usize, usize)> = used.iter().map(|&i| (i, i)).collect();
    let d_pos = tape.row_distances(anchors, positives, &pos_pairs)?;
    let (mut to_a, mut at_a, mut to_p, mut at_p) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, &i) in used.iter().enumerate() {
        match negs[i].expect("filtered") {
            PointNegative::Anchor(j) => {
                to_a.push((i, j));
                at_a.push(k);
            }
            PointNegative::Positive(j) => {
                to_p.push((i, j));
                at_p.push(k);
            }
        }
    }
    let mut parts = Vec::new();
    if !to_a.is_empty() {
        let v = tape.row_distances(anchors, anchors, &to_a)?;
        parts.push(scatter(tape, v, &at_a, m)?);
    }
    if !to_p.is_empty() {
        let v = tape.row_distances(anchors, positives, &to_p)?;
        parts.push(scatter(tape, v, &at_p, m)?);
    }
    let d_neg = tape.add_all(&parts)?;
    let margin = tape.sub(d_pos, d_neg)?;
    let margin = tape.add_scalar(margin, mu);
    let hinge = tape.relu(margin);
    Ok(tape.mean(hinge))
}

/// Convenience: plain-value `[N, 2]` point array.
pub fn points(pts: &[(f64, f64)]) -> DiffArray {
    DiffArray::new([pts.len(), 2], pts.iter().flat_map(|&(x, y)| [x, y]).collect()).expect("[N, 2]")
}
