//! Brute-force reference implementations. Written directly from the
//! definitions, without the tape or any library helper beyond plain data
//! access.

#![allow(dead_code)]

pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

pub fn project(m: &[f64; 9], (x, y): (f64, f64)) -> (f64, f64) {
    let z = m[6] * x + m[7] * y + m[8];
    ((m[0] * x + m[1] * y + m[2]) / z, (m[3] * x + m[4] * y + m[5]) / z)
}

pub fn invert(m: &[f64; 9]) -> [f64; 9] {
    let [a, b, c, d, e, f, g, h, i] = *m;
    let det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    [
        (e * i - f * h) / det,
        (c * h - b * i) / det,
        (b * f - c * e) / det,
        (f * g - d * i) / det,
        (a * i - c * g) / det,
        (c * d - a * f) / det,
        (d * h - e * g) / det,
        (b * g - a * h) / det,
        (a * e - b * d) / det,
    ]
}

/// Soft score and normalised soft descriptor of the `s x s` window at
/// `(x0, y0)`.
pub fn soft_sample(scores: &Map, desc: &Map, x0: usize, y0: usize, s: usize) -> (f64, Vec<f64>) {
    let mut z = 0.0;
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            z += scores.at(0, y, x).exp();
        }
    }
    let mut r = 0.0;
    let mut d = vec![0.0; desc.c];
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            let p = scores.at(0, y, x).exp() / z;
            r += p * scores.at(0, y, x);
            for (c, v) in d.iter_mut().enumerate() {
                *v += p * desc.at(c, y, x);
            }
        }
    }
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    (r, d.into_iter().map(|v| v / n).collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Index of the nearest admissible row, lowest index on ties.
pub fn hardest_negative(anchor: &[f64], rows: &[Vec<f64>], admissible: &dyn Fn(usize) -> bool) -> Option<usize> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (i, r) in rows.iter().enumerate() {
        if admissible(i) && (best.is_none() || dist(anchor, r) < best_d) {
            best = Some(i);
            best_d = dist(anchor, r);
        }
    }
    best
}

/// Top-left of the window centred on the image of `(x0, y0, s)` under `m`,
/// if it fits in `h x w`.
pub fn corresponding(m: &[f64; 9], x0: usize, y0: usize, s: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    let half = (s as f64 - 1.0) / 2.0;
    let (cx, cy) = project(m, (x0 as f64 + half, y0 as f64 + half));
    let (bx, by) = ((cx - half).round(), (cy - half).round());
    if !(bx >= 0.0 && by >= 0.0) || bx + s as f64 > w as f64 || by + s as f64 > h as f64 {
        return None;
    }
    Some((bx as usize, by as usize))
}

/// Score-weighted window triplet at one scale, or `None` when no anchor has
/// both a correspondence and an admissible negative.
#[allow(clippy::too_many_arguments)]
pub fn detector_triplet(
    sa: &Map,
    sb: &Map,
    da: &Map,
    db: &Map,
    h_ba: &[f64; 9],
    s: usize,
    mu: f64,
    exclusion: i64,
) -> Option<f64> {
    let (h, w) = (sa.h, sa.w);
    let h_ab = invert(h_ba);
    let cells: Vec<(usize, usize)> = (0..h / s).flat_map(|r| (0..w / s).map(move |c| (r, c))).collect();
    let a_samples: Vec<(f64, Vec<f64>)> = cells.iter().map(|&(r, c)| soft_sample(sa, da, c * s, r * s, s)).collect();
    let b_desc: Vec<Vec<f64>> = cells.iter().map(|&(r, c)| soft_sample(sb, db, c * s, r * s, s).1).collect();
    let cheb = |a: (i64, i64), b: (i64, i64)| (a.0 - b.0).abs().max((a.1 - b.1).abs());
    let a_desc: Vec<Vec<f64>> = a_samples.iter().map(|x| x.1.clone()).collect();
    let mut total = 0.0;
    let mut any = false;
    for (i, &(r, c)) in cells.iter().enumerate() {
        let Some((bx, by)) = corresponding(&h_ab, c * s, r * s, s, h, w) else { continue };
        let (rbar, anchor) = &a_samples[i];
        let (_, pos) = soft_sample(sb, db, bx, by, s);
        let half = (s as f64 - 1.0) / 2.0;
        let pcell = (((by as f64 + half) / s as f64).floor() as i64, ((bx as f64 + half) / s as f64).floor() as i64);
        let me = (r as i64, c as i64);
        let na = hardest_negative(anchor, &a_desc, &|j| cheb((cells[j].0 as i64, cells[j].1 as i64), me) > exclusion);
        let nb = hardest_negative(anchor, &b_desc, &|j| cheb((cells[j].0 as i64, cells[j].1 as i64), pcell) > exclusion);
        let neg = match (na, nb) {
            (None, None) => continue,
            (Some(a), None) => &a_desc[a],
            (None, Some(b)) => &b_desc[b],
            (Some(a), Some(b)) => {
                if dist(anchor, &b_desc[b]) < dist(anchor, &a_desc[a]) {
                    &b_desc[b]
                } else {
                    &a_desc[a]
                }
            }
        };
        any = true;
        total += rbar * (mu + dist(anchor, &pos) - dist(anchor, neg)).max(0.0);
    }
    any.then_some(total)
}

pub fn ms_trip(
    sa: &Map,
    sb: &Map,
    da: &Map,
    db: &Map,
    h_ba: &[f64; 9],
    windows: &[usize],
    lambdas: &[f64],
    mu: f64,
    exclusion: i64,
) -> Option<f64> {
    let terms: Vec<f64> = windows
        .iter()
        .zip(lambdas)
        .filter_map(|(&s, &l)| detector_triplet(sa, sb, da, db, h_ba, s, mu, exclusion).map(|v| l * v))
        .collect();
    (!terms.is_empty()).then(|| terms.iter().sum())
}

/// Bilinear value of a single-channel map, `None` outside the hull of pixel
/// centres.
pub fn bilinear(m: &Map, x: f64, y: f64) -> Option<f64> {
    let tol = 1e-9;
    let (wm, hm) = ((m.w - 1) as f64, (m.h - 1) as f64);
    if !(x >= -tol && y >= -tol && x <= wm + tol && y <= hm + tol) {
        return None;
    }
    let (x, y) = (x.clamp(0.0, wm), y.clamp(0.0, hm));
    let x0 = (x.floor() as usize).min(m.w - 2);
    let y0 = (y.floor() as usize).min(m.h - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    Some(
        (1.0 - fx) * (1.0 - fy) * m.at(0, y0, x0)
            + fx * (1.0 - fy) * m.at(0, y0, x0 + 1)
            + (1.0 - fx) * fy * m.at(0, y0 + 1, x0)
            + fx * fy * m.at(0, y0 + 1, x0 + 1),
    )
}

fn soft_argmax(vals: &[(f64, f64, f64)], t: f64) -> (f64, f64) {
    let z: f64 = vals.iter().map(|v| (t * v.0).exp()).sum();
    vals.iter().fold((0.0, 0.0), |(u, v), &(s, x, y)| {
        let p = (t * s).exp() / z;
        (u + p * x, v + p * y)
    })
}

/// Multi-scale soft-argmax consistency with B resampled into A's frame;
/// `None` when no window is fully covered at any scale.
pub fn msip(sa: &Map, sb: &Map, h_ba: &[f64; 9], windows: &[usize], t: f64) -> Option<f64> {
    let (h, w) = (sa.h, sa.w);
    let h_ab = invert(h_ba);
    let warped: Vec<Option<f64>> = (0..h * w)
        .map(|i| {
            let (x, y) = project(&h_ab, ((i % w) as f64, (i / w) as f64));
            bilinear(sb, x, y)
        })
        .collect();
    let mut total = 0.0;
    let mut any = false;
    for &s in windows {
        for r in 0..h / s {
            for c in 0..w / s {
                let px: Vec<(usize, usize)> = (r * s..r * s + s).flat_map(|y| (c * s..c * s + s).map(move |x| (x, y))).collect();
                if px.iter().any(|&(x, y)| warped[y * w + x].is_none()) {
                    continue;
                }
                any = true;
                let a: Vec<_> = px.iter().map(|&(x, y)| (sa.at(0, y, x), x as f64, y as f64)).collect();
                let b: Vec<_> = px.iter().map(|&(x, y)| (warped[y * w + x].unwrap(), x as f64, y as f64)).collect();
                let (ua, va) = soft_argmax(&a, t);
                let (ub, vb) = soft_argmax(&b, t);
                total += (ua - ub).powi(2) + (va - vb).powi(2);
            }
        }
    }
    any.then_some(total)
}

/// Greedy NMS by repeated global-maximum selection over the local maxima.
pub fn nms(m: &Map, window: usize, k: usize) -> Vec<(usize, usize)> {
    let r = window / 2;
    let (h, w) = (m.h, m.w);
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = m.at(0, y, x);
            let mut is_max = v > 0.0;
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    is_max &= m.at(0, yy, xx) <= v;
                }
            }
            if is_max {
                pool.push((y, x));
            }
        }
    }
    let mut kept = Vec::new();
    while kept.len() < k && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (vi, vb) = (m.at(0, pool[i].0, pool[i].1), m.at(0, pool[best].0, pool[best].1));
            if vi > vb || (vi == vb && pool[i] < pool[best]) {
                best = i;
            }
        }
        let (by, bx) = pool[best];
        kept.push((by, bx));
        pool.retain(|&(y, x)| y.abs_diff(by).max(x.abs_diff(bx)) > r);
    }
    kept
}

/// Mutual nearest neighbours from the full distance matrix.
pub fn mutual_nn(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<(usize, usize)> {
    let d: Vec<Vec<f64>> = a
        .iter()
        .map(|x| {
            b.iter()
                .map(|y| x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let argmin = |v: &mut dyn Iterator<Item = f64>| {
        let mut best = (0, f64::INFINITY);
        for (i, x) in v.enumerate() {
            if x < best.1 {
                best = (i, x);
            }
        }
        best.0
    };
    let mut out = Vec::new();
    for i in 0..a.len() {
        let j = argmin(&mut d[i].iter().copied());
        if argmin(&mut d.iter().map(|row| row[j])) == i {
            out.push((i, j));
        }
    }
    out
}
