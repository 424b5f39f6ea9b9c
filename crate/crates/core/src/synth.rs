//! Procedural grey-level images used as a stand-in training and evaluation
//! corpus: a smooth background with overlapping anti-aliased polygons,
//! ellipses and strokes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::DiffArray;

enum Shape {
    Polygon(Vec<(f64, f64)>),
    Ellipse { c: (f64, f64), r: (f64, f64), angle: f64 },
    Stroke { a: (f64, f64), b: (f64, f64), half_width: f64 },
}

impl Shape {
    fn contains(&self, (x, y): (f64, f64)) -> bool {
        match self {
            Shape::Polygon(v) => {
                // Even-odd rule.
                let mut inside = false;
                let mut j = v.len() - 1;
                for i in 0..v.len() {
                    let (xi, yi) = v[i];
                    let (xj, yj) = v[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
            Shape::Ellipse { c, r, angle } => {
                let (s, co) = angle.sin_cos();
                let (dx, dy) = (x - c.0, y - c.1);
                let (u, v) = (co * dx + s * dy, -s * dx + co * dy);
                (u / r.0).powi(2) + (v / r.1).powi(2) <= 1.0
            }
            Shape::Stroke { a, b, half_width } => {
                let (vx, vy) = (b.0 - a.0, b.1 - a.1);
                let len2 = vx * vx + vy * vy;
                let t = (((x - a.0) * vx + (y - a.1) * vy) / len2).clamp(0.0, 1.0);
                let (px, py) = (a.0 + t * vx - x, a.1 + t * vy - y);
                px * px + py * py <= half_width * half_width
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Polygon(v) => v.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            ),
            Shape::Ellipse { c, r, .. } => {
                let m = r.0.max(r.1);
                (c.0 - m, c.1 - m, c.0 + m, c.1 + m)
            }
            Shape::Stroke { a, b, half_width } => (
                a.0.min(b.0) - half_width,
                a.1.min(b.1) - half_width,
                a.0.max(b.0) + half_width,
                a.1.max(b.1) + half_width,
            ),
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, size: f64) -> Shape {
    let c = (rng.gen_range(0.0..size), rng.gen_range(0.0..size));
    let scale = size * rng.gen_range(0.03..0.14);
    match rng.gen_range(0..4) {
        0 => {
            let n = rng.gen_range(3..7);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let pts = (0..n)
                .map(|i| {
                    let t = phase + std::f64::consts::TAU * i as f64 / n as f64 + rng.gen_range(-0.3..0.3);
                    let r = scale * rng.gen_range(0.6..1.4);
                    (c.0 + r * t.cos(), c.1 + r * t.sin())
                })
                .collect();
            Shape::Polygon(pts)
        }
        1 => {
            let (w, h) = (scale * rng.gen_range(0.5..1.5), scale * rng.gen_range(0.5..1.5));
            let t = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, co) = t.sin_cos();
            let corners = [(-w, -h), (w, -h), (w, h), (-w, h)];
            Shape::Polygon(corners.iter().map(|&(x, y)| (c.0 + co * x - s * y, c.1 + s * x + co * y)).collect())
        }
        2 => Shape::Ellipse {
            c,
            r: (scale * rng.gen_range(0.4..1.2), scale * rng.gen_range(0.4..1.2)),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        },
        _ => {
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = scale * rng.gen_range(1.0..3.0);
            Shape::Stroke {
                a: c,
                b: (c.0 + len * t.cos(), c.1 + len * t.sin()),
                half_width: rng.gen_range(0.8..2.5),
            }
        }
    }
}

/// One `size x size` image in `[0, 1]`, fully determined by `seed`.
pub fn synth_image(seed: u64, size: usize) -> DiffArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let (g0, gx, gy) = (rng.gen_range(0.3..0.7), rng.gen_range(-0.3..0.3) / n, rng.gen_range(-0.3..0.3) / n);
    let mut img: Vec<f64> = (0..size * size)
        .map(|i| g0 + gx * (i % size) as f64 + gy * (i / size) as f64)
        .collect();
    let count = (40.0 * (n / 192.0).powi(2)).ceil() as usize + 8;
    const SUB: usize = 3;
    for _ in 0..count {
        let shape = random_shape(&mut rng, n);
        let value = rng.gen_range(0.0..1.0);
        let alpha = rng.gen_range(0.6..1.0);
        let (x0, y0, x1, y1) = shape.bounds();
        let xs = (x0.floor().max(0.0) as usize)..((x1.ceil() + 1.0).min(n) as usize);
        let ys = (y0.floor().max(0.0) as usize)..((y1.ceil() + 1.0).min(n) as usize);
        for y in ys {
            for x in xs.clone() {
                let mut hits = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let p = (
                            x as f64 + (sx as f64 + 0.5) / SUB as f64 - 0.5,
                            y as f64 + (sy as f64 + 0.5) / SUB as f64 - 0.5,
                        );
                        hits += shape.contains(p) as usize;
                    }
                }
                if hits > 0 {
                    let cover = alpha * hits as f64 / (SUB * SUB) as f64;
                    let px = &mut img[y * size + x];
                    *px = (1.0 - cover) * *px + cover * value;
                }
            }
        }
    }
    for v in &mut img {
        *v = (*v + rng.gen_range(-0.01..0.01)).clamp(0.0, 1.0);
    }
    DiffArray::new([1, size, size], img).expect("square image")
}

/// `count` images with seeds derived from `seed`.
pub fn synth_corpus(seed: u64, count: usize, size: usize) -> Vec<DiffArray> {
    (0..count)
        .map(|i| synth_image(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_image(3, 64);
        assert_eq!(a, synth_image(3, 64));
        assert_ne!(a, synth_image(4, 64));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn images_have_structure() {
        let a = synth_image(9, 96);
        let mean = a.data().iter().sum::<f64>() / a.len() as f64;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64;
        assert!(var > 0.005, "variance {var}");
    }
}
