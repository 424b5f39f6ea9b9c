//! Hybrid detector: fixed differential features over a three-level pyramid
//! feeding a shallow learned head, plus non-maximum suppression.

use crate::array::{DiffArray, Padding, Tape, Var};
use crate::descriptor::gaussian_pyramid;
use crate::error::{shape_err, Result};
use crate::model::{Bound, Model};

/// Channels of the hand-crafted feature stack.
pub const FEATURES: usize = 10;
/// Pyramid levels the detector features are summed over.
pub const LEVELS: usize = 3;

const NORM_EPS: f64 = 1e-6;

/// Stencils `[I_x, I_y, I_xx, I_yy, I_xy]` as a `[5, 1, 3, 3]` kernel.
///
/// ```text
/// I_x  = [-1 0 1; -2 0 2; -1 0 1] / 8      I_y = transpose of I_x
/// I_xx = [0 0 0; 1 -2 1; 0 0 0]             I_yy = transpose of I_xx
/// I_xy = [1 0 -1; 0 0 0; -1 0 1] / 4
/// ```
pub fn derivative_stencils() -> DiffArray {
    #[rustfmt::skip]
    let k: [[f64; 9]; 5] = [
        [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
        [0.0, 0.0, 0.0, 1.0, -2.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0],
        [1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0],
    ];
    let scale = [8.0, 8.0, 1.0, 1.0, 4.0];
    let data = k.iter().zip(scale).flat_map(|(row, s)| row.map(|v| v / s)).collect();
    DiffArray::new([5, 1, 3, 3], data).expect("5x3x3")
}

fn level_features(tape: &mut Tape, level: Var, stencils: Var) -> Result<Var> {
    let padded = tape.pad_replicate(level, 1)?;
    let d = tape.conv2d(padded, stencils, 1, Padding::Valid)?;
    let ch = |t: &mut Tape, i: usize| t.select_channels(d, &[i]);
    let (ix, iy, ixx, iyy, ixy) = (ch(tape, 0)?, ch(tape, 1)?, ch(tape, 2)?, ch(tape, 3)?, ch(tape, 4)?);
    let ix2 = tape.mul(ix, ix)?;
    let iy2 = tape.mul(iy, iy)?;
    let ixiy = tape.mul(ix, iy)?;
    let det = tape.mul(ixx, iyy)?;
    let lap = tape.add(ixx, iyy)?;
    tape.concat_channels(&[ix, iy, ix2, iy2, ixiy, ixx, iyy, det, ixy, lap])
}

/// `{I_x, I_y, I_x^2, I_y^2, I_x I_y, I_xx, I_yy, I_xx I_yy, I_xy, I_xx + I_yy}`
/// per pyramid level, upsampled to the input size and summed.
pub fn handcrafted_features(tape: &mut Tape, image: Var) -> Result<Var> {
    let (_, h, w) = tape.value(image).dims3()?;
    let stencils = tape.constant(derivative_stencils());
    let levels = gaussian_pyramid(tape, image, LEVELS)?;
    let mut per_level = Vec::with_capacity(LEVELS);
    for level in levels {
        let f = level_features(tape, level, stencils)?;
        per_level.push(if tape.shape(f)[1] == h { f } else { tape.bilinear_resize(f, h, w)? });
    }
    tape.add_all(&per_level)
}

/// Non-negative `[1, H, W]` score map.
///
/// The feature stack is standardised per channel before the learned head so
/// that the head sees unit-scale inputs regardless of image contrast. The
/// last pre-activation is standardised too: both detector losses are
/// minimised by an all-zero map, and a zero-mean unit-variance response
/// cannot reach it.
pub fn score_map(tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
    let feats = handcrafted_features(tape, image)?;
    let mut x = tape.instance_norm(feats, NORM_EPS)?;
    for i in 1..=3 {
        let w = bound.var(&format!("det.conv{i}.w"))?;
        let b = bound.var(&format!("det.conv{i}.b"))?;
        x = tape.conv2d(x, w, 1, Padding::Same)?;
        x = tape.add_channel_bias(x, b)?;
        if i == 3 {
            x = tape.instance_norm(x, NORM_EPS)?;
        }
        x = tape.relu(x);
    }
    Ok(x)
}

/// Forward-only score map of an image.
pub fn score_image(model: &Model, image: &DiffArray) -> Result<DiffArray> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[]);
    let img = tape.constant(image.clone());
    let s = score_map(&mut tape, &bound, img)?;
    Ok(tape.value(s).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Greedy non-maximum suppression on a `[1, H, W]` (or `[H, W]`) map.
///
/// Candidates are positive pixels that are maximal (ties allowed) within the
/// `window x window` neighbourhood. They are taken in order of descending
/// score, then ascending `(y, x)`, and kept when their Chebyshev distance to
/// every kept point exceeds `window / 2`.
pub fn nms(scores: &DiffArray, window: usize, k: usize) -> Result<Vec<Keypoint>> {
    let (h, w) = match scores.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return shape_err(format!("nms expects a single-channel map, got {s:?}")),
    };
    let r = window / 2;
    let s = scores.data();
    let mut cand: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = s[y * w + x];
            if v <= 0.0 {
                continue;
            }
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let is_max = (y0..=y1).all(|yy| (x0..=x1).all(|xx| s[yy * w + xx] <= v));
            if is_max {
                cand.push((y, x));
            }
        }
    }
    cand.sort_by(|a, b| s[b.0 * w + b.1].total_cmp(&s[a.0 * w + a.1]).then(a.cmp(b)));
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (y, x) in cand {
        if kept.len() == k {
            break;
        }
        if kept.iter().all(|&(ky, kx)| ky.abs_diff(y).max(kx.abs_diff(x)) > r) {
            kept.push((y, x));
        }
    }
    Ok(kept
        .into_iter()
        .map(|(y, x)| Keypoint {
            x: x as f64,
            y: y as f64,
            score: s[y * w + x],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::ModelConfig;

    fn features(image: &DiffArray) -> DiffArray {
        let mut t = Tape::new();
        let i = t.constant(image.clone());
        let f = handcrafted_features(&mut t, i).unwrap();
        t.value(f).clone()
    }

    #[test]
    fn constant_image_has_no_features() {
        let f = features(&DiffArray::filled([1, 24, 32], 0.6));
        assert_eq!(f.shape(), &[10, 24, 32]);
        assert!(f.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ramp_has_pure_x_gradient() {
        let img = DiffArray::from_fn3(1, 128, 128, |_, _, x| x as f64 / 128.0);
        let f = features(&img);
        for y in 40..88 {
            for x in 40..88 {
                assert!(f.at3(0, y, x) > 0.0);
                assert!((f.at3(0, y, x) - f.at3(0, 64, 64)).abs() < 1e-9);
                assert!(f.at3(1, y, x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn product_channels_are_products_per_level() {
        // Products are formed per level before the levels are summed, so
        // check them on a single level.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = DiffArray::from_fn3(1, 12, 12, |_, _, _| rng.gen_range(0.0..1.0));
        let mut t = Tape::new();
        let i = t.constant(img);
        let s = t.constant(derivative_stencils());
        let f = level_features(&mut t, i, s).unwrap();
        let v = t.value(f);
        for y in 0..12 {
            for x in 0..12 {
                assert_eq!(v.at3(2, y, x), v.at3(0, y, x) * v.at3(0, y, x));
                assert_eq!(v.at3(4, y, x), v.at3(0, y, x) * v.at3(1, y, x));
                assert_eq!(v.at3(7, y, x), v.at3(5, y, x) * v.at3(6, y, x));
                assert_eq!(v.at3(9, y, x), v.at3(5, y, x) + v.at3(6, y, x));
            }
        }
    }

    #[test]
    fn scores_are_non_negative_and_zero_on_constant() {
        let model = Model::new(ModelConfig::default(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = DiffArray::from_fn3(1, 32, 32, |_, _, _| rng.gen_range(0.0..1.0));
        let s = score_image(&model, &img).unwrap();
        assert_eq!(s.shape(), &[1, 32, 32]);
        assert!(s.data().iter().all(|&v| v >= 0.0));
        assert!(s.data().iter().any(|&v| v > 0.0));
        let c = score_image(&model, &DiffArray::filled([1, 32, 32], 0.4)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nms_single_and_pair() {
        let mut m = DiffArray::zeros([1, 20, 20]);
        m.data_mut()[5 * 20 + 7] = 2.0;
        assert_eq!(nms(&m, 15, 10).unwrap(), vec![Keypoint { x: 7.0, y: 5.0, score: 2.0 }]);
        m.data_mut()[5 * 20 + 12] = 2.0;
        let k = nms(&m, 15, 10).unwrap();
        assert_eq!(k, vec![Keypoint { x: 7.0, y: 5.0, score: 2.0 }]);
        assert!(nms(&DiffArray::zeros([1, 4, 4]), 15, 3).unwrap().is_empty());
    }

    #[test]
    fn nms_keeps_border_maxima_and_caps_count() {
        let mut m = DiffArray::zeros([1, 40, 40]);
        for (i, &(y, x)) in [(0, 0), (0, 39), (39, 0), (39, 39), (20, 20)].iter().enumerate() {
            m.data_mut()[y * 40 + x] = 1.0 + i as f64;
        }
        assert_eq!(nms(&m, 15, 100).unwrap().len(), 5);
        let top = nms(&m, 15, 2).unwrap();
        assert_eq!((top[0].x, top[0].y, top[1].x, top[1].y), (20.0, 20.0, 39.0, 39.0));
    }
}
