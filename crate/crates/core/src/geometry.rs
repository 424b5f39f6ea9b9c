//! Planar homographies, image warping and the window grids shared by the
//! training losses.
//!
//! Coordinates are pixel centres with the origin at the top-left pixel:
//! pixel `(x, y)` covers `[x - 0.5, x + 0.5] x [y - 0.5, y + 0.5]`.

use rand::Rng;

use crate::array::{DiffArray, Rect};
use crate::error::{Error, Result};

/// Projective 3x3 transform, row-major, normalised so that `m[8] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: [f64; 9],
}

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;

impl Homography {
    pub fn new(m: [f64; 9]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) || m[8].abs() < W_EPS {
            return Err(Error::InvalidArgument(format!("cannot normalise homography {m:?}")));
        }
        let m = m.map(|v| v / m[8]);
        let h = Self { m };
        if h.det().abs() <= DET_EPS {
            return Err(Error::InvalidArgument("singular homography".into()));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0],
        }
    }

    pub fn matrix(&self) -> [f64; 9] {
        self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Self {
        let m = &self.m;
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        // adj / det, then renormalised; adj[8] is the (2,2) cofactor.
        let s = adj[8];
        if s.abs() < W_EPS {
            let d = self.det();
            return Self { m: adj.map(|v| v / d) };
        }
        Self { m: adj.map(|v| v / s) }
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Self {
        let (a, b) = (&self.m, &other.m);
        let mut m = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                m[3 * r + c] = (0..3).map(|k| a[3 * r + k] * b[3 * k + c]).sum();
            }
        }
        let s = m[8];
        if s.abs() < W_EPS {
            return Self { m };
        }
        Self { m: m.map(|v| v / s) }
    }

    /// Maps a point; `None` when it lands on (or near) the line at infinity.
    pub fn apply(&self, (x, y): (f64, f64)) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[6] * x + m[7] * y + m[8];
        if w.abs() < W_EPS {
            return None;
        }
        Some(((m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w))
    }

    /// Parses nine whitespace-separated values (the `--h` file format).
    pub fn parse(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format {
                kind: "homography",
                msg: e.to_string(),
            })?;
        let m: [f64; 9] = vals.try_into().map_err(|v: Vec<f64>| Error::Format {
            kind: "homography",
            msg: format!("expected 9 values, found {}", v.len()),
        })?;
        Self::new(m)
    }

    /// Three lines of three values.
    pub fn to_text(&self) -> String {
        self.m
            .chunks(3)
            .map(|r| format!("{:e} {:e} {:e}\n", r[0], r[1], r[2]))
            .collect()
    }
}

/// Ranges for random training homographies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomographyParams {
    /// Rotation drawn from `[-rot_deg, rot_deg]`.
    pub rot_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Each shear coefficient drawn from `[-skew, skew]`.
    pub skew: f64,
}

impl Default for HomographyParams {
    fn default() -> Self {
        Self {
            rot_deg: 30.0,
            scale_min: 0.5,
            scale_max: 2.0,
            skew: 0.6,
        }
    }
}

/// `T(c) R(theta) S(s, s) K(kx, ky) T(-c)` about `center`.
pub fn homography_from_parts(theta_deg: f64, scale: f64, kx: f64, ky: f64, center: (f64, f64)) -> Homography {
    let t = theta_deg.to_radians();
    let (s, c) = t.sin_cos();
    // R * S * K
    let k = [[1.0, kx], [ky, 1.0]];
    let rs = [[c * scale, -s * scale], [s * scale, c * scale]];
    let a = [
        [rs[0][0] * k[0][0] + rs[0][1] * k[1][0], rs[0][0] * k[0][1] + rs[0][1] * k[1][1]],
        [rs[1][0] * k[0][0] + rs[1][1] * k[1][0], rs[1][0] * k[0][1] + rs[1][1] * k[1][1]],
    ];
    let (cx, cy) = center;
    let tx = cx - a[0][0] * cx - a[0][1] * cy;
    let ty = cy - a[1][0] * cx - a[1][1] * cy;
    Homography {
        m: [a[0][0], a[0][1], tx, a[1][0], a[1][1], ty, 0.0, 0.0, 1.0],
    }
}

/// Draws rotation, isotropic scale and two shear terms uniformly from their
/// ranges.
pub fn sample_homography<R: Rng + ?Sized>(rng: &mut R, params: &HomographyParams, center: (f64, f64)) -> Homography {
    let theta = rng.gen_range(-params.rot_deg..=params.rot_deg);
    let scale = rng.gen_range(params.scale_min..=params.scale_max);
    let kx = rng.gen_range(-params.skew..=params.skew);
    let ky = rng.gen_range(-params.skew..=params.skew);
    homography_from_parts(theta, scale, kx, ky, center)
}

/// Bilinear sample of one channel at a continuous position, `None` outside
/// `[0, w - 1] x [0, h - 1]`.
pub(crate) fn sample_bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> Option<f64> {
    const TOL: f64 = 1e-9;
    if !(x >= -TOL && y >= -TOL && x <= w as f64 - 1.0 + TOL && y <= h as f64 - 1.0 + TOL) {
        return None;
    }
    let (x, y) = (x.clamp(0.0, w as f64 - 1.0), y.clamp(0.0, h as f64 - 1.0));
    let (x0, x1, fx) = taps(x, w);
    let (y0, y1, fy) = taps(y, h);
    let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
    let bot = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
    Some((1.0 - fy) * top + fy * bot)
}

/// Flat indices and weights of the bilinear interpolation of an `h x w`
/// plane at `(x, y)`, or `None` outside the pixel-centre hull.
pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> Option<[(usize, f64); 4]> {
    const TOL: f64 = 1e-9;
    if !(x >= -TOL && y >= -TOL && x <= w as f64 - 1.0 + TOL && y <= h as f64 - 1.0 + TOL) {
        return None;
    }
    let (x, y) = (x.clamp(0.0, w as f64 - 1.0), y.clamp(0.0, h as f64 - 1.0));
    let (x0, x1, fx) = taps(x, w);
    let (y0, y1, fy) = taps(y, h);
    Some([
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ])
}

fn taps(t: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let lo = (t.floor() as usize).min(n - 2);
    (lo, lo + 1, t - lo as f64)
}

/// Maps `image` forward by `h`: output pixel `p` samples the input at
/// `h^-1(p)`. Returns the warped image and a validity mask (row-major,
/// one entry per pixel) marking pixels whose source lies inside the input.
pub fn warp_image(h: &Homography, image: &DiffArray) -> Result<(DiffArray, Vec<bool>)> {
    let (c, ih, iw) = image.dims3()?;
    if image.is_empty() {
        return Err(Error::InvalidArgument("cannot warp an empty image".into()));
    }
    warp_from(h, image, ih, iw).map(|(out, mask)| {
        debug_assert_eq!(out.shape(), &[c, ih, iw]);
        (out, mask)
    })
}

/// Like [`warp_image`] but renders an `out_h x out_w` result, allowing the
/// source to be larger than the output.
pub fn warp_from(h: &Homography, src: &DiffArray, out_h: usize, out_w: usize) -> Result<(DiffArray, Vec<bool>)> {
    let (c, sh, sw) = src.dims3()?;
    let inv = h.inverse();
    let sources: Vec<Option<(f64, f64)>> = (0..out_h * out_w)
        .map(|i| inv.apply(((i % out_w) as f64, (i / out_w) as f64)))
        .collect();
    let mut mask = vec![false; out_h * out_w];
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src.data()[ch * sh * sw..(ch + 1) * sh * sw];
        for (i, s) in sources.iter().enumerate() {
            let v = s.and_then(|(x, y)| sample_bilinear(plane, sh, sw, x, y));
            if ch == 0 {
                mask[i] = v.is_some();
            }
            out.push(v.unwrap_or(0.0));
        }
    }
    Ok((DiffArray::new([c, out_h, out_w], out)?, mask))
}

/// One cell of a [`WindowGrid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridWindow {
    pub row: usize,
    pub col: usize,
    pub rect: Rect,
}

/// Disjoint `s x s` windows tiling an image from the origin; partial border
/// windows are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid {
    pub size: usize,
    pub rows: usize,
    pub cols: usize,
    pub windows: Vec<GridWindow>,
}

impl WindowGrid {
    /// Grid cell containing a point (may lie outside the retained cells).
    pub fn cell_of(&self, (x, y): (f64, f64)) -> (i64, i64) {
        let s = self.size as f64;
        ((y / s).floor() as i64, (x / s).floor() as i64)
    }

    pub fn rects(&self) -> Vec<Rect> {
        self.windows.iter().map(|w| w.rect).collect()
    }
}

pub fn window_grid(h: usize, w: usize, s: usize) -> Result<WindowGrid> {
    if s < 2 {
        return Err(Error::InvalidArgument(format!("window size must be >= 2, got {s}")));
    }
    let (rows, cols) = (h / s, w / s);
    let windows = (0..rows)
        .flat_map(|row| {
            (0..cols).map(move |col| GridWindow {
                row,
                col,
                rect: Rect::new(col * s, row * s, s),
            })
        })
        .collect();
    Ok(WindowGrid {
        size: s,
        rows,
        cols,
        windows,
    })
}

/// The `s x s` window centred at `h(center(win))` in a `target` image of
/// `(height, width)`, or `None` if it does not fit entirely.
pub fn corresponding_window(h: &Homography, win: &Rect, target: (usize, usize)) -> Option<Rect> {
    let (cx, cy) = h.apply(win.center())?;
    let half = (win.size as f64 - 1.0) / 2.0;
    let (x0, y0) = ((cx - half).round(), (cy - half).round());
    if !(x0.is_finite() && y0.is_finite()) || x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    let rect = Rect::new(x0 as usize, y0 as usize, win.size);
    rect.fits(target.0, target.1).then_some(rect)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn close(a: [f64; 9], b: [f64; 9], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn identity_parts_give_identity() {
        let h = homography_from_parts(0.0, 1.0, 0.0, 0.0, (47.5, 47.5));
        assert!(close(h.matrix(), Homography::identity().matrix(), 1e-15));
    }

    #[test]
    fn rotation_matches_closed_form() {
        let c = (10.0, 20.0);
        let h = homography_from_parts(30.0, 1.0, 0.0, 0.0, c);
        let (s, co) = 30f64.to_radians().sin_cos();
        for p in [(0.0, 0.0), (13.0, -4.0), (10.0, 20.0)] {
            let (dx, dy) = (p.0 - c.0, p.1 - c.1);
            let expect = (c.0 + co * dx - s * dy, c.1 + s * dx + co * dy);
            let got = h.apply(p).unwrap();
            assert!((got.0 - expect.0).abs() < 1e-12 && (got.1 - expect.1).abs() < 1e-12);
        }
    }

    fn signed_area(q: &[(f64, f64)]) -> f64 {
        (0..q.len())
            .map(|i| {
                let (a, b) = (q[i], q[(i + 1) % q.len()]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum::<f64>()
            / 2.0
    }

    #[test]
    fn sampled_homographies_preserve_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        for _ in 0..1000 {
            let h = sample_homography(&mut rng, &HomographyParams::default(), (47.5, 47.5));
            let quad: Vec<_> = square.iter().map(|&p| h.apply(p).unwrap()).collect();
            assert!(signed_area(&quad) > 0.0);
            assert!(h.det().abs() > DET_EPS);
        }
    }

    #[test]
    fn inverse_and_compose() {
        let h = Homography::new([1.1, 0.2, 3.0, -0.1, 0.9, -2.0, 1e-3, -2e-3, 1.0]).unwrap();
        let id = h.compose(&h.inverse());
        assert!(close(id.matrix(), Homography::identity().matrix(), 1e-9));
        assert!(Homography::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn parse_round_trip() {
        let h = Homography::new([1.1, 0.2, 3.0, -0.1, 0.9, -2.0, 1e-3, -2e-3, 1.0]).unwrap();
        assert_eq!(Homography::parse(&h.to_text()).unwrap(), h);
        assert!(Homography::parse("1 2 3").is_err());
    }

    fn smooth_image(h: usize, w: usize) -> DiffArray {
        DiffArray::from_fn3(1, h, w, |_, y, x| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.25 * (x / 7.0).sin() * (y / 9.0).cos() + 0.1 * ((x + y) / 13.0).sin()
        })
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = smooth_image(20, 17);
        let (out, mask) = warp_image(&Homography::identity(), &img).unwrap();
        assert_eq!(out.data(), img.data());
        assert!(mask.iter().all(|&v| v));
    }

    #[test]
    fn translation_warp_shifts_columns() {
        let img = smooth_image(12, 15);
        let (out, mask) = warp_image(&Homography::translation(5.0, 0.0), &img).unwrap();
        for y in 0..12 {
            for x in 0..15 {
                assert_eq!(mask[y * 15 + x], x >= 5);
                if x >= 5 {
                    assert_eq!(out.at3(0, y, x), img.at3(0, y, x - 5));
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_psnr() {
        let img = smooth_image(64, 64);
        let h = homography_from_parts(17.0, 1.2, 0.1, -0.05, (31.5, 31.5));
        let (fwd, _) = warp_image(&h, &img).unwrap();
        let (back, mask) = warp_image(&h.inverse(), &fwd).unwrap();
        let mut se = 0.0;
        let mut n = 0;
        for y in 16..48 {
            for x in 16..48 {
                if mask[y * 64 + x] {
                    se += (back.at3(0, y, x) - img.at3(0, y, x)).powi(2);
                    n += 1;
                }
            }
        }
        let mse = se / n as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!(psnr > 30.0, "psnr {psnr}");
    }

    #[test]
    fn grid_and_correspondence() {
        let g = window_grid(64, 64, 8).unwrap();
        assert_eq!(g.windows.len(), 64);
        let g = window_grid(70, 66, 8).unwrap();
        assert_eq!((g.rows, g.cols), (8, 8));
        assert!(window_grid(10, 10, 1).is_err());

        let win = g.windows[9].rect;
        assert_eq!(corresponding_window(&Homography::identity(), &win, (70, 66)), Some(win));
        let moved = corresponding_window(&Homography::translation(3.0, 3.0), &win, (70, 66)).unwrap();
        assert_eq!((moved.center().0 - win.center().0, moved.center().1 - win.center().1), (3.0, 3.0));
        let off = corresponding_window(&Homography::translation(-20.0, 0.0), &win, (70, 66));
        assert_eq!(off, None);
    }

    proptest! {
        #[test]
        fn grid_windows_are_disjoint(h in 2usize..60, w in 2usize..60, s in 2usize..12) {
            let g = window_grid(h, w, s).unwrap();
            let mut seen = vec![0u8; h * w];
            for win in &g.windows {
                prop_assert!(win.rect.fits(h, w));
                for dy in 0..s {
                    for dx in 0..s {
                        seen[(win.rect.y0 + dy) * w + win.rect.x0 + dx] += 1;
                    }
                }
            }
            prop_assert!(seen.iter().all(|&c| c <= 1));
            prop_assert_eq!(seen.iter().filter(|&&c| c == 1).count(), (h / s) * (w / s) * s * s);
        }

        #[test]
        fn warp_point_round_trip(theta in -30.0f64..30.0, scale in 0.5f64..2.0, kx in -0.6f64..0.6,
                                 ky in -0.6f64..0.6, px in -50.0f64..150.0, py in -50.0f64..150.0) {
            let h = homography_from_parts(theta, scale, kx, ky, (47.5, 47.5));
            let q = h.inverse().apply((px, py)).unwrap();
            let p = h.apply(q).unwrap();
            prop_assert!((p.0 - px).abs() < 1e-9 && (p.1 - py).abs() < 1e-9);
        }
    }
}
