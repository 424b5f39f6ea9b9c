//! Rotation-robust hand-crafted block: a base filter rotated to `R`
//! orientations, a sign split of each response, and cyclic max-pooling over
//! neighbouring orientations.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::array::{DiffArray, Padding, Tape, Var};
use crate::error::{Error, Result};

/// Number of filter orientations.
pub const ORIENTATIONS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaborParams {
    /// Odd kernel side in pixels.
    pub size: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub psi: f64,
}

impl Default for GaborParams {
    fn default() -> Self {
        Self {
            size: 9,
            sigma: 2.0,
            lambda: 4.0,
            gamma: 0.5,
            psi: 0.0,
        }
    }
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        if self.size % 2 == 0 || self.size < 3 {
            return Err(Error::InvalidArgument(format!("filter size must be odd and >= 3, got {}", self.size)));
        }
        if !(self.sigma > 0.0 && self.lambda > 0.0) {
            return Err(Error::InvalidArgument("sigma and lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Base filter family of the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    Gabor,
    /// First derivative of a Gaussian along x.
    Deriv1,
    /// Second derivative of a Gaussian along x.
    Deriv2,
    /// Randomly initialised and trained with the descriptor.
    Learned,
}

impl FilterKind {
    pub fn code(self) -> u8 {
        match self {
            FilterKind::Gabor => 0,
            FilterKind::Deriv1 => 1,
            FilterKind::Deriv2 => 2,
            FilterKind::Learned => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => FilterKind::Gabor,
            1 => FilterKind::Deriv1,
            2 => FilterKind::Deriv2,
            3 => FilterKind::Learned,
            _ => return None,
        })
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::Gabor => "gabor",
            FilterKind::Deriv1 => "deriv1",
            FilterKind::Deriv2 => "deriv2",
            FilterKind::Learned => "learned",
        })
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gabor" => Ok(FilterKind::Gabor),
            "deriv1" => Ok(FilterKind::Deriv1),
            "deriv2" => Ok(FilterKind::Deriv2),
            "learned" => Ok(FilterKind::Learned),
            other => Err(Error::Config(format!("unknown filter kind {other:?}"))),
        }
    }
}

fn sample_kernel(size: usize, f: impl Fn(f64, f64) -> f64) -> DiffArray {
    let c = (size / 2) as f64;
    let mut k = DiffArray::from_fn3(1, size, size, |_, y, x| f(x as f64 - c, y as f64 - c));
    let mean = k.data().iter().sum::<f64>() / k.len() as f64;
    k.data_mut().iter_mut().for_each(|v| *v -= mean);
    k.reshaped([size, size]).expect("square kernel")
}

/// Real Gabor kernel at orientation 0, mean-subtracted.
pub fn gabor_kernel(p: &GaborParams) -> Result<DiffArray> {
    p.validate()?;
    Ok(sample_kernel(p.size, |x, y| {
        let env = (-(x * x + p.gamma * p.gamma * y * y) / (2.0 * p.sigma * p.sigma)).exp();
        env * (2.0 * PI * x / p.lambda + p.psi).cos()
    }))
}

pub fn deriv1_kernel(size: usize, sigma: f64) -> DiffArray {
    sample_kernel(size, |x, y| -x / (sigma * sigma) * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp())
}

pub fn deriv2_kernel(size: usize, sigma: f64) -> DiffArray {
    let s2 = sigma * sigma;
    sample_kernel(size, |x, y| (x * x / s2 - 1.0) / s2 * (-(x * x + y * y) / (2.0 * s2)).exp())
}

/// Base kernel of the given family, before masking.
pub fn base_filter(kind: FilterKind, p: &GaborParams) -> Result<DiffArray> {
    p.validate()?;
    Ok(match kind {
        FilterKind::Gabor | FilterKind::Learned => gabor_kernel(p)?,
        FilterKind::Deriv1 => deriv1_kernel(p.size, p.sigma),
        FilterKind::Deriv2 => deriv2_kernel(p.size, p.sigma),
    })
}

/// 0/1 disc of radius `size / 2` around the kernel centre.
pub fn circular_mask(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let r2 = c * c;
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 - c, (i / size) as f64 - c);
            if x * x + y * y <= r2 + 1e-9 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Orientation of copy `r` (1-based): `360 r / R` degrees.
pub fn orientation_deg(r: usize) -> f64 {
    360.0 * r as f64 / ORIENTATIONS as f64
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Sparse `(out, in, weight)` entries of masked bilinear rotation by
/// `theta_deg` about the kernel centre on a `size x size` grid.
pub fn rotation_entries(size: usize, theta_deg: f64, mask: &[f64]) -> Vec<(usize, usize, f64)> {
    let c = (size / 2) as f64;
    let t = theta_deg.to_radians();
    let (s, co) = (snap(t.sin()), snap(t.cos()));
    let mut entries = Vec::new();
    for o in 0..size * size {
        if mask[o] == 0.0 {
            continue;
        }
        let (dx, dy) = ((o % size) as f64 - c, (o / size) as f64 - c);
        // Pull back through the inverse rotation.
        let sx = snap(co * dx + s * dy + c);
        let sy = snap(-s * dx + co * dy + c);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        for (ox, oy, w) in [
            (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
            (1.0, 0.0, fx * (1.0 - fy)),
            (0.0, 1.0, (1.0 - fx) * fy),
            (1.0, 1.0, fx * fy),
        ] {
            let (xi, yi) = (x0 + ox, y0 + oy);
            if w == 0.0 || xi < 0.0 || yi < 0.0 || xi >= size as f64 || yi >= size as f64 {
                continue;
            }
            entries.push((o, yi as usize * size + xi as usize, w * mask[o]));
        }
    }
    entries
}

/// Rotates a square filter by `theta_deg` with bilinear interpolation about
/// its centre and applies `mask`. Samples outside the support read as zero.
pub fn rotate_filter(w: &DiffArray, theta_deg: f64, mask: &[f64]) -> Result<DiffArray> {
    let size = match w.shape() {
        &[a, b] if a == b && a % 2 == 1 => a,
        s => return Err(Error::Shape(format!("filter must be square and odd, got {s:?}"))),
    };
    let mut out = vec![0.0; size * size];
    for (o, i, wt) in rotation_entries(size, theta_deg, mask) {
        out[o] += wt * w.data()[i];
    }
    DiffArray::new([size, size], out)
}

/// The `R` rotated, masked copies of a base filter.
///
/// Each copy is re-centred to zero mean inside the mask so that constant
/// regions give exactly zero response whatever the rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    size: usize,
    mask: Vec<f64>,
    entries: Vec<(usize, usize, f64)>,
}

impl FilterBank {
    pub fn new(size: usize) -> Self {
        let mask = circular_mask(size);
        let n = size * size;
        let support: Vec<usize> = (0..n).filter(|&i| mask[i] != 0.0).collect();
        let inv = 1.0 / support.len() as f64;
        let mut entries = Vec::new();
        for r in 1..=ORIENTATIONS {
            // Dense (mask-restricted) rows of  P_m (I - mean_m) Rot_r.
            let mut rot = vec![0.0; n * n];
            for (o, i, w) in rotation_entries(size, orientation_deg(r), &mask) {
                rot[o * n + i] += w;
            }
            let mut col_mean = vec![0.0; n];
            for &o in &support {
                for i in 0..n {
                    col_mean[i] += rot[o * n + i] * inv;
                }
            }
            for &o in &support {
                for i in 0..n {
                    let v = rot[o * n + i] - col_mean[i];
                    if v != 0.0 {
                        entries.push(((r - 1) * n + o, i, v));
                    }
                }
            }
        }
        Self { size, mask, entries }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    /// Rotated copies `[R, 1, size, size]` as a differentiable function of the
    /// base filter.
    pub fn kernels(&self, tape: &mut Tape, base: Var) -> Result<Var> {
        let n = self.size * self.size;
        if tape.value(base).len() != n {
            return Err(Error::Shape(format!("base filter must have {n} values")));
        }
        let flat = tape.linear_map(base, self.entries.clone(), &[ORIENTATIONS * n])?;
        tape.reshape(flat, [ORIENTATIONS, 1, self.size, self.size])
    }

    /// Rotated copies as plain values.
    pub fn rotated(&self, base: &DiffArray) -> Result<DiffArray> {
        let mut t = Tape::new();
        let b = t.constant(base.clone());
        let k = self.kernels(&mut t, b)?;
        Ok(t.value(k).clone())
    }
}

/// Channel `r` holds `image * w_r` (replicate border, same size).
pub fn orientation_responses(tape: &mut Tape, image: Var, kernels: Var) -> Result<Var> {
    let (c, _, _) = tape.value(image).dims3()?;
    if c != 1 {
        return Err(Error::Shape(format!("orientation responses need one channel, got {c}")));
    }
    let pad = tape.shape(kernels)[2] / 2;
    let padded = tape.pad_replicate(image, pad)?;
    tape.conv2d(padded, kernels, 1, Padding::Valid)
}

/// Full block: responses, optional sign split, cyclic pooling per sign group.
///
/// With the split the output has 24 channels laid out
/// `[raw x 8, positive x 8, negative x 8]`; without it, 8 channels.
pub fn handcrafted_forward(tape: &mut Tape, image: Var, kernels: Var, sign_split: bool) -> Result<Var> {
    let h = orientation_responses(tape, image, kernels)?;
    if !sign_split {
        return tape.channel_max3(h);
    }
    let split = tape.sign_split(h)?;
    let mut pooled = Vec::with_capacity(3);
    for group in 0..3 {
        let idx: Vec<usize> = (0..ORIENTATIONS).map(|r| 3 * r + group).collect();
        let g = tape.select_channels(split, &idx)?;
        pooled.push(tape.channel_max3(g)?);
    }
    tape.concat_channels(&pooled)
}
