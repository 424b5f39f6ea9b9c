//! Raw numeric kernels behind the tape operations.

/// Border handling for [`Tape::conv2d`](super::Tape::conv2d).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; output size `ceil(n / stride)`.
    Same,
    /// No padding.
    Valid,
}

impl Padding {
    pub(crate) fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        }
    }
}

/// Output length of a convolution along one axis, `None` if the kernel does
/// not fit.
pub fn conv_output_size(n: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    let padded = n + 2 * padding.amount(k);
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1 stride-1 convolution reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let npx = g.out_px();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * npx..(row + 1) * npx];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let npx = g.out_px();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * npx..(row + 1) * npx];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides
/// so transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller guarantees that the strides address elements inside
    // `a` and `b`; `c` is a dense row-major m x n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, npx) = (g.patch(), g.out_px());
    let mut out = vec![0.0; g.k * npx];
    if g.is_pointwise() {
        gemm(g.k, p, npx, kernel, (p as isize, 1), x, (npx as isize, 1), 0.0, &mut out);
    } else {
        let mut col = vec![0.0; p * npx];
        im2col(x, g, &mut col);
        gemm(g.k, p, npx, kernel, (p as isize, 1), &col, (npx as isize, 1), 0.0, &mut out);
    }
    out
}

/// Accumulates input and/or kernel gradients for a convolution.
pub(crate) fn conv_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let (p, npx) = (g.patch(), g.out_px());
    let col_owned;
    let col: &[f64] = if g.is_pointwise() {
        x
    } else {
        let mut c = vec![0.0; p * npx];
        im2col(x, g, &mut c);
        col_owned = c;
        &col_owned
    };
    if let Some(dk) = dk {
        // dK[k x p] += dout[k x npx] * col^T
        gemm(g.k, npx, p, dout, (npx as isize, 1), col, (1, npx as isize), 1.0, dk);
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            gemm(p, g.k, npx, kernel, (1, p as isize), dout, (npx as isize, 1), 1.0, dx);
        } else {
            let mut dcol = vec![0.0; p * npx];
            gemm(p, g.k, npx, kernel, (1, p as isize), dout, (npx as isize, 1), 0.0, &mut dcol);
            col2im_add(&dcol, g, dx);
        }
    }
}

/// Interpolation taps for one axis of an align-corners bilinear resize:
/// `(lower index, upper index, upper weight)` per output sample.
pub(crate) fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (src.floor() as usize).min(n_in - 2);
            (lo, lo + 1, src - lo as f64)
        })
        .collect()
}

/// Bilinear taps at a continuous coordinate inside `[0, n - 1]`.
pub(crate) fn point_taps(t: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let lo = (t.floor().max(0.0) as usize).min(n - 2);
    (lo, lo + 1, t - lo as f64)
}
