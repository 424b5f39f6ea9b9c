use super::kernels::{self, ConvGeom, Padding};
use super::DiffArray;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Axis-aligned square pixel window, `size` pixels on a side, top-left at
/// `(x0, y0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, size: usize) -> Self {
        Self { x0, y0, size }
    }

    /// Center in pixel-center coordinates.
    pub fn center(&self) -> (f64, f64) {
        let half = (self.size as f64 - 1.0) / 2.0;
        (self.x0 as f64 + half, self.y0 as f64 + half)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.x0 + self.size <= w && self.y0 + self.size <= h
    }

    fn pixels(&self, w: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.size).flat_map(move |dy| {
            (0..self.size).map(move |dx| {
                let (x, y) = (self.x0 + dx, self.y0 + dy);
                (y * w + x, x, y)
            })
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    PadReplicate { x: Var, pad: usize },
    AddChannelBias { x: Var, b: Var },
    Relu { x: Var },
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Resize { x: Var, ty: Vec<(usize, usize, f64)>, tx: Vec<(usize, usize, f64)> },
    ChannelMax3 { x: Var, src: Vec<u16> },
    SelectChannels { x: Var, idx: Vec<usize> },
    Concat { xs: Vec<Var> },
    SignSplit { x: Var },
    L2Normalize { x: Var, outer: usize, len: usize, inner: usize, norms: Vec<f64>, eps: f64 },
    Softmax { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SamplePoints { map: Var, pts: Var },
    SoftArgmax { scores: Var, rects: Vec<Rect>, t: f64, probs: Vec<f64> },
    SoftAggregate { scores: Var, desc: Var, rects: Vec<Rect>, probs: Vec<f64> },
    Homography { pts: Var, m: [f64; 9] },
    RowDistances { a: Var, b: Var, pairs: Vec<(usize, usize)> },
    LinearMap { x: Var, entries: Vec<(usize, usize, f64)> },
    Reshape { x: Var },
    SliceCols { x: Var, start: usize, end: usize },
}

#[derive(Debug)]
struct Node {
    value: DiffArray,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type Grads = Vec<Option<Vec<f64>>>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradients on [`backward`](Self::backward).
    pub fn leaf(&mut self, value: DiffArray, trainable: bool) -> Var {
        let mut value = value;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DiffArray) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &DiffArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: DiffArray, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims3(&self, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v).dims3()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[n, m] => Ok((n, m)),
            s => shape_err(format!("expected [N, M], got {s:?}")),
        }
    }

    // ------------------------------------------------------------------
    // Convolution and spatial operations
    // ------------------------------------------------------------------

    /// Cross-correlation of `x: [C, H, W]` with `kernels: [K, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        let (k, kc, kh, kw) = match self.shape(kernels) {
            &[k, kc, kh, kw] => (k, kc, kh, kw),
            s => return shape_err(format!("kernels must be [K, C, kh, kw], got {s:?}")),
        };
        if kc != c {
            return shape_err(format!("input has {c} channels, kernels expect {kc}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("kernel sides must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let (oh, ow) = match (
            kernels::conv_output_size(h, kh, stride, padding),
            kernels::conv_output_size(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return shape_err(format!("{kh}x{kw} kernel does not fit {h}x{w} input")),
        };
        let geom = ConvGeom {
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad: padding.amount(kh).max(padding.amount(kw)),
            oh,
            ow,
        };
        if kh != kw && padding == Padding::Same {
            return shape_err("same padding requires square kernels");
        }
        let out = kernels::conv_forward(self.data(x), self.data(kernels), &geom);
        let value = DiffArray::new([k, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, k: kernels, geom }, &[x, kernels]))
    }

    /// Pads every channel by repeating its border pixels.
    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x);
        let value = DiffArray::from_fn3(c, ph, pw, |ci, y, xx| {
            let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
            let sx = (xx as isize - pad as isize).clamp(0, w as isize - 1) as usize;
            src.at3(ci, sy, sx)
        });
        Ok(self.push(value, Op::PadReplicate { x, pad }, &[x]))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if self.value(bias).len() != c {
            return shape_err(format!("bias of length {} for {c} channels", self.value(bias).len()));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for (ci, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[ci]);
        }
        let value = DiffArray::new([c, h, w], out)?;
        Ok(self.push(value, Op::AddChannelBias { x, b: bias }, &[x, bias]))
    }

    /// Per-channel standardisation over the spatial extent of one map.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        let n = (h * w) as f64;
        let mut out = self.data(x).to_vec();
        let mut inv_std = Vec::with_capacity(c);
        for plane in out.chunks_mut(h * w) {
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let value = DiffArray::new([c, h, w], out)?;
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// `gamma[c] * x + beta[c]` per channel.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err("affine parameters must have one entry per channel");
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = self.data(x).to_vec();
        for (ci, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v = g[ci] * *v + b[ci]);
        }
        let value = DiffArray::new([c, h, w], out)?;
        Ok(self.push(value, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Align-corners bilinear resize of a `[C, H, W]` map.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("resize target must be non-empty".into()));
        }
        let ty = kernels::resize_taps(h, out_h);
        let tx = kernels::resize_taps(w, out_w);
        let src = self.value(x);
        let value = DiffArray::from_fn3(c, out_h, out_w, |ci, y, xx| {
            let (y0, y1, fy) = ty[y];
            let (x0, x1, fx) = tx[xx];
            let top = (1.0 - fx) * src.at3(ci, y0, x0) + fx * src.at3(ci, y0, x1);
            let bot = (1.0 - fx) * src.at3(ci, y1, x0) + fx * src.at3(ci, y1, x1);
            (1.0 - fy) * top + fy * bot
        });
        Ok(self.push(value, Op::Resize { x, ty, tx }, &[x]))
    }

    /// Cyclic channel max-pool: output channel `k` is the elementwise max of
    /// input channels `2k`, `2k + 1` and `(2k + 2) mod C`.
    pub fn channel_max3(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if c % 2 != 0 || c < 4 {
            return shape_err(format!("cyclic pooling needs an even channel count >= 4, got {c}"));
        }
        let plane = h * w;
        let data = self.data(x);
        let mut out = Vec::with_capacity(c / 2 * plane);
        let mut src = Vec::with_capacity(c / 2 * plane);
        for k in 0..c / 2 {
            let mut cand = [2 * k, 2 * k + 1, (2 * k + 2) % c];
            cand.sort_unstable();
            for p in 0..plane {
                let mut best = cand[0];
                for &ch in &cand[1..] {
                    if data[ch * plane + p] > data[best * plane + p] {
                        best = ch;
                    }
                }
                out.push(data[best * plane + p]);
                src.push(best as u16);
            }
        }
        let value = DiffArray::new([c / 2, h, w], out)?;
        Ok(self.push(value, Op::ChannelMax3 { x, src }, &[x]))
    }

    pub fn select_channels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return shape_err(format!("channel {bad} out of range for {c} channels"));
        }
        let plane = h * w;
        let data = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * plane);
        for &i in idx {
            out.extend_from_slice(&data[i * plane..(i + 1) * plane]);
        }
        let value = DiffArray::new([idx.len(), h, w], out)?;
        Ok(self.push(value, Op::SelectChannels { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concatenation of zero arrays");
        };
        let (_, h, w) = self.dims3(first)?;
        let mut total = 0;
        let mut out = Vec::new();
        for &v in xs {
            let (c, vh, vw) = self.dims3(v)?;
            if (vh, vw) != (h, w) {
                return shape_err(format!("cannot concatenate {vh}x{vw} with {h}x{w}"));
            }
            total += c;
            out.extend_from_slice(self.data(v));
        }
        let value = DiffArray::new([total, h, w], out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, xs))
    }

    /// Per channel `r`, emits `[h_r, max(h_r, 0), -min(h_r, 0)]`.
    pub fn sign_split(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        let plane = h * w;
        let data = self.data(x);
        let mut out = Vec::with_capacity(3 * c * plane);
        for ch in data.chunks(plane) {
            out.extend_from_slice(ch);
            out.extend(ch.iter().map(|v| v.max(0.0)));
            out.extend(ch.iter().map(|v| -v.min(0.0)));
        }
        let value = DiffArray::new([3 * c, h, w], out)?;
        Ok(self.push(value, Op::SignSplit { x }, &[x]))
    }

    // ------------------------------------------------------------------
    // Normalisation
    // ------------------------------------------------------------------

    fn l2_normalize_strided(&mut self, x: Var, outer: usize, len: usize, inner: usize, eps: f64) -> Var {
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let sq: f64 = (0..len).map(|j| out[base + j * inner].powi(2)).sum();
                let n = sq.sqrt().max(eps);
                for j in 0..len {
                    out[base + j * inner] /= n;
                }
                norms.push(n);
            }
        }
        let value = DiffArray::new(self.shape(x).to_vec(), out).expect("shape preserved");
        self.push(value, Op::L2Normalize { x, outer, len, inner, norms, eps }, &[x])
    }

    /// Scales the whole array to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let n = self.value(x).len();
        self.l2_normalize_strided(x, 1, n, 1, eps)
    }

    /// Normalises each row of an `[N, D]` array.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        Ok(self.l2_normalize_strided(x, n, d, 1, eps))
    }

    /// Normalises the channel vector at every pixel of a `[C, H, W]` map.
    pub fn l2_normalize_channels(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        Ok(self.l2_normalize_strided(x, 1, c, h * w, eps))
    }

    /// Softmax over all elements.
    pub fn softmax(&mut self, x: Var) -> Var {
        let data = self.data(x);
        let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = data.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= s);
        let value = DiffArray::new(self.shape(x).to_vec(), out).expect("shape preserved");
        self.push(value, Op::Softmax { x }, &[x])
    }

    // ------------------------------------------------------------------
    // Elementwise and reductions
    // ------------------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let value = DiffArray::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|v| f(*v)).collect();
        let value = DiffArray::new(self.shape(x).to_vec(), out).expect("shape preserved");
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(DiffArray::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push(DiffArray::scalar(m), Op::Mean { x }, &[x])
    }

    /// Sum of several scalars (or same-shape arrays).
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("sum of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Columns `start..end` of an `[N, M]` array.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims2(x)?;
        if start >= end || end > m {
            return shape_err(format!("column range {start}..{end} invalid for width {m}"));
        }
        let data = self.data(x);
        let out = (0..n).flat_map(|r| data[r * m + start..r * m + end].iter().copied()).collect();
        let value = DiffArray::new([n, end - start], out)?;
        Ok(self.push(value, Op::SliceCols { x, start, end }, &[x]))
    }

    /// `y[o] = sum w * x[i]` over sparse `(o, i, w)` entries.
    pub fn linear_map(&mut self, x: Var, entries: Vec<(usize, usize, f64)>, out_shape: &[usize]) -> Result<Var> {
        let n_out: usize = out_shape.iter().product();
        let n_in = self.value(x).len();
        if entries.iter().any(|&(o, i, _)| o >= n_out || i >= n_in) {
            return shape_err("linear map entry out of range");
        }
        let data = self.data(x);
        let mut out = vec![0.0; n_out];
        for &(o, i, w) in &entries {
            out[o] += w * data[i];
        }
        let value = DiffArray::new(out_shape.to_vec(), out)?;
        Ok(self.push(value, Op::LinearMap { x, entries }, &[x]))
    }

    // ------------------------------------------------------------------
    // Point and window operations
    // ------------------------------------------------------------------

    /// Bilinear samples of a `[C, H, W]` map at `pts: [N, 2]` (x, y) giving
    /// `[N, C]`; differentiable in both the map and the coordinates.
    pub fn sample_points(&mut self, map: Var, pts: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(map)?;
        let (n, two) = self.dims2(pts)?;
        if two != 2 {
            return shape_err("points must be [N, 2]");
        }
        let p = self.data(pts);
        let tol = 1e-9;
        for i in 0..n {
            let (x, y) = (p[2 * i], p[2 * i + 1]);
            if !(x >= -tol && x <= w as f64 - 1.0 + tol && y >= -tol && y <= h as f64 - 1.0 + tol) {
                return Err(Error::InvalidArgument(format!(
                    "sample point ({x}, {y}) outside {w}x{h} map"
                )));
            }
        }
        let m = self.value(map);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let (x0, x1, fx) = kernels::point_taps(p[2 * i], w);
            let (y0, y1, fy) = kernels::point_taps(p[2 * i + 1], h);
            for ch in 0..c {
                let top = (1.0 - fx) * m.at3(ch, y0, x0) + fx * m.at3(ch, y0, x1);
                let bot = (1.0 - fx) * m.at3(ch, y1, x0) + fx * m.at3(ch, y1, x1);
                out.push((1.0 - fy) * top + fy * bot);
            }
        }
        let value = DiffArray::new([n, c], out)?;
        Ok(self.push(value, Op::SamplePoints { map, pts }, &[map, pts]))
    }

    fn check_rects(&self, h: usize, w: usize, rects: &[Rect]) -> Result<()> {
        if let Some(r) = rects.iter().find(|r| !r.fits(h, w) || r.size == 0) {
            return shape_err(format!("window {r:?} outside {w}x{h} map"));
        }
        Ok(())
    }

    /// Expected `(x, y)` position under `softmax(t * score)` inside each
    /// window of a `[1, H, W]` score map; returns `[N, 2]` in image coordinates.
    pub fn soft_argmax_windows(&mut self, scores: Var, rects: &[Rect], t: f64) -> Result<Var> {
        let (c, h, w) = self.dims3(scores)?;
        if c != 1 {
            return shape_err("soft-argmax expects a single-channel map");
        }
        self.check_rects(h, w, rects)?;
        let r = self.data(scores);
        let mut probs = Vec::new();
        let mut out = Vec::with_capacity(2 * rects.len());
        for rect in rects {
            let start = probs.len();
            let m = rect.pixels(w).map(|(i, _, _)| t * r[i]).fold(f64::NEG_INFINITY, f64::max);
            probs.extend(rect.pixels(w).map(|(i, _, _)| (t * r[i] - m).exp()));
            let z: f64 = probs[start..].iter().sum();
            let (mut u, mut v) = (0.0, 0.0);
            for (p, (_, x, y)) in probs[start..].iter_mut().zip(rect.pixels(w)) {
                *p /= z;
                u += *p * x as f64;
                v += *p * y as f64;
            }
            out.push(u);
            out.push(v);
        }
        let value = DiffArray::new([rects.len(), 2], out)?;
        let op = Op::SoftArgmax {
            scores,
            rects: rects.to_vec(),
            t,
            probs,
        };
        Ok(self.push(value, op, &[scores]))
    }

    /// Score-weighted window aggregation. With `p = softmax(r)` over each
    /// window, row `n` of the `[N, 1 + D]` result is
    /// `[sum r p, sum d p]` (the descriptor part is not normalised).
    pub fn soft_aggregate_windows(&mut self, scores: Var, desc: Var, rects: &[Rect]) -> Result<Var> {
        let (c, h, w) = self.dims3(scores)?;
        let (d, dh, dw) = self.dims3(desc)?;
        if c != 1 || (dh, dw) != (h, w) {
            return shape_err("soft aggregation needs a [1,H,W] score map and a [D,H,W] descriptor map");
        }
        self.check_rects(h, w, rects)?;
        let r = self.data(scores);
        let dm = self.data(desc);
        let plane = h * w;
        let mut probs = Vec::new();
        let mut out = Vec::with_capacity((1 + d) * rects.len());
        for rect in rects {
            let start = probs.len();
            let m = rect.pixels(w).map(|(i, _, _)| r[i]).fold(f64::NEG_INFINITY, f64::max);
            probs.extend(rect.pixels(w).map(|(i, _, _)| (r[i] - m).exp()));
            let z: f64 = probs[start..].iter().sum();
            probs[start..].iter_mut().for_each(|p| *p /= z);
            let mut row = vec![0.0; 1 + d];
            for (p, (i, _, _)) in probs[start..].iter().zip(rect.pixels(w)) {
                row[0] += p * r[i];
                for ch in 0..d {
                    row[1 + ch] += p * dm[ch * plane + i];
                }
            }
            out.extend(row);
        }
        let value = DiffArray::new([rects.len(), 1 + d], out)?;
        let op = Op::SoftAggregate {
            scores,
            desc,
            rects: rects.to_vec(),
            probs,
        };
        Ok(self.push(value, op, &[scores, desc]))
    }

    /// Projective transform of `[N, 2]` points by the row-major 3x3 `m`.
    pub fn apply_homography(&mut self, pts: Var, m: [f64; 9]) -> Result<Var> {
        let (n, two) = self.dims2(pts)?;
        if two != 2 {
            return shape_err("points must be [N, 2]");
        }
        let p = self.data(pts);
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let (x, y) = (p[2 * i], p[2 * i + 1]);
            let wz = m[6] * x + m[7] * y + m[8];
            out.push((m[0] * x + m[1] * y + m[2]) / wz);
            out.push((m[3] * x + m[4] * y + m[5]) / wz);
        }
        let value = DiffArray::new([n, 2], out)?;
        Ok(self.push(value, Op::Homography { pts, m }, &[pts]))
    }

    /// Euclidean distances `|a[i] - b[j]|` for each `(i, j)` in `pairs`.
    pub fn row_distances(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (na, da) = self.dims2(a)?;
        let (nb, db) = self.dims2(b)?;
        if da != db {
            return shape_err(format!("row widths differ: {da} vs {db}"));
        }
        if pairs.iter().any(|&(i, j)| i >= na || j >= nb) {
            return shape_err("row index out of range");
        }
        let (x, y) = (self.data(a), self.data(b));
        let out = pairs
            .iter()
            .map(|&(i, j)| {
                x[i * da..(i + 1) * da]
                    .iter()
                    .zip(&y[j * da..(j + 1) * da])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let value = DiffArray::new([pairs.len()], out)?;
        let op = Op::RowDistances {
            a,
            b,
            pairs: pairs.to_vec(),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    // ------------------------------------------------------------------
    // Reverse pass
    // ------------------------------------------------------------------

    /// Back-propagates from a scalar loss, adding into leaf gradient slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.backward_seeded(vec![(loss, vec![1.0])])
    }

    /// Back-propagates externally supplied output gradients.
    pub fn backward_seeded(&mut self, seeds: Vec<(Var, Vec<f64>)>) -> Result<()> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        let mut grads: Grads = vec![None; top + 1];
        for (v, g) in seeds {
            if g.len() != self.value(v).len() {
                return shape_err("seed gradient has the wrong length");
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        let mut leaf_grads = Vec::new();
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut Grads, v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add_into(&self, grads: &mut Grads, v: Var, g: impl IntoIterator<Item = f64>) {
        if let Some(s) = self.slot(grads, v) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut Grads) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom } => {
                let (xd, kd) = (self.data(*x), self.data(*k));
                let mut dx = self.slot(grads, *x).map(std::mem::take);
                let mut dk = self.slot(grads, *k).map(std::mem::take);
                kernels::conv_backward(xd, kd, g, geom, dx.as_deref_mut(), dk.as_deref_mut());
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dk) = dk {
                    grads[k.0] = Some(dk);
                }
            }
            Op::PadReplicate { x, pad } => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                if let Some(dx) = self.slot(grads, *x) {
                    for ci in 0..c {
                        for y in 0..ph {
                            let sy = (y as isize - *pad as isize).clamp(0, h as isize - 1) as usize;
                            for xx in 0..pw {
                                let sx = (xx as isize - *pad as isize).clamp(0, w as isize - 1) as usize;
                                dx[(ci * h + sy) * w + sx] += g[(ci * ph + y) * pw + xx];
                            }
                        }
                    }
                }
            }
            Op::AddChannelBias { x, b } => {
                self.add_into(grads, *x, g.iter().copied());
                let c = self.value(*b).len();
                let plane = g.len() / c;
                self.add_into(grads, *b, g.chunks(plane).map(|p| p.iter().sum::<f64>()));
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                self.add_into(grads, *x, g.iter().zip(xd).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }));
            }
            Op::InstanceNorm { x, inv_std } => {
                let plane = g.len() / inv_std.len();
                let n = plane as f64;
                let y = out.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (ci, inv) in inv_std.iter().enumerate() {
                        let r = ci * plane..(ci + 1) * plane;
                        let (gp, yp) = (&g[r.clone()], &y[r.clone()]);
                        let sg: f64 = gp.iter().sum();
                        let sgy: f64 = gp.iter().zip(yp).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dx[r].iter_mut().zip(gp).zip(yp) {
                            *d += inv / n * (n * gv - sg - yv * sgy);
                        }
                    }
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let gm = self.data(*gamma);
                let c = gm.len();
                let plane = g.len() / c;
                let xd = self.data(*x);
                self.add_into(grads, *x, g.iter().enumerate().map(|(j, gv)| gv * gm[j / plane]));
                self.add_into(
                    grads,
                    *gamma,
                    (0..c).map(|ci| {
                        let r = ci * plane..(ci + 1) * plane;
                        g[r.clone()].iter().zip(&xd[r]).map(|(a, b)| a * b).sum::<f64>()
                    }),
                );
                self.add_into(grads, *beta, g.chunks(plane).map(|p| p.iter().sum::<f64>()));
            }
            Op::Resize { x, ty, tx } => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let (oh, ow) = (ty.len(), tx.len());
                if let Some(dx) = self.slot(grads, *x) {
                    for ci in 0..c {
                        let base = ci * h * w;
                        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = g[(ci * oh + y) * ow + xx];
                                dx[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                dx[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                                dx[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                                dx[base + y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::ChannelMax3 { x, src } => {
                let (_, h, w) = out.dims3().expect("rank 3");
                let plane = h * w;
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, (gv, s)) in g.iter().zip(src).enumerate() {
                        dx[*s as usize * plane + j % plane] += gv;
                    }
                }
            }
            Op::SelectChannels { x, idx } => {
                let plane = g.len() / idx.len().max(1);
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, &ch) in idx.iter().enumerate() {
                        for p in 0..plane {
                            dx[ch * plane + p] += g[k * plane + p];
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let mut off = 0;
                for v in xs {
                    let n = self.value(*v).len();
                    self.add_into(grads, *v, g[off..off + n].iter().copied());
                    off += n;
                }
            }
            Op::SignSplit { x } => {
                let xd = self.data(*x);
                let plane = out.shape()[1] * out.shape()[2];
                if let Some(dx) = self.slot(grads, *x) {
                    for (ci, (dxp, xp)) in dx.chunks_mut(plane).zip(xd.chunks(plane)).enumerate() {
                        let b = 3 * ci * plane;
                        for p in 0..plane {
                            let mut d = g[b + p];
                            if xp[p] > 0.0 {
                                d += g[b + plane + p];
                            } else if xp[p] < 0.0 {
                                d -= g[b + 2 * plane + p];
                            }
                            dxp[p] += d;
                        }
                    }
                }
            }
            Op::L2Normalize { x, outer, len, inner, norms, eps } => {
                let y = out.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let n = norms[o * inner + i];
                            let idx = (0..*len).map(|j| base + j * inner);
                            if n > *eps {
                                let gy: f64 = idx.clone().map(|k| g[k] * y[k]).sum();
                                for k in idx {
                                    dx[k] += (g[k] - y[k] * gy) / n;
                                }
                            } else {
                                for k in idx {
                                    dx[k] += g[k] / n;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = out.data();
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                self.add_into(grads, *x, g.iter().zip(y).map(|(gv, yv)| yv * (gv - gy)));
            }
            Op::Add { a, b } => {
                self.add_into(grads, *a, g.iter().copied());
                self.add_into(grads, *b, g.iter().copied());
            }
            Op::Sub { a, b } => {
                self.add_into(grads, *a, g.iter().copied());
                self.add_into(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga: Vec<f64> = g.iter().zip(bd).map(|(g, v)| g * v).collect();
                let gb: Vec<f64> = g.iter().zip(ad).map(|(g, v)| g * v).collect();
                self.add_into(grads, *a, ga);
                self.add_into(grads, *b, gb);
            }
            Op::Scale { x, c } => self.add_into(grads, *x, g.iter().map(|v| c * v)),
            Op::AddScalar { x } | Op::Reshape { x } => self.add_into(grads, *x, g.iter().copied()),
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.add_into(grads, *x, std::iter::repeat(g[0]).take(n));
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                self.add_into(grads, *x, std::iter::repeat(g[0] / n as f64).take(n));
            }
            Op::SliceCols { x, start, end } => {
                let m = self.shape(*x)[1];
                let width = end - start;
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, row) in g.chunks(width).enumerate() {
                        for (k, gv) in row.iter().enumerate() {
                            dx[r * m + start + k] += gv;
                        }
                    }
                }
            }
            Op::LinearMap { x, entries } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for &(o, i, w) in entries {
                        dx[i] += w * g[o];
                    }
                }
            }
            Op::SamplePoints { map, pts } => self.propagate_sample(*map, *pts, g, grads),
            Op::SoftArgmax { scores, rects, t, probs } => {
                let w = self.shape(*scores)[2];
                let uv = out.data();
                if let Some(dr) = self.slot(grads, *scores) {
                    let mut k = 0;
                    for (n, rect) in rects.iter().enumerate() {
                        let (u, v) = (uv[2 * n], uv[2 * n + 1]);
                        let (gu, gv) = (g[2 * n], g[2 * n + 1]);
                        for (i, x, y) in rect.pixels(w) {
                            dr[i] += t * probs[k] * (gu * (x as f64 - u) + gv * (y as f64 - v));
                            k += 1;
                        }
                    }
                }
            }
            Op::SoftAggregate { scores, desc, rects, probs } => {
                let w = self.shape(*scores)[2];
                let plane = self.shape(*scores)[1] * w;
                let d = self.shape(*desc)[0];
                let (r, dm, agg) = (self.data(*scores), self.data(*desc), out.data());
                if let Some(dr) = self.slot(grads, *scores) {
                    let mut k = 0;
                    for (n, rect) in rects.iter().enumerate() {
                        let row = &agg[n * (1 + d)..(n + 1) * (1 + d)];
                        let grow = &g[n * (1 + d)..(n + 1) * (1 + d)];
                        for (i, _, _) in rect.pixels(w) {
                            let p = probs[k];
                            let mut acc = grow[0] * (1.0 + r[i] - row[0]);
                            for ch in 0..d {
                                acc += grow[1 + ch] * (dm[ch * plane + i] - row[1 + ch]);
                            }
                            dr[i] += p * acc;
                            k += 1;
                        }
                    }
                }
                if let Some(dd) = self.slot(grads, *desc) {
                    let mut k = 0;
                    for (n, rect) in rects.iter().enumerate() {
                        let grow = &g[n * (1 + d)..(n + 1) * (1 + d)];
                        for (i, _, _) in rect.pixels(w) {
                            for ch in 0..d {
                                dd[ch * plane + i] += probs[k] * grow[1 + ch];
                            }
                            k += 1;
                        }
                    }
                }
            }
            Op::Homography { pts, m } => {
                let p = self.data(*pts);
                let q = out.data();
                if let Some(dp) = self.slot(grads, *pts) {
                    for n in 0..q.len() / 2 {
                        let (x, y) = (p[2 * n], p[2 * n + 1]);
                        let (xp, yp) = (q[2 * n], q[2 * n + 1]);
                        let wz = m[6] * x + m[7] * y + m[8];
                        let (gx, gy) = (g[2 * n], g[2 * n + 1]);
                        dp[2 * n] += (gx * (m[0] - xp * m[6]) + gy * (m[3] - yp * m[6])) / wz;
                        dp[2 * n + 1] += (gx * (m[1] - xp * m[7]) + gy * (m[4] - yp * m[7])) / wz;
                    }
                }
            }
            Op::RowDistances { a, b, pairs } => {
                let d = self.shape(*a)[1];
                let (x, y) = (self.data(*a), self.data(*b));
                let dist = out.data();
                let coef: Vec<f64> = pairs
                    .iter()
                    .enumerate()
                    .map(|(n, _)| if dist[n] > 0.0 { g[n] / dist[n] } else { 0.0 })
                    .collect();
                if let Some(da) = self.slot(grads, *a) {
                    for (n, &(i, j)) in pairs.iter().enumerate() {
                        for k in 0..d {
                            da[i * d + k] += coef[n] * (x[i * d + k] - y[j * d + k]);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (n, &(i, j)) in pairs.iter().enumerate() {
                        for k in 0..d {
                            db[j * d + k] -= coef[n] * (x[i * d + k] - y[j * d + k]);
                        }
                    }
                }
            }
        }
    }

    fn propagate_sample(&self, map: Var, pts: Var, g: &[f64], grads: &mut Grads) {
        let m = self.value(map);
        let (c, h, w) = m.dims3().expect("rank 3");
        let p = self.data(pts);
        let n = p.len() / 2;
        if let Some(dm) = self.slot(grads, map) {
            for i in 0..n {
                let (x0, x1, fx) = kernels::point_taps(p[2 * i], w);
                let (y0, y1, fy) = kernels::point_taps(p[2 * i + 1], h);
                for ch in 0..c {
                    let gv = g[i * c + ch];
                    let base = ch * h * w;
                    dm[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    dm[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                    dm[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                    dm[base + y1 * w + x1] += gv * fy * fx;
                }
            }
        }
        if let Some(dp) = self.slot(grads, pts) {
            for i in 0..n {
                let (x0, x1, fx) = kernels::point_taps(p[2 * i], w);
                let (y0, y1, fy) = kernels::point_taps(p[2 * i + 1], h);
                for ch in 0..c {
                    let gv = g[i * c + ch];
                    let (a, b) = (m.at3(ch, y0, x0), m.at3(ch, y0, x1));
                    let (cc, d) = (m.at3(ch, y1, x0), m.at3(ch, y1, x1));
                    let dvdx = if x1 != x0 { (1.0 - fy) * (b - a) + fy * (d - cc) } else { 0.0 };
                    let dvdy = if y1 != y0 { (1.0 - fx) * (cc - a) + fx * (d - b) } else { 0.0 };
                    dp[2 * i] += gv * dvdx;
                    dp[2 * i + 1] += gv * dvdy;
                }
            }
        }
    }
}
