//! Dense multi-scale descriptor: Gaussian pyramid, hand-crafted block and
//! shared-weight encoder per level, upsampling, 1x1 fusion, L2 norm.

use crate::array::{DiffArray, Padding, Tape, Var};
use crate::error::{shape_err, Result};
use crate::gabor;
use crate::model::{encoder_stages, Bound, Model};

const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

/// Normalised 5x5 Gaussian, sigma 1, as a `[1, 1, 5, 5]` kernel.
pub fn gaussian_kernel() -> DiffArray {
    let g: Vec<f64> = (-2..=2).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).collect();
    let z: f64 = g.iter().sum();
    let mut data = Vec::with_capacity(25);
    for a in &g {
        for b in &g {
            data.push(a * b / (z * z));
        }
    }
    DiffArray::new([1, 1, 5, 5], data).expect("5x5")
}

/// `levels` images, each the blurred and 2x subsampled previous one.
/// Borders replicate, so constant images stay constant.
pub fn gaussian_pyramid(tape: &mut Tape, image: Var, levels: usize) -> Result<Vec<Var>> {
    let (c, h, w) = tape.value(image).dims3()?;
    let f = 1usize << levels.saturating_sub(1);
    if c != 1 || levels == 0 || h % f != 0 || w % f != 0 {
        return shape_err(format!(
            "pyramid of {levels} levels needs a single-channel image with sides divisible by {f}, got {c}x{h}x{w}"
        ));
    }
    let g = tape.constant(gaussian_kernel());
    let mut out = vec![image];
    for _ in 1..levels {
        let prev = *out.last().expect("non-empty");
        let padded = tape.pad_replicate(prev, 2)?;
        out.push(tape.conv2d(padded, g, 2, Padding::Valid)?);
    }
    Ok(out)
}

/// The conv / instance-norm / affine / relu trunk, applied with the same
/// weights to every pyramid level. Output is `[2 * width, h / 4, w / 4]`.
pub fn encoder_stream(tape: &mut Tape, features: Var, model: &Model, bound: &Bound) -> Result<Var> {
    let mut x = features;
    for (i, (_, _, stride)) in encoder_stages(&model.config).into_iter().enumerate() {
        let w = bound.var(&format!("desc.conv{}.w", i + 1))?;
        let g = bound.var(&format!("desc.norm{}.gamma", i + 1))?;
        let b = bound.var(&format!("desc.norm{}.beta", i + 1))?;
        x = tape.conv2d(x, w, stride, Padding::Same)?;
        x = tape.instance_norm(x, NORM_EPS)?;
        x = tape.channel_affine(x, g, b)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// The 16 oriented kernels derived from the bound base filter.
pub fn block_kernels(tape: &mut Tape, model: &Model, bound: &Bound) -> Result<Var> {
    let base = bound.var("desc.filter")?;
    model.bank().kernels(tape, base)
}

/// Dense unit-norm descriptor map `[D, H, W]` of a `[1, H, W]` image.
pub fn describe(tape: &mut Tape, model: &Model, bound: &Bound, image: Var) -> Result<Var> {
    let (_, h, w) = tape.value(image).dims3()?;
    let cfg = &model.config;
    let kernels = block_kernels(tape, model, bound)?;
    let levels = gaussian_pyramid(tape, image, cfg.pyramid_levels())?;
    let mut streams = Vec::with_capacity(levels.len());
    for level in levels {
        let block = gabor::handcrafted_forward(tape, level, kernels, cfg.sign_split)?;
        let enc = encoder_stream(tape, block, model, bound)?;
        streams.push(tape.bilinear_resize(enc, h, w)?);
    }
    let cat = tape.concat_channels(&streams)?;
    let fw = bound.var("desc.fuse.w")?;
    let fb = bound.var("desc.fuse.b")?;
    let fused = tape.conv2d(cat, fw, 1, Padding::Same)?;
    let fused = tape.add_channel_bias(fused, fb)?;
    tape.l2_normalize_channels(fused, L2_EPS)
}

/// Bilinear samples of a descriptor map at `[N, 2]` points, re-normalised.
pub fn sample_descriptors(tape: &mut Tape, map: Var, pts: Var) -> Result<Var> {
    let raw = tape.sample_points(map, pts)?;
    tape.l2_normalize_rows(raw, L2_EPS)
}

/// Forward-only descriptor map of an image.
pub fn describe_image(model: &Model, image: &DiffArray) -> Result<DiffArray> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[]);
    let img = tape.constant(image.clone());
    let d = describe(&mut tape, model, &bound, img)?;
    Ok(tape.value(d).clone())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::ModelConfig;
    use crate::model::Group;

    fn random_image(h: usize, w: usize, seed: u64) -> DiffArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DiffArray::from_fn3(1, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn small() -> ModelConfig {
        ModelConfig {
            width: 4,
            dim: 6,
            detector_width: 4,
            ..Default::default()
        }
    }

    fn pyramid(image: &DiffArray, levels: usize) -> Vec<DiffArray> {
        let mut t = Tape::new();
        let i = t.constant(image.clone());
        let p = gaussian_pyramid(&mut t, i, levels).unwrap();
        p.into_iter().map(|v| t.value(v).clone()).collect()
    }

    #[test]
    fn pyramid_shapes_and_constants() {
        let p = pyramid(&DiffArray::filled([1, 96, 96], 0.3), 3);
        let shapes: Vec<_> = p.iter().map(|l| l.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 96, 96], vec![1, 48, 48], vec![1, 24, 24]]);
        for l in &p {
            assert!(l.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
        let mut t = Tape::new();
        let i = t.constant(DiffArray::zeros([1, 30, 32]));
        assert!(gaussian_pyramid(&mut t, i, 3).is_err());
    }

    #[test]
    fn pyramid_contracts_energy() {
        for seed in 0..5 {
            let mut img = random_image(32, 32, seed);
            let mean = img.data().iter().sum::<f64>() / img.len() as f64;
            img.data_mut().iter_mut().for_each(|v| *v -= mean);
            let p = pyramid(&img, 2);
            let e = |a: &DiffArray| a.data().iter().map(|v| v * v).sum::<f64>();
            assert!(e(&p[1]) <= e(&p[0]));
        }
    }

    #[test]
    fn descriptors_are_unit_norm() {
        let model = Model::new(small(), 3).unwrap();
        let d = describe_image(&model, &random_image(32, 32, 1)).unwrap();
        assert_eq!(d.shape(), &[6, 32, 32]);
        for p in 0..32 * 32 {
            let n: f64 = (0..6).map(|c| d.data()[c * 1024 + p].powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn offset_leaves_descriptors_unchanged() {
        let model = Model::new(small(), 4).unwrap();
        let img = random_image(32, 32, 2);
        let shifted = DiffArray::new([1, 32, 32], img.data().iter().map(|v| v + 0.25).collect()).unwrap();
        let (a, b) = (describe_image(&model, &img).unwrap(), describe_image(&model, &shifted).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-9, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn streams_share_weights() {
        let model = Model::new(small(), 5).unwrap();
        let mut t = Tape::new();
        let bound = model.bind(&mut t, &[Group::Descriptor]);
        let feat = t.constant(random_image(16, 16, 3).channel(0).unwrap());
        let kernels = block_kernels(&mut t, &model, &bound).unwrap();
        let block = gabor::handcrafted_forward(&mut t, feat, kernels, true).unwrap();
        let a = encoder_stream(&mut t, block, &model, &bound).unwrap();
        let b = encoder_stream(&mut t, block, &model, &bound).unwrap();
        assert_eq!(t.shape(a), &[8, 4, 4]);
        assert_eq!(t.data(a), t.data(b));
    }

    #[test]
    fn shared_weight_gradient_sums_streams() {
        let model = Model::new(small(), 6).unwrap();
        let levels: Vec<DiffArray> = [8usize, 16]
            .iter()
            .enumerate()
            .map(|(i, &s)| random_image(s, s, 10 + i as u64))
            .collect();
        let grad_of = |which: &[usize]| {
            let mut t = Tape::new();
            let bound = model.bind(&mut t, &[Group::Descriptor]);
            let kernels = block_kernels(&mut t, &model, &bound).unwrap();
            let mut outs = Vec::new();
            for &i in which {
                let x = t.constant(levels[i].clone());
                let blk = gabor::handcrafted_forward(&mut t, x, kernels, true).unwrap();
                let e = encoder_stream(&mut t, blk, &model, &bound).unwrap();
                let sq = t.square(e);
                outs.push(t.sum(sq));
            }
            let total = t.add_all(&outs).unwrap();
            t.backward(total).unwrap();
            bound.grads(&t)["desc.conv2.w"].clone()
        };
        let (both, a, b) = (grad_of(&[0, 1]), grad_of(&[0]), grad_of(&[1]));
        for i in 0..both.len() {
            assert!((both[i] - a[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_at_integers_and_midpoints() {
        let mut t = Tape::new();
        let map = DiffArray::from_fn3(3, 4, 5, |c, y, x| if x == 2 || x == 3 { [1.0, 2.0, 2.0][c] } else { (c + y * x) as f64 });
        let m = t.constant(map.clone());
        let pts = t.constant(DiffArray::new([2, 2], vec![1.0, 2.0, 2.5, 1.0]).unwrap());
        let s = sample_descriptors(&mut t, m, pts).unwrap();
        let v = t.data(s);
        let raw: Vec<f64> = (0..3).map(|c| map.at3(c, 2, 1)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for c in 0..3 {
            assert!((v[c] - raw[c] / n).abs() < 1e-15);
            assert!((v[3 + c] - [1.0, 2.0, 2.0][c] / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_bounds_sample_rejected() {
        let mut t = Tape::new();
        let m = t.constant(DiffArray::zeros([2, 4, 4]));
        let pts = t.constant(DiffArray::new([1, 2], vec![3.5, 0.0]).unwrap());
        assert!(sample_descriptors(&mut t, m, pts).is_err());
    }
}
