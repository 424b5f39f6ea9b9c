//! File formats: `HDDW` weight checkpoints, `HDDN` feature files, PGM/PPM
//! images and CSV tables.
//!
//! All binary values are little-endian.
//!
//! ```text
//! HDDW: b"HDDW" u16:version { u16:name_len name u8:rank u32*rank f64*prod(dims) }*
//! HDDN: b"HDDN" u16:version u32:count u32:dim { f32:x f32:y f32:score f32*dim }*
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::array::DiffArray;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gabor::{FilterKind, GaborParams};
use crate::model::{Model, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDDW";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const FEATURES_MAGIC: &[u8; 4] = b"HDDN";
pub const FEATURES_VERSION: u16 = 1;

fn format_err<T>(kind: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { kind, msg: msg.into() })
}

fn read_exact<const N: usize>(r: &mut impl Read, kind: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).or_else(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(kind, "truncated file"),
        _ => Err(e.into()),
    })?;
    Ok(buf)
}

/// Reads one byte, or `None` at a clean end of stream.
fn read_opt_byte(r: &mut impl Read) -> Result<Option<u8>> {
    let mut b = [0u8; 1];
    loop {
        match r.read(&mut b) {
            Ok(0) => return Ok(None),
            Ok(_) => return Ok(Some(b[0])),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

fn check_header(r: &mut impl Read, magic: &[u8; 4], version: u16, kind: &'static str) -> Result<()> {
    let m = read_exact::<4>(r, kind)?;
    if &m != magic {
        return format_err(kind, format!("bad magic {m:?}"));
    }
    let found = u16::from_le_bytes(read_exact::<2>(r, kind)?);
    if found != version {
        return Err(Error::Version {
            kind,
            found,
            expected: version,
        });
    }
    Ok(())
}

/// Writes named arrays as an `HDDW` stream.
pub fn write_records(w: &mut impl Write, records: &[(String, DiffArray)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, arr) in records {
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("name too long: {name}")))?;
        let rank = u8::try_from(arr.shape().len()).map_err(|_| Error::InvalidArgument("rank above 255".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &d in arr.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument("dimension above u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in arr.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads an `HDDW` stream back into named arrays, in file order.
pub fn read_records(r: &mut impl Read) -> Result<Vec<(String, DiffArray)>> {
    const KIND: &str = "checkpoint";
    check_header(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, KIND)?;
    let mut out = Vec::new();
    while let Some(lo) = read_opt_byte(r)? {
        let hi = read_exact::<1>(r, KIND)?[0];
        let len = u16::from_le_bytes([lo, hi]) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).or_else(|_| format_err(KIND, "truncated name"))?;
        let name = String::from_utf8(name).or_else(|_| format_err(KIND, "name is not UTF-8"))?;
        let rank = read_exact::<1>(r, KIND)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact::<4>(r, KIND)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact::<8>(r, KIND)?));
        }
        out.push((name, DiffArray::new(shape, data)?));
    }
    Ok(out)
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Optimisation steps completed.
    pub step: usize,
    /// Momentum buffers by parameter name.
    pub momentum: BTreeMap<String, Vec<f64>>,
}

fn arch_records(cfg: &ModelConfig) -> Vec<(String, DiffArray)> {
    let g = &cfg.gabor;
    let vec = |v: Vec<f64>| DiffArray::new([v.len()], v).expect("rank 1");
    vec![
        ("arch.gabor".into(), vec(vec![g.size as f64, g.sigma, g.lambda, g.gamma, g.psi])),
        ("arch.filter".into(), vec(vec![cfg.filter.code() as f64])),
        ("arch.flags".into(), vec(vec![cfg.sign_split as u8 as f64, cfg.multiscale as u8 as f64])),
        (
            "arch.dims".into(),
            vec(vec![cfg.dim as f64, cfg.width as f64, cfg.detector_width as f64]),
        ),
    ]
}

fn arch_from(records: &BTreeMap<&str, &DiffArray>) -> Result<ModelConfig> {
    let get = |name: &str, len: usize| -> Result<&[f64]> {
        match records.get(name) {
            Some(a) if a.len() == len => Ok(a.data()),
            Some(_) => format_err("checkpoint", format!("{name} has the wrong length")),
            None => Err(Error::Incompatible(format!("checkpoint lacks {name}"))),
        }
    };
    let g = get("arch.gabor", 5)?;
    let filter = FilterKind::from_code(get("arch.filter", 1)?[0] as u8)
        .ok_or_else(|| Error::Incompatible("unknown filter kind".into()))?;
    let flags = get("arch.flags", 2)?;
    let dims = get("arch.dims", 3)?;
    Ok(ModelConfig {
        gabor: GaborParams {
            size: g[0] as usize,
            sigma: g[1],
            lambda: g[2],
            gamma: g[3],
            psi: g[4],
        },
        filter,
        sign_split: flags[0] != 0.0,
        multiscale: flags[1] != 0.0,
        dim: dims[0] as usize,
        width: dims[1] as usize,
        detector_width: dims[2] as usize,
    })
}

impl Checkpoint {
    pub fn fresh(model: Model) -> Self {
        Self {
            model,
            step: 0,
            momentum: BTreeMap::new(),
        }
    }

    pub fn to_records(&self) -> Vec<(String, DiffArray)> {
        let mut out = arch_records(&self.model.config);
        out.push(("train.step".into(), DiffArray::new([1], vec![self.step as f64]).expect("rank 1")));
        for (name, p) in self.model.params.iter() {
            out.push((name.to_string(), p.value.clone()));
        }
        for (name, m) in &self.momentum {
            out.push((format!("opt.{name}"), DiffArray::new([m.len()], m.clone()).expect("rank 1")));
        }
        out
    }

    pub fn from_records(records: Vec<(String, DiffArray)>) -> Result<Self> {
        let config = {
            let index: BTreeMap<&str, &DiffArray> = records.iter().map(|(n, a)| (n.as_str(), a)).collect();
            arch_from(&index)?
        };
        let mut params = ParamStore::default();
        let mut momentum = BTreeMap::new();
        let mut step = 0;
        for (name, arr) in records {
            if name.starts_with("arch.") {
                continue;
            }
            if name == "train.step" {
                step = arr.data().first().copied().unwrap_or(0.0) as usize;
            } else if let Some(p) = name.strip_prefix("opt.") {
                momentum.insert(p.to_string(), arr.into_data());
            } else {
                let trainable = name != "desc.filter" || config.filter == FilterKind::Learned;
                params.insert(name, arr, trainable);
            }
        }
        let model = Model::from_params(config, params)?;
        Ok(Self { model, step, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_records(&mut w, &self.to_records())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::from_records(read_records(&mut r)?)
    }
}

/// One extracted keypoint with its descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub x: f32,
    pub y: f32,
    pub score: f32,
    pub desc: Vec<f32>,
}

/// Keypoints in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub features: Vec<Feature>,
    /// How many features were asked for, when known. A set shorter than this
    /// ran out of local maxima.
    pub requested: Option<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn truncated(&self) -> bool {
        self.requested.is_some_and(|r| r > self.features.len())
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FEATURES_MAGIC)?;
        w.write_all(&FEATURES_VERSION.to_le_bytes())?;
        let count = u32::try_from(self.features.len()).map_err(|_| Error::InvalidArgument("too many features".into()))?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for f in &self.features {
            if f.desc.len() != self.dim {
                return Err(Error::Shape(format!("descriptor of length {} in a {}-d set", f.desc.len(), self.dim)));
            }
            for v in [f.x, f.y, f.score].iter().chain(&f.desc) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        const KIND: &str = "features";
        check_header(r, FEATURES_MAGIC, FEATURES_VERSION, KIND)?;
        let count = u32::from_le_bytes(read_exact::<4>(r, KIND)?) as usize;
        let dim = u32::from_le_bytes(read_exact::<4>(r, KIND)?) as usize;
        let mut f32_at = || -> Result<f32> { Ok(f32::from_le_bytes(read_exact::<4>(r, KIND)?)) };
        let mut features = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let (x, y, score) = (f32_at()?, f32_at()?, f32_at()?);
            let desc = (0..dim).map(|_| f32_at()).collect::<Result<Vec<_>>>()?;
            features.push(Feature { x, y, score, desc });
        }
        if read_opt_byte(r)?.is_some() {
            return format_err(KIND, "trailing bytes after the last feature");
        }
        Ok(Self {
            dim,
            features,
            requested: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

/// Loads a PGM/PPM (or any supported format) as a `[1, H, W]` grey image in
/// `[0, 1]`.
pub fn load_image(path: &Path) -> Result<DiffArray> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    DiffArray::new([1, h as usize, w as usize], data)
}

/// Writes a `[1, H, W]` image in `[0, 1]` as an 8-bit PGM.
pub fn save_pgm(path: &Path, img: &DiffArray) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    if c != 1 {
        return Err(Error::Shape(format!("PGM output needs one channel, got {c}")));
    }
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Pnm)?;
    Ok(())
}

/// Image files (`.pgm`, `.ppm`, `.pnm`) directly inside `dir`, sorted by
/// name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Minimal CSV writer: a header row, then rows of already-formatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
