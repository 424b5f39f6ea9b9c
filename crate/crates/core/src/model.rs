//! Named parameters, their initialisation, and binding onto a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::{DiffArray, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gabor::{self, FilterBank, FilterKind};

/// The two independently optimised halves of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Detector,
    Descriptor,
}

impl Group {
    pub fn of(name: &str) -> Option<Group> {
        if name.starts_with("det.") {
            Some(Group::Detector)
        } else if name.starts_with("desc.") {
            Some(Group::Descriptor)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: DiffArray,
    pub trainable: bool,
}

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: DiffArray, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`. Trainable parameters of the groups
    /// in `active` become gradient-carrying leaves; everything else is a
    /// constant.
    pub fn bind(&self, tape: &mut Tape, active: &[Group]) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let live = p.trainable && Group::of(name).is_some_and(|g| active.contains(&g));
                (name.clone(), tape.leaf(p.value.clone(), live))
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {name:?}")))
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| tape.grad(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }
}

/// Kaiming-style uniform bound for a layer with `fan_in` inputs.
fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> DiffArray {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    DiffArray::new(shape.to_vec(), data).expect("shape product")
}

fn conv_weight(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> DiffArray {
    uniform(rng, &[out, inp, k, k], fan_in_bound(inp * k * k))
}

/// Encoder stage widths `(in, out, stride)` for a block with `cin` channels.
pub fn encoder_stages(cfg: &ModelConfig) -> [(usize, usize, usize); 4] {
    let (w, cb) = (cfg.width, cfg.block_channels());
    [(cb, w, 1), (w, w, 2), (w, 2 * w, 2), (2 * w, 2 * w, 1)]
}

/// Fresh parameters for `cfg`, fully determined by `seed`.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::default();
    let size = cfg.gabor.size;
    let filter = match cfg.filter {
        FilterKind::Learned => uniform(&mut rng, &[size, size], fan_in_bound(size * size)),
        kind => gabor::base_filter(kind, &cfg.gabor)?,
    };
    p.insert("desc.filter", filter, cfg.filter == FilterKind::Learned);
    for (i, (cin, cout, _)) in encoder_stages(cfg).into_iter().enumerate() {
        p.insert(format!("desc.conv{}.w", i + 1), conv_weight(&mut rng, cout, cin, 3), true);
        p.insert(format!("desc.norm{}.gamma", i + 1), DiffArray::filled([cout], 1.0), true);
        p.insert(format!("desc.norm{}.beta", i + 1), DiffArray::zeros([cout]), true);
    }
    let fused = cfg.pyramid_levels() * 2 * cfg.width;
    p.insert("desc.fuse.w", conv_weight(&mut rng, cfg.dim, fused, 1), true);
    p.insert("desc.fuse.b", DiffArray::zeros([cfg.dim]), true);
    let dw = cfg.detector_width;
    for (i, (cin, cout)) in [(crate::detector::FEATURES, dw), (dw, dw), (dw, 1)].into_iter().enumerate() {
        p.insert(format!("det.conv{}.w", i + 1), conv_weight(&mut rng, cout, cin, 3), true);
        p.insert(format!("det.conv{}.b", i + 1), DiffArray::zeros([cout]), true);
    }
    Ok(p)
}

/// A configured network: architecture, parameters and the derived filter
/// bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    bank: FilterBank,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_weights(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Wraps existing parameters after checking they fit `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = init_weights(&config, 0)?;
        for (name, p) in reference.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {name:?}")))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name:?} has shape {:?}, architecture expects {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if params.len() != reference.len() {
            return Err(Error::Incompatible("unexpected extra parameters".into()));
        }
        let bank = FilterBank::new(config.gabor.size);
        Ok(Self { config, params, bank })
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn bind(&self, tape: &mut Tape, active: &[Group]) -> Bound {
        self.params.bind(tape, active)
    }
}
