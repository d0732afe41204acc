//! Two-stage enhancement model: Fourier-prior visibility restoration
//! followed by event-guided structure refinement.
//!
//! Parameters live in a name-keyed store and are materialized lazily the
//! first time a forward pass asks for them, so the full parameter set is a
//! pure function of the architecture config plus the store's seed. Each
//! training step binds the store onto a fresh tape via [`Binder`].

mod blocks;
#[cfg(test)]
mod tests;
mod checkpoint;
mod nets;

pub use blocks::{
    ape_forward, eca_forward, fda_forward, residual_block_forward, transformer_attention,
    transformer_block_forward,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use nets::{full_forward, refinement_forward, visibility_forward};

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Architecture knobs. Defaults are the desk-scale configuration; unit
/// tests shrink widths and bins further.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Channel width per encoder level, shallow to deep.
    pub widths: Vec<usize>,
    /// Attention heads in the transformer blocks.
    pub heads: usize,
    /// Kernel size of the efficient-channel-attention 1D conv (odd).
    pub eca_kernel: usize,
    /// Bottleneck reduction of the channel-attention projections.
    pub ca_reduction: usize,
    /// Temporal bins of the event voxel fed to the event encoder.
    pub voxel_bins: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            widths: vec![16, 32, 64],
            heads: 1,
            eca_kernel: 3,
            ca_reduction: 4,
            voxel_bins: 32,
        }
    }
}

impl ArchConfig {
    /// Tiny config for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        ArchConfig {
            widths: vec![4, 6, 8],
            heads: 1,
            eca_kernel: 3,
            ca_reduction: 2,
            voxel_bins: 4,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("widths must be positive".into()));
        }
        if self.heads == 0 || self.widths.iter().any(|&w| w % self.heads != 0) {
            return Err(Error::InvalidArgument(
                "widths must be divisible by head count".into(),
            ));
        }
        if self.eca_kernel % 2 == 0 {
            return Err(Error::InvalidArgument("ECA kernel must be odd".into()));
        }
        if self.ca_reduction == 0 || self.voxel_bins == 0 {
            return Err(Error::InvalidArgument(
                "reduction and voxel bins must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How a parameter is filled on first touch.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in from the weight
    /// shape (all dims past the first for convolutions).
    FanIn,
    Zeros,
    Ones,
}

fn init_data<T: Scalar>(init: Init, shape: &[usize], seed: u64) -> Vec<T> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::FanIn => {
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| T::cast(rng.gen_range(-bound..bound)))
                .collect()
        }
    }
}

/// Name-keyed flat parameter storage with deterministic lazy init.
pub struct ParamStore<T: Scalar> {
    seed: u64,
    entries: RefCell<BTreeMap<String, (Vec<T>, Vec<usize>)>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn name_seed(&self, name: &str) -> u64 {
        let mut h = DefaultHasher::new();
        self.seed.hash(&mut h);
        name.hash(&mut h);
        h.finish()
    }

    /// Fetch a parameter, creating it with `init` on first touch. The
    /// stored shape is authoritative afterwards.
    pub fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<(Vec<T>, Vec<usize>)> {
        let mut entries = self.entries.borrow_mut();
        if let Some((data, stored)) = entries.get(name) {
            if stored != shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} has shape {:?}, requested {:?}",
                    name, stored, shape
                )));
            }
            return Ok((data.clone(), stored.clone()));
        }
        let data = init_data(init, shape, self.name_seed(name));
        entries.insert(name.to_string(), (data.clone(), shape.to_vec()));
        Ok((data, shape.to_vec()))
    }

    pub fn set(&self, name: &str, data: Vec<T>, shape: &[usize]) {
        self.entries
            .borrow_mut()
            .insert(name.to_string(), (data, shape.to_vec()));
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.borrow().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<(Vec<T>, Vec<usize>)> {
        self.entries.borrow().get(name).cloned()
    }

    /// Total scalar parameter count of everything materialized so far.
    pub fn param_count(&self) -> usize {
        self.entries
            .borrow()
            .values()
            .map(|(d, _)| d.len())
            .sum()
    }
}

/// One forward pass worth of parameter bindings. With a tape, every bound
/// parameter is a differentiated leaf; without one, parameters enter the
/// graph as constants (frozen inference).
pub struct Binder<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    tape: Option<Tape<T>>,
    bound: RefCell<BTreeMap<String, Tensor<T>>>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>, tape: &Tape<T>) -> Self {
        Binder {
            store,
            tape: Some(tape.clone()),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Binder {
            store,
            tape: None,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor<T>> {
        if let Some(t) = self.bound.borrow().get(name) {
            if t.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} bound with shape {:?}, requested {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            return Ok(t.clone());
        }
        let (data, stored) = self.store.get_or_init(name, shape, init)?;
        let t = match &self.tape {
            Some(tape) => Tensor::leaf(data, &stored, tape)?,
            None => Tensor::from_vec(data, &stored)?,
        };
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// All parameters touched by this pass, in name order.
    pub fn bound(&self) -> Vec<(String, Tensor<T>)> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Materialize every parameter of the full model at `cfg` without running
/// real data through it, and return the total count.
pub fn count_params<T: Scalar>(cfg: &ArchConfig) -> Result<usize> {
    cfg.validate()?;
    let store: ParamStore<T> = ParamStore::new(0);
    let binder = Binder::frozen(&store);
    let hw = 1 << (cfg.levels() - 1).max(2); // smallest shape all levels accept
    let x = Tensor::zeros(&[1, 3, 4 * hw, 4 * hw]);
    let voxel = Tensor::zeros(&[1, cfg.voxel_bins, 4 * hw, 4 * hw]);
    nets::full_forward(&binder, cfg, &x, &voxel, &Default::default())?;
    Ok(store.param_count())
}

/// Which architectural pieces to disable, mirroring the ablation table.
#[derive(Clone, Debug, Default)]
pub struct AblationFlags {
    /// Replace APE with independent amplitude/phase processing.
    pub no_ape: bool,
    /// Replace FDA with a plain concat fusion.
    pub no_fda: bool,
    /// Skip the visibility network (stage 2 sees the raw input).
    pub no_stage1: bool,
    /// Skip the refinement network (output is the stage-1 image).
    pub no_stage2: bool,
}
