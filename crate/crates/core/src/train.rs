//! Training harness: Adam, the synthetic-data training loop with CSV loss
//! logging, checkpoint/resume, and deterministic evaluation.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{flip_horizontal, flip_vertical, synth_pair, DatasetSpec};
use crate::error::{Error, Result};
use crate::fourier::{amp_interpolate, decompose, reconstruct, sample_negatives, AmpPhase};
use crate::loss::{total_loss, LossBreakdown, LossWeights, PerceptualExtractor};
use crate::metrics::{psnr, ssim};
use crate::model::{
    full_forward, load_checkpoint, refinement_forward, save_checkpoint, visibility_forward,
    AblationFlags, ArchConfig, Binder, CheckpointMeta, Init, ParamStore,
};
use crate::tensor::{concat, Scalar, Tape, Tensor};

/// How the amplitude-interpolation coefficient for negatives is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    /// Fresh uniform draw from (-1, 1) per negative (the default).
    Dynamic,
    /// One constant value for every negative.
    Fixed(f64),
}

/// Everything the training loop needs; parsed from plain key=value text.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub crop: usize,
    pub flip: bool,
    pub seed: u64,
    pub k: usize,
    pub weights: LossWeights,
    pub arch: ArchConfig,
    pub lambda_mode: LambdaMode,
    pub no_ape: bool,
    pub no_fda: bool,
    /// Draw K/2 negatives from each frequency-only family instead of the
    /// blended form.
    pub no_eq6: bool,
    pub no_contrastive: bool,
    pub no_stage1: bool,
    pub no_stage2: bool,
    /// Block stage-2 gradients from flowing into the first stage.
    pub detach_stage1: bool,
    pub val_every: u64,
    pub val_samples: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1.5e-4,
            batch: 4,
            steps: 2000,
            crop: 64,
            flip: true,
            seed: 0,
            k: 4,
            weights: LossWeights::default(),
            arch: ArchConfig::default(),
            lambda_mode: LambdaMode::Dynamic,
            no_ape: false,
            no_fda: false,
            no_eq6: false,
            no_contrastive: false,
            no_stage1: false,
            no_stage2: false,
            detach_stage1: false,
            val_every: 500,
            val_samples: 8,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch == 0 || self.crop == 0 {
            return Err(Error::InvalidArgument(
                "lr, batch, and crop must be positive".into(),
            ));
        }
        if self.crop % 8 != 0 {
            return Err(Error::InvalidArgument("crop must be divisible by 8".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        self.arch.validate()
    }

    pub fn ablation_flags(&self) -> AblationFlags {
        AblationFlags {
            no_ape: self.no_ape,
            no_fda: self.no_fda,
            no_stage1: self.no_stage1,
            no_stage2: self.no_stage2,
        }
    }

    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected so typos fail loudly.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Malformed(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Malformed(format!("config line {}: {}", lineno + 1, what))
            };
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| bad("bad number"))?
                };
            }
            macro_rules! flag {
                () => {
                    value.parse().map_err(|_| bad("expected true/false"))?
                };
            }
            match key {
                "lr" => cfg.lr = num!(),
                "batch" => cfg.batch = num!(),
                "steps" => cfg.steps = num!(),
                "crop" => cfg.crop = num!(),
                "flip" => cfg.flip = flag!(),
                "seed" => cfg.seed = num!(),
                "k" => cfg.k = num!(),
                "lambda_p" => cfg.weights.lambda_p = num!(),
                "lambda_c" => cfg.weights.lambda_c = num!(),
                "stage1_weight" => cfg.weights.stage1_weight = num!(),
                "epsilon" => cfg.weights.epsilon = num!(),
                "per_pixel_charbonnier" => cfg.weights.per_pixel_charbonnier = flag!(),
                "widths" => {
                    cfg.arch.widths = value
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|_| bad("bad width")))
                        .collect::<Result<_>>()?
                }
                "heads" => cfg.arch.heads = num!(),
                "eca_kernel" => cfg.arch.eca_kernel = num!(),
                "ca_reduction" => cfg.arch.ca_reduction = num!(),
                "voxel_bins" => cfg.arch.voxel_bins = num!(),
                "lambda_amp" => {
                    cfg.lambda_mode = if value == "dynamic" {
                        LambdaMode::Dynamic
                    } else {
                        LambdaMode::Fixed(value.parse().map_err(|_| {
                            bad("lambda_amp must be 'dynamic' or a number")
                        })?)
                    }
                }
                "no_ape" => cfg.no_ape = flag!(),
                "no_fda" => cfg.no_fda = flag!(),
                "no_eq6" => cfg.no_eq6 = flag!(),
                "no_contrastive" => cfg.no_contrastive = flag!(),
                "no_stage1" => cfg.no_stage1 = flag!(),
                "no_stage2" => cfg.no_stage2 = flag!(),
                "detach_stage1" => cfg.detach_stage1 = flag!(),
                "val_every" => cfg.val_every = num!(),
                "val_samples" => cfg.val_samples = num!(),
                "checkpoint_every" => cfg.checkpoint_every = num!(),
                other => return Err(bad(&format!("unknown key {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize in the same key=value form `parse` accepts.
    pub fn to_manifest(&self) -> String {
        let widths: Vec<String> = self.arch.widths.iter().map(|w| w.to_string()).collect();
        let lambda = match self.lambda_mode {
            LambdaMode::Dynamic => "dynamic".to_string(),
            LambdaMode::Fixed(v) => format!("{v}"),
        };
        format!(
            "lr = {}\nbatch = {}\nsteps = {}\ncrop = {}\nflip = {}\nseed = {}\nk = {}\n\
             lambda_p = {}\nlambda_c = {}\nstage1_weight = {}\nepsilon = {}\n\
             per_pixel_charbonnier = {}\nwidths = {}\nheads = {}\neca_kernel = {}\n\
             ca_reduction = {}\nvoxel_bins = {}\nlambda_amp = {}\nno_ape = {}\nno_fda = {}\n\
             no_eq6 = {}\nno_contrastive = {}\nno_stage1 = {}\nno_stage2 = {}\n\
             detach_stage1 = {}\nval_every = {}\nval_samples = {}\ncheckpoint_every = {}\n",
            self.lr,
            self.batch,
            self.steps,
            self.crop,
            self.flip,
            self.seed,
            self.k,
            self.weights.lambda_p,
            self.weights.lambda_c,
            self.weights.stage1_weight,
            self.weights.epsilon,
            self.weights.per_pixel_charbonnier,
            widths.join(","),
            self.arch.heads,
            self.arch.eca_kernel,
            self.arch.ca_reduction,
            self.arch.voxel_bins,
            lambda,
            self.no_ape,
            self.no_fda,
            self.no_eq6,
            self.no_contrastive,
            self.no_stage1,
            self.no_stage2,
            self.detach_stage1,
            self.val_every,
            self.val_samples,
            self.checkpoint_every,
        )
    }
}

/// Adam first/second-moment accumulators plus the step counter.
pub struct AdamState<T: Scalar> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: ParamStore::new(0),
            v: ParamStore::new(0),
            t: 0,
        }
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update over `grads` (name -> gradient data).
/// Parameters absent from `grads` are treated as having zero gradient:
/// their moments decay but the bias-corrected update is exactly zero.
pub fn adam_step<T: Scalar>(
    params: &ParamStore<T>,
    grads: &[(String, Vec<T>)],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let (mut p, shape) = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient length {} vs parameter length {} for {name}",
                g.len(),
                p.len()
            )));
        }
        let (mut m, _) = state.m.get_or_init(name, &shape, Init::Zeros)?;
        let (mut v, _) = state.v.get_or_init(name, &shape, Init::Zeros)?;
        for i in 0..p.len() {
            let gi = g[i].as_f64();
            let mi = ADAM_BETA1 * m[i].as_f64() + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v[i].as_f64() + (1.0 - ADAM_BETA2) * gi * gi;
            m[i] = T::cast(mi);
            v[i] = T::cast(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let upd = lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            p[i] = T::cast(p[i].as_f64() - upd);
        }
        state.m.set(name, m, &shape);
        state.v.set(name, v, &shape);
        params.set(name, p, &shape);
    }
    Ok(())
}

fn derived_seed(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    tag.hash(&mut h);
    a.hash(&mut h);
    b.hash(&mut h);
    h.finish()
}

/// Seed of the i-th training sample of a step. Validation uses a distinct
/// tag, so the two partitions can never collide.
pub fn train_sample_seed(seed: u64, step: u64, i: u64) -> u64 {
    derived_seed(seed, "train", step, i)
}

pub fn val_sample_seed(seed: u64, i: u64) -> u64 {
    derived_seed(seed, "val", i, 0)
}

fn stack<T: Scalar>(samples: &[Tensor<T>]) -> Result<Tensor<T>> {
    let lifted: Vec<Tensor<T>> = samples
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = lifted.iter().collect();
    concat(&refs, 0)
}

/// One synthesized training batch (input, target, voxel), flips applied
/// consistently across all three.
fn make_batch<T: Scalar>(
    cfg: &TrainConfig,
    spec: &DatasetSpec,
    step: u64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (mut xs, mut ys, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.batch {
        let sample_seed = train_sample_seed(cfg.seed, step, i as u64);
        let (mut x, mut y, mut v) = synth_pair::<T>(sample_seed, spec)?;
        if cfg.flip {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(
                cfg.seed, "flip", step, i as u64,
            ));
            if rng.gen_bool(0.5) {
                x = flip_horizontal(&x);
                y = flip_horizontal(&y);
                v = flip_horizontal(&v);
            }
            if rng.gen_bool(0.5) {
                x = flip_vertical(&x);
                y = flip_vertical(&y);
                v = flip_vertical(&v);
            }
        }
        xs.push(x);
        ys.push(y);
        vs.push(v);
    }
    Ok((stack(&xs)?, stack(&ys)?, stack(&vs)?))
}

/// Negatives for the contrastive term. The default draws blended
/// amplitude interpolations; `no_eq6` draws K/2 from each frequency-only
/// family (input phase and target phase with interpolated amplitude).
fn make_negatives<T: Scalar>(
    cfg: &TrainConfig,
    x: &Tensor<T>,
    y: &Tensor<T>,
    step: u64,
) -> Result<Vec<Tensor<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, "neg", step, 0));
    if cfg.no_eq6 {
        let dx = decompose(x)?;
        let dy = decompose(y)?;
        let half = (cfg.k / 2).max(1);
        let mut out = Vec::new();
        for i in 0..2 * half {
            let lambda = match cfg.lambda_mode {
                LambdaMode::Dynamic => rng.gen_range(-1.0..1.0),
                LambdaMode::Fixed(v) => v,
            };
            let amp = amp_interpolate(&dx.amplitude, &dy.amplitude, T::cast(lambda))?;
            let phase = if i < half { &dx.phase } else { &dy.phase };
            out.push(reconstruct(&AmpPhase {
                amplitude: amp,
                phase: phase.clone(),
                height: dx.height,
                width: dx.width,
            })?);
        }
        return Ok(out);
    }
    match cfg.lambda_mode {
        LambdaMode::Dynamic => Ok(sample_negatives(x, y, cfg.k, &mut rng)?
            .into_iter()
            .map(|n| n.image)
            .collect()),
        LambdaMode::Fixed(v) => {
            let n = crate::fourier::make_negative(x, y, T::cast(v))?;
            Ok(vec![n.image; cfg.k])
        }
    }
}

/// Metrics for the raw input, stage-1 output, and final output against
/// the clean targets of a seed-fixed validation set.
#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub n_samples: usize,
    pub psnr_x: f64,
    pub ssim_x: f64,
    pub psnr_x1: f64,
    pub ssim_x1: f64,
    pub psnr_x2: f64,
    pub ssim_x2: f64,
}

/// Run the frozen model over `n_samples` validation images.
pub fn evaluate<T: Scalar>(
    store: &ParamStore<T>,
    arch: &ArchConfig,
    flags: &AblationFlags,
    spec: &DatasetSpec,
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one sample".into(),
        ));
    }
    if spec.voxel_bins != arch.voxel_bins {
        return Err(Error::InvalidArgument(format!(
            "dataset voxel bins {} do not match the architecture's {}",
            spec.voxel_bins, arch.voxel_bins
        )));
    }
    let binder = Binder::frozen(store);
    let mut acc = [0.0f64; 6];
    for i in 0..n_samples {
        let (x, y, v) = synth_pair::<T>(val_sample_seed(seed, i as u64), spec)?;
        let xb = stack(&[x])?;
        let yb = stack(&[y])?;
        let vb = stack(&[v])?;
        let (x1, x2) = full_forward(&binder, arch, &xb, &vb, flags)?;
        let x1 = x1.clamp_to(T::zero(), T::one());
        let x2 = x2.clamp_to(T::zero(), T::one());
        acc[0] += psnr(&xb, &yb, 1.0)?;
        acc[1] += ssim(&xb, &yb)?;
        acc[2] += psnr(&x1, &yb, 1.0)?;
        acc[3] += ssim(&x1, &yb)?;
        acc[4] += psnr(&x2, &yb, 1.0)?;
        acc[5] += ssim(&x2, &yb)?;
    }
    let n = n_samples as f64;
    Ok(EvalReport {
        n_samples,
        psnr_x: acc[0] / n,
        ssim_x: acc[1] / n,
        psnr_x1: acc[2] / n,
        ssim_x1: acc[3] / n,
        psnr_x2: acc[4] / n,
        ssim_x2: acc[5] / n,
    })
}

/// Outcome of a completed training run.
pub struct TrainReport {
    /// `<base>.manifest` / `<base>.bin` of the final checkpoint.
    pub checkpoint_base: PathBuf,
    pub first_loss: LossBreakdown,
    pub last_loss: LossBreakdown,
    /// (step, report) at each validation point, final step included.
    pub val_history: Vec<(u64, EvalReport)>,
}

fn moments_base(base: &Path, which: &str) -> PathBuf {
    let mut name = base.file_name().unwrap_or_default().to_os_string();
    name.push(format!("-{which}"));
    base.with_file_name(name)
}

/// Persist parameters, optimizer moments, config, and step counter.
pub fn save_train_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    state: &AdamState<T>,
    cfg: &TrainConfig,
    step: u64,
    base: &Path,
) -> Result<()> {
    let meta = CheckpointMeta {
        step,
        arch: cfg.arch.clone(),
        seed: cfg.seed,
    };
    save_checkpoint(store, &meta, base)?;
    save_checkpoint(&state.m, &meta, &moments_base(base, "m"))?;
    save_checkpoint(&state.v, &meta, &moments_base(base, "v"))?;
    std::fs::write(base.with_extension("config"), cfg.to_manifest())?;
    Ok(())
}

/// Load a training checkpoint written by [`save_train_checkpoint`].
pub fn load_train_checkpoint<T: Scalar>(
    base: &Path,
) -> Result<(ParamStore<T>, AdamState<T>, TrainConfig, u64)> {
    let (store, meta) = load_checkpoint(base)?;
    let (m, _) = load_checkpoint(&moments_base(base, "m"))?;
    let (v, _) = load_checkpoint(&moments_base(base, "v"))?;
    let cfg = TrainConfig::parse(&std::fs::read_to_string(base.with_extension("config"))?)?;
    if cfg.arch != meta.arch {
        return Err(Error::Malformed(
            "checkpoint config and manifest disagree on the architecture".into(),
        ));
    }
    Ok((
        store,
        AdamState {
            m,
            v,
            t: meta.step,
        },
        cfg,
        meta.step,
    ))
}

/// Run (or resume) training. Writes `train_log.csv` and periodic
/// checkpoints under `out_dir`; returns the final checkpoint base.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    spec: &DatasetSpec,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if spec.crop != cfg.crop || spec.voxel_bins != cfg.arch.voxel_bins {
        return Err(Error::InvalidArgument(
            "dataset crop/voxel bins must match the training config".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let (store, mut adam, start_step) = match resume {
        Some(base) => {
            let (store, adam, saved_cfg, step) = load_train_checkpoint::<T>(base)?;
            if saved_cfg.arch != cfg.arch || saved_cfg.seed != cfg.seed {
                return Err(Error::InvalidArgument(
                    "resume checkpoint was trained with a different arch or seed".into(),
                ));
            }
            (store, adam, step)
        }
        None => (ParamStore::new(cfg.seed), AdamState::new(), 0),
    };
    let extractor: PerceptualExtractor<T> =
        PerceptualExtractor::new(derived_seed(cfg.seed, "perceptual", 0, 0));
    let mut weights = cfg.weights.clone();
    if cfg.no_contrastive {
        weights.lambda_c = 0.0;
    }
    let flags = cfg.ablation_flags();

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(if start_step == 0 {
        let mut f = std::fs::File::create(&log_path)?;
        writeln!(f, "step,L_r1,L_p1,L_r2,L_p2,L_c,total")?;
        f
    } else {
        std::fs::OpenOptions::new().append(true).create(true).open(&log_path)?
    });
    let ckpt_base = out_dir.join("checkpoint");
    let mut first_loss: Option<LossBreakdown> = None;
    let mut last_loss: Option<LossBreakdown> = None;
    let mut val_history = Vec::new();

    for step in start_step..cfg.steps {
        let (x, y, voxel) = make_batch::<T>(cfg, spec, step)?;
        let tape = Tape::new();
        let binder = Binder::new(&store, &tape);
        let (x1, x2) = if cfg.detach_stage1 && !cfg.no_stage1 && !cfg.no_stage2 {
            let x1 = visibility_forward(&binder, &cfg.arch, &x, &flags)?;
            let x2 = refinement_forward(&binder, &cfg.arch, &x1.detach(), &voxel, &flags)?;
            (x1, x2)
        } else {
            full_forward(&binder, &cfg.arch, &x, &voxel, &flags)?
        };
        let negatives = if cfg.no_contrastive || weights.lambda_c == 0.0 {
            Vec::new()
        } else {
            make_negatives(cfg, &x, &y, step)?
        };
        let (loss, breakdown) = total_loss(&x1, &x2, &y, &negatives, &weights, &extractor)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss became non-finite at step {step}; last checkpoint retained"
            )));
        }
        let grads = tape.backward(&loss)?;
        let named: Vec<(String, Vec<T>)> = binder
            .bound()
            .into_iter()
            .map(|(name, tensor)| {
                let g = grads
                    .get(&tensor)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
                (name, g)
            })
            .collect();
        adam_step(&store, &named, &mut adam, cfg.lr)?;

        let l_c_field = if cfg.no_contrastive {
            String::new()
        } else {
            format!("{:.6e}", breakdown.l_c)
        };
        writeln!(
            log,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.6e}",
            step + 1,
            breakdown.l_r1,
            breakdown.l_p1,
            breakdown.l_r2,
            breakdown.l_p2,
            l_c_field,
            breakdown.total
        )?;
        if first_loss.is_none() {
            first_loss = Some(breakdown);
        }
        last_loss = Some(breakdown);

        let done = step + 1 == cfg.steps;
        if cfg.checkpoint_every > 0 && ((step + 1) % cfg.checkpoint_every == 0 || done) {
            log.flush()?;
            save_train_checkpoint(&store, &adam, cfg, step + 1, &ckpt_base)?;
        }
        if cfg.val_every > 0
            && cfg.val_samples > 0
            && ((step + 1) % cfg.val_every == 0 || done)
        {
            let report = evaluate(&store, &cfg.arch, &flags, spec, cfg.val_samples, cfg.seed)?;
            val_history.push((step + 1, report));
        }
    }
    log.flush()?;
    if start_step >= cfg.steps {
        // resumed past the end: nothing to do, keep the checkpoint as-is
        return Ok(TrainReport {
            checkpoint_base: ckpt_base,
            first_loss: LossBreakdown::default(),
            last_loss: LossBreakdown::default(),
            val_history,
        });
    }
    save_train_checkpoint(&store, &adam, cfg, cfg.steps, &ckpt_base)?;
    Ok(TrainReport {
        checkpoint_base: ckpt_base,
        first_loss: first_loss.unwrap_or_default(),
        last_loss: last_loss.unwrap_or_default(),
        val_history,
    })
}
