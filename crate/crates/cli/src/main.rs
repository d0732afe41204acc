//! Command-line surface for the two-stage low-light enhancement pipeline:
//! Fourier-prior inspection tools, event-file utilities, training,
//! evaluation, the lambda sweep, and figure-style artifact dumps.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use luminev_core::data::{read_image, read_raw_f32, synth_pair, write_image, write_raw_f32, DatasetSpec};
use luminev_core::events::{
    inject_misalignment, read_events, simulate_events, voxelize, write_events,
};
use luminev_core::fourier::{
    amp_interpolate, decompose, make_negative, reconstruct, sample_negatives, AmpPhase,
};
use luminev_core::model::{count_params, load_checkpoint, ArchConfig};
use luminev_core::train::{
    evaluate, load_train_checkpoint, train, LambdaMode, TrainConfig,
};
use luminev_core::{Result, Tensor};

#[derive(Parser)]
#[command(
    name = "luminev",
    about = "Two-stage low-light enhancement: Fourier-prior visibility restoration \
             plus event-guided structure refinement",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the pair of images for the Fourier tools comes from: two files,
/// or a synthesized (low-light, clean) pair when files are not given.
#[derive(Args)]
struct PairSource {
    /// First image (PPM, or raw .f32 with sidecar); synthesized if absent
    #[arg(long)]
    input: Option<PathBuf>,
    /// Second image of the pair
    #[arg(long)]
    input_b: Option<PathBuf>,
    /// Seed for the synthesized pair (and any sampling)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patch size of synthesized pairs
    #[arg(long, default_value_t = 64)]
    crop: usize,
}

impl PairSource {
    fn load(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        match (&self.input, &self.input_b) {
            (Some(a), Some(b)) => Ok((load_image(a)?, load_image(b)?)),
            (None, None) => {
                let spec = DatasetSpec {
                    crop: self.crop,
                    ..Default::default()
                };
                let (x, y, _) = synth_pair(self.seed, &spec)?;
                Ok((x, y))
            }
            _ => Err(luminev_core::Error::InvalidArgument(
                "give both --input and --input-b, or neither to synthesize a pair".into(),
            )),
        }
    }
}

fn load_image(path: &Path) -> Result<Tensor<f32>> {
    if path.extension().is_some_and(|e| e == "f32") {
        read_raw_f32(path)
    } else {
        read_image(path)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Swap the Fourier amplitudes of two images and write both results
    Swap {
        #[command(flatten)]
        pair: PairSource,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Blend the amplitudes of two images at a given coefficient
    Interp {
        #[command(flatten)]
        pair: PairSource,
        /// Interpolation coefficient (unclamped; negatives extrapolate)
        #[arg(long, allow_hyphen_values = true)]
        lambda: f64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Draw contrastive negatives from an image pair
    Negatives {
        #[command(flatten)]
        pair: PairSource,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Event-stream utilities
    Events {
        #[command(subcommand)]
        command: EventsCommand,
    },
    /// Train on synthetic pairs
    Train {
        /// Plain-text key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline overrides, e.g. --set steps=100 (repeatable)
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Checkpoint base to resume from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a seed-fixed validation set
    Eval {
        /// Checkpoint base path (without extension)
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate across fixed amplitude coefficients and dynamic
    SweepLambda {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Write amplitude-swap and interpolation grids for a pair
    DumpFig3 {
        #[command(flatten)]
        pair: PairSource,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Write negative-sample triptychs (blend plus both frequency-only parts)
    DumpFig5 {
        #[command(flatten)]
        pair: PairSource,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Print the model parameter count for a config
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
}

#[derive(Subcommand)]
enum EventsCommand {
    /// Simulate events between two frames (luminance of color inputs)
    Simulate {
        #[arg(long)]
        frame0: PathBuf,
        #[arg(long)]
        frame1: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accumulate an event file into a temporal voxel grid (raw .f32)
    Voxelize {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shift and jitter an event stream to fake calibration error
    Misalign {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        dx: i32,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        dy: i32,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Every run records what produced its artifacts.
fn write_manifest(dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(dir.join("run_manifest.txt"), text)?;
    Ok(())
}

fn luminance(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    match t.shape() {
        [h, w] => t.reshape(&[*h, *w]),
        [3, h, w] => {
            let (h, w) = (*h, *w);
            let n = h * w;
            let d = t.data();
            let lum: Vec<f32> = (0..n).map(|i| (d[i] + d[n + i] + d[2 * n + i]) / 3.0).collect();
            Tensor::from_vec(lum, &[h, w])
        }
        s => Err(luminev_core::Error::ShapeMismatch(format!(
            "expected (H, W) or (3, H, W) frame, got {:?}",
            s
        ))),
    }
}

fn load_config(path: &Option<PathBuf>, sets: &[String]) -> Result<TrainConfig> {
    let mut text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    for s in sets {
        text.push('\n');
        text.push_str(&s.replace('=', " = "));
    }
    TrainConfig::parse(&text)
}

const LAMBDA_GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Swap { pair, out_dir } => {
            let (x, y) = pair.load()?;
            let (sx, sy) = luminev_core::fourier::swap_amplitude(&x, &y)?;
            std::fs::create_dir_all(&out_dir)?;
            write_image(&sx.clamp_to(0.0, 1.0), &out_dir.join("swap_phase_a.ppm"), 16)?;
            write_image(&sy.clamp_to(0.0, 1.0), &out_dir.join("swap_phase_b.ppm"), 16)?;
            write_manifest(&out_dir, &[
                ("command", "swap".into()),
                ("seed", pair.seed.to_string()),
            ])?;
            println!("wrote 2 amplitude-swapped images to {}", out_dir.display());
        }
        Command::Interp { pair, lambda, out_dir } => {
            let (x, y) = pair.load()?;
            let dx = decompose(&x)?;
            let dy = decompose(&y)?;
            let amp = amp_interpolate(&dx.amplitude, &dy.amplitude, lambda as f32)?;
            let img = reconstruct(&AmpPhase {
                amplitude: amp,
                phase: dx.phase.clone(),
                height: dx.height,
                width: dx.width,
            })?;
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join(format!("interp_lambda_{lambda}.ppm"));
            write_image(&img.clamp_to(0.0, 1.0), &out, 16)?;
            write_manifest(&out_dir, &[
                ("command", "interp".into()),
                ("lambda", lambda.to_string()),
                ("seed", pair.seed.to_string()),
            ])?;
            println!("wrote {}", out.display());
        }
        Command::Negatives { pair, k, out_dir } => {
            let (x, y) = pair.load()?;
            let mut rng = ChaCha8Rng::seed_from_u64(pair.seed);
            let negs = sample_negatives(&x, &y, k, &mut rng)?;
            std::fs::create_dir_all(&out_dir)?;
            for (i, n) in negs.iter().enumerate() {
                write_image(
                    &n.image.clamp_to(0.0, 1.0),
                    &out_dir.join(format!("negative_{i}.ppm")),
                    16,
                )?;
                println!("negative_{i}: lambda = {:+.4}", n.lambda_amp);
            }
            write_manifest(&out_dir, &[
                ("command", "negatives".into()),
                ("k", k.to_string()),
                ("seed", pair.seed.to_string()),
            ])?;
        }
        Command::Events { command } => run_events(command)?,
        Command::Train { config, sets, out_dir, resume } => {
            let cfg = load_config(&config, &sets)?;
            let spec = DatasetSpec {
                crop: cfg.crop,
                voxel_bins: cfg.arch.voxel_bins,
                ..Default::default()
            };
            write_manifest(&out_dir, &[
                ("command", "train".into()),
                ("seed", cfg.seed.to_string()),
                ("config", format!("\n{}", cfg.to_manifest())),
            ])?;
            let report = train::<f32>(&cfg, &spec, &out_dir, resume.as_deref())?;
            println!(
                "trained {} steps; loss {:.6} -> {:.6}; checkpoint at {}",
                cfg.steps,
                report.first_loss.total,
                report.last_loss.total,
                report.checkpoint_base.display()
            );
            if let Some((step, r)) = report.val_history.last() {
                println!(
                    "val @ step {step}: PSNR x/x1/x2 = {:.2}/{:.2}/{:.2} dB, \
                     SSIM = {:.4}/{:.4}/{:.4}",
                    r.psnr_x, r.psnr_x1, r.psnr_x2, r.ssim_x, r.ssim_x1, r.ssim_x2
                );
            }
        }
        Command::Eval { checkpoint, samples, seed } => {
            let (store, _, cfg, step) = load_train_checkpoint::<f32>(&checkpoint)
                .or_else(|_| {
                    // bare parameter checkpoint without optimizer state
                    let (store, meta) = load_checkpoint::<f32>(&checkpoint)?;
                    let cfg = TrainConfig {
                        arch: meta.arch.clone(),
                        seed: meta.seed,
                        ..Default::default()
                    };
                    Ok::<_, luminev_core::Error>((
                        store,
                        luminev_core::train::AdamState::new(),
                        cfg,
                        meta.step,
                    ))
                })?;
            let spec = DatasetSpec {
                crop: cfg.crop,
                voxel_bins: cfg.arch.voxel_bins,
                ..Default::default()
            };
            let r = evaluate(&store, &cfg.arch, &cfg.ablation_flags(), &spec, samples, seed)?;
            println!("checkpoint step {step}, {samples} validation samples (seed {seed})");
            println!("stage,psnr_db,ssim");
            println!("input,{:.4},{:.6}", r.psnr_x, r.ssim_x);
            println!("stage1,{:.4},{:.6}", r.psnr_x1, r.ssim_x1);
            println!("stage2,{:.4},{:.6}", r.psnr_x2, r.ssim_x2);
        }
        Command::SweepLambda { config, sets, out_dir } => {
            let base = load_config(&config, &sets)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut rows = vec!["lambda,psnr_db,ssim".to_string()];
            let settings: Vec<(String, LambdaMode)> = LAMBDA_GRID
                .iter()
                .map(|&v| (v.to_string(), LambdaMode::Fixed(v)))
                .chain(std::iter::once(("dynamic".to_string(), LambdaMode::Dynamic)))
                .collect();
            for (label, mode) in settings {
                let mut cfg = base.clone();
                cfg.lambda_mode = mode;
                let spec = DatasetSpec {
                    crop: cfg.crop,
                    voxel_bins: cfg.arch.voxel_bins,
                    ..Default::default()
                };
                let run_dir = out_dir.join(format!("lambda_{label}"));
                let report = train::<f32>(&cfg, &spec, &run_dir, None)?;
                let r = report
                    .val_history
                    .last()
                    .map(|(_, r)| *r)
                    .ok_or_else(|| {
                        luminev_core::Error::InvalidArgument(
                            "sweep needs val_every/val_samples > 0".into(),
                        )
                    })?;
                let row = format!("{label},{:.4},{:.6}", r.psnr_x2, r.ssim_x2);
                println!("{row}");
                rows.push(row);
            }
            std::fs::write(out_dir.join("sweep.csv"), rows.join("\n") + "\n")?;
            write_manifest(&out_dir, &[
                ("command", "sweep-lambda".into()),
                ("seed", base.seed.to_string()),
                ("config", format!("\n{}", base.to_manifest())),
            ])?;
        }
        Command::DumpFig3 { pair, out_dir } => {
            let (x, y) = pair.load()?;
            std::fs::create_dir_all(&out_dir)?;
            let (sx, sy) = luminev_core::fourier::swap_amplitude(&x, &y)?;
            write_image(&sx.clamp_to(0.0, 1.0), &out_dir.join("swap_phase_a.ppm"), 16)?;
            write_image(&sy.clamp_to(0.0, 1.0), &out_dir.join("swap_phase_b.ppm"), 16)?;
            let dx = decompose(&x)?;
            let dy = decompose(&y)?;
            for (tag, d) in [("a", &dx), ("b", &dy)] {
                for lambda in LAMBDA_GRID {
                    let amp = amp_interpolate(&dx.amplitude, &dy.amplitude, lambda as f32)?;
                    let img = reconstruct(&AmpPhase {
                        amplitude: amp,
                        phase: d.phase.clone(),
                        height: d.height,
                        width: d.width,
                    })?;
                    write_image(
                        &img.clamp_to(0.0, 1.0),
                        &out_dir.join(format!("interp_phase_{tag}_lambda_{lambda}.ppm")),
                        16,
                    )?;
                }
            }
            write_manifest(&out_dir, &[
                ("command", "dump-fig3".into()),
                ("seed", pair.seed.to_string()),
            ])?;
            println!(
                "wrote 2 swapped + {} interpolated images to {}",
                2 * LAMBDA_GRID.len(),
                out_dir.display()
            );
        }
        Command::DumpFig5 { pair, k, out_dir } => {
            let (x, y) = pair.load()?;
            std::fs::create_dir_all(&out_dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(pair.seed);
            let dx = decompose(&x)?;
            let dy = decompose(&y)?;
            for i in 0..k {
                let lambda: f32 = rng.gen_range(-1.0..1.0);
                let blend = make_negative(&x, &y, lambda)?;
                let amp = amp_interpolate(&dx.amplitude, &dy.amplitude, lambda)?;
                for (tag, img) in [
                    ("blend", blend.image.clone()),
                    (
                        "phase_a",
                        reconstruct(&AmpPhase {
                            amplitude: amp.clone(),
                            phase: dx.phase.clone(),
                            height: dx.height,
                            width: dx.width,
                        })?,
                    ),
                    (
                        "phase_b",
                        reconstruct(&AmpPhase {
                            amplitude: amp.clone(),
                            phase: dy.phase.clone(),
                            height: dy.height,
                            width: dy.width,
                        })?,
                    ),
                ] {
                    write_image(
                        &img.clamp_to(0.0, 1.0),
                        &out_dir.join(format!("negative_{i}_{tag}.ppm")),
                        16,
                    )?;
                }
                println!("negative_{i}: lambda = {lambda:+.4}");
            }
            write_manifest(&out_dir, &[
                ("command", "dump-fig5".into()),
                ("k", k.to_string()),
                ("seed", pair.seed.to_string()),
            ])?;
        }
        Command::Params { config, sets } => {
            let arch = if config.is_some() || !sets.is_empty() {
                load_config(&config, &sets)?.arch
            } else {
                ArchConfig::default()
            };
            println!("{}", count_params::<f32>(&arch)?);
        }
    }
    Ok(())
}

fn run_events(cmd: EventsCommand) -> Result<()> {
    match cmd {
        EventsCommand::Simulate { frame0, frame1, threshold, out } => {
            let f0 = luminance(&load_image(&frame0)?)?;
            let f1 = luminance(&load_image(&frame1)?)?;
            let stream = simulate_events(&f0, &f1, threshold, 0, 1_000_000)?;
            write_events(&stream, &out)?;
            println!("wrote {} events to {}", stream.events.len(), out.display());
        }
        EventsCommand::Voxelize { events, bins, out } => {
            let stream = read_events(&events)?;
            let voxel = voxelize::<f32>(&stream, bins)?;
            write_raw_f32(&voxel.grid, &out)?;
            println!(
                "wrote {}x{}x{} voxel grid to {}",
                bins,
                stream.height,
                stream.width,
                out.display()
            );
        }
        EventsCommand::Misalign { events, dx, dy, jitter, seed, out } => {
            let stream = read_events(&events)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shifted = inject_misalignment(&stream, dx, dy, jitter, &mut rng)?;
            write_events(&shifted, &out)?;
            println!(
                "kept {} of {} events after shift ({dx}, {dy}) and jitter {jitter}",
                shifted.events.len(),
                stream.events.len()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
