//! `hallo`: synthetic corpus generation, encoder and denoiser training,
//! animation, region masks, ablations, profiling and metrics.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use hallo_core::denoiser::ForwardOptions;
use hallo_core::image::read_ppm;
use hallo_core::maskgen::{derive_region_masks, load_landmarks};
use hallo_core::metrics::{clip_features, frechet_distance, sync_proxy, video_feature_set};
use hallo_core::pipeline::{
    ablation_grid, animate, load_face, load_model, load_vae, prepare_corpus, profile, synthesize,
    train_face, train_stage1, train_stage2, train_vae, write_ablation_csv, write_csv, write_manifest,
    write_profile_csv, AnimateRequest, Conditioning, Corpus, GridKind, RunConfig, SynthConfig,
};
use hallo_core::tensor::htns;

#[derive(Parser)]
#[command(name = "hallo", version, about = "Audio-driven portrait animation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a run configuration file.
    Config {
        /// Small test-sized configuration instead of the defaults.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic talking-face corpus.
    Synth {
        #[arg(long, default_value_t = 4)]
        ids: usize,
        /// Frames per training clip.
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Training clips per identity.
        #[arg(long, default_value_t = 64)]
        clips: usize,
        #[arg(long, default_value_t = 10)]
        heldout: usize,
        #[arg(long, default_value_t = 28)]
        heldout_frames: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the image autoencoder and the identity encoder.
    TrainVae {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Receives `vae/` and `face/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser: stage 1 (spatial) or stage 2 (audio and motion).
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train-vae`.
        #[arg(long)]
        encoders: PathBuf,
        /// Stage-1 checkpoint; required for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Animate a reference portrait from audio features.
    Animate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        encoders: PathBuf,
        /// Reference image (PPM).
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        /// `[L, D]` per-frame audio features (HTNS).
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        /// Zero-pad audio shorter than the video instead of failing.
        #[arg(long)]
        pad_audio: bool,
        /// Sample without the hierarchical audio branch.
        #[arg(long)]
        no_hadvs: bool,
        /// Write per-step DDIM latents here.
        #[arg(long)]
        dump_steps: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive region masks from a landmark file.
    #[command(alias = "maskgen")]
    Masks {
        #[arg(long)]
        landmarks: PathBuf,
        /// Latent grid as `<h>x<w>`.
        #[arg(long, default_value = "16x16")]
        latent: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run ablation grids on held-out clips.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// Stage-2 checkpoints; the fusion grid needs one per fusion mode.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        encoders: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: regions, fusion, weights, cfg.
        #[arg(long, default_value = "regions,weights,cfg")]
        grid: String,
        /// Held-out clips per cell.
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time one inference clip at several latent resolutions.
    Profile {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated frames against reference frames.
    Metrics {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Audio features of the generated video; enables the sync proxy.
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Landmarks of the reference image; required with `--audio`.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_grid(text: &str) -> Result<(usize, usize)> {
    let (h, w) = text
        .split_once('x')
        .with_context(|| format!("latent size `{text}` is not <h>x<w>"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn load_encoders(dir: &Path, cfg: &RunConfig) -> Result<(hallo_core::encoders::Vae, hallo_core::encoders::FaceEncoder)> {
    let vae = load_vae(&dir.join("vae"), cfg).with_context(|| format!("loading autoencoder from {}", dir.display()))?;
    let face = load_face(&dir.join("face"), cfg).with_context(|| format!("loading face encoder from {}", dir.display()))?;
    Ok((vae, face))
}

/// PPM files in `dir`, sorted by name.
fn read_frame_dir(dir: &Path) -> Result<Vec<hallo_core::tensor::Tensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "no .ppm frames in {}", dir.display());
    paths.iter().map(|p| Ok(read_ppm(p)?)).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { tiny, out } => {
            let cfg = if tiny { RunConfig::tiny() } else { RunConfig::default() };
            cfg.save(&out)?;
        }
        Command::Synth {
            ids,
            frames,
            clips,
            heldout,
            heldout_frames,
            image_size,
            seed,
            out,
        } => {
            let cfg = SynthConfig {
                ids,
                clips,
                frames,
                heldout,
                heldout_frames,
                seed,
                image_size,
                ..SynthConfig::default()
            };
            let corpus = synthesize(&cfg, &out)?;
            println!(
                "wrote {} training and {} held-out clips to {}",
                corpus.train.len(),
                corpus.heldout.len(),
                out.display()
            );
        }
        Command::TrainVae { config, data, out } => {
            let cfg = config.load()?;
            let corpus = Corpus::load(&data)?;
            let (_, vr) = train_vae(&cfg, &corpus, Some(&out.join("vae")))?;
            let (_, fr) = train_face(&cfg, &corpus, Some(&out.join("face")))?;
            let (a, b) = vr.smoothed();
            let (c, d) = fr.smoothed();
            println!("autoencoder loss {a:.5} -> {b:.5}; face loss {c:.5} -> {d:.5}");
        }
        Command::Train {
            config,
            stage,
            data,
            encoders,
            init,
            out,
        } => {
            let cfg = config.load()?;
            let corpus = Corpus::load(&data)?;
            let (vae, face) = load_encoders(&encoders, &cfg)?;
            let prepared = prepare_corpus(&cfg, &corpus, &corpus.train, &vae, &face)?;
            let report = if stage == 1 {
                ensure!(init.is_none(), "stage 1 starts from scratch; --init is only for stage 2");
                train_stage1(&cfg, &prepared, Some(&out))?.1
            } else {
                let init = init.context("stage 2 needs --init <stage-1 checkpoint>")?;
                let start = load_model(&init, &cfg)?;
                match start.meta.get("kind").map(String::as_str) {
                    Some("stage1") => {}
                    other => bail!("{} is not a stage-1 checkpoint (kind {other:?})", init.display()),
                }
                train_stage2(&cfg, &prepared, start.model, Some(&out))?.1
            };
            let (a, b) = report.smoothed();
            println!("stage {stage}: smoothed loss {a:.5} -> {b:.5} ({:.3}x)", b / a);
        }
        Command::Animate {
            config,
            checkpoint,
            encoders,
            reference,
            landmarks,
            audio,
            frames,
            fps,
            pad_audio,
            no_hadvs,
            dump_steps,
            out,
        } => {
            let mut cfg = config.load()?;
            cfg.inference.pad_audio |= pad_audio;
            let bundle = load_model(&checkpoint, &cfg)?;
            let (vae, face) = load_encoders(&encoders, &cfg)?;
            let cond = Conditioning {
                reference_image: read_ppm(&reference)?,
                landmarks: load_landmarks(&landmarks)?,
                audio: htns::read(&audio)?,
                fps,
            };
            let req = AnimateRequest {
                model: &bundle.model,
                vae: &vae,
                face: &face,
                total_frames: frames,
                options: ForwardOptions {
                    hadvs: !no_hadvs,
                    temporal: true,
                },
                dump_steps: dump_steps.as_deref(),
            };
            let result = animate(&cfg, &req, &cond)?;
            result.write(&out)?;
            println!("wrote {} frames in {} clips to {}", result.frames.len(), result.clips.len(), out.display());
        }
        Command::Masks { landmarks, latent, out } => {
            let lm = load_landmarks(&landmarks)?;
            let masks = derive_region_masks(&lm, parse_grid(&latent)?)?;
            masks.write_htns(&out)?;
            masks.write_overlays(&out, &lm)?;
        }
        Command::Ablate {
            config,
            checkpoint,
            encoders,
            data,
            grid,
            clips,
            out,
        } => {
            let cfg = config.load()?;
            let grids = grid
                .split(',')
                .map(|g| g.trim().parse::<GridKind>())
                .collect::<Result<Vec<_>, _>>()?;
            let corpus = Corpus::load(&data)?;
            let n = clips.unwrap_or(corpus.heldout.len()).min(corpus.heldout.len());
            ensure!(n > 0, "the corpus has no held-out clips");
            let bundles = checkpoint
                .iter()
                .map(|dir| {
                    let mut c = cfg.clone();
                    // each checkpoint records the fusion it was trained with
                    let (_, meta) = hallo_core::nn::read_checkpoint(dir)?;
                    if let Some(f) = meta.get("fusion") {
                        c.model.fusion = f.parse()?;
                        c.hadvs.fusion = c.model.fusion;
                    }
                    Ok(load_model(dir, &c)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let (vae, face) = load_encoders(&encoders, &cfg)?;
            let cells = ablation_grid(&cfg, &grids, &bundles, &vae, &face, &corpus.heldout[..n], corpus.config.fps)?;
            write_ablation_csv(&out, &cells)?;
            println!("wrote {} cells to {}", cells.len(), out.display());
        }
        Command::Profile {
            config,
            checkpoint,
            resolutions,
            steps,
            out,
        } => {
            let cfg = config.load()?;
            let bundle = load_model(&checkpoint, &cfg)?;
            let rows = profile(&cfg, &bundle.model, &resolutions, steps)?;
            for r in &rows {
                println!(
                    "{:>3}x{:<3} hadvs={:<5} {:>8.3} s {:>12} bytes",
                    r.resolution, r.resolution, r.hadvs, r.seconds, r.peak_bytes
                );
            }
            write_profile_csv(&out, &rows)?;
        }
        Command::Metrics {
            config,
            generated,
            reference,
            audio,
            landmarks,
            out,
        } => {
            let cfg = config.load()?;
            let gen = read_frame_dir(&generated)?;
            let real = read_frame_dir(&reference)?;
            let hash = cfg.hash();
            let mut rows = vec![
                vec![
                    "fid_frame_features".into(),
                    format!("{:.6}", frechet_distance(&clip_features(&gen)?, &clip_features(&real)?)?),
                    hash.clone(),
                ],
            ];
            // with one video per side the video-level covariance is undefined;
            // split both into halves so there are two samples each
            if gen.len() >= 4 && real.len() >= 4 {
                let halves = |f: &[hallo_core::tensor::Tensor]| {
                    let m = f.len() / 2;
                    vec![f[..m].to_vec(), f[m..2 * m].to_vec()]
                };
                let fvd = frechet_distance(&video_feature_set(&halves(&gen))?, &video_feature_set(&halves(&real))?)?;
                rows.push(vec!["fvd_video_features".into(), format!("{fvd:.6}"), hash.clone()]);
            }
            if let Some(a) = audio {
                let lm = landmarks.context("--audio needs --landmarks to locate the lip region")?;
                let masks = derive_region_masks(&load_landmarks(&lm)?, (cfg.latent.h_z, cfg.latent.w_z))?;
                let feats = htns::read(&a)?;
                ensure!(feats.rank() == 2 && feats.shape()[0] >= gen.len(), "audio covers fewer frames than the video");
                let s = sync_proxy(&feats.narrow(0, 0, gen.len())?, &gen, &masks.m_lip)?;
                rows.push(vec!["sync_c_proxy".into(), format!("{:.6}", s.confidence), hash.clone()]);
                rows.push(vec!["sync_d_proxy".into(), format!("{:.6}", s.distance), hash.clone()]);
                rows.push(vec!["sync_offset".into(), s.offset.to_string(), hash.clone()]);
            }
            write_csv(&out, &["metric", "value", "config_hash"], &rows)?;
            write_manifest(
                &out.with_extension("manifest.txt"),
                &hallo_core::pipeline::run_metadata(
                    &cfg,
                    "metrics",
                    &[
                        ("generated", generated.display().to_string()),
                        ("reference", reference.display().to_string()),
                        (
                            "note",
                            "feature-space and sync scores are desk-scale proxies, not comparable to published numbers".into(),
                        ),
                    ],
                ),
            )?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
