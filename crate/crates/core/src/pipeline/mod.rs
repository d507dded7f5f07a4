//! End-to-end workflow: synthetic corpus, encoder training, the two denoiser
//! training stages, clip-by-clip animation, ablation grids and profiling.
//!
//! Every entry point takes a [`RunConfig`]; its [`RunConfig::hash`] is
//! written into each checkpoint and output manifest.

mod ablate;
mod animate;
mod checkpoint;
mod optim;
mod profile;
mod synth;
mod train;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablate::{
    ablation_grid, cfg_grid, clip_conditioning, evaluate, region_grid, write_ablation_csv, AblationCell, Evaluation, GridKind,
    CFG_SETTINGS, WEIGHT_SETTINGS,
};
pub use animate::{animate, stack_frames, tensor_digest, AnimateOutput, AnimateRequest, ClipRecord, Conditioning};
pub use checkpoint::{load_face, load_model, load_vae, save_model, ModelBundle};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use profile::{profile, write_profile_csv, ProfileRow};
pub use synth::{frame_landmarks, render_frame, syllable_envelope, synthesize, ClipMeta, Corpus, FrameState, Identity, SynthConfig};
pub use train::{
    prepare_corpus, reconstruction_mse, smoothed, train_face, train_stage1, train_stage2, train_vae, PreparedClip, PreparedCorpus,
    TrainReport,
};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{GuidanceScales, ScheduleConfig};
use crate::encoders::LatentSpec;
use crate::error::{Error, Result};
use crate::hadvs::HadvsConfig;
use crate::util::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTraining {
    /// Channel widths of the two strided stages.
    pub widths: [usize; 2],
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for VaeTraining {
    fn default() -> Self {
        VaeTraining {
            widths: [16, 32],
            steps: 600,
            batch_size: 8,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceTraining {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FaceTraining {
    fn default() -> Self {
        FaceTraining {
            hidden: 64,
            steps: 300,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

/// A `[stage1]`/`[stage2]` section must list every field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTraining {
    pub steps: usize,
    pub batch_size: usize,
    /// Target frames per sample; stage 1 always trains on single frames.
    pub clip_frames: usize,
    pub p_drop: f64,
    /// Steps averaged by [`smoothed`] at each end of the loss curve.
    pub smoothing_window: usize,
}

impl StageTraining {
    fn stage1() -> Self {
        StageTraining {
            steps: 500,
            batch_size: 4,
            clip_frames: 1,
            p_drop: 0.05,
            smoothing_window: 50,
        }
    }

    fn stage2() -> Self {
        StageTraining {
            steps: 500,
            batch_size: 1,
            clip_frames: 14,
            p_drop: 0.05,
            smoothing_window: 50,
        }
    }
}

fn default_stage1() -> StageTraining {
    StageTraining::stage1()
}

fn default_stage2() -> StageTraining {
    StageTraining::stage2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Frames generated per clip.
    pub clip_frames: usize,
    /// Zero-pad audio that ends before the requested video instead of failing.
    pub pad_audio: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            clip_frames: 14,
            pad_audio: false,
        }
    }
}

/// Everything a run depends on besides its input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub latent: LatentSpec,
    pub vae: VaeTraining,
    pub face: FaceTraining,
    pub model: DenoiserConfig,
    pub hadvs: HadvsConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceScales,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_stage1")]
    pub stage1: StageTraining,
    #[serde(default = "default_stage2")]
    pub stage2: StageTraining,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            latent: LatentSpec::default(),
            vae: VaeTraining::default(),
            face: FaceTraining::default(),
            model: DenoiserConfig::default(),
            hadvs: HadvsConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceScales::default(),
            optimizer: OptimizerConfig::default(),
            stage1: StageTraining::stage1(),
            stage2: StageTraining::stage2(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        self.model.validate()?;
        self.hadvs.validate()?;
        self.guidance.validate()?;
        self.optimizer.validate()?;
        crate::diffusion::NoiseSchedule::from_config(self.schedule)?;
        if self.model.timesteps != self.schedule.timesteps {
            return Err(Error::invalid(format!(
                "model timesteps {} differ from schedule timesteps {}",
                self.model.timesteps, self.schedule.timesteps
            )));
        }
        if self.model.fusion != self.hadvs.fusion {
            return Err(Error::invalid(format!(
                "model fusion {} differs from hadvs fusion {}",
                self.model.fusion, self.hadvs.fusion
            )));
        }
        for (name, st) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if st.batch_size == 0 || st.clip_frames == 0 || !(0.0..=1.0).contains(&st.p_drop) || st.smoothing_window == 0 {
                return Err(Error::invalid(format!("{name}: batch size, clip frames and smoothing window must be positive, p_drop in [0, 1]")));
            }
        }
        if self.inference.clip_frames == 0 {
            return Err(Error::invalid("inference clip_frames must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format {
            kind: "run config",
            message: format!("{origin}: {e}"),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// A configuration small enough for unit tests: 8×8 latents, short
    /// schedules and few steps.
    pub fn tiny() -> Self {
        let mut cfg = RunConfig {
            latent: LatentSpec {
                h_z: 8,
                w_z: 8,
                d_z: 4,
                h_i: 32,
                w_i: 32,
            },
            ..RunConfig::default()
        };
        cfg.vae = VaeTraining {
            widths: [4, 8],
            steps: 20,
            batch_size: 2,
            learning_rate: 3e-3,
        };
        cfg.face = FaceTraining {
            hidden: 8,
            steps: 10,
            batch_size: 4,
            learning_rate: 3e-3,
        };
        cfg.model.channels = vec![4, 8];
        cfg.model.temb_dim = 8;
        cfg.model.d_face = 4;
        cfg.model.d_audio = 6;
        cfg.model.audio_hidden = 8;
        cfg.model.audio_context = 1;
        cfg.schedule.ddim_steps = 2;
        cfg.stage1.steps = 4;
        cfg.stage1.batch_size = 2;
        cfg.stage1.smoothing_window = 2;
        cfg.stage2.steps = 4;
        cfg.stage2.clip_frames = 3;
        cfg.stage2.smoothing_window = 2;
        cfg.inference.clip_frames = 3;
        cfg
    }
}

/// Best-effort `git rev-parse HEAD` of the working directory.
pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Standard manifest entries of a run plus `extra`.
pub fn run_metadata(cfg: &RunConfig, kind: &str, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut out = vec![
        ("kind".to_string(), kind.to_string()),
        ("config_hash".to_string(), cfg.hash()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("git_revision".to_string(), git_revision()),
    ];
    out.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    out
}

/// Writes `key = value` lines.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        writeln!(text, "{k} = {v}").expect("string write");
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a `key = value` manifest, skipping blank and `#` lines.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

/// Writes a CSV with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fails if any of `paths` is missing.
pub fn require_paths(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing"),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml(), "test").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.guidance, GuidanceScales { audio: 3.5, image: 3.5 });
        let tiny = RunConfig::tiny();
        tiny.validate().unwrap();
        assert_ne!(tiny.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[optimizer]\nlearning_rate = 0.01\n", "test").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.optimizer.grad_clip, 1.0);
        assert_eq!(cfg.stage1.batch_size, 4);
        assert_eq!(cfg.stage2.clip_frames, 14);
        // stage sections are all-or-nothing
        assert!(RunConfig::from_toml("[stage1]\nsteps = 10\n", "test").is_err());
        assert!(RunConfig::from_toml("seed = \"x\"", "test").is_err());
        assert!(RunConfig::from_toml("[schedule]\ntimesteps = 50\n", "test").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        let entries = run_metadata(&RunConfig::default(), "test", &[("clips", "3".into())]);
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);
    }
}
