//! Wall time and peak tensor memory of one inference clip at several latent
//! resolutions, with and without the hierarchical audio branch.

use std::path::Path;
use std::time::Instant;

use super::synth::{frame_landmarks, FrameState, Identity};
use super::train::level_masks;
use super::{write_csv, RunConfig};
use crate::denoiser::{DenoiseInputs, ForwardOptions, HalloModel};
use crate::diffusion::{ddim_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::maskgen::derive_region_masks;
use crate::tensor::{memory, Graph, Tensor, Var};
use crate::util::seeded_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    /// Latent side length.
    pub resolution: usize,
    pub hadvs: bool,
    /// Denoising loop only; encoders and decoding are excluded.
    pub seconds: f64,
    /// Peak live tensor bytes above the level at the start of the loop.
    pub peak_bytes: i64,
}

/// Runs `ddim_steps` guided steps on one clip for every resolution, HADVS
/// off then on.
pub fn profile(cfg: &RunConfig, model: &HalloModel, resolutions: &[usize], ddim_steps: usize) -> Result<Vec<ProfileRow>> {
    cfg.validate()?;
    let levels = cfg.model.levels();
    let sched = NoiseSchedule::from_config(cfg.schedule)?.with_ddim_steps(ddim_steps)?;
    let s = cfg.inference.clip_frames;
    let dz = cfg.latent.d_z;
    let mut rng = seeded_rng(cfg.seed);
    let image = cfg.latent.image_shape()[1];
    let lm = frame_landmarks(
        &Identity::generate(0, cfg.seed),
        &FrameState {
            dx: 0.0,
            dy: 0.0,
            brow: 0.0,
            open: 0.5,
        },
        image,
    )?;
    let face = Tensor::randn(&[cfg.model.d_face], 1.0, &mut rng);
    let raw = Tensor::randn(&[s, cfg.model.d_audio_raw], 1.0, &mut rng);
    let audio = model.audio.project(&raw)?;

    let mut rows = Vec::new();
    for &r in resolutions {
        if r % (1 << (levels - 1)) != 0 || r == 0 {
            return Err(Error::invalid(format!(
                "resolution {r} must be a positive multiple of {}",
                1 << (levels - 1)
            )));
        }
        let reference = model.reference_features(&Tensor::randn(&[dz, r, r], 1.0, &mut rng))?;
        let masks = level_masks(&derive_region_masks(&lm, (r, r))?, levels)?;
        for hadvs in [false, true] {
            let opts = ForwardOptions { hadvs, temporal: true };
            memory::reset_peak();
            let base = memory::live_bytes();
            let start = Instant::now();
            ddim_sample(&[s, dz, r, r], &sched, cfg.guidance, cfg.seed, None, |x, t, drops| {
                let mut g = Graph::no_grad();
                let zv = g.constant(x.clone());
                let fv = g.constant(face.clone());
                let av = g.constant(audio.clone());
                let rv: Vec<Var> = reference.iter().map(|f| g.constant(f.clone())).collect();
                let inp = DenoiseInputs {
                    z_t: &zv,
                    t,
                    face: &fv,
                    audio: &av,
                    reference: &rv,
                    motion: None,
                    drops,
                };
                Ok(model.forward(&mut g, &inp, &masks, &cfg.hadvs, opts)?.into_value())
            })?;
            rows.push(ProfileRow {
                resolution: r,
                hadvs,
                seconds: start.elapsed().as_secs_f64(),
                peak_bytes: memory::peak_bytes() - base,
            });
        }
    }
    Ok(rows)
}

pub fn write_profile_csv(path: &Path, rows: &[ProfileRow]) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.resolution.to_string(),
                r.hadvs.to_string(),
                format!("{:.6}", r.seconds),
                r.peak_bytes.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["resolution", "hadvs", "seconds", "peak_bytes"], &body)
}
