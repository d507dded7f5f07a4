//! Long-video inference: the timeline is cut into clips of `S` frames and
//! each clip after the first is conditioned on the last `k` latents of the
//! clip before it.

use std::path::Path;

use super::train::level_masks;
use super::{run_metadata, write_manifest, RunConfig};
use crate::denoiser::{DenoiseInputs, ForwardOptions, HalloModel};
use crate::diffusion::{ddim_sample, NoiseSchedule};
use crate::encoders::{audio_segment, FaceEncoder, Vae};
use crate::error::{Error, Result};
use crate::image::write_ppm;
use crate::maskgen::{derive_region_masks, LandmarkSet, RegionMasks};
use crate::tensor::{htns, Graph, Tensor, Var};
use crate::util::{derive_seed, sha256_hex};

/// Inputs describing one person and one audio track.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// `[3, H_I, W_I]` in `[0, 1]`.
    pub reference_image: Tensor,
    pub landmarks: LandmarkSet,
    /// `[L, 12·D_raw]` per-frame audio features.
    pub audio: Tensor,
    pub fps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AnimateRequest<'a> {
    pub model: &'a HalloModel,
    pub vae: &'a Vae,
    pub face: &'a FaceEncoder,
    pub total_frames: usize,
    pub options: ForwardOptions,
    /// Per-step DDIM latents go to `<dir>/clip<c>/` when set.
    pub dump_steps: Option<&'a Path>,
}

/// Where a clip sits in the video and what it was conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub index: usize,
    pub start: usize,
    pub frames: usize,
    pub seed: u64,
    /// Video frame indices whose latents served as motion frames.
    pub motion_frames: Option<(usize, usize)>,
    /// SHA-256 of the motion latents' `f64` bytes.
    pub motion_digest: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AnimateOutput {
    /// `[3, H_I, W_I]` per frame.
    pub frames: Vec<Tensor>,
    /// `[D_z, H_z, W_z]` per frame.
    pub latents: Vec<Tensor>,
    /// The motion input of each clip, if any.
    pub motion_inputs: Vec<Option<Tensor>>,
    pub clips: Vec<ClipRecord>,
    pub masks: RegionMasks,
    pub manifest: Vec<(String, String)>,
}

/// SHA-256 of a tensor's shape and `f64` bytes.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(8 * (t.numel() + t.rank()));
    for &d in t.shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    let parts: Vec<Tensor> = frames
        .iter()
        .map(|f| {
            let s = f.shape().to_vec();
            f.reshape(&[&[1], &s[..]].concat())
        })
        .collect::<Result<_>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

pub fn animate(cfg: &RunConfig, req: &AnimateRequest, cond: &Conditioning) -> Result<AnimateOutput> {
    cfg.validate()?;
    if req.total_frames == 0 {
        return Err(Error::invalid("total_frames must be at least 1"));
    }
    if cond.audio.rank() != 2 {
        return Err(Error::InvalidShape {
            what: "audio features [L, D]".into(),
            shape: cond.audio.shape().to_vec(),
        });
    }
    let available = cond.audio.shape()[0];
    if available < req.total_frames && !cfg.inference.pad_audio {
        return Err(Error::invalid(format!(
            "audio covers {available} frames but {} were requested; enable pad_audio to zero-pad",
            req.total_frames
        )));
    }
    let sched = NoiseSchedule::from_config(cfg.schedule)?;
    let model = req.model;
    let k = cfg.model.motion_frames;
    let s_max = cfg.inference.clip_frames;
    let (hz, wz, dz) = (cfg.latent.h_z, cfg.latent.w_z, cfg.latent.d_z);

    let z_ref = req.vae.encode(&cond.reference_image)?;
    let face = req.face.encode(&cond.reference_image)?;
    let reference = model.reference_features(&z_ref)?;
    let masks = derive_region_masks(&cond.landmarks, (hz, wz))?;
    let levels = level_masks(&masks, cfg.model.levels())?;

    let mut latents: Vec<Tensor> = Vec::with_capacity(req.total_frames);
    let mut motion_inputs = Vec::new();
    let mut clips = Vec::new();
    let mut start = 0;
    while start < req.total_frames {
        let index = clips.len();
        let s = s_max.min(req.total_frames - start);
        let seed = derive_seed(cfg.seed, &format!("animate.clip{index}"));
        let motion = if k > 0 && latents.len() >= k {
            Some(stack_frames(&latents[latents.len() - k..])?)
        } else {
            None
        };
        let raw = audio_segment(&cond.audio, start as i64, s, cond.fps)?;
        let audio = model.audio.project(&raw)?;
        let dump = req.dump_steps.map(|d| d.join(format!("clip{index}")));
        let z = ddim_sample(&[s, dz, hz, wz], &sched, cfg.guidance, seed, dump.as_deref(), |x, t, drops| {
            let mut g = Graph::no_grad();
            let zv = g.constant(x.clone());
            let fv = g.constant(face.clone());
            let av = g.constant(audio.clone());
            let rv: Vec<Var> = reference.iter().map(|r| g.constant(r.clone())).collect();
            let mv = motion.as_ref().map(|m| g.constant(m.clone()));
            let inp = DenoiseInputs {
                z_t: &zv,
                t,
                face: &fv,
                audio: &av,
                reference: &rv,
                motion: mv.as_ref(),
                drops,
            };
            Ok(model.forward(&mut g, &inp, &levels, &cfg.hadvs, req.options)?.into_value())
        })?;
        clips.push(ClipRecord {
            index,
            start,
            frames: s,
            seed,
            motion_frames: motion.as_ref().map(|_| (latents.len() - k, latents.len() - 1)),
            motion_digest: motion.as_ref().map(tensor_digest),
        });
        motion_inputs.push(motion);
        for f in 0..s {
            latents.push(z.narrow(0, f, 1)?.reshape(&[dz, hz, wz])?);
        }
        start += s;
    }

    let decoded = req.vae.decode_batch(&stack_frames(&latents)?)?;
    let frames = (0..latents.len())
        .map(|f| decoded.narrow(0, f, 1)?.reshape(&cfg.latent.image_shape()))
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = run_metadata(
        cfg,
        "animation",
        &[
            ("total_frames", req.total_frames.to_string()),
            ("clip_frames", s_max.to_string()),
            ("motion_frames", k.to_string()),
            ("clips", clips.len().to_string()),
            ("reference_digest", tensor_digest(&cond.reference_image)),
            ("audio_digest", tensor_digest(&cond.audio)),
            ("hadvs", req.options.hadvs.to_string()),
        ],
    );
    for c in &clips {
        let p = format!("clip{}", c.index);
        manifest.push((format!("{p}.start"), c.start.to_string()));
        manifest.push((format!("{p}.frames"), c.frames.to_string()));
        manifest.push((format!("{p}.seed"), c.seed.to_string()));
        if let (Some((a, b)), Some(d)) = (c.motion_frames, &c.motion_digest) {
            manifest.push((format!("{p}.motion_frames"), format!("{a}-{b}")));
            manifest.push((format!("{p}.motion_digest"), d.clone()));
        }
    }
    Ok(AnimateOutput {
        frames,
        latents,
        motion_inputs,
        clips,
        masks,
        manifest,
    })
}

impl AnimateOutput {
    /// Writes `frame_<nnnn>.ppm`, `latents.htns`, `motion_clip<c>.htns` and
    /// `manifest.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            write_ppm(dir.join(format!("frame_{i:04}.ppm")), f)?;
        }
        htns::write(dir.join("latents.htns"), &stack_frames(&self.latents)?)?;
        for (c, m) in self.motion_inputs.iter().enumerate() {
            if let Some(m) = m {
                htns::write(dir.join(format!("motion_clip{c}.htns")), m)?;
            }
        }
        let mut entries = self.manifest.clone();
        for (i, l) in self.latents.iter().enumerate() {
            entries.push((format!("latent{i:04}.digest"), tensor_digest(l)));
        }
        write_manifest(&dir.join("manifest.txt"), &entries)
    }
}
