//! Encoder training and the two denoiser stages.
//!
//! Stage 1 learns the spatial UNet, the reference network and the face
//! cross-attention on (reference frame, target frame) pairs with HADVS and
//! temporal attention switched off. Stage 2 freezes all of that and learns
//! the audio path, HADVS and temporal attention on clips with ground-truth
//! motion frames.

use std::path::Path;

use rand::Rng;

use super::checkpoint::{save_model, save_module};
use super::optim::Optimizer;
use super::synth::{ClipMeta, Corpus};
use super::{write_csv, RunConfig};
use crate::denoiser::{param_group, DenoiseInputs, Drops, ForwardOptions, HalloModel, ParamGroup};
use crate::diffusion::{condition_dropout, training_loss, NoiseSchedule};
use crate::encoders::{audio_segment, pooled_features, FaceEncoder, Vae};
use crate::error::{Error, Result};
use crate::maskgen::{derive_region_masks, RegionMasks};
use crate::nn::Module;
use crate::tensor::{Graph, Tensor, Var};
use crate::util::{derive_seed, seeded_rng, DetRng};

/// Per-step losses of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub window: usize,
}

impl TrainReport {
    /// `(initial, final)` smoothed losses.
    pub fn smoothed(&self) -> (f64, f64) {
        smoothed(&self.losses, self.window)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), format!("{l:.9}")])
            .collect();
        write_csv(path, &["step", "loss"], &rows)
    }
}

/// Means of the first and of the last `window` values (clamped to the length).
pub fn smoothed(losses: &[f64], window: usize) -> (f64, f64) {
    if losses.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let w = window.clamp(1, losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..w]), mean(&losses[losses.len() - w..]))
}

fn check_loss(loss: &Var, what: &str, step: usize) -> Result<f64> {
    let v = loss.value().item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} loss at step {step}")));
    }
    Ok(v)
}

fn check_image_size(cfg: &RunConfig, corpus: &Corpus) -> Result<()> {
    let s = corpus.config.image_size;
    if s != cfg.latent.h_i || s != cfg.latent.w_i {
        return Err(Error::invalid(format!(
            "corpus images are {s}x{s} but the latent spec expects {}x{}",
            cfg.latent.h_i, cfg.latent.w_i
        )));
    }
    Ok(())
}

fn random_frames(corpus: &Corpus, n: usize, rng: &mut DetRng) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let mut imgs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let clip = &corpus.train[rng.random_range(0..corpus.train.len())];
        imgs.push(clip.read_frame(rng.random_range(0..clip.frames))?);
        labels.push(clip.identity);
    }
    Ok((imgs, labels))
}

fn stack(frames: &[Tensor]) -> Result<Tensor> {
    let parts: Vec<Tensor> = frames
        .iter()
        .map(|f| {
            let s = f.shape().to_vec();
            f.reshape(&[&[1], &s[..]].concat())
        })
        .collect::<Result<_>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

/// Trains the autoencoder on random corpus frames, then calibrates the
/// latent scale. Returns the model and the reconstruction losses.
pub fn train_vae(cfg: &RunConfig, corpus: &Corpus, out: Option<&Path>) -> Result<(Vae, TrainReport)> {
    check_image_size(cfg, corpus)?;
    let mut vae = Vae::new(cfg.latent, cfg.vae.widths, &mut seeded_rng(derive_seed(cfg.seed, "vae.init")))?;
    let mut opt = Optimizer::new(cfg.optimizer.with_lr(cfg.vae.learning_rate))?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, "vae.data"));
    let mut losses = Vec::with_capacity(cfg.vae.steps);
    for step in 0..cfg.vae.steps {
        let (imgs, _) = random_frames(corpus, cfg.vae.batch_size.max(1), &mut rng)?;
        let mut g = Graph::with_trainable(|n| n != crate::encoders::SCALE_PARAM);
        let x = g.constant(stack(&imgs)?);
        let loss = vae.reconstruction_loss(&mut g, &x)?;
        losses.push(check_loss(&loss, "vae", step)?);
        g.backward(&loss)?;
        opt.step(vae.params_mut(), &g.named_grads())?;
    }
    let (calib, _) = random_frames(corpus, 32, &mut seeded_rng(derive_seed(cfg.seed, "vae.calibration")))?;
    vae.calibrate_scale(&stack(&calib)?)?;
    let report = TrainReport { losses, window: 20 };
    if let Some(dir) = out {
        save_module(dir, &vae, cfg, "vae")?;
        report.write_csv(&dir.join("loss.csv"))?;
    }
    Ok((vae, report))
}

/// Mean squared error of `decode(encode(x))` over `frames`.
pub fn reconstruction_mse(vae: &Vae, frames: &[Tensor]) -> Result<f64> {
    let x = stack(frames)?;
    let y = vae.decode_batch(&vae.encode_batch(&x)?)?;
    Ok(y.sub(&x)?.sq_norm() / x.numel() as f64)
}

/// Trains the identity encoder to classify the corpus identities.
pub fn train_face(cfg: &RunConfig, corpus: &Corpus, out: Option<&Path>) -> Result<(FaceEncoder, TrainReport)> {
    let ids = corpus.config.ids;
    let mut enc = FaceEncoder::new(
        cfg.face.hidden,
        cfg.model.d_face,
        ids,
        &mut seeded_rng(derive_seed(cfg.seed, "face.init")),
    );
    let mut opt = Optimizer::new(cfg.optimizer.with_lr(cfg.face.learning_rate))?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, "face.data"));
    let mut losses = Vec::with_capacity(cfg.face.steps);
    for step in 0..cfg.face.steps {
        let (imgs, labels) = random_frames(corpus, cfg.face.batch_size.max(1), &mut rng)?;
        let pooled: Vec<Tensor> = imgs
            .iter()
            .map(|i| pooled_features(i).and_then(|p| p.reshape(&[1, p.numel()])))
            .collect::<Result<_>>()?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::concat(&pooled.iter().collect::<Vec<_>>(), 0)?);
        let loss = enc.classification_loss(&mut g, &x, &labels)?;
        losses.push(check_loss(&loss, "face", step)?);
        g.backward(&loss)?;
        opt.step(enc.params_mut(), &g.named_grads())?;
    }
    let report = TrainReport { losses, window: 20 };
    if let Some(dir) = out {
        save_module(dir, &enc, cfg, "face")?;
        report.write_csv(&dir.join("loss.csv"))?;
    }
    Ok((enc, report))
}

/// One clip with everything the frozen encoders contribute.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub identity: usize,
    /// `[D_z, H_z, W_z]` per frame.
    pub latents: Vec<Tensor>,
    /// Identity embedding per frame.
    pub faces: Vec<Tensor>,
    /// `[frames, 12·D_raw]`
    pub audio: Tensor,
    /// Region masks of frame 0 at every UNet level.
    pub masks: Vec<RegionMasks>,
}

#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub clips: Vec<PreparedClip>,
    pub fps: f64,
}

/// Per-level masks for a latent-resolution mask set.
pub(crate) fn level_masks(masks: &RegionMasks, levels: usize) -> Result<Vec<RegionMasks>> {
    let (h, w) = masks.size();
    (0..levels).map(|i| masks.downsample(h >> i, w >> i)).collect()
}

/// Encodes every frame of `clips` with the frozen VAE and face encoder.
pub fn prepare_corpus(cfg: &RunConfig, corpus: &Corpus, clips: &[ClipMeta], vae: &Vae, face: &FaceEncoder) -> Result<PreparedCorpus> {
    check_image_size(cfg, corpus)?;
    let latent = (cfg.latent.h_z, cfg.latent.w_z);
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        let frames = clip.read_frames()?;
        let z = vae.encode_batch(&stack(&frames)?)?;
        let latents = (0..frames.len())
            .map(|k| z.narrow(0, k, 1)?.reshape(&cfg.latent.latent_shape()))
            .collect::<Result<_>>()?;
        let faces = frames.iter().map(|f| face.encode(f)).collect::<Result<_>>()?;
        let masks = derive_region_masks(&clip.landmarks()?, latent)?;
        out.push(PreparedClip {
            identity: clip.identity,
            latents,
            faces,
            audio: clip.audio()?,
            masks: level_masks(&masks, cfg.model.levels())?,
        });
    }
    Ok(PreparedCorpus {
        clips: out,
        fps: corpus.config.fps,
    })
}

fn stack_latents(latents: &[Tensor]) -> Result<Tensor> {
    stack(latents)
}

struct Stage1Sample {
    clip: usize,
    reference: usize,
    drops: Drops,
}

/// Trains the spatial half of a freshly initialized denoiser.
pub fn train_stage1(cfg: &RunConfig, data: &PreparedCorpus, out: Option<&Path>) -> Result<(HalloModel, TrainReport)> {
    cfg.validate()?;
    if data.clips.is_empty() {
        return Err(Error::invalid("stage 1 needs at least one clip"));
    }
    let sched = NoiseSchedule::from_config(cfg.schedule)?;
    let mut model = HalloModel::new(cfg.model.clone(), cfg.latent.d_z, &mut seeded_rng(derive_seed(cfg.seed, "stage1.init")))?;
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, "stage1.data"));
    let opts = ForwardOptions {
        hadvs: false,
        temporal: false,
    };
    let mut losses = Vec::with_capacity(cfg.stage1.steps);
    for step in 0..cfg.stage1.steps {
        let mut samples = Vec::with_capacity(cfg.stage1.batch_size);
        let mut batch = Vec::with_capacity(cfg.stage1.batch_size);
        for _ in 0..cfg.stage1.batch_size {
            let clip = rng.random_range(0..data.clips.len());
            let c = &data.clips[clip];
            let reference = rng.random_range(0..c.latents.len());
            let mut target = rng.random_range(0..c.latents.len());
            if c.latents.len() > 1 && target == reference {
                target = (target + 1) % c.latents.len();
            }
            let drops = condition_dropout(cfg.stage1.p_drop, &mut rng)?;
            samples.push(Stage1Sample { clip, reference, drops });
            batch.push(stack_latents(&c.latents[target..=target])?);
        }
        let mut g = Graph::with_trainable(|n| param_group(n) == ParamGroup::Spatial);
        let silent = g.constant(Tensor::zeros(&[1, cfg.model.d_audio]));
        let loss = training_loss(&mut g, &batch, &sched, &mut rng, |g, i, z_t, t| {
            let s = &samples[i];
            let c = &data.clips[s.clip];
            let z_ref = g.constant(c.latents[s.reference].clone());
            let reference = model.reference_forward(g, &z_ref)?;
            let face = g.constant(c.faces[s.reference].clone());
            let z = g.constant(z_t.clone());
            let inp = DenoiseInputs {
                z_t: &z,
                t,
                face: &face,
                audio: &silent,
                reference: &reference,
                motion: None,
                drops: Drops {
                    audio: true,
                    motion: true,
                    ..s.drops
                },
            };
            model.forward(g, &inp, &c.masks, &cfg.hadvs, opts)
        })?;
        losses.push(check_loss(&loss, "stage 1", step)?);
        g.backward(&loss)?;
        let grads = g.named_grads();
        drop(g);
        opt.step(model.params_mut(), &grads)?;
    }
    let report = TrainReport {
        losses,
        window: cfg.stage1.smoothing_window,
    };
    if let Some(dir) = out {
        let (a, b) = report.smoothed();
        save_model(dir, &model, cfg, "stage1", &[("initial_loss", format!("{a:.6}")), ("final_loss", format!("{b:.6}"))])?;
        report.write_csv(&dir.join("loss.csv"))?;
    }
    Ok((model, report))
}

struct Stage2Sample {
    clip: usize,
    reference: usize,
    start: usize,
    drops: Drops,
}

/// Trains the audio path, HADVS and temporal attention of `model` with its
/// spatial parameters frozen.
pub fn train_stage2(cfg: &RunConfig, data: &PreparedCorpus, mut model: HalloModel, out: Option<&Path>) -> Result<(HalloModel, TrainReport)> {
    cfg.validate()?;
    let sched = NoiseSchedule::from_config(cfg.schedule)?;
    let k = cfg.model.motion_frames;
    let s = cfg.stage2.clip_frames;
    let usable: Vec<usize> = (0..data.clips.len()).filter(|&i| data.clips[i].latents.len() >= k + s).collect();
    if usable.is_empty() {
        return Err(Error::invalid(format!("stage 2 needs clips of at least {} frames", k + s)));
    }
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, "stage2.data"));
    let refs: Vec<Vec<Vec<Tensor>>> = data
        .clips
        .iter()
        .map(|c| c.latents.iter().map(|z| model.reference_features(z)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut losses = Vec::with_capacity(cfg.stage2.steps);
    for step in 0..cfg.stage2.steps {
        let mut samples = Vec::with_capacity(cfg.stage2.batch_size);
        let mut batch = Vec::with_capacity(cfg.stage2.batch_size);
        for _ in 0..cfg.stage2.batch_size {
            let clip = usable[rng.random_range(0..usable.len())];
            let c = &data.clips[clip];
            let start = rng.random_range(0..=c.latents.len() - k - s);
            let reference = rng.random_range(0..c.latents.len());
            let drops = condition_dropout(cfg.stage2.p_drop, &mut rng)?;
            samples.push(Stage2Sample {
                clip,
                reference,
                start,
                drops,
            });
            batch.push(stack_latents(&c.latents[start + k..start + k + s])?);
        }
        let mut g = Graph::with_trainable(|n| param_group(n) == ParamGroup::Motion);
        let loss = training_loss(&mut g, &batch, &sched, &mut rng, |g, i, z_t, t| {
            let smp = &samples[i];
            let c = &data.clips[smp.clip];
            let reference: Vec<Var> = refs[smp.clip][smp.reference].iter().map(|r| g.constant(r.clone())).collect();
            let face = g.constant(c.faces[smp.reference].clone());
            let raw = audio_segment(&c.audio, (smp.start + k) as i64, s, data.fps)?;
            let raw = g.constant(raw);
            let audio = model.audio.forward(g, &raw)?;
            let motion = if k > 0 {
                Some(g.constant(stack_latents(&c.latents[smp.start..smp.start + k])?))
            } else {
                None
            };
            let z = g.constant(z_t.clone());
            let inp = DenoiseInputs {
                z_t: &z,
                t,
                face: &face,
                audio: &audio,
                reference: &reference,
                motion: motion.as_ref(),
                drops: smp.drops,
            };
            model.forward(g, &inp, &c.masks, &cfg.hadvs, ForwardOptions::default())
        })?;
        losses.push(check_loss(&loss, "stage 2", step)?);
        g.backward(&loss)?;
        let grads = g.named_grads();
        drop(g);
        opt.step(model.params_mut(), &grads)?;
    }
    let report = TrainReport {
        losses,
        window: cfg.stage2.smoothing_window,
    };
    if let Some(dir) = out {
        let (a, b) = report.smoothed();
        save_model(
            dir,
            &model,
            cfg,
            "stage2",
            &[
                ("branches", crate::hadvs::Region::set_name(&cfg.hadvs.branches)),
                ("initial_loss", format!("{a:.6}")),
                ("final_loss", format!("{b:.6}")),
            ],
        )?;
        report.write_csv(&dir.join("loss.csv"))?;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::super::synth::{synthesize, SynthConfig};
    use super::*;

    fn tiny_corpus(dir: &Path) -> Corpus {
        synthesize(
            &SynthConfig {
                ids: 2,
                clips: 2,
                frames: 5,
                heldout: 1,
                heldout_frames: 6,
                image_size: 32,
                d_raw: 1,
                ..SynthConfig::default()
            },
            dir,
        )
        .unwrap()
    }

    #[test]
    fn smoothing_windows() {
        assert_eq!(smoothed(&[4.0, 2.0, 1.0, 1.0], 2), (3.0, 1.0));
        assert_eq!(smoothed(&[4.0, 2.0], 10), (3.0, 3.0));
        assert!(smoothed(&[], 2).0.is_nan());
    }

    #[test]
    fn stages_freeze_what_they_should() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let cfg = RunConfig {
            model: crate::denoiser::DenoiserConfig {
                d_audio_raw: 12,
                ..RunConfig::tiny().model
            },
            ..RunConfig::tiny()
        };
        let (vae, _) = train_vae(&cfg, &corpus, Some(&dir.path().join("vae"))).unwrap();
        let (face, _) = train_face(&cfg, &corpus, None).unwrap();
        let data = prepare_corpus(&cfg, &corpus, &corpus.train, &vae, &face).unwrap();
        assert_eq!(data.clips[0].latents[0].shape(), &[4, 8, 8]);
        assert_eq!(data.clips[0].masks[1].size(), (4, 4));

        let fresh = HalloModel::new(cfg.model.clone(), 4, &mut seeded_rng(derive_seed(cfg.seed, "stage1.init"))).unwrap();
        let (m1, r1) = train_stage1(&cfg, &data, Some(&dir.path().join("s1"))).unwrap();
        assert_eq!(r1.losses.len(), 4);
        let (before, after) = (fresh.state(), m1.state());
        for (name, t) in &before {
            let same = t.bit_eq(&after[name]);
            match param_group(name) {
                ParamGroup::Motion => assert!(same, "{name} moved in stage 1"),
                ParamGroup::Spatial if name.contains("null.") => {}
                // one face token: every query attends to it with weight 1
                ParamGroup::Spatial if name.contains(".face.w_q") || name.contains(".face.w_k") => {}
                ParamGroup::Spatial => assert!(!same, "{name} did not move in stage 1"),
            }
        }

        let (m2, _) = train_stage2(&cfg, &data, m1.clone(), Some(&dir.path().join("s2"))).unwrap();
        let (before, after) = (m1.state(), m2.state());
        for (name, t) in &before {
            if param_group(name) == ParamGroup::Spatial {
                assert!(t.bit_eq(&after[name]), "{name} moved in stage 2");
            }
        }
        let zc = &after["unet.l0.hadvs.zero_conv.lip.weight"];
        assert!(zc.data().iter().any(|&v| v != 0.0));

        let (again, _) = train_stage1(&cfg, &data, None).unwrap();
        assert!(again.state().iter().all(|(n, t)| t.bit_eq(&m1.state()[n])));
        let reloaded = super::super::load_model(&dir.path().join("s1"), &cfg).unwrap();
        assert_eq!(reloaded.meta["kind"], "stage1");
        let vae2 = super::super::load_vae(&dir.path().join("vae"), &cfg).unwrap();
        assert!(vae2.latent_scale.value.max_abs_diff(&vae.latent_scale.value).unwrap() < 1e-6);
    }
}
