//! Benchmark fixtures shared by the criterion targets.

use hallo_core::denoiser::HalloModel;
use hallo_core::maskgen::{derive_region_masks, LandmarkSet, RegionMasks};
use hallo_core::pipeline::{frame_landmarks, FrameState, Identity, RunConfig};
use hallo_core::util::seeded_rng;
use hallo_core::{Result, Tensor};

/// Landmarks of identity 0 with the mouth half open.
pub fn landmarks(image: usize) -> Result<LandmarkSet> {
    let state = FrameState {
        dx: 0.0,
        dy: 0.0,
        brow: 0.0,
        open: 0.5,
    };
    frame_landmarks(&Identity::generate(0, 0), &state, image)
}

/// A freshly initialised default model with inputs for one `side`×`side` clip.
pub struct DenoiserFixture {
    pub cfg: RunConfig,
    pub model: HalloModel,
    pub z: Tensor,
    pub face: Tensor,
    pub audio: Tensor,
    pub reference: Vec<Tensor>,
    pub masks: Vec<RegionMasks>,
}

impl DenoiserFixture {
    pub fn new(side: usize) -> Result<Self> {
        let cfg = RunConfig::default();
        let mut rng = seeded_rng(0);
        let dz = cfg.latent.d_z;
        let model = HalloModel::new(cfg.model.clone(), dz, &mut rng)?;
        let s = cfg.inference.clip_frames;
        let full = derive_region_masks(&landmarks(cfg.latent.image_shape()[1])?, (side, side))?;
        let masks = (0..cfg.model.levels())
            .map(|i| full.downsample(side >> i, side >> i))
            .collect::<Result<Vec<_>>>()?;
        let raw = Tensor::randn(&[s, cfg.model.d_audio_raw], 1.0, &mut rng);
        Ok(DenoiserFixture {
            z: Tensor::randn(&[s, dz, side, side], 1.0, &mut rng),
            face: Tensor::randn(&[cfg.model.d_face], 1.0, &mut rng),
            audio: model.audio.project(&raw)?,
            reference: model.reference_features(&Tensor::randn(&[dz, side, side], 1.0, &mut rng))?,
            masks,
            model,
            cfg,
        })
    }
}
