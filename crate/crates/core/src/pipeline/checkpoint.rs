//! Saving and restoring the trained components.

use std::collections::BTreeMap;
use std::path::Path;

use super::{run_metadata, RunConfig};
use crate::denoiser::HalloModel;
use crate::encoders::{FaceEncoder, Vae};
use crate::error::{Error, Result};
use crate::nn::{read_checkpoint, save_checkpoint, Module};
use crate::util::{seeded_rng, sha256_hex};

/// A denoiser checkpoint with its manifest entries.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: HalloModel,
    pub meta: BTreeMap<String, String>,
}

fn architecture_hash(cfg: &RunConfig) -> String {
    let text = toml::to_string(&cfg.model).expect("denoiser config serializes");
    sha256_hex(format!("{text}\nd_z = {}", cfg.latent.d_z).as_bytes())
}

pub fn save_model(dir: &Path, model: &HalloModel, cfg: &RunConfig, kind: &str, extra: &[(&str, String)]) -> Result<()> {
    let mut meta = run_metadata(cfg, kind, extra);
    meta.push(("architecture".into(), architecture_hash(cfg)));
    meta.push(("fusion".into(), cfg.model.fusion.name().into()));
    save_checkpoint(dir, model, &meta)
}

/// Rebuilds the denoiser described by `cfg` and fills it from `dir`.
pub fn load_model(dir: &Path, cfg: &RunConfig) -> Result<ModelBundle> {
    let (state, meta) = read_checkpoint(dir)?;
    let expect = architecture_hash(cfg);
    if meta.get("architecture").is_some_and(|a| *a != expect) {
        return Err(Error::invalid(format!(
            "checkpoint {} was written for a different denoiser configuration",
            dir.display()
        )));
    }
    let mut model = HalloModel::new(cfg.model.clone(), cfg.latent.d_z, &mut seeded_rng(0))?;
    model.load_state(&state)?;
    Ok(ModelBundle { model, meta })
}

pub fn load_vae(dir: &Path, cfg: &RunConfig) -> Result<Vae> {
    let (state, _) = read_checkpoint(dir)?;
    let mut vae = Vae::new(cfg.latent, cfg.vae.widths, &mut seeded_rng(0))?;
    vae.load_state(&state)?;
    Ok(vae)
}

pub fn load_face(dir: &Path, cfg: &RunConfig) -> Result<FaceEncoder> {
    let (state, _) = read_checkpoint(dir)?;
    let ids = state
        .get("face.head")
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::MissingParam("face.head".into()))?;
    let mut enc = FaceEncoder::new(cfg.face.hidden, cfg.model.d_face, ids, &mut seeded_rng(0));
    enc.load_state(&state)?;
    Ok(enc)
}

pub(crate) fn save_module(dir: &Path, module: &dyn Module, cfg: &RunConfig, kind: &str) -> Result<()> {
    save_checkpoint(dir, module, &run_metadata(cfg, kind, &[]))
}
