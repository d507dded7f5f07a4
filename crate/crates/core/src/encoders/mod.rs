//! Frozen encoders: the toy image VAE, the face identity encoder and the
//! audio feature projection trained together with the denoiser.

mod audio;
mod face;
mod vae;

pub use audio::{audio_segment, synthetic_audio_features, AudioProjection, AUDIO_LAYERS};
pub use face::{pooled_features, FaceEncoder, POOL_GRID};
pub use vae::{Vae, SCALE_PARAM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image and latent geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentSpec {
    pub h_z: usize,
    pub w_z: usize,
    pub d_z: usize,
    pub h_i: usize,
    pub w_i: usize,
}

impl Default for LatentSpec {
    fn default() -> Self {
        LatentSpec {
            h_z: 16,
            w_z: 16,
            d_z: 4,
            h_i: 64,
            w_i: 64,
        }
    }
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h_z == 0 || self.w_z == 0 || self.d_z == 0 || self.h_i == 0 || self.w_i == 0 {
            return Err(Error::invalid(format!("latent spec has a zero extent: {self:?}")));
        }
        if self.h_i % self.h_z != 0 || self.w_i % self.w_z != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not an integer multiple of latent {}x{}",
                self.h_i, self.w_i, self.h_z, self.w_z
            )));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.d_z, self.h_z, self.w_z]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.h_i, self.w_i]
    }
}
