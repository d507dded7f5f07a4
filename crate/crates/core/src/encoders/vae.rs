//! A small convolutional autoencoder standing in for a pretrained image VAE.
//!
//! ```text
//! encoder: conv3x3/2 3→c0, SiLU, conv3x3/2 c0→c1, SiLU, conv3x3 c1→D_z, × scale
//! decoder: ÷ scale, conv3x3 D_z→c1, SiLU, up×2, conv3x3 c1→c0, SiLU, up×2, conv3x3 c0→3
//! ```
//!
//! `scale` is fixed after training so that encoded latents have unit
//! standard deviation over the training images.

use rand::Rng;

use super::LatentSpec;
use crate::error::{Error, Result};
use crate::nn::{Conv3x3, Module, Param};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Vae {
    pub spec: LatentSpec,
    pub enc: [Conv3x3; 3],
    pub dec: [Conv3x3; 3],
    /// `[1]`; not trained by gradient.
    pub latent_scale: Param,
}

pub const SCALE_PARAM: &str = "vae.latent_scale";

impl Vae {
    pub fn new<R: Rng + ?Sized>(spec: LatentSpec, widths: [usize; 2], rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if spec.h_i != 4 * spec.h_z || spec.w_i != 4 * spec.w_z {
            return Err(Error::invalid(format!(
                "the toy VAE downsamples by exactly 4; got image {}x{} for latent {}x{}",
                spec.h_i, spec.w_i, spec.h_z, spec.w_z
            )));
        }
        let [c0, c1] = widths;
        Ok(Vae {
            spec,
            enc: [
                Conv3x3::new("vae.enc0", 3, c0, 2, rng),
                Conv3x3::new("vae.enc1", c0, c1, 2, rng),
                Conv3x3::new("vae.enc2", c1, spec.d_z, 1, rng),
            ],
            dec: [
                Conv3x3::new("vae.dec0", spec.d_z, c1, 1, rng),
                Conv3x3::new("vae.dec1", c1, c0, 1, rng),
                Conv3x3::new("vae.dec2", c0, 3, 1, rng),
            ],
            latent_scale: Param::new(SCALE_PARAM, Tensor::ones(&[1])),
        })
    }

    fn scale(&self) -> f64 {
        self.latent_scale.value.data()[0]
    }

    /// Unscaled encoder: `[N, 3, H_I, W_I]` → `[N, D_z, H_z, W_z]`.
    pub fn encode_raw(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.spec.image_shape() {
            return Err(Error::InvalidShape {
                what: format!("VAE input [N, 3, {}, {}]", self.spec.h_i, self.spec.w_i),
                shape: s.to_vec(),
            });
        }
        let h = self.enc[0].forward(g, x)?;
        let h = g.silu(&h);
        let h = self.enc[1].forward(g, &h)?;
        let h = g.silu(&h);
        self.enc[2].forward(g, &h)
    }

    /// Unscaled, unclamped decoder: `[N, D_z, H_z, W_z]` → `[N, 3, H_I, W_I]`.
    pub fn decode_raw(&self, g: &mut Graph, z: &Var) -> Result<Var> {
        let s = z.shape();
        if s.len() != 4 || s[1..] != self.spec.latent_shape() {
            return Err(Error::InvalidShape {
                what: format!("VAE latent [N, {}, {}, {}]", self.spec.d_z, self.spec.h_z, self.spec.w_z),
                shape: s.to_vec(),
            });
        }
        let h = self.dec[0].forward(g, z)?;
        let h = g.silu(&h);
        let h = g.upsample2x(&h)?;
        let h = self.dec[1].forward(g, &h)?;
        let h = g.silu(&h);
        let h = g.upsample2x(&h)?;
        self.dec[2].forward(g, &h)
    }

    /// Mean squared reconstruction error of a `[N, 3, H_I, W_I]` batch.
    pub fn reconstruction_loss(&self, g: &mut Graph, images: &Var) -> Result<Var> {
        let z = self.encode_raw(g, images)?;
        let y = self.decode_raw(g, &z)?;
        g.mse(&y, images)
    }

    /// `[N, 3, H_I, W_I]` → scaled latents `[N, D_z, H_z, W_z]`.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(images.clone());
        Ok(self.encode_raw(&mut g, &x)?.into_value().scale(self.scale()))
    }

    /// Scaled latents `[N, D_z, H_z, W_z]` → images clamped to `[0, 1]`.
    pub fn decode_batch(&self, latents: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let z = g.constant(latents.scale(1.0 / self.scale()));
        Ok(self.decode_raw(&mut g, &z)?.into_value().map(|v| v.clamp(0.0, 1.0)))
    }

    /// `[3, H_I, W_I]` → `[D_z, H_z, W_z]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape().to_vec();
        let batch = image.reshape(&[&[1], &s[..]].concat())?;
        let z = self.encode_batch(&batch)?;
        z.reshape(&self.spec.latent_shape())
    }

    /// `[D_z, H_z, W_z]` → `[3, H_I, W_I]` in `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let s = latent.shape().to_vec();
        let batch = latent.reshape(&[&[1], &s[..]].concat())?;
        let img = self.decode_batch(&batch)?;
        img.reshape(&self.spec.image_shape())
    }

    /// Sets the latent scale to `1 / std` of the unscaled latents of `images`.
    pub fn calibrate_scale(&mut self, images: &Tensor) -> Result<()> {
        self.latent_scale.value = Tensor::ones(&[1]);
        let z = self.encode_batch(images)?;
        let mean = z.mean();
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.numel() as f64;
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::NonFinite("latent variance".into()));
        }
        self.latent_scale.value = Tensor::full(&[1], 1.0 / var.sqrt());
        Ok(())
    }
}

impl Module for Vae {
    fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.enc.iter().chain(&self.dec).flat_map(|c| c.params()).collect();
        out.push(&self.latent_scale);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.enc.iter_mut().chain(self.dec.iter_mut()).flat_map(|c| c.params_mut()).collect();
        out.push(&mut self.latent_scale);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    #[test]
    fn shape_contracts_and_determinism() {
        let mut rng = seeded_rng(0);
        let vae = Vae::new(LatentSpec::default(), [4, 8], &mut rng).unwrap();
        let img = Tensor::from_fn(&[3, 64, 64], |i| (i as f64 * 0.013).sin() * 0.5 + 0.5);
        let z = vae.encode(&img).unwrap();
        assert_eq!(z.shape(), &[4, 16, 16]);
        assert!(z.bit_eq(&vae.encode(&img).unwrap()));
        let back = vae.decode(&z.scale(50.0)).unwrap();
        assert_eq!(back.shape(), &[3, 64, 64]);
        assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(vae.encode(&Tensor::zeros(&[3, 32, 32])).is_err());
        assert!(vae.decode(&Tensor::zeros(&[4, 8, 8])).is_err());
    }

    #[test]
    fn rejects_non_4x_geometry() {
        let spec = LatentSpec {
            h_z: 8,
            w_z: 8,
            ..LatentSpec::default()
        };
        assert!(Vae::new(spec, [4, 8], &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn calibrated_latents_have_unit_std() {
        let mut rng = seeded_rng(1);
        let mut vae = Vae::new(LatentSpec::default(), [4, 8], &mut rng).unwrap();
        let imgs = Tensor::uniform(&[2, 3, 64, 64], 0.5, &mut rng).map(|v| v + 0.5);
        vae.calibrate_scale(&imgs).unwrap();
        let z = vae.encode_batch(&imgs).unwrap();
        let m = z.mean();
        let std = (z.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / z.numel() as f64).sqrt();
        assert!((std - 1.0).abs() < 1e-9, "{std}");
    }
}
