//! The noise predictor `ε_θ`: a small UNet over a block of latent frames.
//!
//! Frames are processed as a batch `[F, C, H, W]` with `F = k + S`: `k`
//! motion frames followed by `S` target frames. Each resolution level runs
//!
//! ```text
//! ResBlock(t) → spatial self-attn (+ reference tokens as keys/values)
//!             → face cross-attn → HADVS residual (targets only)
//!             → temporal self-attn across the F frames at every site
//! ```
//!
//! then downsamples; the decoder upsamples, adds the level's skip and finally
//! drops the motion frames. A reference network with the same stem and
//! residual blocks encodes the reference latent once into per-level tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{batched_cross_attention, AttentionParams};
use crate::encoders::AudioProjection;
use crate::error::{Error, Result};
use crate::hadvs::{hadvs_forward, FusionMode, HadvsConfig, HadvsParams};
use crate::maskgen::RegionMasks;
use crate::nn::{Conv3x3, LinearParams, Module, Param};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Channels per resolution level; each level halves the spatial size.
    pub channels: Vec<usize>,
    pub temb_dim: usize,
    /// Number of motion frames `k`.
    pub motion_frames: usize,
    /// Audio rows on each side of a frame that it attends to.
    pub audio_context: usize,
    pub heads: usize,
    pub d_face: usize,
    pub d_audio: usize,
    /// Width of the ingested per-frame audio features (`12 · D_raw`).
    pub d_audio_raw: usize,
    pub audio_hidden: usize,
    pub fusion: FusionMode,
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: vec![16, 32],
            temb_dim: 32,
            motion_frames: 2,
            audio_context: 2,
            heads: 1,
            d_face: 16,
            d_audio: 32,
            d_audio_raw: 96,
            audio_hidden: 64,
            fusion: FusionMode::ZeroConvolution,
            timesteps: 100,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid(format!("channels {:?} must be non-empty and positive", self.channels)));
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            return Err(Error::invalid(format!("timestep embedding width {} must be even", self.temb_dim)));
        }
        if self.heads == 0 || self.channels.iter().any(|c| c % self.heads != 0) {
            return Err(Error::invalid(format!("{} heads do not divide channels {:?}", self.heads, self.channels)));
        }
        if self.timesteps == 0 || self.d_face == 0 || self.d_audio == 0 || self.d_audio_raw == 0 {
            return Err(Error::invalid("timesteps and embedding widths must be positive"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Tokens each frame attends to in the audio cross-attention.
    pub fn audio_tokens(&self) -> usize {
        2 * self.audio_context + 1
    }
}

/// Which conditions are replaced by their learned null embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Drops {
    /// The image condition: reference features and identity embedding.
    pub reference: bool,
    pub audio: bool,
    pub motion: bool,
}

impl Drops {
    pub const NONE: Drops = Drops {
        reference: false,
        audio: false,
        motion: false,
    };
    pub const ALL: Drops = Drops {
        reference: true,
        audio: true,
        motion: true,
    };
}

/// Blocks that can be switched off for ablations and equivalence checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub hadvs: bool,
    pub temporal: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            hadvs: true,
            temporal: true,
        }
    }
}

/// Parameters are trained in one of two stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Spatial UNet blocks, reference network, face attention, image nulls.
    Spatial,
    /// HADVS, temporal attention, audio projection, audio and motion nulls.
    Motion,
}

pub fn param_group(name: &str) -> ParamGroup {
    let motion = name.contains(".hadvs.")
        || name.contains(".temporal.")
        || name.starts_with("audio.")
        || name == "null.audio"
        || name == "null.motion";
    if motion {
        ParamGroup::Motion
    } else {
        ParamGroup::Spatial
    }
}

/// Sinusoidal features `[sin(t·ω_j), cos(t·ω_j)]`, `ω_j = 10000^(−j/half)`,
/// as a `[1, dim]` row.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let j = i % half;
        let w = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let x = t as f64 * w;
        if i < half {
            x.sin()
        } else {
            x.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub temb: LinearParams,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(name: &str, c: usize, temb_dim: usize, rng: &mut R) -> Self {
        ResBlock {
            conv1: Conv3x3::new(&format!("{name}.conv1"), c, c, 1, rng),
            conv2: Conv3x3::new(&format!("{name}.conv2"), c, c, 1, rng),
            temb: LinearParams::new(&format!("{name}.temb"), temb_dim, c, true, rng),
        }
    }

    /// `h + conv2(silu(conv1(silu(h)) + W·temb))`.
    fn forward(&self, g: &mut Graph, h: &Var, temb: &Var) -> Result<Var> {
        let c = self.conv1.out_channels();
        let x = g.silu(h);
        let x = self.conv1.forward(g, &x)?;
        let e = self.temb.forward(g, temb)?;
        let e = g.reshape(&e, &[1, c, 1, 1])?;
        let x = g.add(&x, &e)?;
        let x = g.silu(&x);
        let x = self.conv2.forward(g, &x)?;
        g.add(h, &x)
    }
}

impl Module for ResBlock {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.conv1.params();
        out.extend(self.conv2.params());
        out.extend(self.temb.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.conv1.params_mut();
        out.extend(self.conv2.params_mut());
        out.extend(self.temb.params_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct UNetLevel {
    pub res: ResBlock,
    pub spatial: AttentionParams,
    pub face: AttentionParams,
    pub hadvs: HadvsParams,
    /// `W_V` starts at zero, so the block is a no-op until trained.
    pub temporal: AttentionParams,
    /// Encoder downsampling to the next level.
    pub down: Option<Conv3x3>,
    /// Decoder convolution from the next level back to this one.
    pub up: Option<Conv3x3>,
}

impl Module for UNetLevel {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.res.params();
        out.extend(self.spatial.params());
        out.extend(self.face.params());
        out.extend(self.hadvs.params());
        out.extend(self.temporal.params());
        for c in self.down.iter().chain(&self.up) {
            out.extend(c.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.res.params_mut();
        out.extend(self.spatial.params_mut());
        out.extend(self.face.params_mut());
        out.extend(self.hadvs.params_mut());
        out.extend(self.temporal.params_mut());
        for c in self.down.iter_mut().chain(self.up.iter_mut()) {
            out.extend(c.params_mut());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceNet {
    pub conv_in: Conv3x3,
    pub res: Vec<ResBlock>,
    pub down: Vec<Conv3x3>,
}

impl Module for ReferenceNet {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.conv_in.params();
        out.extend(self.res.iter().flat_map(|r| r.params()));
        out.extend(self.down.iter().flat_map(|d| d.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.conv_in.params_mut();
        out.extend(self.res.iter_mut().flat_map(|r| r.params_mut()));
        out.extend(self.down.iter_mut().flat_map(|d| d.params_mut()));
        out
    }
}

/// Learned stand-ins for dropped conditions.
#[derive(Clone, Debug)]
pub struct NullEmbeddings {
    /// `[D_f]`
    pub face: Param,
    /// `[D_a]`
    pub audio: Param,
    /// `[D_z]`, broadcast over every motion frame and site.
    pub motion: Param,
    /// One `[1, C_l]` token per level.
    pub reference: Vec<Param>,
}

impl Module for NullEmbeddings {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.face, &self.audio, &self.motion];
        out.extend(self.reference.iter());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.face, &mut self.audio, &mut self.motion];
        out.extend(self.reference.iter_mut());
        out
    }
}

/// Everything the denoiser consumes for one block of frames.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseInputs<'a> {
    /// `[S, D_z, H, W]`
    pub z_t: &'a Var,
    pub t: usize,
    /// Identity embedding `[D_f]`.
    pub face: &'a Var,
    /// Projected per-frame audio `[S, D_a]`.
    pub audio: &'a Var,
    /// Reference tokens per level, `[H_l·W_l, C_l]`.
    pub reference: &'a [Var],
    /// `[k, D_z, H, W]`; `None` uses the null motion latent.
    pub motion: Option<&'a Var>,
    pub drops: Drops,
}

/// UNet, reference network, audio projection and null embeddings.
#[derive(Clone, Debug)]
pub struct HalloModel {
    pub cfg: DenoiserConfig,
    pub d_z: usize,
    pub conv_in: Conv3x3,
    pub levels: Vec<UNetLevel>,
    pub conv_out: Conv3x3,
    pub reference: ReferenceNet,
    pub audio: AudioProjection,
    pub nulls: NullEmbeddings,
}

impl Module for HalloModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.conv_in.params();
        out.extend(self.levels.iter().flat_map(|l| l.params()));
        out.extend(self.conv_out.params());
        out.extend(self.reference.params());
        out.extend(self.audio.params());
        out.extend(self.nulls.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.conv_in.params_mut();
        out.extend(self.levels.iter_mut().flat_map(|l| l.params_mut()));
        out.extend(self.conv_out.params_mut());
        out.extend(self.reference.params_mut());
        out.extend(self.audio.params_mut());
        out.extend(self.nulls.params_mut());
        out
    }
}

/// `[F, C, H, W]` → `[F, H·W, C]`.
fn to_tokens(g: &mut Graph, h: &Var) -> Result<Var> {
    let s = h.shape().to_vec();
    let x = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(&x, &[0, 2, 1])
}

/// `[F, H·W, C]` → `[F, C, H, W]`.
fn from_tokens(g: &mut Graph, x: &Var, h: usize, w: usize) -> Result<Var> {
    let s = x.shape().to_vec();
    let x = g.permute(x, &[0, 2, 1])?;
    g.reshape(&x, &[s[0], s[2], h, w])
}

/// Stacks `f` copies of `x` along a new leading axis.
fn repeat(g: &mut Graph, x: &Var, f: usize) -> Result<Var> {
    let shape = x.shape().to_vec();
    let n = x.value().numel();
    let row = g.reshape(x, &[1, n])?;
    let ones = g.constant(Tensor::ones(&[f, 1]));
    let rep = g.matmul(&ones, &row)?;
    g.reshape(&rep, &[&[f], &shape[..]].concat())
}

impl HalloModel {
    pub fn new<R: Rng + ?Sized>(cfg: DenoiserConfig, d_z: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if d_z == 0 {
            return Err(Error::invalid("latent channel count must be positive"));
        }
        let ch = cfg.channels.clone();
        let n = ch.len();
        let mut levels = Vec::with_capacity(n);
        for (i, &c) in ch.iter().enumerate() {
            let name = format!("unet.l{i}");
            let temporal = AttentionParams::new(&format!("{name}.temporal"), c, c, c, rng)
                .with_heads(cfg.heads)?
                .zero_values();
            levels.push(UNetLevel {
                res: ResBlock::new(&format!("{name}.res"), c, cfg.temb_dim, rng),
                spatial: AttentionParams::new(&format!("{name}.spatial"), c, c, c, rng).with_heads(cfg.heads)?,
                face: AttentionParams::new(&format!("{name}.face"), c, cfg.d_face, c, rng).with_heads(cfg.heads)?,
                hadvs: HadvsParams::new(&format!("{name}.hadvs"), c, cfg.d_audio, cfg.fusion, rng),
                temporal,
                down: (i + 1 < n).then(|| Conv3x3::new(&format!("{name}.down"), c, ch[i + 1], 2, rng)),
                up: (i + 1 < n).then(|| Conv3x3::new(&format!("{name}.up"), ch[i + 1], c, 1, rng)),
            });
        }
        let reference = ReferenceNet {
            conv_in: Conv3x3::new("ref.conv_in", d_z, ch[0], 1, rng),
            res: ch
                .iter()
                .enumerate()
                .map(|(i, &c)| ResBlock::new(&format!("ref.l{i}.res"), c, cfg.temb_dim, rng))
                .collect(),
            down: (0..n - 1)
                .map(|i| Conv3x3::new(&format!("ref.l{i}.down"), ch[i], ch[i + 1], 2, rng))
                .collect(),
        };
        let nulls = NullEmbeddings {
            face: Param::new("null.face", Tensor::zeros(&[cfg.d_face])),
            audio: Param::new("null.audio", Tensor::zeros(&[cfg.d_audio])),
            motion: Param::new("null.motion", Tensor::zeros(&[d_z])),
            reference: ch
                .iter()
                .enumerate()
                .map(|(i, &c)| Param::new(format!("null.ref{i}"), Tensor::zeros(&[1, c])))
                .collect(),
        };
        Ok(HalloModel {
            conv_in: Conv3x3::new("unet.conv_in", d_z, ch[0], 1, rng),
            conv_out: Conv3x3::new("unet.conv_out", ch[0], d_z, 1, rng),
            audio: AudioProjection::new("audio", cfg.d_audio_raw, cfg.audio_hidden, cfg.d_audio, rng),
            levels,
            reference,
            nulls,
            cfg,
            d_z,
        })
    }

    /// Spatial size at every level for a `h × w` latent.
    pub fn level_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let div = 1 << (self.cfg.levels() - 1);
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!(
                "latent {h}x{w} is not divisible by {div} for {} levels",
                self.cfg.levels()
            )));
        }
        Ok((0..self.cfg.levels()).map(|i| (h >> i, w >> i)).collect())
    }

    /// The latent-resolution masks pooled down to every level.
    pub fn level_masks(&self, masks: &RegionMasks) -> Result<Vec<RegionMasks>> {
        let (h, w) = masks.size();
        self.level_sizes(h, w)?
            .into_iter()
            .map(|(lh, lw)| masks.downsample(lh, lw))
            .collect()
    }

    /// Reference tokens per level from `z_ref: [D_z, H, W]`.
    pub fn reference_forward(&self, g: &mut Graph, z_ref: &Var) -> Result<Vec<Var>> {
        let s = z_ref.shape().to_vec();
        if s.len() != 3 || s[0] != self.d_z {
            return Err(Error::InvalidShape {
                what: format!("reference latent [{}, H, W]", self.d_z),
                shape: s,
            });
        }
        let sizes = self.level_sizes(s[1], s[2])?;
        let temb = g.constant(timestep_embedding(0, self.cfg.temb_dim));
        let x = g.reshape(z_ref, &[1, s[0], s[1], s[2]])?;
        let mut h = self.reference.conv_in.forward(g, &x)?;
        let mut out = Vec::with_capacity(sizes.len());
        for (i, &(lh, lw)) in sizes.iter().enumerate() {
            h = self.reference.res[i].forward(g, &h, &temb)?;
            let tokens = to_tokens(g, &h)?;
            out.push(g.reshape(&tokens, &[lh * lw, self.cfg.channels[i]])?);
            if let Some(down) = self.reference.down.get(i) {
                h = down.forward(g, &h)?;
            }
        }
        Ok(out)
    }

    /// [`HalloModel::reference_forward`] without gradients.
    pub fn reference_features(&self, z_ref: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::no_grad();
        let z = g.constant(z_ref.clone());
        Ok(self.reference_forward(&mut g, &z)?.into_iter().map(Var::into_value).collect())
    }

    /// Audio tokens `[S, 2·ctx + 1, D_a]`: each frame sees its neighbours,
    /// clamped at the clip edges.
    fn audio_tokens(&self, g: &mut Graph, audio: &Var, s: usize, drop: bool) -> Result<Var> {
        let la = self.cfg.audio_tokens();
        let d_a = self.cfg.d_audio;
        if drop {
            let null = self.nulls.audio.bind(g);
            let null = g.reshape(&null, &[1, d_a])?;
            let ones = g.constant(Tensor::ones(&[s * la, 1]));
            let rows = g.matmul(&ones, &null)?;
            return g.reshape(&rows, &[s, la, d_a]);
        }
        if audio.shape() != [s, d_a] {
            return Err(Error::ShapeMismatch {
                op: "denoiser audio",
                lhs: audio.shape().to_vec(),
                rhs: vec![s, d_a],
            });
        }
        let ctx = self.cfg.audio_context as i64;
        let select = Tensor::from_fn(&[s * la, s], |i| {
            let (row, col) = (i / s, i % s);
            let (frame, o) = ((row / la) as i64, (row % la) as i64 - ctx);
            let src = (frame + o).clamp(0, s as i64 - 1) as usize;
            f64::from(src == col)
        });
        let select = g.constant(select);
        let rows = g.matmul(&select, audio)?;
        g.reshape(&rows, &[s, la, d_a])
    }

    /// Predicts the noise in `z_t`; returns `[S, D_z, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        inp: &DenoiseInputs,
        masks: &[RegionMasks],
        hadvs_cfg: &HadvsConfig,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let zs = inp.z_t.shape().to_vec();
        if zs.len() != 4 || zs[1] != self.d_z || zs[0] == 0 {
            return Err(Error::InvalidShape {
                what: format!("noisy latents [S, {}, H, W]", self.d_z),
                shape: zs,
            });
        }
        if inp.t >= self.cfg.timesteps {
            return Err(Error::TimestepOutOfRange {
                t: inp.t,
                total: self.cfg.timesteps,
            });
        }
        let (s, h, w) = (zs[0], zs[2], zs[3]);
        let sizes = self.level_sizes(h, w)?;
        if masks.len() != sizes.len() || masks.iter().zip(&sizes).any(|(m, &sz)| m.size() != sz) {
            return Err(Error::invalid(format!(
                "masks {:?} do not match level sizes {sizes:?}",
                masks.iter().map(RegionMasks::size).collect::<Vec<_>>()
            )));
        }
        if inp.reference.len() != sizes.len() {
            return Err(Error::invalid(format!(
                "{} reference levels for a {}-level denoiser",
                inp.reference.len(),
                sizes.len()
            )));
        }
        // motion frames only reach the targets through temporal attention
        let k = if opts.temporal { self.cfg.motion_frames } else { 0 };
        let f = k + s;

        // frame block: [motion; targets]
        let z_all = if k == 0 {
            inp.z_t.clone()
        } else {
            let motion = match (inp.motion, inp.drops.motion) {
                (Some(m), false) => {
                    if m.shape() != [k, self.d_z, h, w] {
                        return Err(Error::ShapeMismatch {
                            op: "motion frames",
                            lhs: m.shape().to_vec(),
                            rhs: vec![k, self.d_z, h, w],
                        });
                    }
                    m.clone()
                }
                _ => {
                    let null = self.nulls.motion.bind(g);
                    let null = g.reshape(&null, &[1, self.d_z, 1, 1])?;
                    let zeros = g.constant(Tensor::zeros(&[k, self.d_z, h, w]));
                    g.add(&zeros, &null)?
                }
            };
            g.concat(&[&motion, inp.z_t], 0)?
        };

        let face = if inp.drops.reference {
            self.nulls.face.bind(g)
        } else {
            if inp.face.shape() != [self.cfg.d_face] {
                return Err(Error::ShapeMismatch {
                    op: "face embedding",
                    lhs: inp.face.shape().to_vec(),
                    rhs: vec![self.cfg.d_face],
                });
            }
            inp.face.clone()
        };
        let face = g.reshape(&face, &[1, self.cfg.d_face])?;
        let face = repeat(g, &face, f)?;
        let audio = if opts.hadvs {
            Some(self.audio_tokens(g, inp.audio, s, inp.drops.audio)?)
        } else {
            None
        };
        let temb = g.constant(timestep_embedding(inp.t, self.cfg.temb_dim));

        let mut hcur = self.conv_in.forward(g, &z_all)?;
        let mut skips = Vec::with_capacity(sizes.len());
        for (i, level) in self.levels.iter().enumerate() {
            let (lh, lw) = sizes[i];
            let c = self.cfg.channels[i];
            hcur = level.res.forward(g, &hcur, &temb)?;
            let mut tok = to_tokens(g, &hcur)?;

            let ref_tokens = if inp.drops.reference {
                self.nulls.reference[i].bind(g)
            } else {
                let r = &inp.reference[i];
                if r.shape().len() != 2 || r.shape()[1] != c {
                    return Err(Error::ShapeMismatch {
                        op: "reference tokens",
                        lhs: r.shape().to_vec(),
                        rhs: vec![lh * lw, c],
                    });
                }
                r.clone()
            };
            let ref_tokens = repeat(g, &ref_tokens, f)?;
            let kv = g.concat(&[&tok, &ref_tokens], 1)?;
            let a = batched_cross_attention(g, &tok, &kv, &level.spatial)?.out;
            tok = g.add(&tok, &a)?;

            let a = batched_cross_attention(g, &tok, &face, &level.face)?.out;
            tok = g.add(&tok, &a)?;

            if let Some(audio) = &audio {
                let targets = g.narrow(&tok, 0, k, s)?;
                let out = hadvs_forward(g, &targets, audio, &masks[i], hadvs_cfg, &level.hadvs)?;
                let targets = g.add(&targets, &out.fused)?;
                tok = if k == 0 {
                    targets
                } else {
                    let motion = g.narrow(&tok, 0, 0, k)?;
                    g.concat(&[&motion, &targets], 0)?
                };
            }

            hcur = from_tokens(g, &tok, lh, lw)?;

            // nothing to align across a single frame
            if opts.temporal && f > 1 {
                let x = g.reshape(&hcur, &[f, c, lh * lw])?;
                let x = g.permute(&x, &[2, 0, 1])?;
                let a = batched_cross_attention(g, &x, &x, &level.temporal)?.out;
                let x = g.add(&x, &a)?;
                let x = g.permute(&x, &[1, 2, 0])?;
                hcur = g.reshape(&x, &[f, c, lh, lw])?;
            }

            skips.push(hcur.clone());
            if let Some(down) = &level.down {
                hcur = down.forward(g, &hcur)?;
            }
        }
        for i in (0..self.levels.len() - 1).rev() {
            let up = self.levels[i].up.as_ref().expect("every level but the last has an up conv");
            hcur = g.upsample2x(&hcur)?;
            hcur = up.forward(g, &hcur)?;
            hcur = g.add(&hcur, &skips[i])?;
        }
        let x = g.silu(&hcur);
        let out = self.conv_out.forward(g, &x)?;
        if k == 0 {
            Ok(out)
        } else {
            g.narrow(&out, 0, k, s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hadvs::Region;
    use crate::maskgen::{derive_region_masks, LandmarkSet};
    use crate::tensor::gradcheck::check_gradients_at;
    use crate::util::seeded_rng;
    use rand::Rng;

    struct Fixture {
        model: HalloModel,
        z: Tensor,
        face: Tensor,
        audio: Tensor,
        reference: Vec<Tensor>,
        motion: Tensor,
        masks: Vec<RegionMasks>,
    }

    fn fixture(cfg: DenoiserConfig, s: usize, hw: usize, seed: u64) -> Fixture {
        let mut rng = seeded_rng(seed);
        let model = HalloModel::new(cfg.clone(), 4, &mut rng).unwrap();
        let z_ref = Tensor::randn(&[4, hw, hw], 1.0, &mut rng);
        let reference = model.reference_features(&z_ref).unwrap();
        let lm = LandmarkSet::new(vec![(20.0, 40.0), (40.0, 46.0)], vec![(12.0, 12.0), (52.0, 50.0)], (64, 64)).unwrap();
        let masks = model.level_masks(&derive_region_masks(&lm, (hw, hw)).unwrap()).unwrap();
        let mut face = Tensor::randn(&[cfg.d_face], 1.0, &mut rng);
        let n = face.sq_norm().sqrt();
        face = face.scale(1.0 / n);
        Fixture {
            z: Tensor::randn(&[s, 4, hw, hw], 1.0, &mut rng),
            audio: Tensor::randn(&[s, cfg.d_audio], 1.0, &mut rng),
            motion: Tensor::randn(&[cfg.motion_frames, 4, hw, hw], 1.0, &mut rng),
            model,
            face,
            reference,
            masks,
        }
    }

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            channels: vec![4, 8],
            temb_dim: 8,
            motion_frames: 1,
            audio_context: 1,
            d_face: 4,
            d_audio: 6,
            d_audio_raw: 12,
            audio_hidden: 8,
            ..DenoiserConfig::default()
        }
    }

    fn run(fx: &Fixture, z: &Tensor, drops: Drops, opts: ForwardOptions, hadvs: &HadvsConfig) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let z = g.constant(z.clone());
        let face = g.constant(fx.face.clone());
        let audio = g.constant(fx.audio.clone());
        let motion = g.constant(fx.motion.clone());
        let reference: Vec<Var> = fx.reference.iter().map(|t| g.constant(t.clone())).collect();
        let inp = DenoiseInputs {
            z_t: &z,
            t: 37,
            face: &face,
            audio: &audio,
            reference: &reference,
            motion: (fx.model.cfg.motion_frames > 0).then_some(&motion),
            drops,
        };
        Ok(fx.model.forward(&mut g, &inp, &fx.masks, hadvs, opts)?.into_value())
    }

    fn randomize_motion_blocks(model: &mut HalloModel, seed: u64) {
        let mut rng = seeded_rng(seed);
        for p in model.params_mut() {
            if param_group(p.name()) == ParamGroup::Motion {
                p.value = Tensor::randn(p.shape(), 0.3, &mut rng);
            }
        }
    }

    #[test]
    fn reference_feature_shapes() {
        let fx = fixture(DenoiserConfig::default(), 1, 16, 0);
        assert_eq!(fx.reference[0].shape(), &[256, 16]);
        assert_eq!(fx.reference[1].shape(), &[64, 32]);
        let z_ref = Tensor::from_fn(&[4, 16, 16], |i| (i as f64).cos());
        let a = fx.model.reference_features(&z_ref).unwrap();
        let b = fx.model.reference_features(&z_ref).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));

        let mut zeroed = fx.model.clone();
        for p in zeroed.reference.params_mut() {
            p.value = Tensor::zeros(p.shape());
        }
        for f in zeroed.reference_features(&z_ref).unwrap() {
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let fx = fixture(DenoiserConfig::default(), 3, 16, 1);
        let cfg = HadvsConfig::default();
        let out = run(&fx, &fx.z, Drops::NONE, ForwardOptions::default(), &cfg).unwrap();
        assert_eq!(out.shape(), &[3, 4, 16, 16]);
        assert!(out.is_finite());
        assert!(out.bit_eq(&run(&fx, &fx.z, Drops::NONE, ForwardOptions::default(), &cfg).unwrap()));
        let dropped = run(&fx, &fx.z, Drops::ALL, ForwardOptions::default(), &cfg).unwrap();
        assert!(dropped.bit_eq(&run(&fx, &fx.z, Drops::ALL, ForwardOptions::default(), &cfg).unwrap()));
        assert!(!dropped.bit_eq(&out));
    }

    #[test]
    fn zero_initialized_hadvs_is_invisible() {
        let fx = fixture(DenoiserConfig::default(), 2, 16, 2);
        let cfg = HadvsConfig::default();
        let with = run(&fx, &fx.z, Drops::NONE, ForwardOptions::default(), &cfg).unwrap();
        let without = run(
            &fx,
            &fx.z,
            Drops::NONE,
            ForwardOptions {
                hadvs: false,
                temporal: true,
            },
            &cfg,
        )
        .unwrap();
        assert!(with.bit_eq(&without));
    }

    #[test]
    fn single_frame_without_motion_skips_temporal() {
        let cfg = DenoiserConfig {
            motion_frames: 0,
            ..small_cfg()
        };
        let mut fx = fixture(cfg, 1, 8, 3);
        randomize_motion_blocks(&mut fx.model, 9);
        let h = HadvsConfig::default();
        let a = run(&fx, &fx.z, Drops::NONE, ForwardOptions::default(), &h).unwrap();
        let no_temporal = ForwardOptions {
            hadvs: true,
            temporal: false,
        };
        let b = run(&fx, &fx.z, Drops::NONE, no_temporal, &h).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn motion_frames_act_only_through_temporal_attention() {
        let mut fx = fixture(small_cfg(), 2, 8, 4);
        randomize_motion_blocks(&mut fx.model, 10);
        let h = HadvsConfig::default();
        let no_temporal = ForwardOptions {
            hadvs: true,
            temporal: false,
        };
        let a = run(&fx, &fx.z, Drops::NONE, no_temporal, &h).unwrap();
        let mut other = fx.motion.clone();
        other.data_mut()[0] += 1.0;
        let fx2 = Fixture { motion: other, ..fx };
        let b = run(&fx2, &fx2.z, Drops::NONE, no_temporal, &h).unwrap();
        assert!(a.bit_eq(&b));
        let c = run(&fx2, &fx2.z, Drops::NONE, ForwardOptions::default(), &h).unwrap();
        let d = run(&fx2, &fx2.z, Drops { motion: true, ..Drops::NONE }, ForwardOptions::default(), &h).unwrap();
        assert!(!c.bit_eq(&d));
    }

    #[test]
    fn frame_permutation_equivariance_without_temporal() {
        let mut fx = fixture(small_cfg(), 3, 8, 5);
        randomize_motion_blocks(&mut fx.model, 11);
        let h = HadvsConfig::default();
        let opts = ForwardOptions {
            hadvs: true,
            temporal: false,
        };
        let perm = [2, 0, 1];
        let frame = 4 * 8 * 8;
        let permute = |t: &Tensor, width: usize| {
            Tensor::from_fn(t.shape(), |i| t.data()[perm[i / width] * width + i % width])
        };
        let out = run(&fx, &fx.z, Drops::NONE, opts, &h).unwrap();
        let pz = permute(&fx.z, frame);
        // audio moves with its frame; the context window is clamped per clip,
        // so use a single audio token to keep the map frame-local
        let mut local = fx.model.cfg.clone();
        local.audio_context = 0;
        fx.model.cfg = local;
        let base = run(&fx, &fx.z, Drops::NONE, opts, &h).unwrap();
        let fx = Fixture {
            audio: permute(&fx.audio, fx.model.cfg.d_audio),
            ..fx
        };
        let moved = run(&fx, &pz, Drops::NONE, opts, &h).unwrap();
        assert!(moved.bit_eq(&permute(&base, frame)));
        assert_eq!(out.shape(), base.shape());
    }

    #[test]
    fn rejects_bad_inputs() {
        let fx = fixture(small_cfg(), 2, 8, 6);
        let h = HadvsConfig::default();
        let mut g = Graph::no_grad();
        let z = g.constant(fx.z.clone());
        let face = g.constant(fx.face.clone());
        let audio = g.constant(fx.audio.clone());
        let reference: Vec<Var> = fx.reference.iter().map(|t| g.constant(t.clone())).collect();
        let inp = DenoiseInputs {
            z_t: &z,
            t: 100,
            face: &face,
            audio: &audio,
            reference: &reference,
            motion: None,
            drops: Drops::NONE,
        };
        let err = fx.model.forward(&mut g, &inp, &fx.masks, &h, ForwardOptions::default()).unwrap_err();
        assert!(matches!(err, Error::TimestepOutOfRange { t: 100, total: 100 }));
        let inp = DenoiseInputs { t: 5, ..inp };
        let wrong = vec![RegionMasks::pose_only(4, 4), RegionMasks::pose_only(2, 2)];
        assert!(fx.model.forward(&mut g, &inp, &wrong, &h, ForwardOptions::default()).is_err());
        assert!(fx.model.forward(&mut g, &inp, &fx.masks, &h, ForwardOptions::default()).is_ok());
    }

    #[test]
    fn param_groups_split_the_model() {
        let fx = fixture(small_cfg(), 1, 8, 7);
        let names: Vec<&str> = fx.model.params().iter().map(|p| p.name()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "parameter names are unique");
        assert!(names.iter().any(|n| param_group(n) == ParamGroup::Motion));
        assert_eq!(param_group("unet.l0.hadvs.zero_conv.lip.weight"), ParamGroup::Motion);
        assert_eq!(param_group("unet.l1.temporal.w_v"), ParamGroup::Motion);
        assert_eq!(param_group("unet.l0.face.w_q"), ParamGroup::Spatial);
        assert_eq!(param_group("null.ref1"), ParamGroup::Spatial);
        assert_eq!(param_group("audio.fc0.weight"), ParamGroup::Motion);
    }

    #[test]
    fn gradient_wrt_sampled_weights() {
        let mut fx = fixture(small_cfg(), 2, 4, 8);
        randomize_motion_blocks(&mut fx.model, 12);
        let h = HadvsConfig {
            branches: vec![Region::Full, Region::Pose, Region::Exp, Region::Lip],
            ..HadvsConfig::default()
        };
        let mut rng = seeded_rng(13);
        let params: Vec<Param> = fx.model.params().into_iter().cloned().collect();
        for _ in 0..6 {
            let p = &params[rng.random_range(0..params.len())];
            let coords: Vec<usize> = (0..3).map(|_| rng.random_range(0..p.value.numel())).collect();
            let err = check_gradients_at(
                |g, x| {
                    g.bind_named(p.name(), x);
                    let z = g.constant(fx.z.clone());
                    let face = g.constant(fx.face.clone());
                    let audio = g.constant(fx.audio.clone());
                    let motion = g.constant(fx.motion.clone());
                    let reference: Vec<Var> = fx.reference.iter().map(|t| g.constant(t.clone())).collect();
                    let inp = DenoiseInputs {
                        z_t: &z,
                        t: 11,
                        face: &face,
                        audio: &audio,
                        reference: &reference,
                        motion: Some(&motion),
                        drops: Drops::NONE,
                    };
                    let out = fx.model.forward(g, &inp, &fx.masks, &h, ForwardOptions::default())?;
                    let sq = g.hadamard(&out, &out)?;
                    Ok(g.mean(&sq))
                },
                &p.value,
                1e-5,
                &coords,
            )
            .unwrap();
            assert!(err < 1e-4, "{}: {err}", p.name());
        }
    }
}
