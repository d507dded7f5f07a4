//! Hierarchical audio-driven visual synthesis.
//!
//! Spatial latent tokens attend to audio tokens; the attention output `o` is
//! split by the region masks into a pose part `b = o ⊙ M_pose`, an
//! expression part `f = o ⊙ M_exp` and a lip part `l = o ⊙ M_lip`, and the
//! parts are fused back into one residual:
//!
//! * `zero_convolution`: `Σ_r w_r · Conv1x1_r(u_r)` with zero-initialized convs
//! * `direct_addition`: `Σ_r w_r · u_r`
//! * `self_attention`: the regional tensors are stacked along the token axis,
//!   passed through self-attention and the per-region slices summed with
//!   their weights
//!
//! Besides the three regional branches an unmasked `full` branch (`u = o`,
//! weight 1) can be enabled; `full` alone is the plain audio cross-attention
//! baseline used by the region ablation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{batched_cross_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::maskgen::RegionMasks;
use crate::nn::{Conv1x1Params, Module, Param};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Full,
    Pose,
    Exp,
    Lip,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Full, Region::Pose, Region::Exp, Region::Lip];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Full => "full",
            Region::Pose => "pose",
            Region::Exp => "exp",
            Region::Lip => "lip",
        }
    }

    /// Parses `+`-joined branch lists such as `full+lip`; `all` is
    /// `pose+exp+lip`.
    pub fn parse_set(s: &str) -> Result<Vec<Region>> {
        if s.trim() == "all" {
            return Ok(vec![Region::Pose, Region::Exp, Region::Lip]);
        }
        let mut out: Vec<Region> = s.split('+').map(|p| p.trim().parse()).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn set_name(set: &[Region]) -> String {
        set.iter().map(|r| r.name()).collect::<Vec<_>>().join("+")
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown region `{s}` (expected full, pose, exp or lip)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    DirectAddition,
    SelfAttention,
    ZeroConvolution,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::DirectAddition, FusionMode::SelfAttention, FusionMode::ZeroConvolution];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::DirectAddition => "direct_addition",
            FusionMode::SelfAttention => "self_attention",
            FusionMode::ZeroConvolution => "zero_convolution",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion mode `{s}`")))
    }
}

/// Scalar multipliers applied to the regional branches before summation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionWeights {
    pub lip: f64,
    pub exp: f64,
    pub pose: f64,
}

impl Default for RegionWeights {
    fn default() -> Self {
        RegionWeights {
            lip: 1.0,
            exp: 1.0,
            pose: 1.0,
        }
    }
}

impl RegionWeights {
    pub fn new(lip: f64, exp: f64, pose: f64) -> Result<Self> {
        let w = RegionWeights { lip, exp, pose };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lip", self.lip), ("exp", self.exp), ("pose", self.pose)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("region weight w_{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, r: Region) -> f64 {
        match r {
            Region::Full => 1.0,
            Region::Pose => self.pose,
            Region::Exp => self.exp,
            Region::Lip => self.lip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HadvsConfig {
    pub fusion: FusionMode,
    pub region_weights: RegionWeights,
    /// Enabled branches; the regional default is `[pose, exp, lip]`.
    pub branches: Vec<Region>,
}

impl Default for HadvsConfig {
    fn default() -> Self {
        HadvsConfig {
            fusion: FusionMode::ZeroConvolution,
            region_weights: RegionWeights::default(),
            branches: vec![Region::Pose, Region::Exp, Region::Lip],
        }
    }
}

impl HadvsConfig {
    pub fn validate(&self) -> Result<()> {
        self.region_weights.validate()?;
        if self.branches.is_empty() {
            return Err(Error::invalid("at least one HADVS branch must be enabled"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum FusionParams {
    DirectAddition,
    SelfAttention(AttentionParams),
    /// One 1×1 convolution per [`Region`], indexed by [`Region::index`].
    ZeroConvolution(Vec<Conv1x1Params>),
}

impl FusionParams {
    pub fn mode(&self) -> FusionMode {
        match self {
            FusionParams::DirectAddition => FusionMode::DirectAddition,
            FusionParams::SelfAttention(_) => FusionMode::SelfAttention,
            FusionParams::ZeroConvolution(_) => FusionMode::ZeroConvolution,
        }
    }
}

/// Audio cross-attention plus the parameter block of one fusion mode.
#[derive(Clone, Debug)]
pub struct HadvsParams {
    pub attn: AttentionParams,
    pub fusion: FusionParams,
}

impl HadvsParams {
    /// Latent width `channels` (also the output width), audio width `d_audio`.
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, d_audio: usize, mode: FusionMode, rng: &mut R) -> Self {
        let attn = AttentionParams::new(&format!("{name}.attn"), channels, d_audio, channels, rng);
        let fusion = match mode {
            FusionMode::DirectAddition => FusionParams::DirectAddition,
            FusionMode::SelfAttention => FusionParams::SelfAttention(AttentionParams::new(
                &format!("{name}.fuse_attn"),
                channels,
                channels,
                channels,
                rng,
            )),
            FusionMode::ZeroConvolution => FusionParams::ZeroConvolution(
                Region::ALL
                    .iter()
                    .map(|r| Conv1x1Params::zeros(&format!("{name}.zero_conv.{}", r.name()), channels, channels))
                    .collect(),
            ),
        };
        HadvsParams { attn, fusion }
    }
}

impl Module for HadvsParams {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.attn.params();
        match &self.fusion {
            FusionParams::DirectAddition => {}
            FusionParams::SelfAttention(a) => out.extend(a.params()),
            FusionParams::ZeroConvolution(convs) => out.extend(convs.iter().flat_map(|c| c.params())),
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.attn.params_mut();
        match &mut self.fusion {
            FusionParams::DirectAddition => {}
            FusionParams::SelfAttention(a) => out.extend(a.params_mut()),
            FusionParams::ZeroConvolution(convs) => out.extend(convs.iter_mut().flat_map(|c| c.params_mut())),
        }
        out
    }
}

/// Every intermediate of one HADVS pass.
#[derive(Clone, Debug)]
pub struct HadvsOutputs {
    pub o: Var,
    pub b: Var,
    pub f: Var,
    pub l: Var,
    pub fused: Var,
}

/// Lifts rank-2 token matrices to a batch of one.
fn batched(g: &mut Graph, x: &Var) -> Result<Var> {
    match x.shape().len() {
        3 => Ok(x.clone()),
        2 => g.reshape(x, &[1, x.shape()[0], x.shape()[1]]),
        _ => Err(Error::InvalidShape {
            what: "token matrix [N, D] or batch [B, N, D]".into(),
            shape: x.shape().to_vec(),
        }),
    }
}

/// `z: [N_q, D_z]` (or `[B, N_q, D_z]`) against audio `[L_a, D_a]`
/// (or `[B, L_a, D_a]`); spatial sites are the queries.
pub fn audio_cross_attention(g: &mut Graph, z: &Var, c_audio: &Var, p: &AttentionParams) -> Result<Var> {
    let rank = z.shape().len();
    let zb = batched(g, z)?;
    let cb = batched(g, c_audio)?;
    let out = batched_cross_attention(g, &zb, &cb, p)?.out;
    if rank == 2 {
        let s = out.shape().to_vec();
        g.reshape(&out, &[s[1], s[2]])
    } else {
        Ok(out)
    }
}

fn mask_var(g: &mut Graph, m: &Tensor, o_shape: &[usize]) -> Result<Var> {
    let n = m.numel();
    let q_axis = o_shape.len().checked_sub(2).ok_or(Error::InvalidShape {
        what: "attention output".into(),
        shape: o_shape.to_vec(),
    })?;
    if o_shape[q_axis] != n {
        return Err(Error::ShapeMismatch {
            op: "split_by_region",
            lhs: o_shape.to_vec(),
            rhs: m.shape().to_vec(),
        });
    }
    let mut shape = vec![1; o_shape.len()];
    shape[q_axis] = n;
    Ok(g.constant(m.reshape(&shape)?))
}

/// `(b, f, l) = (o ⊙ M_pose, o ⊙ M_exp, o ⊙ M_lip)`, masks broadcast over the
/// feature axis.
pub fn split_by_region(g: &mut Graph, o: &Var, masks: &RegionMasks) -> Result<(Var, Var, Var)> {
    let mut part = |m: &Tensor| -> Result<Var> {
        let mv = mask_var(g, m, o.shape())?;
        g.hadamard(o, &mv)
    };
    Ok((part(&masks.m_pose)?, part(&masks.m_exp)?, part(&masks.m_lip)?))
}

/// Fuses the enabled branches. `o` feeds the `full` branch.
pub fn fuse(g: &mut Graph, o: &Var, b: &Var, f: &Var, l: &Var, cfg: &HadvsConfig, p: &HadvsParams) -> Result<Var> {
    cfg.validate()?;
    if p.fusion.mode() != cfg.fusion {
        return Err(Error::invalid(format!(
            "fusion mode {} configured but parameters are for {}",
            cfg.fusion,
            p.fusion.mode()
        )));
    }
    for x in [b, f, l] {
        if x.shape() != o.shape() {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: o.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    let input = |r: Region| match r {
        Region::Full => o,
        Region::Pose => b,
        Region::Exp => f,
        Region::Lip => l,
    };
    let weighted_sum = |g: &mut Graph, terms: Vec<(f64, Var)>| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (w, t) in terms {
            let t = g.scale(&t, w);
            acc = Some(match acc {
                None => t,
                Some(a) => g.add(&a, &t)?,
            });
        }
        Ok(acc.expect("non-empty branch set"))
    };
    let w = &cfg.region_weights;
    match &p.fusion {
        FusionParams::DirectAddition => {
            let terms = cfg.branches.iter().map(|&r| (w.weight(r), input(r).clone())).collect();
            weighted_sum(g, terms)
        }
        FusionParams::ZeroConvolution(convs) => {
            let mut terms = Vec::with_capacity(cfg.branches.len());
            for &r in &cfg.branches {
                terms.push((w.weight(r), convs[r.index()].forward_tokens(g, input(r))?));
            }
            weighted_sum(g, terms)
        }
        FusionParams::SelfAttention(attn) => {
            let rank = o.shape().len();
            let parts: Vec<Var> = cfg
                .branches
                .iter()
                .map(|&r| batched(g, input(r)))
                .collect::<Result<_>>()?;
            let n = parts[0].shape()[1];
            let refs: Vec<&Var> = parts.iter().collect();
            let stacked = g.concat(&refs, 1)?;
            let mixed = batched_cross_attention(g, &stacked, &stacked, attn)?.out;
            let mut terms = Vec::with_capacity(parts.len());
            for (i, &r) in cfg.branches.iter().enumerate() {
                terms.push((w.weight(r), g.narrow(&mixed, 1, i * n, n)?));
            }
            let out = weighted_sum(g, terms)?;
            if rank == 2 {
                g.reshape(&out, o.shape())
            } else {
                Ok(out)
            }
        }
    }
}

/// Attention, regional split and fusion in one pass.
pub fn hadvs_forward(
    g: &mut Graph,
    z: &Var,
    c_audio: &Var,
    masks: &RegionMasks,
    cfg: &HadvsConfig,
    p: &HadvsParams,
) -> Result<HadvsOutputs> {
    let o = audio_cross_attention(g, z, c_audio, &p.attn)?;
    let (b, f, l) = split_by_region(g, &o, masks)?;
    let fused = fuse(g, &o, &b, &f, &l, cfg, p)?;
    Ok(HadvsOutputs { o, b, f, l, fused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::RegionMasks;
    use crate::tensor::gradcheck::check_gradients;
    use crate::util::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn masks_2x2(lip: [f64; 4], exp: [f64; 4]) -> RegionMasks {
        RegionMasks::from_boxes(Tensor::new(&[2, 2], lip.to_vec()).unwrap(), Tensor::new(&[2, 2], exp.to_vec()).unwrap())
            .unwrap()
    }

    fn random_masks(h: usize, w: usize, seed: u64) -> RegionMasks {
        let mut rng = seeded_rng(seed);
        let lip = Tensor::from_fn(&[h, w], |_| f64::from(rng.random_bool(0.3) as u8));
        let exp = Tensor::from_fn(&[h, w], |_| f64::from(rng.random_bool(0.6) as u8));
        RegionMasks::from_boxes(lip, exp).unwrap()
    }

    fn run(z: &Tensor, a: &Tensor, masks: &RegionMasks, cfg: &HadvsConfig, p: &HadvsParams) -> [Tensor; 5] {
        let mut g = Graph::no_grad();
        let z = g.constant(z.clone());
        let a = g.constant(a.clone());
        let out = hadvs_forward(&mut g, &z, &a, masks, cfg, p).unwrap();
        [out.o, out.b, out.f, out.l, out.fused].map(Var::into_value)
    }

    fn direct(w: RegionWeights) -> HadvsConfig {
        HadvsConfig {
            fusion: FusionMode::DirectAddition,
            region_weights: w,
            ..HadvsConfig::default()
        }
    }

    #[test]
    fn single_audio_token_broadcasts_value() {
        let mut rng = seeded_rng(1);
        let p = AttentionParams::new("a", 3, 2, 3, &mut rng);
        let mut g = Graph::no_grad();
        let z = g.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let a = g.constant(Tensor::randn(&[1, 2], 1.0, &mut rng));
        let o = audio_cross_attention(&mut g, &z, &a, &p).unwrap().into_value();
        for r in 1..4 {
            for d in 0..3 {
                assert_eq!(o.get(&[r, d]), o.get(&[0, d]));
            }
        }
        let zero = g.constant(Tensor::zeros(&[3, 2]));
        let o = audio_cross_attention(&mut g, &z, &zero, &p).unwrap().into_value();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_by_two_closed_form() {
        let p = AttentionParams::from_tensors("a", Tensor::eye(2), Tensor::eye(2), Tensor::eye(2))
            .unwrap()
            .with_scale(1.0);
        let z = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let c = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::no_grad();
        let (zv, cv) = (g.constant(z), g.constant(c));
        let o = audio_cross_attention(&mut g, &zv, &cv, &p).unwrap().into_value();
        let e = std::f64::consts::E;
        let (e2, one) = (e * e, 1.0);
        let expect = [e / (e + 1.0), 1.0 / (e + 1.0), one / (one + e2), e2 / (one + e2)];
        for (a, b) in o.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn split_examples() {
        let mut rng = seeded_rng(3);
        let o_t = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut g = Graph::no_grad();
        let o = g.constant(o_t.clone());
        let all_pose = masks_2x2([0.0; 4], [0.0; 4]);
        let (b, f, _) = split_by_region(&mut g, &o, &all_pose).unwrap();
        assert!(b.value().bit_eq(&o_t));
        assert!(f.value().data().iter().all(|&v| v == 0.0));

        let m = masks_2x2([0.0, 1.0, 0.0, 0.0], [1.0, 1.0, 1.0, 0.0]);
        let (b, f, l) = split_by_region(&mut g, &o, &m).unwrap();
        for i in 0..12 {
            let cell = i / 3;
            let x = o_t.data()[i];
            assert_eq!(b.value().data()[i], x * m.m_pose.data()[cell]);
            assert_eq!(f.value().data()[i], x * m.m_exp.data()[cell]);
            assert_eq!(l.value().data()[i], x * m.m_lip.data()[cell]);
        }
        let wrong = RegionMasks::pose_only(3, 3);
        assert!(split_by_region(&mut g, &o, &wrong).is_err());
    }

    #[test]
    fn zero_convolution_starts_at_zero() {
        let mut rng = seeded_rng(5);
        let p = HadvsParams::new("h", 3, 2, FusionMode::ZeroConvolution, &mut rng);
        let masks = random_masks(2, 3, 1);
        let out = run(
            &Tensor::randn(&[6, 3], 1.0, &mut rng),
            &Tensor::randn(&[5, 2], 1.0, &mut rng),
            &masks,
            &HadvsConfig::default(),
            &p,
        );
        assert!(out[0].data().iter().any(|&v| v != 0.0));
        assert!(out[4].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn direct_addition_examples() {
        let mut rng = seeded_rng(6);
        let p = HadvsParams::new("h", 2, 2, FusionMode::DirectAddition, &mut rng);
        let masks = masks_2x2([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]);
        let z = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let a = Tensor::randn(&[3, 2], 1.0, &mut rng);

        let [_, b, _, l, fused] = run(&z, &a, &masks, &direct(RegionWeights::new(2.0, 0.0, 1.0).unwrap()), &p);
        for i in 0..8 {
            assert_eq!(fused.data()[i], b.data()[i] + 2.0 * l.data()[i]);
        }

        let [o, _, _, _, fused] = run(&z, &a, &masks_2x2([0.0; 4], [0.0; 4]), &direct(RegionWeights::default()), &p);
        // no lip cells: pose + expression re-assemble o
        assert!(fused.bit_eq(&o));

        let [_, _, _, _, fused] = run(&z, &a, &masks, &direct(RegionWeights::new(0.0, 0.0, 0.0).unwrap()), &p);
        assert!(fused.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lip_weight_only_touches_lip_cells() {
        let mut rng = seeded_rng(7);
        let p = HadvsParams::new("h", 3, 2, FusionMode::DirectAddition, &mut rng);
        let masks = random_masks(3, 3, 9);
        let z = Tensor::randn(&[9, 3], 1.0, &mut rng);
        let a = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let lo = run(&z, &a, &masks, &direct(RegionWeights::new(1.0, 1.0, 1.0).unwrap()), &p)[4].clone();
        let hi = run(&z, &a, &masks, &direct(RegionWeights::new(3.0, 1.0, 1.0).unwrap()), &p)[4].clone();
        for i in 0..27 {
            if masks.m_lip.data()[i / 3] == 0.0 {
                assert_eq!(lo.data()[i], hi.data()[i]);
            }
        }
        assert!(lo.max_abs_diff(&hi).unwrap() > 0.0);
    }

    #[test]
    fn end_to_end_on_2x2_grid() {
        let w = Tensor::new(&[2, 2], vec![1.0, 0.5, -0.5, 1.0]).unwrap();
        let attn = AttentionParams::from_tensors("a", Tensor::eye(2), Tensor::eye(2), w.clone()).unwrap();
        let convs = Region::ALL
            .iter()
            .map(|r| Conv1x1Params::from_tensors(r.name(), Tensor::eye(2).scale(r.index() as f64 + 1.0), Tensor::full(&[2], 0.1)))
            .collect();
        let p = HadvsParams {
            attn,
            fusion: FusionParams::ZeroConvolution(convs),
        };
        let masks = masks_2x2([0.0, 0.0, 1.0, 0.0], [0.0, 1.0, 1.0, 1.0]);
        let z = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5]).unwrap();
        let a = Tensor::new(&[2, 2], vec![0.3, -0.2, 0.1, 0.4]).unwrap();
        let cfg = HadvsConfig {
            region_weights: RegionWeights::new(0.5, 2.0, 1.5).unwrap(),
            ..HadvsConfig::default()
        };
        let fused = run(&z, &a, &masks, &cfg, &p)[4].clone();

        // oracle: scalar loops over the same definitions
        let scale = 1.0 / 2f64.sqrt();
        for q in 0..4 {
            let zq = [z.get(&[q, 0]), z.get(&[q, 1])];
            let s: Vec<f64> = (0..2).map(|k| scale * (zq[0] * a.get(&[k, 0]) + zq[1] * a.get(&[k, 1]))).collect();
            let m = s[0].max(s[1]);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let den = e[0] + e[1];
            for d in 0..2 {
                let o: f64 = (0..2)
                    .map(|k| e[k] / den * (w.get(&[d, 0]) * a.get(&[k, 0]) + w.get(&[d, 1]) * a.get(&[k, 1])))
                    .sum();
                let (mp, me, ml) = (masks.m_pose.data()[q], masks.m_exp.data()[q], masks.m_lip.data()[q]);
                let expect = 1.5 * (2.0 * o * mp + 0.1) + 2.0 * (3.0 * o * me + 0.1) + 0.5 * (4.0 * o * ml + 0.1);
                assert!((fused.get(&[q, d]) - expect).abs() < 1e-12, "{q} {d}");
            }
        }
    }

    #[test]
    fn full_only_matches_forced_pose_branch() {
        let mut rng = seeded_rng(8);
        let mut p = HadvsParams::new("h", 3, 2, FusionMode::ZeroConvolution, &mut rng);
        if let FusionParams::ZeroConvolution(convs) = &mut p.fusion {
            for c in convs.iter_mut() {
                c.weight.value = Tensor::randn(c.weight.shape(), 1.0, &mut rng);
                c.bias.value = Tensor::randn(c.bias.shape(), 1.0, &mut rng);
            }
            let full = convs[Region::Full.index()].clone();
            convs[Region::Pose.index()].weight.value = full.weight.value;
            convs[Region::Pose.index()].bias.value = full.bias.value;
        }
        let z = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let a = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let full_cfg = HadvsConfig {
            branches: vec![Region::Full],
            ..HadvsConfig::default()
        };
        let forced_cfg = HadvsConfig {
            branches: vec![Region::Pose],
            ..HadvsConfig::default()
        };
        let a1 = run(&z, &a, &random_masks(2, 2, 4), &full_cfg, &p)[4].clone();
        let a2 = run(&z, &a, &RegionMasks::pose_only(2, 2), &forced_cfg, &p)[4].clone();
        assert!(a1.bit_eq(&a2));
    }

    #[test]
    fn self_attention_fusion_shape_and_mismatch() {
        let mut rng = seeded_rng(10);
        let p = HadvsParams::new("h", 3, 2, FusionMode::SelfAttention, &mut rng);
        let cfg = HadvsConfig {
            fusion: FusionMode::SelfAttention,
            ..HadvsConfig::default()
        };
        let z = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let a = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let out = run(&z, &a, &random_masks(2, 2, 2), &cfg, &p);
        assert_eq!(out[4].shape(), &[4, 3]);
        assert!(out[4].is_finite());

        let mut g = Graph::no_grad();
        let (zv, av) = (g.constant(z), g.constant(a));
        let err = hadvs_forward(&mut g, &zv, &av, &random_masks(2, 2, 2), &HadvsConfig::default(), &p);
        assert!(err.is_err());
    }

    #[test]
    fn parses_names() {
        assert_eq!(Region::parse_set("full+lip").unwrap(), vec![Region::Full, Region::Lip]);
        assert_eq!(Region::parse_set("all").unwrap().len(), 3);
        assert!(Region::parse_set("nose").is_err());
        assert_eq!("self_attention".parse::<FusionMode>().unwrap(), FusionMode::SelfAttention);
        assert!(RegionWeights::new(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn gradients_through_every_fusion_mode() {
        for (i, mode) in FusionMode::ALL.into_iter().enumerate() {
            let mut rng = seeded_rng(40 + i as u64);
            let mut p = HadvsParams::new("h", 3, 2, mode, &mut rng);
            if let FusionParams::ZeroConvolution(convs) = &mut p.fusion {
                for c in convs.iter_mut() {
                    c.weight.value = Tensor::randn(c.weight.shape(), 0.5, &mut rng);
                }
            }
            let cfg = HadvsConfig {
                fusion: mode,
                branches: vec![Region::Full, Region::Pose, Region::Exp, Region::Lip],
                ..HadvsConfig::default()
            };
            let masks = random_masks(2, 2, i as u64);
            let a = Tensor::randn(&[3, 2], 1.0, &mut rng);
            let z = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let err = check_gradients(
                |g, z| {
                    let av = g.constant(a.clone());
                    let out = hadvs_forward(g, z, &av, &masks, &cfg, &p)?;
                    let sq = g.hadamard(&out.fused, &out.fused)?;
                    Ok(g.sum(&sq))
                },
                &z,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode}: {err}");
        }
    }

    proptest! {
        #[test]
        fn pose_and_expression_reassemble_o(seed in any::<u64>(), h in 1usize..4, w in 1usize..4) {
            let mut rng = seeded_rng(seed);
            let p = HadvsParams::new("h", 3, 2, FusionMode::DirectAddition, &mut rng);
            let masks = random_masks(h, w, seed ^ 1);
            let z = Tensor::randn(&[h * w, 3], 1.0, &mut rng);
            let a = Tensor::randn(&[2, 2], 1.0, &mut rng);
            let [o, b, f, l, _] = run(&z, &a, &masks, &direct(RegionWeights::default()), &p);
            prop_assert!(b.add(&f).unwrap().bit_eq(&o));
            let lip_in_b = Tensor::from_fn(b.shape(), |i| b.data()[i] * masks.m_lip.data()[i / 3]);
            prop_assert!(lip_in_b.bit_eq(&l));
        }

        #[test]
        fn fusion_is_linear_in_pose_slot(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let mut rng = seeded_rng(seed);
            let mut p = HadvsParams::new("h", 2, 2, FusionMode::ZeroConvolution, &mut rng);
            if let FusionParams::ZeroConvolution(convs) = &mut p.fusion {
                for c in convs.iter_mut() {
                    c.weight.value = Tensor::randn(c.weight.shape(), 1.0, &mut rng);
                    c.bias.value = Tensor::randn(c.bias.shape(), 1.0, &mut rng);
                }
            }
            let cfg = HadvsConfig::default();
            let mut g = Graph::no_grad();
            let mk = |g: &mut Graph, rng: &mut crate::util::DetRng| g.constant(Tensor::randn(&[3, 2], 1.0, rng));
            let (o, b, f, l) = (mk(&mut g, &mut rng), mk(&mut g, &mut rng), mk(&mut g, &mut rng), mk(&mut g, &mut rng));
            let zero = g.constant(Tensor::zeros(&[3, 2]));
            let ab = g.scale(&b, alpha);
            let base = fuse(&mut g, &o, &zero, &f, &l, &cfg, &p).unwrap().into_value();
            let one = fuse(&mut g, &o, &b, &f, &l, &cfg, &p).unwrap().into_value().sub(&base).unwrap();
            let scaled = fuse(&mut g, &o, &ab, &f, &l, &cfg, &p).unwrap().into_value().sub(&base).unwrap();
            prop_assert!(scaled.max_abs_diff(&one.scale(alpha)).unwrap() < 1e-10);
        }

        #[test]
        fn equal_weights_scale_direct_addition(seed in any::<u64>(), c in 0.0f64..4.0) {
            let mut rng = seeded_rng(seed);
            let p = HadvsParams::new("h", 2, 2, FusionMode::DirectAddition, &mut rng);
            let masks = random_masks(2, 2, seed);
            let z = Tensor::randn(&[4, 2], 1.0, &mut rng);
            let a = Tensor::randn(&[2, 2], 1.0, &mut rng);
            let one = run(&z, &a, &masks, &direct(RegionWeights::default()), &p)[4].clone();
            let cw = run(&z, &a, &masks, &direct(RegionWeights::new(c, c, c).unwrap()), &p)[4].clone();
            prop_assert!(cw.max_abs_diff(&one.scale(c)).unwrap() < 1e-12);
        }
    }
}
