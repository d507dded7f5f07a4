//! Ablation grids over region branches, fusion mechanisms, region weights
//! and guidance scales, each cell scored on held-out clips.

use std::path::Path;
use std::str::FromStr;

use super::animate::{animate, AnimateRequest, Conditioning};
use super::checkpoint::ModelBundle;
use super::synth::ClipMeta;
use super::{write_csv, RunConfig};
use crate::denoiser::ForwardOptions;
use crate::diffusion::GuidanceScales;
use crate::encoders::{FaceEncoder, Vae};
use crate::error::{Error, Result};
use crate::hadvs::{FusionMode, Region, RegionWeights};
use crate::metrics::{clip_features, frechet_distance, sync_proxy, video_feature_set, SyncScores};

/// `(λ_a, λ_i)` settings of the guidance grid.
pub const CFG_SETTINGS: [(f64, f64); 5] = [(1.0, 1.0), (1.0, 3.5), (1.0, 6.0), (3.5, 3.5), (6.0, 3.5)];

/// `(lip, exp, pose)` settings of the region-weight grid.
pub const WEIGHT_SETTINGS: [(f64, f64, f64); 5] = [
    (1.0, 1.0, 1.0),
    (0.0, 0.0, 0.0),
    (2.0, 1.0, 1.0),
    (1.0, 2.0, 1.0),
    (1.0, 1.0, 2.0),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Regions,
    Fusion,
    Weights,
    Cfg,
}

impl GridKind {
    pub const ALL: [GridKind; 4] = [GridKind::Regions, GridKind::Fusion, GridKind::Weights, GridKind::Cfg];

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Regions => "regions",
            GridKind::Fusion => "fusion",
            GridKind::Weights => "weights",
            GridKind::Cfg => "cfg",
        }
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GridKind::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown grid `{s}` (expected regions, fusion, weights or cfg)")))
    }
}

/// Branch sets of the region grid: full attention alone, full plus one
/// region, and the three regions without the full branch.
pub fn region_grid() -> Vec<(String, Vec<Region>)> {
    vec![
        ("full-only".into(), vec![Region::Full]),
        ("+lip".into(), vec![Region::Full, Region::Lip]),
        ("+exp".into(), vec![Region::Full, Region::Exp]),
        ("+pose".into(), vec![Region::Full, Region::Pose]),
        ("all".into(), vec![Region::Pose, Region::Exp, Region::Lip]),
    ]
}

pub fn cfg_grid() -> Vec<GuidanceScales> {
    CFG_SETTINGS
        .iter()
        .map(|&(audio, image)| GuidanceScales { audio, image })
        .collect()
}

/// Scores of one configuration on a set of held-out clips.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub fid: f64,
    /// `NaN` with fewer than two clips.
    pub fvd: f64,
    pub sync: Vec<SyncScores>,
}

impl Evaluation {
    pub fn mean_sync(&self) -> (f64, f64) {
        let n = self.sync.len().max(1) as f64;
        (
            self.sync.iter().map(|s| s.confidence).sum::<f64>() / n,
            self.sync.iter().map(|s| s.distance).sum::<f64>() / n,
        )
    }
}

/// The conditioning of a held-out clip: frame 0 as reference, its
/// landmarks and the clip's audio.
pub fn clip_conditioning(clip: &ClipMeta, fps: f64) -> Result<Conditioning> {
    Ok(Conditioning {
        reference_image: clip.read_frame(0)?,
        landmarks: clip.landmarks()?,
        audio: clip.audio()?,
        fps,
    })
}

/// Animates every clip at its full length and scores the result against
/// the ground-truth frames.
pub fn evaluate(cfg: &RunConfig, bundle: &ModelBundle, vae: &Vae, face: &FaceEncoder, clips: &[ClipMeta], fps: f64) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(Error::invalid("evaluation needs at least one clip"));
    }
    let mut generated = Vec::new();
    let mut truth = Vec::new();
    let mut gen_videos = Vec::new();
    let mut true_videos = Vec::new();
    let mut sync = Vec::new();
    for clip in clips {
        let cond = clip_conditioning(clip, fps)?;
        let req = AnimateRequest {
            model: &bundle.model,
            vae,
            face,
            total_frames: clip.frames,
            options: ForwardOptions::default(),
            dump_steps: None,
        };
        let out = animate(cfg, &req, &cond)?;
        let gt = clip.read_frames()?;
        sync.push(sync_proxy(&cond.audio.narrow(0, 0, clip.frames)?, &out.frames, &out.masks.m_lip)?);
        generated.extend(out.frames.iter().cloned());
        truth.extend(gt.iter().cloned());
        gen_videos.push(out.frames);
        true_videos.push(gt);
    }
    let fid = frechet_distance(&clip_features(&generated)?, &clip_features(&truth)?)?;
    let fvd = if clips.len() >= 2 {
        frechet_distance(&video_feature_set(&gen_videos)?, &video_feature_set(&true_videos)?)?
    } else {
        f64::NAN
    };
    Ok(Evaluation { fid, fvd, sync })
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub grid: GridKind,
    pub cell: String,
    pub config: RunConfig,
    pub evaluation: Evaluation,
}

fn cells(cfg: &RunConfig, kind: GridKind) -> Result<Vec<(String, RunConfig)>> {
    let mut out = Vec::new();
    match kind {
        GridKind::Regions => {
            for (name, branches) in region_grid() {
                let mut c = cfg.clone();
                c.hadvs.branches = branches;
                out.push((name, c));
            }
        }
        GridKind::Fusion => {
            for mode in FusionMode::ALL {
                let mut c = cfg.clone();
                c.hadvs.fusion = mode;
                c.model.fusion = mode;
                out.push((mode.name().to_string(), c));
            }
        }
        GridKind::Weights => {
            for (lip, exp, pose) in WEIGHT_SETTINGS {
                let mut c = cfg.clone();
                c.hadvs.region_weights = RegionWeights::new(lip, exp, pose)?;
                out.push((format!("w=({lip},{exp},{pose})"), c));
            }
        }
        GridKind::Cfg => {
            for g in cfg_grid() {
                let mut c = cfg.clone();
                c.guidance = g;
                out.push((format!("cfg=({},{})", g.audio, g.image), c));
            }
        }
    }
    Ok(out)
}

/// Runs every cell of `grids`. The fusion grid needs one checkpoint per
/// fusion mode in `bundles`; the other grids use the first bundle.
pub fn ablation_grid(
    cfg: &RunConfig,
    grids: &[GridKind],
    bundles: &[ModelBundle],
    vae: &Vae,
    face: &FaceEncoder,
    clips: &[ClipMeta],
    fps: f64,
) -> Result<Vec<AblationCell>> {
    let first = bundles.first().ok_or_else(|| Error::invalid("ablation needs a trained checkpoint"))?;
    let mut out = Vec::new();
    for &grid in grids {
        for (cell, mut c) in cells(cfg, grid)? {
            let bundle = if grid == GridKind::Fusion {
                bundles
                    .iter()
                    .find(|b| b.model.cfg.fusion == c.model.fusion)
                    .ok_or_else(|| Error::invalid(format!("no checkpoint trained with {} fusion", c.model.fusion)))?
            } else {
                c.model.fusion = first.model.cfg.fusion;
                c.hadvs.fusion = first.model.cfg.fusion;
                first
            };
            c.model = bundle.model.cfg.clone();
            let evaluation = evaluate(&c, bundle, vae, face, clips, fps)?;
            out.push(AblationCell {
                grid,
                cell,
                config: c,
                evaluation,
            });
        }
    }
    Ok(out)
}

/// CSV with one row per cell. The sync columns are this crate's proxy.
pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let (sc, sd) = c.evaluation.mean_sync();
            vec![
                c.grid.name().to_string(),
                format!("\"{}\"", c.cell),
                format!("{:.6}", c.evaluation.fid),
                format!("{:.6}", c.evaluation.fvd),
                format!("{sc:.6}"),
                format!("{sd:.6}"),
                c.config.hash(),
            ]
        })
        .collect();
    write_csv(
        path,
        &["grid", "cell", "fid_frame_features", "fvd_video_features", "sync_c_proxy", "sync_d_proxy", "config_hash"],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_the_expected_cells() {
        let cfg = RunConfig::default();
        assert_eq!(
            CFG_SETTINGS,
            [(1.0, 1.0), (1.0, 3.5), (1.0, 6.0), (3.5, 3.5), (6.0, 3.5)]
        );
        let names: Vec<String> = cells(&cfg, GridKind::Regions).unwrap().into_iter().map(|c| c.0).collect();
        assert_eq!(names, ["full-only", "+lip", "+exp", "+pose", "all"]);
        assert_eq!(cells(&cfg, GridKind::Fusion).unwrap().len(), 3);
        let w = cells(&cfg, GridKind::Weights).unwrap();
        assert!(w.iter().any(|(_, c)| c.hadvs.region_weights == RegionWeights::new(0.0, 0.0, 0.0).unwrap()));
        assert!("bogus".parse::<GridKind>().is_err());
        assert_eq!("cfg".parse::<GridKind>().unwrap(), GridKind::Cfg);
    }
}
