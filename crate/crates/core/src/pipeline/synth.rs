//! Procedural "talking head" videos with exact landmarks and matching
//! synthetic audio features.
//!
//! Each identity has fixed colours and head proportions. Within a clip the
//! head drifts slowly (pose), the brows rise and fall (expression) and the
//! mouth opening follows a syllable-like loudness envelope, which also drives
//! the audio features.
//!
//! ```text
//! <out>/corpus.toml
//! <out>/train/id<i>_clip<jjj>/frame_<kkk>.ppm, landmarks.txt, audio.htns, envelope.htns
//! <out>/heldout/clip<jj>/...
//! ```

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::synthetic_audio_features;
use crate::error::{Error, Result};
use crate::image::{read_ppm, write_ppm};
use crate::maskgen::{load_landmarks, save_landmarks, LandmarkSet};
use crate::tensor::{htns, Tensor};
use crate::util::{derive_seed, seeded_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub ids: usize,
    /// Training clips per identity.
    pub clips: usize,
    /// Frames per training clip.
    pub frames: usize,
    pub heldout: usize,
    pub heldout_frames: usize,
    pub seed: u64,
    pub fps: f64,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Width of one of the 12 audio feature layers.
    pub d_raw: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            ids: 4,
            clips: 64,
            frames: 16,
            heldout: 10,
            heldout_frames: 28,
            seed: 0,
            fps: 25.0,
            image_size: 64,
            d_raw: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ids == 0 || self.clips == 0 || self.frames == 0 || self.d_raw == 0 {
            return Err(Error::invalid("ids, clips, frames and d_raw must be positive"));
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(Error::invalid(format!("image size {} must be a multiple of 8, at least 16", self.image_size)));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::invalid(format!("fps {} must be positive", self.fps)));
        }
        if self.heldout > 0 && self.heldout_frames == 0 {
            return Err(Error::invalid("held-out clips need at least one frame"));
        }
        Ok(())
    }

    fn mix_seed(&self) -> u64 {
        derive_seed(self.seed, "audio-mix")
    }
}

/// Appearance of one synthetic person, in 64-pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub lips: [f64; 3],
    pub head_rx: f64,
    pub head_ry: f64,
    pub eye_gap: f64,
}

impl Identity {
    pub fn generate(id: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(derive_seed(seed, &format!("identity{id}")));
        let mut colour = |lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
        let background = colour(0.05, 0.5);
        let skin = colour(0.45, 0.95);
        let hair = colour(0.0, 0.45);
        let lips = [0.75, 0.25, 0.3].map(|c: f64| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
        Identity {
            background,
            skin,
            hair,
            lips,
            head_rx: rng.random_range(15.0..19.0),
            head_ry: rng.random_range(19.0..23.0),
            eye_gap: rng.random_range(6.0..8.0),
        }
    }
}

/// Per-frame animation state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameState {
    pub dx: f64,
    pub dy: f64,
    /// Brow raise in `[0, 1]`.
    pub brow: f64,
    /// Mouth opening in `[0, 1]`.
    pub open: f64,
}

const MOUTH_HALF_WIDTH: f64 = 7.0;
const MOUTH_TOP: f64 = 8.0;
const MAX_OPENING: f64 = 5.0;
const SUPERSAMPLE: usize = 4;

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
}

fn shade(id: &Identity, st: &FrameState, x: f64, y: f64) -> [f64; 3] {
    let (cx, cy) = (32.0 + st.dx, 32.0 + st.dy);
    let mouth_x = (x - cx).abs() <= MOUTH_HALF_WIDTH;
    let gap = MAX_OPENING * st.open;
    let (m0, m1, m2) = (cy + MOUTH_TOP, cy + MOUTH_TOP + 2.0, cy + MOUTH_TOP + 2.0 + gap);
    if mouth_x && y >= m0 && y < m2 + 2.0 {
        return if y < m1 || y >= m2 { id.lips } else { [0.15, 0.02, 0.05] };
    }
    for side in [-1.0, 1.0] {
        let ex = cx + side * id.eye_gap;
        if (x - ex).abs() < 2.0 && (y - (cy - 5.0)).abs() < 1.5 {
            return [0.08, 0.08, 0.1];
        }
        if (x - ex).abs() < 3.5 && (y - (cy - 10.0 - 2.0 * st.brow)).abs() < 0.75 {
            return id.hair;
        }
    }
    if inside_ellipse(x, y, cx, cy, id.head_rx, id.head_ry) {
        return id.skin;
    }
    if y < cy && inside_ellipse(x, y, cx, cy - 3.0, id.head_rx + 2.5, id.head_ry + 2.0) {
        return id.hair;
    }
    id.background
}

/// Renders a `[3, size, size]` frame with 4×4 supersampling.
pub fn render_frame(id: &Identity, st: &FrameState, size: usize) -> Tensor {
    let unit = 64.0 / size as f64;
    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    let w = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) * unit;
                    let y = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) * unit;
                    let c = shade(id, st, x, y);
                    for k in 0..3 {
                        acc[k] += c[k] * w;
                    }
                }
            }
            for k in 0..3 {
                data[k * n + py * size + px] = acc[k];
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("shape matches data")
}

/// Lip and face landmarks of a rendered frame, in image pixels.
pub fn frame_landmarks(id: &Identity, st: &FrameState, size: usize) -> Result<LandmarkSet> {
    let s = size as f64 / 64.0;
    let (cx, cy) = (32.0 + st.dx, 32.0 + st.dy);
    let clamp = |(x, y): (f64, f64)| ((x * s).clamp(0.0, size as f64 - 0.01), (y * s).clamp(0.0, size as f64 - 0.01));
    let bottom = cy + MOUTH_TOP + 4.0 + MAX_OPENING * st.open;
    let lip = vec![
        (cx - MOUTH_HALF_WIDTH, cy + MOUTH_TOP),
        (cx + MOUTH_HALF_WIDTH, cy + MOUTH_TOP),
        (cx, cy + MOUTH_TOP),
        (cx, bottom),
    ];
    let brow_y = cy - 11.0 - 2.0 * st.brow;
    let exp = vec![
        (cx - id.eye_gap - 3.5, brow_y),
        (cx + id.eye_gap + 3.5, brow_y),
        (cx - id.eye_gap, cy - 5.0),
        (cx + id.eye_gap, cy - 5.0),
        (cx - id.head_rx + 1.0, cy),
        (cx + id.head_rx - 1.0, cy),
        (cx, cy + id.head_ry - 1.0),
    ];
    LandmarkSet::new(
        lip.into_iter().map(clamp).collect(),
        exp.into_iter().map(clamp).collect(),
        (size, size),
    )
}

/// Syllable-like loudness in `[0, 1]`: Gaussian bumps of random height and
/// width every 2.5–5.5 frames, with occasional pauses.
pub fn syllable_envelope<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Vec<f64> {
    let mut bumps = Vec::new();
    let mut c = rng.random_range(0.0..3.0);
    while c < frames as f64 + 3.0 {
        bumps.push((c, rng.random_range(0.5..1.0), rng.random_range(1.0..2.0)));
        c += rng.random_range(2.5..5.5);
        if rng.random::<f64>() < 0.2 {
            c += rng.random_range(3.0..6.0);
        }
    }
    (0..frames)
        .map(|t| {
            let v: f64 = bumps.iter().map(|&(c, a, w)| a * (-((t as f64 - c) / w).powi(2)).exp()).sum();
            v.min(1.0)
        })
        .collect()
}

fn clip_states<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Vec<FrameState> {
    let env = syllable_envelope(frames, rng);
    let (px, py, pb) = (rng.random_range(20.0..40.0), rng.random_range(25.0..50.0), rng.random_range(15.0..30.0));
    let (fx, fy, fb) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    env.into_iter()
        .enumerate()
        .map(|(t, open)| {
            let t = t as f64;
            FrameState {
                dx: 1.5 * (TAU * t / px + fx).sin(),
                dy: 1.0 * (TAU * t / py + fy).sin(),
                brow: 0.5 + 0.5 * (TAU * t / pb + fb).sin(),
                open,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMeta {
    pub name: String,
    pub identity: usize,
    pub frames: usize,
    pub dir: PathBuf,
}

impl ClipMeta {
    pub fn frame_path(&self, k: usize) -> PathBuf {
        self.dir.join(format!("frame_{k:03}.ppm"))
    }

    pub fn read_frame(&self, k: usize) -> Result<Tensor> {
        read_ppm(self.frame_path(k))
    }

    pub fn read_frames(&self) -> Result<Vec<Tensor>> {
        (0..self.frames).map(|k| self.read_frame(k)).collect()
    }

    /// Landmarks of frame 0.
    pub fn landmarks(&self) -> Result<LandmarkSet> {
        load_landmarks(self.dir.join("landmarks.txt"))
    }

    /// `[frames, 12·d_raw]`
    pub fn audio(&self) -> Result<Tensor> {
        htns::read(self.dir.join("audio.htns"))
    }

    pub fn envelope(&self) -> Result<Tensor> {
        htns::read(self.dir.join("envelope.htns"))
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub config: SynthConfig,
    pub train: Vec<ClipMeta>,
    pub heldout: Vec<ClipMeta>,
}

fn layout(root: &Path, cfg: &SynthConfig) -> (Vec<ClipMeta>, Vec<ClipMeta>) {
    let train = (0..cfg.ids)
        .flat_map(|i| (0..cfg.clips).map(move |j| (i, j)))
        .map(|(i, j)| {
            let name = format!("id{i}_clip{j:03}");
            ClipMeta {
                dir: root.join("train").join(&name),
                name,
                identity: i,
                frames: cfg.frames,
            }
        })
        .collect();
    let heldout = (0..cfg.heldout)
        .map(|j| {
            let name = format!("clip{j:02}");
            ClipMeta {
                dir: root.join("heldout").join(&name),
                name,
                identity: j % cfg.ids,
                frames: cfg.heldout_frames,
            }
        })
        .collect();
    (train, heldout)
}

fn write_clip(meta: &ClipMeta, cfg: &SynthConfig, identity: &Identity, split: &str) -> Result<()> {
    std::fs::create_dir_all(&meta.dir).map_err(|e| Error::io(&meta.dir, e))?;
    let label = format!("{split}/{}", meta.name);
    let mut rng = seeded_rng(derive_seed(cfg.seed, &label));
    let states = clip_states(meta.frames, &mut rng);
    for (k, st) in states.iter().enumerate() {
        write_ppm(meta.frame_path(k), &render_frame(identity, st, cfg.image_size))?;
    }
    save_landmarks(meta.dir.join("landmarks.txt"), &frame_landmarks(identity, &states[0], cfg.image_size)?)?;
    let env: Vec<f64> = states.iter().map(|s| s.open).collect();
    let audio = synthetic_audio_features(&env, cfg.d_raw, cfg.mix_seed(), derive_seed(cfg.seed, &format!("{label}/noise")));
    htns::write(meta.dir.join("audio.htns"), &audio)?;
    htns::write(meta.dir.join("envelope.htns"), &Tensor::new(&[env.len()], env)?)
}

/// Generates the corpus under `out` and returns its index.
pub fn synthesize(cfg: &SynthConfig, out: &Path) -> Result<Corpus> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let identities: Vec<Identity> = (0..cfg.ids).map(|i| Identity::generate(i, cfg.seed)).collect();
    let (train, heldout) = layout(out, cfg);
    for m in &train {
        write_clip(m, cfg, &identities[m.identity], "train")?;
    }
    for m in &heldout {
        write_clip(m, cfg, &identities[m.identity], "heldout")?;
    }
    let path = out.join("corpus.toml");
    let text = toml::to_string(cfg).expect("synth config serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(Corpus {
        root: out.to_path_buf(),
        config: cfg.clone(),
        train,
        heldout,
    })
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("corpus.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: SynthConfig = toml::from_str(&text).map_err(|e| Error::Format {
            kind: "corpus index",
            message: format!("{}: {e}", path.display()),
        })?;
        config.validate()?;
        let (train, heldout) = layout(root, &config);
        for m in train.iter().chain(&heldout) {
            if !m.dir.is_dir() {
                return Err(Error::io(
                    &m.dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "clip directory is missing"),
                ));
            }
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            config,
            train,
            heldout,
        })
    }

    pub fn identities(&self) -> Vec<Identity> {
        (0..self.config.ids).map(|i| Identity::generate(i, self.config.seed)).collect()
    }
}
