//! Fréchet distance between Gaussian fits of feature sets, hand-crafted
//! frame/video features to feed it, and a correlation-based lip-sync proxy.
//!
//! The sync scores are internal to this crate: they correlate audio feature
//! change with pixel change inside the lip mask and are not comparable to
//! SyncNet confidence or distance values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of [`frame_features`] and [`video_features`].
pub const FEATURE_DIM: usize = 64;
/// Side of the pooling grid used by the features.
const GRID: usize = 4;
/// Offsets searched by [`sync_scores`].
pub const MAX_OFFSET: i64 = 5;
/// Fewest overlapping samples for an offset to be scored.
const MIN_OVERLAP: usize = 3;

/// Sample mean and unbiased covariance of `[N, D]` features.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub features: Tensor,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] < 2 || features.shape()[1] == 0 {
            return Err(Error::InvalidShape {
                what: "feature set [N >= 2, D]".into(),
                shape: features.shape().to_vec(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        let (n, d) = (features.shape()[0], features.shape()[1]);
        let x = DMatrix::from_row_slice(n, d, features.data());
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut covariance = centered.transpose() * &centered / (n - 1) as f64;
        covariance = (&covariance + covariance.transpose()) * 0.5;
        Ok(FeatureSet {
            features,
            mean,
            covariance,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, where the trace of the
/// root is taken through the symmetric product `Σ_a^{1/2} Σ_b Σ_a^{1/2}`.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "frechet distance",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.covariance);
    let inner = &ra * &b.covariance * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = dm + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(d.max(0.0))
}

fn check_frame(frame: &Tensor) -> Result<(usize, usize)> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 || s[1] < GRID || s[2] < GRID || s[1] % GRID != 0 || s[2] % GRID != 0 {
        return Err(Error::InvalidShape {
            what: format!("frame [3, H, W] with H, W multiples of {GRID}"),
            shape: s.to_vec(),
        });
    }
    Ok((s[1], s[2]))
}

/// Per-cell `(sum of values, sum of squares)` of one channel plane on the grid.
fn cell_stats(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let (bh, bw) = (h / GRID, w / GRID);
    let mut out = vec![(0.0, 0.0); GRID * GRID];
    for y in 0..h {
        for x in 0..w {
            let v = plane[y * w + x];
            let c = &mut out[(y / bh) * GRID + x / bw];
            c.0 += v;
            c.1 += v * v;
        }
    }
    out
}

fn luminance(frame: &Tensor, h: usize, w: usize) -> Vec<f64> {
    let d = frame.data();
    let n = h * w;
    (0..n).map(|i| (d[i] + d[n + i] + d[2 * n + i]) / 3.0).collect()
}

/// 64 statistics of a `[3, H, W]` frame on a 4×4 grid: the 48 per-channel
/// cell means, then the 16 cell standard deviations of the channel-mean
/// luminance.
pub fn frame_features(frame: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = check_frame(frame)?;
    let cells = ((h / GRID) * (w / GRID)) as f64;
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for c in 0..3 {
        let plane = &frame.data()[c * h * w..(c + 1) * h * w];
        out.extend(cell_stats(plane, h, w).iter().map(|(s, _)| s / cells));
    }
    let lum = luminance(frame, h, w);
    out.extend(cell_stats(&lum, h, w).iter().map(|(s, q)| {
        let m = s / cells;
        (q / cells - m * m).max(0.0).sqrt()
    }));
    Ok(out)
}

/// 64 statistics of a clip: the 48 cell means averaged over frames, then
/// the 16 cell means of `|ΔY|` between consecutive frames.
pub fn video_features(frames: &[Tensor]) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::invalid(format!("a clip needs at least 2 frames, got {}", frames.len())));
    }
    let (h, w) = check_frame(&frames[0])?;
    let mut means = vec![0.0; 3 * GRID * GRID];
    for f in frames {
        if check_frame(f)? != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "video features",
                lhs: f.shape().to_vec(),
                rhs: frames[0].shape().to_vec(),
            });
        }
        for (m, v) in means.iter_mut().zip(frame_features(f)?) {
            *m += v / frames.len() as f64;
        }
    }
    let cells = ((h / GRID) * (w / GRID)) as f64;
    let mut motion = vec![0.0; GRID * GRID];
    let mut prev = luminance(&frames[0], h, w);
    for f in &frames[1..] {
        let cur = luminance(f, h, w);
        let diff: Vec<f64> = cur.iter().zip(&prev).map(|(a, b)| (a - b).abs()).collect();
        for (m, (s, _)) in motion.iter_mut().zip(cell_stats(&diff, h, w)) {
            *m += s / cells / (frames.len() - 1) as f64;
        }
        prev = cur;
    }
    means.extend(motion);
    Ok(means)
}

fn stack(rows: Vec<Vec<f64>>) -> Result<FeatureSet> {
    let n = rows.len();
    FeatureSet::new(Tensor::new(&[n, FEATURE_DIM], rows.concat())?)
}

/// [`frame_features`] of every frame as a feature set.
pub fn clip_features(frames: &[Tensor]) -> Result<FeatureSet> {
    if frames.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 frames, got {}", frames.len())));
    }
    stack(frames.iter().map(frame_features).collect::<Result<_>>()?)
}

/// [`video_features`] of every clip as a feature set.
pub fn video_feature_set(clips: &[Vec<Tensor>]) -> Result<FeatureSet> {
    if clips.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 clips, got {}", clips.len())));
    }
    stack(clips.iter().map(|c| video_features(c)).collect::<Result<_>>()?)
}

/// `‖a_s − a_{s−1}‖₂` for `s = 1 .. S−1` of `[S, D]` audio features.
pub fn audio_energy(audio: &Tensor) -> Result<Vec<f64>> {
    if audio.rank() != 2 || audio.shape()[0] < 2 {
        return Err(Error::InvalidShape {
            what: "audio features [S >= 2, D]".into(),
            shape: audio.shape().to_vec(),
        });
    }
    let d = audio.shape()[1];
    let x = audio.data();
    Ok((1..audio.shape()[0])
        .map(|s| {
            (0..d)
                .map(|j| (x[s * d + j] - x[(s - 1) * d + j]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Mean absolute change between consecutive frames inside `lip_mask`
/// (`[h, w]` latent grid, nearest-upsampled to the frame size), for
/// `s = 1 .. S−1`.
pub fn lip_energy(frames: &[Tensor], lip_mask: &Tensor) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::invalid("lip energy needs at least 2 frames"));
    }
    let (h, w) = check_frame(&frames[0])?;
    let ms = lip_mask.shape();
    if ms.len() != 2 || ms[0] == 0 || ms[1] == 0 || h % ms[0] != 0 || w % ms[1] != 0 {
        return Err(Error::InvalidShape {
            what: format!("lip mask dividing the {h}x{w} frame"),
            shape: ms.to_vec(),
        });
    }
    let (fy, fx) = (h / ms[0], w / ms[1]);
    let inside: Vec<usize> = (0..h * w)
        .filter(|i| lip_mask.data()[(i / w / fy) * ms[1] + (i % w) / fx] > 0.5)
        .collect();
    if inside.is_empty() {
        return Err(Error::invalid("lip mask is empty"));
    }
    let n = h * w;
    let mut out = Vec::with_capacity(frames.len() - 1);
    for pair in frames.windows(2) {
        if pair[1].shape() != frames[0].shape() {
            return Err(Error::ShapeMismatch {
                op: "lip energy",
                lhs: pair[1].shape().to_vec(),
                rhs: frames[0].shape().to_vec(),
            });
        }
        let (a, b) = (pair[0].data(), pair[1].data());
        let total: f64 = inside
            .iter()
            .map(|&i| (0..3).map(|c| (b[c * n + i] - a[c * n + i]).abs()).sum::<f64>())
            .sum();
        out.push(total / (3 * inside.len()) as f64);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyncScores {
    /// Highest Pearson correlation over the searched offsets.
    pub confidence: f64,
    /// `‖â − l̂‖₂` of the centred, unit-norm windows at the best offset.
    pub distance: f64,
    /// Lag of the lip sequence behind the audio at the best score.
    pub offset: i64,
}

/// Centred, unit-norm copy; `None` for a constant window.
fn unit(x: &[f64]) -> Option<Vec<f64>> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    (n > 1e-12 * scale * (x.len() as f64).sqrt()).then(|| c.into_iter().map(|v| v / n).collect())
}

/// Pairs `audio[i]` with `lip[i + o]` for every offset `o ∈ [−5, 5]` leaving
/// at least three overlapping samples and reports the best correlation. A
/// constant window scores 0; ties keep the smallest `|o|`.
pub fn sync_scores(audio: &[f64], lip: &[f64]) -> Result<SyncScores> {
    if audio.len() != lip.len() || audio.len() < MIN_OVERLAP {
        return Err(Error::invalid(format!(
            "energy sequences of lengths {} and {} must match and hold at least {MIN_OVERLAP} samples",
            audio.len(),
            lip.len()
        )));
    }
    if audio.iter().chain(lip).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("energy sequence".into()));
    }
    let n = audio.len() as i64;
    let mut offsets: Vec<i64> = (-MAX_OFFSET..=MAX_OFFSET).collect();
    offsets.sort_by_key(|o| (o.abs(), *o));
    let mut best: Option<SyncScores> = None;
    for o in offsets {
        let lo = 0.max(-o);
        let hi = n.min(n - o);
        if hi - lo < MIN_OVERLAP as i64 {
            continue;
        }
        let a = &audio[lo as usize..hi as usize];
        let l = &lip[(lo + o) as usize..(hi + o) as usize];
        let score = match (unit(a), unit(l)) {
            (Some(ua), Some(ul)) => {
                let r: f64 = ua.iter().zip(&ul).map(|(x, y)| x * y).sum();
                let d = ua.iter().zip(&ul).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                SyncScores {
                    confidence: r.clamp(-1.0, 1.0),
                    distance: d,
                    offset: o,
                }
            }
            _ => SyncScores {
                confidence: 0.0,
                distance: std::f64::consts::SQRT_2,
                offset: o,
            },
        };
        if best.is_none_or(|b| score.confidence > b.confidence) {
            best = Some(score);
        }
    }
    best.ok_or_else(|| Error::invalid("no offset leaves enough overlap"))
}

/// [`sync_scores`] of audio feature change against lip-region pixel change.
pub fn sync_proxy(audio: &Tensor, frames: &[Tensor], lip_mask: &Tensor) -> Result<SyncScores> {
    if frames.len() < 5 || audio.rank() != 2 || audio.shape()[0] != frames.len() {
        return Err(Error::invalid(format!(
            "sync proxy needs S >= 5 frames with one audio row each; got {} frames, audio {:?}",
            frames.len(),
            audio.shape()
        )));
    }
    sync_scores(&audio_energy(audio)?, &lip_energy(frames, lip_mask)?)
}
