//! Audio feature ingestion: per-frame features shaped like a stack of
//! `AUDIO_LAYERS` encoder layers of width `D_raw`, a three-layer projection
//! to `D_a`, and clip windowing.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{LinearParams, Module, Param};
use crate::tensor::{Graph, Tensor, Var};
use crate::util::seeded_rng;

/// Number of stacked feature layers per frame.
pub const AUDIO_LAYERS: usize = 12;

/// Length of the context window each clip draws its features from.
const WINDOW_SECONDS: f64 = 5.0;

/// `Linear → ReLU → Linear → ReLU → Linear`, applied per frame.
#[derive(Clone, Debug)]
pub struct AudioProjection {
    pub layers: [LinearParams; 3],
}

impl AudioProjection {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, hidden: usize, d_a: usize, rng: &mut R) -> Self {
        AudioProjection {
            layers: [
                LinearParams::new(&format!("{name}.fc0"), d_in, hidden, true, rng),
                LinearParams::new(&format!("{name}.fc1"), hidden, hidden, true, rng),
                LinearParams::new(&format!("{name}.fc2"), hidden, d_a, true, rng),
            ],
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn d_out(&self) -> usize {
        self.layers[2].out_dim()
    }

    /// `raw: [S, 12·D_raw]` → `[S, D_a]`.
    pub fn forward(&self, g: &mut Graph, raw: &Var) -> Result<Var> {
        if raw.shape().len() != 2 || raw.shape()[1] != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "audio projection",
                lhs: raw.shape().to_vec(),
                rhs: vec![self.d_in()],
            });
        }
        let h = self.layers[0].forward(g, raw)?;
        let h = g.relu(&h);
        let h = self.layers[1].forward(g, &h)?;
        let h = g.relu(&h);
        self.layers[2].forward(g, &h)
    }

    pub fn project(&self, raw: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(raw.clone());
        Ok(self.forward(&mut g, &x)?.into_value())
    }
}

impl Module for AudioProjection {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Feature rows for frames `start .. start + s` of a `[L, D]` timeline.
///
/// A row is copied when its frame lies on the timeline and its time `i / fps`
/// falls inside the 5 s window `[c − 2.5, c + 2.5)` centred on the clip
/// (`c = (start + s/2) / fps`); otherwise it is zero.
pub fn audio_segment(features: &Tensor, start: i64, s: usize, fps: f64) -> Result<Tensor> {
    if start < 0 {
        return Err(Error::invalid(format!("clip start frame {start} is negative")));
    }
    if s == 0 {
        return Err(Error::invalid("clip length must be at least 1"));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::invalid(format!("fps {fps} must be positive")));
    }
    if features.rank() != 2 {
        return Err(Error::InvalidShape {
            what: "audio features [L, D]".into(),
            shape: features.shape().to_vec(),
        });
    }
    let (len, d) = (features.shape()[0], features.shape()[1]);
    let start = start as usize;
    // in frame units relative to the clip centre; the tolerance keeps
    // frames that sit exactly on a window edge from flipping with rounding
    let half = WINDOW_SECONDS / 2.0 * fps;
    let eps = 1e-9;
    let mut out = Tensor::zeros(&[s, d]);
    let src = features.data();
    let dst = out.data_mut();
    for j in 0..s {
        let frame = start + j;
        let offset = j as f64 - s as f64 / 2.0;
        if frame < len && offset >= -half - eps && offset < half - eps {
            dst[j * d..(j + 1) * d].copy_from_slice(&src[frame * d..(frame + 1) * d]);
        }
    }
    Ok(out)
}

/// Deterministic stand-in for speech-encoder features: every one of the
/// `12 · d_raw` channels mixes the loudness `envelope` with a channel-specific
/// sinusoid and a little Gaussian noise. The channel mix is fixed by
/// `mix_seed` (shared by every clip of a corpus), the noise by `noise_seed`.
/// Returns `[envelope.len(), 12·d_raw]`.
pub fn synthetic_audio_features(envelope: &[f64], d_raw: usize, mix_seed: u64, noise_seed: u64) -> Tensor {
    let width = AUDIO_LAYERS * d_raw;
    let mut rng = seeded_rng(mix_seed);
    let mix: Vec<(f64, f64, f64, f64)> = (0..width)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..0.3),
                rng.random_range(0.05..0.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut rng = seeded_rng(noise_seed);
    let mut data = Vec::with_capacity(envelope.len() * width);
    for (t, &e) in envelope.iter().enumerate() {
        for &(gain, wobble, freq, phase) in &mix {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(gain * e + wobble * (freq * t as f64 + phase).sin() + 0.02 * noise);
        }
    }
    Tensor::from_parts(vec![envelope.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use proptest::prelude::*;

    fn timeline(len: usize, d: usize) -> Tensor {
        Tensor::from_fn(&[len, d], |i| (i / d) as f64 + 1.0)
    }

    #[test]
    fn projection_shapes_and_zero_input() {
        let mut rng = seeded_rng(3);
        let mut p = AudioProjection::new("audio", 96, 64, 32, &mut rng);
        let raw = Tensor::randn(&[14, 96], 1.0, &mut rng);
        assert_eq!(p.project(&raw).unwrap().shape(), &[14, 32]);
        for l in p.layers.iter_mut() {
            if let Some(b) = &mut l.bias {
                b.value = Tensor::zeros(b.shape());
            }
        }
        assert!(p.project(&Tensor::zeros(&[3, 96])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.project(&Tensor::zeros(&[3, 95])).is_err());
    }

    #[test]
    fn projection_gradient() {
        let mut rng = seeded_rng(5);
        let p = AudioProjection::new("audio", 6, 5, 3, &mut rng);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let err = check_gradients(
            |g, x| {
                let y = p.forward(g, x)?;
                let sq = g.hadamard(&y, &y)?;
                Ok(g.sum(&sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn segment_inside_timeline_is_a_slice() {
        let f = timeline(100, 3);
        let seg = audio_segment(&f, 20, 14, 25.0).unwrap();
        assert!(seg.bit_eq(&f.narrow(0, 20, 14).unwrap()));
    }

    #[test]
    fn segment_past_the_end_is_zero_padded() {
        let f = timeline(30, 2);
        let seg = audio_segment(&f, 25, 10, 25.0).unwrap();
        assert!(seg.narrow(0, 0, 5).unwrap().bit_eq(&f.narrow(0, 25, 5).unwrap()));
        assert!(seg.narrow(0, 5, 5).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_longer_than_window_pads_leading_rows() {
        // 14 frames at 2 fps span 7 s; the centred 5 s window starts at 1 s
        let f = timeline(40, 2);
        let seg = audio_segment(&f, 0, 14, 2.0).unwrap();
        for j in 0..14 {
            let expect = if (2..12).contains(&j) { j as f64 + 1.0 } else { 0.0 };
            assert_eq!(seg.get(&[j, 0]), expect, "row {j}");
        }
    }

    #[test]
    fn segment_at_fourteen_fifths_fps_covers_window_exactly() {
        let f = timeline(200, 1);
        for start in 0..50i64 {
            let seg = audio_segment(&f, start, 14, 14.0 / 5.0).unwrap();
            // exact enumeration: with fps = 14/5, i/fps − c = 5(j − 7)/14 for
            // row j, so the row is inside iff −35 ≤ 5(j − 7) < 35
            let inside: Vec<bool> = (0..14i64).map(|j| (-35..35).contains(&(5 * (j - 7)))).collect();
            assert!(inside.iter().all(|&b| b), "start {start}");
            assert!(seg.bit_eq(&f.narrow(0, start as usize, 14).unwrap()));
        }
        assert!(audio_segment(&f, -1, 14, 2.8).is_err());
        assert!(audio_segment(&f, 0, 0, 2.8).is_err());
    }

    #[test]
    fn synthetic_features_are_deterministic() {
        let env: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin().abs()).collect();
        let a = synthetic_audio_features(&env, 8, 7, 1);
        assert_eq!(a.shape(), &[20, 96]);
        assert!(a.bit_eq(&synthetic_audio_features(&env, 8, 7, 1)));
        assert!(!a.bit_eq(&synthetic_audio_features(&env, 8, 8, 1)));
        assert!(!a.bit_eq(&synthetic_audio_features(&env, 8, 7, 2)));
    }

    proptest! {
        #[test]
        fn projection_is_frame_local(seed in any::<u64>(), rows in 2usize..6) {
            let mut rng = seeded_rng(seed);
            let p = AudioProjection::new("audio", 6, 5, 3, &mut rng);
            let x = Tensor::randn(&[rows, 6], 1.0, &mut rng);
            let rev = Tensor::from_fn(&[rows, 6], |i| x.data()[(rows - 1 - i / 6) * 6 + i % 6]);
            let (y, yr) = (p.project(&x).unwrap(), p.project(&rev).unwrap());
            for r in 0..rows {
                for d in 0..3 {
                    prop_assert_eq!(y.get(&[r, d]), yr.get(&[rows - 1 - r, d]));
                }
            }
        }
    }
}
