//! Identity embedding: 8×8 average-pooled colour thumbnail, two linear
//! layers with a ReLU between, L2 normalization. A linear classification head
//! over the training identities is used only while training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LinearParams, Module, Param};
use crate::tensor::{Graph, Tensor, Var};

/// Side of the pooled thumbnail.
pub const POOL_GRID: usize = 8;

/// Logit temperature applied to cosine scores of the training head.
const LOGIT_SCALE: f64 = 10.0;

/// Block means of a `[3, H, W]` image on a `POOL_GRID × POOL_GRID` grid,
/// flattened channel-major to `[3 · 64]`.
pub fn pooled_features(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] % POOL_GRID != 0 || s[2] % POOL_GRID != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::InvalidShape {
            what: format!("face image [3, H, W] with H, W multiples of {POOL_GRID}"),
            shape: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let (bh, bw) = (h / POOL_GRID, w / POOL_GRID);
    let norm = 1.0 / (bh * bw) as f64;
    let d = image.data();
    Ok(Tensor::from_fn(&[3 * POOL_GRID * POOL_GRID], |i| {
        let (c, cell) = (i / (POOL_GRID * POOL_GRID), i % (POOL_GRID * POOL_GRID));
        let (r, col) = (cell / POOL_GRID, cell % POOL_GRID);
        let mut acc = 0.0;
        for y in r * bh..(r + 1) * bh {
            let row = c * h * w + y * w;
            acc += d[row + col * bw..row + (col + 1) * bw].iter().sum::<f64>();
        }
        acc * norm
    }))
}

#[derive(Clone, Debug)]
pub struct FaceEncoder {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    /// `[identities, D_f]` classification head, training only.
    pub head: Param,
}

impl FaceEncoder {
    pub fn new<R: Rng + ?Sized>(hidden: usize, d_f: usize, identities: usize, rng: &mut R) -> Self {
        let d_in = 3 * POOL_GRID * POOL_GRID;
        FaceEncoder {
            fc1: LinearParams::new("face.fc1", d_in, hidden, true, rng),
            fc2: LinearParams::new("face.fc2", hidden, d_f, true, rng),
            head: Param::new("face.head", Tensor::randn(&[identities.max(1), d_f], 1.0, rng)),
        }
    }

    pub fn d_f(&self) -> usize {
        self.fc2.out_dim()
    }

    /// Pooled features `[N, 192]` → unit-norm embeddings `[N, D_f]`.
    pub fn embed(&self, g: &mut Graph, pooled: &Var) -> Result<Var> {
        let h = self.fc1.forward(g, pooled)?;
        let h = g.relu(&h);
        let e = self.fc2.forward(g, &h)?;
        g.l2_normalize(&e)
    }

    /// Cross-entropy of identity `labels` under cosine logits against the
    /// normalized head rows.
    pub fn classification_loss(&self, g: &mut Graph, pooled: &Var, labels: &[usize]) -> Result<Var> {
        let n = pooled.shape()[0];
        let k = self.head.shape()[0];
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid(format!("{} labels for {n} samples over {k} identities", labels.len())));
        }
        let e = self.embed(g, pooled)?;
        let head = self.head.bind(g);
        let head = g.l2_normalize(&head)?;
        let logits = g.matmul_nt(&e, &head)?;
        let logits = g.scale(&logits, LOGIT_SCALE);
        let p = g.softmax(&logits)?;
        let onehot = g.constant(Tensor::from_fn(&[n, k], |i| f64::from(labels[i / k] == i % k)));
        let picked = g.hadamard(&p, &onehot)?;
        let ones = g.constant(Tensor::ones(&[k, 1]));
        let p_label = g.matmul(&picked, &ones)?;
        let logp = g.ln(&p_label);
        let total = g.sum(&logp);
        Ok(g.scale(&total, -1.0 / n as f64))
    }

    /// `[3, H, W]` → unit-norm `[D_f]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let pooled = pooled_features(image)?;
        let mut g = Graph::no_grad();
        let x = g.constant(pooled.reshape(&[1, pooled.numel()])?);
        let e = self.embed(&mut g, &x)?.into_value();
        e.reshape(&[self.d_f()])
    }
}

impl Module for FaceEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.fc1.params();
        out.extend(self.fc2.params());
        out.push(&self.head);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.fc1.params_mut();
        out.extend(self.fc2.params_mut());
        out.push(&mut self.head);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use crate::util::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn pooling_of_constant_blocks() {
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i / 256) as f64 + ((i % 16) / 2) as f64 * 0.1);
        let p = pooled_features(&img).unwrap();
        assert_eq!(p.shape(), &[192]);
        assert!((p.data()[64 + 3] - (1.0 + 0.3)).abs() < 1e-12);
        assert!(pooled_features(&Tensor::zeros(&[3, 12, 16])).is_err());
    }

    #[test]
    fn classification_loss_gradient() {
        let mut rng = seeded_rng(4);
        let enc = FaceEncoder::new(8, 4, 3, &mut rng);
        let x = Tensor::uniform(&[3, 192], 1.0, &mut rng);
        let err = check_gradients(|g, x| enc.classification_loss(g, x, &[0, 2, 1]), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn embeddings_are_unit_norm_and_deterministic(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let enc = FaceEncoder::new(16, 8, 2, &mut rng);
            let img = Tensor::uniform(&[3, 32, 32], 0.5, &mut rng).map(|v| v + 0.5);
            let e = enc.encode(&img).unwrap();
            prop_assert!((e.sq_norm().sqrt() - 1.0).abs() < 1e-9);
            prop_assert!(e.bit_eq(&enc.encode(&img).unwrap()));
        }
    }
}
