//! Scaled dot-product attention with learnable `W_Q`, `W_K`, `W_V`.
//!
//! Queries, keys and values are rows: for latent tokens `z: [N_q, D_z]` and
//! condition tokens `c: [N_k, D_c]`,
//!
//! ```text
//! Q = z W_Qᵀ   K = c W_Kᵀ   V = c W_Vᵀ
//! out = softmax(scale · Q Kᵀ) V          // [N_q, D_e]
//! ```
//!
//! There is no output projection; whatever follows the attention does the
//! mixing. With `heads > 1` the `D_e` columns are split evenly across heads
//! and the per-head outputs are concatenated back.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_uniform, Module, Param};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `[D_e, D_z]`
    pub w_q: Param,
    /// `[D_e, D_c]`
    pub w_k: Param,
    /// `[D_e, D_c]`
    pub w_v: Param,
    pub scale: f64,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(name: &str, d_z: usize, d_c: usize, d_e: usize, rng: &mut R) -> Self {
        AttentionParams {
            w_q: Param::new(format!("{name}.w_q"), init_uniform(&[d_e, d_z], d_z, rng)),
            w_k: Param::new(format!("{name}.w_k"), init_uniform(&[d_e, d_c], d_c, rng)),
            w_v: Param::new(format!("{name}.w_v"), init_uniform(&[d_e, d_c], d_c, rng)),
            scale: 1.0 / (d_e as f64).sqrt(),
            heads: 1,
        }
    }

    pub fn from_tensors(name: &str, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        for (label, w) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v)] {
            if w.rank() != 2 {
                return Err(Error::InvalidShape {
                    what: format!("{label} (rank 2)"),
                    shape: w.shape().to_vec(),
                });
            }
        }
        if w_q.shape()[0] != w_k.shape()[0] || w_k.shape()[0] != w_v.shape()[0] {
            return Err(Error::invalid(format!(
                "projection row counts differ: W_Q {:?}, W_K {:?}, W_V {:?}",
                w_q.shape(),
                w_k.shape(),
                w_v.shape()
            )));
        }
        if w_k.shape()[1] != w_v.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "attention W_K / W_V",
                lhs: w_k.shape().to_vec(),
                rhs: w_v.shape().to_vec(),
            });
        }
        let d_e = w_q.shape()[0];
        Ok(AttentionParams {
            w_q: Param::new(format!("{name}.w_q"), w_q),
            w_k: Param::new(format!("{name}.w_k"), w_k),
            w_v: Param::new(format!("{name}.w_v"), w_v),
            scale: 1.0 / (d_e as f64).sqrt(),
            heads: 1,
        })
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Splits `D_e` across `heads`; the default scale becomes
    /// `1/sqrt(D_e / heads)`.
    pub fn with_heads(mut self, heads: usize) -> Result<Self> {
        if heads == 0 || self.d_e() % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide D_e = {}", self.d_e())));
        }
        self.heads = heads;
        self.scale = 1.0 / ((self.d_e() / heads) as f64).sqrt();
        Ok(self)
    }

    /// Zeroes `W_V` so the attention output starts at exactly zero.
    pub fn zero_values(mut self) -> Self {
        self.w_v.value = Tensor::zeros(self.w_v.shape());
        self
    }

    pub fn d_e(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_z(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn d_c(&self) -> usize {
        self.w_k.shape()[1]
    }
}

impl Module for AttentionParams {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_q, &self.w_k, &self.w_v]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }
}

/// Attention output together with its softmax matrix, for introspection.
#[derive(Clone, Debug)]
pub struct AttentionResult {
    /// `[B, N_q, D_e]` (or `[N_q, D_e]` for the unbatched entry points).
    pub out: Var,
    /// `[B · heads, N_q, N_k]`; every row is a probability distribution.
    pub weights: Var,
}

fn project(g: &mut Graph, x: &Var, w: &Param, label: &str) -> Result<Var> {
    let s = x.shape().to_vec();
    if s.len() != 3 || s[2] != w.shape()[1] || s[1] == 0 {
        return Err(Error::invalid(format!(
            "{label} projection {:?} cannot apply to tokens {:?}",
            w.shape(),
            s
        )));
    }
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let wv = w.bind(g);
    let y = g.matmul_nt(&flat, &wv)?;
    g.reshape(&y, &[s[0], s[1], w.shape()[0]])
}

fn split_heads(g: &mut Graph, x: &Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x.clone());
    }
    let s = x.shape().to_vec();
    let d = s[2] / heads;
    let x = g.reshape(x, &[s[0], s[1], heads, d])?;
    let x = g.permute(&x, &[0, 2, 1, 3])?;
    g.reshape(&x, &[s[0] * heads, s[1], d])
}

fn merge_heads(g: &mut Graph, x: &Var, batch: usize, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x.clone());
    }
    let s = x.shape().to_vec();
    let x = g.reshape(x, &[batch, heads, s[1], s[2]])?;
    let x = g.permute(&x, &[0, 2, 1, 3])?;
    g.reshape(&x, &[batch, s[1], heads * s[2]])
}

/// Attention for a batch of independent query/key sets:
/// `z: [B, N_q, D_z]`, `c: [B, N_k, D_c]` → `[B, N_q, D_e]`.
pub fn batched_cross_attention(g: &mut Graph, z: &Var, c: &Var, p: &AttentionParams) -> Result<AttentionResult> {
    if z.shape().len() != 3 || c.shape().len() != 3 || z.shape()[0] != c.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "cross_attention batch",
            lhs: z.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    let batch = z.shape()[0];
    let q = project(g, z, &p.w_q, "query W_Q")?;
    let k = project(g, c, &p.w_k, "key W_K")?;
    let v = project(g, c, &p.w_v, "value W_V")?;
    let (q, k, v) = (
        split_heads(g, &q, p.heads)?,
        split_heads(g, &k, p.heads)?,
        split_heads(g, &v, p.heads)?,
    );
    let scores = g.bmm_nt(&q, &k)?;
    let scores = g.scale(&scores, p.scale);
    let weights = g.softmax(&scores)?;
    let out = g.bmm(&weights, &v)?;
    let out = merge_heads(g, &out, batch, p.heads)?;
    Ok(AttentionResult { out, weights })
}

/// `z: [N_q, D_z]`, `c: [N_k, D_c]` → `[N_q, D_e]`, with the softmax matrix.
pub fn cross_attention_with_weights(g: &mut Graph, z: &Var, c: &Var, p: &AttentionParams) -> Result<AttentionResult> {
    let as_batch = |g: &mut Graph, x: &Var, what: &str| -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                what: format!("{what} tokens (rank 2)"),
                shape: s,
            });
        }
        g.reshape(x, &[1, s[0], s[1]])
    };
    let zb = as_batch(g, z, "query")?;
    let cb = as_batch(g, c, "key/value")?;
    let r = batched_cross_attention(g, &zb, &cb, p)?;
    let s = r.out.shape().to_vec();
    let out = g.reshape(&r.out, &[s[1], s[2]])?;
    Ok(AttentionResult { out, weights: r.weights })
}

pub fn cross_attention(g: &mut Graph, z: &Var, c: &Var, p: &AttentionParams) -> Result<Var> {
    Ok(cross_attention_with_weights(g, z, c, p)?.out)
}

/// `cross_attention(x, x, p)`.
pub fn self_attention(g: &mut Graph, x: &Var, p: &AttentionParams) -> Result<Var> {
    cross_attention(g, x, x, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use crate::util::seeded_rng;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn eval(z: &Tensor, c: &Tensor, p: &AttentionParams) -> Tensor {
        let mut g = Graph::no_grad();
        let z = g.constant(z.clone());
        let c = g.constant(c.clone());
        cross_attention(&mut g, &z, &c, p).unwrap().into_value()
    }

    #[test]
    fn two_key_closed_form() {
        let p = AttentionParams::from_tensors("a", Tensor::eye(2), Tensor::eye(2), Tensor::eye(2))
            .unwrap()
            .with_scale(1.0);
        let out = eval(&t(&[1, 2], &[1.0, 0.0]), &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &p);
        let e = std::f64::consts::E;
        assert!((out.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((out.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut rng = seeded_rng(2);
        let p = AttentionParams::new("a", 3, 4, 5, &mut rng);
        let z = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let c = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let out = eval(&z, &c, &p);
        let mut expect = vec![0.0; 5];
        for (e, row) in expect.iter_mut().zip(p.w_v.value.data().chunks(4)) {
            *e = row.iter().zip(c.data()).map(|(a, b)| a * b).sum();
        }
        for row in out.data().chunks(5) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn duplicated_keys_leave_output_unchanged() {
        let mut rng = seeded_rng(4);
        let p = AttentionParams::new("a", 3, 2, 4, &mut rng);
        let z = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let c = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let doubled = Tensor::concat(&[&c, &c], 0).unwrap();
        let diff = eval(&z, &c, &p).max_abs_diff(&eval(&z, &doubled, &p)).unwrap();
        assert!(diff < 1e-14, "{diff}");
    }

    #[test]
    fn reports_failing_projection() {
        let mut rng = seeded_rng(1);
        let p = AttentionParams::new("a", 3, 2, 4, &mut rng);
        let mut g = Graph::no_grad();
        let z = g.constant(Tensor::zeros(&[2, 5]));
        let c = g.constant(Tensor::zeros(&[2, 2]));
        let err = cross_attention(&mut g, &z, &c, &p).unwrap_err().to_string();
        assert!(err.contains("W_Q"), "{err}");
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let c = g.constant(Tensor::zeros(&[2, 7]));
        let err = cross_attention(&mut g, &z, &c, &p).unwrap_err().to_string();
        assert!(err.contains("W_K"), "{err}");
        assert!(AttentionParams::from_tensors("x", Tensor::zeros(&[2, 2]), Tensor::zeros(&[3, 2]), Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn self_attention_examples() {
        let mut rng = seeded_rng(8);
        let p = AttentionParams::new("s", 3, 3, 3, &mut rng);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let out = eval(&x, &x, &p);

        // permuting rows permutes outputs identically
        let perm = [2, 0, 3, 1];
        let xp = Tensor::from_fn(&[4, 3], |i| x.data()[perm[i / 3] * 3 + i % 3]);
        let outp = eval(&xp, &xp, &p);
        for (r, &src) in perm.iter().enumerate() {
            for d in 0..3 {
                assert!((outp.get(&[r, d]) - out.get(&[src, d])).abs() < 1e-14);
            }
        }

        // identical rows → identical outputs
        let same = Tensor::from_fn(&[3, 3], |i| x.data()[i % 3]);
        let o = eval(&same, &same, &p);
        for r in 1..3 {
            for d in 0..3 {
                assert_eq!(o.get(&[r, d]), o.get(&[0, d]));
            }
        }

        // N = 1 → W_V x
        let one = x.narrow(0, 0, 1).unwrap();
        let o = eval(&one, &one, &p);
        for d in 0..3 {
            let v: f64 = (0..3).map(|j| p.w_v.value.get(&[d, j]) * one.data()[j]).sum();
            assert!((o.data()[d] - v).abs() < 1e-14);
        }
    }

    #[test]
    fn multi_head_concatenates_independent_heads() {
        let mut rng = seeded_rng(9);
        let p = AttentionParams::new("m", 3, 2, 4, &mut rng).with_heads(2).unwrap();
        let z = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let c = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let out = eval(&z, &c, &p);
        for h in 0..2 {
            let rows = |w: &Tensor| w.narrow(0, 2 * h, 2).unwrap();
            let head = AttentionParams::from_tensors("h", rows(&p.w_q.value), rows(&p.w_k.value), rows(&p.w_v.value))
                .unwrap();
            let o = eval(&z, &c, &head);
            let slice = out.narrow(1, 2 * h, 2).unwrap();
            assert!(o.max_abs_diff(&slice).unwrap() < 1e-14);
        }
        assert!(AttentionParams::new("m", 3, 2, 4, &mut rng).with_heads(3).is_err());
    }

    #[test]
    fn gradient_of_scalarized_attention() {
        let mut rng = seeded_rng(21);
        let p = AttentionParams::new("a", 3, 2, 4, &mut rng);
        let c = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let z = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let err = check_gradients(
            |g, z| {
                let cv = g.constant(c.clone());
                let o = cross_attention(g, z, &cv, &p)?;
                let sq = g.hadamard(&o, &o)?;
                Ok(g.sum(&sq))
            },
            &z,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn weights_are_distributions_and_keys_permute_freely(seed in any::<u64>(), nq in 1usize..5, nk in 1usize..5) {
            let mut rng = seeded_rng(seed);
            let p = AttentionParams::new("a", 3, 2, 4, &mut rng);
            let z = Tensor::randn(&[nq, 3], 1.0, &mut rng);
            let c = Tensor::randn(&[nk, 2], 1.0, &mut rng);
            let mut g = Graph::no_grad();
            let zv = g.constant(z.clone());
            let cv = g.constant(c.clone());
            let r = cross_attention_with_weights(&mut g, &zv, &cv, &p).unwrap();
            for row in r.weights.value().data().chunks(nk) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&w| w >= 0.0));
            }
            let rev = Tensor::from_fn(&[nk, 2], |i| c.data()[(nk - 1 - i / 2) * 2 + i % 2]);
            let d = r.out.value().max_abs_diff(&eval(&z, &rev, &p)).unwrap();
            prop_assert!(d < 1e-12);
        }
    }
}
