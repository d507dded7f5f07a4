use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{numel_of, split_at_axis, Tensor};
use crate::error::{Error, Result};

/// A tensor taking part in a [`Graph`].
///
/// Holds the forward value directly; `node` is set when the value depends on
/// something that requires a gradient.
#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Option<usize>,
        b: Option<usize>,
        a_val: Tensor,
        b_val: Tensor,
        trans_b: bool,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
        b_shape: Vec<usize>,
        negate_b: bool,
    },
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        a_val: Tensor,
        b_val: Tensor,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Silu {
        a: usize,
        x: Tensor,
    },
    Relu {
        a: usize,
        x: Tensor,
    },
    Ln {
        a: usize,
        x: Tensor,
    },
    Softmax {
        a: usize,
        y: Tensor,
    },
    L2Normalize {
        a: usize,
        y: Tensor,
        norms: Vec<f64>,
    },
    Sum {
        a: usize,
        in_shape: Vec<usize>,
        scale: f64,
    },
    Reshape {
        a: usize,
        in_shape: Vec<usize>,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
        in_shape: Vec<usize>,
    },
    Concat {
        inputs: Vec<Option<usize>>,
        axis: usize,
        sizes: Vec<usize>,
    },
    Im2Col {
        a: usize,
        geom: ConvGeom,
    },
    Upsample2x {
        a: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
}

type TrainablePredicate = Arc<dyn Fn(&str) -> bool + Send + Sync>;

/// A reverse-mode autodiff tape.
///
/// Operations on [`Var`]s are recorded only when at least one input requires
/// a gradient, so a graph built with [`Graph::no_grad`] keeps nothing alive
/// beyond the handles the caller holds. A graph is single-threaded; separate
/// graphs may run on separate threads.
pub struct Graph {
    grad_enabled: bool,
    trainable: Option<TrainablePredicate>,
    ops: Vec<Op>,
    leaf_grads: HashMap<usize, Tensor>,
    named: HashMap<Arc<str>, Var>,
    named_nodes: Vec<(Arc<str>, usize)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("grad_enabled", &self.grad_enabled)
            .field("nodes", &self.ops.len())
            .finish()
    }
}

impl Graph {
    /// A graph in which every named parameter is trainable.
    pub fn new() -> Self {
        Graph {
            grad_enabled: true,
            trainable: None,
            ops: Vec::new(),
            leaf_grads: HashMap::new(),
            named: HashMap::new(),
            named_nodes: Vec::new(),
        }
    }

    /// A graph that never records operations.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// A graph where only parameters whose name satisfies `pred` get gradients.
    pub fn with_trainable(pred: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        Graph {
            trainable: Some(Arc::new(pred)),
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    fn record(&mut self, value: Tensor, track: bool, op: impl FnOnce() -> Op) -> Var {
        if track && self.grad_enabled {
            self.ops.push(op());
            Var {
                value,
                node: Some(self.ops.len() - 1),
            }
        } else {
            Var { value, node: None }
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        Var { value, node: None }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.record(value, requires_grad, || Op::Leaf)
    }

    /// A named leaf, created once per graph and reused on later lookups.
    pub fn named_leaf(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(v) = self.named.get(name) {
            return v.clone();
        }
        let trainable = self.trainable.as_ref().is_none_or(|p| p(name));
        let var = self.leaf(value.clone(), trainable);
        let key: Arc<str> = Arc::from(name);
        if let Some(node) = var.node {
            self.named_nodes.push((Arc::clone(&key), node));
        }
        self.named.insert(key, var.clone());
        var
    }

    /// Makes later [`Graph::named_leaf`] lookups of `name` return `var`, e.g.
    /// to differentiate a model with respect to one of its weights.
    pub fn bind_named(&mut self, name: &str, var: &Var) {
        let key: Arc<str> = Arc::from(name);
        if let Some(node) = var.node {
            self.named_nodes.push((Arc::clone(&key), node));
        }
        self.named.insert(key, var.clone());
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.mm(a, b, false, 2, "matmul")
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.mm(a, b, true, 2, "matmul_nt")
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.mm(a, b, false, 3, "bmm")
    }

    /// Batched `a · bᵀ` of `[B, m, k]` and `[B, n, k]`.
    pub fn bmm_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.mm(a, b, true, 3, "bmm_nt")
    }

    fn mm(&mut self, a: &Var, b: &Var, trans_b: bool, rank: usize, op: &'static str) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != rank || sb.len() != rank {
            return Err(mismatch());
        }
        let batch = if rank == 3 { sa[0] } else { 1 };
        if rank == 3 && sb[0] != batch {
            return Err(mismatch());
        }
        let (m, k) = (sa[rank - 2], sa[rank - 1]);
        let (kb, n) = if trans_b {
            (sb[rank - 1], sb[rank - 2])
        } else {
            (sb[rank - 2], sb[rank - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (a.value.data(), b.value.data());
        for i in 0..batch {
            let a_i = &ad[i * m * k..(i + 1) * m * k];
            let b_i = &bd[i * k * n..(i + 1) * k * n];
            let c_i = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(m, k, n, a_i, b_i, c_i);
            } else {
                kernels::gemm_nn(m, k, n, a_i, b_i, c_i);
            }
        }
        let shape = if rank == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::from_parts(shape, out);
        let track = a.node.is_some() || b.node.is_some();
        Ok(self.record(value, track, || Op::MatMul {
            a: a.node,
            b: b.node,
            a_val: a.value.clone(),
            b_val: b.value.clone(),
            trans_b,
        }))
    }

    pub fn transpose(&mut self, a: &Var) -> Result<Var> {
        if a.value.rank() != 2 {
            return Err(Error::InvalidShape {
                what: "transpose operand (rank 2)".into(),
                shape: a.shape().to_vec(),
            });
        }
        self.permute(a, &[1, 0])
    }

    // ---------------------------------------------------------------- elementwise

    fn check_broadcast(a: &Var, b: &Var, op: &'static str) -> Result<()> {
        if !kernels::broadcastable(a.shape(), b.shape()) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `a + b`; `b` may have extent 1 on any axis where `a` does not.
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.add_impl(a, b, false, "add")
    }

    /// `a − b` with the same broadcasting rule as [`Graph::add`].
    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.add_impl(a, b, true, "sub")
    }

    fn add_impl(&mut self, a: &Var, b: &Var, negate_b: bool, op: &'static str) -> Result<Var> {
        Self::check_broadcast(a, b, op)?;
        let data = if negate_b {
            kernels::broadcast_zip(a.shape(), a.value.data(), b.shape(), b.value.data(), |x, y| x - y)
        } else {
            kernels::broadcast_zip(a.shape(), a.value.data(), b.shape(), b.value.data(), |x, y| x + y)
        };
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        let track = a.node.is_some() || b.node.is_some();
        Ok(self.record(value, track, || Op::Add {
            a: a.node,
            b: b.node,
            b_shape: b.shape().to_vec(),
            negate_b,
        }))
    }

    /// Elementwise product. `b` is either the same shape as `a` or a mask with
    /// extent 1 on the axes it is repeated along (e.g. a single-channel
    /// spatial mask applied to every channel).
    pub fn hadamard(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::check_broadcast(a, b, "hadamard")?;
        let data = kernels::broadcast_zip(a.shape(), a.value.data(), b.shape(), b.value.data(), |x, y| x * y);
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        let track = a.node.is_some() || b.node.is_some();
        Ok(self.record(value, track, || Op::Mul {
            a: a.node,
            b: b.node,
            a_val: a.value.clone(),
            b_val: b.value.clone(),
        }))
    }

    pub fn scale(&mut self, a: &Var, c: f64) -> Var {
        let value = a.value.scale(c);
        match a.node {
            Some(node) => self.record(value, true, || Op::Scale { a: node, c }),
            None => self.constant(value),
        }
    }

    fn unary(&mut self, a: &Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var {
        let value = a.value.map(f);
        match a.node {
            Some(node) => self.record(value, true, || op(node)),
            None => self.constant(value),
        }
    }

    pub fn silu(&mut self, a: &Var) -> Var {
        let x = a.value.clone();
        self.unary(a, |v| v / (1.0 + (-v).exp()), |node| Op::Silu { a: node, x })
    }

    pub fn relu(&mut self, a: &Var) -> Var {
        let x = a.value.clone();
        self.unary(a, |v| v.max(0.0), |node| Op::Relu { a: node, x })
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, a: &Var) -> Var {
        let x = a.value.clone();
        self.unary(a, f64::ln, |node| Op::Ln { a: node, x })
    }

    /// Softmax over the last axis, stabilized by subtracting each row's max.
    pub fn softmax(&mut self, a: &Var) -> Result<Var> {
        let n = *a.shape().last().ok_or_else(|| Error::InvalidShape {
            what: "softmax operand".into(),
            shape: Vec::new(),
        })?;
        let value = Tensor::from_parts(a.shape().to_vec(), kernels::softmax_rows(n, a.value.data()));
        Ok(match a.node {
            Some(node) => {
                let y = value.clone();
                self.record(value, true, || Op::Softmax { a: node, y })
            }
            None => self.constant(value),
        })
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: &Var) -> Result<Var> {
        let n = *a.shape().last().ok_or_else(|| Error::InvalidShape {
            what: "l2_normalize operand".into(),
            shape: Vec::new(),
        })?;
        let mut norms = Vec::with_capacity(a.value.numel() / n);
        let mut out = Vec::with_capacity(a.value.numel());
        for row in a.value.data().chunks_exact(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::from_parts(a.shape().to_vec(), out);
        Ok(match a.node {
            Some(node) => {
                let y = value.clone();
                self.record(value, true, || Op::L2Normalize { a: node, y, norms })
            }
            None => self.constant(value),
        })
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: &Var) -> Var {
        self.reduce(a, 1.0)
    }

    pub fn mean(&mut self, a: &Var) -> Var {
        self.reduce(a, 1.0 / a.value.numel() as f64)
    }

    fn reduce(&mut self, a: &Var, scale: f64) -> Var {
        let value = Tensor::scalar(a.value.sum() * scale);
        match a.node {
            Some(node) => {
                let in_shape = a.shape().to_vec();
                self.record(value, true, || Op::Sum {
                    a: node,
                    in_shape,
                    scale,
                })
            }
            None => self.constant(value),
        }
    }

    /// Mean of `(a − b)²` over all entries.
    pub fn mse(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let d = self.sub(a, b)?;
        let sq = self.hadamard(&d, &d)?;
        Ok(self.mean(&sq))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let value = a.value.reshape(shape)?;
        Ok(match a.node {
            Some(node) => {
                let in_shape = a.shape().to_vec();
                self.record(value, true, || Op::Reshape { a: node, in_shape })
            }
            None => self.constant(value),
        })
    }

    pub fn permute(&mut self, a: &Var, perm: &[usize]) -> Result<Var> {
        let rank = a.value.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let (shape, data) = kernels::permute(a.shape(), perm, a.value.data());
        let value = Tensor::from_parts(shape, data);
        Ok(match a.node {
            Some(node) => {
                let perm = perm.to_vec();
                self.record(value, true, || Op::Permute { a: node, perm })
            }
            None => self.constant(value),
        })
    }

    pub fn narrow(&mut self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = a.value.narrow(axis, start, len)?;
        Ok(match a.node {
            Some(node) => {
                let in_shape = a.shape().to_vec();
                self.record(value, true, || Op::Narrow {
                    a: node,
                    axis,
                    start,
                    in_shape,
                })
            }
            None => self.constant(value),
        })
    }

    pub fn concat(&mut self, parts: &[&Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| &v.value).collect();
        let value = Tensor::concat(&values, axis)?;
        let track = parts.iter().any(|v| v.node.is_some());
        Ok(self.record(value, track, || Op::Concat {
            inputs: parts.iter().map(|v| v.node).collect(),
            axis,
            sizes: parts.iter().map(|v| v.shape()[axis]).collect(),
        }))
    }

    /// Unfolds 3×3 patches (padding 1) of `x: [N, C, H, W]` into
    /// `[C·9, N·Ho·Wo]` columns.
    pub fn im2col(&mut self, x: &Var, stride: usize) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || stride == 0 {
            return Err(Error::InvalidShape {
                what: format!("im2col input [N, C, H, W] with stride {stride}"),
                shape: s.to_vec(),
            });
        }
        let geom = ConvGeom {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            stride,
        };
        let value = Tensor::from_parts(geom.cols_shape().to_vec(), kernels::im2col(geom, x.value.data()));
        Ok(match x.node {
            Some(node) => self.record(value, true, || Op::Im2Col { a: node, geom }),
            None => self.constant(value),
        })
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::InvalidShape {
                what: "upsample operand (rank ≥ 2)".into(),
                shape: s.to_vec(),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel_of(&s[..s.len() - 2]);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let value = Tensor::from_parts(shape, kernels::upsample2x(planes, h, w, x.value.data()));
        Ok(match x.node {
            Some(node) => self.record(value, true, || Op::Upsample2x { a: node, planes, h, w }),
            None => self.constant(value),
        })
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode accumulation from a one-element `loss` into every leaf
    /// that requires a gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let Some(root) = loss.node else {
            return Ok(());
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(loss.shape()));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let mut push = |node: Option<usize>, t: Tensor| {
            if let Some(n) = node {
                accumulate(&mut grads[n], t);
            }
        };
        match &self.ops[i] {
            Op::Leaf => {
                let slot = self.leaf_grads.remove(&i);
                let mut total = Some(g);
                if let Some(prev) = slot {
                    accumulate(&mut total, prev);
                }
                self.leaf_grads.insert(i, total.expect("set"));
            }
            Op::MatMul {
                a,
                b,
                a_val,
                b_val,
                trans_b,
            } => {
                let (sa, sb) = (a_val.shape(), b_val.shape());
                let rank = sa.len();
                let batch = if rank == 3 { sa[0] } else { 1 };
                let (m, k) = (sa[rank - 2], sa[rank - 1]);
                let n = g.shape()[rank - 1];
                let gd = g.data();
                if a.is_some() {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let g_i = &gd[bi * m * n..(bi + 1) * m * n];
                        let b_i = &b_val.data()[bi * k * n..(bi + 1) * k * n];
                        let d_i = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            kernels::gemm_nn(m, n, k, g_i, b_i, d_i);
                        } else {
                            kernels::gemm_nt(m, n, k, g_i, b_i, d_i);
                        }
                    }
                    push(*a, Tensor::from_parts(sa.to_vec(), da));
                }
                if b.is_some() {
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let g_i = &gd[bi * m * n..(bi + 1) * m * n];
                        let a_i = &a_val.data()[bi * m * k..(bi + 1) * m * k];
                        let d_i = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            kernels::gemm_tn(n, m, k, g_i, a_i, d_i);
                        } else {
                            kernels::gemm_tn(k, m, n, a_i, g_i, d_i);
                        }
                    }
                    push(*b, Tensor::from_parts(sb.to_vec(), db));
                }
            }
            Op::Add {
                a,
                b,
                b_shape,
                negate_b,
            } => {
                if b.is_some() {
                    let mut db = kernels::reduce_to(g.shape(), g.data(), b_shape);
                    if *negate_b {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    push(*b, Tensor::from_parts(b_shape.clone(), db));
                }
                push(*a, g);
            }
            Op::Mul { a, b, a_val, b_val } => {
                if a.is_some() {
                    let da = kernels::broadcast_zip(g.shape(), g.data(), b_val.shape(), b_val.data(), |x, y| x * y);
                    push(*a, Tensor::from_parts(g.shape().to_vec(), da));
                }
                if b.is_some() {
                    let db = kernels::reduce_product_to(g.shape(), g.data(), a_val.data(), b_val.shape());
                    push(*b, Tensor::from_parts(b_val.shape().to_vec(), db));
                }
            }
            Op::Scale { a, c } => push(Some(*a), g.scale(*c)),
            Op::Silu { a, x } => {
                let d = zip(&g, x, |gv, xv| {
                    let s = 1.0 / (1.0 + (-xv).exp());
                    gv * s * (1.0 + xv * (1.0 - s))
                });
                push(Some(*a), d);
            }
            Op::Relu { a, x } => push(Some(*a), zip(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            Op::Ln { a, x } => push(Some(*a), zip(&g, x, |gv, xv| gv / xv)),
            Op::Softmax { a, y } => {
                let n = *y.shape().last().expect("rank ≥ 1");
                let mut out = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(n)
                    .zip(g.data().chunks_exact(n))
                    .zip(out.chunks_exact_mut(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                push(Some(*a), Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::L2Normalize { a, y, norms } => {
                let n = *y.shape().last().expect("rank ≥ 1");
                let mut out = vec![0.0; y.numel()];
                for (((yr, gr), dr), norm) in y
                    .data()
                    .chunks_exact(n)
                    .zip(g.data().chunks_exact(n))
                    .zip(out.chunks_exact_mut(n))
                    .zip(norms)
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / norm;
                    }
                }
                push(Some(*a), Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::Sum { a, in_shape, scale } => {
                let v = g.data()[0] * scale;
                push(Some(*a), Tensor::full(in_shape, v));
            }
            Op::Reshape { a, in_shape } => {
                push(Some(*a), g.reshape(in_shape).expect("same element count"));
            }
            Op::Permute { a, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (shape, data) = kernels::permute(g.shape(), &inv, g.data());
                push(Some(*a), Tensor::from_parts(shape, data));
            }
            Op::Narrow {
                a,
                axis,
                start,
                in_shape,
            } => {
                let (outer, inner) = split_at_axis(in_shape, *axis);
                let dim = in_shape[*axis];
                let len = g.shape()[*axis];
                let mut out = vec![0.0; numel_of(in_shape)];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                push(Some(*a), Tensor::from_parts(in_shape.clone(), out));
            }
            Op::Concat { inputs, axis, sizes } => {
                let mut start = 0;
                for (node, &len) in inputs.iter().zip(sizes) {
                    if node.is_some() {
                        push(*node, g.narrow(*axis, start, len).expect("in range"));
                    }
                    start += len;
                }
            }
            Op::Im2Col { a, geom } => {
                let shape = vec![geom.n, geom.c, geom.h, geom.w];
                push(Some(*a), Tensor::from_parts(shape, kernels::col2im(*geom, g.data())));
            }
            Op::Upsample2x { a, planes, h, w } => {
                let mut shape = g.shape().to_vec();
                let r = shape.len();
                shape[r - 2] = *h;
                shape[r - 1] = *w;
                push(
                    Some(*a),
                    Tensor::from_parts(shape, kernels::upsample2x_adjoint(*planes, *h, *w, g.data())),
                );
            }
        }
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|n| self.leaf_grads.get(&n))
    }

    /// Gradients of every trainable named leaf that received one, by name.
    pub fn named_grads(&self) -> BTreeMap<String, Tensor> {
        self.named_nodes
            .iter()
            .filter_map(|(name, node)| self.leaf_grads.get(node).map(|g| (name.to_string(), g.clone())))
            .collect()
    }
}

fn zip(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        g.shape().to_vec(),
        g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.value().data(), &[17.0, 39.0]);

        let id = g.constant(Tensor::eye(3));
        let m = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0));
        assert_eq!(g.matmul(&id, &m).unwrap().value(), m.value());

        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 1000.0, 0.0, 1000.0]));
        let y = g.softmax(&x).unwrap();
        let d = y.value().data();
        for v in &d[0..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (v, e) in d[3..6].iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!((d[6] - 0.5).abs() < 1e-12 && d[7].abs() < 1e-12);

        let x = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let y = g.softmax(&x).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-12);
        assert!(y.value().data()[1].abs() < 1e-12);
    }

    #[test]
    fn hadamard_examples_and_mask_broadcast() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.constant(t(&[3], &[4.0, 5.0, 6.0]));
        assert_eq!(g.hadamard(&a, &b).unwrap().value().data(), &[4.0, 10.0, 18.0]);
        let ones = g.constant(Tensor::ones(&[3]));
        assert_eq!(g.hadamard(&a, &ones).unwrap().value(), a.value());
        let zeros = g.constant(Tensor::zeros(&[3]));
        assert_eq!(g.hadamard(&a, &zeros).unwrap().value().data(), &[0.0; 3]);

        let x = g.constant(Tensor::ones(&[2, 2, 2]));
        let mask = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.hadamard(&x, &mask).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let bad = g.constant(Tensor::ones(&[2, 3]));
        assert!(g.hadamard(&x, &bad).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5), true);
        let s = g.sum(&x);
        g.backward(&s).unwrap();
        assert_eq!(g.grad(&x).unwrap(), &Tensor::ones(&[2, 3]));

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[4], |i| i as f64 - 1.5), true);
        let sq = g.hadamard(&x, &x).unwrap();
        let s = g.sum(&sq);
        g.backward(&s).unwrap();
        assert_eq!(g.grad(&x).unwrap(), &x.value().scale(2.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(g.backward(&x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn no_grad_records_nothing() {
        let mut g = Graph::no_grad();
        let x = g.leaf(Tensor::ones(&[2, 2]), true);
        let y = g.matmul(&x, &x).unwrap();
        assert!(!y.requires_grad());
        assert_eq!(g.node_count(), 0);
    }

    #[test]
    fn trainable_filter_applies_to_named_leaves() {
        let mut g = Graph::with_trainable(|n| n.starts_with("hot."));
        let a = g.named_leaf("hot.w", &Tensor::ones(&[2]));
        let b = g.named_leaf("cold.w", &Tensor::ones(&[2]));
        let again = g.named_leaf("hot.w", &Tensor::zeros(&[2]));
        assert!(a.requires_grad() && !b.requires_grad());
        assert_eq!(again.value(), a.value());
        let p = g.hadamard(&a, &b).unwrap();
        let q = g.hadamard(&p, &again).unwrap();
        let s = g.sum(&q);
        g.backward(&s).unwrap();
        let grads = g.named_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["hot.w"].data(), &[2.0, 2.0]);
    }
}
