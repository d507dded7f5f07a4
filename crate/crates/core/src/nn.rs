//! Named parameters and the small layer set the models are assembled from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{htns, Graph, Tensor, Var};

/// A trainable tensor with a hierarchical dotted name, e.g.
/// `denoiser.level0.res.conv1.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// The graph leaf for this parameter (shared across repeated uses).
    pub fn bind(&self, g: &mut Graph) -> Var {
        g.named_leaf(&self.name, &self.value)
    }
}

/// Anything owning parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Snapshot of every parameter value by name.
    fn state(&self) -> BTreeMap<String, Tensor> {
        self.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites parameters from `state`; every parameter must be present
    /// with a matching shape.
    fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in self.params_mut() {
            let t = state
                .get(&p.name)
                .ok_or_else(|| Error::MissingParam(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_state",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Affine map over the last axis: `weight: [out, in]`, `bias: [out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl LinearParams {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        LinearParams {
            weight: Param::new(format!("{name}.weight"), init_uniform(&[out_dim, in_dim], in_dim, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), init_uniform(&[out_dim], in_dim, rng))),
        }
    }

    pub fn from_tensors(name: &str, weight: Tensor, bias: Option<Tensor>) -> Self {
        LinearParams {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.map(|b| Param::new(format!("{name}.bias"), b)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let shape = x.shape().to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: self.weight.shape().to_vec(),
            });
        }
        let rows = x.value().numel() / last;
        let flat = g.reshape(x, &[rows, last])?;
        let w = self.weight.bind(g);
        let mut y = g.matmul_nt(&flat, &w)?;
        if let Some(b) = &self.bias {
            let b = b.bind(g);
            let b = g.reshape(&b, &[1, self.out_dim()])?;
            y = g.add(&y, &b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank ≥ 1") = self.out_dim();
        g.reshape(&y, &out_shape)
    }
}

impl Module for LinearParams {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Per-pixel channel mixing: `weight: [out, in]`, `bias: [out]`.
#[derive(Clone, Debug)]
pub struct Conv1x1Params {
    pub weight: Param,
    pub bias: Param,
    /// Whether the parameters started at exactly zero.
    pub zero_init: bool,
}

impl Conv1x1Params {
    pub fn zeros(name: &str, in_ch: usize, out_ch: usize) -> Self {
        Conv1x1Params {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[out_ch, in_ch])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            zero_init: true,
        }
    }

    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Conv1x1Params {
            weight: Param::new(format!("{name}.weight"), init_uniform(&[out_ch, in_ch], in_ch, rng)),
            bias: Param::new(format!("{name}.bias"), init_uniform(&[out_ch], in_ch, rng)),
            zero_init: false,
        }
    }

    pub fn from_tensors(name: &str, weight: Tensor, bias: Tensor) -> Self {
        Conv1x1Params {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            zero_init: false,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x: [C, H, W]` → `[C_out, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 3 || s[0] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv1x1",
                lhs: s,
                rhs: self.weight.shape().to_vec(),
            });
        }
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let w = self.weight.bind(g);
        let y = g.matmul(&w, &flat)?;
        let b = self.bias.bind(g);
        let b = g.reshape(&b, &[self.out_channels(), 1])?;
        let y = g.add(&y, &b)?;
        g.reshape(&y, &[self.out_channels(), s[1], s[2]])
    }

    /// The same map on channel-last tokens: `x: [..., C]` → `[..., C_out]`.
    pub fn forward_tokens(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let as_linear = LinearParams {
            weight: self.weight.clone(),
            bias: Some(self.bias.clone()),
        };
        as_linear.forward(g, x)
    }
}

impl Module for Conv1x1Params {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 3×3 convolution with padding 1: `weight: [out, in·9]` laid out as
/// `[out][in][ky][kx]`, `bias: [out]`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * 9;
        Conv3x3 {
            weight: Param::new(format!("{name}.weight"), init_uniform(&[out_ch, fan_in], fan_in, rng)),
            bias: Param::new(format!("{name}.bias"), init_uniform(&[out_ch], fan_in, rng)),
            stride,
        }
    }

    pub fn zeros(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Conv3x3 {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[out_ch, in_ch * 9])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] / 9
    }

    /// `x: [N, C, H, W]` → `[N, C_out, Ho, Wo]`.
    pub fn forward(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv3x3",
                lhs: s,
                rhs: self.weight.shape().to_vec(),
            });
        }
        let cols = g.im2col(x, self.stride)?;
        let w = self.weight.bind(g);
        let y = g.matmul(&w, &cols)?;
        let b = self.bias.bind(g);
        let b = g.reshape(&b, &[self.out_channels(), 1])?;
        let y = g.add(&y, &b)?;
        let (ho, wo) = ((s[2] - 1) / self.stride + 1, (s[3] - 1) / self.stride + 1);
        let y = g.reshape(&y, &[self.out_channels(), s[0], ho, wo])?;
        g.permute(&y, &[1, 0, 2, 3])
    }
}

impl Module for Conv3x3 {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Writes every parameter as `<name>.htns` under `dir` plus a `manifest.txt`
/// listing them after the given `key = value` metadata lines.
pub fn save_checkpoint(dir: &Path, module: &dyn Module, metadata: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# hallo checkpoint\n");
    for (k, v) in metadata {
        writeln!(manifest, "{k} = {v}").expect("string write");
    }
    let mut params = module.params();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    for p in params {
        let file = format!("{}.htns", p.name);
        htns::write(dir.join(&file), &p.value)?;
        let dims: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        writeln!(manifest, "param {} {} {}", p.name, file, dims.join("x")).expect("string write");
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`]: the tensors by name and
/// the metadata lines.
pub fn read_checkpoint(dir: &Path) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut tensors = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("param ") {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    field: "param".into(),
                    message: "expected `param <name> <file> <shape>`".into(),
                });
            }
            let t = htns::read(dir.join(fields[1]))?;
            tensors.insert(fields[0].to_string(), t);
        } else if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                field: "line".into(),
                message: format!("unrecognized manifest line `{line}`"),
            });
        }
    }
    Ok((tensors, meta))
}
