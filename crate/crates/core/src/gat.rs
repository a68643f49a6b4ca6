//! Multi-head graph attention layers and the multi-branch clustering model.
//!
//! Each of the `R` branches stacks `t` GAT layers whose heads are
//! concatenated; an affine map takes branch `r` from `m_r` to the shared
//! width `M`, the branch outputs are summed, and a second affine map plus a
//! row softmax yields the `n x k` assignment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Neighborhoods;
use crate::io::{read_tensor, write_tensor, Dtype};
use crate::objective::Assignment;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub branches: usize,
    pub layers_per_branch: usize,
    /// Output width `m_r` of every layer in branch `r`.
    pub branch_dims: Vec<usize>,
    pub agg_dim: usize,
    pub clusters: usize,
    pub heads: usize,
    pub activation: Activation,
    /// Negative slope of the attention-logit LeakyReLU.
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            branches: 2,
            layers_per_branch: 2,
            branch_dims: vec![128, 64],
            agg_dim: 64,
            clusters: 2,
            heads: 2,
            activation: Activation::Silu,
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.branches < 1 {
            return fail("at least one branch is required".into());
        }
        if self.layers_per_branch < 1 {
            return fail("each branch needs at least one GAT layer".into());
        }
        if self.branch_dims.len() != self.branches {
            return fail(format!(
                "{} branch widths given for {} branches",
                self.branch_dims.len(),
                self.branches
            ));
        }
        if self.clusters < 2 {
            return fail(format!("cluster count k must be at least 2, got {}", self.clusters));
        }
        if self.agg_dim < 1 {
            return fail("aggregation width M must be at least 1".into());
        }
        if self.heads < 1 {
            return fail("at least one attention head is required".into());
        }
        if let Some(m) = self.branch_dims.iter().find(|&&m| m == 0 || m % self.heads != 0) {
            return fail(format!("branch width {m} is not a positive multiple of {} heads", self.heads));
        }
        if !self.leaky_slope.is_finite() {
            return fail("leaky slope must be finite".into());
        }
        Ok(())
    }
}

/// Learnable parameters of one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// `F_in x F_head`.
    pub weight: Tensor<T>,
    /// `F_head x 2`: column 0 scores the attending node, column 1 the neighbour,
    /// so that `a^T [W h_i || W h_j] = (W h_i) a[:,0] + (W h_j) a[:,1]`.
    pub attention: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub activation: Activation,
}

impl<T: Scalar> GatLayerParams<T> {
    pub fn input_dim(&self) -> usize {
        self.heads[0].weight.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.heads.len() * self.head_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    /// `1 x out`.
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatModel<T> {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub branches: Vec<Vec<GatLayerParams<T>>>,
    pub fcn1: Vec<Affine<T>>,
    pub fcn2: Affine<T>,
}

fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-limit..limit)))
}

/// Glorot-uniform weights, zero biases; deterministic in `cfg.seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, input_dim: usize) -> Result<GatModel<T>> {
    cfg.validate()?;
    if input_dim == 0 {
        return Err(Error::Config("input feature dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut branches = Vec::with_capacity(cfg.branches);
    for &width in &cfg.branch_dims {
        let head_dim = width / cfg.heads;
        let mut layers = Vec::with_capacity(cfg.layers_per_branch);
        let mut fan_in = input_dim;
        for _ in 0..cfg.layers_per_branch {
            let heads = (0..cfg.heads)
                .map(|_| HeadParams {
                    weight: glorot(&mut rng, fan_in, head_dim, fan_in, head_dim),
                    attention: glorot(&mut rng, head_dim, 2, 2 * head_dim, 1),
                })
                .collect();
            layers.push(GatLayerParams {
                heads,
                activation: cfg.activation,
            });
            fan_in = width;
        }
        branches.push(layers);
    }
    let fcn1 = cfg
        .branch_dims
        .iter()
        .map(|&m| Affine {
            weight: glorot(&mut rng, m, cfg.agg_dim, m, cfg.agg_dim),
            bias: Tensor::zeros(&[1, cfg.agg_dim]),
        })
        .collect();
    let fcn2 = Affine {
        weight: glorot(&mut rng, cfg.agg_dim, cfg.clusters, cfg.agg_dim, cfg.clusters),
        bias: Tensor::zeros(&[1, cfg.clusters]),
    };
    Ok(GatModel {
        config: cfg.clone(),
        input_dim,
        branches,
        fcn1,
        fcn2,
    })
}

/// Per-head attention logits, coefficients and aggregated output on a tape.
struct HeadTrace {
    alpha: Var,
    output: Var,
}

fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    weight: Var,
    attention: Var,
    activation: Activation,
    slope: T,
    nbrs: &Arc<Neighborhoods>,
) -> Result<HeadTrace> {
    let wh = tape.matmul(h, weight)?;
    let scores = tape.matmul(wh, attention)?;
    let logits = tape.edge_scores(scores, Arc::clone(nbrs))?;
    let logits = tape.leaky_relu(logits, slope);
    let alpha = tape.segment_softmax(logits, Arc::clone(nbrs.offsets()))?;
    let agg = tape.neighbor_aggregate(alpha, wh, Arc::clone(nbrs))?;
    Ok(HeadTrace {
        alpha,
        output: tape.activate(agg, activation),
    })
}

/// Attention coefficients `alpha_ij` of every head, each an `E x 1` column in
/// neighbourhood edge order.
pub fn attention_coefficients<T: Scalar>(
    h: &Tensor<T>,
    layer: &GatLayerParams<T>,
    nbrs: &Arc<Neighborhoods>,
    slope: T,
) -> Result<Vec<Tensor<T>>> {
    check_layer_input(h, layer, nbrs)?;
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let mut out = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let w = tape.constant(head.weight.clone());
        let a = tape.constant(head.attention.clone());
        let trace = head_forward(&mut tape, hv, w, a, layer.activation, slope, nbrs)?;
        out.push(tape.value(trace.alpha).clone());
    }
    Ok(out)
}

/// One GAT layer: per-head attention aggregation, activation, concatenation.
pub fn gat_layer_forward<T: Scalar>(
    h: &Tensor<T>,
    layer: &GatLayerParams<T>,
    nbrs: &Arc<Neighborhoods>,
    slope: T,
) -> Result<Tensor<T>> {
    check_layer_input(h, layer, nbrs)?;
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let mut heads = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let w = tape.constant(head.weight.clone());
        let a = tape.constant(head.attention.clone());
        heads.push(head_forward(&mut tape, hv, w, a, layer.activation, slope, nbrs)?.output);
    }
    let out = tape.concat_cols(&heads)?;
    Ok(tape.value(out).clone())
}

fn check_layer_input<T: Scalar>(h: &Tensor<T>, layer: &GatLayerParams<T>, nbrs: &Neighborhoods) -> Result<()> {
    if h.cols() != layer.input_dim() || h.rows() != nbrs.nodes() {
        return Err(Error::ShapeMismatch {
            op: "gat_layer",
            lhs: h.shape().to_vec(),
            rhs: vec![nbrs.nodes(), layer.input_dim()],
        });
    }
    Ok(())
}

impl<T: Scalar> GatModel<T> {
    /// Parameter names and tensors in canonical order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (r, layers) in self.branches.iter().enumerate() {
            for (l, layer) in layers.iter().enumerate() {
                for (z, head) in layer.heads.iter().enumerate() {
                    out.push((format!("branch{r}.layer{l}.head{z}.weight"), &head.weight));
                    out.push((format!("branch{r}.layer{l}.head{z}.attention"), &head.attention));
                }
            }
        }
        for (r, f) in self.fcn1.iter().enumerate() {
            out.push((format!("branch{r}.fcn1.weight"), &f.weight));
            out.push((format!("branch{r}.fcn1.bias"), &f.bias));
        }
        out.push(("fcn2.weight".into(), &self.fcn2.weight));
        out.push(("fcn2.bias".into(), &self.fcn2.bias));
        out
    }

    /// Same order as [`Self::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layers in &mut self.branches {
            for layer in layers {
                for head in &mut layer.heads {
                    out.push(&mut head.weight);
                    out.push(&mut head.attention);
                }
            }
        }
        for f in &mut self.fcn1 {
            out.push(&mut f.weight);
            out.push(&mut f.bias);
        }
        out.push(&mut self.fcn2.weight);
        out.push(&mut self.fcn2.bias);
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Pushes every parameter as a trainable leaf, in canonical order.
    pub fn push_params(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.parameters().into_iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    /// Records the full forward pass and returns the `n x k` assignment node.
    /// `params` must come from [`Self::push_params`] (or follow its order).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        nbrs: &Arc<Neighborhoods>,
    ) -> Result<Var> {
        let xv = tape.value(x);
        if xv.cols() != self.input_dim || xv.rows() != nbrs.nodes() {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: xv.shape().to_vec(),
                rhs: vec![nbrs.nodes(), self.input_dim],
            });
        }
        let slope = T::lit(self.config.leaky_slope);
        let mut cursor = params.iter().copied();
        let mut next = || cursor.next().ok_or(Error::Empty("model parameter handles"));
        let mut branch_out = Vec::with_capacity(self.branches.len());
        for layers in &self.branches {
            let mut h = x;
            for layer in layers {
                let mut heads = Vec::with_capacity(layer.heads.len());
                for _ in &layer.heads {
                    let (w, a) = (next()?, next()?);
                    heads.push(head_forward(tape, h, w, a, layer.activation, slope, nbrs)?.output);
                }
                h = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            }
            branch_out.push(h);
        }
        let mut summed: Option<Var> = None;
        for h in branch_out {
            let (w, b) = (next()?, next()?);
            let proj = tape.matmul(h, w)?;
            let proj = tape.add_row(proj, b)?;
            summed = Some(match summed {
                None => proj,
                Some(acc) => tape.add(acc, proj)?,
            });
        }
        let summed = summed.ok_or(Error::Empty("model branches"))?;
        let (w, b) = (next()?, next()?);
        let logits = tape.matmul(summed, w)?;
        let logits = tape.add_row(logits, b)?;
        Ok(tape.softmax_rows(logits))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: &Tensor<T>, nbrs: &Arc<Neighborhoods>) -> Result<Assignment<T>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        let xv = tape.constant(x.clone());
        let c = self.forward_on_tape(&mut tape, &params, xv, nbrs)?;
        Ok(Assignment::from_soft(tape.value(c).clone()))
    }

    /// Writes one MGT1 f32 file per parameter plus `manifest.txt`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("# modgat checkpoint v1\n");
        let c = &self.config;
        let dims: Vec<String> = c.branch_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "branches={}", c.branches);
        let _ = writeln!(manifest, "layers_per_branch={}", c.layers_per_branch);
        let _ = writeln!(manifest, "branch_dims={}", dims.join(","));
        let _ = writeln!(manifest, "agg_dim={}", c.agg_dim);
        let _ = writeln!(manifest, "clusters={}", c.clusters);
        let _ = writeln!(manifest, "heads={}", c.heads);
        let _ = writeln!(manifest, "activation={}", c.activation.name());
        let _ = writeln!(manifest, "leaky_slope={}", c.leaky_slope);
        let _ = writeln!(manifest, "seed={}", c.seed);
        let _ = writeln!(manifest, "input_dim={}", self.input_dim);
        for (name, t) in self.parameters() {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(manifest, "param {name} {}", shape.join("x"));
            write_tensor(dir.join(format!("{name}.mgt")), t, Dtype::F32)?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    /// Inverse of [`Self::save_checkpoint`]; values come back rounded to f32.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut cfg = ModelConfig::default();
        let mut input_dim = None;
        let mut listed = Vec::new();
        let bad = |m: String| Error::Checkpoint(m);
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("param ") {
                let (name, shape) = rest.split_once(' ').ok_or_else(|| bad(format!("bad param line {line:?}")))?;
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
                    .collect::<Result<_>>()?;
                listed.push((name.to_string(), shape));
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("{k} is not an integer")));
            match k {
                "branches" => cfg.branches = num(v)?,
                "layers_per_branch" => cfg.layers_per_branch = num(v)?,
                "branch_dims" => cfg.branch_dims = v.split(',').map(num).collect::<Result<_>>()?,
                "agg_dim" => cfg.agg_dim = num(v)?,
                "clusters" => cfg.clusters = num(v)?,
                "heads" => cfg.heads = num(v)?,
                "activation" => cfg.activation = v.parse()?,
                "leaky_slope" => cfg.leaky_slope = v.parse().map_err(|_| bad("bad leaky_slope".into()))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("bad seed".into()))?,
                "input_dim" => input_dim = Some(num(v)?),
                _ => return Err(bad(format!("unknown key {k}"))),
            }
        }
        let input_dim = input_dim.ok_or_else(|| bad("missing input_dim".into()))?;
        let mut model = init_params::<T>(&cfg, input_dim)?;
        let names = model.parameter_names();
        if names.len() != listed.len() || names.iter().zip(&listed).any(|(a, (b, _))| a != b) {
            return Err(bad("parameter list does not match the configuration".into()));
        }
        for ((name, shape), slot) in listed.iter().zip(model.parameters_mut()) {
            let t: Tensor<T> = read_tensor(dir.join(format!("{name}.mgt")))?;
            if t.shape() != shape.as_slice() || t.shape() != slot.shape() {
                return Err(bad(format!("shape mismatch for {name}: {:?}", t.shape())));
            }
            *slot = t;
        }
        Ok(model)
    }
}
