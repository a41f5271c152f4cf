//! The three parallel interaction stacks: combined cross layers (bit-wise),
//! field interaction layers (vector-wise) and the feed-forward tower.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PhnError, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::ssg::uniform;
use crate::tensor::{ParamId, ParameterStore, Tensor};

/// Skip connection applied by every layer.
///
/// `base` keeps only the skip already built into the layer formula, `rl` adds
/// an identity skip and `prl` scales the skip by a trainable vector `p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    #[default]
    Base,
    Rl,
    Prl,
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Rl => "rl",
            Self::Prl => "prl",
        })
    }
}

impl FromStr for ResidualMode {
    type Err = PhnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "rl" => Ok(Self::Rl),
            "prl" => Ok(Self::Prl),
            _ => Err(PhnError::config("residual", format!("unknown residual mode `{s}`"))),
        }
    }
}

/// Tower identity. Iteration order is fixed: FFN, cross, field interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TowerKind {
    Ffn,
    Cross,
    Field,
}

impl TowerKind {
    pub const ALL: [TowerKind; 3] = [TowerKind::Ffn, TowerKind::Cross, TowerKind::Field];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ffn => "ffn",
            Self::Cross => "cross",
            Self::Field => "field",
        }
    }
}

impl fmt::Display for TowerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn skip<T: Scalar>(graph: &mut Graph<T>, store: &ParameterStore<T>, x: NodeId, p: Option<ParamId>) -> Result<NodeId> {
    match p {
        Some(p) => {
            let pn = graph.param(store, p)?;
            graph.mul_broadcast(x, pn)
        }
        None => Ok(x),
    }
}

/// `y = x₀ ⊙ (W·xᵢ + b) + x₀·(xᵢᵀw) + s(xᵢ)` on flattened `[B, n]` inputs, with
/// `s(xᵢ) = xᵢ` under base and rl, and `p ⊙ xᵢ` under prl.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossLayer {
    pub w: ParamId,
    pub w_vec: ParamId,
    pub b: ParamId,
    pub p: Option<ParamId>,
}

impl CrossLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        name: &str,
        n: usize,
        residual: ResidualMode,
    ) -> Self {
        let bound = 1.0 / (n as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, vec![n, n], bound));
        let w_vec = store.add(format!("{name}.w_vec"), uniform(rng, vec![n, 1], bound));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![n]));
        let p = (residual == ResidualMode::Prl).then(|| store.add(format!("{name}.p"), Tensor::ones(vec![n])));
        Self { w, w_vec, b, p }
    }

    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParameterStore<T>,
        x0: NodeId,
        xi: NodeId,
    ) -> Result<NodeId> {
        let w = graph.param(store, self.w)?;
        let b = graph.param(store, self.b)?;
        let w_vec = graph.param(store, self.w_vec)?;
        // Row-vector convention: xᵢ·W is W·xᵢ applied per sample.
        let lin = graph.matmul(xi, w)?;
        let lin = graph.add_broadcast(lin, b)?;
        let matrix_term = graph.hadamard(x0, lin)?;
        let proj = graph.matmul(xi, w_vec)?;
        let vector_term = graph.scale_rows(x0, proj)?;
        let cross = graph.add(matrix_term, vector_term)?;
        let s = skip(graph, store, xi, self.p)?;
        graph.add(cross, s)
    }
}

/// Per field `i`: `out_i = h_i ⊙ Σ_j K[i,j]·e0_j + u[i]·h_i`, plus `h_i` (rl)
/// or `p_i ⊙ h_i` (prl). Operates on `[B, F, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldLayer {
    pub kernel: ParamId,
    pub u: ParamId,
    pub p: Option<ParamId>,
    pub residual: ResidualMode,
}

impl FieldLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        name: &str,
        fields: usize,
        dim: usize,
        residual: ResidualMode,
    ) -> Self {
        let bound = 1.0 / (fields as f64).sqrt();
        let kernel = store.add(format!("{name}.kernel"), uniform(rng, vec![fields, fields], bound));
        let u = store.add(format!("{name}.u"), Tensor::ones(vec![fields]));
        let p =
            (residual == ResidualMode::Prl).then(|| store.add(format!("{name}.p"), Tensor::ones(vec![fields, dim])));
        Self { kernel, u, p, residual }
    }

    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParameterStore<T>,
        h: NodeId,
        e0: NodeId,
    ) -> Result<NodeId> {
        let kernel = graph.param(store, self.kernel)?;
        let u = graph.param(store, self.u)?;
        let mixed = graph.field_mix(kernel, e0)?;
        let inter = graph.hadamard(h, mixed)?;
        let scaled = graph.scale_fields(h, u)?;
        let out = graph.add(inter, scaled)?;
        if self.residual == ResidualMode::Base {
            return Ok(out);
        }
        let s = skip(graph, store, h, self.p)?;
        graph.add(out, s)
    }
}

/// `y = LeakyReLU(x·ω + b)`, plus a skip when the layer is square and the
/// residual mode asks for one.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub p: Option<ParamId>,
    pub residual: ResidualMode,
    pub d_in: usize,
    pub d_out: usize,
}

impl FfnLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        residual: ResidualMode,
    ) -> Result<Self> {
        if residual != ResidualMode::Base && d_in != d_out {
            return Err(PhnError::config(
                "residual",
                format!("{name}: skip connection needs d_in = d_out, got {d_in} → {d_out}"),
            ));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, vec![d_in, d_out], bound));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        let p = (residual == ResidualMode::Prl).then(|| store.add(format!("{name}.p"), Tensor::ones(vec![d_out])));
        Ok(Self {
            w,
            b,
            p,
            residual,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: NodeId,
        slope: T,
    ) -> Result<NodeId> {
        let w = graph.param(store, self.w)?;
        let b = graph.param(store, self.b)?;
        let lin = graph.matmul(x, w)?;
        let lin = graph.add_broadcast(lin, b)?;
        let act = graph.leaky_relu(lin, slope)?;
        if self.residual == ResidualMode::Base {
            return Ok(act);
        }
        let s = skip(graph, store, x, self.p)?;
        graph.add(act, s)
    }
}

/// Default FFN widths `F·d → 4d → … → 4d → d`; a single layer maps `F·d → d`.
pub fn ffn_widths(input: usize, dim: usize, layers: usize, hidden: usize) -> Vec<usize> {
    let mut widths = vec![input];
    widths.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
    widths.push(dim);
    widths
}

/// One stack of layers of a single kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Tower {
    Ffn { layers: Vec<FfnLayer>, slope: f64 },
    Cross { layers: Vec<CrossLayer> },
    Field { layers: Vec<FieldLayer> },
}

impl Tower {
    pub fn cross<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        n: usize,
        depth: usize,
        residual: ResidualMode,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| CrossLayer::new(store, rng, &format!("cross{l}"), n, residual))
            .collect();
        Tower::Cross { layers }
    }

    pub fn field<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        fields: usize,
        dim: usize,
        depth: usize,
        residual: ResidualMode,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| FieldLayer::new(store, rng, &format!("field{l}"), fields, dim, residual))
            .collect();
        Tower::Field { layers }
    }

    /// Layers whose width changes fall back to `base`; the rest use `residual`.
    pub fn ffn<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        widths: &[usize],
        residual: ResidualMode,
        slope: f64,
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let mode = if w[0] == w[1] { residual } else { ResidualMode::Base };
                FfnLayer::new(store, rng, &format!("ffn{l}"), w[0], w[1], mode)
            })
            .collect::<Result<_>>()?;
        Ok(Tower::Ffn { layers, slope })
    }

    pub fn kind(&self) -> TowerKind {
        match self {
            Tower::Ffn { .. } => TowerKind::Ffn,
            Tower::Cross { .. } => TowerKind::Cross,
            Tower::Field { .. } => TowerKind::Field,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Tower::Ffn { layers, .. } => layers.len(),
            Tower::Cross { layers } => layers.len(),
            Tower::Field { layers } => layers.len(),
        }
    }

    /// `input: [B, F, d]` (the tower's selected embedding) → `[B, width]`.
    pub fn forward<T: Scalar>(&self, graph: &mut Graph<T>, store: &ParameterStore<T>, input: NodeId) -> Result<NodeId> {
        let shape = graph.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(PhnError::Dimension {
                op: "tower_forward",
                left: shape,
                right: vec![0, 0, 0],
            });
        }
        let (b, n) = (shape[0], shape[1] * shape[2]);
        match self {
            Tower::Ffn { layers, slope } => {
                let mut x = graph.reshape(input, &[b, n])?;
                for layer in layers {
                    x = layer.forward(graph, store, x, T::of(*slope))?;
                }
                Ok(x)
            }
            Tower::Cross { layers } => {
                let x0 = graph.reshape(input, &[b, n])?;
                let mut x = x0;
                for layer in layers {
                    x = layer.forward(graph, store, x0, x)?;
                }
                Ok(x)
            }
            Tower::Field { layers } => {
                let mut h = input;
                for layer in layers {
                    h = layer.forward(graph, store, h, input)?;
                }
                graph.reshape(h, &[b, n])
            }
        }
    }

    /// Every trainable tensor in the tower.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        match self {
            Tower::Ffn { layers, .. } => {
                for l in layers {
                    ids.extend([l.w, l.b]);
                    ids.extend(l.p);
                }
            }
            Tower::Cross { layers } => {
                for l in layers {
                    ids.extend([l.w, l.w_vec, l.b]);
                    ids.extend(l.p);
                }
            }
            Tower::Field { layers } => {
                for l in layers {
                    ids.extend([l.kernel, l.u]);
                    ids.extend(l.p);
                }
            }
        }
        ids
    }
}
