//! Shared embedding, field self-attention and soft selection gating.
//!
//! Every tower receives its own enhanced copy of the field embeddings:
//!
//! * `embed`: the raw shared embedding `E_se`;
//! * `sa`: self-attention over fields, `E_sa = softmax(Q Kᵀ/√d_k) V`;
//! * `sg`: the gated mix `E_sg = G ⊙ E_sa + (1 − G) ⊙ E_se`, `G = σ(θ)`.
//!
//! Attention and gate parameters are either shared by all towers (public) or
//! allocated once per tower (private).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedBatch;
use crate::error::{PhnError, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParameterStore, Tensor};

/// Number of parallel towers every selection pattern feeds.
pub const TOWER_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelectionMode {
    Embed,
    SelfAttention,
    SoftGate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sharing {
    Public,
    Private,
}

/// Which representation each tower receives and how the attention and gate
/// parameters are shared. Written in the short form `embed`, `sa`, `Psa`,
/// `sa+sg`, `Psa+sg`, `sa+Psg`, `Psa+Psg` (`P` = private).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SelectionPattern {
    pub mode: SelectionMode,
    pub attention: Sharing,
    pub gate: Sharing,
}

impl Default for SelectionPattern {
    fn default() -> Self {
        Self {
            mode: SelectionMode::SoftGate,
            attention: Sharing::Private,
            gate: Sharing::Public,
        }
    }
}

impl SelectionPattern {
    /// The seven selection patterns compared in the SSG ablation.
    pub fn ablation_set() -> Vec<SelectionPattern> {
        ["embed", "sa", "Psa", "sa+sg", "Psa+sg", "sa+Psg", "Psa+Psg"]
            .iter()
            .map(|s| s.parse().expect("known pattern"))
            .collect()
    }

    pub fn attention_instances(&self) -> usize {
        match (self.mode, self.attention) {
            (SelectionMode::Embed, _) => 0,
            (_, Sharing::Public) => 1,
            (_, Sharing::Private) => TOWER_COUNT,
        }
    }

    pub fn gate_instances(&self) -> usize {
        match (self.mode, self.gate) {
            (SelectionMode::SoftGate, Sharing::Public) => 1,
            (SelectionMode::SoftGate, Sharing::Private) => TOWER_COUNT,
            _ => 0,
        }
    }
}

impl fmt::Display for SelectionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = |s: Sharing| if s == Sharing::Private { "P" } else { "" };
        match self.mode {
            SelectionMode::Embed => write!(f, "embed"),
            SelectionMode::SelfAttention => write!(f, "{}sa", p(self.attention)),
            SelectionMode::SoftGate => write!(f, "{}sa+{}sg", p(self.attention), p(self.gate)),
        }
    }
}

impl FromStr for SelectionPattern {
    type Err = PhnError;

    fn from_str(s: &str) -> Result<Self> {
        let sharing = |tok: &str, base: &str| -> Option<Sharing> {
            if tok == base {
                Some(Sharing::Public)
            } else if tok.strip_prefix('P') == Some(base) {
                Some(Sharing::Private)
            } else {
                None
            }
        };
        let bad = || PhnError::config("selection", format!("unknown selection pattern `{s}`"));
        if s == "embed" {
            return Ok(Self {
                mode: SelectionMode::Embed,
                attention: Sharing::Public,
                gate: Sharing::Public,
            });
        }
        match s.split_once('+') {
            None => Ok(Self {
                mode: SelectionMode::SelfAttention,
                attention: sharing(s, "sa").ok_or_else(bad)?,
                gate: Sharing::Public,
            }),
            Some((a, g)) => Ok(Self {
                mode: SelectionMode::SoftGate,
                attention: sharing(a, "sa").ok_or_else(bad)?,
                gate: sharing(g, "sg").ok_or_else(bad)?,
            }),
        }
    }
}

impl Serialize for SelectionPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SelectionPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub(crate) fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, values).expect("length matches shape")
}

/// Per-field embedding matrices stored as one stacked `[Σ vocab, d]` table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    param: ParamId,
    offsets: Vec<usize>,
    vocab_sizes: Vec<usize>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        vocab_sizes: &[usize],
        dim: usize,
    ) -> Self {
        let mut offsets = Vec::with_capacity(vocab_sizes.len());
        let mut total = 0;
        for v in vocab_sizes {
            offsets.push(total);
            total += v;
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let param = store.add("embedding", uniform(rng, vec![total, dim], bound));
        Self {
            param,
            offsets,
            vocab_sizes: vocab_sizes.to_vec(),
            dim,
        }
    }

    pub fn param(&self) -> ParamId {
        self.param
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn field_count(&self) -> usize {
        self.vocab_sizes.len()
    }

    /// Stacked-table row holding `(field, index)`.
    pub fn row_of(&self, field: usize, index: usize) -> usize {
        self.offsets[field] + index
    }

    /// Looks up every `(sample, field)` index, giving `[B, F, d]`.
    pub fn lookup<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParameterStore<T>,
        batch: &EncodedBatch,
    ) -> Result<NodeId> {
        batch.check_vocab(&self.vocab_sizes)?;
        let f = self.field_count();
        let rows: Vec<usize> = batch
            .indices()
            .iter()
            .enumerate()
            .map(|(i, &idx)| self.offsets[i % f] + idx)
            .collect();
        let table = graph.param(store, self.param)?;
        let flat = graph.gather_rows(table, &rows)?;
        graph.reshape(flat, &[batch.len(), f, self.dim])
    }
}

/// Query/key/value projections for self-attention across the field axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(PhnError::config(
                "head_count",
                format!("embedding dim {dim} is not divisible by {heads} heads"),
            ));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut mk = |suffix: &str| store.add(format!("{name}.{suffix}"), uniform(rng, vec![dim, dim], bound));
        let (w_q, w_k, w_v) = (mk("w_q"), mk("w_k"), mk("w_v"));
        Ok(Self {
            w_q,
            w_k,
            w_v,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `e: [B, F, d]` → `[B, F, d]`. Attention weights are `F × F` per sample
    /// and head; samples never attend to each other.
    pub fn forward<T: Scalar>(&self, graph: &mut Graph<T>, store: &ParameterStore<T>, e: NodeId) -> Result<NodeId> {
        let shape = graph.shape(e).to_vec();
        let (b, f, d) = (shape[0], shape[1], shape[2]);
        if d != self.dim {
            return Err(PhnError::Dimension {
                op: "self_attention",
                left: shape,
                right: vec![self.dim],
            });
        }
        let flat = graph.reshape(e, &[b * f, d])?;
        let project = |graph: &mut Graph<T>, w: ParamId| -> Result<NodeId> {
            let wn = graph.param(store, w)?;
            let p = graph.matmul(flat, wn)?;
            graph.reshape(p, &[b, f, d])
        };
        let q = project(graph, self.w_q)?;
        let k = project(graph, self.w_k)?;
        let v = project(graph, self.w_v)?;
        let dk = self.head_dim();
        let inv_sqrt = T::of(1.0 / (dk as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    graph.slice_last(q, h * dk, dk)?,
                    graph.slice_last(k, h * dk, dk)?,
                    graph.slice_last(v, h * dk, dk)?,
                )
            };
            let scores = graph.bmm_nt(qh, kh)?;
            let scaled = graph.scale(scores, inv_sqrt)?;
            let weights = graph.softmax_rows(scaled)?;
            heads.push(graph.bmm(weights, vh)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            graph.concat_last(&heads)
        }
    }
}

/// Trainable gate logits `θ: [F, d]`; the effective gate is `σ(θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftGate {
    pub theta: ParamId,
}

impl SoftGate {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, fields: usize, dim: usize) -> Self {
        Self {
            theta: store.add(format!("{name}.theta"), Tensor::zeros(vec![fields, dim])),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParameterStore<T>,
        e_se: NodeId,
        e_sa: NodeId,
    ) -> Result<NodeId> {
        let theta = graph.param(store, self.theta)?;
        graph.soft_select(e_se, e_sa, theta)
    }
}

/// Attention and gate instances wired according to a [`SelectionPattern`].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSelection {
    pub pattern: SelectionPattern,
    pub attention: Vec<AttentionParams>,
    pub gates: Vec<SoftGate>,
}

impl SoftSelection {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        pattern: SelectionPattern,
        fields: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        let attention = (0..pattern.attention_instances())
            .map(|i| AttentionParams::new(store, rng, &format!("attention{i}"), dim, heads))
            .collect::<Result<_>>()?;
        let gates = (0..pattern.gate_instances())
            .map(|i| SoftGate::new(store, &format!("gate{i}"), fields, dim))
            .collect();
        Ok(Self {
            pattern,
            attention,
            gates,
        })
    }

    /// One enhanced embedding per tower (always [`TOWER_COUNT`] entries).
    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParameterStore<T>,
        e_se: NodeId,
    ) -> Result<[NodeId; TOWER_COUNT]> {
        let attended: Vec<NodeId> = self
            .attention
            .iter()
            .map(|a| a.forward(graph, store, e_se))
            .collect::<Result<_>>()?;
        let pick = |items: usize, tower: usize| if items == 1 { 0 } else { tower };
        let mut out = [e_se; TOWER_COUNT];
        match self.pattern.mode {
            SelectionMode::Embed => {}
            SelectionMode::SelfAttention => {
                for (t, slot) in out.iter_mut().enumerate() {
                    *slot = attended[pick(attended.len(), t)];
                }
            }
            SelectionMode::SoftGate => {
                let mut cache: Vec<Option<NodeId>> = vec![None; TOWER_COUNT * TOWER_COUNT];
                for (t, slot) in out.iter_mut().enumerate() {
                    let a = pick(attended.len(), t);
                    let g = pick(self.gates.len(), t);
                    let key = a * TOWER_COUNT + g;
                    *slot = match cache[key] {
                        Some(id) => id,
                        None => {
                            let id = self.gates[g].forward(graph, store, e_se, attended[a])?;
                            cache[key] = Some(id);
                            id
                        }
                    };
                }
            }
        }
        Ok(out)
    }
}

/// Per-field amplification of the selected embedding relative to the raw one:
/// the mean over batch and embedding dims of `|E_sg| / (|E_se| + 1e-8)`.
/// Both tensors are `[B, F, d]`.
pub fn scaling_ratio<T: Scalar>(e_sg: &Tensor<T>, e_se: &Tensor<T>) -> Result<Vec<T>> {
    if e_sg.shape() != e_se.shape() || e_sg.shape().len() != 3 {
        return Err(PhnError::Dimension {
            op: "scaling_ratio",
            left: e_sg.shape().to_vec(),
            right: e_se.shape().to_vec(),
        });
    }
    let (b, f, d) = (e_sg.shape()[0], e_sg.shape()[1], e_sg.shape()[2]);
    let delta = T::of(1e-8);
    let mut ratios = vec![T::zero(); f];
    for (i, (sg, se)) in e_sg.values().iter().zip(e_se.values()).enumerate() {
        let field = (i / d) % f;
        ratios[field] += sg.abs() / (se.abs() + delta);
    }
    let count = T::of((b * d) as f64);
    ratios.iter_mut().for_each(|r| *r /= count);
    Ok(ratios)
}
