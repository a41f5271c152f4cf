//! End-to-end model: shared embedding, soft selection, parallel towers,
//! batch normalization and a linear head over the concatenated towers.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedBatch;
use crate::error::{PhnError, Result};
use crate::graph::{logloss_value, BatchStats, Graph, NodeId};
use crate::scalar::Scalar;
use crate::ssg::{uniform, EmbeddingTable, SelectionPattern, SoftSelection};
use crate::tensor::{ParamId, ParameterStore, Parameterized, Tensor};
use crate::towers::{ffn_widths, ResidualMode, Tower, TowerKind};

/// Probability clamp applied before taking logs.
pub const LOGLOSS_CLAMP: f64 = 1e-7;

/// Samples per forward pass when evaluating large batches.
pub const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    #[default]
    None,
    Public,
    Private,
}

impl fmt::Display for BnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Public => "public",
            Self::Private => "private",
        })
    }
}

impl FromStr for BnMode {
    type Err = PhnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "public" | "bn" => Ok(Self::Public),
            "private" | "pbn" => Ok(Self::Private),
            _ => Err(PhnError::config("bn", format!("unknown batch-norm mode `{s}`"))),
        }
    }
}

/// Train mode uses batch statistics for batch norm, eval mode running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-field vocabulary sizes including the OOV slot.
    pub vocab_sizes: Vec<usize>,
    pub embed_dim: usize,
    /// Enabled towers; always evaluated in FFN, cross, field order.
    pub towers: Vec<TowerKind>,
    pub ffn_layers: usize,
    pub cross_layers: usize,
    pub field_layers: usize,
    /// Hidden FFN width; `None` means `4·embed_dim`.
    pub ffn_hidden: Option<usize>,
    pub residual: ResidualMode,
    pub bn: BnMode,
    pub selection: SelectionPattern,
    pub head_count: usize,
    pub leaky_slope: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_sizes: Vec::new(),
            embed_dim: 8,
            towers: TowerKind::ALL.to_vec(),
            ffn_layers: 2,
            cross_layers: 2,
            field_layers: 2,
            ffn_hidden: None,
            residual: ResidualMode::Base,
            bn: BnMode::None,
            selection: SelectionPattern::default(),
            head_count: 1,
            leaky_slope: 0.01,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(vocab_sizes: Vec<usize>) -> Self {
        Self {
            vocab_sizes,
            ..Self::default()
        }
    }

    /// Sets every tower to `depth` layers.
    pub fn with_depth(mut self, depth: usize) -> Self {
        self.ffn_layers = depth;
        self.cross_layers = depth;
        self.field_layers = depth;
        self
    }

    pub fn with_towers(mut self, towers: &[TowerKind]) -> Self {
        self.towers = towers.to_vec();
        self
    }

    pub fn field_count(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn has_tower(&self, kind: TowerKind) -> bool {
        self.towers.contains(&kind)
    }

    pub fn ffn_hidden_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.embed_dim)
    }

    pub fn depth(&self, kind: TowerKind) -> usize {
        match kind {
            TowerKind::Ffn => self.ffn_layers,
            TowerKind::Cross => self.cross_layers,
            TowerKind::Field => self.field_layers,
        }
    }

    pub fn ffn_widths(&self) -> Vec<usize> {
        ffn_widths(
            self.field_count() * self.embed_dim,
            self.embed_dim,
            self.ffn_layers,
            self.ffn_hidden_width(),
        )
    }

    /// Output width of one tower.
    pub fn tower_width(&self, kind: TowerKind) -> usize {
        match kind {
            TowerKind::Ffn => self.embed_dim,
            TowerKind::Cross | TowerKind::Field => self.field_count() * self.embed_dim,
        }
    }

    /// Enabled towers in canonical order.
    pub fn active_towers(&self) -> Vec<TowerKind> {
        TowerKind::ALL.into_iter().filter(|k| self.has_tower(*k)).collect()
    }

    /// Width of the concatenated head input.
    pub fn head_width(&self) -> usize {
        self.active_towers().iter().map(|k| self.tower_width(*k)).sum()
    }

    /// Short label such as `prl+pbn` or `rl`.
    pub fn label(&self) -> String {
        let bn = match self.bn {
            BnMode::None => "",
            BnMode::Public => "bn",
            BnMode::Private => "pbn",
        };
        match (self.residual, bn) {
            (ResidualMode::Base, "") => "base".into(),
            (ResidualMode::Base, bn) => bn.into(),
            (r, "") => r.to_string(),
            (r, bn) => format!("{r}+{bn}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_sizes.is_empty() {
            return Err(PhnError::config("vocab_sizes", "at least one field is required"));
        }
        if let Some(f) = self.vocab_sizes.iter().position(|&v| v == 0) {
            return Err(PhnError::config(
                "vocab_sizes",
                format!("field {f} has an empty vocabulary"),
            ));
        }
        if self.embed_dim == 0 {
            return Err(PhnError::config("embed_dim", "must be positive"));
        }
        if self.head_count == 0 || !self.embed_dim.is_multiple_of(self.head_count) {
            return Err(PhnError::config(
                "head_count",
                format!("must divide embed_dim {}", self.embed_dim),
            ));
        }
        if self.towers.is_empty() {
            return Err(PhnError::config("towers", "at least one tower is required"));
        }
        let mut seen = self.towers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.towers.len() {
            return Err(PhnError::config("towers", "duplicate tower"));
        }
        for kind in self.active_towers() {
            if self.depth(kind) == 0 {
                return Err(PhnError::config(
                    format!("{kind}_layers"),
                    "enabled towers need at least one layer",
                ));
            }
        }
        if self.ffn_hidden == Some(0) {
            return Err(PhnError::config("ffn_hidden", "must be positive"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(PhnError::config("leaky_slope", "must lie in (0, 1)"));
        }
        if !(self.bn_epsilon >= 0.0 && self.bn_epsilon.is_finite()) {
            return Err(PhnError::config("bn_epsilon", "must be finite and non-negative"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(PhnError::config("bn_momentum", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Number of trainable scalars the model allocates:
    ///
    /// * embedding `Σ V_f · d`;
    /// * `3d²` per attention instance and `F·d` per gate instance;
    /// * cross `L·(n² + 2n)` with `n = F·d`, plus `L·n` under prl;
    /// * field `L·(F² + F)`, plus `L·F·d` under prl;
    /// * FFN `Σ (d_in·d_out + d_out)`, plus `d_out` per square layer under prl;
    /// * batch norm `2N` unless disabled, head `N + 1`, with `N` the head width.
    pub fn parameter_count(&self) -> usize {
        let (f, d) = (self.field_count(), self.embed_dim);
        let n = f * d;
        let prl = self.residual == ResidualMode::Prl;
        let mut total: usize = self.vocab_sizes.iter().sum::<usize>() * d;
        total += self.selection.attention_instances() * 3 * d * d;
        total += self.selection.gate_instances() * n;
        for kind in self.active_towers() {
            let l = self.depth(kind);
            total += match kind {
                TowerKind::Cross => l * (n * n + 2 * n + if prl { n } else { 0 }),
                TowerKind::Field => l * (f * f + f + if prl { n } else { 0 }),
                TowerKind::Ffn => self
                    .ffn_widths()
                    .windows(2)
                    .map(|w| w[0] * w[1] + w[1] + if prl && w[0] == w[1] { w[1] } else { 0 })
                    .sum(),
            };
        }
        let head = self.head_width();
        if self.bn != BnMode::None {
            total += 2 * head;
        }
        total + head + 1
    }
}

/// Affine parameters plus running statistics of one batch-norm instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    fn new(store: &mut ParameterStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![width])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![width])),
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
        }
    }

    fn apply(
        &self,
        graph: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: NodeId,
        mode: Mode,
        eps: T,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<NodeId> {
        let gamma = graph.param(store, self.gamma)?;
        let beta = graph.param(store, self.beta)?;
        match mode {
            Mode::Train => {
                let (id, s) = graph.batch_norm_train(x, gamma, beta, eps)?;
                stats.push(s);
                Ok(id)
            }
            Mode::Eval => graph.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, eps),
        }
    }

    /// `r ← (1 − m)·r + m·batch`.
    pub fn update(&mut self, stats: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + momentum * *b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + momentum * *b;
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    /// `[B]`
    pub logits: NodeId,
    /// `[B]`
    pub probs: NodeId,
    /// Raw shared embedding `[B, F, d]`, when the model has one.
    pub embedding: Option<NodeId>,
    /// Selected embedding fed to each of the three towers, `[B, F, d]`.
    pub tower_inputs: Vec<NodeId>,
    /// Per enabled tower, its output after private batch norm, `[B, width]`.
    pub tower_outputs: Vec<(TowerKind, NodeId)>,
    /// Batch statistics gathered in train mode, one per batch-norm instance.
    pub batch_stats: Vec<BatchStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

/// Anything the training loop can fit: a graph-building forward pass plus
/// optional batch-norm running statistics.
pub trait CtrModel<T: Scalar>: Parameterized<T> + Clone + Send + Sync {
    fn forward(&self, graph: &mut Graph<T>, batch: &EncodedBatch, mode: Mode) -> Result<ForwardPass<T>>;

    /// Folds train-mode batch statistics into the running averages.
    fn update_running_stats(&mut self, stats: &[BatchStats<T>]);

    /// Whether train mode needs at least two samples per batch.
    fn uses_batch_norm(&self) -> bool;

    /// Eval-mode logits and probabilities, computed in chunks.
    fn predict(&self, batch: &EncodedBatch) -> Result<Prediction<T>> {
        if batch.is_empty() {
            return Err(PhnError::EmptyBatch);
        }
        let mut logits = Vec::with_capacity(batch.len());
        let mut probs = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(EVAL_CHUNK) {
            let mut graph = Graph::new();
            let pass = self.forward(&mut graph, &chunk, Mode::Eval)?;
            logits.extend_from_slice(graph.value(pass.logits).values());
            probs.extend_from_slice(graph.value(pass.probs).values());
        }
        Ok(Prediction { logits, probs })
    }
}

/// Mean clamped binary cross-entropy.
pub fn logloss<T: Scalar>(probs: &[T], labels: &[T]) -> Result<T> {
    if probs.len() != labels.len() {
        return Err(PhnError::Dimension {
            op: "logloss",
            left: vec![probs.len()],
            right: vec![labels.len()],
        });
    }
    if probs.is_empty() {
        return Err(PhnError::EmptyBatch);
    }
    Ok(logloss_value(probs, labels, T::of(LOGLOSS_CLAMP)))
}

/// Per-tower additive split of the logit: `z = Σ partials + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    pub towers: Vec<TowerKind>,
    /// `partials[t][i]`: contribution of tower `t` to sample `i`.
    pub partials: Vec<Vec<T>>,
    pub bias: T,
    pub logits: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct PhnModel<T> {
    config: ModelConfig,
    store: ParameterStore<T>,
    embedding: EmbeddingTable,
    selection: SoftSelection,
    towers: Vec<Tower>,
    bn: Vec<BnState<T>>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<T: Scalar> PhnModel<T> {
    /// Seeded deterministic construction from the config alone.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let (f, d) = (config.field_count(), config.embed_dim);
        let embedding = EmbeddingTable::new(&mut store, &mut rng, &config.vocab_sizes, d);
        let selection = SoftSelection::new(&mut store, &mut rng, config.selection, f, d, config.head_count)?;
        let mut towers = Vec::new();
        for kind in config.active_towers() {
            let depth = config.depth(kind);
            towers.push(match kind {
                TowerKind::Ffn => Tower::ffn(
                    &mut store,
                    &mut rng,
                    &config.ffn_widths(),
                    config.residual,
                    config.leaky_slope,
                )?,
                TowerKind::Cross => Tower::cross(&mut store, &mut rng, f * d, depth, config.residual),
                TowerKind::Field => Tower::field(&mut store, &mut rng, f, d, depth, config.residual),
            });
        }
        let bn = match config.bn {
            BnMode::None => Vec::new(),
            BnMode::Public => vec![BnState::new(&mut store, "bn", config.head_width())],
            BnMode::Private => config
                .active_towers()
                .iter()
                .map(|k| BnState::new(&mut store, &format!("bn.{k}"), config.tower_width(*k)))
                .collect(),
        };
        let width = config.head_width();
        let bound = 1.0 / (width as f64).sqrt();
        let head_w = store.add("head.w", uniform(&mut rng, vec![width, 1], bound));
        let head_b = store.add("head.b", Tensor::zeros(vec![1]));
        Ok(Self {
            config: config.clone(),
            store,
            embedding,
            selection,
            towers,
            bn,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn towers(&self) -> &[Tower] {
        &self.towers
    }

    pub fn selection(&self) -> &SoftSelection {
        &self.selection
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn tower(&self, kind: TowerKind) -> Option<&Tower> {
        self.towers.iter().find(|t| t.kind() == kind)
    }

    /// Exact equality of parameters and running statistics, comparing bits.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let same_bits = |a: &[T], b: &[T]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        };
        self.config == other.config
            && self.store.bitwise_eq(&other.store)
            && self.bn.len() == other.bn.len()
            && self
                .bn
                .iter()
                .zip(&other.bn)
                .all(|(a, b)| same_bits(&a.running_mean, &b.running_mean) && same_bits(&a.running_var, &b.running_var))
    }

    /// Splits every logit into per-tower contributions plus the head bias.
    /// Undefined under public batch norm, which mixes the towers.
    pub fn tower_logit_decomposition(&self, batch: &EncodedBatch) -> Result<Decomposition<T>> {
        if self.config.bn == BnMode::Public {
            return Err(PhnError::Unsupported(
                "logit decomposition is undefined with public batch norm".into(),
            ));
        }
        if batch.is_empty() {
            return Err(PhnError::EmptyBatch);
        }
        let kinds = self.config.active_towers();
        let widths: Vec<usize> = kinds.iter().map(|k| self.config.tower_width(*k)).collect();
        let w = self.store.get(self.head_w).values();
        let bias = self.store.get(self.head_b).values()[0];
        let mut partials = vec![Vec::with_capacity(batch.len()); kinds.len()];
        let mut logits = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(EVAL_CHUNK) {
            let mut graph = Graph::new();
            let pass = self.forward(&mut graph, &chunk, Mode::Eval)?;
            logits.extend_from_slice(graph.value(pass.logits).values());
            let mut offset = 0;
            for (t, (_, node)) in pass.tower_outputs.iter().enumerate() {
                let width = widths[t];
                let ws = &w[offset..offset + width];
                for row in graph.value(*node).values().chunks(width) {
                    let mut acc = T::zero();
                    for (x, wi) in row.iter().zip(ws) {
                        if *x != T::zero() {
                            acc += *x * *wi;
                        }
                    }
                    partials[t].push(acc);
                }
                offset += width;
            }
        }
        Ok(Decomposition {
            towers: kinds,
            partials,
            bias,
            logits,
        })
    }
}

impl<T: Scalar> Parameterized<T> for PhnModel<T> {
    fn params(&self) -> &ParameterStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }
}

impl<T: Scalar> CtrModel<T> for PhnModel<T> {
    fn forward(&self, graph: &mut Graph<T>, batch: &EncodedBatch, mode: Mode) -> Result<ForwardPass<T>> {
        if batch.is_empty() {
            return Err(PhnError::EmptyBatch);
        }
        let store = &self.store;
        let eps = T::of(self.config.bn_epsilon);
        let e_se = self.embedding.lookup(graph, store, batch)?;
        let inputs = self.selection.forward(graph, store, e_se)?;
        let mut stats = Vec::new();
        let mut outputs = Vec::with_capacity(self.towers.len());
        for (t, tower) in self.towers.iter().enumerate() {
            let kind = tower.kind();
            let mut out = tower.forward(graph, store, inputs[kind.index()])?;
            if self.config.bn == BnMode::Private {
                out = self.bn[t].apply(graph, store, out, mode, eps, &mut stats)?;
            }
            outputs.push((kind, out));
        }
        let mut head_in = if outputs.len() == 1 {
            outputs[0].1
        } else {
            let ids: Vec<NodeId> = outputs.iter().map(|(_, id)| *id).collect();
            graph.concat_last(&ids)?
        };
        if self.config.bn == BnMode::Public {
            head_in = self.bn[0].apply(graph, store, head_in, mode, eps, &mut stats)?;
        }
        let w = graph.param(store, self.head_w)?;
        let b = graph.param(store, self.head_b)?;
        let z = graph.matmul(head_in, w)?;
        let z = graph.add_broadcast(z, b)?;
        let logits = graph.reshape(z, &[batch.len()])?;
        let probs = graph.sigmoid(logits)?;
        Ok(ForwardPass {
            logits,
            probs,
            embedding: Some(e_se),
            tower_inputs: inputs.to_vec(),
            tower_outputs: outputs,
            batch_stats: stats,
        })
    }

    fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        let m = T::of(self.config.bn_momentum);
        for (state, s) in self.bn.iter_mut().zip(stats) {
            state.update(s, m);
        }
    }

    fn uses_batch_norm(&self) -> bool {
        self.config.bn != BnMode::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            ..ModelConfig::new(vec![5, 3, 4])
        }
    }

    fn batch() -> EncodedBatch {
        EncodedBatch::new(3, vec![1, 2, 3, 0, 0, 0, 4, 1, 2, 2, 1, 1], vec![1, 0, 1, 0]).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = PhnModel::<f64>::build(&config()).unwrap();
        let b = PhnModel::<f64>::build(&config()).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = PhnModel::<f64>::build(&ModelConfig { seed: 1, ..config() }).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn embed_pattern_allocates_no_selection_params() {
        let cfg = ModelConfig {
            selection: "embed".parse().unwrap(),
            ..config()
        };
        let m = PhnModel::<f64>::build(&cfg).unwrap();
        assert!(m
            .params()
            .iter()
            .all(|(n, _)| !n.starts_with("attention") && !n.starts_with("gate")));
    }

    #[test]
    fn bn_state_counts() {
        for (mode, n) in [(BnMode::None, 0), (BnMode::Public, 1), (BnMode::Private, 3)] {
            let m = PhnModel::<f64>::build(&ModelConfig { bn: mode, ..config() }).unwrap();
            assert_eq!(m.bn_states().len(), n);
        }
    }

    #[test]
    fn zero_head_gives_half() {
        let mut m = PhnModel::<f64>::build(&config()).unwrap();
        let (w, _) = m.head();
        m.params_mut().get_mut(w).values_mut().fill(0.0);
        let p = m.predict(&batch()).unwrap();
        assert!(p.probs.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn parameter_count_matches_allocation() {
        for cfg in [
            config(),
            ModelConfig {
                residual: ResidualMode::Prl,
                bn: BnMode::Private,
                ..config()
            },
            ModelConfig {
                selection: "sa+Psg".parse().unwrap(),
                bn: BnMode::Public,
                ..config().with_depth(3)
            },
            config().with_towers(&[TowerKind::Field]),
        ] {
            let m = PhnModel::<f64>::build(&cfg).unwrap();
            assert_eq!(m.params().scalar_count(), cfg.parameter_count(), "{cfg:?}");
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: Vec<(ModelConfig, &str)> = vec![
            (
                ModelConfig {
                    embed_dim: 0,
                    ..config()
                },
                "embed_dim",
            ),
            (
                ModelConfig {
                    head_count: 3,
                    ..config()
                },
                "head_count",
            ),
            (
                ModelConfig {
                    cross_layers: 0,
                    ..config()
                },
                "cross_layers",
            ),
            (
                ModelConfig {
                    leaky_slope: 1.5,
                    ..config()
                },
                "leaky_slope",
            ),
            (
                ModelConfig {
                    towers: vec![],
                    ..config()
                },
                "towers",
            ),
            (ModelConfig::new(vec![]), "vocab_sizes"),
        ];
        for (cfg, field) in cases {
            match PhnModel::<f64>::build(&cfg) {
                Err(PhnError::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn vocab_mismatch_is_contract_error() {
        let m = PhnModel::<f64>::build(&config()).unwrap();
        let bad = EncodedBatch::new(3, vec![9, 0, 0], vec![0]).unwrap();
        assert!(matches!(m.predict(&bad), Err(PhnError::Contract(_))));
    }

    #[test]
    fn logloss_examples() {
        let l = logloss(&[0.5], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l: f64 = logloss(&[1.0 - 1e-7], &[1.0]).unwrap();
        assert!(l.is_finite() && (l - 1e-7).abs() < 1e-12);
        assert!(logloss(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn decomposition_sums_and_rejects_public_bn() {
        let m = PhnModel::<f64>::build(&ModelConfig {
            bn: BnMode::Private,
            ..config()
        })
        .unwrap();
        let d = m.tower_logit_decomposition(&batch()).unwrap();
        for i in 0..batch().len() {
            let s: f64 = d.partials.iter().map(|p| p[i]).sum::<f64>() + d.bias;
            assert!((s - d.logits[i]).abs() < 1e-10);
        }
        let m = PhnModel::<f64>::build(&ModelConfig {
            bn: BnMode::Public,
            ..config()
        })
        .unwrap();
        assert!(matches!(
            m.tower_logit_decomposition(&batch()),
            Err(PhnError::Unsupported(_))
        ));
    }

    #[test]
    fn labels_round_trip() {
        let labels: Vec<String> = [
            (ResidualMode::Base, BnMode::None),
            (ResidualMode::Rl, BnMode::Public),
            (ResidualMode::Prl, BnMode::Private),
            (ResidualMode::Base, BnMode::Private),
        ]
        .iter()
        .map(|(r, b)| {
            ModelConfig {
                residual: *r,
                bn: *b,
                ..config()
            }
            .label()
        })
        .collect();
        assert_eq!(labels, ["base", "rl+bn", "prl+pbn", "pbn"]);
    }
}
