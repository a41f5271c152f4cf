//! Logistic-regression baseline: one scalar weight per token plus a bias.

use crate::data::EncodedBatch;
use crate::error::{PhnError, Result};
use crate::graph::{BatchStats, Graph};
use crate::model::{CtrModel, ForwardPass, Mode};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParameterStore, Parameterized, Tensor};

#[derive(Clone, Debug)]
pub struct LinearModel<T> {
    vocab_sizes: Vec<usize>,
    offsets: Vec<usize>,
    store: ParameterStore<T>,
    weights: ParamId,
    bias: ParamId,
}

impl<T: Scalar> LinearModel<T> {
    /// Zero-initialized weights, so the untrained model predicts 0.5.
    pub fn build(vocab_sizes: &[usize]) -> Result<Self> {
        if vocab_sizes.is_empty() || vocab_sizes.contains(&0) {
            return Err(PhnError::config("vocab_sizes", "every field needs a vocabulary"));
        }
        let mut offsets = Vec::with_capacity(vocab_sizes.len());
        let mut total = 0;
        for v in vocab_sizes {
            offsets.push(total);
            total += v;
        }
        let mut store = ParameterStore::new();
        let weights = store.add("linear.w", Tensor::zeros(vec![total, 1]));
        let bias = store.add("linear.b", Tensor::zeros(vec![1]));
        Ok(Self {
            vocab_sizes: vocab_sizes.to_vec(),
            offsets,
            store,
            weights,
            bias,
        })
    }
}

impl<T: Scalar> Parameterized<T> for LinearModel<T> {
    fn params(&self) -> &ParameterStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }
}

impl<T: Scalar> CtrModel<T> for LinearModel<T> {
    fn forward(&self, graph: &mut Graph<T>, batch: &EncodedBatch, _mode: Mode) -> Result<ForwardPass<T>> {
        if batch.is_empty() {
            return Err(PhnError::EmptyBatch);
        }
        batch.check_vocab(&self.vocab_sizes)?;
        let f = self.vocab_sizes.len();
        let rows: Vec<usize> = batch
            .indices()
            .iter()
            .enumerate()
            .map(|(i, &idx)| self.offsets[i % f] + idx)
            .collect();
        let table = graph.param(&self.store, self.weights)?;
        let picked = graph.gather_rows(table, &rows)?;
        let picked = graph.reshape(picked, &[batch.len(), f])?;
        let ones = graph.input(Tensor::ones(vec![f, 1]))?;
        let z = graph.matmul(picked, ones)?;
        let b = graph.param(&self.store, self.bias)?;
        let z = graph.add_broadcast(z, b)?;
        let logits = graph.reshape(z, &[batch.len()])?;
        let probs = graph.sigmoid(logits)?;
        Ok(ForwardPass {
            logits,
            probs,
            embedding: None,
            tower_inputs: Vec::new(),
            tower_outputs: Vec::new(),
            batch_stats: Vec::new(),
        })
    }

    fn update_running_stats(&mut self, _stats: &[BatchStats<T>]) {}

    fn uses_batch_norm(&self) -> bool {
        false
    }
}
