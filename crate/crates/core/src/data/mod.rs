//! Dataset parsing, vocabulary encoding, synthetic generation and splitting.

mod schema;
mod synthetic;
mod vocab;

pub use schema::{format_line, parse_line, RawDataset, RawRecord, Schema};
pub use synthetic::{generate_synthetic, read_probabilities, LatentKind, SyntheticData, SyntheticSpec};
pub use vocab::{bucketize_integer, FeatureVocab, DEFAULT_MIN_FREQUENCY, OOV_INDEX};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PhnError, Result};
use crate::scalar::Scalar;

/// Integer feature indices (`len × field_count`, row-major) plus binary labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedBatch {
    field_count: usize,
    indices: Vec<usize>,
    labels: Vec<u8>,
}

impl EncodedBatch {
    pub fn new(field_count: usize, indices: Vec<usize>, labels: Vec<u8>) -> Result<Self> {
        if field_count == 0 || indices.len() != labels.len() * field_count {
            return Err(PhnError::Dimension {
                op: "encoded_batch",
                left: vec![labels.len(), field_count],
                right: vec![indices.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(PhnError::Contract(format!("label {bad} is not binary")));
        }
        Ok(Self {
            field_count,
            indices,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn field_count(&self) -> usize {
        self.field_count
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_as<T: Scalar>(&self) -> Vec<T> {
        self.labels.iter().map(|&l| T::of(l as f64)).collect()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.field_count..(i + 1) * self.field_count]
    }

    /// Rows in the given order (repeats allowed).
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut indices = Vec::with_capacity(rows.len() * self.field_count);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            indices.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Self {
            field_count: self.field_count,
            indices,
            labels,
        }
    }

    /// Consecutive sub-batches of at most `size` rows.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = EncodedBatch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let end = (start + size).min(self.len());
            Self {
                field_count: self.field_count,
                indices: self.indices[start * self.field_count..end * self.field_count].to_vec(),
                labels: self.labels[start..end].to_vec(),
            }
        })
    }

    /// Checks every index against the per-field vocabulary sizes.
    pub fn check_vocab(&self, vocab_sizes: &[usize]) -> Result<()> {
        if vocab_sizes.len() != self.field_count {
            return Err(PhnError::Contract(format!(
                "batch has {} fields, model expects {}",
                self.field_count,
                vocab_sizes.len()
            )));
        }
        for row in self.indices.chunks(self.field_count) {
            for (f, (&idx, &size)) in row.iter().zip(vocab_sizes).enumerate() {
                if idx >= size {
                    return Err(PhnError::Contract(format!(
                        "index {idx} in field {f} exceeds vocabulary size {size}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn positive_ratio(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|&l| l as f64).sum::<f64>() / self.len() as f64
    }
}

/// Row indices of a seeded train/validation/test partition of `n` samples.
///
/// Sizes are `round(n·f₀)` and `round(n·f₁)` (capped), the test split takes
/// the remainder.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| f.is_nan() || *f < 0.0 || !f.is_finite())
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(PhnError::config(
            "split_fractions",
            format!("fractions must be non-negative and sum to 1, got {fractions:?}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}

/// Seeded, disjoint, exhaustive train/validation/test split.
pub fn split(
    batch: &EncodedBatch,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(EncodedBatch, EncodedBatch, EncodedBatch)> {
    let [a, b, c] = split_indices(batch.len(), fractions, seed)?;
    Ok((batch.select(&a), batch.select(&b), batch.select(&c)))
}
