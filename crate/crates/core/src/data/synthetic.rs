//! Planted-interaction click data with known click probabilities.
//!
//! Each sample draws one token per field uniformly. Its logit is the sum of
//! per-token biases plus, for every planted field pair `(f, g)`, an interaction
//! weight `w[f,a][g,b]` for the token pair actually drawn. The interaction table
//! is low rank: `w = scale · ⟨v_{f,a}, v_{g,b}⟩ / √rank` with ±1 (or Gaussian)
//! latent vectors, so it is learnable from embeddings. The label is Bernoulli of the
//! sigmoid of that logit, and the probability itself is returned so the
//! Bayes-optimal AUC can be measured on any split.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schema::{format_line, RawDataset, RawRecord, Schema};
use super::EncodedBatch;
use crate::error::{PhnError, Result};
use crate::scalar::sigmoid;

/// Distribution of the per-token interaction latents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    Gaussian,
    /// Random ±1: every token belongs to one of two groups per latent axis.
    #[default]
    Sign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub field_count: usize,
    pub vocab_size_per_field: usize,
    pub sample_count: usize,
    pub pairwise_weight_scale: f64,
    pub bias_scale: f64,
    pub seed: u64,
    /// Latent dimension of the planted interaction table.
    pub interaction_rank: usize,
    /// Probability that a given field pair carries planted interactions.
    pub pair_density: f64,
    pub latent: LatentKind,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            field_count: 10,
            vocab_size_per_field: 100,
            sample_count: 50_000,
            pairwise_weight_scale: 2.5,
            bias_scale: 0.5,
            seed: 7,
            interaction_rank: 1,
            pair_density: 0.05,
            latent: LatentKind::Sign,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("field_count", self.field_count),
            ("vocab_size_per_field", self.vocab_size_per_field),
            ("sample_count", self.sample_count),
            ("interaction_rank", self.interaction_rank),
        ] {
            if v == 0 {
                return Err(PhnError::config(name, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.pair_density) {
            return Err(PhnError::config("pair_density", "must lie in [0, 1]"));
        }
        if !self.pairwise_weight_scale.is_finite() || !self.bias_scale.is_finite() {
            return Err(PhnError::config("scales", "must be finite"));
        }
        Ok(())
    }

    /// Per-field vocabulary size as seen by a model (tokens plus the OOV slot).
    pub fn vocab_sizes(&self) -> Vec<usize> {
        vec![self.vocab_size_per_field + 1; self.field_count]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// Token indices lie in `1..=vocab_size_per_field`; index 0 stays free as OOV.
    pub batch: EncodedBatch,
    pub probabilities: Vec<f64>,
    pub vocab_sizes: Vec<usize>,
}

/// Generates a dataset; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (fields, vocab, rank) = (spec.field_count, spec.vocab_size_per_field, spec.interaction_rank);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };

    let biases: Vec<f64> = (0..fields * vocab).map(|_| spec.bias_scale * normal()).collect();
    let latent: Vec<f64> = (0..fields * vocab * rank)
        .map(|_| match spec.latent {
            LatentKind::Gaussian => normal(),
            LatentKind::Sign => normal().signum(),
        })
        .collect();

    let mut planted = Vec::new();
    for f in 0..fields {
        for g in f + 1..fields {
            if rng.gen::<f64>() < spec.pair_density {
                planted.push((f, g));
            }
        }
    }
    // A positive density always plants at least one pair.
    if planted.is_empty() && spec.pair_density > 0.0 && fields > 1 {
        let f = rng.gen_range(0..fields - 1);
        planted.push((f, rng.gen_range(f + 1..fields)));
    }
    let weight_scale = spec.pairwise_weight_scale / (rank as f64).sqrt();

    let mut indices = Vec::with_capacity(spec.sample_count * fields);
    let mut labels = Vec::with_capacity(spec.sample_count);
    let mut probabilities = Vec::with_capacity(spec.sample_count);
    let mut tokens = vec![0usize; fields];
    for _ in 0..spec.sample_count {
        for t in tokens.iter_mut() {
            *t = rng.gen_range(0..vocab);
        }
        let mut score: f64 = tokens.iter().enumerate().map(|(f, &t)| biases[f * vocab + t]).sum();
        for &(f, g) in &planted {
            let a = &latent[(f * vocab + tokens[f]) * rank..][..rank];
            let b = &latent[(g * vocab + tokens[g]) * rank..][..rank];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            score += weight_scale * dot;
        }
        let p = sigmoid(score);
        labels.push(u8::from(rng.gen::<f64>() < p));
        probabilities.push(p);
        indices.extend(tokens.iter().map(|t| t + 1));
    }
    Ok(SyntheticData {
        batch: EncodedBatch::new(fields, indices, labels)?,
        probabilities,
        vocab_sizes: spec.vocab_sizes(),
    })
}

impl SyntheticData {
    /// Records in the synthetic text layout: label, then the token index per field.
    pub fn to_raw(&self) -> RawDataset {
        let f = self.batch.field_count();
        let records = (0..self.batch.len())
            .map(|i| RawRecord {
                label: self.batch.labels()[i],
                tokens: self.batch.row(i).iter().map(|t| t.to_string()).collect(),
            })
            .collect();
        RawDataset {
            schema: Schema::synthetic(f),
            header: None,
            records,
        }
    }

    /// Writes the dataset and a side file with one true probability per line.
    pub fn write(&self, data_path: &Path, probabilities_path: &Path) -> Result<()> {
        let raw = self.to_raw();
        let file = File::create(data_path).map_err(|e| PhnError::io(format!("creating {}", data_path.display()), e))?;
        let mut w = BufWriter::new(file);
        for r in &raw.records {
            writeln!(w, "{}", format_line(r, &raw.schema)).map_err(|e| PhnError::io("writing synthetic data", e))?;
        }
        w.flush().map_err(|e| PhnError::io("flushing synthetic data", e))?;
        let file = File::create(probabilities_path)
            .map_err(|e| PhnError::io(format!("creating {}", probabilities_path.display()), e))?;
        let mut w = BufWriter::new(file);
        for p in &self.probabilities {
            writeln!(w, "{p}").map_err(|e| PhnError::io("writing probabilities", e))?;
        }
        w.flush().map_err(|e| PhnError::io("flushing probabilities", e))
    }
}

/// Reads a true-probability side file.
pub fn read_probabilities(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| PhnError::io(format!("opening {}", path.display()), e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| PhnError::io("reading probabilities", e))?;
            line.trim().parse::<f64>().map_err(|e| PhnError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
