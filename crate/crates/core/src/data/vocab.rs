use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::schema::{RawRecord, Schema};
use super::EncodedBatch;
use crate::error::{PhnError, Result};

pub const DEFAULT_MIN_FREQUENCY: usize = 2;

/// Index reserved for both missing values and tokens below the frequency
/// threshold.
pub const OOV_INDEX: usize = 0;

/// Integer-field discretization: `floor(ln(v)²)` for `v > 2`, the value itself
/// otherwise. Non-numeric tokens pass through unchanged.
pub fn bucketize_integer(token: &str) -> String {
    match token.trim().parse::<i64>() {
        Ok(v) if v > 2 => {
            let l = (v as f64).ln();
            format!("{}", (l * l).floor() as i64)
        }
        Ok(v) => v.to_string(),
        Err(_) => token.to_string(),
    }
}

/// Per-field token → index maps. Index 0 is the shared out-of-vocabulary /
/// missing slot; real tokens get dense indices from 1 in first-appearance order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVocab {
    pub min_frequency: usize,
    integer_fields: usize,
    /// `tokens[f][i]` is the token with index `i + 1` in field `f`.
    tokens: Vec<Vec<String>>,
    #[serde(skip)]
    maps: Vec<HashMap<String, usize>>,
}

impl FeatureVocab {
    pub fn build(records: &[RawRecord], schema: &Schema, min_frequency: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(PhnError::EmptyBatch);
        }
        let fields = schema.field_count;
        let mut counts: Vec<HashMap<String, (usize, usize)>> = vec![HashMap::new(); fields];
        let mut order = 0usize;
        for r in records {
            if r.tokens.len() != fields {
                return Err(PhnError::Contract(format!(
                    "record has {} fields, schema expects {fields}",
                    r.tokens.len()
                )));
            }
            for (f, tok) in r.tokens.iter().enumerate() {
                let Some(key) = normalize(tok, schema.is_integer_field(f)) else {
                    continue;
                };
                let entry = counts[f].entry(key).or_insert((0, order));
                entry.0 += 1;
                order += 1;
            }
        }
        let tokens = counts
            .into_iter()
            .map(|field| {
                let mut kept: Vec<(usize, String)> = field
                    .into_iter()
                    .filter(|(_, (count, _))| *count >= min_frequency)
                    .map(|(tok, (_, first))| (first, tok))
                    .collect();
                kept.sort_unstable();
                kept.into_iter().map(|(_, t)| t).collect()
            })
            .collect();
        let mut vocab = Self {
            min_frequency,
            integer_fields: schema.integer_field_count,
            tokens,
            maps: Vec::new(),
        };
        vocab.rebuild_maps();
        Ok(vocab)
    }

    /// Restores the lookup maps after deserialization.
    pub fn rebuild_maps(&mut self) {
        self.maps = self
            .tokens
            .iter()
            .map(|toks| toks.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect())
            .collect();
    }

    pub fn field_count(&self) -> usize {
        self.tokens.len()
    }

    /// Vocabulary size per field, including the OOV slot.
    pub fn sizes(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.len() + 1).collect()
    }

    pub fn index(&self, field: usize, token: &str) -> usize {
        match normalize(token, field < self.integer_fields) {
            Some(key) => self.maps[field].get(&key).copied().unwrap_or(OOV_INDEX),
            None => OOV_INDEX,
        }
    }

    pub fn encode(&self, records: &[RawRecord]) -> Result<EncodedBatch> {
        if records.is_empty() {
            return Err(PhnError::EmptyBatch);
        }
        if self.maps.len() != self.tokens.len() {
            return Err(PhnError::Contract("vocabulary maps not built".into()));
        }
        let fields = self.field_count();
        let mut indices = Vec::with_capacity(records.len() * fields);
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            if r.tokens.len() != fields {
                return Err(PhnError::Contract(format!(
                    "record has {} fields, vocabulary has {fields}",
                    r.tokens.len()
                )));
            }
            indices.extend(r.tokens.iter().enumerate().map(|(f, t)| self.index(f, t)));
            labels.push(r.label);
        }
        EncodedBatch::new(fields, indices, labels)
    }
}

fn normalize(token: &str, integer: bool) -> Option<String> {
    if token.is_empty() {
        None
    } else if integer {
        Some(bucketize_integer(token))
    } else {
        Some(token.to_string())
    }
}
