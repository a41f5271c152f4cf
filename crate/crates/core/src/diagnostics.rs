//! Weak-gradient analysis of output logits, per-tower confidence curves and
//! soft-selection amplification ratios, with stable report files.
//!
//! Every report file starts with `#`-prefixed `key: value` header lines
//! (report kind, config, ε, seed, checkpoint hash) followed by a
//! comma-separated body with a column row.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedBatch;
use crate::error::{PhnError, Result};
use crate::graph::Graph;
use crate::model::{BnMode, CtrModel, Mode, PhnModel, EVAL_CHUNK};
use crate::scalar::{sigmoid, Scalar};
use crate::ssg::{scaling_ratio, TOWER_COUNT};
use crate::towers::TowerKind;

pub const DEFAULT_EPSILON: f64 = 0.05;

/// Threshold on `σ'(z) = σ(z)(1 − σ(z))` below which gradients count as weak.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientIntervalSpec {
    pub epsilon: f64,
}

impl Default for GradientIntervalSpec {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl GradientIntervalSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.25) {
            return Err(PhnError::config("epsilon", "must lie in (0, 0.25)"));
        }
        Ok(Self { epsilon })
    }

    /// `|z*|` with `σ(z*)(1 − σ(z*)) = ε`: `σ* = (1 + √(1 − 4ε))/2`,
    /// `z* = ln(σ*/(1 − σ*))`.
    pub fn boundary(&self) -> f64 {
        let s = (1.0 + (1.0 - 4.0 * self.epsilon).sqrt()) / 2.0;
        (s / (1.0 - s)).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalClass {
    Effective,
    Weak,
}

impl IntervalClass {
    pub fn name(self) -> &'static str {
        match self {
            Self::Effective => "effective",
            Self::Weak => "weak",
        }
    }
}

pub fn sigmoid_derivative(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

/// Weak iff `σ'(z) < ε`.
pub fn classify_interval(z: f64, spec: &GradientIntervalSpec) -> IntervalClass {
    if sigmoid_derivative(z) < spec.epsilon {
        IntervalClass::Weak
    } else {
        IntervalClass::Effective
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    /// Row index within the evaluated batch.
    pub sample: usize,
    pub label: u8,
    pub z: f64,
    pub sigma: f64,
    pub dsigma: f64,
    pub class: IntervalClass,
    /// Per-tower partial logits; empty when the logit does not decompose.
    pub partials: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub config: String,
    pub epsilon: f64,
    /// Names of the partial-logit columns.
    pub parts: Vec<String>,
    pub bias: Option<f64>,
    pub samples: Vec<SampleDiagnostics>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl DiagnosticsReport {
    /// Report over arbitrary logits; `partials[k][i]` is part `k` of sample `i`.
    pub fn from_logits(
        config: &str,
        spec: &GradientIntervalSpec,
        logits: &[f64],
        labels: &[u8],
        parts: Vec<String>,
        partials: &[Vec<f64>],
        bias: Option<f64>,
    ) -> Result<Self> {
        if logits.len() != labels.len() || partials.iter().any(|p| p.len() != logits.len()) {
            return Err(PhnError::Dimension {
                op: "diagnostics",
                left: vec![logits.len()],
                right: vec![labels.len()],
            });
        }
        let samples = logits
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&z, &label))| SampleDiagnostics {
                sample: i,
                label,
                z,
                sigma: sigmoid(z),
                dsigma: sigmoid_derivative(z),
                class: classify_interval(z, spec),
                partials: partials.iter().map(|p| p[i]).collect(),
            })
            .collect();
        Ok(Self {
            config: config.to_string(),
            epsilon: spec.epsilon,
            parts,
            bias,
            samples,
        })
    }

    pub fn weak_fraction(&self) -> f64 {
        mean(
            self.samples
                .iter()
                .map(|s| f64::from(u8::from(s.class == IntervalClass::Weak))),
        )
    }

    pub fn weak_fraction_for(&self, label: u8) -> f64 {
        mean(
            self.samples
                .iter()
                .filter(|s| s.label == label)
                .map(|s| f64::from(u8::from(s.class == IntervalClass::Weak))),
        )
    }

    pub fn mean_dsigma(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.dsigma))
    }

    /// Mean predicted probability over samples with the given label.
    pub fn mean_confidence(&self, label: u8) -> f64 {
        mean(self.samples.iter().filter(|s| s.label == label).map(|s| s.sigma))
    }

    pub const BASE_COLUMNS: [&'static str; 6] = ["sample", "label", "z", "sigma", "dsigma", "class"];

    pub fn columns(&self) -> Vec<String> {
        Self::BASE_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(self.parts.iter().map(|p| format!("partial_{p}")))
            .collect()
    }

    pub fn write<W: Write>(&self, header: &ReportHeader, out: W) -> Result<()> {
        let rows = self.samples.iter().map(|s| {
            let mut row = vec![
                s.sample.to_string(),
                s.label.to_string(),
                s.z.to_string(),
                s.sigma.to_string(),
                s.dsigma.to_string(),
                s.class.name().to_string(),
            ];
            row.extend(s.partials.iter().map(|p| p.to_string()));
            row
        });
        write_report(header, &self.columns(), rows, out)
    }
}

/// Diagnostics of a model's eval-mode logits on `batch`. Partial logits are
/// included unless batch norm is public.
pub fn diagnose<T: Scalar>(
    model: &PhnModel<T>,
    batch: &EncodedBatch,
    spec: &GradientIntervalSpec,
    config: &str,
) -> Result<DiagnosticsReport> {
    if model.config().bn == BnMode::Public {
        let pred = model.predict(batch)?;
        let logits: Vec<f64> = pred.logits.iter().map(|z| z.as_f64()).collect();
        return DiagnosticsReport::from_logits(config, spec, &logits, batch.labels(), vec![], &[], None);
    }
    let d = model.tower_logit_decomposition(batch)?;
    let logits: Vec<f64> = d.logits.iter().map(|z| z.as_f64()).collect();
    let partials: Vec<Vec<f64>> = d
        .partials
        .iter()
        .map(|p| p.iter().map(|v| v.as_f64()).collect())
        .collect();
    let parts = d.towers.iter().map(|k| k.name().to_string()).collect();
    DiagnosticsReport::from_logits(
        config,
        spec,
        &logits,
        batch.labels(),
        parts,
        &partials,
        Some(d.bias.as_f64()),
    )
}

/// Report for the sum of separately trained models' logits; each model's
/// logit is one partial column.
pub fn summed_report<T: Scalar>(
    models: &[(&str, &PhnModel<T>)],
    batch: &EncodedBatch,
    spec: &GradientIntervalSpec,
    config: &str,
) -> Result<DiagnosticsReport> {
    if models.is_empty() {
        return Err(PhnError::config("models", "at least one model is required"));
    }
    let mut partials = Vec::with_capacity(models.len());
    for (_, m) in models {
        let pred = m.predict(batch)?;
        partials.push(pred.logits.iter().map(|z| z.as_f64()).collect::<Vec<f64>>());
    }
    let logits: Vec<f64> = (0..batch.len()).map(|i| partials.iter().map(|p| p[i]).sum()).collect();
    let parts = models.iter().map(|(n, _)| n.to_string()).collect();
    DiagnosticsReport::from_logits(config, spec, &logits, batch.labels(), parts, &partials, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub samples: usize,
    pub weak_fraction: f64,
    pub weak_fraction_positive: f64,
    pub weak_fraction_negative: f64,
    pub mean_dsigma: f64,
    pub mean_confidence_positive: f64,
    pub mean_confidence_negative: f64,
}

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "config",
    "samples",
    "weak_fraction",
    "weak_fraction_positive",
    "weak_fraction_negative",
    "mean_dsigma",
    "mean_confidence_positive",
    "mean_confidence_negative",
];

/// One comparison row per report; all reports must cover the same samples.
pub fn weak_gradient_summary(reports: &[DiagnosticsReport]) -> Result<Vec<SummaryRow>> {
    let key = |r: &DiagnosticsReport| -> Vec<(usize, u8)> { r.samples.iter().map(|s| (s.sample, s.label)).collect() };
    if let Some(first) = reports.first() {
        let reference = key(first);
        if let Some(bad) = reports.iter().find(|r| key(r) != reference) {
            return Err(PhnError::Contract(format!(
                "report `{}` covers different samples than `{}`",
                bad.config, first.config
            )));
        }
    }
    Ok(reports
        .iter()
        .map(|r| SummaryRow {
            config: r.config.clone(),
            samples: r.samples.len(),
            weak_fraction: r.weak_fraction(),
            weak_fraction_positive: r.weak_fraction_for(1),
            weak_fraction_negative: r.weak_fraction_for(0),
            mean_dsigma: r.mean_dsigma(),
            mean_confidence_positive: r.mean_confidence(1),
            mean_confidence_negative: r.mean_confidence(0),
        })
        .collect())
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], header: &ReportHeader, out: W) -> Result<()> {
    let body = rows.iter().map(|r| {
        vec![
            r.config.clone(),
            r.samples.to_string(),
            r.weak_fraction.to_string(),
            r.weak_fraction_positive.to_string(),
            r.weak_fraction_negative.to_string(),
            r.mean_dsigma.to_string(),
            r.mean_confidence_positive.to_string(),
            r.mean_confidence_negative.to_string(),
        ]
    });
    let columns: Vec<String> = SUMMARY_COLUMNS.iter().map(|s| s.to_string()).collect();
    write_report(header, &columns, body, out)
}

/// One sample of a confidence curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub label: u8,
    /// Position within its label group after sorting by confidence.
    pub rank: usize,
    pub sample: usize,
    pub z: f64,
    pub confidence: f64,
    pub partials: Vec<f64>,
    /// `σ(partial + bias)` per tower.
    pub tower_confidence: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationDump {
    pub towers: Vec<TowerKind>,
    pub bias: Option<f64>,
    pub rows: Vec<DumpRow>,
}

/// Row indices picked by [`activation_dump`] from a batch of `len` samples.
pub fn dump_selection(len: usize, sample_count: usize, seed: u64) -> Result<Vec<usize>> {
    if sample_count == 0 || len < sample_count {
        return Err(PhnError::Contract(format!(
            "activation dump needs {sample_count} samples, batch has {len}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(sample_count);
    Ok(order)
}

/// Seeded selection of `sample_count` samples, grouped by label (negatives
/// first) and sorted by predicted probability within each group, with the
/// full-model and per-tower confidence of each.
pub fn activation_dump<T: Scalar>(
    model: &PhnModel<T>,
    batch: &EncodedBatch,
    sample_count: usize,
    seed: u64,
) -> Result<ActivationDump> {
    let order = dump_selection(batch.len(), sample_count, seed)?;
    let picked = batch.select(&order);
    let (towers, bias, logits, partials) = if model.config().bn == BnMode::Public {
        let pred = model.predict(&picked)?;
        (vec![], None, pred.logits, vec![])
    } else {
        let d = model.tower_logit_decomposition(&picked)?;
        (d.towers, Some(d.bias), d.logits, d.partials)
    };
    let mut rows: Vec<DumpRow> = order
        .iter()
        .enumerate()
        .map(|(i, &sample)| {
            let z = logits[i].as_f64();
            let parts: Vec<f64> = partials.iter().map(|p| p[i].as_f64()).collect();
            let tower_confidence = match bias {
                Some(b) => partials.iter().map(|p| sigmoid(p[i] + b).as_f64()).collect(),
                None => vec![],
            };
            DumpRow {
                label: picked.labels()[i],
                rank: 0,
                sample,
                z,
                confidence: sigmoid(logits[i]).as_f64(),
                partials: parts,
                tower_confidence,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.label
            .cmp(&b.label)
            .then(a.confidence.total_cmp(&b.confidence))
            .then(a.sample.cmp(&b.sample))
    });
    let mut counts = [0usize; 2];
    for r in rows.iter_mut() {
        let c = &mut counts[usize::from(r.label)];
        r.rank = *c;
        *c += 1;
    }
    Ok(ActivationDump {
        towers,
        bias: bias.map(|b| b.as_f64()),
        rows,
    })
}

impl ActivationDump {
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["label", "rank", "sample", "z", "confidence"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend(self.towers.iter().map(|k| format!("partial_{k}")));
        cols.extend(self.towers.iter().map(|k| format!("confidence_{k}")));
        cols
    }

    pub fn write<W: Write>(&self, header: &ReportHeader, out: W) -> Result<()> {
        let rows = self.rows.iter().map(|r| {
            let mut row = vec![
                r.label.to_string(),
                r.rank.to_string(),
                r.sample.to_string(),
                r.z.to_string(),
                r.confidence.to_string(),
            ];
            row.extend(r.partials.iter().map(|v| v.to_string()));
            row.extend(r.tower_confidence.iter().map(|v| v.to_string()));
            row
        });
        write_report(header, &self.columns(), rows, out)
    }
}

/// Per-tower, per-field amplification of the selected embedding over the raw
/// shared embedding. Rows follow the FFN, cross, field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingMatrix {
    pub rows: Vec<(TowerKind, Vec<f64>)>,
}

pub fn scaling_ratio_matrix<T: Scalar>(model: &PhnModel<T>, batch: &EncodedBatch) -> Result<ScalingMatrix> {
    if batch.is_empty() {
        return Err(PhnError::EmptyBatch);
    }
    let fields = batch.field_count();
    let mut totals = vec![vec![0.0; fields]; TOWER_COUNT];
    for chunk in batch.chunks(EVAL_CHUNK) {
        let mut graph = Graph::new();
        let pass = model.forward(&mut graph, &chunk, Mode::Eval)?;
        let e_se = graph.value(pass.embedding.expect("model has an embedding"));
        for (t, &node) in pass.tower_inputs.iter().enumerate() {
            let ratios = scaling_ratio(graph.value(node), e_se)?;
            for (acc, r) in totals[t].iter_mut().zip(ratios) {
                *acc += r.as_f64() * chunk.len() as f64;
            }
        }
    }
    let n = batch.len() as f64;
    Ok(ScalingMatrix {
        rows: TowerKind::ALL
            .iter()
            .zip(totals)
            .map(|(k, row)| (*k, row.into_iter().map(|v| v / n).collect()))
            .collect(),
    })
}

impl ScalingMatrix {
    pub fn columns(&self) -> Vec<String> {
        let fields = self.rows.first().map_or(0, |(_, r)| r.len());
        std::iter::once("tower".to_string())
            .chain((0..fields).map(|f| format!("field_{f}")))
            .collect()
    }

    pub fn write<W: Write>(&self, header: &ReportHeader, out: W) -> Result<()> {
        let rows = self.rows.iter().map(|(k, r)| {
            std::iter::once(k.name().to_string())
                .chain(r.iter().map(|v| v.to_string()))
                .collect()
        });
        write_report(header, &self.columns(), rows, out)
    }
}

/// Provenance block written at the top of every report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub report: String,
    pub config: String,
    pub epsilon: f64,
    pub seed: u64,
    pub checkpoint_sha256: Option<String>,
}

impl ReportHeader {
    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("# report: {}", self.report),
            format!("# config: {}", self.config),
            format!("# epsilon: {}", self.epsilon),
            format!("# seed: {}", self.seed),
            format!(
                "# checkpoint_sha256: {}",
                self.checkpoint_sha256.as_deref().unwrap_or("none")
            ),
        ]
    }
}

pub fn write_report<W: Write>(
    header: &ReportHeader,
    columns: &[String],
    rows: impl Iterator<Item = Vec<String>>,
    mut out: W,
) -> Result<()> {
    let ctx = |e| PhnError::io("writing report", e);
    for line in header.lines() {
        writeln!(out, "{line}").map_err(ctx)?;
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_ctx = |e: csv::Error| PhnError::io("writing report", e.into());
    w.write_record(columns).map_err(csv_ctx)?;
    for row in rows {
        w.write_record(&row).map_err(csv_ctx)?;
    }
    w.flush().map_err(ctx)
}

/// `key: value` pairs from a report header, in file order.
pub type ReportHeaderEntries = Vec<(String, String)>;

/// Splits a report file into header entries and the comma-separated body.
pub fn parse_report(text: &str) -> Result<(ReportHeaderEntries, Vec<Vec<String>>)> {
    let mut header = Vec::new();
    let mut body = String::new();
    for line in text.lines() {
        match line.strip_prefix("# ") {
            Some(entry) => {
                let (k, v) = entry.split_once(": ").ok_or_else(|| PhnError::Parse {
                    line: header.len() + 1,
                    reason: format!("malformed header line `{line}`"),
                })?;
                header.push((k.to_string(), v.to_string()));
            }
            None => {
                body.push_str(line);
                body.push('\n');
            }
        }
    }
    let mut rows = Vec::new();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(body.as_bytes());
    for rec in reader.records() {
        let rec = rec.map_err(|e| PhnError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}
