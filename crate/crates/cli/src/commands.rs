//! Command implementations. Each writes only inside its run directory.

use std::path::Path;

use phn_core::checkpoint::{self, hex_digest};
use phn_core::data::{
    generate_synthetic, read_probabilities, split_indices, EncodedBatch, FeatureVocab, RawDataset, RawRecord, Schema,
    SyntheticSpec,
};
use phn_core::diagnostics::{
    activation_dump, diagnose, dump_selection, scaling_ratio_matrix, summed_report, weak_gradient_summary,
    write_report, write_summary, DiagnosticsReport, GradientIntervalSpec, ReportHeader,
};
use phn_core::metrics::auc;
use phn_core::train::{evaluate, grid_search, train, write_grid, write_metrics, Evaluation};
use phn_core::{BnMode, ModelConfig, PhnModel, ResidualMode, SelectionPattern, TowerKind, TrainSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toml::Table;

use crate::config::{read_data, RunConfig};
use crate::error::{CliError, Result};
use crate::run::RunDir;

pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";

/// Encoded train/validation/test splits with the vocabulary built on train.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: Schema,
    pub vocab: FeatureVocab,
    pub train: EncodedBatch,
    pub val: EncodedBatch,
    pub test: EncodedBatch,
    pub test_probabilities: Option<Vec<f64>>,
}

fn parse_raw(cfg: &RunConfig, schema: &Schema, run: &mut RunDir) -> Result<RawDataset> {
    let text = read_data(&cfg.data.path)?;
    run.add_input(&cfg.data.path);
    Ok(RawDataset::parse(text.as_bytes(), schema)?)
}

fn pick(records: &[RawRecord], rows: &[usize]) -> Vec<RawRecord> {
    rows.iter().map(|&i| records[i].clone()).collect()
}

pub fn load_dataset(cfg: &RunConfig, run: &mut RunDir) -> Result<Dataset> {
    let raw = parse_raw(cfg, &cfg.schema()?, run)?;
    let [a, b, c] = split_indices(raw.records.len(), cfg.data.split, cfg.data.split_seed)?;
    let train_records = pick(&raw.records, &a);
    let vocab = FeatureVocab::build(&train_records, &raw.schema, cfg.data.min_frequency)?;
    let test_probabilities = match &cfg.data.probabilities {
        None => None,
        Some(p) => {
            if !p.exists() {
                return Err(CliError::DataNotFound(p.clone()));
            }
            run.add_input(p);
            let all = read_probabilities(p)?;
            if all.len() != raw.records.len() {
                return Err(CliError::Usage(format!(
                    "{} has {} probabilities for {} samples",
                    p.display(),
                    all.len(),
                    raw.records.len()
                )));
            }
            Some(c.iter().map(|&i| all[i]).collect())
        }
    };
    Ok(Dataset {
        train: vocab.encode(&train_records)?,
        val: vocab.encode(&pick(&raw.records, &b))?,
        test: vocab.encode(&pick(&raw.records, &c))?,
        schema: raw.schema,
        vocab,
        test_probabilities,
    })
}

pub fn model_config(cfg: &RunConfig, vocab: &FeatureVocab) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    m.vocab_sizes = vocab.sizes();
    m.validate()?;
    Ok(m)
}

pub fn train_spec(cfg: &RunConfig) -> TrainSpec {
    let mut spec = cfg.train.clone();
    spec.deterministic |= cfg.deterministic;
    spec
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub split: String,
    pub samples: usize,
    pub logloss: f64,
    pub auc: Option<f64>,
}

impl EvalRecord {
    fn new(split: &str, e: Evaluation) -> Self {
        Self {
            split: split.to_string(),
            samples: e.samples,
            logloss: e.logloss,
            auc: e.auc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: String,
    pub selection: String,
    pub parameter_count: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: usize,
    pub checkpoint_sha256: String,
    /// Final evaluation of the returned (best validation) model.
    pub evaluations: Vec<EvalRecord>,
    /// AUC of the true probabilities on the test split, when known.
    pub oracle_test_auc: Option<f64>,
}

impl TrainSummary {
    pub fn evaluation(&self, split: &str) -> Option<&EvalRecord> {
        self.evaluations.iter().find(|e| e.split == split)
    }
}

fn final_evaluations(model: &PhnModel, ds: &Dataset) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (name, batch) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        if !batch.is_empty() {
            out.push(EvalRecord::new(name, evaluate(model, batch)?));
        }
    }
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig, run: &mut RunDir) -> Result<TrainSummary> {
    let ds = load_dataset(cfg, run)?;
    let mc = model_config(cfg, &ds.vocab)?;
    let model = PhnModel::build(&mc)?;
    let out = train(model, &ds.train, &ds.val, &train_spec(cfg))?;
    let bytes = checkpoint::to_bytes(&out.model, Some(&ds.schema), Some(&ds.vocab))?;
    run.write(CHECKPOINT, &bytes)?;
    run.write_with(METRICS, |b| write_metrics(&out.records, b))?;
    let oracle_test_auc = match &ds.test_probabilities {
        Some(p) if !ds.test.is_empty() => auc(p, ds.test.labels()).ok(),
        _ => None,
    };
    let summary = TrainSummary {
        config: mc.label(),
        selection: mc.selection.to_string(),
        parameter_count: mc.parameter_count(),
        best_epoch: out.best_epoch,
        epochs_run: out.epochs_run,
        steps: out.steps,
        checkpoint_sha256: hex_digest(&bytes),
        evaluations: final_evaluations(&out.model, &ds)?,
        oracle_test_auc,
    };
    run.write_json(SUMMARY, &summary)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(CliError::Usage(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

/// Scores a checkpoint on one split of the configured data, using the
/// checkpoint's own schema and vocabulary.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, split: SplitName, run: &mut RunDir) -> Result<EvalRecord> {
    if !checkpoint_path.exists() {
        return Err(CliError::CheckpointNotFound(checkpoint_path.to_path_buf()));
    }
    run.add_input(checkpoint_path);
    let ck = checkpoint::load::<f64>(checkpoint_path)?;
    let missing = |what: &str| CliError::Core(phn_core::PhnError::Checkpoint(format!("no {what} stored")));
    let schema = ck.schema.ok_or_else(|| missing("schema"))?;
    let vocab = ck.vocab.ok_or_else(|| missing("vocabulary"))?;
    let raw = parse_raw(cfg, &schema, run)?;
    let parts = split_indices(raw.records.len(), cfg.data.split, cfg.data.split_seed)?;
    let rows = &parts[split as usize];
    let batch = vocab.encode(&pick(&raw.records, rows))?;
    let record = EvalRecord::new(split.name(), evaluate(&ck.model, &batch)?);
    run.write_json("eval.json", &record)?;
    Ok(record)
}

pub fn cmd_grid(cfg: &RunConfig, depths: &[usize], run: &mut RunDir) -> Result<Vec<phn_core::train::GridRow>> {
    let ds = load_dataset(cfg, run)?;
    let mc = model_config(cfg, &ds.vocab)?;
    let rows = grid_search::<f64>(&mc, depths, &ds.train, &ds.val, &train_spec(cfg), !cfg.deterministic)?;
    run.write_with("grid.csv", |b| write_grid(&rows, b))?;
    Ok(rows)
}

pub fn cmd_gen_data(spec: &SyntheticSpec, run: &mut RunDir) -> Result<usize> {
    let data = generate_synthetic(spec)?;
    run.write_with("data.tsv", |b| data.to_raw().write_to(b))?;
    let probabilities: String = data.probabilities.iter().map(|p| format!("{p}\n")).collect();
    run.write("probabilities.txt", probabilities.as_bytes())?;
    let echo = toml::to_string(spec).map_err(|e| CliError::Usage(format!("cannot serialize spec: {e}")))?;
    run.write("spec.toml", echo.as_bytes())?;
    Ok(data.batch.len())
}

/// Named diagnostic matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matrix {
    /// Residual mode × batch-norm mode.
    ResidualBn,
    /// The seven selection patterns.
    Selection,
    /// Confidence curves of single towers, their sum and the joint model.
    Towers,
    /// Per-tower, per-field scaling ratios of the selected embedding.
    Scaling,
}

impl Matrix {
    pub const ALL: [Matrix; 4] = [Matrix::ResidualBn, Matrix::Selection, Matrix::Towers, Matrix::Scaling];

    pub fn name(self) -> &'static str {
        match self {
            Self::ResidualBn => "residual-bn",
            Self::Selection => "selection",
            Self::Towers => "towers",
            Self::Scaling => "scaling",
        }
    }

    pub fn parse_list(items: &[String]) -> Result<Vec<Matrix>> {
        let mut out = Vec::new();
        for item in items {
            let found: Vec<Matrix> = match item.as_str() {
                "all" => Self::ALL.to_vec(),
                s => vec![*Self::ALL.iter().find(|m| m.name() == s).ok_or_else(|| {
                    CliError::Usage(format!(
                        "unknown matrix `{s}` (residual-bn, selection, towers, scaling, all)"
                    ))
                })?],
            };
            for m in found {
                if !out.contains(&m) {
                    out.push(m);
                }
            }
        }
        Ok(out)
    }
}

/// One model configuration of a diagnostic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: ModelConfig,
}

pub fn matrix_cells(matrix: Matrix, base: &ModelConfig) -> Vec<Cell> {
    let cell = |name: String, config: ModelConfig| Cell { name, config };
    match matrix {
        Matrix::ResidualBn => {
            let mut cells = Vec::new();
            for residual in [ResidualMode::Base, ResidualMode::Rl, ResidualMode::Prl] {
                for bn in [BnMode::None, BnMode::Public, BnMode::Private] {
                    let c = ModelConfig {
                        residual,
                        bn,
                        ..base.clone()
                    };
                    cells.push(cell(c.label(), c));
                }
            }
            cells
        }
        Matrix::Selection => SelectionPattern::ablation_set()
            .into_iter()
            .map(|selection| {
                cell(
                    selection.to_string(),
                    ModelConfig {
                        selection,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Matrix::Towers => {
            let joint = |residual| {
                ModelConfig {
                    residual,
                    ..base.clone()
                }
                .with_towers(&TowerKind::ALL)
            };
            let mut cells: Vec<Cell> = TowerKind::ALL
                .iter()
                .map(|k| cell(k.name().to_string(), joint(ResidualMode::Base).with_towers(&[*k])))
                .collect();
            cells.push(cell("phn".into(), joint(ResidualMode::Base)));
            cells.push(cell("phn+rl".into(), joint(ResidualMode::Rl)));
            cells.push(cell("phn+prl".into(), joint(ResidualMode::Prl)));
            cells
        }
        Matrix::Scaling => vec![cell("phn".into(), base.clone())],
    }
}

/// Cells from a matrix file: `[[cell]]` tables with a `name` and any model
/// config fields, applied over the base config.
pub fn file_cells(path: &Path, base: &ModelConfig) -> Result<Vec<Cell>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct MatrixFile {
        cell: Vec<Table>,
    }
    let bad = |reason: String| CliError::ConfigFile {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => bad("file not found".into()),
        _ => CliError::io(format!("reading {}", path.display()), e),
    })?;
    let file: MatrixFile = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let base_table = Table::try_from(base).map_err(|e| bad(e.to_string()))?;
    let mut cells = Vec::new();
    for mut entry in file.cell {
        let name = match entry.remove("name") {
            Some(toml::Value::String(s)) if is_safe_name(&s) => s,
            _ => {
                return Err(bad(
                    "every cell needs a `name` made of letters, digits, `+`, `-` or `_`".into(),
                ))
            }
        };
        if cells.iter().any(|c: &Cell| c.name == name) {
            return Err(bad(format!("duplicate cell name `{name}`")));
        }
        let mut merged = base_table.clone();
        merged.extend(entry);
        let config: ModelConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| bad(format!("cell `{name}`: {e}")))?;
        config.validate()?;
        cells.push(Cell { name, config });
    }
    if cells.is_empty() {
        return Err(bad("no cells".into()));
    }
    Ok(cells)
}

fn is_safe_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "+-_".contains(c))
}

struct Trained {
    model: PhnModel,
    best_epoch: usize,
    val: Option<Evaluation>,
    test: Evaluation,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub matrices: Vec<String>,
    pub trained_models: usize,
    pub reports: Vec<String>,
}

const TABLE_COLUMNS: [&str; 10] = [
    "config",
    "parameter_count",
    "best_epoch",
    "val_logloss",
    "val_auc",
    "test_logloss",
    "test_auc",
    "weak_fraction",
    "mean_dsigma",
    "checkpoint_sha256",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn cmd_diagnose(
    cfg: &RunConfig,
    matrices: &[Matrix],
    matrix_file: Option<&Path>,
    run: &mut RunDir,
) -> Result<DiagnoseSummary> {
    let eps = GradientIntervalSpec::new(cfg.diagnostics.epsilon)?;
    let ds = load_dataset(cfg, run)?;
    let base = model_config(cfg, &ds.vocab)?;
    if ds.test.is_empty() {
        return Err(CliError::Core(phn_core::PhnError::EmptyBatch));
    }
    let mut plan: Vec<(String, Vec<Cell>)> = matrices
        .iter()
        .map(|m| (m.name().to_string(), matrix_cells(*m, &base)))
        .collect();
    if let Some(p) = matrix_file {
        run.add_input(p);
        plan.push(("custom".into(), file_cells(p, &base)?));
    }
    if plan.is_empty() {
        return Err(CliError::Usage("no diagnostic matrix selected".into()));
    }
    if matrices.contains(&Matrix::Towers) {
        dump_selection(ds.test.len(), cfg.diagnostics.sample_count, cfg.diagnostics.seed)?;
    }

    let mut unique: Vec<(String, ModelConfig)> = Vec::new();
    for (matrix, cells) in &plan {
        for c in cells {
            if !unique.iter().any(|(_, u)| *u == c.config) {
                unique.push((format!("{matrix}_{}", c.name), c.config.clone()));
            }
        }
    }
    let spec = train_spec(cfg);
    let fit = |(_, config): &(String, ModelConfig)| -> Result<(PhnModel, usize)> {
        let out = train(PhnModel::build(config)?, &ds.train, &ds.val, &spec)?;
        Ok((out.model, out.best_epoch))
    };
    let fitted: Vec<(PhnModel, usize)> = if cfg.deterministic {
        unique.iter().map(fit).collect::<Result<_>>()?
    } else {
        unique.par_iter().map(fit).collect::<Result<_>>()?
    };
    let mut trained = Vec::with_capacity(fitted.len());
    for ((key, _), (model, best_epoch)) in unique.iter().zip(fitted) {
        let rel = format!("checkpoints/{key}.ckpt");
        let bytes = checkpoint::to_bytes(&model, Some(&ds.schema), Some(&ds.vocab))?;
        run.write(&rel, &bytes)?;
        trained.push(Trained {
            val: (!ds.val.is_empty()).then(|| evaluate(&model, &ds.val)).transpose()?,
            test: evaluate(&model, &ds.test)?,
            model,
            best_epoch,
            sha256: hex_digest(&bytes),
        });
    }
    let find = |config: &ModelConfig| -> &Trained {
        let i = unique
            .iter()
            .position(|(_, u)| u == config)
            .expect("every cell was trained");
        &trained[i]
    };

    let header = |report: &str, config: &str, sha: Option<&str>| ReportHeader {
        report: report.to_string(),
        config: config.to_string(),
        epsilon: eps.epsilon,
        seed: cfg.diagnostics.seed,
        checkpoint_sha256: sha.map(str::to_string),
    };
    let mut reports = Vec::new();
    for (matrix, cells) in &plan {
        match matrix.as_str() {
            "towers" => reports.extend(write_tower_dumps(cfg, &eps, &ds, cells, &find, &header, run)?),
            "scaling" => {
                for c in cells {
                    let t = find(&c.config);
                    let m = scaling_ratio_matrix(&t.model, &ds.test)?;
                    let rel = format!("scaling/scaling_ratio_{}.csv", c.name);
                    run.write_with(&rel, |b| m.write(&header("scaling_ratio", &c.name, Some(&t.sha256)), b))?;
                    reports.push(rel);
                }
            }
            _ => {
                let mut rows = Vec::new();
                for c in cells {
                    let t = find(&c.config);
                    let report = diagnose(&t.model, &ds.test, &eps, &c.name)?;
                    let rel = format!("{matrix}/{}.csv", c.name);
                    run.write_with(&rel, |b| {
                        report.write(&header("diagnostics", &c.name, Some(&t.sha256)), b)
                    })?;
                    reports.push(rel);
                    rows.push(vec![
                        c.name.clone(),
                        c.config.parameter_count().to_string(),
                        t.best_epoch.to_string(),
                        opt(t.val.as_ref().map(|v| v.logloss)),
                        opt(t.val.as_ref().and_then(|v| v.auc)),
                        t.test.logloss.to_string(),
                        opt(t.test.auc),
                        report.weak_fraction().to_string(),
                        report.mean_dsigma().to_string(),
                        t.sha256.clone(),
                    ]);
                }
                let rel = format!("{matrix}/summary.csv");
                let columns: Vec<String> = TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
                run.write_with(&rel, |b| {
                    write_report(
                        &header(&format!("{matrix}_summary"), &base.label(), None),
                        &columns,
                        rows.into_iter(),
                        b,
                    )
                })?;
                reports.push(rel);
            }
        }
    }
    let summary = DiagnoseSummary {
        matrices: plan.iter().map(|(m, _)| m.clone()).collect(),
        trained_models: trained.len(),
        reports,
    };
    run.write_json(SUMMARY, &summary)?;
    Ok(summary)
}

fn write_tower_dumps<'a>(
    cfg: &RunConfig,
    eps: &GradientIntervalSpec,
    ds: &Dataset,
    cells: &[Cell],
    find: &dyn Fn(&ModelConfig) -> &'a Trained,
    header: &dyn Fn(&str, &str, Option<&str>) -> ReportHeader,
    run: &mut RunDir,
) -> Result<Vec<String>> {
    let (n, seed) = (cfg.diagnostics.sample_count, cfg.diagnostics.seed);
    let subset = ds.test.select(&dump_selection(ds.test.len(), n, seed)?);
    let mut written = Vec::new();
    let mut reports: Vec<DiagnosticsReport> = Vec::new();
    for c in cells {
        let t = find(&c.config);
        let dump = activation_dump(&t.model, &ds.test, n, seed)?;
        let rel = format!("towers/{}.csv", c.name);
        run.write_with(&rel, |b| {
            dump.write(&header("activation_dump", &c.name, Some(&t.sha256)), b)
        })?;
        written.push(rel);
        reports.push(diagnose(&t.model, &subset, eps, &c.name)?);
    }
    let singles: Vec<(&str, &PhnModel)> = cells
        .iter()
        .filter(|c| c.config.towers.len() == 1)
        .map(|c| (c.name.as_str(), &find(&c.config).model))
        .collect();
    if !singles.is_empty() {
        let summed = summed_report(&singles, &subset, eps, "summed")?;
        let rel = "towers/summed.csv".to_string();
        run.write_with(&rel, |b| summed.write(&header("diagnostics", "summed", None), b))?;
        written.push(rel);
        let at = reports.iter().position(|r| r.parts.len() > 1).unwrap_or(reports.len());
        reports.insert(at, summed);
    }
    let rows = weak_gradient_summary(&reports)?;
    let rel = "towers/summary.csv".to_string();
    run.write_with(&rel, |b| {
        write_summary(&rows, &header("weak_gradient_summary", "towers", None), b)
    })?;
    written.push(rel);
    Ok(written)
}
