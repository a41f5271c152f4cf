//! Mini-batch training with early stopping, metric traces and the depth grid.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedBatch;
use crate::error::{PhnError, Result};
use crate::graph::Graph;
use crate::metrics::auc;
use crate::model::{logloss, CtrModel, Mode, ModelConfig, PhnModel, LOGLOSS_CLAMP};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Evaluations without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    /// Also score the full training split at each evaluation.
    pub eval_train: bool,
    /// Record zero wall time so traces are byte-reproducible.
    pub deterministic: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 256,
            optimizer: OptimizerSpec::default(),
            patience: 2,
            seed: 0,
            eval_every: 1,
            eval_train: true,
            deterministic: false,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(PhnError::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(PhnError::config("batch_size", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(PhnError::config("eval_every", "must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: Split,
    pub logloss: f64,
    /// Absent when the split holds a single class.
    pub auc: Option<f64>,
    /// Seconds since training started.
    pub wall_time: f64,
}

/// Column order of metric files.
pub const METRIC_COLUMNS: [&str; 5] = ["epoch", "split", "logloss", "auc", "wall_time"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub logloss: f64,
    pub auc: Option<f64>,
    pub samples: usize,
}

/// Eval-mode logloss and AUC of `model` on `batch`.
pub fn evaluate<T: Scalar, M: CtrModel<T>>(model: &M, batch: &EncodedBatch) -> Result<Evaluation> {
    let pred = model.predict(batch)?;
    let labels: Vec<T> = batch.labels_as();
    let loss = logloss(&pred.probs, &labels)?.as_f64();
    let auc = match auc(&pred.probs, batch.labels()) {
        Ok(a) => Some(a),
        Err(PhnError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        logloss: loss,
        auc,
        samples: batch.len(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Parameters from the evaluation with the lowest validation logloss
    /// (or the last epoch when there is no validation data).
    pub model: M,
    pub records: Vec<MetricRecord>,
    pub best_epoch: usize,
    pub best_val_logloss: Option<f64>,
    pub epochs_run: usize,
    pub steps: usize,
}

/// Trains `model` on `train` with per-epoch seeded shuffling and early
/// stopping on validation logloss.
pub fn train<T: Scalar, M: CtrModel<T>>(
    mut model: M,
    train: &EncodedBatch,
    val: &EncodedBatch,
    spec: &TrainSpec,
) -> Result<TrainOutcome<M>> {
    spec.validate()?;
    if train.is_empty() {
        return Err(PhnError::EmptyBatch);
    }
    let bn = model.uses_batch_norm();
    if bn && spec.batch_size < 2 {
        return Err(PhnError::config(
            "batch_size",
            "batch normalization needs at least 2 samples per batch",
        ));
    }
    let start = Instant::now();
    let clock = |deterministic: bool| {
        if deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut optimizer = Optimizer::<T>::new(spec.optimizer.clone())?;
    let clamp = T::of(LOGLOSS_CLAMP);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, M)> = None;
    let mut stale = 0;
    let mut steps = 0;
    let mut epochs_run = 0;

    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(spec.batch_size) {
            if bn && rows.len() < 2 {
                continue;
            }
            steps += 1;
            let batch = train.select(rows);
            let labels: Vec<T> = batch.labels_as();
            let diverged = |loss: f64| PhnError::Divergence {
                epoch,
                step: steps,
                loss,
            };
            let mut graph = Graph::new();
            let pass = match model.forward(&mut graph, &batch, Mode::Train) {
                Err(PhnError::Numeric(_)) => return Err(diverged(f64::NAN)),
                other => other?,
            };
            let loss = graph.logloss(pass.probs, &labels, clamp)?;
            let loss_value = graph.value(loss).values()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(diverged(loss_value));
            }
            let grads = match graph.backward(loss) {
                Err(PhnError::Numeric(_)) => return Err(diverged(loss_value)),
                other => other?,
            };
            let store = model.params_mut();
            store.zero_grads();
            graph.write_param_grads(&grads, store)?;
            optimizer.step(store)?;
            if store.iter().any(|(_, t)| !t.is_finite()) {
                return Err(diverged(loss_value));
            }
            model.update_running_stats(&pass.batch_stats);
        }
        epochs_run = epoch;

        if epoch % spec.eval_every != 0 && epoch != spec.epochs {
            continue;
        }
        if spec.eval_train {
            let e = evaluate(&model, train)?;
            records.push(record(epoch, Split::Train, &e, clock(spec.deterministic)));
        }
        if val.is_empty() {
            best = Some((f64::NAN, epoch, model.clone()));
            continue;
        }
        let e = evaluate(&model, val)?;
        records.push(record(epoch, Split::Val, &e, clock(spec.deterministic)));
        let improved = best.as_ref().is_none_or(|(b, _, _)| e.logloss < *b);
        if improved {
            best = Some((e.logloss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if spec.patience > 0 && stale >= spec.patience {
                break;
            }
        }
    }
    let (best_loss, best_epoch, best_model) = best.expect("the last epoch is always evaluated");
    Ok(TrainOutcome {
        model: best_model,
        records,
        best_epoch,
        best_val_logloss: (!val.is_empty()).then_some(best_loss),
        epochs_run,
        steps,
    })
}

fn record(epoch: usize, split: Split, e: &Evaluation, wall_time: f64) -> MetricRecord {
    MetricRecord {
        epoch,
        split,
        logloss: e.logloss,
        auc: e.auc,
        wall_time,
    }
}

/// Writes metric records as comma-separated text with a header row.
/// Floats use Rust's shortest round-trip formatting.
pub fn write_metrics<W: Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ctx = |e: csv::Error| PhnError::io("writing metrics", e.into());
    w.write_record(METRIC_COLUMNS).map_err(ctx)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.split.name().to_string(),
            r.logloss.to_string(),
            r.auc.map(|a| a.to_string()).unwrap_or_default(),
            r.wall_time.to_string(),
        ])
        .map_err(ctx)?;
    }
    w.flush().map_err(|e| PhnError::io("writing metrics", e))
}

pub fn write_metrics_file(records: &[MetricRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| PhnError::io(format!("creating {}", path.display()), e))?;
    write_metrics(records, BufWriter::new(file))
}

/// One row of the depth grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub depth: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_logloss: f64,
    pub val_auc: Option<f64>,
}

pub const GRID_COLUMNS: [&str; 5] = ["depth", "seed", "best_epoch", "val_logloss", "val_auc"];

/// Retrains from scratch with every tower at each depth; rows come back
/// sorted by depth. Cells run on the rayon pool unless `parallel` is false.
pub fn grid_search<T: Scalar>(
    base: &ModelConfig,
    depths: &[usize],
    train_batch: &EncodedBatch,
    val: &EncodedBatch,
    spec: &TrainSpec,
    parallel: bool,
) -> Result<Vec<GridRow>> {
    if depths.is_empty() {
        return Err(PhnError::config("depths", "at least one depth is required"));
    }
    if val.is_empty() {
        return Err(PhnError::EmptyBatch);
    }
    let cell = |&depth: &usize| -> Result<GridRow> {
        let tag = |e| PhnError::Depth {
            depth,
            source: Box::new(e),
        };
        let config = base.clone().with_depth(depth);
        let model = PhnModel::<T>::build(&config).map_err(tag)?;
        let out = train(model, train_batch, val, spec).map_err(tag)?;
        let eval = evaluate(&out.model, val).map_err(tag)?;
        Ok(GridRow {
            depth,
            seed: config.seed,
            best_epoch: out.best_epoch,
            val_logloss: eval.logloss,
            val_auc: eval.auc,
        })
    };
    let mut rows: Vec<GridRow> = if parallel {
        depths.par_iter().map(cell).collect::<Result<_>>()?
    } else {
        depths.iter().map(cell).collect::<Result<_>>()?
    };
    rows.sort_by_key(|r| r.depth);
    Ok(rows)
}

pub fn write_grid<W: Write>(rows: &[GridRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ctx = |e: csv::Error| PhnError::io("writing grid", e.into());
    w.write_record(GRID_COLUMNS).map_err(ctx)?;
    for r in rows {
        w.write_record([
            r.depth.to_string(),
            r.seed.to_string(),
            r.best_epoch.to_string(),
            r.val_logloss.to_string(),
            r.val_auc.map(|a| a.to_string()).unwrap_or_default(),
        ])
        .map_err(ctx)?;
    }
    w.flush().map_err(|e| PhnError::io("writing grid", e))
}
