//! Central-difference verification of reverse-mode gradients.

use crate::error::{PhnError, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EncodedBatch;
use crate::model::{BnMode, CtrModel, Mode, ModelConfig, PhnModel, LOGLOSS_CLAMP};
use crate::scalar::TwoFloat;
use crate::ssg::SelectionPattern;
use crate::tensor::{ParamId, Parameterized};
use crate::towers::ResidualMode;

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat coordinate where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar_loss<T: Scalar, M, F>(model: &M, loss: &F) -> Result<T>
where
    F: Fn(&M, &mut Graph<T>) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let node = loss(model, &mut graph)?;
    let value = graph.value(node);
    if value.len() != 1 {
        return Err(PhnError::Contract("loss must be a scalar".into()));
    }
    let v = value.values()[0];
    if !v.is_finite() {
        return Err(PhnError::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `loss` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate over every parameter
/// of `model`. `loss` must be deterministic in the parameters.
///
/// Leaves the analytic gradients in the parameters' grad slots.
pub fn finite_difference_check<T, M, F>(model: &mut M, h: T, loss: F) -> Result<GradCheckReport>
where
    T: Scalar,
    M: Parameterized<T>,
    F: Fn(&M, &mut Graph<T>) -> Result<NodeId>,
{
    check_step(h)?;
    let analytic = analytic_gradients(model, &loss)?;
    let mut report = Report::new();
    let ids: Vec<_> = model.params().ids().collect();
    for (p, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let numeric = central_difference(model, &loss, h, ids[p], k)?;
            report.record(model.params().name(ids[p]), k, a, numeric);
        }
    }
    Ok(report.finish())
}

/// As [`finite_difference_check`], but any coordinate whose `T` estimate
/// misses the analytic gradient by `screen` or more in relative error is
/// re-estimated on `reference`, a copy of `model` in a wider scalar type, and
/// the wider estimate is the one reported. This removes `T` rounding noise
/// from the numeric side where it matters. Parameters are matched in store
/// order and `reference` is overwritten with the values of `model`.
pub fn reference_difference_check<T, U, M, R, F, G>(
    model: &mut M,
    reference: &mut R,
    h: f64,
    screen: f64,
    loss: F,
    reference_loss: G,
) -> Result<GradCheckReport>
where
    T: Scalar,
    U: Scalar,
    M: Parameterized<T>,
    R: Parameterized<U>,
    F: Fn(&M, &mut Graph<T>) -> Result<NodeId>,
    G: Fn(&R, &mut Graph<U>) -> Result<NodeId>,
{
    let (ht, hu) = (T::of(h), U::of(h));
    check_step(ht)?;
    check_step(hu)?;
    let ids: Vec<_> = model.params().ids().collect();
    let ref_ids: Vec<_> = reference.params().ids().collect();
    if ids.len() != ref_ids.len() {
        return Err(PhnError::Contract("reference has a different parameter count".into()));
    }
    for (&id, &rid) in ids.iter().zip(&ref_ids) {
        let src = model.params().get(id);
        let dst = reference.params_mut().get_mut(rid);
        if src.shape() != dst.shape() {
            return Err(PhnError::Contract(format!(
                "reference shape mismatch at `{}`",
                model.params().name(id)
            )));
        }
        for (d, s) in dst.values_mut().iter_mut().zip(src.values()) {
            *d = U::of(s.as_f64());
        }
    }
    let analytic = analytic_gradients(model, &loss)?;
    let mut report = Report::new();
    for (p, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let mut numeric = central_difference(model, &loss, ht, ids[p], k)?;
            if relative_error(a, numeric) >= screen {
                numeric = central_difference(reference, &reference_loss, hu, ref_ids[p], k)?;
            }
            report.record(model.params().name(ids[p]), k, a, numeric);
        }
    }
    Ok(report.finish())
}

fn check_step<T: Scalar>(h: T) -> Result<()> {
    if h > T::zero() {
        Ok(())
    } else {
        Err(PhnError::config("h", "step must be positive"))
    }
}

fn analytic_gradients<T, M, F>(model: &mut M, loss: &F) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    M: Parameterized<T>,
    F: Fn(&M, &mut Graph<T>) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let node = loss(model, &mut graph)?;
    let grads = graph.backward(node)?;
    model.params_mut().zero_grads();
    graph.write_param_grads(&grads, model.params_mut())?;
    let ids: Vec<_> = model.params().ids().collect();
    Ok(ids
        .into_iter()
        .map(|id| {
            let t = model.params().get(id);
            t.grad()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

fn central_difference<U, R, G>(model: &mut R, loss: &G, h: U, id: ParamId, k: usize) -> Result<f64>
where
    U: Scalar,
    R: Parameterized<U>,
    G: Fn(&R, &mut Graph<U>) -> Result<NodeId>,
{
    let original = model.params().get(id).values()[k];
    model.params_mut().get_mut(id).values_mut()[k] = original + h;
    let plus = scalar_loss(model, loss);
    model.params_mut().get_mut(id).values_mut()[k] = original - h;
    let minus = scalar_loss(model, loss);
    model.params_mut().get_mut(id).values_mut()[k] = original;
    Ok(((plus? - minus?) / (h + h)).as_f64())
}

struct Report(GradCheckReport);

impl Report {
    fn new() -> Self {
        Self(GradCheckReport {
            max_relative_error: 0.0,
            worst: None,
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
        })
    }

    fn record(&mut self, name: &str, k: usize, analytic: f64, numeric: f64) {
        let r = &mut self.0;
        let err = relative_error(analytic, numeric);
        r.coordinates += 1;
        if err > r.max_relative_error || r.worst.is_none() {
            r.max_relative_error = err;
            r.worst = Some((name.to_string(), k));
            r.analytic = analytic;
            r.numeric = numeric;
        }
    }

    fn finish(self) -> GradCheckReport {
        self.0
    }
}

/// Step used by [`check_model`].
pub const MODEL_STEP: f64 = 1e-4;
/// Smallest `|x|` any LeakyReLU input may have in a [`check_model`] instance.
pub const KINK_MARGIN: f64 = 1e-2;
/// Spread of the uniform jitter added to every parameter of a [`check_model`] instance.
pub const PARAMETER_JITTER: f64 = 0.3;

/// Every residual × batch-norm combination followed by every selection
/// pattern, at F = 4, d = 4 and depth 2.
pub fn mode_grid() -> Vec<ModelConfig> {
    let base = ModelConfig {
        embed_dim: 4,
        bn_epsilon: 1e-3,
        ..ModelConfig::new(vec![3, 4, 3, 5])
    }
    .with_depth(2);
    let mut configs = Vec::new();
    for residual in [ResidualMode::Base, ResidualMode::Rl, ResidualMode::Prl] {
        for bn in [BnMode::None, BnMode::Public, BnMode::Private] {
            configs.push(ModelConfig {
                residual,
                bn,
                ..base.clone()
            });
        }
    }
    for selection in SelectionPattern::ablation_set() {
        configs.push(ModelConfig {
            selection,
            ..base.clone()
        });
    }
    configs
}

/// Draws a seeded instance of `config` (parameters jittered off their
/// initial values, a random batch of `samples` rows with alternating labels)
/// and checks the train-mode logloss gradient of every parameter.
///
/// Instances whose LeakyReLU inputs come within [`KINK_MARGIN`] of zero are
/// redrawn, since central differences across a kink do not estimate the
/// derivative. The numeric side is refined in double-double precision.
pub fn check_model(config: &ModelConfig, seed: u64, samples: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..samples).map(|i| (i % 2) as u8).collect();
    let (mut model, batch) = loop {
        let mut model = PhnModel::<f64>::build(&ModelConfig {
            seed: rng.gen(),
            ..config.clone()
        })?;
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            for v in model.params_mut().get_mut(id).values_mut() {
                *v += rng.gen_range(-PARAMETER_JITTER..PARAMETER_JITTER);
            }
        }
        let indices = (0..samples)
            .flat_map(|_| {
                config
                    .vocab_sizes
                    .iter()
                    .map(|&v| rng.gen_range(0..v))
                    .collect::<Vec<_>>()
            })
            .collect();
        let batch = EncodedBatch::new(config.field_count(), indices, labels.clone())?;
        let mut graph = Graph::new();
        model.forward(&mut graph, &batch, Mode::Train)?;
        if graph.kink_margin().is_none_or(|m| m >= KINK_MARGIN) {
            break (model, batch);
        }
    };
    let mut reference = PhnModel::<TwoFloat>::build(model.config())?;
    let y: Vec<f64> = batch.labels_as();
    let y_wide: Vec<TwoFloat> = batch.labels_as();
    reference_difference_check(
        &mut model,
        &mut reference,
        MODEL_STEP,
        1e-4,
        |m, g| {
            let pass = m.forward(g, &batch, Mode::Train)?;
            g.logloss(pass.probs, &y, LOGLOSS_CLAMP)
        },
        |m, g| {
            let pass = m.forward(g, &batch, Mode::Train)?;
            g.logloss(pass.probs, &y_wide, TwoFloat::of(LOGLOSS_CLAMP))
        },
    )
}
