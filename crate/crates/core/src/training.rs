//! SGD training loop with periodic evaluation on fresh samples.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::mean_repetitions;
use crate::autodiff::{Graph, ParamStore};
use crate::config::{ExperimentConfig, OptimizerKind, SOLVED_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::{Model, Wrapper};

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean training loss since the previous record; `null` once non-finite.
    pub train_loss: Option<f64>,
    pub eval_accuracy: f64,
    pub mean_repetitions: f64,
    /// Mean `N + R` per token; only ACT runs have one.
    pub mean_ponder: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ExperimentConfig,
    pub solved: bool,
    pub steps_to_solve: Option<u64>,
    /// From the last evaluation.
    pub mean_repetitions: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub diverged: bool,
    pub steps_run: u64,
    /// Halting records that broke a bookkeeping identity during evaluation.
    pub bookkeeping_violations: usize,
    pub curve: Vec<MetricsRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub mean_repetitions: f64,
    pub mean_ponder: Option<f64>,
    pub records_checked: usize,
    pub bookkeeping_violations: usize,
    /// Largest `|Σp − 1|` seen over the checked records.
    pub max_weight_sum_error: f64,
}

/// Accuracy and repetition statistics over `n_batches` freshly generated
/// batches.
pub fn evaluate(model: &Model, n_batches: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<EvalSummary> {
    if n_batches == 0 {
        return Err(Error::Usage("evaluate needs at least one batch".into()));
    }
    let mut correct = 0usize;
    let mut counted = 0usize;
    let mut steps = Vec::new();
    let mut ponder_total = 0.0;
    let mut ponder_count = 0usize;
    let mut violations = 0usize;
    let mut checked = 0usize;
    let mut max_sum_err: f64 = 0.0;
    for _ in 0..n_batches {
        let batch = model.task.batch(rng, batch_size);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch)?;
        let (c, n) = model.task.batch_correct(&g, &fwd.outputs, &batch)?;
        correct += c;
        counted += n;
        steps.extend_from_slice(&fwd.steps);
        if let (Some(rollout), Wrapper::Act(cfg)) = (&fwd.act, &model.wrapper) {
            for rec in rollout.records() {
                checked += 1;
                ponder_total += rec.ponder;
                ponder_count += 1;
                max_sum_err = max_sum_err.max((rec.weights.iter().sum::<f64>() - 1.0).abs());
                if rec.check(cfg.max_steps).is_err() {
                    violations += 1;
                }
            }
        }
    }
    Ok(EvalSummary {
        accuracy: correct as f64 / counted.max(1) as f64,
        mean_repetitions: mean_repetitions(steps)?,
        mean_ponder: (ponder_count > 0).then(|| ponder_total / ponder_count as f64),
        records_checked: checked,
        bookkeeping_violations: violations,
        max_weight_sum_error: max_sum_err,
    })
}

/// `θ ← θ − lr·g` for every trainable parameter. Fails without touching the
/// parameters if any gradient is non-finite.
pub fn sgd_update(params: &mut ParamStore, lr: f64) -> Result<()> {
    if !params.grads_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    for (_, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
        for (v, gi) in p.tensor.values_mut().iter_mut().zip(g) {
            *v -= lr * gi;
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.tensor.grad() {
                let scaled = g.iter().map(|v| v * scale).collect();
                p.tensor.set_grad(scaled).expect("same length");
            }
        }
    }
    norm
}

/// Adam with the usual defaults; available for exploration only.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore) -> Result<()> {
        if !params.grads_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((theta, gi), mi), vi) in p.tensor.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *theta -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

enum Optimizer {
    Sgd(f64),
    Adam(Adam),
}

impl Optimizer {
    fn update(&mut self, params: &mut ParamStore) -> Result<()> {
        match self {
            Optimizer::Sgd(lr) => sgd_update(params, *lr),
            Optimizer::Adam(a) => a.update(params),
        }
    }
}

/// Mutable state of a run in progress.
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub diverged: bool,
    pub last_accuracy: Option<f64>,
    train_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let stream = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s);
            rng
        };
        let model = Model::from_config(cfg, &mut stream(INIT_STREAM))?;
        Ok(Self {
            step: 0,
            model,
            diverged: false,
            last_accuracy: None,
            train_rng: stream(TRAIN_STREAM),
            eval_rng: stream(EVAL_STREAM),
        })
    }

    fn mark_diverged(&mut self) {
        self.diverged = true;
    }
}

/// Trains until the solved threshold (when `stop_on_solve`), divergence or
/// the step budget, whichever comes first.
pub fn train_run(cfg: &ExperimentConfig) -> Result<TrainReport> {
    train_run_with(cfg, |_| Ok(())).map(|(report, _)| report)
}

/// [`train_run`] that hands every metrics record to `on_record` as soon as
/// it is produced, and also returns the final model.
pub fn train_run_with<F>(cfg: &ExperimentConfig, mut on_record: F) -> Result<(TrainReport, Model)>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    cfg.validate()?;
    let mut state = TrainState::new(cfg)?;
    let mut optimizer = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(cfg.lr),
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.lr)),
    };
    let mut curve = Vec::new();
    let mut steps_to_solve = None;
    let mut best_accuracy: f64 = 0.0;
    let mut last_eval: Option<EvalSummary> = None;
    let mut violations = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;

    while state.step < cfg.budget {
        let batch = state.model.task.batch(&mut state.train_rng, cfg.batch);
        let mut g = Graph::new();
        let fwd = state.model.forward(&mut g, &batch)?;
        let loss = state.model.loss(&mut g, &fwd, &batch)?;
        let value = g.scalar(loss)?;
        state.step += 1;
        loss_sum += value;
        loss_count += 1;

        let mut ok = value.is_finite();
        if ok {
            g.backward(loss, &mut state.model.params)?;
            drop(g);
            if cfg.clip {
                clip_grad_norm(&mut state.model.params, cfg.clip_norm);
            }
            ok = match optimizer.update(&mut state.model.params) {
                Ok(()) => true,
                Err(Error::NonFinite(_)) => false,
                Err(e) => return Err(e),
            };
        }
        if !ok {
            state.mark_diverged();
        }

        let at_interval = state.step % cfg.eval_interval == 0;
        let at_end = state.step == cfg.budget || state.diverged;
        if !(at_interval || at_end) {
            continue;
        }
        let eval = evaluate(&state.model, cfg.eval_batches, cfg.batch, &mut state.eval_rng)?;
        violations += eval.bookkeeping_violations;
        let mean_loss = loss_sum / loss_count as f64;
        let record = MetricsRecord {
            step: state.step,
            train_loss: mean_loss.is_finite().then_some(mean_loss),
            eval_accuracy: eval.accuracy,
            mean_repetitions: eval.mean_repetitions,
            mean_ponder: eval.mean_ponder,
            diverged: state.diverged,
        };
        loss_sum = 0.0;
        loss_count = 0;
        on_record(&record)?;
        curve.push(record);
        state.last_accuracy = Some(eval.accuracy);
        best_accuracy = best_accuracy.max(eval.accuracy);
        if steps_to_solve.is_none() && eval.accuracy >= SOLVED_THRESHOLD && !state.diverged {
            steps_to_solve = Some(state.step);
        }
        last_eval = Some(eval);
        if state.diverged || (cfg.stop_on_solve && steps_to_solve.is_some()) {
            break;
        }
    }

    let last = match last_eval {
        Some(e) => e,
        None => evaluate(&state.model, cfg.eval_batches, cfg.batch, &mut state.eval_rng)?,
    };
    let report = TrainReport {
        config: cfg.clone(),
        solved: steps_to_solve.is_some(),
        steps_to_solve,
        mean_repetitions: last.mean_repetitions,
        final_accuracy: last.accuracy,
        best_accuracy,
        diverged: state.diverged,
        steps_run: state.step,
        bookkeeping_violations: violations,
        curve,
    };
    Ok((report, state.model))
}
