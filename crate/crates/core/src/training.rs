//! Adam, the training loop with early stopping, evaluation metrics, the
//! gradient-check harness and variant/baseline evaluation.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats, Sample, FEATURES};
use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::model::{forward_on_tape, masked_mse, predict_batch, Ablation, Batch, ModelConfig, ModelParams, ObservationWindow};
use crate::tensor::{finite_diff, max_relative_error, Tape, Tensor};

/// MAE, MSE, RMSE and R² of a prediction. `r2` is `None` when the truth is constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument { op: "metrics", msg: format!("lengths {} and {} must be equal and nonzero", pred.len(), truth.len()) });
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let ss_res = pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum::<f64>();
    let mse = ss_res / n;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot = truth.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(MetricReport { mae, mse, rmse: mse.sqrt(), r2 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for a list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(hyper: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self { hyper, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected update of every tensor in `params`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument { op: "adam", msg: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()) });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Standalone Adam step on fresh or existing state.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut Adam) -> Result<()> {
    state.update(params, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Write wall-clock seconds into the history; zeros otherwise.
    pub record_seconds: bool,
    pub ablation: Ablation,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 30,
            batch_size: 32,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            patience: 10,
            record_seconds: true,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("train.{field}"), msg));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.epochs {
            writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.seconds).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn batch_of(samples: &[Sample], idx: &[usize]) -> Result<(Batch, Tensor, Tensor)> {
    let windows: Vec<&ObservationWindow> = idx.iter().map(|&i| &samples[i].window).collect();
    let batch = Batch::from_windows(&windows)?;
    let first = &samples[idx[0]].target;
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(first.shape());
    let targets: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].target).collect();
    let masks: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].mask).collect();
    Ok((batch, Tensor::concat(&targets, 0)?.reshape(&shape)?, Tensor::concat(&masks, 0)?.reshape(&shape)?))
}

/// Masked sum of squared errors and observed-entry count per sample.
fn per_sample_sse(pred: &Tensor, target: &Tensor, mask: &Tensor, per: usize) -> Vec<(f64, f64)> {
    pred.data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .zip(mask.data().chunks(per))
        .map(|((p, y), m)| {
            let sse = p.iter().zip(y).zip(m).map(|((p, y), m)| m * (p - y) * (p - y)).sum::<f64>();
            (sse, m.iter().sum::<f64>())
        })
        .collect()
}

fn ratio(parts: &[(f64, f64)]) -> f64 {
    let (sse, count) = parts.iter().fold((0.0, 0.0), |(a, b), (s, c)| (a + s, b + c));
    if count > 0.0 {
        sse / count
    } else {
        0.0
    }
}

const EVAL_BATCH: usize = 64;

/// Masked MSE of `params` over `samples`, in normalised units.
pub fn dataset_loss(params: &ModelParams, ablation: Ablation, graph: &RoadGraph, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let per = samples[0].target.len();
    let mut parts = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (batch, target, mask) = batch_of(samples, chunk)?;
        let pred = predict_batch(params, ablation, graph, &batch)?;
        parts.extend(per_sample_sse(&pred, &target, &mask, per));
    }
    Ok(ratio(&parts))
}

/// Mini-batch Adam from a seeded initialisation, keeping the parameters of
/// the best validation epoch.
pub fn train(train: &[Sample], val: &[Sample], graph: &RoadGraph, model: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    let params = ModelParams::init(model, cfg.seed)?;
    train_from(params, train, val, graph, cfg)
}

/// [`train`] starting from given parameters.
pub fn train_from(mut params: ModelParams, train: &[Sample], val: &[Sample], graph: &RoadGraph, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split has no windows".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation split has no windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let shapes: Vec<Vec<usize>> = params.census().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(cfg.adam(), &shape_refs);
    let per = train[0].target.len();

    let initial_val_loss = dataset_loss(&params, cfg.ablation, graph, val)?;
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut parts = vec![(0.0, 0.0); train.len()];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, target, mask) = batch_of(train, chunk)?;
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let trace = forward_on_tape(&mut tape, &vars, &params.config, cfg.ablation, graph, &batch)?;
            let loss = masked_mse(&mut tape, trace.prediction, &target, Some(&mask))?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            for (&i, part) in chunk.iter().zip(per_sample_sse(tape.value(trace.prediction), &target, &mask, per)) {
                parts[i] = part;
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.all().iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
            adam.update(&mut params.tensors_mut(), &grads)?;
        }
        let train_loss = ratio(&parts);
        let val_loss = dataset_loss(&params, cfg.ablation, graph, val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let seconds = if cfg.record_seconds { started.elapsed().as_secs_f64() } else { 0.0 };
        history.push(EpochRecord { epoch, train_loss, val_loss, seconds });
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_params) = best;
    Ok((best_params, TrainHistory { epochs: history, best_epoch, initial_val_loss }))
}

/// Per-group result of [`grad_check_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares backpropagated gradients of the window loss with central
/// differences for every parameter group, on a seeded random window.
pub fn grad_check_model(graph: &RoadGraph, config: &ModelConfig, eps: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    grad_check_model_with(graph, config, eps, tol, seed, |_, _| {})
}

/// [`grad_check_model`] with a hook that may alter each analytic gradient
/// before comparison.
pub fn grad_check_model_with(
    graph: &RoadGraph,
    config: &ModelConfig,
    eps: f64,
    tol: f64,
    seed: u64,
    mut hook: impl FnMut(&str, &mut Tensor),
) -> Result<GradCheckReport> {
    let params = ModelParams::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let window = ObservationWindow {
        x: random(&[config.window, config.nodes, config.features]),
        z: random(&[config.window, config.externals]),
        anchor: config.window - 1,
    };
    let target = random(&[1, config.horizon, config.nodes, config.outputs()]);
    let batch = Batch::from_windows(&[&window])?;
    let loss_of = |p: &ModelParams, with_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let trace = forward_on_tape(&mut tape, &vars, config, Ablation::HYBRID, graph, &batch)?;
        let loss = masked_mse(&mut tape, trace.prediction, &target, None)?;
        let value = tape.value(loss).item();
        if !with_grads {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(loss)?;
        Ok((value, vars.all().iter().map(|&v| grads.take(v).expect("parameter gradient")).collect()))
    };
    let (_, analytic) = loss_of(&params, true)?;
    let names: Vec<String> = params.census().into_iter().map(|(n, _)| n).collect();
    let tensors: Vec<Tensor> = params.census().into_iter().map(|(_, t)| t.clone()).collect();
    let mut groups = Vec::with_capacity(names.len());
    for (g, (name, mut grad)) in names.into_iter().zip(analytic).enumerate() {
        hook(&name, &mut grad);
        let numeric = finite_diff(
            |p| {
                let mut trial = params.clone();
                *trial.tensors_mut()[g] = p[0].clone();
                loss_of(&trial, false).map(|(v, _)| v).unwrap_or(f64::NAN)
            },
            std::slice::from_ref(&tensors[g]),
            eps,
        );
        let err = max_relative_error(&grad, &numeric[0]);
        groups.push(GroupCheck { name, entries: grad.len(), max_rel_error: err, pass: err <= tol });
    }
    Ok(GradCheckReport { groups, tol })
}

/// Per node, time-of-day slot and target feature: the mean over the training
/// range, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    nodes: usize,
    slots: usize,
    targets: Vec<usize>,
    table: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(dataset: &Dataset, train: Range<usize>, targets: &[usize]) -> Result<Self> {
        if train.is_empty() || train.end > dataset.len() {
            return Err(Error::Data(format!("train range {train:?} is empty or exceeds {} steps", dataset.len())));
        }
        let (n, slots, k) = (dataset.nodes(), dataset.grid.steps_per_day(), targets.len());
        let mut sum = vec![0.0; n * slots * k];
        let mut count = vec![0usize; n * slots * k];
        let mut node_sum = vec![0.0; n * k];
        for t in train.clone() {
            let slot = dataset.grid.slot_of_day(t);
            for node in 0..n {
                for (j, &f) in targets.iter().enumerate() {
                    let v = dataset.value(t, node, f);
                    sum[(node * slots + slot) * k + j] += v;
                    count[(node * slots + slot) * k + j] += 1;
                    node_sum[node * k + j] += v;
                }
            }
        }
        let table = sum
            .iter()
            .zip(&count)
            .enumerate()
            .map(|(i, (&s, &c))| {
                if c > 0 {
                    s / c as f64
                } else {
                    // slot never seen in training: fall back to the node mean
                    let (node, j) = (i / (slots * k), i % k);
                    node_sum[node * k + j] / train.len() as f64
                }
            })
            .collect();
        Ok(Self { nodes: n, slots, targets: targets.to_vec(), table })
    }

    pub fn predict(&self, dataset: &Dataset, step: usize, node: usize, j: usize) -> f64 {
        let slot = dataset.grid.slot_of_day(step);
        self.table[(node * self.slots + slot) * self.targets.len() + j]
    }
}

/// A trained model variant to score.
pub struct Variant<'a> {
    pub name: String,
    pub params: &'a ModelParams,
    pub ablation: Ablation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub report: MetricReport,
    pub entries: usize,
}

pub const PERSISTENCE: &str = "persistence";
pub const HISTORICAL_AVERAGE: &str = "historical-average";

/// Scores each variant plus the persistence and historical-average baselines
/// on `test`, in physical units, skipping imputed targets and any target step
/// rejected by `keep_step`.
pub fn evaluate(
    variants: &[Variant],
    graph: &RoadGraph,
    test: &[Sample],
    stats: &NormStats,
    dataset: &Dataset,
    history: &HistoricalAverage,
    keep_step: &dyn Fn(usize) -> bool,
) -> Result<Vec<MetricRow>> {
    if test.is_empty() {
        return Err(Error::Data("test split has no windows".into()));
    }
    let targets = history.targets.clone();
    let (h, n, k) = (test[0].target.shape()[0], test[0].target.shape()[1], targets.len());
    if n != history.nodes || n != stats.nodes {
        return Err(Error::Mismatch(format!("test windows cover {n} nodes, statistics {}", stats.nodes)));
    }
    // entries that count: (sample, h, node, j)
    let mut kept = Vec::new();
    let mut truth = Vec::new();
    for (s, sample) in test.iter().enumerate() {
        for step in 0..h {
            if !keep_step(sample.target_start() + step) {
                continue;
            }
            for node in 0..n {
                for (j, &f) in targets.iter().enumerate() {
                    let i = (step * n + node) * k + j;
                    if sample.mask.data()[i] > 0.0 {
                        kept.push((s, step, node, j));
                        truth.push(stats.denormalize_value(node, f, sample.target.data()[i]));
                    }
                }
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::Data("no observed test targets to score".into()));
    }
    let mut rows = Vec::new();
    let idx: Vec<usize> = (0..test.len()).collect();
    for v in variants {
        let mut preds: Vec<Tensor> = Vec::with_capacity(test.len().div_ceil(EVAL_BATCH));
        for chunk in idx.chunks(EVAL_BATCH) {
            let (batch, _, _) = batch_of(test, chunk)?;
            preds.push(predict_batch(v.params, v.ablation, graph, &batch)?);
        }
        let per = h * n * k;
        let pred: Vec<f64> = kept
            .iter()
            .map(|&(s, step, node, j)| {
                let p = preds[s / EVAL_BATCH].data()[(s % EVAL_BATCH) * per + (step * n + node) * k + j];
                stats.denormalize_value(node, targets[j], p)
            })
            .collect();
        rows.push(MetricRow { variant: v.name.clone(), report: metrics(&pred, &truth)?, entries: kept.len() });
    }
    let f = FEATURES.len();
    let persistence: Vec<f64> = kept
        .iter()
        .map(|&(s, _, node, j)| {
            let x = &test[s].window.x;
            let t_last = x.shape()[0] - 1;
            stats.denormalize_value(node, targets[j], x.data()[(t_last * n + node) * f + targets[j]])
        })
        .collect();
    rows.push(MetricRow { variant: PERSISTENCE.into(), report: metrics(&persistence, &truth)?, entries: kept.len() });
    let average: Vec<f64> = kept.iter().map(|&(s, step, node, j)| history.predict(dataset, test[s].target_start() + step, node, j)).collect();
    rows.push(MetricRow { variant: HISTORICAL_AVERAGE.into(), report: metrics(&average, &truth)?, entries: kept.len() });
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("variant,mae,rmse,mse,r2\n");
    for r in rows {
        let m = &r.report;
        let r2 = m.r2.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        writeln!(out, "{},{},{},{},{}", r.variant, m.mae, m.rmse, m.mse, r2).unwrap();
    }
    out
}
