//! The commands as library functions, so tests can drive them in-process.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use stflow_core::checkpoint::Checkpoint;
use stflow_core::data::{chronological_split, format_timestamp, generate_synthetic, make_windows, normalize, write_corpus, Corpus, Dataset, EXTERNALS, FEATURES, HOLIDAY};
use stflow_core::serve::{NodeRecord, ObservePayload, Predictor, Server, Service};
use stflow_core::training::{evaluate, grad_check_model, metrics_csv, train as fit, GradCheckReport, HistoricalAverage, MetricRow, TrainHistory, Variant};
use stflow_core::{Ablation, ModelParams, RoadGraph};

use crate::config::RunConfig;
use crate::{CliError, StepFilter};

pub const CHECKPOINT_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Writes traffic.csv, external.csv, graph.csv and config.toml into `out`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let (graph, dataset) = generate_synthetic(&cfg.synth)?;
    create_dir(out)?;
    write_corpus(out, &graph, &dataset)?;
    cfg.echo(out)
}

fn corpus_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.data.dir.as_deref().ok_or_else(|| CliError::Input("no corpus: pass --data DIR or set data.dir".into()))
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
}

/// Trains on the corpus in `cfg.data.dir` and writes model.json,
/// history.csv and config.toml into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let dir = corpus_dir(cfg)?;
    let corpus = Corpus::load(dir, cfg.data.step_minutes)?;
    let model = cfg.model.model_config(corpus.graph.n());
    model.validate()?;

    let [tr, va, _] = chronological_split(corpus.dataset.len(), cfg.data.split)?;
    let (norm, stats) = normalize(&corpus.dataset, tr.clone())?;
    let (t, h) = (model.window, model.horizon);
    let train_windows = make_windows(&norm, tr, t, h, cfg.data.stride, &model.targets)?;
    let val_windows = make_windows(&norm, va, t, h, 1, &model.targets)?;
    let (params, history) = fit(&train_windows, &val_windows, &corpus.graph, &model, &cfg.train)?;

    create_dir(out)?;
    let ckpt = Checkpoint::new(&params, cfg.train.ablation, stats, &corpus.graph, cfg.data.step_minutes, cfg.seed, cfg.data.split);
    let checkpoint = out.join(CHECKPOINT_FILE);
    ckpt.save(&checkpoint)?;
    history.write_csv(&out.join(HISTORY_FILE))?;
    cfg.echo(out)?;
    Ok(TrainOutcome { params, history, checkpoint })
}

fn mismatch(msg: String) -> CliError {
    CliError::Input(format!("mismatch: {msg}"))
}

/// Scores the four model variants and the naive baselines on the test split
/// and writes metrics.csv into `out`.
pub fn eval(cfg: &RunConfig, checkpoints: &[PathBuf], steps: StepFilter, out: &Path) -> Result<Vec<MetricRow>, CliError> {
    cfg.validate()?;
    let dir = corpus_dir(cfg)?;
    let ckpts = checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<stflow_core::Result<Vec<_>>>()?;
    let primary = ckpts.first().ok_or_else(|| CliError::Input("at least one --checkpoint is needed".into()))?;
    for (c, path) in ckpts.iter().zip(checkpoints).skip(1) {
        if c.model != primary.model || c.norm != primary.norm || c.split != primary.split || c.graph != primary.graph || c.step_minutes != primary.step_minutes {
            return Err(mismatch(format!("{} was trained on a different model, corpus or split than {}", path.display(), checkpoints[0].display())));
        }
    }

    let corpus = Corpus::load(dir, primary.step_minutes)?;
    let m = &primary.model;
    let (n, f, k) = (corpus.dataset.nodes(), corpus.dataset.values.shape()[2], corpus.dataset.externals.shape()[1]);
    if (n, f, k) != (m.nodes, m.features, m.externals) {
        return Err(mismatch(format!(
            "checkpoint expects N={} nodes, F={} features, M={} externals; corpus {} has N={n}, F={f}, M={k}",
            m.nodes,
            m.features,
            m.externals,
            dir.display()
        )));
    }
    let graph = primary.graph()?;
    if corpus.graph.edges() != graph.edges() {
        return Err(mismatch(format!("the graph of {} differs from the checkpoint's", dir.display())));
    }

    let [tr, _, te] = chronological_split(corpus.dataset.len(), primary.split)?;
    let norm = primary.norm.apply(&corpus.dataset)?;
    let test = make_windows(&norm, te, m.window, m.horizon, 1, &m.targets)?;
    let history = HistoricalAverage::fit(&corpus.dataset, tr, &m.targets)?;

    let params = ckpts.iter().map(Checkpoint::params).collect::<stflow_core::Result<Vec<_>>>()?;
    let variants: Vec<Variant> = [Ablation::HYBRID, Ablation::GNN_OFF, Ablation::TEMPORAL_OFF, Ablation::FUSION_OFF]
        .into_iter()
        .map(|ablation| {
            let trained = ckpts.iter().position(|c| c.ablation == ablation).unwrap_or(0);
            Variant { name: ablation.label().into(), params: &params[trained], ablation }
        })
        .collect();
    let dataset = &corpus.dataset;
    let keep: Box<dyn Fn(usize) -> bool> = match steps {
        StepFilter::All => Box::new(|_| true),
        StepFilter::Holiday => Box::new(|s| dataset.external(s, HOLIDAY) == 1.0),
    };
    let rows = evaluate(&variants, &graph, &test, &primary.norm, dataset, &history, &*keep)?;

    create_dir(out)?;
    write_file(&out.join(METRICS_FILE), &metrics_csv(&rows))?;
    cfg.echo(out)?;
    Ok(rows)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<GradCheckReport, CliError> {
    cfg.validate()?;
    let g = &cfg.gradcheck;
    let graph = RoadGraph::new(g.rows * g.cols, &RoadGraph::grid_edges(g.rows, g.cols))?;
    Ok(grad_check_model(&graph, &g.model_config(), g.eps, g.tol, cfg.seed)?)
}

fn predictor(checkpoint: &Path, graph: Option<&Path>) -> Result<Predictor, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let graph = graph.map(|p| RoadGraph::read_csv(p, None)).transpose()?;
    Ok(Predictor::from_checkpoint(&ckpt, graph)?)
}

/// Observations for grid steps `steps` of a physical-unit dataset.
pub fn payloads(dataset: &Dataset, steps: std::ops::Range<usize>) -> Vec<ObservePayload> {
    steps
        .map(|t| ObservePayload {
            timestamp: format_timestamp(dataset.grid.timestamp(t)),
            records: (0..dataset.nodes())
                .map(|node| NodeRecord { node_id: node, flow: dataset.value(t, node, 0), speed: dataset.value(t, node, 1), occupancy: dataset.value(t, node, 2) })
                .collect(),
            external: (0..EXTERNALS.len()).map(|k| dataset.external(t, k)).collect(),
        })
        .collect()
}

pub fn write_window_file(path: &Path, payloads: &[ObservePayload]) -> Result<(), CliError> {
    let mut text = String::new();
    for p in payloads {
        text.push_str(&serde_json::to_string(p).expect("payload serialises"));
        text.push('\n');
    }
    write_file(path, &text)
}

/// Reads a window file: one JSON observation per non-empty line.
pub fn read_window_file(path: &Path) -> Result<Vec<ObservePayload>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Forecast CSV for the window in `window_file`: `step,node_id,value`, with
/// a `feature` column before `value` when several features are forecast.
pub fn forecast(checkpoint: &Path, window_file: &Path, graph: Option<&Path>) -> Result<String, CliError> {
    let predictor = predictor(checkpoint, graph)?;
    let payloads = read_window_file(window_file)?;
    let mut buffer = predictor.new_buffer();
    if payloads.len() != buffer.capacity() {
        return Err(CliError::Input(format!("{}: window file holds {} steps, expected T={}", window_file.display(), payloads.len(), buffer.capacity())));
    }
    for (i, p) in payloads.iter().enumerate() {
        buffer.observe(p, &predictor.norm).map_err(|reason| CliError::Input(format!("{}: step {}: {reason}", window_file.display(), i + 1)))?;
    }
    let fc = predictor.forecast(&buffer)?;
    let c = &predictor.params.config;
    let (h, n, k) = (c.horizon, c.nodes, c.outputs());
    let mut out = String::from(if k == 1 { "step,node_id,value\n" } else { "step,node_id,feature,value\n" });
    for step in 0..h {
        for node in 0..n {
            for (j, &feature) in c.targets.iter().enumerate() {
                let v = fc.values.data()[(step * n + node) * k + j];
                if k == 1 {
                    writeln!(out, "{},{node},{v}", step + 1).unwrap();
                } else {
                    writeln!(out, "{},{node},{},{v}", step + 1, FEATURES[feature]).unwrap();
                }
            }
        }
    }
    Ok(out)
}

pub fn start_server(cfg: &RunConfig, checkpoint: &Path, graph: Option<&Path>) -> Result<Server, CliError> {
    cfg.validate()?;
    let service = Arc::new(Service::new(predictor(checkpoint, graph)?));
    Ok(Server::start(service, &cfg.serve.address)?)
}
