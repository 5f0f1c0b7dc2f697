//! Online inference: a sliding window of normalised observations and a
//! line-delimited JSON protocol over TCP.
//!
//! Requests are single lines: `/health`, `/forecast`, or `/observe {json}`.
//! Every response is one JSON object on one line.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::data::{format_timestamp, parse_timestamp, NormStats, FEATURES};
use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::model::{forward, Ablation, ModelParams, ObservationWindow};
use crate::tensor::Tensor;

const UNITS: [&str; 3] = ["vehicles per interval", "km/h", "fraction"];

/// One node's measurements in an observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub node_id: usize,
    pub flow: f64,
    pub speed: f64,
    pub occupancy: f64,
}

/// A full network snapshot for one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservePayload {
    pub timestamp: String,
    pub records: Vec<NodeRecord>,
    pub external: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Step {
    timestamp: NaiveDateTime,
    x: Vec<f64>,
    z: Vec<f64>,
}

/// The most recent `T` normalised steps.
#[derive(Clone, Debug)]
pub struct WindowBuffer {
    window: usize,
    nodes: usize,
    externals: usize,
    steps: VecDeque<Step>,
    latest: Option<NaiveDateTime>,
    accepted: usize,
}

impl WindowBuffer {
    pub fn new(window: usize, nodes: usize, externals: usize) -> Self {
        Self { window, nodes, externals, steps: VecDeque::with_capacity(window), latest: None, accepted: 0 }
    }

    pub fn fill(&self) -> usize {
        self.steps.len()
    }

    pub fn capacity(&self) -> usize {
        self.window
    }

    pub fn is_ready(&self) -> bool {
        self.steps.len() == self.window
    }

    pub fn latest(&self) -> Option<NaiveDateTime> {
        self.latest
    }

    /// Validates and appends a step, evicting the oldest when full. On error
    /// the buffer is unchanged and the message says why.
    pub fn observe(&mut self, payload: &ObservePayload, norm: &NormStats) -> std::result::Result<(), String> {
        let timestamp = parse_timestamp(&payload.timestamp).ok_or_else(|| format!("`{}` is not a timestamp", payload.timestamp))?;
        if let Some(latest) = self.latest {
            if timestamp <= latest {
                return Err(format!("stale timestamp {}: latest is {}", format_timestamp(timestamp), format_timestamp(latest)));
            }
        }
        if payload.external.len() != self.externals {
            return Err(format!("expected {} external values, got {}", self.externals, payload.external.len()));
        }
        if payload.external.iter().any(|v| !v.is_finite()) {
            return Err("external values must be finite".into());
        }
        let f = FEATURES.len();
        let mut x = vec![f64::NAN; self.nodes * f];
        let mut seen = vec![false; self.nodes];
        for r in &payload.records {
            if r.node_id >= self.nodes {
                return Err(format!("unknown node id {}", r.node_id));
            }
            if std::mem::replace(&mut seen[r.node_id], true) {
                return Err(format!("duplicate record for node {}", r.node_id));
            }
            let raw = [r.flow, r.speed, r.occupancy];
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(format!("non-finite value for node {}", r.node_id));
            }
            for (k, v) in raw.into_iter().enumerate() {
                x[r.node_id * f + k] = norm.normalize_value(r.node_id, k, v);
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(format!("missing node id {missing}"));
        }
        let z = payload.external.iter().enumerate().map(|(k, &v)| norm.normalize_external(k, v)).collect();
        if self.steps.len() == self.window {
            self.steps.pop_front();
        }
        self.steps.push_back(Step { timestamp, x, z });
        self.latest = Some(timestamp);
        self.accepted += 1;
        Ok(())
    }

    /// The buffered steps as a model window, once full.
    pub fn window(&self) -> Option<(ObservationWindow, NaiveDateTime)> {
        if !self.is_ready() {
            return None;
        }
        let x: Vec<f64> = self.steps.iter().flat_map(|s| s.x.iter().copied()).collect();
        let z: Vec<f64> = self.steps.iter().flat_map(|s| s.z.iter().copied()).collect();
        let window = ObservationWindow {
            x: Tensor::new(vec![self.window, self.nodes, FEATURES.len()], x).ok()?,
            z: Tensor::new(vec![self.window, self.externals], z).ok()?,
            anchor: self.accepted - 1,
        };
        Some((window, self.steps.back()?.timestamp))
    }
}

/// A forecast in physical units: `values` is `[H, N, F_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalForecast {
    pub anchor: NaiveDateTime,
    pub values: Tensor,
}

/// Everything needed to turn a window into a physical forecast.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub params: ModelParams,
    pub ablation: Ablation,
    pub graph: RoadGraph,
    pub norm: NormStats,
}

impl Predictor {
    /// Uses the checkpoint's graph unless one is given, which must then
    /// have the model's node count.
    pub fn from_checkpoint(ckpt: &Checkpoint, graph: Option<RoadGraph>) -> Result<Self> {
        let params = ckpt.params()?;
        let graph = match graph {
            Some(g) => g,
            None => ckpt.graph()?,
        };
        if graph.n() != params.config.nodes {
            return Err(Error::Mismatch(format!("graph has {} nodes, checkpoint expects {}", graph.n(), params.config.nodes)));
        }
        Ok(Self { params, ablation: ckpt.ablation, graph, norm: ckpt.norm.clone() })
    }

    pub fn new_buffer(&self) -> WindowBuffer {
        let c = &self.params.config;
        WindowBuffer::new(c.window, c.nodes, c.externals)
    }

    pub fn forecast(&self, buffer: &WindowBuffer) -> Result<PhysicalForecast> {
        let (window, anchor) = buffer
            .window()
            .ok_or_else(|| Error::InvalidArgument { op: "forecast", msg: format!("window holds {} of {} steps", buffer.fill(), buffer.capacity()) })?;
        let fc = forward(&window, &self.graph, &self.params, self.ablation)?;
        let c = &self.params.config;
        let (n, k) = (c.nodes, c.outputs());
        let values = fc
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| self.norm.denormalize_value((i / k) % n, c.targets[i % k], v))
            .collect();
        Ok(PhysicalForecast { anchor, values: Tensor::new(fc.values.shape().to_vec(), values)? })
    }

    pub fn units(&self) -> String {
        self.params.config.targets.iter().map(|&k| format!("{} [{}]", FEATURES[k], UNITS[k])).collect::<Vec<_>>().join(", ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub fill: usize,
    pub window: usize,
    pub nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserveReply {
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReply {
    pub anchor_timestamp: String,
    pub horizon: usize,
    /// `[H][N]` for a single target, `[H][N][F_out]` otherwise.
    pub values: serde_json::Value,
    pub units: String,
}

impl ForecastReply {
    fn new(predictor: &Predictor, fc: &PhysicalForecast) -> Self {
        let shape = fc.values.shape();
        let (h, n, k) = (shape[0], shape[1], shape[2]);
        let data = fc.values.data();
        let values = (0..h)
            .map(|s| {
                (0..n)
                    .map(|node| {
                        let cell = &data[(s * n + node) * k..(s * n + node + 1) * k];
                        if k == 1 {
                            json!(cell[0])
                        } else {
                            json!(cell)
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>();
        Self { anchor_timestamp: format_timestamp(fc.anchor), horizon: h, values: json!(values), units: predictor.units() }
    }

    /// Values as `[H][N][F_out]`.
    pub fn grid(&self) -> Vec<Vec<Vec<f64>>> {
        let as_f64 = |v: &serde_json::Value| v.as_f64().unwrap_or(f64::NAN);
        self.values
            .as_array()
            .into_iter()
            .flatten()
            .map(|row| {
                row.as_array()
                    .into_iter()
                    .flatten()
                    .map(|cell| match cell.as_array() {
                        Some(items) => items.iter().map(as_f64).collect(),
                        None => vec![as_f64(cell)],
                    })
                    .collect()
            })
            .collect()
    }
}

/// Shared state of a running service.
#[derive(Debug)]
pub struct Service {
    predictor: Predictor,
    buffer: Mutex<WindowBuffer>,
}

impl Service {
    pub fn new(predictor: Predictor) -> Self {
        let buffer = Mutex::new(predictor.new_buffer());
        Self { predictor, buffer }
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, WindowBuffer> {
        self.buffer.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn health(&self) -> Health {
        let b = self.lock();
        Health { status: if b.is_ready() { "ready" } else { "warming" }.into(), fill: b.fill(), window: b.capacity(), nodes: self.predictor.params.config.nodes }
    }

    pub fn observe(&self, payload: &ObservePayload) -> ObserveReply {
        match self.lock().observe(payload, &self.predictor.norm) {
            Ok(()) => ObserveReply { accepted: true, reason: None },
            Err(reason) => ObserveReply { accepted: false, reason: Some(reason) },
        }
    }

    /// Forecast on a snapshot of the buffer, or the warming state.
    pub fn forecast(&self) -> std::result::Result<ForecastReply, serde_json::Value> {
        let snapshot = self.lock().clone();
        if !snapshot.is_ready() {
            return Err(json!({ "error": "warming", "fill": snapshot.fill(), "window": snapshot.capacity() }));
        }
        match self.predictor.forecast(&snapshot) {
            Ok(fc) => Ok(ForecastReply::new(&self.predictor, &fc)),
            Err(e) => Err(json!({ "error": e.to_string() })),
        }
    }

    /// Answers one request line.
    pub fn handle_line(&self, line: &str) -> String {
        let line = line.trim();
        let (path, body) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let reply = match path {
            "/health" => json!(self.health()),
            "/forecast" => match self.forecast() {
                Ok(r) => json!(r),
                Err(e) => e,
            },
            "/observe" => match serde_json::from_str::<ObservePayload>(body.trim()) {
                Ok(payload) => json!(self.observe(&payload)),
                Err(e) => json!(ObserveReply { accepted: false, reason: Some(format!("malformed payload: {e}")) }),
            },
            other => json!({ "error": format!("unknown endpoint `{other}`") }),
        };
        reply.to_string()
    }
}

fn handle_connection(service: &Service, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(writer, "{}", service.handle_line(&line))?;
        writer.flush()?;
    }
    Ok(())
}

/// A running TCP server; one thread per connection.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn start(service: Arc<Service>, address: &str) -> Result<Self> {
        let listener = TcpListener::bind(address).map_err(|e| Error::io(format!("bind {address}"), e))?;
        let addr = listener.local_addr().map_err(|e| Error::io(format!("bind {address}"), e))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let service = Arc::clone(&service);
                std::thread::spawn(move || {
                    let _ = handle_connection(&service, stream);
                });
            }
        });
        Ok(Self { addr, stop, accept: Some(accept) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.shutdown();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitRatios;
    use crate::graph::Activation;
    use crate::model::ModelConfig;

    fn predictor() -> Predictor {
        let config = ModelConfig {
            nodes: 3,
            features: 3,
            window: 3,
            horizon: 2,
            externals: 5,
            targets: vec![0],
            d_model: 4,
            d_spatial: 4,
            d_external: 2,
            d_ff: 4,
            gcn_layers: 1,
            encoder_blocks: 1,
            heads: 1,
            gcn_activation: Activation::Relu,
        };
        let params = ModelParams::init(&config, 4).unwrap();
        let graph = RoadGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let norm = NormStats {
            nodes: 3,
            mean: vec![100.0, 60.0, 0.2, 90.0, 50.0, 0.3, 80.0, 70.0, 0.1],
            std: vec![10.0, 5.0, 0.05, 12.0, 6.0, 0.04, 9.0, 4.0, 0.03],
            ext_mean: vec![10.0, 0.5, 8.0, 0.0, 0.0],
            ext_std: vec![3.0, 1.0, 2.0, 1.0, 1.0],
        };
        let ckpt = Checkpoint::new(&params, Ablation::HYBRID, norm, &graph, 5, 4, SplitRatios::default());
        Predictor::from_checkpoint(&ckpt, None).unwrap()
    }

    fn payload(minute: u32, nodes: usize) -> ObservePayload {
        ObservePayload {
            timestamp: format!("2024-01-01T00:{minute:02}"),
            records: (0..nodes).map(|i| NodeRecord { node_id: i, flow: 90.0 + minute as f64 + i as f64, speed: 55.0, occupancy: 0.2 }).collect(),
            external: vec![11.0, 0.0, 9.0, 0.0, (minute % 2) as f64],
        }
    }

    #[test]
    fn warming_then_ready() {
        let svc = Service::new(predictor());
        let h = svc.health();
        assert_eq!((h.status.as_str(), h.fill, h.window, h.nodes), ("warming", 0, 3, 3));
        assert_eq!(svc.forecast().unwrap_err()["error"], "warming");
        for m in [0, 5, 10] {
            assert!(svc.observe(&payload(m, 3)).accepted);
        }
        assert_eq!(svc.health().status, "ready");
        let a = svc.forecast().unwrap();
        let b = svc.forecast().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.anchor_timestamp, "2024-01-01T00:10");
        assert_eq!(a.grid().len(), 2);
        assert_eq!(a.grid()[0].len(), 3);
    }

    #[test]
    fn rejections_leave_buffer_unchanged() {
        let svc = Service::new(predictor());
        assert!(svc.observe(&payload(5, 3)).accepted);
        let dup = svc.observe(&payload(5, 3));
        assert!(!dup.accepted && dup.reason.unwrap().contains("stale"));
        assert!(!svc.observe(&payload(0, 3)).accepted);
        let missing = svc.observe(&payload(10, 2));
        assert!(missing.reason.unwrap().contains("missing node id 2"));
        let mut bad = payload(10, 3);
        bad.external.pop();
        assert!(!svc.observe(&bad).accepted);
        assert_eq!(svc.health().fill, 1);
    }

    #[test]
    fn buffer_evicts_oldest() {
        let p = predictor();
        let mut b = p.new_buffer();
        for m in 0..5 {
            b.observe(&payload(m * 5, 3), &p.norm).unwrap();
        }
        assert_eq!(b.fill(), 3);
        let (w, anchor) = b.window().unwrap();
        assert_eq!(format_timestamp(anchor), "2024-01-01T00:20");
        // first buffered step is the one observed at minute 10
        assert_eq!(w.x.get(&[0, 0, 0]), p.norm.normalize_value(0, 0, 100.0));
    }

    #[test]
    fn service_matches_library_forward() {
        let p = predictor();
        let svc = Service::new(p.clone());
        let mut b = p.new_buffer();
        for m in [0, 5, 10] {
            svc.observe(&payload(m, 3));
            b.observe(&payload(m, 3), &p.norm).unwrap();
        }
        let direct = p.forecast(&b).unwrap();
        let served = svc.forecast().unwrap().grid();
        for s in 0..2 {
            for n in 0..3 {
                assert_eq!(served[s][n][0], direct.values.get(&[s, n, 0]));
            }
        }
    }

    #[test]
    fn protocol_lines() {
        let svc = Service::new(predictor());
        let health: Health = serde_json::from_str(&svc.handle_line("/health")).unwrap();
        assert_eq!(health.status, "warming");
        let body = serde_json::to_string(&payload(0, 3)).unwrap();
        let reply: serde_json::Value = serde_json::from_str(&svc.handle_line(&format!("/observe {body}"))).unwrap();
        assert_eq!(reply, json!({ "accepted": true }));
        let bad: serde_json::Value = serde_json::from_str(&svc.handle_line("/observe {")).unwrap();
        assert_eq!(bad["accepted"], false);
        let unknown: serde_json::Value = serde_json::from_str(&svc.handle_line("/nope")).unwrap();
        assert!(unknown["error"].as_str().unwrap().contains("/nope"));
    }

    #[test]
    fn mismatched_graph_is_refused() {
        let p = predictor();
        let ckpt = Checkpoint::new(&p.params, p.ablation, p.norm.clone(), &p.graph, 5, 0, SplitRatios::default());
        assert!(Predictor::from_checkpoint(&ckpt, Some(RoadGraph::isolated(2).unwrap())).is_err());
    }

    #[test]
    fn tcp_round_trip() {
        let server = Server::start(Arc::new(Service::new(predictor())), "127.0.0.1:0").unwrap();
        let stream = TcpStream::connect(server.addr()).unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        let mut ask = |line: &str| {
            writeln!(writer, "{line}").unwrap();
            let mut out = String::new();
            reader.read_line(&mut out).unwrap();
            serde_json::from_str::<serde_json::Value>(&out).unwrap()
        };
        assert_eq!(ask("/health")["status"], "warming");
        for m in [0, 5, 10] {
            let body = serde_json::to_string(&payload(m, 3)).unwrap();
            assert_eq!(ask(&format!("/observe {body}"))["accepted"], true);
        }
        let fc = ask("/forecast");
        assert_eq!(fc["horizon"], 2);
        assert_eq!(fc["values"].as_array().unwrap().len(), 2);
        server.stop();
    }
}
