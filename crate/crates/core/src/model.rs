//! The hybrid forecaster: graph convolution per time step, a transformer over
//! each node's history, an embedding of the external context, and a linear
//! multi-horizon head over the concatenation of the three.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{gcn_stack, Activation, GraphConvLayer, GraphConvVars, RoadGraph};
use crate::temporal::{temporal_encode, AttentionParams, AttentionVars, EncoderBlock, EncoderBlockVars};
use crate::tensor::{Tape, Tensor, Var};

/// Dimensions of the model and of the data it consumes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Road nodes `N`.
    pub nodes: usize,
    /// Input features per node and step `F`.
    pub features: usize,
    /// History window length `T`.
    pub window: usize,
    /// Forecast horizon `H`.
    pub horizon: usize,
    /// External features per step `M`.
    pub externals: usize,
    /// Indices into the input features that are forecast; `F_out = targets.len()`.
    pub targets: Vec<usize>,
    /// Transformer width `D`.
    pub d_model: usize,
    /// Graph-convolution width `D_s`.
    pub d_spatial: usize,
    /// External embedding width `D_e`.
    pub d_external: usize,
    /// Feed-forward inner width.
    pub d_ff: usize,
    pub gcn_layers: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub gcn_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 16,
            features: 3,
            window: 12,
            horizon: 3,
            externals: 5,
            targets: vec![0],
            d_model: 32,
            d_spatial: 16,
            d_external: 8,
            d_ff: 64,
            gcn_layers: 2,
            encoder_blocks: 2,
            heads: 4,
            gcn_activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn outputs(&self) -> usize {
        self.targets.len()
    }

    fn spatial_out(&self) -> usize {
        if self.gcn_layers == 0 {
            self.features
        } else {
            self.d_spatial
        }
    }

    /// Width of the projection input: spatial features next to the raw features.
    fn projection_in(&self) -> usize {
        self.spatial_out() + self.features
    }

    pub fn fused_dim(&self) -> usize {
        2 * self.d_model + self.d_external
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("features", self.features),
            ("window", self.window),
            ("horizon", self.horizon),
            ("externals", self.externals),
            ("d_model", self.d_model),
            ("d_spatial", self.d_spatial),
            ("d_external", self.d_external),
            ("d_ff", self.d_ff),
            ("encoder_blocks", self.encoder_blocks),
            ("heads", self.heads),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be at least 1"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config("model.heads", format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config("model.d_model", "must be even for the positional encoding"));
        }
        if self.targets.is_empty() || self.targets.iter().any(|&t| t >= self.features) {
            return Err(Error::config("model.targets", format!("need 1..={} indices below {}", self.features, self.features)));
        }
        Ok(())
    }
}

/// Branch switches used for ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Aggregate over self-loops only, so no neighbour information is mixed in.
    #[serde(default)]
    pub gnn_off: bool,
    /// Replace the transformer summary with the last-step spatial features.
    #[serde(default)]
    pub temporal_off: bool,
    /// Replace the external embedding with zeros.
    #[serde(default)]
    pub fusion_off: bool,
}

impl Ablation {
    pub const HYBRID: Ablation = Ablation { gnn_off: false, temporal_off: false, fusion_off: false };
    pub const GNN_OFF: Ablation = Ablation { gnn_off: true, temporal_off: false, fusion_off: false };
    pub const TEMPORAL_OFF: Ablation = Ablation { gnn_off: false, temporal_off: true, fusion_off: false };
    pub const FUSION_OFF: Ablation = Ablation { gnn_off: false, temporal_off: false, fusion_off: true };

    pub fn label(&self) -> &'static str {
        match (self.gnn_off, self.temporal_off, self.fusion_off) {
            (false, false, false) => "hybrid",
            (true, false, false) => "gnn_off",
            (false, true, false) => "temporal_off",
            (false, false, true) => "fusion_off",
            _ => "custom",
        }
    }
}

/// Fully connected embedding of the external vector, `relu(z We + be)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalEmbedder {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ExternalEmbedder {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape("external embedder", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn embed(&self, z: &Tensor) -> Result<Tensor> {
        embed_external(z, self)
    }
}

/// Embeds one external vector `z` of length `M`.
pub fn embed_external(z: &Tensor, embedder: &ExternalEmbedder) -> Result<Tensor> {
    let m = embedder.weight.shape()[0];
    if z.shape() != [m] {
        return Err(Error::shape("embed_external", z.shape(), &[m]));
    }
    let row = z.reshape(&[1, m])?;
    let e = row.matmul(&embedder.weight)?.add_suffix(&embedder.bias)?.relu();
    e.reshape(&[embedder.bias.len()])
}

/// `[h_gnn ⊕ h_tr ⊕ e]`.
pub fn fuse(h_gnn: &Tensor, h_tr: &Tensor, e: &Tensor) -> Result<Tensor> {
    if h_gnn.rank() != 1 || h_tr.rank() != 1 || e.rank() != 1 {
        return Err(Error::InvalidArgument { op: "fuse", msg: "components must be vectors".into() });
    }
    if h_gnn.len() != h_tr.len() {
        return Err(Error::shape("fuse", h_gnn.shape(), h_tr.shape()));
    }
    Tensor::concat(&[h_gnn, h_tr, e], 0)
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub gcn: Vec<GraphConvLayer>,
    /// `[D_s + F, D]` projection of spatial and raw features into the transformer width.
    pub projection: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub external: ExternalEmbedder,
    /// `[2D + D_e, H * F_out]`.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

impl ModelParams {
    /// Seeded initialisation, uniform in `±1/sqrt(fan_in)`; layer norms at gain 1, bias 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let mut gcn = Vec::with_capacity(c.gcn_layers);
        for l in 0..c.gcn_layers {
            let fan_in = if l == 0 { c.features } else { c.d_spatial };
            let w = uniform(&mut rng, &[fan_in, c.d_spatial], fan_in);
            let b = uniform(&mut rng, &[c.d_spatial], fan_in);
            gcn.push(GraphConvLayer::new(w, b, c.gcn_activation)?);
        }
        let projection = uniform(&mut rng, &[c.projection_in(), c.d_model], c.projection_in());
        let d = c.d_model;
        let mut blocks = Vec::with_capacity(c.encoder_blocks);
        for _ in 0..c.encoder_blocks {
            let attn = AttentionParams::new(
                uniform(&mut rng, &[d, d], d),
                uniform(&mut rng, &[d, d], d),
                uniform(&mut rng, &[d, d], d),
                uniform(&mut rng, &[d, d], d),
                c.heads,
            )?;
            let w1 = uniform(&mut rng, &[d, c.d_ff], d);
            let b1 = uniform(&mut rng, &[c.d_ff], d);
            let w2 = uniform(&mut rng, &[c.d_ff, d], c.d_ff);
            let b2 = uniform(&mut rng, &[d], c.d_ff);
            blocks.push(EncoderBlock::new(attn, w1, b1, w2, b2)?);
        }
        let external = ExternalEmbedder::new(
            uniform(&mut rng, &[c.externals, c.d_external], c.externals),
            uniform(&mut rng, &[c.d_external], c.externals),
        )?;
        let out = c.horizon * c.outputs();
        let head_weight = uniform(&mut rng, &[c.fused_dim(), out], c.fused_dim());
        let head_bias = uniform(&mut rng, &[out], c.fused_dim());
        Ok(Self { config: config.clone(), gcn, projection, blocks, external, head_weight, head_bias })
    }

    /// Named parameter groups in a fixed order.
    pub fn census(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.gcn.iter().enumerate() {
            out.push((format!("gcn.{l}.weight"), &layer.weight));
            out.push((format!("gcn.{l}.bias"), &layer.bias));
        }
        out.push(("projection".to_string(), &self.projection));
        for (b, block) in self.blocks.iter().enumerate() {
            let a = &block.attention;
            for (name, t) in [
                ("attn.wq", &a.wq),
                ("attn.wk", &a.wk),
                ("attn.wv", &a.wv),
                ("attn.wo", &a.wo),
                ("ffn.w1", &block.ff_w1),
                ("ffn.b1", &block.ff_b1),
                ("ffn.w2", &block.ff_w2),
                ("ffn.b2", &block.ff_b2),
                ("ln1.gain", &block.ln1_gain),
                ("ln1.bias", &block.ln1_bias),
                ("ln2.gain", &block.ln2_gain),
                ("ln2.bias", &block.ln2_bias),
            ] {
                out.push((format!("temporal.{b}.{name}"), t));
            }
        }
        out.push(("external.weight".to_string(), &self.external.weight));
        out.push(("external.bias".to_string(), &self.external.bias));
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Mutable tensors in [`ModelParams::census`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.gcn {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.projection);
        for block in &mut self.blocks {
            let a = &mut block.attention;
            out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            out.extend([
                &mut block.ff_w1,
                &mut block.ff_b1,
                &mut block.ff_w2,
                &mut block.ff_b2,
                &mut block.ln1_gain,
                &mut block.ln1_bias,
                &mut block.ln2_gain,
                &mut block.ln2_bias,
            ]);
        }
        out.extend([&mut self.external.weight, &mut self.external.bias, &mut self.head_weight, &mut self.head_bias]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.census().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against a fresh initialisation of `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params.census().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!("expected {} parameter tensors, found {}", expected.len(), named.len())));
        }
        for ((slot, (name, shape)), (got_name, tensor)) in params.tensors_mut().into_iter().zip(&expected).zip(named) {
            if *name != got_name || tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("expected `{name}` {shape:?}, found `{got_name}` {:?}", tensor.shape())));
            }
            *slot = tensor;
        }
        Ok(params)
    }

    /// Registers every tensor on `tape` as a parameter.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self.census().into_iter().map(|(_, t)| tape.param(t.clone())).collect();
        ModelVars::from_list(&self.config, &vars)
    }
}

/// [`ModelParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub gcn: Vec<GraphConvVars>,
    pub projection: Var,
    pub blocks: Vec<EncoderBlockVars>,
    pub external_weight: Var,
    pub external_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
    all: Vec<Var>,
}

impl ModelVars {
    fn from_list(config: &ModelConfig, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter list matches the census");
        let gcn = (0..config.gcn_layers)
            .map(|_| GraphConvVars { weight: next(), bias: next(), activation: config.gcn_activation })
            .collect();
        let projection = next();
        let blocks = (0..config.encoder_blocks)
            .map(|_| EncoderBlockVars {
                attention: AttentionVars { wq: next(), wk: next(), wv: next(), wo: next(), heads: config.heads },
                ff_w1: next(),
                ff_b1: next(),
                ff_w2: next(),
                ff_b2: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        Self {
            gcn,
            projection,
            blocks,
            external_weight: next(),
            external_bias: next(),
            head_weight: next(),
            head_bias: next(),
            all: vars.to_vec(),
        }
    }

    /// Vars in census order.
    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

/// A history window: `x` is `[T, N, F]`, `z` is `[T, M]`; `anchor` is the
/// time index of the window's last step.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationWindow {
    pub x: Tensor,
    pub z: Tensor,
    pub anchor: usize,
}

/// Predicted `[H, N, F_out]` tensor, produced at time index `anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub values: Tensor,
    pub horizon: usize,
    pub anchor: usize,
}

/// Batched model inputs: `x` is `[B, T, N, F]`, `z_last` is `[B, M]`
/// (the external vector at each window's last step).
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub z_last: Tensor,
}

impl Batch {
    pub fn from_windows(windows: &[&ObservationWindow]) -> Result<Self> {
        let first = windows.first().ok_or(Error::InvalidArgument { op: "batch", msg: "no windows".into() })?;
        let xs: Vec<&Tensor> = windows.iter().map(|w| &w.x).collect();
        let mut shape = vec![windows.len()];
        shape.extend_from_slice(first.x.shape());
        let x = Tensor::concat(&xs, 0)?.reshape(&shape)?;
        let m = first.z.shape().get(1).copied().unwrap_or(0);
        let mut z = Vec::with_capacity(windows.len() * m);
        for w in windows {
            let t = w.z.shape()[0];
            z.extend_from_slice(&w.z.data()[(t - 1) * m..t * m]);
        }
        Ok(Self { x, z_last: Tensor::from_parts(vec![windows.len(), m], z) })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forward pass result on a tape.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[B, H, N, F_out]`.
    pub prediction: Var,
    /// Attention weights of every encoder block.
    pub attention: Vec<Var>,
}

fn check_batch(config: &ModelConfig, graph: &RoadGraph, batch: &Batch) -> Result<()> {
    let b = batch.len();
    let want = [b, config.window, config.nodes, config.features];
    if batch.x.shape() != want {
        return Err(Error::shape("forward", batch.x.shape(), &want));
    }
    if batch.z_last.shape() != [b, config.externals] {
        return Err(Error::shape("forward", batch.z_last.shape(), &[b, config.externals]));
    }
    if graph.n() != config.nodes {
        return Err(Error::Mismatch(format!("graph has {} nodes, model expects {}", graph.n(), config.nodes)));
    }
    if !batch.x.is_finite() || !batch.z_last.is_finite() {
        return Err(Error::InvalidArgument { op: "forward", msg: "non-finite input".into() });
    }
    Ok(())
}

/// Records the batched forward pass on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    ablation: Ablation,
    graph: &RoadGraph,
    batch: &Batch,
) -> Result<ForwardTrace> {
    check_batch(config, graph, batch)?;
    let (b, t, n, f) = (batch.len(), config.window, config.nodes, config.features);
    let d = config.d_model;

    let isolated;
    let spatial_graph = if ablation.gnn_off {
        isolated = RoadGraph::isolated(n)?;
        &isolated
    } else {
        graph
    };

    // (a) graph convolution on every time slice; the raw features ride along
    // into the projection to D so a node keeps its own signal
    let x = tape.constant(batch.x.clone());
    let x = tape.reshape(x, &[b * t, n, f])?;
    let spatial = gcn_stack(tape, x, spatial_graph, &vars.gcn)?;
    let spatial = tape.concat(&[spatial, x], 2)?;
    let projected = tape.matmul(spatial, vars.projection)?;

    // (c) last-step spatial representation of every node
    let flat = tape.reshape(projected, &[b * t * n, d])?;
    let last_rows: Vec<usize> = (0..b).flat_map(|bi| (0..n).map(move |ni| (bi * t + t - 1) * n + ni)).collect();
    let h_gnn = tape.gather_rows(flat, &last_rows)?;

    // (b) per-node temporal encoding
    let mut attention = Vec::new();
    let h_tr = if ablation.temporal_off {
        h_gnn
    } else {
        let seq = tape.reshape(projected, &[b, t, n, d])?;
        let seq = tape.permute(seq, &[0, 2, 1, 3])?;
        let seq = tape.reshape(seq, &[b * n, t, d])?;
        let out = temporal_encode(tape, seq, &vars.blocks)?;
        attention = out.attention;
        out.summary
    };

    // (d) external embedding, shared by every node of a window
    let e = if ablation.fusion_off {
        tape.constant(Tensor::zeros(&[b, config.d_external]))
    } else {
        let z = tape.constant(batch.z_last.clone());
        let e = tape.matmul(z, vars.external_weight)?;
        let e = tape.add_suffix(e, vars.external_bias)?;
        tape.relu(e)
    };
    let per_node: Vec<usize> = (0..b).flat_map(|bi| std::iter::repeat(bi).take(n)).collect();
    let e = tape.gather_rows(e, &per_node)?;

    // (e) fuse and project to the horizon
    let fused = tape.concat(&[h_gnn, h_tr, e], 1)?;
    let out = tape.matmul(fused, vars.head_weight)?;
    let out = tape.add_suffix(out, vars.head_bias)?;
    let out = tape.reshape(out, &[b, n, config.horizon, config.outputs()])?;
    let prediction = tape.permute(out, &[0, 2, 1, 3])?;
    Ok(ForwardTrace { prediction, attention })
}

/// Batched prediction without gradients: `[B, H, N, F_out]`.
pub fn predict_batch(params: &ModelParams, ablation: Ablation, graph: &RoadGraph, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let trace = forward_on_tape(&mut tape, &vars, &params.config, ablation, graph, batch)?;
    Ok(tape.value(trace.prediction).clone())
}

fn check_window(config: &ModelConfig, window: &ObservationWindow) -> Result<()> {
    let want = [config.window, config.nodes, config.features];
    if window.x.shape() != want {
        return Err(Error::shape("forward", window.x.shape(), &want));
    }
    if window.z.shape() != [config.window, config.externals] {
        return Err(Error::shape("forward", window.z.shape(), &[config.window, config.externals]));
    }
    Ok(())
}

/// Forecast for a single window.
pub fn forward(window: &ObservationWindow, graph: &RoadGraph, params: &ModelParams, ablation: Ablation) -> Result<Forecast> {
    check_window(&params.config, window)?;
    let batch = Batch::from_windows(&[window])?;
    let pred = predict_batch(params, ablation, graph, &batch)?;
    let c = &params.config;
    Ok(Forecast {
        values: pred.reshape(&[c.horizon, c.nodes, c.outputs()])?,
        horizon: c.horizon,
        anchor: window.anchor,
    })
}

/// Mean squared error over the entries where `mask` is 1 (all entries when
/// `mask` is `None`). `prediction`, `target` and `mask` share a shape.
pub fn masked_mse(tape: &mut Tape, prediction: Var, target: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
    if tape.shape(prediction) != target.shape() {
        return Err(Error::shape("loss", tape.shape(prediction), target.shape()));
    }
    let y = tape.constant(target.clone());
    let diff = tape.sub(prediction, y)?;
    let sq = tape.mul(diff, diff)?;
    let (sq, count) = match mask {
        Some(m) => {
            if m.shape() != target.shape() {
                return Err(Error::shape("loss mask", m.shape(), target.shape()));
            }
            let count = m.sum();
            let mv = tape.constant(m.clone());
            (tape.mul(sq, mv)?, count)
        }
        None => (sq, target.len() as f64),
    };
    let total = tape.sum(sq);
    Ok(tape.scale(total, if count > 0.0 { 1.0 / count } else { 0.0 }))
}

/// MSE between the forecast for `window` and `target` (`[H, N, F_out]`).
pub fn predict_loss(
    window: &ObservationWindow,
    target: &Tensor,
    graph: &RoadGraph,
    params: &ModelParams,
    ablation: Ablation,
) -> Result<f64> {
    let c = &params.config;
    check_window(c, window)?;
    let want = [c.horizon, c.nodes, c.outputs()];
    if target.shape() != want {
        return Err(Error::shape("predict_loss", target.shape(), &want));
    }
    let batch = Batch::from_windows(&[window])?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let trace = forward_on_tape(&mut tape, &vars, c, ablation, graph, &batch)?;
    let y = target.reshape(&[1, c.horizon, c.nodes, c.outputs()])?;
    let loss = masked_mse(&mut tape, trace.prediction, &y, None)?;
    Ok(tape.value(loss).item())
}
