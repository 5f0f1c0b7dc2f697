//! Road network and the graph-convolution layer.
//!
//! Neighbour sets are in-neighbours plus the node itself, so information flows
//! from upstream segments to the downstream node. Each retained pair `(i, j)`
//! is scaled by `1 / c_ij` with `c_ij = sqrt(|N(i)| * |N(j)|)`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    coeffs: Tensor,
    propagation: Tensor,
}

impl RoadGraph {
    /// Builds the graph from directed `(src, dst)` pairs.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Graph("a road graph needs at least one node".into()));
        }
        let mut seen = BTreeSet::new();
        for &(s, d) in edges {
            if s >= n || d >= n {
                return Err(Error::Graph(format!("edge ({s},{d}) has an endpoint outside [0, {n})")));
            }
            if !seen.insert((s, d)) {
                return Err(Error::Graph(format!("duplicate edge ({s},{d})")));
            }
        }
        let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        for &(s, d) in edges {
            sets[d].insert(s);
        }
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let coeffs = norm_coeffs(n, &neighbors);
        let propagation = coeffs.map(|c| if c > 0.0 { 1.0 / c } else { 0.0 });
        Ok(Self { n, edges: edges.to_vec(), neighbors, coeffs, propagation })
    }

    /// Graph with no edges: every node only sees itself.
    pub fn isolated(n: usize) -> Result<Self> {
        Self::new(n, &[])
    }

    /// Bidirectional 4-neighbourhood grid, nodes numbered row-major.
    pub fn grid_edges(rows: usize, cols: usize) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                    edges.push((i + 1, i));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                    edges.push((i + cols, i));
                }
            }
        }
        edges
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `N(i)`, sorted ascending; always contains `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `c_ij` for `j in N(i)`, zero elsewhere.
    pub fn coeffs(&self) -> &Tensor {
        &self.coeffs
    }

    /// Dense aggregation matrix with entries `1 / c_ij`.
    pub fn propagation(&self) -> &Tensor {
        &self.propagation
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        Self::new(self.n, &edges)
    }

    /// Reads a `src,dst` CSV. The node count is `max id + 1` unless given.
    pub fn read_csv(path: &Path, n: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["src", "dst"] {
            return Err(Error::Parse { path: path.into(), line: 1, msg: format!("expected header `src,dst`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")) });
        }
        let mut edges = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| csv_error(path, e))?;
            let field = |k: usize| -> Result<usize> {
                record
                    .get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Parse { path: path.into(), line, msg: format!("bad node id in column {}", k + 1) })
            };
            edges.push((field(0)?, field(1)?));
        }
        let inferred = edges.iter().map(|&(s, d)| s.max(d) + 1).max().unwrap_or(0);
        let n = n.unwrap_or(inferred);
        Self::new(n, &edges).map_err(|e| match e {
            Error::Graph(msg) => Error::Graph(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("src,dst\n");
        for &(s, d) in &self.edges {
            out.push_str(&format!("{s},{d}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse { path: path.into(), line, msg: format!("{kind:?}") },
    }
}

/// Symmetric degree normalisation over the self-looped neighbour sets.
fn norm_coeffs(n: usize, neighbors: &[Vec<usize>]) -> Tensor {
    let mut c = Tensor::zeros(&[n, n]);
    for (i, ns) in neighbors.iter().enumerate() {
        for &j in ns {
            c.data_mut()[i * n + j] = ((ns.len() * neighbors[j].len()) as f64).sqrt();
        }
    }
    c
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Learnable weights of one graph-convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// A [`GraphConvLayer`] whose tensors live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphConvVars {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

impl GraphConvLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape("graph_conv layer", weight.shape(), bias.shape()));
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::InvalidArgument { op: "graph_conv layer", msg: "weights must be finite".into() });
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> GraphConvVars {
        GraphConvVars {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
            activation: self.activation,
        }
    }

    /// Evaluates the layer on `h` (`[N, F_in]` or `[G, N, F_in]`) without gradients.
    pub fn apply(&self, h: &Tensor, graph: &RoadGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let vars = self.bind(&mut tape);
        let y = graph_conv(&mut tape, x, graph, &vars)?;
        Ok(tape.value(y).clone())
    }
}

/// `h_i' = act( sum_{j in N(i)} (1 / c_ij) h_j W + b )` for every node at once.
///
/// `h` is `[N, F_in]` or a batch `[G, N, F_in]` of node-feature matrices.
pub fn graph_conv(tape: &mut Tape, h: Var, graph: &RoadGraph, layer: &GraphConvVars) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let w_shape = tape.shape(layer.weight).to_vec();
    let nodes_axis = match shape.len() {
        2 => 0,
        3 => 1,
        _ => return Err(Error::InvalidArgument { op: "graph_conv", msg: format!("expected [N, F] or [G, N, F], got {shape:?}") }),
    };
    if shape[nodes_axis] != graph.n() {
        return Err(Error::shape("graph_conv", &shape, &[graph.n()]));
    }
    if shape[shape.len() - 1] != w_shape[0] {
        return Err(Error::shape("graph_conv", &shape, &w_shape));
    }
    let hw = tape.matmul(h, layer.weight)?;
    let prop = tape.constant(graph.propagation().clone());
    let agg = tape.matmul(prop, hw)?;
    let z = tape.add_suffix(agg, layer.bias)?;
    Ok(layer.activation.apply(tape, z))
}

/// Applies layers in order; an empty stack is the identity.
pub fn gcn_stack(tape: &mut Tape, h: Var, graph: &RoadGraph, layers: &[GraphConvVars]) -> Result<Var> {
    let mut x = h;
    for (i, layer) in layers.iter().enumerate() {
        let in_dim = *tape.shape(x).last().unwrap_or(&0);
        let w_in = tape.shape(layer.weight)[0];
        if in_dim != w_in {
            return Err(Error::InvalidArgument {
                op: "gcn_stack",
                msg: format!("layer {i} expects {w_in} input features, got {in_dim}"),
            });
        }
        x = graph_conv(tape, x, graph, layer)?;
    }
    Ok(x)
}
