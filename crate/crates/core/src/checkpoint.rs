//! JSON checkpoints holding everything inference needs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, SplitRatios};
use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::model::{Ablation, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const FORMAT: &str = "stflow-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

/// A trained model with its graph, normalisation and provenance settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub norm: NormStats,
    pub graph: GraphSpec,
    pub step_minutes: u32,
    pub seed: u64,
    pub split: SplitRatios,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(params: &ModelParams, ablation: Ablation, norm: NormStats, graph: &RoadGraph, step_minutes: u32, seed: u64, split: SplitRatios) -> Self {
        let params_out = params
            .census()
            .into_iter()
            .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        Self {
            format: FORMAT.into(),
            model: params.config.clone(),
            ablation,
            norm,
            graph: GraphSpec { nodes: graph.n(), edges: graph.edges().to_vec() },
            step_minutes,
            seed,
            split,
            params: params_out,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        let named = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone()).map_err(|e| Error::Checkpoint(format!("`{}`: {e}", p.name)))?)))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_named(&self.model, named)
    }

    pub fn graph(&self) -> Result<RoadGraph> {
        RoadGraph::new(self.graph.nodes, &self.graph.edges)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", ckpt.format)));
        }
        ckpt.model.validate()?;
        if ckpt.norm.nodes != ckpt.model.nodes || ckpt.graph.nodes != ckpt.model.nodes {
            return Err(Error::Checkpoint("node counts of model, graph and statistics disagree".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
