//! The run configuration: one TOML file with a section per module, plus flag
//! overrides. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stflow_core::data::{SplitRatios, SynthConfig, EXTERNALS, FEATURES};
use stflow_core::graph::Activation;
use stflow_core::training::TrainConfig;
use stflow_core::ModelConfig;

use crate::CliError;

/// Model dimensions that are not fixed by the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub window: usize,
    pub horizon: usize,
    /// Forecast feature indices: 0 flow, 1 speed, 2 occupancy.
    pub targets: Vec<usize>,
    pub d_model: usize,
    pub d_spatial: usize,
    pub d_external: usize,
    pub d_ff: usize,
    pub gcn_layers: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub gcn_activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            window: m.window,
            horizon: m.horizon,
            targets: m.targets,
            d_model: m.d_model,
            d_spatial: m.d_spatial,
            d_external: m.d_external,
            d_ff: m.d_ff,
            gcn_layers: m.gcn_layers,
            encoder_blocks: m.encoder_blocks,
            heads: m.heads,
            gcn_activation: m.gcn_activation,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, nodes: usize) -> ModelConfig {
        ModelConfig {
            nodes,
            features: FEATURES.len(),
            window: self.window,
            horizon: self.horizon,
            externals: EXTERNALS.len(),
            targets: self.targets.clone(),
            d_model: self.d_model,
            d_spatial: self.d_spatial,
            d_external: self.d_external,
            d_ff: self.d_ff,
            gcn_layers: self.gcn_layers,
            encoder_blocks: self.encoder_blocks,
            heads: self.heads,
            gcn_activation: self.gcn_activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Corpus directory holding traffic.csv, external.csv and graph.csv.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub step_minutes: u32,
    /// Step between consecutive training windows; validation and test use 1.
    pub stride: usize,
    pub split: SplitRatios,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: None, step_minutes: 5, stride: 1, split: SplitRatios::default() }
    }
}

/// Desk-scale model used by `gradcheck`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub d_spatial: usize,
    pub d_external: usize,
    pub d_ff: usize,
    pub gcn_layers: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub gcn_activation: Activation,
    pub eps: f64,
    pub tol: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            rows: 2,
            cols: 2,
            window: 4,
            horizon: 2,
            d_model: 4,
            d_spatial: 4,
            d_external: 4,
            d_ff: 8,
            gcn_layers: 2,
            encoder_blocks: 2,
            heads: 2,
            gcn_activation: Activation::Relu,
            eps: 1e-5,
            tol: 1e-4,
        }
    }
}

impl GradCheckSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            nodes: self.rows * self.cols,
            features: FEATURES.len(),
            window: self.window,
            horizon: self.horizon,
            externals: EXTERNALS.len(),
            targets: vec![0],
            d_model: self.d_model,
            d_spatial: self.d_spatial,
            d_external: self.d_external,
            d_ff: self.d_ff,
            gcn_layers: self.gcn_layers,
            encoder_blocks: self.encoder_blocks,
            heads: self.heads,
            gcn_activation: self.gcn_activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub address: String,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { address: "127.0.0.1:7878".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The only seed: generation, initialisation and shuffling derive from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub gradcheck: GradCheckSection,
    pub serve: ServeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 42,
            synth: SynthConfig::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            gradcheck: GradCheckSection::default(),
            serve: ServeSection::default(),
        };
        cfg.set_seed(42);
        cfg
    }
}

fn invalid(field: &str, msg: impl Into<String>) -> CliError {
    CliError::Input(format!("invalid configuration: {field}: {}", msg.into()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Input(format!("config: {}", e.message())))?;
        if table.get("synth").and_then(|s| s.get("seed")).is_some() {
            return Err(invalid("synth.seed", "set the top-level `seed` instead"));
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Input(format!("config: {}", e.message())))?;
        let seed = cfg.seed;
        cfg.set_seed(seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Input(msg) => CliError::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The file at `path`, or the defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serialises");
        // mirrors the top-level seed and is not accepted on input
        if let Some(toml::Value::Table(synth)) = table.get_mut("synth") {
            synth.remove("seed");
        }
        toml::to_string(&table).expect("config serialises")
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.train.validate()?;
        self.model.model_config(1).validate()?;
        self.gradcheck.model_config().validate().map_err(|e| CliError::Input(e.to_string().replace("model.", "gradcheck.")))?;
        let d = &self.data;
        if d.step_minutes == 0 || 1440 % d.step_minutes != 0 {
            return Err(invalid("data.step_minutes", "must divide a day"));
        }
        if d.stride == 0 {
            return Err(invalid("data.stride", "must be at least 1"));
        }
        let s = d.split;
        if !(s.train > 0.0 && s.val > 0.0 && s.test > 0.0 && (s.train + s.val + s.test - 1.0).abs() < 1e-9) {
            return Err(invalid("data.split", "fractions must be positive and sum to 1"));
        }
        let g = &self.gradcheck;
        if g.rows * g.cols == 0 {
            return Err(invalid("gradcheck.rows", "grid needs at least one node"));
        }
        if !(g.eps > 0.0 && g.eps.is_finite()) {
            return Err(invalid("gradcheck.eps", "must be positive"));
        }
        if !(g.tol > 0.0) {
            return Err(invalid("gradcheck.tol", "must be positive"));
        }
        if self.serve.address.parse::<std::net::SocketAddr>().is_err() {
            return Err(invalid("serve.address", format!("`{}` is not host:port", self.serve.address)));
        }
        Ok(())
    }
}
