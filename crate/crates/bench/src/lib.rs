//! Fixtures shared by the benchmarks.

use stflow_core::data::{chronological_split, generate_synthetic, make_windows, normalize, Sample, SynthConfig};
use stflow_core::model::Batch;
use stflow_core::{ModelConfig, ModelParams, RoadGraph, Tensor};

/// A 4x4-grid corpus, its first `count` training windows and freshly
/// initialised parameters.
pub struct Fixture {
    pub graph: RoadGraph,
    pub params: ModelParams,
    pub samples: Vec<Sample>,
}

impl Fixture {
    pub fn new(config: &ModelConfig, count: usize) -> Self {
        let synth = SynthConfig { days: 2, holidays: vec![1], ..SynthConfig::default() };
        let (graph, dataset) = generate_synthetic(&synth).expect("synthetic corpus");
        let [train, _, _] = chronological_split(dataset.len(), Default::default()).expect("split");
        let (norm, _) = normalize(&dataset, train.clone()).expect("normalise");
        let mut samples = make_windows(&norm, train, config.window, config.horizon, 1, &config.targets).expect("windows");
        samples.truncate(count);
        let params = ModelParams::init(config, 0).expect("init");
        Self { graph, params, samples }
    }

    pub fn batch(&self) -> Batch {
        let windows: Vec<_> = self.samples.iter().map(|s| &s.window).collect();
        Batch::from_windows(&windows).expect("batch")
    }

    /// Stacked targets and masks, `[B, H, N, F_out]`.
    pub fn targets(&self) -> (Tensor, Tensor) {
        let stack = |f: fn(&Sample) -> &Tensor| {
            let mut shape = vec![self.samples.len()];
            shape.extend_from_slice(f(&self.samples[0]).shape());
            let data = self.samples.iter().flat_map(|s| f(s).data().iter().copied()).collect();
            Tensor::new(shape, data).expect("stack")
        };
        (stack(|s| &s.target), stack(|s| &s.mask))
    }
}

/// Deterministic pseudo-random matrix in `[-1, 1)`.
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..rows * cols)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("matrix")
}
