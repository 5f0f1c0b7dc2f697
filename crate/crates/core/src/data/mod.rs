//! Traffic corpora: the synthetic generator, CSV ingestion and export,
//! grid alignment with imputation, normalisation, splits and windowing.

mod align;
mod io;
mod prep;
mod synth;

use chrono::{Duration, NaiveDateTime};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use align::{align_and_impute, AlignReport, MAX_INTERPOLATED_GAP};
pub use io::{
    format_timestamp, ingest_csv, parse_timestamp, read_external_csv, read_traffic_csv, write_corpus, write_external_csv,
    write_traffic_csv, Corpus, ExternalRecord, RawRecords, TrafficRecord, EXTERNAL_FILE, GRAPH_FILE, TRAFFIC_FILE,
};
pub use prep::{chronological_split, make_windows, normalize, NormStats, Sample, SplitRatios, STD_FLOOR};
pub use synth::{generate_synthetic, SynthConfig};

/// Per-node measurement channels, in tensor order.
pub const FEATURES: [&str; 3] = ["flow", "speed", "occupancy"];

/// External context columns, in tensor order.
pub const EXTERNALS: [&str; 5] = ["temperature", "rainfall", "visibility", "is_holiday", "incident"];

/// Externals that are 0/1 flags and are never rescaled.
pub const BINARY_EXTERNALS: [usize; 2] = [3, 4];

/// Index of the holiday flag in the external vector.
pub const HOLIDAY: usize = 3;

/// A regular time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeGrid {
    pub start: NaiveDateTime,
    pub step_minutes: u32,
    pub len: usize,
}

impl TimeGrid {
    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + Duration::minutes(i as i64 * self.step_minutes as i64)
    }

    /// Steps per day; the step length must divide a day.
    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.step_minutes) as usize
    }

    /// Position of step `i` within its day.
    pub fn slot_of_day(&self, i: usize) -> usize {
        let ts = self.timestamp(i);
        let minutes = ts.time().signed_duration_since(chrono::NaiveTime::MIN).num_minutes() as usize;
        minutes / self.step_minutes as usize
    }
}

/// Aligned observations: `values` is `[L, N, F]`, `externals` is `[L, M]`,
/// and `imputed[i]` marks entries of `values` that no raw record supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: TimeGrid,
    pub values: Tensor,
    pub externals: Tensor,
    pub imputed: Vec<bool>,
}

impl Dataset {
    pub fn new(grid: TimeGrid, values: Tensor, externals: Tensor, imputed: Vec<bool>) -> Result<Self> {
        if values.rank() != 3 || values.shape()[0] != grid.len || values.shape()[2] != FEATURES.len() {
            return Err(Error::Data(format!("values must be [{}, N, {}], got {:?}", grid.len, FEATURES.len(), values.shape())));
        }
        if externals.shape() != [grid.len, EXTERNALS.len()] {
            return Err(Error::Data(format!("externals must be [{}, {}], got {:?}", grid.len, EXTERNALS.len(), externals.shape())));
        }
        if imputed.len() != values.len() {
            return Err(Error::Data("imputation mask does not match values".into()));
        }
        if grid.step_minutes == 0 || 1440 % grid.step_minutes != 0 {
            return Err(Error::Data(format!("step of {} minutes does not divide a day", grid.step_minutes)));
        }
        Ok(Self { grid, values, externals, imputed })
    }

    pub fn len(&self) -> usize {
        self.grid.len
    }

    pub fn is_empty(&self) -> bool {
        self.grid.len == 0
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn value(&self, t: usize, node: usize, feature: usize) -> f64 {
        self.values.data()[(t * self.nodes() + node) * FEATURES.len() + feature]
    }

    pub fn external(&self, t: usize, k: usize) -> f64 {
        self.externals.data()[t * EXTERNALS.len() + k]
    }

    pub fn is_imputed(&self, t: usize, node: usize, feature: usize) -> bool {
        self.imputed[(t * self.nodes() + node) * FEATURES.len() + feature]
    }

    /// Largest elementwise difference to `other`, or `None` when the grids,
    /// shapes or masks differ.
    pub fn max_abs_diff(&self, other: &Dataset) -> Option<f64> {
        if self.grid != other.grid || self.values.shape() != other.values.shape() || self.imputed != other.imputed {
            return None;
        }
        let diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        Some(diff(&self.values, &other.values).max(diff(&self.externals, &other.externals)))
    }
}
