//! Snapping raw records onto a regular grid and filling the holes.

use chrono::{NaiveDateTime, NaiveTime};

use super::{Dataset, RawRecords, TimeGrid, BINARY_EXTERNALS, EXTERNALS, FEATURES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaps up to this many steps are interpolated linearly; longer ones are forward-filled.
pub const MAX_INTERPOLATED_GAP: usize = 3;

/// Bookkeeping from [`align_and_impute`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignReport {
    /// Records that landed on an already filled grid cell (last write wins).
    pub conflicts: usize,
    /// Traffic entries filled by imputation.
    pub imputed: usize,
    /// External rows outside the traffic time span.
    pub dropped_external: usize,
}

/// Fills `None` entries: leading gaps take the first observed value, short
/// interior gaps are interpolated (when `linear`), everything else is
/// forward-filled. An entirely empty series becomes zeros.
pub(crate) fn impute_series(series: &[Option<f64>], linear: bool) -> Vec<f64> {
    let Some(first) = series.iter().position(Option::is_some) else {
        return vec![0.0; series.len()];
    };
    let mut out = vec![0.0; series.len()];
    let first_value = series[first].unwrap();
    out[..first].fill(first_value);
    let mut last = first;
    out[first] = first_value;
    for i in first + 1..series.len() {
        let Some(v) = series[i] else { continue };
        let gap = i - last - 1;
        let v0 = out[last];
        for k in 1..=gap {
            out[last + k] = if linear && gap <= MAX_INTERPOLATED_GAP { v0 + (v - v0) * k as f64 / (gap + 1) as f64 } else { v0 };
        }
        out[i] = v;
        last = i;
    }
    let tail = out[last];
    out[last + 1..].fill(tail);
    out
}

fn minutes_since(base: NaiveDateTime, ts: NaiveDateTime) -> i64 {
    ts.signed_duration_since(base).num_minutes()
}

/// Nearest grid index, rounding half-way points up.
fn snap(minutes: i64, step: i64) -> i64 {
    (2 * minutes + step).div_euclid(2 * step)
}

/// Builds a gap-free [`Dataset`] on a `step_minutes` grid whose points are
/// multiples of the step since midnight.
pub fn align_and_impute(raw: &RawRecords, step_minutes: u32) -> Result<(Dataset, AlignReport)> {
    if step_minutes == 0 || 1440 % step_minutes != 0 {
        return Err(Error::Data(format!("step of {step_minutes} minutes does not divide a day")));
    }
    let first = raw.traffic.iter().map(|r| r.timestamp).min().ok_or_else(|| Error::Data("no traffic records".into()))?;
    let step = step_minutes as i64;
    let base = first.date().and_time(NaiveTime::MIN);
    let offset = snap(minutes_since(base, first), step);
    let index = |ts: NaiveDateTime| snap(minutes_since(base, ts), step) - offset;
    let len = raw.traffic.iter().map(|r| index(r.timestamp)).max().unwrap() as usize + 1;
    let grid = TimeGrid { start: base + chrono::Duration::minutes(offset * step), step_minutes, len };

    let n = raw.nodes;
    let f = FEATURES.len();
    let mut report = AlignReport::default();
    let mut cells: Vec<Option<f64>> = vec![None; len * n * f];
    let mut touched = vec![false; len * n];
    for r in &raw.traffic {
        let t = index(r.timestamp) as usize;
        if std::mem::replace(&mut touched[t * n + r.node], true) {
            report.conflicts += 1;
        }
        for (k, v) in r.values.iter().enumerate() {
            cells[(t * n + r.node) * f + k] = *v;
        }
    }
    let imputed: Vec<bool> = cells.iter().map(Option::is_none).collect();
    report.imputed = imputed.iter().filter(|&&m| m).count();
    let mut values = vec![0.0; len * n * f];
    for node in 0..n {
        for k in 0..f {
            let series: Vec<Option<f64>> = (0..len).map(|t| cells[(t * n + node) * f + k]).collect();
            for (t, v) in impute_series(&series, true).into_iter().enumerate() {
                values[(t * n + node) * f + k] = v;
            }
        }
    }

    let m = EXTERNALS.len();
    let mut ext_cells: Vec<Option<f64>> = vec![None; len * m];
    let mut ext_touched = vec![false; len];
    for r in &raw.external {
        let t = index(r.timestamp);
        if t < 0 || t as usize >= len {
            report.dropped_external += 1;
            continue;
        }
        let t = t as usize;
        if std::mem::replace(&mut ext_touched[t], true) {
            report.conflicts += 1;
        }
        for (k, v) in r.values.iter().enumerate() {
            ext_cells[t * m + k] = *v;
        }
    }
    let mut externals = vec![0.0; len * m];
    for k in 0..m {
        let series: Vec<Option<f64>> = (0..len).map(|t| ext_cells[t * m + k]).collect();
        let linear = !BINARY_EXTERNALS.contains(&k);
        for (t, v) in impute_series(&series, linear).into_iter().enumerate() {
            externals[t * m + k] = v;
        }
    }

    let dataset = Dataset::new(grid, Tensor::new(vec![len, n, f], values)?, Tensor::new(vec![len, m], externals)?, imputed)?;
    Ok((dataset, report))
}

#[cfg(test)]
mod tests {
    use super::super::{parse_timestamp, ExternalRecord, TrafficRecord};
    use super::*;

    fn rec(minute: i64, node: usize, flow: Option<f64>) -> TrafficRecord {
        let ts = parse_timestamp("2024-01-01T00:00").unwrap() + chrono::Duration::minutes(minute);
        TrafficRecord { timestamp: ts, node, values: [flow, Some(50.0), Some(0.1)] }
    }

    fn raw(traffic: Vec<TrafficRecord>) -> RawRecords {
        let external = vec![ExternalRecord { timestamp: traffic[0].timestamp, values: [Some(1.0); 5] }];
        RawRecords { nodes: 1, traffic, external }
    }

    fn flows(d: &Dataset) -> Vec<f64> {
        (0..d.len()).map(|t| d.value(t, 0, 0)).collect()
    }

    #[test]
    fn full_input_is_unchanged() {
        let r = raw((0..4).map(|t| rec(5 * t, 0, Some(t as f64))).collect());
        let (d, report) = align_and_impute(&r, 5).unwrap();
        assert_eq!(flows(&d), [0.0, 1.0, 2.0, 3.0]);
        assert!(d.imputed.iter().all(|&m| !m));
        assert_eq!(report, AlignReport::default());
    }

    #[test]
    fn single_gap_is_interpolated() {
        let r = raw(vec![rec(0, 0, Some(10.0)), rec(5, 0, None), rec(10, 0, Some(20.0))]);
        let (d, _) = align_and_impute(&r, 5).unwrap();
        assert_eq!(flows(&d), [10.0, 15.0, 20.0]);
        assert!(d.is_imputed(1, 0, 0));
        assert!(!d.is_imputed(1, 0, 1));
    }

    #[test]
    fn long_gap_is_forward_filled() {
        let r = raw(vec![rec(0, 0, Some(7.0)), rec(55, 0, Some(30.0))]);
        let (d, report) = align_and_impute(&r, 5).unwrap();
        let f = flows(&d);
        assert_eq!(f.len(), 12);
        assert!(f[1..11].iter().all(|&v| v == 7.0));
        assert!((1..11).all(|t| d.is_imputed(t, 0, 0)));
        assert_eq!(report.imputed, 30);
    }

    #[test]
    fn gap_of_three_interpolates_and_four_fills() {
        let series = [Some(0.0), None, None, None, Some(4.0), None, None, None, None, Some(9.0), None];
        let out = impute_series(&series, true);
        assert_eq!(out, [0.0, 1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0, 4.0, 9.0, 9.0]);
        assert_eq!(impute_series(&[None, None, Some(2.0)], true), [2.0, 2.0, 2.0]);
        assert_eq!(impute_series(&[None, None], true), [0.0, 0.0]);
        assert_eq!(impute_series(&[Some(0.0), None, Some(1.0)], false), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn snapping_and_conflicts() {
        let r = raw(vec![rec(1, 0, Some(1.0)), rec(4, 0, Some(2.0)), rec(6, 0, Some(3.0)), rec(11, 0, Some(4.0))]);
        let (d, report) = align_and_impute(&r, 5).unwrap();
        assert_eq!(super::super::format_timestamp(d.grid.start), "2024-01-01T00:00");
        // 00:04 and 00:06 both snap to 00:05; the later row wins
        assert_eq!(flows(&d), [1.0, 3.0, 4.0]);
        assert_eq!(report.conflicts, 1);
    }

    #[test]
    fn mask_marks_exactly_the_missing_cells() {
        let traffic = vec![rec(0, 0, Some(1.0)), rec(5, 1, Some(2.0)), rec(10, 0, None), rec(10, 1, Some(3.0))];
        let mut r = raw(traffic);
        r.nodes = 2;
        let (d, _) = align_and_impute(&r, 5).unwrap();
        let missing_nodes = [(0, 1), (1, 0)];
        for t in 0..3 {
            for n in 0..2 {
                let absent = missing_nodes.contains(&(t, n));
                assert_eq!(d.is_imputed(t, n, 1), absent, "t={t} n={n}");
                assert_eq!(d.is_imputed(t, n, 0), absent || (t, n) == (2, 0));
            }
        }
    }

    #[test]
    fn empty_records_error() {
        assert!(align_and_impute(&RawRecords { nodes: 1, ..Default::default() }, 5).is_err());
    }
}
