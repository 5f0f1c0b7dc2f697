//! CSV formats for traffic records, external features and the road graph.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};

use super::{align_and_impute, AlignReport, Dataset, EXTERNALS, FEATURES};
use crate::error::{Error, Result};
use crate::graph::{csv_error, RoadGraph};

pub const TRAFFIC_FILE: &str = "traffic.csv";
pub const EXTERNAL_FILE: &str = "external.csv";
pub const GRAPH_FILE: &str = "graph.csv";

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";

/// Parses an ISO-8601 local timestamp, truncated to the minute.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    ["%Y-%m-%dT%H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .and_then(|ts| ts.with_second(0))
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

/// One `timestamp,node_id,flow,speed,occupancy` row; `None` marks an empty field.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficRecord {
    pub timestamp: NaiveDateTime,
    pub node: usize,
    pub values: [Option<f64>; 3],
}

/// One row of the external-feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalRecord {
    pub timestamp: NaiveDateTime,
    pub values: [Option<f64>; 5],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawRecords {
    pub nodes: usize,
    pub traffic: Vec<TrafficRecord>,
    pub external: Vec<ExternalRecord>,
}

fn open(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let got: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    if got != header {
        return Err(Error::Parse { path: path.into(), line: 1, msg: format!("expected header `{}`, got `{}`", header.join(","), got.join(",")) });
    }
    Ok(reader)
}

fn parse_optional(path: &Path, line: usize, column: &str, raw: &str) -> Result<Option<f64>> {
    if raw.is_empty() {
        return Ok(None);
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::Parse { path: path.into(), line, msg: format!("`{raw}` is not a finite number in column `{column}`") }),
    }
}

fn parse_row_timestamp(path: &Path, line: usize, raw: &str) -> Result<NaiveDateTime> {
    parse_timestamp(raw).ok_or_else(|| Error::Parse { path: path.into(), line, msg: format!("`{raw}` is not a timestamp") })
}

/// Reads the traffic file; node ids must be below `nodes`.
pub fn read_traffic_csv(path: &Path, nodes: usize) -> Result<Vec<TrafficRecord>> {
    let header = ["timestamp", "node_id", "flow", "speed", "occupancy"];
    let mut reader = open(path, &header)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse { path: path.into(), line, msg: format!("expected {} fields, found {}", header.len(), record.len()) });
        }
        let timestamp = parse_row_timestamp(path, line, &record[0])?;
        let node: usize = record[1]
            .parse()
            .map_err(|_| Error::Parse { path: path.into(), line, msg: format!("`{}` is not a node id", &record[1]) })?;
        if node >= nodes {
            return Err(Error::Parse { path: path.into(), line, msg: format!("unknown node id {node} (graph has {nodes} nodes)") });
        }
        let mut values = [None; 3];
        for (f, v) in values.iter_mut().enumerate() {
            *v = parse_optional(path, line, FEATURES[f], &record[f + 2])?;
        }
        let [flow, speed, occ] = values;
        if flow.is_some_and(|v| v < 0.0) || speed.is_some_and(|v| v < 0.0) || occ.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Parse { path: path.into(), line, msg: "flow and speed must be >= 0 and occupancy in [0, 1]".into() });
        }
        if !seen.insert((timestamp, node)) {
            return Err(Error::Parse { path: path.into(), line, msg: format!("duplicate record for node {node} at {}", format_timestamp(timestamp)) });
        }
        out.push(TrafficRecord { timestamp, node, values });
    }
    Ok(out)
}

pub fn read_external_csv(path: &Path) -> Result<Vec<ExternalRecord>> {
    let mut header = vec!["timestamp"];
    header.extend(EXTERNALS);
    let mut reader = open(path, &header)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse { path: path.into(), line, msg: format!("expected {} fields, found {}", header.len(), record.len()) });
        }
        let timestamp = parse_row_timestamp(path, line, &record[0])?;
        let mut values = [None; 5];
        for (k, v) in values.iter_mut().enumerate() {
            *v = parse_optional(path, line, EXTERNALS[k], &record[k + 1])?;
        }
        for k in super::BINARY_EXTERNALS {
            if values[k].is_some_and(|v| v != 0.0 && v != 1.0) {
                return Err(Error::Parse { path: path.into(), line, msg: format!("`{}` must be 0 or 1", EXTERNALS[k]) });
            }
        }
        if !seen.insert(timestamp) {
            return Err(Error::Parse { path: path.into(), line, msg: format!("duplicate timestamp {}", format_timestamp(timestamp)) });
        }
        out.push(ExternalRecord { timestamp, values });
    }
    Ok(out)
}

/// Loads the graph, then the traffic and external files against it.
pub fn ingest_csv(traffic_path: &Path, external_path: &Path, graph_path: &Path) -> Result<(RoadGraph, RawRecords)> {
    let graph = RoadGraph::read_csv(graph_path, None)?;
    let traffic = read_traffic_csv(traffic_path, graph.n())?;
    let external = read_external_csv(external_path)?;
    let nodes = graph.n();
    Ok((graph, RawRecords { nodes, traffic, external }))
}

fn push_value(out: &mut String, v: f64) {
    // `Display` for f64 prints the shortest string that parses back exactly
    write!(out, "{v}").unwrap();
}

/// Writes observed entries; imputed entries become empty fields.
pub fn write_traffic_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = String::from("timestamp,node_id,flow,speed,occupancy\n");
    for t in 0..dataset.len() {
        let ts = format_timestamp(dataset.grid.timestamp(t));
        for n in 0..dataset.nodes() {
            write!(out, "{ts},{n}").unwrap();
            for f in 0..FEATURES.len() {
                out.push(',');
                if !dataset.is_imputed(t, n, f) {
                    push_value(&mut out, dataset.value(t, n, f));
                }
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_external_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = format!("timestamp,{}\n", EXTERNALS.join(","));
    for t in 0..dataset.len() {
        out.push_str(&format_timestamp(dataset.grid.timestamp(t)));
        for k in 0..EXTERNALS.len() {
            out.push(',');
            push_value(&mut out, dataset.external(t, k));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the three corpus files into `dir`.
pub fn write_corpus(dir: &Path, graph: &RoadGraph, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_traffic_csv(&dir.join(TRAFFIC_FILE), dataset)?;
    write_external_csv(&dir.join(EXTERNAL_FILE), dataset)?;
    graph.write_csv(&dir.join(GRAPH_FILE))
}

/// A loaded corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub graph: RoadGraph,
    pub dataset: Dataset,
    pub report: AlignReport,
}

impl Corpus {
    /// Ingests the three files in `dir` and aligns them to a `step_minutes` grid.
    pub fn load(dir: &Path, step_minutes: u32) -> Result<Self> {
        let (graph, raw) = ingest_csv(&dir.join(TRAFFIC_FILE), &dir.join(EXTERNAL_FILE), &dir.join(GRAPH_FILE))?;
        let (dataset, report) = align_and_impute(&raw, step_minutes)?;
        Ok(Self { graph, dataset, report })
    }
}
