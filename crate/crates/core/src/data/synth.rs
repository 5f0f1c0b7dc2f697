//! Synthetic road-network corpus with daily periodicity, spatial coupling,
//! accidents, rain and holidays.

use chrono::{Datelike, Duration, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{parse_timestamp, Dataset, TimeGrid, EXTERNALS, FEATURES};
use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    /// Random directed edges added on top of the bidirectional grid.
    pub extra_edges: usize,
    pub days: usize,
    pub step_minutes: u32,
    /// First timestamp, `YYYY-MM-DDTHH:MM`.
    pub start: String,
    /// Range of the per-node base flow `a_i` (vehicles per interval).
    pub base_flow: [f64; 2],
    /// Range of the per-node daily amplitude `b_i`.
    pub amplitude: [f64; 2],
    /// Range of the per-node phase, in hours.
    pub phase_hours: [f64; 2],
    pub weekend_scale: f64,
    /// Day offsets from `start` that are public holidays.
    pub holidays: Vec<usize>,
    pub holiday_scale: f64,
    /// Standard deviation of the flow noise.
    pub noise_sigma: f64,
    /// Per-step probability that an accident starts.
    pub accident_rate: f64,
    /// Accident duration range in steps.
    pub accident_duration: [usize; 2],
    pub accident_severity: [f64; 2],
    /// Per-step probability that rain starts while dry.
    pub rain_probability: f64,
    /// Rain duration range in steps.
    pub rain_duration: [usize; 2],
    pub rain_flow_scale: f64,
    /// Stationary standard deviation of a demand wave travelling west to east
    /// across the grid columns; 0 disables it.
    pub wave_sigma: f64,
    /// Per-step autocorrelation of the wave.
    pub wave_rho: f64,
    /// Steps the wave needs to advance one column.
    pub wave_lag: usize,
    /// Speed at zero utilisation, km/h.
    pub free_flow_speed: f64,
    /// Flow per interval at full utilisation.
    pub capacity: f64,
    /// Occupancy is `flow / (speed * jam_constant)`.
    pub jam_constant: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            extra_edges: 4,
            days: 14,
            step_minutes: 5,
            start: "2024-01-03T00:00".into(),
            base_flow: [60.0, 140.0],
            amplitude: [20.0, 60.0],
            phase_hours: [4.0, 10.0],
            weekend_scale: 0.7,
            holidays: vec![5, 12],
            holiday_scale: 0.5,
            noise_sigma: 5.0,
            accident_rate: 0.002,
            accident_duration: [6, 24],
            accident_severity: [0.3, 0.7],
            rain_probability: 0.003,
            rain_duration: [12, 48],
            rain_flow_scale: 0.8,
            wave_sigma: 15.0,
            wave_rho: 0.9,
            wave_lag: 2,
            free_flow_speed: 90.0,
            capacity: 200.0,
            jam_constant: 8.0,
            seed: 42,
        }
    }
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!("synth.{field}"), msg))
    }
}

impl SynthConfig {
    pub fn nodes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        check(self.rows >= 1 && self.cols >= 1, "rows", "grid needs at least one row and column")?;
        check(self.days >= 1, "days", "must be at least 1")?;
        check(self.step_minutes > 0 && 1440 % self.step_minutes == 0, "step_minutes", "must divide a day")?;
        check(parse_timestamp(&self.start).is_some(), "start", "must look like YYYY-MM-DDTHH:MM")?;
        let n = self.nodes();
        check(self.extra_edges <= n * (n - 1) - 2 * (self.rows * (self.cols - 1) + self.cols * (self.rows - 1)), "extra_edges", "more edges than the graph can hold")?;
        for (field, [lo, hi]) in [("base_flow", self.base_flow), ("amplitude", self.amplitude), ("phase_hours", self.phase_hours)] {
            check(lo.is_finite() && hi.is_finite() && lo <= hi, field, "needs finite lo <= hi")?;
        }
        check(self.base_flow[0] >= 0.0 && self.amplitude[0] >= 0.0, "base_flow", "flows must be non-negative")?;
        check(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0, "noise_sigma", "must be >= 0")?;
        check(self.wave_sigma.is_finite() && self.wave_sigma >= 0.0, "wave_sigma", "must be >= 0")?;
        check((0.0..1.0).contains(&self.wave_rho), "wave_rho", "must lie in [0, 1)")?;
        for (field, v) in [
            ("accident_rate", self.accident_rate),
            ("rain_probability", self.rain_probability),
            ("rain_flow_scale", self.rain_flow_scale),
            ("weekend_scale", self.weekend_scale),
            ("holiday_scale", self.holiday_scale),
        ] {
            check((0.0..=1.0).contains(&v), field, "must lie in [0, 1]")?;
        }
        let [s0, s1] = self.accident_severity;
        check((0.0..=1.0).contains(&s0) && (0.0..=1.0).contains(&s1) && s0 <= s1, "accident_severity", "needs 0 <= lo <= hi <= 1")?;
        for (field, [lo, hi]) in [("accident_duration", self.accident_duration), ("rain_duration", self.rain_duration)] {
            check(lo >= 1 && lo <= hi, field, "needs 1 <= lo <= hi")?;
        }
        for (field, v) in [("free_flow_speed", self.free_flow_speed), ("capacity", self.capacity), ("jam_constant", self.jam_constant)] {
            check(v.is_finite() && v > 0.0, field, "must be positive")?;
        }
        check(self.holidays.iter().all(|&d| d < self.days), "holidays", "day offsets must fall inside the generated range")
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Generates a corpus; identical configs give bit-identical output.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(RoadGraph, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.nodes();

    let mut edges = RoadGraph::grid_edges(cfg.rows, cfg.cols);
    let mut added = 0;
    while added < cfg.extra_edges {
        let (s, d) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if s != d && !edges.contains(&(s, d)) {
            edges.push((s, d));
            added += 1;
        }
    }
    let graph = RoadGraph::new(n, &edges)?;

    let start = parse_timestamp(&cfg.start).expect("validated");
    let grid = TimeGrid { start, step_minutes: cfg.step_minutes, len: cfg.days * (1440 / cfg.step_minutes) as usize };
    let spd = grid.steps_per_day();
    let len = grid.len;
    let steps_per_hour = 60.0 / cfg.step_minutes as f64;

    let base: Vec<f64> = (0..n).map(|_| uniform(&mut rng, cfg.base_flow)).collect();
    let amp: Vec<f64> = (0..n).map(|_| uniform(&mut rng, cfg.amplitude)).collect();
    let phase: Vec<f64> = (0..n).map(|_| uniform(&mut rng, cfg.phase_hours) * steps_per_hour).collect();

    let is_holiday: Vec<bool> = (0..cfg.days).map(|d| cfg.holidays.contains(&d)).collect();
    let day_scale: Vec<f64> = (0..cfg.days)
        .map(|d| {
            let weekday = (start + Duration::days(d as i64)).weekday();
            if is_holiday[d] {
                cfg.holiday_scale
            } else if matches!(weekday, Weekday::Sat | Weekday::Sun) {
                cfg.weekend_scale
            } else {
                1.0
            }
        })
        .collect();

    // AR(1) wave, started from its stationary law, reaching column c after c * wave_lag steps
    let delay = (cfg.cols - 1) * cfg.wave_lag;
    let mut wave = vec![0.0; len + delay];
    if cfg.wave_sigma > 0.0 {
        let innovation = Normal::new(0.0, cfg.wave_sigma * (1.0 - cfg.wave_rho * cfg.wave_rho).sqrt()).map_err(|e| Error::config("synth.wave_sigma", e.to_string()))?;
        wave[0] = Normal::new(0.0, cfg.wave_sigma).map_err(|e| Error::config("synth.wave_sigma", e.to_string()))?.sample(&mut rng);
        for k in 1..wave.len() {
            wave[k] = cfg.wave_rho * wave[k - 1] + innovation.sample(&mut rng);
        }
    }

    // latent demand, then one smoothing pass over in-neighbours
    let mut demand = vec![0.0; len * n];
    for t in 0..len {
        let scale = day_scale[t / spd];
        for i in 0..n {
            let angle = 2.0 * std::f64::consts::PI * (t as f64 - phase[i]) / spd as f64;
            let w = wave[t + delay - (i % cfg.cols) * cfg.wave_lag];
            demand[t * n + i] = scale * (base[i] + amp[i] * angle.sin() + w);
        }
    }
    let mut smoothed = demand.clone();
    for t in 0..len {
        for i in 0..n {
            let others: Vec<usize> = graph.neighbors(i).iter().copied().filter(|&j| j != i).collect();
            if !others.is_empty() {
                let mean = others.iter().map(|&j| demand[t * n + j]).sum::<f64>() / others.len() as f64;
                smoothed[t * n + i] = 0.7 * demand[t * n + i] + 0.3 * mean;
            }
        }
    }

    // events
    let mut severity = vec![0.0f64; len * n];
    let mut incident = vec![false; len];
    let mut rain = vec![0.0f64; len];
    let mut rain_left = 0usize;
    for t in 0..len {
        if rng.gen_bool(cfg.accident_rate) {
            let node = rng.gen_range(0..n);
            let duration = rng.gen_range(cfg.accident_duration[0]..=cfg.accident_duration[1]);
            let sev = uniform(&mut rng, cfg.accident_severity);
            for s in t..(t + duration).min(len) {
                severity[s * n + node] = severity[s * n + node].max(sev);
                incident[s] = true;
            }
        }
        if rain_left == 0 && rng.gen_bool(cfg.rain_probability) {
            rain_left = rng.gen_range(cfg.rain_duration[0]..=cfg.rain_duration[1]);
        }
        if rain_left > 0 {
            rain[t] = rng.gen_range(0.5..4.0);
            rain_left -= 1;
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config("synth.noise_sigma", e.to_string()))?;
    let f = FEATURES.len();
    let mut values = vec![0.0; len * n * f];
    for t in 0..len {
        let rain_scale = if rain[t] > 0.0 { cfg.rain_flow_scale } else { 1.0 };
        for i in 0..n {
            let sev = severity[t * n + i];
            let d = smoothed[t * n + i] * (1.0 - sev / 2.0) * rain_scale;
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let flow = (d + eps).max(0.0);
            let util = (flow / cfg.capacity).clamp(0.0, 1.0);
            let speed = cfg.free_flow_speed * (1.0 - 0.6 * util) * (1.0 - sev);
            let occupancy = (flow / (speed.max(1.0) * cfg.jam_constant)).clamp(0.0, 1.0);
            values[(t * n + i) * f..(t * n + i + 1) * f].copy_from_slice(&[flow, speed, occupancy]);
        }
    }

    let m = EXTERNALS.len();
    let mut externals = vec![0.0; len * m];
    for t in 0..len {
        // warmest mid-afternoon
        let hour = grid.slot_of_day(t) as f64 / steps_per_hour;
        let temperature = 8.0 + 6.0 * (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin() - 2.0 * (rain[t] > 0.0) as u8 as f64;
        let visibility = 10.0 / (1.0 + rain[t]);
        let holiday = is_holiday[t / spd] as u8 as f64;
        externals[t * m..(t + 1) * m].copy_from_slice(&[temperature, rain[t], visibility, holiday, incident[t] as u8 as f64]);
    }

    let dataset = Dataset::new(grid, Tensor::new(vec![len, n, f], values)?, Tensor::new(vec![len, m], externals)?, vec![false; len * n * f])?;
    Ok((graph, dataset))
}
