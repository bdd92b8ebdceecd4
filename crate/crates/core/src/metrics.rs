//! Departure area and the paired controller-off/controller-on batch
//! comparison.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sampler::SampledEvent;
use crate::trace::Side;
use crate::vehicle::{simulate_event_with, Controller, ControlledTrajectory, ControllerGains, SimOptions, SimOutcome, VehicleParams};

/// Trapezoidal integral of `|y|` over the departure window.
pub fn departure_area(traj: &ControlledTrajectory) -> f64 {
    let end = traj.departure_end.min(traj.len().saturating_sub(1));
    abs_area(&traj.time[..=end], &traj.y[..=end])
}

/// Trapezoidal integral of `|y|` against `time`.
pub fn abs_area(time: &[f64], y: &[f64]) -> f64 {
    time.windows(2)
        .zip(y.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0].abs() + v[1].abs()))
        .sum()
}

pub fn running_mean(values: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect()
}

/// Spread of the last tenth of a running-mean series relative to its final
/// value.
pub fn last_decile_relative_range(running: &[f64]) -> Option<f64> {
    let last = *running.last()?;
    let start = running.len() - running.len().div_ceil(10);
    let tail = &running[start..];
    let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
    (last != 0.0).then(|| (hi - lo) / last.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventResult {
    pub index: usize,
    pub side: Side,
    pub s_off: f64,
    pub s_on: f64,
    pub triggered: bool,
    pub outcome: SimOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedEvent {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideSummary {
    pub side: Side,
    pub count: usize,
    pub triggered: usize,
    pub mean_s_off: f64,
    pub std_s_off: f64,
    pub mean_s_on: f64,
    pub std_s_on: f64,
    /// `100 (mean_off - mean_on) / mean_off`; absent when `mean_off` is 0.
    pub reduction_pct: Option<f64>,
    pub running_mean_s_off: Vec<f64>,
    pub running_mean_s_on: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub events: Vec<EventResult>,
    pub failures: Vec<FailedEvent>,
    pub summaries: Vec<SideSummary>,
}

impl EvaluationReport {
    pub fn summary(&self, side: Side) -> Option<&SideSummary> {
        self.summaries.iter().find(|s| s.side == side)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Plot-ready table: one row per event with per-side running means.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["index", "side", "s_off", "s_on", "running_mean_s_off", "running_mean_s_on"])?;
        let mut seen = [0usize; 2];
        for e in &self.events {
            let slot = usize::from(e.side == Side::Right);
            let summary = self.summary(e.side).expect("every event side has a summary");
            let i = seen[slot];
            seen[slot] += 1;
            wtr.write_record([
                e.index.to_string(),
                e.side.to_string(),
                e.s_off.to_string(),
                e.s_on.to_string(),
                summary.running_mean_s_off[i].to_string(),
                summary.running_mean_s_on[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn summarize(side: Side, events: &[&EventResult]) -> SideSummary {
    let off: Vec<f64> = events.iter().map(|e| e.s_off).collect();
    let on: Vec<f64> = events.iter().map(|e| e.s_on).collect();
    let (mean_s_off, std_s_off) = mean_std(&off);
    let (mean_s_on, std_s_on) = mean_std(&on);
    SideSummary {
        side,
        count: events.len(),
        triggered: events.iter().filter(|e| e.triggered).count(),
        mean_s_off,
        std_s_off,
        mean_s_on,
        std_s_on,
        reduction_pct: (mean_s_off > 0.0).then(|| 100.0 * (mean_s_off - mean_s_on) / mean_s_off),
        running_mean_s_off: running_mean(&off),
        running_mean_s_on: running_mean(&on),
    }
}

/// Simulates every event with the controller off and on and aggregates the
/// departure areas per side. Events whose simulation fails are listed in
/// `failures` and left out of the statistics.
pub fn evaluate_batch(
    events: &[SampledEvent],
    params: &VehicleParams,
    gains: &ControllerGains,
    options: &SimOptions,
) -> EvaluationReport {
    let outcomes: Vec<std::result::Result<EventResult, FailedEvent>> = events
        .par_iter()
        .enumerate()
        .map(|(index, ev)| {
            let run = |c| simulate_event_with(&ev.trace, &ev.features, params, gains, c, options);
            let paired = run(Controller::Off).and_then(|off| Ok((off, run(Controller::On)?)));
            match paired {
                Ok((off, on)) => Ok(EventResult {
                    index,
                    side: ev.trace.side(),
                    s_off: departure_area(&off),
                    s_on: departure_area(&on),
                    triggered: on.triggered(),
                    outcome: on.outcome,
                }),
                Err(e) => Err(FailedEvent {
                    index,
                    error: e.to_string(),
                }),
            }
        })
        .collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(f) => failures.push(f),
        }
    }
    let summaries = [Side::Left, Side::Right]
        .into_iter()
        .filter_map(|side| {
            let rows: Vec<&EventResult> = results.iter().filter(|r| r.side == side).collect();
            (!rows.is_empty()).then(|| summarize(side, &rows))
        })
        .collect();
    EvaluationReport {
        events: results,
        failures,
        summaries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_ramp_area() {
        let time: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.001).collect();
        assert!((abs_area(&time, &time) - 0.5).abs() < 1e-5);
        assert_eq!(abs_area(&time, &vec![0.0; time.len()]), 0.0);
    }

    #[test]
    fn running_mean_and_range() {
        let r = running_mean(&[1.0, 3.0, 2.0, 2.0]);
        assert_eq!(r, vec![1.0, 2.0, 2.0, 2.0]);
        assert_eq!(last_decile_relative_range(&r), Some(0.0));
        assert_eq!(last_decile_relative_range(&[]), None);
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
