//! Error metrics for a decentralized run and their text summary.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    mean_nis, recovery_time, rmse, scoring_windows, window_indices, DecentralizedOutput, EstimateTrace, Window,
};
use crate::sim::Trace;

/// How the traces are scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    /// Initial transient excluded from scoring, s. Capped at a quarter of
    /// the run for short runs.
    pub warmup: f64,
    /// Time excluded after each event, s.
    pub settle: f64,
    /// Normalized error level that counts as "not yet recovered".
    pub recovery_threshold: f64,
    /// Search horizon after each event, s.
    pub recovery_horizon: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            warmup: 1.0,
            settle: 0.5,
            recovery_threshold: 3.0,
            recovery_horizon: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub estimator: String,
    pub channel: String,
    pub estimate_rmse: f64,
    pub measurement_rmse: f64,
}

impl ChannelMetrics {
    pub fn ratio(&self) -> f64 {
        self.estimate_rmse / self.measurement_rmse
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub name: String,
    pub state_dim: usize,
    pub samples_scored: usize,
    /// Mean normalized innovation squared over the scoring windows.
    pub mean_nis: Option<f64>,
    /// Per event: time until the normalized error last exceeded the
    /// threshold, s. `None` when there is no pre-event error to normalize by.
    pub recovery_times: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub event_times: Vec<f64>,
    #[serde(default)]
    pub windows: Vec<[f64; 2]>,
    #[serde(default)]
    pub channels: Vec<ChannelMetrics>,
    #[serde(default)]
    pub estimators: Vec<EstimatorMetrics>,
}

impl Metrics {
    /// True when no sample fell in a scoring window.
    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelMetrics> {
        self.channels.iter().find(|c| c.channel == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Scoring windows for a run of `duration` seconds.
pub fn windows_for(duration: f64, events: &[f64], settings: &MetricSettings) -> Vec<Window> {
    if duration <= 0.0 {
        return Vec::new();
    }
    let warmup = settings.warmup.min(0.25 * duration);
    scoring_windows(warmup, duration, events, settings.settle)
}

struct Channels<'a> {
    estimator: String,
    estimates: &'a EstimateTrace,
    truth: &'a Trace,
    /// First plant-state column covered by the estimator.
    offset: usize,
}

fn score(c: &Channels<'_>, windows: &[Window], events: &[f64], settings: &MetricSettings) -> Result<(Vec<ChannelMetrics>, EstimatorMetrics)> {
    let n = c.estimates.labels.len();
    let times = c.estimates.times();
    let idx = window_indices(&times, windows);
    let cols = c.offset..c.offset + n;
    let est: Vec<&[f64]> = idx.iter().map(|&k| c.estimates.records[k].x_hat.as_slice()).collect();
    let truth: Vec<&[f64]> = idx.iter().map(|&k| &c.truth.records[k].true_state[cols.clone()]).collect();
    let meas: Vec<&[f64]> = idx.iter().map(|&k| &c.truth.records[k].noisy_measurement[cols.clone()]).collect();

    let mut channels = Vec::new();
    if !idx.is_empty() {
        let (e, m) = (rmse(&est, &truth)?, rmse(&meas, &truth)?);
        for (ch, label) in c.estimates.labels.iter().enumerate() {
            channels.push(ChannelMetrics {
                estimator: c.estimator.clone(),
                channel: label.clone(),
                estimate_rmse: e.per_channel[ch],
                measurement_rmse: m.per_channel[ch],
            });
        }
    }

    let errors: Vec<Vec<f64>> = c
        .estimates
        .records
        .iter()
        .zip(&c.truth.records)
        .map(|(e, t)| e.x_hat.iter().zip(&t.true_state[cols.clone()]).map(|(a, b)| a - b).collect())
        .collect();
    let mut recovery_times = Vec::with_capacity(events.len());
    for &event in events {
        let pre: Vec<Window> = windows.iter().filter(|w| w.end <= event + 1e-10).copied().collect();
        let pre_idx = window_indices(&times, &pre);
        let scale = if pre_idx.is_empty() {
            None
        } else {
            let e: Vec<&[f64]> = pre_idx.iter().map(|&k| errors[k].as_slice()).collect();
            let zeros = vec![vec![0.0; n]; e.len()];
            let r = rmse(&e, &zeros)?;
            r.per_channel.iter().all(|v| *v > 0.0).then_some(r.per_channel)
        };
        recovery_times.push(match scale {
            Some(s) => Some(recovery_time(&times, &errors, &s, event, settings.recovery_threshold, settings.recovery_horizon)?),
            None => None,
        });
    }

    let summary = EstimatorMetrics {
        name: c.estimator.clone(),
        state_dim: n,
        samples_scored: idx.len(),
        mean_nis: mean_nis(c.estimates, windows),
        recovery_times,
    };
    Ok((channels, summary))
}

/// RMSE of estimates and raw measurements against truth over the scoring
/// windows, NIS averages and post-event recovery times.
pub fn compute_metrics(
    out: &DecentralizedOutput,
    duration: f64,
    events: &[f64],
    seed: Option<u64>,
    settings: &MetricSettings,
) -> Result<Metrics> {
    let windows = windows_for(duration, events, settings);
    let mut metrics = Metrics {
        seed,
        event_times: events.to_vec(),
        windows: windows.iter().map(|w| [w.start, w.end.min(duration)]).collect(),
        ..Default::default()
    };
    let mut sets: Vec<Channels<'_>> = out
        .locals
        .iter()
        .enumerate()
        .map(|(bus, est)| Channels {
            estimator: format!("local_bus{}", bus + 1),
            estimates: est,
            truth: &out.local_truth,
            offset: 4 * bus,
        })
        .collect();
    let n_states = out.global_truth.state_labels.len();
    sets.push(Channels {
        estimator: "global".into(),
        estimates: &out.global,
        truth: &out.global_truth,
        offset: n_states - out.global.labels.len(),
    });
    for set in &sets {
        if set.estimates.len() != set.truth.len() {
            return Err(Error::Misaligned(format!("{} has {} estimates for {} samples", set.estimator, set.estimates.len(), set.truth.len())));
        }
        let (channels, summary) = score(set, &windows, events, settings)?;
        metrics.channels.extend(channels);
        metrics.estimators.push(summary);
    }
    Ok(metrics)
}

/// Plain-text table of a metrics report.
pub fn format_report(m: &Metrics) -> String {
    if m.is_empty() {
        return "no data\n".to_string();
    }
    let mut s = String::new();
    if let Some(seed) = m.seed {
        let _ = writeln!(s, "seed: {seed}");
    }
    if !m.windows.is_empty() {
        let w: Vec<String> = m.windows.iter().map(|[a, b]| format!("[{a}, {b}]")).collect();
        let _ = writeln!(s, "scoring windows (s): {}", w.join(" "));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<12} {:<8} {:>14} {:>14} {:>8}", "estimator", "channel", "rmse_est", "rmse_meas", "ratio");
    for c in &m.channels {
        let _ = writeln!(
            s,
            "{:<12} {:<8} {:>14.6} {:>14.6} {:>8.4}",
            c.estimator,
            c.channel,
            c.estimate_rmse,
            c.measurement_rmse,
            c.ratio()
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<12} {:>6} {:>9} {:>10}  recovery (s)", "estimator", "states", "samples", "mean_nis");
    for e in &m.estimators {
        let nis = e.mean_nis.map_or("-".to_string(), |v| format!("{v:.3}"));
        let rec: Vec<String> = e
            .recovery_times
            .iter()
            .map(|r| r.map_or("-".to_string(), |v| format!("{v:.4}")))
            .collect();
        let _ = writeln!(s, "{:<12} {:>6} {:>9} {:>10}  {}", e.name, e.state_dim, e.samples_scored, nis, rec.join(" "));
    }
    s
}
