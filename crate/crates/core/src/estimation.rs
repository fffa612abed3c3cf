//! Decentralized estimation: one local filter per DGU and a slower global
//! filter over the line currents.
//!
//! Local filters consume the bus measurements `[v_d, v_q, i_td, i_tq]` and the
//! measured local inputs `[v_td, v_tq, i_od, i_oq]` at the sensor rate. The
//! prediction into sample `k` uses the inputs recorded at `k - 1`, which are
//! the values held over that interval.
//!
//! The global filter runs at a rate that divides the local one. Its inputs
//! are the differences of the locally estimated bus voltages at the current
//! tick: at such slow rates the line currents follow their voltage difference
//! almost algebraically, so the value at the end of the interval is the one
//! that matters. The noise on those inputs comes from the local filters'
//! steady-state voltage covariance.

use nalgebra::{DMatrix, DVector};

use crate::discretize::{discretize, DiscretizationMethod};
use crate::error::{Error, Result};
use crate::kalman::{check_covariance, KalmanEstimator, NoiseSpec, UpdateOutcome};
use crate::models::{build_dgu_model, build_line_model, ContinuousLtiModel, MicrogridTopology};
use crate::sim::{rate_stride, Trace};

/// Estimates produced by one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRecord {
    pub t: f64,
    pub x_hat: Vec<f64>,
    /// Normalized innovation squared of the update at `t`.
    pub nis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTrace {
    pub labels: Vec<String>,
    pub sample_period: f64,
    pub records: Vec<EstimateRecord>,
}

impl EstimateTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }
}

/// Keeps every k-th estimate, `k = source rate / target rate`.
pub fn downsample_estimates(trace: &EstimateTrace, target_rate: f64) -> Result<EstimateTrace> {
    let stride = rate_stride(1.0 / trace.sample_period, target_rate)?;
    Ok(EstimateTrace {
        labels: trace.labels.clone(),
        sample_period: trace.sample_period * stride as f64,
        records: trace.records.iter().step_by(stride).cloned().collect(),
    })
}

fn same_rate(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Times on the shared nanosecond grid compare equal to well under 1 ns.
fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-10
}

/// Four-state filter for one DGU.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimator {
    /// 0-based bus index.
    pub bus: usize,
    pub filter: KalmanEstimator,
    pub rate: f64,
}

impl LocalEstimator {
    /// Discretizes the DGU model at `rate` and builds a filter whose process
    /// noise includes the input-measurement noise `noise.m`.
    pub fn new(
        topology: &MicrogridTopology,
        bus: usize,
        rate: f64,
        method: DiscretizationMethod,
        noise: &NoiseSpec,
        x0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        let dgu = topology
            .dgus()
            .get(bus)
            .ok_or_else(|| Error::invalid("bus", format!("no DGU at index {bus}")))?;
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::invalid("local_rate", "must be positive"));
        }
        let model = build_dgu_model(dgu, topology.omega())?.suffixed(&(bus + 1).to_string());
        let model = discretize(&model, 1.0 / rate, method)?;
        Ok(Self {
            bus,
            filter: KalmanEstimator::new(model, noise, x0, p0)?,
            rate,
        })
    }
}

fn slice4(v: &[f64], bus: usize) -> DVector<f64> {
    DVector::from_column_slice(&v[4 * bus..4 * bus + 4])
}

/// Runs a local filter over a measurement trace at the filter's rate.
///
/// The first record only updates the prior; later records predict with the
/// previous record's inputs and update with the current measurement.
pub fn run_local(mut est: LocalEstimator, measurements: &Trace) -> Result<EstimateTrace> {
    if !same_rate(est.rate, measurements.rate()) {
        return Err(Error::Misaligned(format!(
            "local estimator runs at {} Hz but the trace is sampled at {} Hz",
            est.rate,
            measurements.rate()
        )));
    }
    let nb = measurements.input_labels.len() / 4;
    if est.bus >= nb || measurements.state_labels.len() < 4 * nb {
        return Err(Error::dims("bus channels in trace", est.bus + 1, nb));
    }
    let bus = est.bus;
    let mut records = Vec::with_capacity(measurements.len());
    for (k, rec) in measurements.records.iter().enumerate() {
        let z = slice4(&rec.noisy_measurement, bus);
        let outcome = if k == 0 {
            est.filter.update(&z)
        } else {
            let u = slice4(&measurements.records[k - 1].inputs, bus);
            est.filter.step(&u, &z)
        }
        .map_err(|e| e.at_sample(k))?;
        records.push(EstimateRecord {
            t: rec.t,
            x_hat: est.filter.x_hat.iter().copied().collect(),
            nis: outcome.nis,
        });
    }
    Ok(EstimateTrace {
        labels: est.filter.model.state_labels.clone(),
        sample_period: 1.0 / est.rate,
        records,
    })
}

/// Stacked line models: states `(i_d, i_q)` per line, inputs the voltage
/// difference `(v_d, v_q)` across each line.
pub fn build_line_network_model(topology: &MicrogridTopology) -> Result<ContinuousLtiModel> {
    let lines = topology.lines();
    let n = 2 * lines.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    let mut state_labels = Vec::with_capacity(n);
    let mut input_labels = Vec::with_capacity(n);
    for (l, line) in lines.iter().enumerate() {
        let m = build_line_model(line, topology.omega())?.suffixed(&line.suffix());
        a.view_mut((2 * l, 2 * l), (2, 2)).copy_from(&m.a);
        b.view_mut((2 * l, 2 * l), (2, 2)).copy_from(&m.b);
        state_labels.extend(m.state_labels);
        input_labels.extend(m.input_labels);
    }
    ContinuousLtiModel::new(a, b, state_labels, input_labels)
}

/// Maps stacked bus voltages `(v_d, v_q)` per bus to stacked line voltage
/// differences `v_from - v_to`.
pub fn incidence_matrix(topology: &MicrogridTopology) -> DMatrix<f64> {
    let lines = topology.lines();
    let mut d = DMatrix::zeros(2 * lines.len(), 2 * topology.n_buses());
    for (l, line) in lines.iter().enumerate() {
        for axis in 0..2 {
            d[(2 * l + axis, 2 * (line.from_bus - 1) + axis)] = 1.0;
            d[(2 * l + axis, 2 * (line.to_bus - 1) + axis)] = -1.0;
        }
    }
    d
}

/// Input-noise covariance of the line voltage differences given independent
/// 2x2 voltage-estimate covariances per bus.
pub fn line_input_covariance(topology: &MicrogridTopology, bus_voltage_cov: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let nb = topology.n_buses();
    if bus_voltage_cov.len() != nb {
        return Err(Error::dims("bus voltage covariances", nb, bus_voltage_cov.len()));
    }
    let mut blocks = DMatrix::zeros(2 * nb, 2 * nb);
    for (bus, c) in bus_voltage_cov.iter().enumerate() {
        if c.shape() != (2, 2) {
            return Err(Error::dims("bus voltage covariance", "2x2", format!("{}x{}", c.nrows(), c.ncols())));
        }
        check_covariance("bus voltage covariance", c)?;
        blocks.view_mut((2 * bus, 2 * bus), (2, 2)).copy_from(c);
    }
    let d = incidence_matrix(topology);
    let m = &d * blocks * d.transpose();
    Ok((&m + m.transpose()) * 0.5)
}

/// Line-current filter fed by bus-voltage estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEstimator {
    pub filter: KalmanEstimator,
    pub rate: f64,
    /// 0-based `(from, to)` bus indices per line.
    pub line_ends: Vec<(usize, usize)>,
}

impl GlobalEstimator {
    /// `noise.q` and `noise.r` are `2L x 2L` over the line states; `noise.m`
    /// is the covariance of the stacked voltage-difference inputs.
    pub fn new(
        topology: &MicrogridTopology,
        rate: f64,
        method: DiscretizationMethod,
        noise: &NoiseSpec,
        x0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        if topology.lines().is_empty() {
            return Err(Error::Topology("global estimator needs at least one line".into()));
        }
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::invalid("global_rate", "must be positive"));
        }
        let model = discretize(&build_line_network_model(topology)?, 1.0 / rate, method)?;
        Ok(Self {
            filter: KalmanEstimator::new(model, noise, x0, p0)?,
            rate,
            line_ends: topology.lines().iter().map(|l| (l.from_bus - 1, l.to_bus - 1)).collect(),
        })
    }

    fn input(&self, voltages: &[(f64, f64)]) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.line_ends.len(),
            self.line_ends.iter().flat_map(|&(i, j)| {
                [voltages[i].0 - voltages[j].0, voltages[i].1 - voltages[j].1]
            }),
        )
    }
}

/// Runs the global filter at its own rate.
///
/// `bus_voltages[b]` is bus `b`'s local estimate trace already at the global
/// rate, with `v_d`, `v_q` in its first two channels. `line_measurements`
/// supplies the noisy line currents from the plant trace at the same rate.
pub fn run_global(
    mut est: GlobalEstimator,
    bus_voltages: &[EstimateTrace],
    line_measurements: &Trace,
) -> Result<EstimateTrace> {
    let nb = bus_voltages.len();
    let needed = est.line_ends.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
    if nb < needed {
        return Err(Error::dims("bus voltage traces", needed, nb));
    }
    if !same_rate(est.rate, line_measurements.rate()) {
        return Err(Error::Misaligned(format!(
            "global estimator runs at {} Hz but line measurements are at {} Hz",
            est.rate,
            line_measurements.rate()
        )));
    }
    let n = line_measurements.len();
    for (b, v) in bus_voltages.iter().enumerate() {
        if v.len() != n {
            return Err(Error::Misaligned(format!(
                "bus {} has {} voltage estimates but there are {n} line samples",
                b + 1,
                v.len()
            )));
        }
    }
    let line_offset = line_measurements
        .state_labels
        .len()
        .checked_sub(est.filter.n_states())
        .ok_or_else(|| Error::dims("line channels in trace", est.filter.n_states(), line_measurements.state_labels.len()))?;

    let mut records = Vec::with_capacity(n);
    let mut voltages = vec![(0.0, 0.0); nb];
    for (k, rec) in line_measurements.records.iter().enumerate() {
        for (b, v) in bus_voltages.iter().enumerate() {
            let e = &v.records[k];
            if !same_time(e.t, rec.t) {
                return Err(Error::Misaligned(format!(
                    "sample {k}: bus {} voltage at t = {} but line current at t = {}",
                    b + 1,
                    e.t,
                    rec.t
                )));
            }
            voltages[b] = (e.x_hat[0], e.x_hat[1]);
        }
        let z = DVector::from_column_slice(&rec.noisy_measurement[line_offset..]);
        let outcome: Result<UpdateOutcome> = if k == 0 {
            est.filter.update(&z)
        } else {
            let u = est.input(&voltages);
            est.filter.step(&u, &z)
        };
        let outcome = outcome.map_err(|e| e.at_sample(k))?;
        records.push(EstimateRecord {
            t: rec.t,
            x_hat: est.filter.x_hat.iter().copied().collect(),
            nis: outcome.nis,
        });
    }
    Ok(EstimateTrace {
        labels: est.filter.model.state_labels.clone(),
        sample_period: 1.0 / est.rate,
        records,
    })
}

/// Per-channel and pooled root-mean-square error.
#[derive(Debug, Clone, PartialEq)]
pub struct Rmse {
    pub per_channel: Vec<f64>,
    /// RMSE pooled over every channel and sample.
    pub aggregate: f64,
}

/// RMSE between row-aligned estimate and truth samples.
pub fn rmse<E: AsRef<[f64]>, T: AsRef<[f64]>>(estimate: &[E], truth: &[T]) -> Result<Rmse> {
    if estimate.len() != truth.len() {
        return Err(Error::dims("rmse sample count", truth.len(), estimate.len()));
    }
    let Some(first) = truth.first() else {
        return Err(Error::InsufficientData("rmse of an empty trace".into()));
    };
    let channels = first.as_ref().len();
    let mut sums = vec![0.0; channels];
    for (e, t) in estimate.iter().zip(truth) {
        let (e, t) = (e.as_ref(), t.as_ref());
        if e.len() != channels || t.len() != channels {
            return Err(Error::dims("rmse channel count", channels, e.len().min(t.len())));
        }
        for c in 0..channels {
            let d = e[c] - t[c];
            sums[c] += d * d;
        }
    }
    let n = truth.len() as f64;
    let total: f64 = sums.iter().sum();
    Ok(Rmse {
        per_channel: sums.iter().map(|s| (s / n).sqrt()).collect(),
        aggregate: (total / (n * channels.max(1) as f64)).sqrt(),
    })
}

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start - 1e-10 && t < self.end - 1e-10
    }
}

/// Indices of `times` that fall in any of `windows`.
pub fn window_indices(times: &[f64], windows: &[Window]) -> Vec<usize> {
    times
        .iter()
        .enumerate()
        .filter(|(_, &t)| windows.iter().any(|w| w.contains(t)))
        .map(|(i, _)| i)
        .collect()
}

/// Scoring windows: from `warmup` to `end`, skipping `settle` seconds after
/// each event. The last window is closed at `end` by extending it slightly.
pub fn scoring_windows(warmup: f64, end: f64, events: &[f64], settle: f64) -> Vec<Window> {
    let mut windows = Vec::new();
    let mut start = warmup;
    let mut cuts: Vec<f64> = events.iter().copied().filter(|&e| e < end).collect();
    cuts.sort_by(f64::total_cmp);
    for e in cuts {
        if e > start {
            windows.push(Window { start, end: e });
        }
        start = start.max(e + settle);
    }
    if start <= end {
        windows.push(Window { start, end: end + 1e-9 });
    }
    windows
}

/// Time after `event` at which the normalized error
/// `sqrt(mean_c (err_c / scale_c)^2)` last exceeds `threshold` within
/// `horizon`. Returns 0 when it never does.
pub fn recovery_time(
    times: &[f64],
    errors: &[Vec<f64>],
    scale: &[f64],
    event: f64,
    threshold: f64,
    horizon: f64,
) -> Result<f64> {
    if times.len() != errors.len() {
        return Err(Error::dims("recovery error samples", times.len(), errors.len()));
    }
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("scale", "per-channel scales must be positive"));
    }
    let mut last = 0.0;
    for (t, err) in times.iter().zip(errors) {
        if *t < event - 1e-10 || *t > event + horizon {
            continue;
        }
        if err.len() != scale.len() {
            return Err(Error::dims("recovery channels", scale.len(), err.len()));
        }
        let norm = (err.iter().zip(scale).map(|(e, s)| (e / s).powi(2)).sum::<f64>() / scale.len() as f64).sqrt();
        if norm > threshold {
            last = t - event;
        }
    }
    Ok(last)
}

/// Estimator noise for the decentralized run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSettings {
    pub local_rate: f64,
    pub global_rate: f64,
    pub method: DiscretizationMethod,
    /// One 4x4 spec per DGU.
    pub local_noise: Vec<NoiseSpec>,
    /// `2L x 2L` process noise for the line states.
    pub global_q: DMatrix<f64>,
    /// `2L x 2L` line-current measurement noise.
    pub global_r: DMatrix<f64>,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecentralizedOutput {
    /// One trace per DGU at the local rate.
    pub locals: Vec<EstimateTrace>,
    pub global: EstimateTrace,
    /// Plant trace at the local rate.
    pub local_truth: Trace,
    /// Plant trace at the global rate.
    pub global_truth: Trace,
    /// Input covariance used by the global filter.
    pub global_input_cov: DMatrix<f64>,
}

fn local_estimator(topology: &MicrogridTopology, settings: &EstimatorSettings, trace: &Trace, bus: usize) -> Result<LocalEstimator> {
    let noise = &settings.local_noise[bus];
    let x0 = trace
        .records
        .first()
        .map(|r| slice4(&r.noisy_measurement, bus))
        .unwrap_or_else(|| DVector::zeros(4));
    LocalEstimator::new(topology, bus, settings.local_rate, settings.method, noise, x0, noise.r.clone())
}

/// Runs every local filter, sequentially or one thread per DGU. Each filter
/// only reads its own channels, so both orders give identical results.
pub fn run_locals(topology: &MicrogridTopology, settings: &EstimatorSettings, trace: &Trace) -> Result<Vec<EstimateTrace>> {
    let nb = topology.n_buses();
    if settings.local_noise.len() != nb {
        return Err(Error::dims("local noise specs", nb, settings.local_noise.len()));
    }
    let run = |bus: usize| local_estimator(topology, settings, trace, bus).and_then(|est| run_local(est, trace));
    if settings.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..nb).map(|bus| scope.spawn(move || run(bus))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("local estimator thread panicked"))
                .collect()
        })
    } else {
        (0..nb).map(run).collect()
    }
}

/// Full decentralized pipeline on a plant trace.
pub fn run_decentralized(
    topology: &MicrogridTopology,
    settings: &EstimatorSettings,
    plant_trace: &Trace,
) -> Result<DecentralizedOutput> {
    let local_truth = crate::sim::downsample(plant_trace, settings.local_rate)?;
    rate_stride(settings.local_rate, settings.global_rate)?;
    let locals = run_locals(topology, settings, &local_truth)?;

    let mut voltage_cov = Vec::with_capacity(locals.len());
    for bus in 0..topology.n_buses() {
        let est = local_estimator(topology, settings, &local_truth, bus)?;
        let ss = est.filter.steady_state(1e-12, 100_000)?;
        voltage_cov.push(ss.posterior.view((0, 0), (2, 2)).into_owned());
    }
    let global_input_cov = line_input_covariance(topology, &voltage_cov)?;

    let global_truth = crate::sim::downsample(&local_truth, settings.global_rate)?;
    let slow: Vec<EstimateTrace> = locals
        .iter()
        .map(|l| downsample_estimates(l, settings.global_rate))
        .collect::<Result<_>>()?;
    let noise = NoiseSpec::new(settings.global_q.clone(), settings.global_r.clone(), global_input_cov.clone())?;
    let n_lines = 2 * topology.lines().len();
    let x0 = global_truth
        .records
        .first()
        .map(|r| DVector::from_column_slice(&r.noisy_measurement[r.noisy_measurement.len() - n_lines..]))
        .unwrap_or_else(|| DVector::zeros(n_lines));
    let est = GlobalEstimator::new(topology, settings.global_rate, settings.method, &noise, x0, noise.r.clone())?;
    let global = run_global(est, &slow, &global_truth)?;

    Ok(DecentralizedOutput {
        locals,
        global,
        local_truth,
        global_truth,
        global_input_cov,
    })
}

/// Mean NIS of the records whose time falls in `windows`.
pub fn mean_nis(trace: &EstimateTrace, windows: &[Window]) -> Option<f64> {
    let values: Vec<f64> = trace
        .records
        .iter()
        .filter(|r| windows.iter().any(|w| w.contains(r.t)))
        .map(|r| r.nis)
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
