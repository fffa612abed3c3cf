//! Ground-truth simulation of the coupled microgrid.
//!
//! The coupled plant is discretized exactly at the plant step and driven by
//! per-DGU terminal voltages and per-bus constant-current loads. Each record
//! holds the true state at `t_k`, a noisy copy of it, and the per-DGU local
//! input vector `[v_td, v_tq, i_od, i_oq]` (true and noisy). The terminal
//! voltage in record `k` is the value held over `[t_k, t_k+1)`; `i_o` is sampled
//! at `t_k`.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::discretize::discretize_exact;
use crate::error::{Error, Result};
use crate::frames::DqSample;
use crate::kalman::{check_covariance, NoiseSpec};
use crate::models::{build_coupled_plant, CoupledPlant, MicrogridTopology};

/// States growing beyond this multiple of the nominal magnitude abort the run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Draws `N(0, C)` vectors as `F n` with `F F^T = C` and `n` standard normal.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(covariance: &DMatrix<f64>) -> Result<Self> {
        check_covariance("covariance", covariance)?;
        let n = covariance.nrows();
        let is_diagonal = (0..n).all(|i| (0..n).all(|j| i == j || covariance[(i, j)] == 0.0));
        let factor = if is_diagonal {
            DMatrix::from_diagonal(&covariance.diagonal().map(|v| v.max(0.0).sqrt()))
        } else {
            let eig = covariance.clone().symmetric_eigen();
            let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            eig.eigenvectors * DMatrix::from_diagonal(&roots)
        };
        Ok(Self { factor })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.factor.ncols();
        let normal = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        &self.factor * normal
    }
}

/// A step change of one bus's load current.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadEvent {
    pub time: f64,
    /// 1-based bus number.
    pub bus: usize,
    pub load_delta: DqSample,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventSchedule {
    events: Vec<LoadEvent>,
}

impl EventSchedule {
    pub fn new(events: Vec<LoadEvent>) -> Result<Self> {
        for (k, e) in events.iter().enumerate() {
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(Error::invalid(format!("events[{k}].time"), "must be finite and >= 0"));
            }
            if !e.load_delta.is_finite() {
                return Err(Error::invalid(format!("events[{k}].load_delta"), "must be finite"));
            }
            if k > 0 && e.time <= events[k - 1].time {
                return Err(Error::invalid(
                    format!("events[{k}].time"),
                    "event times must be strictly increasing",
                ));
            }
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[LoadEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// PI terminal-voltage regulator with a virtual-resistance current droop.
///
/// The reference seen by the PI loop is `v_nominal - droop * i_t`, so DGUs
/// share load changes and line flows respond to them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegulatorConfig {
    /// d-axis voltage reference (phase peak), V.
    pub v_nominal: f64,
    pub kp: f64,
    /// Integral gain, 1/s.
    pub ki: f64,
    /// Virtual droop resistance, ohm.
    pub droop: f64,
}

impl RegulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("controller.v_nominal", self.v_nominal, true),
            ("controller.kp", self.kp, false),
            ("controller.ki", self.ki, false),
            ("controller.droop", self.droop, true),
        ];
        for (field, value, zero_ok) in checks {
            if !value.is_finite() || value < 0.0 || (!zero_ok && value == 0.0) {
                return Err(Error::invalid(field, format!("must be {}, got {value}", if zero_ok { "non-negative" } else { "positive" })));
            }
        }
        Ok(())
    }

    fn reference(&self, i_t: DqSample) -> DqSample {
        DqSample::new(self.v_nominal, 0.0) - i_t * self.droop
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageRegulator {
    pub config: RegulatorConfig,
    /// Integrator state; equals the output when the error is zero.
    pub integrator: DqSample,
    pub dt: f64,
}

impl VoltageRegulator {
    pub fn new(config: RegulatorConfig, dt: f64, integrator: DqSample) -> Self {
        Self { config, integrator, dt }
    }

    pub fn limit(&self) -> f64 {
        2.0 * self.config.v_nominal
    }

    /// Terminal voltage command for bus state `[v_d, v_q, i_td, i_tq]`.
    /// Output magnitude is clamped to twice the nominal voltage and the
    /// integrator holds while clamped.
    pub fn regulate(&mut self, bus_state: [f64; 4]) -> DqSample {
        let [v_d, v_q, i_td, i_tq] = bus_state;
        let reference = self.config.reference(DqSample::new(i_td, i_tq));
        let error = reference - DqSample::new(v_d, v_q);
        let raw = error * self.config.kp + self.integrator;
        let limit = self.limit();
        let magnitude = raw.magnitude();
        if magnitude > limit {
            return if magnitude > 0.0 { raw * (limit / magnitude) } else { raw };
        }
        self.integrator = self.integrator + error * (self.config.ki * self.dt);
        raw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalVoltageControl {
    Regulated(RegulatorConfig),
    /// Open loop: constant terminal voltage per bus.
    Fixed(Vec<DqSample>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialState {
    /// Steady state for the initial loads (and regulator, if any).
    #[default]
    Equilibrium,
    /// All states and integrators zero.
    Zero,
}

/// Noise injected by the simulator, one spec per subsystem.
///
/// DGU specs are 4x4 (`q` on the bus states, `r` on their measurements, `m`
/// on the local input measurements). Line specs use `q` and `r` (2x2); their
/// `m` is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantNoise {
    pub dgus: Vec<NoiseSpec>,
    pub lines: Vec<NoiseSpec>,
}

impl PlantNoise {
    pub fn zero(n_buses: usize, n_lines: usize) -> Self {
        let zero = |n: usize| NoiseSpec {
            q: DMatrix::zeros(n, n),
            r: DMatrix::zeros(n, n),
            m: DMatrix::zeros(n, n),
        };
        Self {
            dgus: vec![zero(4); n_buses],
            lines: vec![zero(2); n_lines],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub topology: MicrogridTopology,
    pub duration: f64,
    pub plant_step: f64,
    pub noise: PlantNoise,
    pub seed: u64,
    pub events: EventSchedule,
    pub control: TerminalVoltageControl,
    /// Load current per bus before any event.
    pub initial_loads: Vec<DqSample>,
    pub initial_state: InitialState,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let n_buses = self.topology.n_buses();
        let n_lines = self.topology.lines().len();
        if !self.plant_step.is_finite() || self.plant_step <= 0.0 {
            return Err(Error::invalid("plant_step", "must be positive"));
        }
        if !self.duration.is_finite() || self.duration < 0.0 {
            return Err(Error::invalid("duration", "must be finite and >= 0"));
        }
        if to_nanos(self.plant_step) == 0 {
            return Err(Error::invalid("plant_step", "must be at least 1 ns"));
        }
        // A zero duration produces an empty trace, so events cannot be
        // outside it.
        if self.duration > 0.0 {
            if let Some(last) = self.events.events().last() {
                if last.time > self.duration {
                    return Err(Error::invalid(
                        "duration",
                        format!("must cover the last event at {} s", last.time),
                    ));
                }
            }
        }
        for (k, e) in self.events.events().iter().enumerate() {
            if e.bus == 0 || e.bus > n_buses {
                return Err(Error::invalid(format!("events[{k}].bus"), format!("must be in 1..={n_buses}")));
            }
        }
        if self.initial_loads.len() != n_buses {
            return Err(Error::dims("initial loads", n_buses, self.initial_loads.len()));
        }
        if self.noise.dgus.len() != n_buses {
            return Err(Error::dims("DGU noise specs", n_buses, self.noise.dgus.len()));
        }
        if self.noise.lines.len() != n_lines {
            return Err(Error::dims("line noise specs", n_lines, self.noise.lines.len()));
        }
        for spec in &self.noise.dgus {
            for c in [&spec.q, &spec.r, &spec.m] {
                if c.shape() != (4, 4) {
                    return Err(Error::dims("DGU noise covariance", "4x4", format!("{}x{}", c.nrows(), c.ncols())));
                }
            }
        }
        for spec in &self.noise.lines {
            for c in [&spec.q, &spec.r] {
                if c.shape() != (2, 2) {
                    return Err(Error::dims("line noise covariance", "2x2", format!("{}x{}", c.nrows(), c.ncols())));
                }
            }
        }
        match &self.control {
            TerminalVoltageControl::Regulated(cfg) => cfg.validate()?,
            TerminalVoltageControl::Fixed(v) if v.len() != n_buses => {
                return Err(Error::dims("fixed terminal voltages", n_buses, v.len()))
            }
            TerminalVoltageControl::Fixed(_) => {}
        }
        Ok(())
    }

    /// Number of records produced: `duration / plant_step + 1`, or none for a
    /// zero duration.
    pub fn n_records(&self) -> usize {
        if self.duration == 0.0 {
            0
        } else {
            (self.duration / self.plant_step).round() as usize + 1
        }
    }
}

/// Time grid in integer nanoseconds so that times survive a 9-decimal text
/// round trip unchanged.
pub fn to_nanos(t: f64) -> u64 {
    (t * 1e9).round() as u64
}

pub fn from_nanos(ns: u64) -> f64 {
    ns as f64 / 1e9
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub true_state: Vec<f64>,
    pub noisy_measurement: Vec<f64>,
    pub true_inputs: Vec<f64>,
    pub inputs: Vec<f64>,
}

/// Simulation output: plant states plus per-DGU local inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
    pub sample_period: f64,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rate(&self) -> f64 {
        1.0 / self.sample_period
    }

    pub fn state_index(&self, label: &str) -> Option<usize> {
        self.state_labels.iter().position(|l| l == label)
    }
}

/// Local input labels `[v_td, v_tq, i_od, i_oq]` suffixed with each bus number.
pub fn local_input_labels(n_buses: usize) -> Vec<String> {
    (1..=n_buses)
        .flat_map(|b| ["v_td", "v_tq", "i_od", "i_oq"].map(|l| format!("{l}{b}")))
        .collect()
}

/// Keeps every k-th record, `k = source rate / target rate`.
pub fn downsample(trace: &Trace, target_rate: f64) -> Result<Trace> {
    let stride = rate_stride(trace.rate(), target_rate)?;
    Ok(Trace {
        state_labels: trace.state_labels.clone(),
        input_labels: trace.input_labels.clone(),
        sample_period: trace.sample_period * stride as f64,
        records: trace.records.iter().step_by(stride).cloned().collect(),
    })
}

/// Integer ratio between two sampling rates, or an error if it is not one.
pub fn rate_stride(source_rate: f64, target_rate: f64) -> Result<usize> {
    let not_divisor = || Error::RateNotDivisor {
        target: target_rate,
        source_rate,
    };
    if !(target_rate > 0.0) || !target_rate.is_finite() || target_rate > source_rate * (1.0 + 1e-12) {
        return Err(not_divisor());
    }
    let ratio = source_rate / target_rate;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
        return Err(not_divisor());
    }
    Ok(stride as usize)
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Discrete closed-loop matrix over `[x; integrators]` for the regulated
/// plant with loads held constant.
fn closed_loop_matrix(plant: &CoupledPlant, a_d: &DMatrix<f64>, b_d: &DMatrix<f64>, cfg: &RegulatorConfig, dt: f64) -> DMatrix<f64> {
    let layout = &plant.layout;
    let n = layout.n_states();
    let nb = layout.n_buses();
    // error = r - E x, with E picking v and droop * i_t.
    let mut e = DMatrix::zeros(2 * nb, n);
    for bus in 0..nb {
        let s = layout.dgu_state(bus);
        for axis in 0..2 {
            e[(2 * bus + axis, s + axis)] = 1.0;
            e[(2 * bus + axis, s + 2 + axis)] = cfg.droop;
        }
    }
    let b_vt = b_d.columns(0, 2 * nb);
    let mut cl = DMatrix::zeros(n + 2 * nb, n + 2 * nb);
    cl.view_mut((0, 0), (n, n)).copy_from(&(a_d - &b_vt * &e * cfg.kp));
    cl.view_mut((0, n), (n, 2 * nb)).copy_from(&b_vt);
    cl.view_mut((n, 0), (2 * nb, n)).copy_from(&(&e * (-cfg.ki * dt)));
    cl.view_mut((n, n), (2 * nb, 2 * nb)).fill_with_identity();
    cl
}

/// Steady state of the regulated plant: solves `A x + B_vt v_t + B_l i_l = 0`
/// together with zero regulation error at every bus. Returns the state and
/// the terminal voltages (which are also the integrator values).
pub fn regulated_equilibrium(
    plant: &CoupledPlant,
    cfg: &RegulatorConfig,
    loads: &[DqSample],
) -> Result<(DVector<f64>, Vec<DqSample>)> {
    let layout = &plant.layout;
    let (n, nb) = (layout.n_states(), layout.n_buses());
    let dim = n + 2 * nb;
    let mut lhs = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    lhs.view_mut((0, 0), (n, n)).copy_from(&plant.model.a);
    lhs.view_mut((0, n), (n, 2 * nb)).copy_from(&plant.model.b.columns(0, 2 * nb));
    let load_vec = DVector::from_iterator(2 * nb, loads.iter().flat_map(|l| [l.d, l.q]));
    rhs.rows_mut(0, n).copy_from(&(-(plant.model.b.columns(2 * nb, 2 * nb) * load_vec)));
    for bus in 0..nb {
        let s = layout.dgu_state(bus);
        for axis in 0..2 {
            let row = n + 2 * bus + axis;
            lhs[(row, s + axis)] = 1.0;
            lhs[(row, s + 2 + axis)] = cfg.droop;
        }
        rhs[n + 2 * bus] = cfg.v_nominal;
    }
    let sol = lhs.lu().solve(&rhs).ok_or(Error::SingularStateMatrix {
        condition: f64::INFINITY,
    })?;
    let x = sol.rows(0, n).into_owned();
    let vt = (0..nb).map(|b| DqSample::new(sol[n + 2 * b], sol[n + 2 * b + 1])).collect();
    Ok((x, vt))
}

fn plant_input(vt: &[DqSample], loads: &[DqSample]) -> DVector<f64> {
    DVector::from_iterator(
        2 * (vt.len() + loads.len()),
        vt.iter().chain(loads).flat_map(|s| [s.d, s.q]),
    )
}

/// Integrates the coupled plant and returns the ground-truth trace.
pub fn run_plant(cfg: &SimConfig) -> Result<Trace> {
    cfg.validate()?;
    let plant = build_coupled_plant(&cfg.topology)?;
    let layout = &plant.layout;
    let (n, nb) = (layout.n_states(), layout.n_buses());
    let disc = discretize_exact(&plant.model, cfg.plant_step)?;
    let dt = cfg.plant_step;

    let mut loads = cfg.initial_loads.clone();
    let (mut x, mut regulators, fixed_vt) = match &cfg.control {
        TerminalVoltageControl::Regulated(rc) => {
            let rho = spectral_radius(&closed_loop_matrix(&plant, &disc.a_d, &disc.b_d, rc, dt));
            if rho >= 1.0 {
                return Err(Error::UnstableClosedLoop { spectral_radius: rho });
            }
            let (x0, vt0) = match cfg.initial_state {
                InitialState::Equilibrium => regulated_equilibrium(&plant, rc, &loads)?,
                InitialState::Zero => (DVector::zeros(n), vec![DqSample::ZERO; nb]),
            };
            let regs = vt0.into_iter().map(|v| VoltageRegulator::new(*rc, dt, v)).collect();
            (x0, regs, Vec::new())
        }
        TerminalVoltageControl::Fixed(vt) => {
            let rho = spectral_radius(&disc.a_d);
            if rho >= 1.0 {
                return Err(Error::UnstableClosedLoop { spectral_radius: rho });
            }
            let x0 = match cfg.initial_state {
                InitialState::Equilibrium => plant.model.equilibrium(&plant_input(vt, &loads))?,
                InitialState::Zero => DVector::zeros(n),
            };
            (x0, Vec::new(), vt.clone())
        }
    };

    let nominal = {
        let mut m = x.amax().max(1.0);
        if let TerminalVoltageControl::Regulated(rc) = &cfg.control {
            m = m.max(rc.v_nominal);
        }
        m.max(fixed_vt.iter().map(|v| v.magnitude()).fold(0.0, f64::max))
    };
    let limit = DIVERGENCE_FACTOR * nominal;

    let samplers = |pick: fn(&NoiseSpec) -> &DMatrix<f64>, specs: &[NoiseSpec]| -> Result<Vec<GaussianSampler>> {
        specs.iter().map(|s| GaussianSampler::new(pick(s))).collect()
    };
    let q_dgu = samplers(|s| &s.q, &cfg.noise.dgus)?;
    let r_dgu = samplers(|s| &s.r, &cfg.noise.dgus)?;
    let m_dgu = samplers(|s| &s.m, &cfg.noise.dgus)?;
    let q_line = samplers(|s| &s.q, &cfg.noise.lines)?;
    let r_line = samplers(|s| &s.r, &cfg.noise.lines)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let step_ns = to_nanos(dt);
    let event_ns: Vec<u64> = cfg.events.events().iter().map(|e| to_nanos(e.time)).collect();
    let mut next_event = 0;
    let n_records = cfg.n_records();
    let mut records = Vec::with_capacity(n_records);

    for k in 0..n_records {
        let t_ns = k as u64 * step_ns;
        let t = from_nanos(t_ns);
        while next_event < event_ns.len() && event_ns[next_event] <= t_ns {
            let e = &cfg.events.events()[next_event];
            loads[e.bus - 1] = loads[e.bus - 1] + e.load_delta;
            next_event += 1;
        }

        if let Some((i, v)) = x.iter().enumerate().find(|(_, v)| !(v.abs() <= limit)) {
            return Err(Error::Unstable {
                t,
                channel: plant.model.state_labels[i].clone(),
                value: v.abs(),
            });
        }

        let vt: Vec<DqSample> = if regulators.is_empty() {
            fixed_vt.clone()
        } else {
            regulators
                .iter_mut()
                .enumerate()
                .map(|(bus, reg)| {
                    let s = layout.dgu_state(bus);
                    reg.regulate([x[s], x[s + 1], x[s + 2], x[s + 3]])
                })
                .collect()
        };

        let mut true_inputs = Vec::with_capacity(4 * nb);
        for bus in 0..nb {
            let io = layout.bus_output_current(&x, loads[bus], bus);
            true_inputs.extend_from_slice(&[vt[bus].d, vt[bus].q, io.d, io.q]);
        }

        let mut noisy = x.clone();
        for bus in 0..nb {
            let s = layout.dgu_state(bus);
            noisy.rows_mut(s, 4).add_assign(&r_dgu[bus].sample(&mut rng));
        }
        for line in 0..layout.n_lines() {
            let s = layout.line_state(line);
            noisy.rows_mut(s, 2).add_assign(&r_line[line].sample(&mut rng));
        }
        let mut inputs = true_inputs.clone();
        for bus in 0..nb {
            let m = m_dgu[bus].sample(&mut rng);
            for c in 0..4 {
                inputs[4 * bus + c] += m[c];
            }
        }

        records.push(TraceRecord {
            t,
            true_state: x.iter().copied().collect(),
            noisy_measurement: noisy.iter().copied().collect(),
            true_inputs,
            inputs,
        });

        let u = plant_input(&vt, &loads);
        let mut next = &disc.a_d * &x + &disc.b_d * u;
        for bus in 0..nb {
            let s = layout.dgu_state(bus);
            next.rows_mut(s, 4).add_assign(&q_dgu[bus].sample(&mut rng));
        }
        for line in 0..layout.n_lines() {
            let s = layout.line_state(line);
            next.rows_mut(s, 2).add_assign(&q_line[line].sample(&mut rng));
        }
        x = next;
    }

    Ok(Trace {
        state_labels: plant.model.state_labels.clone(),
        input_labels: local_input_labels(nb),
        sample_period: dt,
        records,
    })
}
