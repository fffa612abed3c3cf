//! Continuous-time dq-frame models of DGU buses, lines and the coupled plant.
//!
//! DGU bus (RLC output filter), states `[v_d, v_q, i_td, i_tq]`, inputs
//! `[v_td, v_tq, i_od, i_oq]`:
//!
//! ```text
//!     | 0     w    1/C   0   |        | 0    0   -1/C   0   |
//! A = | -w    0    0     1/C |    B = | 0    0    0    -1/C |
//!     | -1/L  0   -R/L   w   |        | 1/L  0    0     0   |
//!     | 0    -1/L -w    -R/L |        | 0    1/L  0     0   |
//! ```
//!
//! Line `i -> j`, states `[i_d, i_q]`, input `v_i - v_j`:
//! `A = [[-R/L, w], [-w, -R/L]]`, `B = I / L`. The off-diagonal signs follow
//! from splitting `di/dt + jw i = (-R i + v_ij) / L` into real and imaginary
//! parts, the same rotation pattern as the DGU block.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::DqSample;

/// Filter parameters of one distributed generation unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DguParams {
    /// Filter resistance, ohm.
    pub r_t: f64,
    /// Filter inductance, henry.
    pub l_t: f64,
    /// Bus capacitance, farad.
    pub c_t: f64,
}

impl DguParams {
    pub fn validate(&self, field: &str) -> Result<()> {
        positive(&format!("{field}.r_t"), self.r_t)?;
        positive(&format!("{field}.l_t"), self.l_t)?;
        positive(&format!("{field}.c_t"), self.c_t)
    }
}

/// Series RL line between two buses (1-based bus numbers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineParams {
    pub from_bus: usize,
    pub to_bus: usize,
    /// Resistance, ohm.
    pub r: f64,
    /// Inductance, henry.
    pub l: f64,
}

impl LineParams {
    pub fn validate(&self, field: &str) -> Result<()> {
        positive(&format!("{field}.r"), self.r)?;
        positive(&format!("{field}.l"), self.l)?;
        if self.from_bus == self.to_bus {
            return Err(Error::invalid(
                format!("{field}.to_bus"),
                "line endpoints must differ",
            ));
        }
        Ok(())
    }

    /// Channel suffix such as `12` for the line between buses 1 and 2.
    pub fn suffix(&self) -> String {
        format!("{}{}", self.from_bus, self.to_bus)
    }
}

fn positive(field: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be positive and finite, got {value}")))
    }
}

/// Buses, their DGUs, the lines between them and the synchronous frequency.
///
/// Every bus hosts exactly one DGU. Lines are stored with `from_bus < to_bus`
/// and their current is positive flowing from the lower-numbered bus.
#[derive(Debug, Clone, PartialEq)]
pub struct MicrogridTopology {
    dgus: Vec<DguParams>,
    lines: Vec<LineParams>,
    omega: f64,
}

impl MicrogridTopology {
    pub fn new(dgus: Vec<DguParams>, lines: Vec<LineParams>, omega: f64) -> Result<Self> {
        if dgus.is_empty() {
            return Err(Error::Topology("at least one bus is required".into()));
        }
        if !omega.is_finite() || omega < 0.0 {
            return Err(Error::invalid("omega", format!("must be finite and >= 0, got {omega}")));
        }
        for (i, dgu) in dgus.iter().enumerate() {
            dgu.validate(&format!("dgus[{i}]"))?;
        }
        let n = dgus.len();
        let mut normalized: Vec<LineParams> = Vec::with_capacity(lines.len());
        for (k, line) in lines.iter().enumerate() {
            line.validate(&format!("lines[{k}]"))?;
            for bus in [line.from_bus, line.to_bus] {
                if bus == 0 || bus > n {
                    return Err(Error::Topology(format!(
                        "lines[{k}] references bus {bus}, valid buses are 1..={n}"
                    )));
                }
            }
            let mut line = *line;
            if line.from_bus > line.to_bus {
                std::mem::swap(&mut line.from_bus, &mut line.to_bus);
            }
            if normalized
                .iter()
                .any(|l| l.from_bus == line.from_bus && l.to_bus == line.to_bus)
            {
                return Err(Error::Topology(format!(
                    "duplicate line between buses {} and {}",
                    line.from_bus, line.to_bus
                )));
            }
            normalized.push(line);
        }
        let topology = Self {
            dgus,
            lines: normalized,
            omega,
        };
        if !topology.is_connected() {
            return Err(Error::Topology("bus graph is not connected".into()));
        }
        Ok(topology)
    }

    pub fn n_buses(&self) -> usize {
        self.dgus.len()
    }

    pub fn dgus(&self) -> &[DguParams] {
        &self.dgus
    }

    pub fn lines(&self) -> &[LineParams] {
        &self.lines
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    fn is_connected(&self) -> bool {
        let n = self.n_buses();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(bus) = stack.pop() {
            for line in &self.lines {
                let (a, b) = (line.from_bus - 1, line.to_bus - 1);
                let next = if a == bus {
                    b
                } else if b == bus {
                    a
                } else {
                    continue;
                };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// `dx/dt = A x + B u` with named channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousLtiModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
}

impl ContinuousLtiModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        state_labels: Vec<String>,
        input_labels: Vec<String>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dims("state matrix", format!("{n}x{n}"), format!("{n}x{}", a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::dims("input matrix rows", n, b.nrows()));
        }
        if state_labels.len() != n {
            return Err(Error::dims("state labels", n, state_labels.len()));
        }
        if input_labels.len() != b.ncols() {
            return Err(Error::dims("input labels", b.ncols(), input_labels.len()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("model", "matrix entries must be finite"));
        }
        Ok(Self {
            a,
            b,
            state_labels,
            input_labels,
        })
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Appends `suffix` to every channel label.
    pub fn suffixed(mut self, suffix: &str) -> Self {
        for label in self.state_labels.iter_mut().chain(self.input_labels.iter_mut()) {
            label.push_str(suffix);
        }
        self
    }

    /// Solves `A x + B u = 0` for the equilibrium state.
    pub fn equilibrium(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.n_inputs() {
            return Err(Error::dims("equilibrium input", self.n_inputs(), u.len()));
        }
        let rhs = -(&self.b * u);
        self.a
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or(Error::SingularStateMatrix {
                condition: f64::INFINITY,
            })
    }
}

fn labels(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Four-state DGU bus model.
pub fn build_dgu_model(p: &DguParams, omega: f64) -> Result<ContinuousLtiModel> {
    p.validate("dgu")?;
    let (inv_c, inv_l, r_over_l) = (1.0 / p.c_t, 1.0 / p.l_t, p.r_t / p.l_t);
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        0.0,     omega,   inv_c,     0.0,
        -omega,  0.0,     0.0,       inv_c,
        -inv_l,  0.0,     -r_over_l, omega,
        0.0,     -inv_l,  -omega,    -r_over_l,
    ]);
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(4, 4, &[
        0.0,    0.0,    -inv_c, 0.0,
        0.0,    0.0,    0.0,    -inv_c,
        inv_l,  0.0,    0.0,    0.0,
        0.0,    inv_l,  0.0,    0.0,
    ]);
    ContinuousLtiModel::new(
        a,
        b,
        labels(&["v_d", "v_q", "i_td", "i_tq"]),
        labels(&["v_td", "v_tq", "i_od", "i_oq"]),
    )
}

/// Two-state line model driven by the voltage difference across the line.
pub fn build_line_model(p: &LineParams, omega: f64) -> Result<ContinuousLtiModel> {
    positive("line.r", p.r)?;
    positive("line.l", p.l)?;
    let (inv_l, r_over_l) = (1.0 / p.l, p.r / p.l);
    let a = DMatrix::from_row_slice(2, 2, &[-r_over_l, omega, -omega, -r_over_l]);
    let b = DMatrix::from_diagonal_element(2, 2, inv_l);
    ContinuousLtiModel::new(a, b, labels(&["i_d", "i_q"]), labels(&["v_d", "v_q"]))
}

/// Index bookkeeping for the stacked plant vector.
///
/// States: 4 per bus in bus order, then 2 per line in line order.
/// Inputs: terminal voltage `(v_td, v_tq)` per bus, then load current
/// `(i_ld, i_lq)` per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantLayout {
    n_buses: usize,
    /// Zero-based (from, to) bus index per line.
    line_ends: Vec<(usize, usize)>,
}

impl PlantLayout {
    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn n_lines(&self) -> usize {
        self.line_ends.len()
    }

    pub fn n_states(&self) -> usize {
        4 * self.n_buses + 2 * self.line_ends.len()
    }

    pub fn n_inputs(&self) -> usize {
        4 * self.n_buses
    }

    /// First state index of the DGU block of zero-based `bus`.
    pub fn dgu_state(&self, bus: usize) -> usize {
        4 * bus
    }

    pub fn line_state(&self, line: usize) -> usize {
        4 * self.n_buses + 2 * line
    }

    pub fn terminal_input(&self, bus: usize) -> usize {
        2 * bus
    }

    pub fn load_input(&self, bus: usize) -> usize {
        2 * self.n_buses + 2 * bus
    }

    pub fn line_ends(&self) -> &[(usize, usize)] {
        &self.line_ends
    }

    /// Net current leaving the bus capacitor node: load plus outgoing minus
    /// incoming line currents.
    pub fn bus_output_current(&self, x: &DVector<f64>, load: DqSample, bus: usize) -> DqSample {
        let mut io = load;
        for (k, &(from, to)) in self.line_ends.iter().enumerate() {
            let s = self.line_state(k);
            let current = DqSample::new(x[s], x[s + 1]);
            if from == bus {
                io = io + current;
            } else if to == bus {
                io = io - current;
            }
        }
        io
    }

    pub fn bus_voltage(&self, x: &DVector<f64>, bus: usize) -> DqSample {
        let s = self.dgu_state(bus);
        DqSample::new(x[s], x[s + 1])
    }
}

/// Whole-microgrid model: all DGU buses and lines with the bus output current
/// resolved into loads and line currents.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPlant {
    pub model: ContinuousLtiModel,
    pub layout: PlantLayout,
}

pub fn build_coupled_plant(topology: &MicrogridTopology) -> Result<CoupledPlant> {
    let n_buses = topology.n_buses();
    let layout = PlantLayout {
        n_buses,
        line_ends: topology
            .lines()
            .iter()
            .map(|l| (l.from_bus - 1, l.to_bus - 1))
            .collect(),
    };
    let (n, m) = (layout.n_states(), layout.n_inputs());
    let omega = topology.omega();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut state_labels = Vec::with_capacity(n);
    let mut input_labels = vec![String::new(); m];

    for (bus, params) in topology.dgus().iter().enumerate() {
        let dgu = build_dgu_model(params, omega)?.suffixed(&(bus + 1).to_string());
        let s = layout.dgu_state(bus);
        a.view_mut((s, s), (4, 4)).copy_from(&dgu.a);
        b.view_mut((s, layout.terminal_input(bus)), (4, 2))
            .copy_from(&dgu.b.columns(0, 2));
        b.view_mut((s, layout.load_input(bus)), (4, 2))
            .copy_from(&dgu.b.columns(2, 2));
        state_labels.extend(dgu.state_labels);
        input_labels[layout.terminal_input(bus)] = dgu.input_labels[0].clone();
        input_labels[layout.terminal_input(bus) + 1] = dgu.input_labels[1].clone();
        input_labels[layout.load_input(bus)] = format!("i_ld{}", bus + 1);
        input_labels[layout.load_input(bus) + 1] = format!("i_lq{}", bus + 1);
    }

    for (k, params) in topology.lines().iter().enumerate() {
        let line = build_line_model(params, omega)?.suffixed(&params.suffix());
        let s = layout.line_state(k);
        let (from, to) = layout.line_ends[k];
        let (vf, vt) = (layout.dgu_state(from), layout.dgu_state(to));
        a.view_mut((s, s), (2, 2)).copy_from(&line.a);
        let inv_l = 1.0 / params.l;
        for axis in 0..2 {
            // v_ij = v_i - v_j drives the line current.
            a[(s + axis, vf + axis)] += inv_l;
            a[(s + axis, vt + axis)] -= inv_l;
            // The line current leaves bus i and enters bus j.
            a[(vf + axis, s + axis)] -= 1.0 / topology.dgus()[from].c_t;
            a[(vt + axis, s + axis)] += 1.0 / topology.dgus()[to].c_t;
        }
        state_labels.extend(line.state_labels);
    }

    Ok(CoupledPlant {
        model: ContinuousLtiModel::new(a, b, state_labels, input_labels)?,
        layout,
    })
}

/// Active and reactive power at a bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlow {
    pub p: f64,
    pub q: f64,
}

/// `P = 3/2 (v_d i_d - v_q i_q)`, `Q = 3/2 (v_d i_q + v_q i_d)`.
///
/// This is the non-conjugate product `3/2 Re/Im(v i)`, not the usual
/// `3/2 v i*`. Callers wanting the conjugate convention should negate `i.q`.
pub fn power_flow(v: DqSample, i: DqSample) -> PowerFlow {
    PowerFlow {
        p: 1.5 * (v.d * i.d - v.q * i.q),
        q: 1.5 * (v.d * i.q + v.q * i.d),
    }
}

/// Steady-state mismatch of a DGU bus:
/// `[v_t - v - (R + jwL) i_t ; i_t - i_o - jwC v]` as four real components.
/// Zero exactly when `(x, u)` is an equilibrium of [`build_dgu_model`].
pub fn steady_state_residual_dgu(x: &[f64; 4], u: &[f64; 4], p: &DguParams, omega: f64) -> [f64; 4] {
    let [v_d, v_q, i_td, i_tq] = *x;
    let [v_td, v_tq, i_od, i_oq] = *u;
    let it = DqSample::new(i_td, i_tq);
    let v = DqSample::new(v_d, v_q);
    let drop = it.mul_complex(p.r_t, omega * p.l_t);
    let shunt = v.mul_complex(0.0, omega * p.c_t);
    [
        v_td - v_d - drop.d,
        v_tq - v_q - drop.q,
        i_td - i_od - shunt.d,
        i_tq - i_oq - shunt.q,
    ]
}

/// Steady-state mismatch of a line: `v_i - v_j - (R + jwL) i`.
pub fn steady_state_residual_line(
    i: DqSample,
    v_i: DqSample,
    v_j: DqSample,
    p: &LineParams,
    omega: f64,
) -> DqSample {
    v_i - v_j - i.mul_complex(p.r, omega * p.l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const OMEGA: f64 = 2.0 * PI * 60.0;

    fn dgu1() -> DguParams {
        DguParams {
            r_t: 1.1e-3,
            l_t: 90e-6,
            c_t: 50e-6,
        }
    }

    fn line12() -> LineParams {
        LineParams {
            from_bus: 1,
            to_bus: 2,
            r: 1.1,
            l: 0.52e-3,
        }
    }

    fn fig2_topology() -> MicrogridTopology {
        MicrogridTopology::new(
            vec![
                dgu1(),
                DguParams { r_t: 1.3e-3, l_t: 100e-6, c_t: 55e-6 },
                DguParams { r_t: 0.9e-3, l_t: 110e-6, c_t: 60e-6 },
            ],
            vec![
                line12(),
                LineParams { from_bus: 1, to_bus: 3, r: 0.9, l: 0.44e-3 },
                LineParams { from_bus: 2, to_bus: 3, r: 1.3, l: 0.67e-3 },
            ],
            OMEGA,
        )
        .unwrap()
    }

    #[test]
    fn dgu1_table_values() {
        let m = build_dgu_model(&dgu1(), OMEGA).unwrap();
        // 1/C = 1/50e-6, R/L = 1.1e-3/90e-6, omega = 2 pi 60.
        assert!((m.a[(0, 2)] - 20_000.0).abs() < 1e-9);
        assert!((m.a[(2, 2)] + 12.222_222_222_222_22).abs() < 1e-9);
        assert!((m.a[(0, 1)] - 376.991_118_430_775_2).abs() < 1e-9);
        assert!((m.b[(2, 0)] - 1.0 / 90e-6).abs() < 1e-6);
        assert_eq!(m.state_labels, ["v_d", "v_q", "i_td", "i_tq"]);
    }

    #[test]
    fn dgu_matrix_structure() {
        let p = DguParams { r_t: 0.3, l_t: 2e-3, c_t: 1e-4 };
        let w = 100.0;
        let m = build_dgu_model(&p, w).unwrap();
        let (c, l, r) = (p.c_t, p.l_t, p.r_t);
        #[rustfmt::skip]
        let expected_a = [
            [0.0, w, 1.0 / c, 0.0],
            [-w, 0.0, 0.0, 1.0 / c],
            [-1.0 / l, 0.0, -r / l, w],
            [0.0, -1.0 / l, -w, -r / l],
        ];
        #[rustfmt::skip]
        let expected_b = [
            [0.0, 0.0, -1.0 / c, 0.0],
            [0.0, 0.0, 0.0, -1.0 / c],
            [1.0 / l, 0.0, 0.0, 0.0],
            [0.0, 1.0 / l, 0.0, 0.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.a[(i, j)], expected_a[i][j], "A[{i}][{j}]");
                assert_eq!(m.b[(i, j)], expected_b[i][j], "B[{i}][{j}]");
            }
        }
    }

    #[test]
    fn zero_omega_decouples_axes() {
        let m = build_dgu_model(&dgu1(), 0.0).unwrap();
        for (d, q) in [(0, 1), (0, 3), (2, 1), (2, 3)] {
            assert_eq!(m.a[(d, q)], 0.0);
            assert_eq!(m.a[(q, d)], 0.0);
        }
        let line = build_line_model(&line12(), 0.0).unwrap();
        let k = -1.1 / 0.52e-3;
        assert_eq!(line.a, DMatrix::from_row_slice(2, 2, &[k, 0.0, 0.0, k]));
    }

    #[test]
    fn rejects_non_positive_parameters() {
        for p in [
            DguParams { r_t: 0.0, ..dgu1() },
            DguParams { l_t: -1.0, ..dgu1() },
            DguParams { c_t: f64::NAN, ..dgu1() },
        ] {
            assert!(matches!(build_dgu_model(&p, OMEGA), Err(Error::InvalidParameter { .. })));
        }
        assert!(build_line_model(&LineParams { r: 0.0, ..line12() }, OMEGA).is_err());
        assert!(build_line_model(&LineParams { l: -1e-3, ..line12() }, OMEGA).is_err());
    }

    #[test]
    fn line12_table_values() {
        let m = build_line_model(&line12(), OMEGA).unwrap();
        assert!((m.a[(0, 0)] + 2115.384_615_384_615).abs() < 1e-9);
        assert!((m.b[(0, 0)] - 1923.076_923_076_923).abs() < 1e-9);
        assert_eq!(m.b[(0, 1)], 0.0);
        assert_eq!(m.a[(0, 1)], OMEGA);
        assert_eq!(m.a[(1, 0)], -OMEGA);
    }

    proptest! {
        #[test]
        fn line_rotation_is_skew(r in 1e-3f64..10.0, l in 1e-5f64..1e-1, w in 0.0f64..1000.0) {
            let m = build_line_model(&LineParams { from_bus: 1, to_bus: 2, r, l }, w).unwrap();
            prop_assert_eq!(m.a[(0, 1)], w);
            prop_assert_eq!(m.a[(1, 0)], -w);
            prop_assert_eq!(m.a[(0, 0)], m.a[(1, 1)]);
        }

        #[test]
        fn power_flow_is_bilinear(vd in -10.0f64..10.0, vq in -10.0f64..10.0,
                                  id in -10.0f64..10.0, iq in -10.0f64..10.0, k in -5.0f64..5.0) {
            let base = power_flow(DqSample::new(vd, vq), DqSample::new(id, iq));
            let scaled = power_flow(DqSample::new(vd, vq) * k, DqSample::new(id, iq));
            prop_assert!((scaled.p - k * base.p).abs() < 1e-9);
            prop_assert!((scaled.q - k * base.q).abs() < 1e-9);
        }
    }

    #[test]
    fn coupled_plant_dimensions_and_labels() {
        let plant = build_coupled_plant(&fig2_topology()).unwrap();
        assert_eq!(plant.model.n_states(), 18);
        assert_eq!(plant.model.n_inputs(), 12);
        assert_eq!(&plant.model.state_labels[..4], ["v_d1", "v_q1", "i_td1", "i_tq1"]);
        assert_eq!(&plant.model.state_labels[12..], ["i_d12", "i_q12", "i_d13", "i_q13", "i_d23", "i_q23"]);
        assert_eq!(&plant.model.input_labels[..2], ["v_td1", "v_tq1"]);
        assert_eq!(&plant.model.input_labels[6..8], ["i_ld1", "i_lq1"]);
    }

    #[test]
    fn coupled_plant_line_coupling_signs() {
        let topo = fig2_topology();
        let plant = build_coupled_plant(&topo).unwrap();
        let a = &plant.model.a;
        // Line 1-2 d-current is state 12. Expanding dv_d1/dt = ... - i_o1,d / C1
        // with i_o1 = i_load + i_12 + i_13 gives -1/C1; bus 2 receives it: +1/C2.
        assert_eq!(a[(0, 12)], -1.0 / 50e-6);
        assert_eq!(a[(4, 12)], 1.0 / 55e-6);
        assert_eq!(a[(8, 12)], 0.0);
        assert_eq!(a[(1, 13)], -1.0 / 50e-6);
        // di_12/dt gets (v_1 - v_2)/L12.
        assert_eq!(a[(12, 0)], 1.0 / 0.52e-3);
        assert_eq!(a[(12, 4)], -1.0 / 0.52e-3);
        // Bus 3 receives both 1-3 and 2-3 currents.
        assert_eq!(a[(8, 14)], 1.0 / 60e-6);
        assert_eq!(a[(8, 16)], 1.0 / 60e-6);
        assert_eq!(a[(4, 16)], -1.0 / 55e-6);
    }

    #[test]
    fn single_bus_plant_equals_dgu_model() {
        let topo = MicrogridTopology::new(vec![dgu1()], vec![], OMEGA).unwrap();
        let plant = build_coupled_plant(&topo).unwrap();
        let dgu = build_dgu_model(&dgu1(), OMEGA).unwrap();
        assert_eq!(plant.model.a, dgu.a);
        assert_eq!(plant.model.b, dgu.b);
    }

    #[test]
    fn topology_validation() {
        let d = vec![dgu1(), dgu1(), dgu1()];
        let disconnected = MicrogridTopology::new(d.clone(), vec![line12()], OMEGA);
        assert!(matches!(disconnected, Err(Error::Topology(_))));
        let duplicate = MicrogridTopology::new(
            d[..2].to_vec(),
            vec![line12(), LineParams { from_bus: 2, to_bus: 1, ..line12() }],
            OMEGA,
        );
        assert!(matches!(duplicate, Err(Error::Topology(_))));
        let out_of_range = MicrogridTopology::new(
            d[..2].to_vec(),
            vec![LineParams { to_bus: 3, ..line12() }],
            OMEGA,
        );
        assert!(matches!(out_of_range, Err(Error::Topology(_))));
        let self_loop = MicrogridTopology::new(
            d[..2].to_vec(),
            vec![LineParams { to_bus: 1, ..line12() }],
            OMEGA,
        );
        assert!(self_loop.is_err());
        // Reversed endpoints are normalized to low -> high.
        let reversed = MicrogridTopology::new(
            d[..2].to_vec(),
            vec![LineParams { from_bus: 2, to_bus: 1, ..line12() }],
            OMEGA,
        )
        .unwrap();
        assert_eq!((reversed.lines()[0].from_bus, reversed.lines()[0].to_bus), (1, 2));
    }

    #[test]
    fn power_flow_examples() {
        let pf = power_flow(DqSample::new(1.0, 0.0), DqSample::new(1.0, 0.0));
        assert_eq!((pf.p, pf.q), (1.5, 0.0));
        let pf = power_flow(DqSample::new(0.0, 1.0), DqSample::new(1.0, 0.0));
        assert_eq!((pf.p, pf.q), (0.0, 1.5));
        let pf = power_flow(DqSample::new(2.0, 1.0), DqSample::new(3.0, -1.0));
        assert_eq!((pf.p, pf.q), (10.5, 1.5));
    }

    #[test]
    fn dgu_residual_at_equilibrium() {
        let p = dgu1();
        assert_eq!(steady_state_residual_dgu(&[0.0; 4], &[0.0; 4], &p, OMEGA), [0.0; 4]);

        let model = build_dgu_model(&p, OMEGA).unwrap();
        let u = [11_267.7, -35.0, 300.0, -60.0];
        let x = model.equilibrium(&DVector::from_row_slice(&u)).unwrap();
        let x: [f64; 4] = [x[0], x[1], x[2], x[3]];
        let res = steady_state_residual_dgu(&x, &u, &p, OMEGA);
        assert!(res.iter().all(|r| r.abs() < 1e-9), "{res:?}");

        // Perturbing v_d by eps moves the Eq.-5 d component by -eps and the
        // shunt q component by -w C eps.
        let eps = 0.25;
        let mut xp = x;
        xp[0] += eps;
        let rp = steady_state_residual_dgu(&xp, &u, &p, OMEGA);
        assert!((rp[0] - res[0] + eps).abs() < 1e-9);
        assert!((rp[3] - res[3] + OMEGA * p.c_t * eps).abs() < 1e-12);
        assert!((rp[1] - res[1]).abs() < 1e-12);
        assert!((rp[2] - res[2]).abs() < 1e-12);
    }

    #[test]
    fn line_residual_at_equilibrium() {
        let p = line12();
        assert_eq!(
            steady_state_residual_line(DqSample::ZERO, DqSample::ZERO, DqSample::ZERO, &p, OMEGA),
            DqSample::ZERO
        );
        let (vi, vj) = (DqSample::new(11_250.0, -20.0), DqSample::new(11_210.0, 5.0));
        // Oracle: solve the 2x2 real system of (R + jwL) i = v_i - v_j.
        let (r, x) = (p.r, OMEGA * p.l);
        let dv = vi - vj;
        let det = r * r + x * x;
        let i = DqSample::new((r * dv.d + x * dv.q) / det, (r * dv.q - x * dv.d) / det);
        let res = steady_state_residual_line(i, vi, vj, &p, OMEGA);
        assert!(res.magnitude() < 1e-9);

        let line = build_line_model(&p, OMEGA).unwrap();
        let xs = line.equilibrium(&DVector::from_row_slice(&[dv.d, dv.q])).unwrap();
        assert!((xs[0] - i.d).abs() < 1e-9 && (xs[1] - i.q).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn line_residual_is_affine(
            a in prop::array::uniform6(-100.0f64..100.0),
            b in prop::array::uniform6(-100.0f64..100.0),
        ) {
            let p = line12();
            let f = |v: [f64; 6]| steady_state_residual_line(
                DqSample::new(v[0], v[1]), DqSample::new(v[2], v[3]), DqSample::new(v[4], v[5]), &p, OMEGA);
            let sum: [f64; 6] = std::array::from_fn(|k| a[k] + b[k]);
            let lhs = f(sum);
            let rhs = f(a) + f(b);
            prop_assert!((lhs - rhs).magnitude() < 1e-9);
        }

        #[test]
        fn equilibrium_drives_residuals_to_zero(
            vt in prop::array::uniform2(-2e4f64..2e4),
            io in prop::array::uniform2(-500.0f64..500.0),
        ) {
            let p = dgu1();
            let m = build_dgu_model(&p, OMEGA).unwrap();
            let u = [vt[0], vt[1], io[0], io[1]];
            let x = m.equilibrium(&DVector::from_row_slice(&u)).unwrap();
            let res = steady_state_residual_dgu(&[x[0], x[1], x[2], x[3]], &u, &p, OMEGA);
            prop_assert!(res.iter().all(|r| r.abs() < 1e-9), "{:?}", res);
        }
    }
}
