//! Continuous-to-discrete conversion of LTI models.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ContinuousLtiModel;

/// Largest condition number of `A_c` accepted by [`discretize_exact`].
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscretizationMethod {
    /// `A_d = I + T A`, `B_d = T B`.
    Euler,
    /// Zero-order hold: `A_d = e^{T A}`, `B_d = A^-1 (e^{T A} - I) B`.
    Exact,
}

impl fmt::Display for DiscretizationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscretizationMethod::Euler => "euler",
            DiscretizationMethod::Exact => "exact",
        })
    }
}

impl FromStr for DiscretizationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(DiscretizationMethod::Euler),
            "exact" => Ok(DiscretizationMethod::Exact),
            other => Err(Error::invalid(
                "discretization",
                format!("expected `euler` or `exact`, got `{other}`"),
            )),
        }
    }
}

/// `x[k+1] = A_d x[k] + B_d u[k]` sampled every `t_s` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLtiModel {
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub t_s: f64,
    pub method: DiscretizationMethod,
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
}

impl DiscreteLtiModel {
    pub fn n_states(&self) -> usize {
        self.a_d.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b_d.ncols()
    }
}

pub fn discretize(
    m: &ContinuousLtiModel,
    t_s: f64,
    method: DiscretizationMethod,
) -> Result<DiscreteLtiModel> {
    match method {
        DiscretizationMethod::Euler => discretize_euler(m, t_s),
        DiscretizationMethod::Exact => discretize_exact(m, t_s),
    }
}

fn check_period(t_s: f64) -> Result<()> {
    if t_s.is_finite() && t_s > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("t_s", format!("sampling period must be positive, got {t_s}")))
    }
}

pub fn discretize_euler(m: &ContinuousLtiModel, t_s: f64) -> Result<DiscreteLtiModel> {
    check_period(t_s)?;
    let n = m.n_states();
    Ok(DiscreteLtiModel {
        a_d: DMatrix::identity(n, n) + &m.a * t_s,
        b_d: &m.b * t_s,
        t_s,
        method: DiscretizationMethod::Euler,
        state_labels: m.state_labels.clone(),
        input_labels: m.input_labels.clone(),
    })
}

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn discretize_exact(m: &ContinuousLtiModel, t_s: f64) -> Result<DiscreteLtiModel> {
    check_period(t_s)?;
    let n = m.n_states();
    let condition = condition_number(&m.a);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularStateMatrix { condition });
    }
    let a_d = matrix_exponential(&(&m.a * t_s));
    let rhs = (&a_d - DMatrix::identity(n, n)) * &m.b;
    let b_d = m
        .a
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularStateMatrix { condition })?;
    Ok(DiscreteLtiModel {
        a_d,
        b_d,
        t_s,
        method: DiscretizationMethod::Exact,
        state_labels: m.state_labels.clone(),
        input_labels: m.input_labels.clone(),
    })
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Pade coefficients and 1-norm thresholds from Higham, "The scaling and
// squaring method for the matrix exponential revisited" (2005).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(f64, &[f64]); 4] = [
    (1.495585217958292e-2, &PADE3),
    (2.539398330063230e-1, &PADE5),
    (9.504178996162932e-1, &PADE7),
    (2.097847961257068, &PADE9),
];
const THETA13: f64 = 5.371920351148152;

/// `e^A` by scaling and squaring with a diagonal Pade approximant of degree
/// 3, 5, 7, 9 or 13 chosen from the 1-norm of `A`.
///
/// # Panics
/// If `a` is not square.
pub fn matrix_exponential(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "matrix exponential needs a square matrix");
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    if n == 0 {
        return ident;
    }
    let norm = norm1(a);

    for (theta, coeffs) in THETA {
        if norm <= theta {
            return pade_low(a, coeffs, &ident);
        }
    }

    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a * 2f64.powi(-squarings);
    let mut result = pade13(&scaled, &ident);
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

fn solve_pade(u: DMatrix<f64>, v: DMatrix<f64>) -> DMatrix<f64> {
    let denominator = &v - &u;
    let numerator = v + u;
    denominator
        .lu()
        .solve(&numerator)
        .expect("Pade denominator is nonsingular within the scaling thresholds")
}

fn pade_low(a: &DMatrix<f64>, b: &[f64], ident: &DMatrix<f64>) -> DMatrix<f64> {
    let a2 = a * a;
    let mut power = ident.clone();
    let mut u_sum = ident * b[1];
    let mut v = ident * b[0];
    for k in 1..b.len() / 2 {
        power = &power * &a2;
        u_sum += &power * b[2 * k + 1];
        v += &power * b[2 * k];
    }
    let u = a * u_sum;
    solve_pade(u, v)
}

fn pade13(a: &DMatrix<f64>, ident: &DMatrix<f64>) -> DMatrix<f64> {
    let b = &PADE13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + ident * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + ident * b[0];
    solve_pade(u, v)
}
