//! abc <-> dq0 Park transformation.
//!
//! Convention: amplitude-invariant (2/3 factor on the forward transform), d
//! axis aligned with the cosine of the frame angle and q axis lagging d by a
//! quarter turn. In complex notation `d + jq = (x_alpha + j x_beta) e^{-j theta}`,
//! so a balanced cosine set `a = V cos(theta)` maps to `(d, q) = (V, 0)` and the
//! rotating-frame derivative picks up the `+j omega` term that appears in the
//! bus and line equations. The zero-sequence channel is structurally zero:
//! only balanced circuits are modelled.

use std::f64::consts::FRAC_PI_3;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

const TWO_PI_3: f64 = 2.0 * FRAC_PI_3;

/// Instantaneous phase quantities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThreePhaseSample {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ThreePhaseSample {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// Balanced cosine set `amplitude * cos(phase - k 2pi/3)`, k = 0, 1, 2.
    pub fn balanced(amplitude: f64, phase: f64) -> Self {
        Self {
            a: amplitude * phase.cos(),
            b: amplitude * (phase - TWO_PI_3).cos(),
            c: amplitude * (phase + TWO_PI_3).cos(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }
}

/// Direct/quadrature pair `d + jq`. The zero-sequence component is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DqSample {
    pub d: f64,
    pub q: f64,
}

impl DqSample {
    pub const ZERO: DqSample = DqSample { d: 0.0, q: 0.0 };

    pub fn new(d: f64, q: f64) -> Self {
        Self { d, q }
    }

    pub fn zero_sequence(&self) -> f64 {
        0.0
    }

    pub fn magnitude(&self) -> f64 {
        self.d.hypot(self.q)
    }

    pub fn is_finite(&self) -> bool {
        self.d.is_finite() && self.q.is_finite()
    }

    /// Complex product `(self) * (re + j im)`.
    pub fn mul_complex(self, re: f64, im: f64) -> DqSample {
        DqSample {
            d: self.d * re - self.q * im,
            q: self.d * im + self.q * re,
        }
    }
}

impl Add for DqSample {
    type Output = DqSample;
    fn add(self, rhs: DqSample) -> DqSample {
        DqSample::new(self.d + rhs.d, self.q + rhs.q)
    }
}

impl Sub for DqSample {
    type Output = DqSample;
    fn sub(self, rhs: DqSample) -> DqSample {
        DqSample::new(self.d - rhs.d, self.q - rhs.q)
    }
}

impl Neg for DqSample {
    type Output = DqSample;
    fn neg(self) -> DqSample {
        DqSample::new(-self.d, -self.q)
    }
}

impl Mul<f64> for DqSample {
    type Output = DqSample;
    fn mul(self, k: f64) -> DqSample {
        DqSample::new(self.d * k, self.q * k)
    }
}

/// Forward Park transform at frame angle `theta` (radians).
pub fn park(sample: ThreePhaseSample, theta: f64) -> DqSample {
    let (sa, ca) = theta.sin_cos();
    let (sb, cb) = (theta - TWO_PI_3).sin_cos();
    let (sc, cc) = (theta + TWO_PI_3).sin_cos();
    let k = 2.0 / 3.0;
    DqSample {
        d: k * (sample.a * ca + sample.b * cb + sample.c * cc),
        q: -k * (sample.a * sa + sample.b * sb + sample.c * sc),
    }
}

/// Inverse Park transform; zero sequence taken as 0.
pub fn inverse_park(sample: DqSample, theta: f64) -> ThreePhaseSample {
    let phase = |angle: f64| {
        let (s, c) = angle.sin_cos();
        sample.d * c - sample.q * s
    };
    ThreePhaseSample {
        a: phase(theta),
        b: phase(theta - TWO_PI_3),
        c: phase(theta + TWO_PI_3),
    }
}
