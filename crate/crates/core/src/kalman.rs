//! Linear Kalman filter with full-state measurements and noisy inputs.
//!
//! The measurement model is `z[k] = x[k] + v[k]`, so the innovation
//! covariance is simply `S = R + P`. When the input vector is itself measured
//! with additive noise `m[k] ~ N(0, M)`, that noise reaches the state through
//! `B_d` and is folded into an effective process covariance
//! `Q~ = B_d M B_d^T + Q` before running the ordinary recursion.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::discretize::DiscreteLtiModel;
use crate::error::{Error, Result};

/// Innovation covariances above this condition number are treated as singular.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

const COVARIANCE_TOL: f64 = 1e-10;

/// Checks that `c` is square, symmetric and positive semidefinite, with
/// tolerances scaled by the largest entry.
pub fn check_covariance(name: &str, c: &DMatrix<f64>) -> Result<()> {
    let fail = |reason: String| Error::NotCovariance {
        name: name.to_string(),
        reason,
    };
    if !c.is_square() {
        return Err(fail(format!("shape {}x{} is not square", c.nrows(), c.ncols())));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(fail("non-finite entry".into()));
    }
    if c.is_empty() {
        return Ok(());
    }
    let tol = COVARIANCE_TOL * c.amax().max(1.0);
    let asym = (c - c.transpose()).amax();
    if asym > tol {
        return Err(fail(format!("asymmetry {asym:e}")));
    }
    let min_eig = c.clone().symmetric_eigenvalues().min();
    if min_eig < -tol {
        return Err(fail(format!("smallest eigenvalue {min_eig:e}")));
    }
    Ok(())
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

/// Process (`q`), measurement (`r`) and input (`m`) noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

impl NoiseSpec {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, m: DMatrix<f64>) -> Result<Self> {
        check_covariance("q", &q)?;
        check_covariance("r", &r)?;
        check_covariance("m", &m)?;
        Ok(Self { q, r, m })
    }

    pub fn diagonal(q: &[f64], r: &[f64], m: &[f64]) -> Result<Self> {
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_row_slice(v));
        Self::new(diag(q), diag(r), diag(m))
    }
}

/// `B_d M B_d^T + Q`.
pub fn effective_process_noise(
    q: &DMatrix<f64>,
    b_d: &DMatrix<f64>,
    m: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if !q.is_square() || q.nrows() != b_d.nrows() {
        return Err(Error::dims(
            "process noise",
            format!("{0}x{0}", b_d.nrows()),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    if !m.is_square() || m.nrows() != b_d.ncols() {
        return Err(Error::dims(
            "input noise",
            format!("{0}x{0}", b_d.ncols()),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let mut q_eff = b_d * m * b_d.transpose() + q;
    symmetrize(&mut q_eff);
    Ok(q_eff)
}

/// Diagnostics returned by [`KalmanEstimator::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    /// `z - x_prior`.
    pub innovation: DVector<f64>,
    /// `S = R + P_prior`.
    pub innovation_covariance: DMatrix<f64>,
    /// `K = P_prior S^-1`.
    pub gain: DMatrix<f64>,
    /// `z - x_post`.
    pub postfit_residual: DVector<f64>,
    /// Normalized innovation squared `r^T S^-1 r`.
    pub nis: f64,
}

/// Converged covariance recursion for a fixed model and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub prior: DMatrix<f64>,
    pub posterior: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanEstimator {
    pub model: DiscreteLtiModel,
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub q_eff: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl KalmanEstimator {
    /// Builds a filter whose process covariance includes the input noise.
    pub fn new(
        model: DiscreteLtiModel,
        noise: &NoiseSpec,
        x0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        let q_eff = effective_process_noise(&noise.q, &model.b_d, &noise.m)?;
        Self::with_process_noise(model, q_eff, noise.r.clone(), x0, p0)
    }

    pub fn with_process_noise(
        model: DiscreteLtiModel,
        q_eff: DMatrix<f64>,
        r: DMatrix<f64>,
        x0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        let n = model.n_states();
        for (name, c) in [("q_eff", &q_eff), ("r", &r), ("p0", &p0)] {
            if c.shape() != (n, n) {
                return Err(Error::dims("covariance", format!("{n}x{n}"), format!("{}x{}", c.nrows(), c.ncols())));
            }
            check_covariance(name, c)?;
        }
        if x0.len() != n {
            return Err(Error::dims("initial state", n, x0.len()));
        }
        Ok(Self {
            model,
            x_hat: x0,
            p: p0,
            q_eff,
            r,
        })
    }

    pub fn n_states(&self) -> usize {
        self.x_hat.len()
    }

    /// Time update: `x <- A x + B u`, `P <- A P A^T + Q~`.
    pub fn predict(&mut self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.model.n_inputs() {
            return Err(Error::dims("input vector", self.model.n_inputs(), u.len()));
        }
        let a = &self.model.a_d;
        self.x_hat = a * &self.x_hat + &self.model.b_d * u;
        self.p = a * &self.p * a.transpose() + &self.q_eff;
        symmetrize(&mut self.p);
        Ok(())
    }

    /// Measurement update with Joseph-form covariance.
    pub fn update(&mut self, z: &DVector<f64>) -> Result<UpdateOutcome> {
        let n = self.n_states();
        if z.len() != n {
            return Err(Error::dims("measurement vector", n, z.len()));
        }
        let innovation = z - &self.x_hat;
        let s = &self.r + &self.p;
        let s_inv = factor_innovation(&s)?;
        // K = P S^-1, and with P, S symmetric K^T = S^-1 P.
        let gain = s_inv.solve(&self.p)?.transpose();
        let nis = innovation.dot(&s_inv.solve(&innovation)?);

        self.x_hat += &gain * &innovation;
        let i_minus_k = DMatrix::identity(n, n) - &gain;
        self.p = &i_minus_k * &self.p * i_minus_k.transpose() + &gain * &self.r * gain.transpose();
        symmetrize(&mut self.p);

        Ok(UpdateOutcome {
            postfit_residual: z - &self.x_hat,
            innovation,
            innovation_covariance: s,
            gain,
            nis,
        })
    }

    /// One full recursion: predict with `u`, then update with `z`.
    pub fn step(&mut self, u: &DVector<f64>, z: &DVector<f64>) -> Result<UpdateOutcome> {
        self.predict(u)?;
        self.update(z)
    }

    /// Iterates the covariance recursion from the current `P` until the
    /// posterior changes by less than `tol` (relative to its largest entry).
    pub fn steady_state(&self, tol: f64, max_iter: usize) -> Result<SteadyState> {
        let n = self.n_states();
        let a = &self.model.a_d;
        let ident = DMatrix::<f64>::identity(n, n);
        let mut posterior = self.p.clone();
        for iterations in 1..=max_iter {
            let mut prior = a * &posterior * a.transpose() + &self.q_eff;
            symmetrize(&mut prior);
            let gain = factor_innovation(&(&self.r + &prior))?.solve(&prior)?.transpose();
            let i_minus_k = &ident - &gain;
            let mut next = &i_minus_k * &prior * i_minus_k.transpose() + &gain * &self.r * gain.transpose();
            symmetrize(&mut next);
            let change = (&next - &posterior).amax();
            posterior = next;
            if change <= tol * posterior.amax().max(f64::MIN_POSITIVE) {
                return Ok(SteadyState {
                    prior,
                    posterior,
                    gain,
                    iterations,
                });
            }
        }
        Err(Error::InsufficientData(format!(
            "covariance recursion did not converge in {max_iter} iterations"
        )))
    }
}

/// LU factors of an innovation covariance that passed the conditioning
/// check, so every solve succeeds.
struct InnovationFactor {
    lu: LU<f64, Dyn, Dyn>,
    condition: f64,
}

impl InnovationFactor {
    fn solve<C: nalgebra::Dim>(
        &self,
        rhs: &nalgebra::OMatrix<f64, Dyn, C>,
    ) -> Result<nalgebra::OMatrix<f64, Dyn, C>>
    where
        nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<Dyn, C>,
    {
        self.lu.solve(rhs).ok_or(Error::SingularInnovation {
            condition: self.condition,
        })
    }
}

fn factor_innovation(s: &DMatrix<f64>) -> Result<InnovationFactor> {
    let eig = s.clone().symmetric_eigenvalues();
    let (min, max) = (eig.min(), eig.max());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_INNOVATION_CONDITION) {
        return Err(Error::SingularInnovation { condition });
    }
    Ok(InnovationFactor {
        lu: s.clone().lu(),
        condition,
    })
}

/// Minimum history length accepted by [`innovation_consistency`].
pub const MIN_CONSISTENCY_SAMPLES: usize = 30;

/// Mean normalized innovation squared over a history. For a consistent
/// filter this is close to the state dimension.
pub fn innovation_consistency(
    innovations: &[DVector<f64>],
    covariances: &[DMatrix<f64>],
) -> Result<f64> {
    if innovations.len() != covariances.len() {
        return Err(Error::dims("innovation history", innovations.len(), covariances.len()));
    }
    if innovations.len() < MIN_CONSISTENCY_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "innovation consistency needs at least {MIN_CONSISTENCY_SAMPLES} samples, got {}",
            innovations.len()
        )));
    }
    let mut total = 0.0;
    for (r, s) in innovations.iter().zip(covariances) {
        total += r.dot(&factor_innovation(s)?.solve(r)?);
    }
    Ok(total / innovations.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{discretize_exact, DiscretizationMethod};
    use crate::models::{build_dgu_model, DguParams};
    use crate::sim::GaussianSampler;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn scalar_model(a: f64, b: f64) -> DiscreteLtiModel {
        DiscreteLtiModel {
            a_d: DMatrix::from_element(1, 1, a),
            b_d: DMatrix::from_element(1, 1, b),
            t_s: 1.0,
            method: DiscretizationMethod::Exact,
            state_labels: vec!["x".into()],
            input_labels: vec!["u".into()],
        }
    }

    fn scalar_filter(a: f64, q: f64, r: f64, p: f64, x: f64) -> KalmanEstimator {
        KalmanEstimator::with_process_noise(
            scalar_model(a, 0.0),
            dmatrix![q],
            dmatrix![r],
            dvector![x],
            dmatrix![p],
        )
        .unwrap()
    }

    fn dgu1_model() -> DiscreteLtiModel {
        let m = build_dgu_model(
            &DguParams { r_t: 1.1e-3, l_t: 90e-6, c_t: 50e-6 },
            2.0 * PI * 60.0,
        )
        .unwrap();
        discretize_exact(&m, 1e-4).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        // Rank-deficient half the time.
        let g = if rng.random_bool(0.5) { g.columns(0, n / 2 + 1).into_owned() } else { g };
        &g * g.transpose()
    }

    #[test]
    fn effective_noise_examples() {
        let q = dmatrix![1.0, 0.2; 0.2, 3.0];
        let b = dmatrix![1.0, 0.0; 0.5, 2.0];
        assert_eq!(effective_process_noise(&q, &b, &DMatrix::zeros(2, 2)).unwrap(), q);
        let m = dmatrix![2.0, 0.3; 0.3, 1.0];
        let out = effective_process_noise(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), &m).unwrap();
        assert_eq!(out, m);
        let out = effective_process_noise(&DMatrix::identity(2, 2), &dmatrix![2.0; 0.0], &dmatrix![1.0]).unwrap();
        assert_eq!(out, dmatrix![5.0, 0.0; 0.0, 1.0]);
        assert!(effective_process_noise(&DMatrix::identity(3, 3), &b, &m).is_err());
        assert!(effective_process_noise(&q, &b, &DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn effective_noise_is_psd_for_psd_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = dgu1_model().b_d;
        for _ in 0..100 {
            let q = random_psd(&mut rng, 4);
            let m = random_psd(&mut rng, 4);
            let out = effective_process_noise(&q, &b, &m).unwrap();
            check_covariance("q_eff", &out).unwrap();
        }
    }

    #[test]
    fn noise_spec_rejects_non_covariances() {
        assert!(NoiseSpec::new(dmatrix![1.0, 2.0; 0.0, 1.0], DMatrix::identity(2, 2), DMatrix::identity(2, 2)).is_err());
        assert!(NoiseSpec::diagonal(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(NoiseSpec::diagonal(&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0]).is_ok());
    }

    #[test]
    fn predict_examples() {
        let mut f = KalmanEstimator::with_process_noise(
            DiscreteLtiModel {
                a_d: DMatrix::identity(2, 2),
                b_d: DMatrix::zeros(2, 1),
                t_s: 1.0,
                method: DiscretizationMethod::Exact,
                state_labels: vec!["a".into(), "b".into()],
                input_labels: vec!["u".into()],
            },
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            dvector![1.0, -2.0],
            dmatrix![2.0, 0.5; 0.5, 1.0],
        )
        .unwrap();
        let before = f.clone();
        f.predict(&dvector![3.0]).unwrap();
        assert_eq!(f.x_hat, before.x_hat);
        assert_eq!(f.p, before.p);
        assert!(f.predict(&dvector![1.0, 2.0]).is_err());

        let mut f = scalar_filter(1.0, 0.0, 1.0, 1.0, 0.0);
        f.predict(&dvector![0.0]).unwrap();
        assert_eq!(f.p[(0, 0)], 1.0);

        let mut f = scalar_filter(2.0, 0.5, 1.0, 1.0, 0.0);
        f.predict(&dvector![0.0]).unwrap();
        assert_eq!(f.p[(0, 0)], 4.5);
    }

    #[test]
    fn update_scalar_hand_case() {
        let mut f = scalar_filter(1.0, 0.0, 1.0, 1.0, 0.0);
        let out = f.update(&dvector![2.0]).unwrap();
        // S = 2, K = 1/2, x = 0 + 1/2 * 2, P = 1/4 * 1 + 1/4 * 1.
        assert_eq!(out.innovation[0], 2.0);
        assert_eq!(out.innovation_covariance[(0, 0)], 2.0);
        assert_eq!(out.gain[(0, 0)], 0.5);
        assert_eq!(f.x_hat[0], 1.0);
        assert_eq!(f.p[(0, 0)], 0.5);
        assert_eq!(out.postfit_residual[0], 1.0);
        assert_eq!(out.nis, 2.0);
    }

    #[test]
    fn update_ignores_untrusted_measurement() {
        let n = 3;
        let mut f = KalmanEstimator::with_process_noise(
            DiscreteLtiModel {
                a_d: DMatrix::identity(n, n),
                b_d: DMatrix::zeros(n, 1),
                t_s: 1.0,
                method: DiscretizationMethod::Exact,
                state_labels: vec!["a".into(); n],
                input_labels: vec!["u".into()],
            },
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n) * 1e12,
            dvector![1.0, 2.0, 3.0],
            DMatrix::identity(n, n),
        )
        .unwrap();
        f.update(&dvector![100.0, -50.0, 7.0]).unwrap();
        assert!((f.x_hat.clone() - dvector![1.0, 2.0, 3.0]).amax() < 1e-9);
    }

    #[test]
    fn zero_innovation_contracts_covariance() {
        let mut f = scalar_filter(1.0, 0.0, 1.0, 4.0, 3.0);
        let out = f.update(&dvector![3.0]).unwrap();
        assert_eq!(out.innovation[0], 0.0);
        assert_eq!(f.x_hat[0], 3.0);
        assert!(f.p[(0, 0)] < 4.0);
    }

    #[test]
    fn update_rejects_wrong_dimension_and_singular_s() {
        let mut f = scalar_filter(1.0, 0.0, 1.0, 1.0, 0.0);
        assert!(f.update(&dvector![1.0, 2.0]).is_err());
        let mut g = scalar_filter(1.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(g.update(&dvector![1.0]), Err(Error::SingularInnovation { .. })));
    }

    #[test]
    fn step_equals_predict_then_update() {
        let model = dgu1_model();
        let noise = NoiseSpec::diagonal(&[0.01, 0.01, 1e-4, 1e-4], &[100.0; 4], &[1.0; 4]).unwrap();
        let x0 = dvector![11_000.0, 0.0, 50.0, 200.0];
        let mut a = KalmanEstimator::new(model.clone(), &noise, x0.clone(), noise.r.clone()).unwrap();
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u = DVector::from_fn(4, |_, _| rng.random_range(-100.0..100.0));
            let z = DVector::from_fn(4, |_, _| rng.random_range(-100.0..100.0));
            let out_a = a.step(&u, &z).unwrap();
            b.predict(&u).unwrap();
            let out_b = b.update(&z).unwrap();
            assert_eq!(out_a, out_b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn converges_to_truth_with_exact_measurements() {
        let model = dgu1_model();
        let u = dvector![11_270.0, -30.0, 300.0, -60.0];
        // Equilibrium of x = A x + B u.
        let x_true = (DMatrix::identity(4, 4) - &model.a_d)
            .lu()
            .solve(&(&model.b_d * &u))
            .unwrap();
        let mut f = KalmanEstimator::with_process_noise(
            model,
            DMatrix::zeros(4, 4),
            DMatrix::identity(4, 4) * 1e-6,
            DVector::zeros(4),
            DMatrix::identity(4, 4) * 1e8,
        )
        .unwrap();
        for _ in 0..100 {
            f.step(&u, &x_true).unwrap();
        }
        assert!((&f.x_hat - &x_true).amax() < 1e-6);
    }

    /// Standard-form a-priori Riccati iteration
    /// `P- <- A (P- - P- (P- + R)^-1 P-) A^T + Q`, written independently of
    /// the filter code.
    fn riccati_oracle(a: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut prior = q.clone();
        for _ in 0..200_000 {
            let inv = (&prior + r).try_inverse().unwrap();
            let post = &prior - &prior * inv * &prior;
            let next = a * post * a.transpose() + q;
            let next = (&next + next.transpose()) * 0.5;
            if (&next - &prior).amax() < 1e-15 * next.amax() {
                prior = next;
                break;
            }
            prior = next;
        }
        let inv = (&prior + r).try_inverse().unwrap();
        &prior - &prior * inv * &prior
    }

    #[test]
    fn steady_state_matches_riccati_oracle() {
        let model = dgu1_model();
        let q = DMatrix::from_diagonal(&dvector![0.05, 0.05, 0.02, 0.02]);
        let r = DMatrix::identity(4, 4);
        let oracle = riccati_oracle(&model.a_d, &q, &r);

        let mut f = KalmanEstimator::with_process_noise(model.clone(), q.clone(), r.clone(), DVector::zeros(4), r.clone()).unwrap();
        for _ in 0..20_000 {
            f.predict(&DVector::zeros(4)).unwrap();
            f.update(&DVector::zeros(4)).unwrap();
        }
        assert!((&f.p - &oracle).amax() < 1e-9, "{}", (&f.p - &oracle).amax());

        let ss = f.steady_state(1e-14, 100_000).unwrap();
        assert!((&ss.posterior - &oracle).amax() < 1e-9);
        // Fixed-point identity P = (I-K)(A P A^T + Q)(I-K)^T + K R K^T.
        let prior = &model.a_d * &ss.posterior * model.a_d.transpose() + &q;
        let k = &prior * (&prior + &r).try_inverse().unwrap();
        let ik = DMatrix::identity(4, 4) - &k;
        let rhs = &ik * &prior * ik.transpose() + &k * &r * k.transpose();
        assert!((rhs - &ss.posterior).amax() < 1e-9);
    }

    #[test]
    fn more_measurement_noise_never_increases_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1usize, 2] {
            for _ in 0..200 {
                let p = random_psd(&mut rng, n) + DMatrix::identity(n, n) * 0.01;
                let r1 = random_psd(&mut rng, n) + DMatrix::identity(n, n) * 0.01;
                let r2 = &r1 + random_psd(&mut rng, n);
                let correction = |r: &DMatrix<f64>| {
                    let s = r + &p;
                    let k = &p * s.clone().try_inverse().unwrap();
                    &k * s * k.transpose()
                };
                let (c1, c2) = (correction(&r1), correction(&r2));
                for i in 0..n {
                    assert!(c2[(i, i)] <= c1[(i, i)] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let model = dgu1_model();
        let noise = NoiseSpec::diagonal(&[0.01, 0.01, 1e-4, 1e-4], &[100.0; 4], &[1.0; 4]).unwrap();
        let mut f = KalmanEstimator::new(model, &noise, DVector::zeros(4), noise.r.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5_000 {
            let u = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let z = DVector::from_fn(4, |_, _| rng.random_range(-10.0..10.0));
            f.predict(&u).unwrap();
            assert!((&f.p - f.p.transpose()).amax() < 1e-10);
            f.update(&z).unwrap();
            assert!((&f.p - f.p.transpose()).amax() < 1e-10);
            assert!(f.p.clone().symmetric_eigenvalues().min() >= -1e-10);
        }
    }

    #[test]
    fn input_noise_mapping_is_zero_mean() {
        let b = dgu1_model().b_d;
        let m = DMatrix::from_diagonal(&dvector![1.0, 1.0, 4.0, 4.0]);
        let sampler = GaussianSampler::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        let mut sum = DVector::zeros(4);
        for _ in 0..draws {
            sum += &b * sampler.sample(&mut rng);
        }
        let mean = sum / draws as f64;
        let cov = &b * &m * b.transpose();
        for i in 0..4 {
            let sigma = cov[(i, i)].sqrt();
            assert!(mean[i].abs() < 4.0 * sigma / (draws as f64).sqrt(), "channel {i}");
        }
    }

    fn nis_run(bias: f64, seed: u64, steps: usize) -> f64 {
        let model = dgu1_model();
        let noise = NoiseSpec::diagonal(&[0.04, 0.04, 0.01, 0.01], &[25.0, 25.0, 4.0, 4.0], &[0.0; 4]).unwrap();
        let w = GaussianSampler::new(&noise.q).unwrap();
        let v = GaussianSampler::new(&noise.r).unwrap();
        let p0 = noise.r.clone();
        let x0_dist = GaussianSampler::new(&p0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = dvector![100.0, 0.0, 10.0, 0.0];
        let mut x = x0_dist.sample(&mut rng);
        let mut f = KalmanEstimator::new(model.clone(), &noise, DVector::zeros(4), p0).unwrap();
        let (mut innovations, mut covs) = (Vec::new(), Vec::new());
        for _ in 0..steps {
            x = &model.a_d * x + &model.b_d * &u + w.sample(&mut rng);
            let z = &x + v.sample(&mut rng) + DVector::from_element(4, bias * 5.0);
            let out = f.step(&u, &z).unwrap();
            innovations.push(out.innovation);
            covs.push(out.innovation_covariance);
        }
        innovation_consistency(&innovations, &covs).unwrap()
    }

    #[test]
    fn nis_of_consistent_filter_is_state_dimension() {
        let stat = nis_run(0.0, 21, 10_000);
        assert!((3.5..=4.5).contains(&stat), "NIS {stat}");
    }

    #[test]
    fn nis_grows_with_measurement_bias() {
        // 5 sigma bias on every channel of the 2 A current sensors.
        let stat = nis_run(2.0, 21, 2_000);
        assert!(stat > 4.5, "NIS {stat}");
    }

    #[test]
    fn nis_is_zero_without_innovation() {
        let innovations = vec![DVector::zeros(4); 40];
        let covs = vec![DMatrix::identity(4, 4); 40];
        assert_eq!(innovation_consistency(&innovations, &covs).unwrap(), 0.0);
        assert!(innovation_consistency(&[], &[]).is_err());
        assert!(innovation_consistency(&innovations[..10], &covs[..10]).is_err());
    }
}
