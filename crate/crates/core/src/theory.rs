//! Numeric verifiers for the convergence results, plus a Hessian
//! top-eigenvalue estimator.
//!
//! Bounds are checked on constructed quadratics where smoothness l, strong
//! convexity μ, the Hessian bound λ, and the loss gap ψ are exact by
//! construction; strong convexity does not hold for neural losses, so
//! those are out of scope here.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::DenoiserState;
use crate::diffusion;
use crate::error::{Error, Result};
use crate::nn::{self, Batch, NetworkSpec};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tasks::TaskEmbedding;
use crate::vector::WeightVector;

/// Quadratic loss L(θ) = ½ (θ-θ*)ᵀ diag(eigs) (θ-θ*): l-smooth and
/// μ-strongly convex by construction, with L(θ*) = 0.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    pub eigenvalues: Vec<f64>,
    pub mu: f64,
    pub l: f64,
    pub theta_star: WeightVector,
    pub theta_0: WeightVector,
}

impl QuadraticProblem {
    pub fn new(
        eigenvalues: Vec<f64>,
        mu: f64,
        l: f64,
        theta_star: WeightVector,
        theta_0: WeightVector,
    ) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Empty("eigenvalue list".into()));
        }
        if mu <= 0.0 || l < mu {
            return Err(Error::arg("need 0 < mu <= l"));
        }
        if eigenvalues.iter().any(|&e| e < mu || e > l) {
            return Err(Error::arg("every eigenvalue must lie in [mu, l]"));
        }
        if theta_star.len() != eigenvalues.len() || theta_0.len() != eigenvalues.len() {
            return Err(Error::dim("theta dims must match eigenvalue count"));
        }
        Ok(QuadraticProblem {
            eigenvalues,
            mu,
            l,
            theta_star,
            theta_0,
        })
    }

    /// Random instance with n <= n_max dimensions, eigenvalues uniform in
    /// a random [mu, l] window, and Gaussian θ* and θ_0.
    pub fn random(n_max: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = rng.random_range(1..=n_max);
        let mu = rng.random_range(0.3..2.0);
        let l = mu + rng.random_range(0.2..4.0);
        let eigenvalues: Vec<f64> = (0..n).map(|_| rng.random_range(mu..l)).collect();
        let theta_star = WeightVector::new(rng::gaussian_vec(rng, n, 1.0))?;
        let theta_0 = WeightVector::new(rng::gaussian_vec(rng, n, 1.0))?;
        QuadraticProblem::new(eigenvalues, mu, l, theta_star, theta_0)
    }

    pub fn dimension(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn loss(&self, theta: &WeightVector) -> Result<f64> {
        if theta.len() != self.dimension() {
            return Err(Error::dim("loss input dim"));
        }
        Ok(theta
            .iter()
            .zip(self.theta_star.iter())
            .zip(self.eigenvalues.iter())
            .map(|((t, s), e)| 0.5 * e * (t - s) * (t - s))
            .sum())
    }

    pub fn gradient(&self, theta: &WeightVector) -> Result<WeightVector> {
        if theta.len() != self.dimension() {
            return Err(Error::dim("gradient input dim"));
        }
        WeightVector::new(
            theta
                .iter()
                .zip(self.theta_star.iter())
                .zip(self.eigenvalues.iter())
                .map(|((t, s), e)| e * (t - s))
                .collect(),
        )
    }

    /// ψ = L(θ_0) − L(θ*) = L(θ_0).
    pub fn psi(&self) -> f64 {
        self.loss(&self.theta_0).unwrap()
    }

    /// Exact gradient descent with step size 1/l for `steps` iterations.
    pub fn gradient_descent(&self, steps: usize) -> Result<WeightVector> {
        let mut theta = self.theta_0.clone();
        let step = 1.0 / self.l;
        for _ in 0..steps {
            let g = self.gradient(&theta)?;
            theta.add_scaled(&g, -step)?;
        }
        Ok(theta)
    }
}

/// One verified inequality: holds ⇔ lhs ≤ rhs + 1e-12.
#[derive(Clone, Copy, Debug)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub margin: f64,
}

impl BoundReport {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        BoundReport {
            lhs,
            rhs,
            holds: lhs <= rhs + 1e-12,
            margin: rhs - lhs,
        }
    }
}

/// Linear-contraction bound on gradient descent with step 1/l:
/// ||θ_M − θ*||² ≤ (2[L(θ_0)−L(θ*)]/μ)(1−μ/l)^M.
pub fn lemma1_verify(p: &QuadraticProblem, m: usize) -> Result<BoundReport> {
    if m == 0 {
        return Err(Error::arg("lemma requires M >= 1"));
    }
    let theta_m = p.gradient_descent(m)?;
    let lhs = theta_m.squared_distance(&p.theta_star)?;
    let rhs = (2.0 * p.psi() / p.mu) * (1.0 - p.mu / p.l).powi(m as i32);
    Ok(BoundReport::new(lhs, rhs))
}

/// Cumulative-error bound of the generation paradigm:
/// L(θ̂) − L(θ*) ≤ (λ/2)[c + (2ψ/μ)(1−μ/l)^M], with θ̂ = θ_M + r and
/// ||r||² ≤ c (r uniform on the sphere of radius sqrt(c), scaled by a
/// uniform [0,1] factor).
pub fn theorem2_verify(
    p: &QuadraticProblem,
    c: f64,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BoundReport> {
    if c < 0.0 {
        return Err(Error::arg("c must be nonnegative"));
    }
    let theta_m = p.gradient_descent(m)?;
    let reconstruction = if c > 0.0 {
        let direction = WeightVector::new(rng::gaussian_vec(rng, p.dimension(), 1.0))?;
        let norm = direction.norm();
        let radius = c.sqrt() * rng.random_range(0.0..=1.0);
        if norm < 1e-300 {
            WeightVector::zeros(p.dimension())
        } else {
            direction.scaled(radius / norm)
        }
    } else {
        WeightVector::zeros(p.dimension())
    };
    debug_assert!(reconstruction.squared_norm() <= c + 1e-12);
    let theta_hat = theta_m.add(&reconstruction)?;
    let lhs = p.loss(&theta_hat)?;
    let lambda = p.max_eigenvalue();
    let rhs = 0.5 * lambda * (c + (2.0 * p.psi() / p.mu) * (1.0 - p.mu / p.l).powi(m as i32));
    Ok(BoundReport::new(lhs, rhs))
}

/// Comparison of the two loss routes on a k=1 schedule.
#[derive(Clone, Copy, Debug)]
pub struct EquivalenceReport {
    pub max_abs_loss_diff: f64,
    pub max_rel_loss_diff: f64,
    pub max_coeff_diff: f64,
}

/// With k=1, the local consistency loss must coincide with the vanilla
/// loss and the coefficient arrays must be identical. Returns the maxima
/// over `n_trials` random (φ, θ, t, ε, emb) instances.
pub fn prop1_check(
    s: &NoiseSchedule,
    den: &DenoiserState,
    n_trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EquivalenceReport> {
    if s.segments() != 1 {
        return Err(Error::arg(format!(
            "equivalence check requires k=1, got k={}",
            s.segments()
        )));
    }
    let mut max_coeff_diff = 0.0f64;
    for t in 0..=s.steps() {
        let diff = (s.alpha_bar_local(t, 1)? - s.alpha_bar(t)?).abs();
        max_coeff_diff = max_coeff_diff.max(diff);
    }

    let d = den.weight_dim();
    let e = den.emb_dim();
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for _ in 0..n_trials {
        let mut probe = den.clone();
        probe.phi = WeightVector::new(rng::gaussian_vec(rng, den.phi.len(), 0.2))?;
        let theta = WeightVector::new(rng::gaussian_vec(rng, d, 0.5))?;
        let eps = WeightVector::new(rng::gaussian_vec(rng, d, 1.0))?;
        let emb = TaskEmbedding {
            values: rng::gaussian_vec(rng, e, 1.0),
        };
        let t = rng.random_range(0..s.steps());
        let local = diffusion::local_loss_sample(&probe, s, &theta, 1, t, &eps, &emb)?;
        let vanilla = diffusion::vanilla_loss_sample(&probe, s, &theta, t, &eps, &emb)?;
        let diff = (local.value - vanilla.value).abs();
        max_abs = max_abs.max(diff);
        max_rel = max_rel.max(diff / vanilla.value.abs().max(1e-300));
    }
    Ok(EquivalenceReport {
        max_abs_loss_diff: max_abs,
        max_rel_loss_diff: max_rel,
        max_coeff_diff,
    })
}

/// Power iteration on Hessian-vector products taken as central finite
/// differences of a gradient function. Returns the Rayleigh-quotient
/// estimate after `iters` steps; restarts (up to 3 times) on breakdown.
pub fn power_iteration_max_eig<G>(
    grad_fn: G,
    at: &WeightVector,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    G: Fn(&WeightVector) -> Result<WeightVector>,
{
    if iters == 0 {
        return Err(Error::arg("iters must be >= 1"));
    }
    let dim = at.len();
    let h = 1e-4 * (1.0 + at.norm());

    let hvp = |v: &WeightVector| -> Result<WeightVector> {
        let mut plus = at.clone();
        plus.add_scaled(v, h)?;
        let mut minus = at.clone();
        minus.add_scaled(v, -h)?;
        let gp = grad_fn(&plus)?;
        let gm = grad_fn(&minus)?;
        Ok(gp.sub(&gm)?.scaled(1.0 / (2.0 * h)))
    };

    for _restart in 0..3 {
        let mut v = WeightVector::new(rng::gaussian_vec(rng, dim, 1.0))?;
        let norm = v.norm();
        if norm < 1e-12 {
            continue;
        }
        v = v.scaled(1.0 / norm);
        let mut rayleigh = 0.0;
        let mut broke = false;
        for _ in 0..iters {
            let hv = hvp(&v)?;
            rayleigh = v.dot(&hv)?;
            let hv_norm = hv.norm();
            if hv_norm < 1e-12 {
                broke = true;
                break;
            }
            v = hv.scaled(1.0 / hv_norm);
        }
        if !broke {
            return Ok(rayleigh);
        }
    }
    Err(Error::Breakdown(
        "power iteration collapsed after 3 restarts".into(),
    ))
}

/// Top Hessian eigenvalue of the downstream task loss at w.
pub fn hessian_max_eig(
    spec: &NetworkSpec,
    w: &WeightVector,
    batch: &Batch,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    power_iteration_max_eig(
        |probe| Ok(nn::task_loss_grad(spec, probe, batch)?.grad),
        w,
        iters,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn quadratic_construction_validates() {
        let star = WeightVector::zeros(2);
        let zero = WeightVector::zeros(2);
        assert!(QuadraticProblem::new(vec![1.0, 2.0], 1.0, 2.0, star.clone(), zero.clone()).is_ok());
        assert!(QuadraticProblem::new(vec![0.5, 2.0], 1.0, 2.0, star.clone(), zero.clone()).is_err());
        assert!(QuadraticProblem::new(vec![1.0], 1.0, 0.5, star, zero).is_err());
    }

    #[test]
    fn lemma1_isotropic_one_step_lands_exactly() {
        // mu = l: (1 - mu/l) = 0, and one GD step reaches theta* exactly.
        let p = QuadraticProblem::new(
            vec![2.0, 2.0],
            2.0,
            2.0,
            WeightVector::new(vec![1.0, -1.0]).unwrap(),
            WeightVector::new(vec![3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let report = lemma1_verify(&p, 1).unwrap();
        assert!(report.lhs < 1e-28);
        assert_eq!(report.rhs, 0.0);
        assert!(report.holds);
    }

    #[test]
    fn lemma1_one_dimensional_closed_form() {
        // n=1, l=2, mu=1, eigenvalue 1, theta_0 - theta* = 1:
        // rhs = (2·(1/2)/1)·(1/2)^M = (1/2)^M, lhs = (1/2)^{2M}.
        let p = QuadraticProblem::new(
            vec![1.0],
            1.0,
            2.0,
            WeightVector::zeros(1),
            WeightVector::new(vec![1.0]).unwrap(),
        )
        .unwrap();
        for m in 1..=6 {
            let report = lemma1_verify(&p, m).unwrap();
            let expected_rhs = (0.5f64).powi(m as i32);
            let expected_lhs = (0.25f64).powi(m as i32);
            assert!((report.rhs - expected_rhs).abs() < 1e-14);
            assert!((report.lhs - expected_lhs).abs() < 1e-14);
            assert!(report.holds);
        }
        assert!(lemma1_verify(&p, 0).is_err());
    }

    #[test]
    fn lemma1_random_sweep_holds() {
        let mut rng = seeded(30);
        use rand::Rng;
        for i in 0..100 {
            let p = QuadraticProblem::random(20, &mut rng).unwrap();
            let m = rng.random_range(1..=50);
            let report = lemma1_verify(&p, m).unwrap();
            assert!(report.holds, "instance {i}: {report:?}");
        }
    }

    #[test]
    fn contraction_rate_is_exact_in_one_dimension() {
        // GD on a 1-D quadratic with eigenvalue mu contracts the distance
        // by exactly (1 - mu/l) per step.
        let p = QuadraticProblem::new(
            vec![0.7],
            0.7,
            2.1,
            WeightVector::zeros(1),
            WeightVector::new(vec![2.0]).unwrap(),
        )
        .unwrap();
        let rate = 1.0 - p.mu / p.l;
        let mut prev = (p.theta_0[0] - p.theta_star[0]).abs();
        for m in 1..=10 {
            let theta = p.gradient_descent(m).unwrap();
            let dist = (theta[0] - p.theta_star[0]).abs();
            assert!((dist / prev - rate).abs() < 1e-12, "step {m}");
            prev = dist;
        }
    }

    #[test]
    fn theorem2_examples_and_sweep() {
        let mut rng = seeded(31);
        use rand::Rng;

        // c=0, M large: both sides collapse toward zero and the bound holds.
        let p = QuadraticProblem::random(8, &mut rng).unwrap();
        let report = theorem2_verify(&p, 0.0, 200, &mut rng).unwrap();
        assert!(report.lhs < 1e-10);
        assert!(report.holds);

        // c=0, M=0: lhs = psi, rhs = (lambda/mu)·psi >= psi.
        let report = theorem2_verify(&p, 0.0, 0, &mut rng).unwrap();
        assert!((report.lhs - p.psi()).abs() < 1e-12);
        let expected_rhs = 0.5 * p.max_eigenvalue() * 2.0 * p.psi() / p.mu;
        assert!((report.rhs - expected_rhs).abs() < 1e-12);
        assert!(report.holds);

        for i in 0..100 {
            let p = QuadraticProblem::random(20, &mut rng).unwrap();
            let c = rng.random_range(0.0..=1.0);
            let m = rng.random_range(0..=50);
            let report = theorem2_verify(&p, c, m, &mut rng).unwrap();
            assert!(report.holds, "instance {i}: {report:?}");
        }
    }

    #[test]
    fn faulty_bound_is_detected() {
        // Near-tight instances: halving the rhs must flip them to violations.
        let p = QuadraticProblem::new(
            vec![1.0],
            1.0,
            20.0,
            WeightVector::zeros(1),
            WeightVector::new(vec![1.0]).unwrap(),
        )
        .unwrap();
        let report = lemma1_verify(&p, 1).unwrap();
        assert!(report.holds);
        let faulty = BoundReport::new(report.lhs, 0.5 * report.rhs);
        assert!(!faulty.holds, "faulty lemma bound not detected: {faulty:?}");

        let mut rng = seeded(5);
        let iso = QuadraticProblem::new(
            vec![1.5],
            1.5,
            1.5,
            WeightVector::zeros(1),
            WeightVector::new(vec![2.0]).unwrap(),
        )
        .unwrap();
        let report = theorem2_verify(&iso, 0.0, 0, &mut rng).unwrap();
        assert!(report.holds);
        let faulty = BoundReport::new(report.lhs, 0.5 * report.rhs);
        assert!(!faulty.holds, "faulty theorem bound not detected: {faulty:?}");
    }

    #[test]
    fn prop1_check_reports_zero_for_k1() {
        let s = NoiseSchedule::linear(8, 1, 0.6, 0.99).unwrap();
        let den = DenoiserState::init(4, 4, 2, &[6], 0.2, &mut seeded(2)).unwrap();
        let report = prop1_check(&s, &den, 100, &mut seeded(3)).unwrap();
        assert_eq!(report.max_coeff_diff, 0.0);
        assert!(report.max_rel_loss_diff <= 1e-12);

        let s2 = NoiseSchedule::linear(8, 2, 0.6, 0.99).unwrap();
        assert!(prop1_check(&s2, &den, 10, &mut seeded(3)).is_err());
    }

    #[test]
    fn power_iteration_on_known_spectrum() {
        let p = QuadraticProblem::new(
            vec![1.0, 2.0, 5.0],
            1.0,
            5.0,
            WeightVector::zeros(3),
            WeightVector::new(vec![1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let at = WeightVector::new(vec![0.3, -0.2, 0.9]).unwrap();
        let est = power_iteration_max_eig(|w| p.gradient(w), &at, 50, &mut seeded(4)).unwrap();
        assert!((est - 5.0).abs() / 5.0 < 0.01, "estimate {est}");
    }

    #[test]
    fn power_iteration_isotropic_is_immediate() {
        let p = QuadraticProblem::new(
            vec![3.0, 3.0, 3.0, 3.0],
            3.0,
            3.0,
            WeightVector::zeros(4),
            WeightVector::new(vec![1.0; 4]).unwrap(),
        )
        .unwrap();
        let at = WeightVector::zeros(4);
        let est = power_iteration_max_eig(|w| p.gradient(w), &at, 1, &mut seeded(6)).unwrap();
        assert!((est - 3.0).abs() / 3.0 < 0.01, "estimate {est}");
    }

    #[test]
    fn power_iteration_estimates_grow_with_iters() {
        let p = QuadraticProblem::new(
            vec![0.5, 1.5, 4.0],
            0.5,
            4.0,
            WeightVector::zeros(3),
            WeightVector::new(vec![1.0; 3]).unwrap(),
        )
        .unwrap();
        let at = WeightVector::new(vec![0.1, 0.1, 0.1]).unwrap();
        let mut prev = f64::MIN;
        for iters in [1, 3, 10, 40] {
            let est =
                power_iteration_max_eig(|w| p.gradient(w), &at, iters, &mut seeded(8)).unwrap();
            assert!(est >= prev - 1e-9, "estimate fell: {prev} -> {est}");
            prev = est;
        }
        assert!((prev - 4.0).abs() / 4.0 < 0.01);
    }

    #[test]
    fn hessian_estimate_on_network_loss_is_positive_at_minimum_direction() {
        use crate::nn::{Activation, OutputHead, Targets};
        let spec = NetworkSpec::new(
            vec![2, 4, 2],
            Activation::Tanh,
            OutputHead::SoftmaxCrossEntropy,
        )
        .unwrap();
        let w = nn::init_network(&spec, 0.3, &mut seeded(9)).unwrap();
        let batch = Batch {
            inputs: vec![vec![1.0, 0.5], vec![-0.5, 1.0], vec![0.2, -1.0]],
            targets: Targets::Classes(vec![0, 1, 0]),
        };
        let est = hessian_max_eig(&spec, &w, &batch, 30, &mut seeded(10)).unwrap();
        assert!(est.is_finite());
        assert!(est > 0.0);
    }
}
