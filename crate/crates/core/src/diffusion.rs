//! Training losses and the reverse inference chain.
//!
//! A single scaled-residual form backs both objectives:
//!
//! ```text
//! L = || sqrt(1-a*) · eps_hat(x_t, t, emb) - sqrt(1-a_t) · eps ||²,
//! x_t = sqrt(a*) θ + sqrt(1-a*) eps
//! ```
//!
//! where a* is the LOCAL cumulative product ᾱ_t^i for the local consistency
//! loss and the GLOBAL ᾱ_t for the vanilla loss. The noise-term coefficient
//! is always the global sqrt(1-ᾱ_t). Since ᾱ_t^k ≡ ᾱ_t by construction (one
//! shared product table), the vanilla loss is exactly the i=k case of the
//! local loss, and with k=1 the two losses agree bitwise — the equivalence
//! that makes the segment count a pure generalization knob.
//!
//! Inference is deterministic (no stochastic term). Two forms:
//!
//! - posterior (canonical): x_{t+1} = x_t/√α_t − (1−α_t)/(√(1−ᾱ_t)·√α_t)·ε̂
//! - eq2:                   x_{t+1} = (x_t − √(1−ᾱ_{t+1})·ε̂)/√ᾱ_{t+1}

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::DenoiserState;
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tasks::TaskEmbedding;
use crate::vector::WeightVector;
use crate::weightprep::LocalTargetSet;

/// Per-sample loss value and its exact gradient w.r.t. φ.
#[derive(Clone, Debug)]
pub struct LossSample {
    pub value: f64,
    pub grad_phi: WeightVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    /// Appendix-style posterior mean step; the form the local consistency
    /// loss is derived against. Canonical.
    Posterior,
    /// The main-text closed form; kept for comparison.
    Eq2,
}

/// A full reverse chain x_0..x_T plus the states at the k readout points
/// i·T/k, i = 1..k.
#[derive(Clone, Debug)]
pub struct InferenceChain {
    pub states: Vec<WeightVector>,
    /// (segment index i, x_{i·T/k}) in increasing i.
    pub readouts: Vec<(usize, WeightVector)>,
}

impl InferenceChain {
    pub fn final_state(&self) -> &WeightVector {
        self.states.last().unwrap()
    }

    pub fn readout(&self, segment: usize) -> Option<&WeightVector> {
        self.readouts
            .iter()
            .find(|(i, _)| *i == segment)
            .map(|(_, x)| x)
    }
}

/// Shared residual: noising level `bar_star`, model coefficient
/// sqrt(1-bar_star), noise coefficient sqrt(1-ᾱ_t global).
fn scaled_loss(
    den: &DenoiserState,
    s: &NoiseSchedule,
    theta: &WeightVector,
    bar_star: f64,
    t: usize,
    eps: &WeightVector,
    emb: &TaskEmbedding,
    with_grad: bool,
) -> Result<LossSample> {
    if theta.len() != eps.len() {
        return Err(Error::dim(format!(
            "theta dim {} vs eps dim {}",
            theta.len(),
            eps.len()
        )));
    }
    let bar_global = s.alpha_bar(t)?;
    let signal = bar_star.sqrt();
    let noise = (1.0 - bar_star).sqrt();
    let x_values: Vec<f64> = theta
        .iter()
        .zip(eps.iter())
        .map(|(th, e)| signal * th + noise * e)
        .collect();
    let x = WeightVector::new(x_values)?;

    let coeff_model = (1.0 - bar_star).sqrt();
    let coeff_noise = (1.0 - bar_global).sqrt();

    if with_grad {
        let (eps_hat, trace) = den.predict_eps_traced(&x, t, s.steps(), emb)?;
        let residual: Vec<f64> = eps_hat
            .iter()
            .zip(eps.iter())
            .map(|(eh, e)| coeff_model * eh - coeff_noise * e)
            .collect();
        let value: f64 = residual.iter().map(|r| r * r).sum();
        let d_eps_hat: Vec<f64> = residual.iter().map(|r| 2.0 * coeff_model * r).collect();
        let grad_phi = den.backward_phi(&trace, &d_eps_hat)?;
        grad_phi.check_finite("loss gradient")?;
        Ok(LossSample { value, grad_phi })
    } else {
        let eps_hat = den.predict_eps(&x, t, s.steps(), emb)?;
        let value: f64 = eps_hat
            .iter()
            .zip(eps.iter())
            .map(|(eh, e)| {
                let r = coeff_model * eh - coeff_noise * e;
                r * r
            })
            .sum();
        Ok(LossSample {
            value,
            grad_phi: WeightVector::zeros(0),
        })
    }
}

/// Vanilla diffusion loss on a (local or global) target treated as the
/// full-horizon endpoint: noising and both coefficients use the global ᾱ_t.
pub fn vanilla_loss_sample(
    den: &DenoiserState,
    s: &NoiseSchedule,
    theta_target: &WeightVector,
    t: usize,
    eps: &WeightVector,
    emb: &TaskEmbedding,
) -> Result<LossSample> {
    if t >= s.steps() {
        return Err(Error::arg(format!("t={t} out of [0, {})", s.steps())));
    }
    let bar = s.alpha_bar(t)?;
    scaled_loss(den, s, theta_target, bar, t, eps, emb, true)
}

/// Local consistency loss for segment i: noising and the model coefficient
/// use ᾱ_t^i, the noise coefficient stays global.
pub fn local_loss_sample(
    den: &DenoiserState,
    s: &NoiseSchedule,
    theta_local: &WeightVector,
    segment: usize,
    t: usize,
    eps: &WeightVector,
    emb: &TaskEmbedding,
) -> Result<LossSample> {
    let end = s.segment_end(segment)?;
    if t >= end {
        return Err(Error::arg(format!(
            "t={t} out of [0, {end}) for segment {segment}"
        )));
    }
    let bar = s.alpha_bar_local(t, segment)?;
    scaled_loss(den, s, theta_local, bar, t, eps, emb, true)
}

/// Value-only local loss; used for cheap convergence probes.
pub fn local_loss_value(
    den: &DenoiserState,
    s: &NoiseSchedule,
    theta_local: &WeightVector,
    segment: usize,
    t: usize,
    eps: &WeightVector,
    emb: &TaskEmbedding,
) -> Result<f64> {
    let end = s.segment_end(segment)?;
    if t >= end {
        return Err(Error::arg(format!(
            "t={t} out of [0, {end}) for segment {segment}"
        )));
    }
    let bar = s.alpha_bar_local(t, segment)?;
    Ok(scaled_loss(den, s, theta_local, bar, t, eps, emb, false)?.value)
}

/// Draws a segment index uniformly from {1..k}. Consumes no randomness for
/// k = 1, so single-segment runs are bitwise comparable across loss kinds.
pub fn draw_segment(rng: &mut ChaCha8Rng, k: usize) -> usize {
    if k == 1 {
        1
    } else {
        rng.random_range(1..=k)
    }
}

/// Monte-Carlo estimate of E_{i,t,ε} L_i^loc with i uniform over {1..k},
/// t uniform over [0, iT/k), ε standard Gaussian. Value and gradient are
/// averaged over `n_mc` draws.
pub fn expected_local_loss(
    den: &DenoiserState,
    s: &NoiseSchedule,
    targets: &LocalTargetSet,
    emb: &TaskEmbedding,
    n_mc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossSample> {
    if n_mc == 0 {
        return Err(Error::arg("n_mc must be >= 1"));
    }
    if targets.k != s.segments() {
        return Err(Error::dim(format!(
            "target set has k={}, schedule has k={}",
            targets.k,
            s.segments()
        )));
    }
    let dim = targets.targets[0].len();
    let mut value = 0.0;
    let mut grad = WeightVector::zeros(den.phi.len());
    for _ in 0..n_mc {
        let segment = draw_segment(rng, s.segments());
        let t = rng.random_range(0..s.segment_end(segment)?);
        let eps = WeightVector::new(rng::gaussian_vec(rng, dim, 1.0))?;
        let sample = local_loss_sample(
            den,
            s,
            &targets.targets[segment - 1],
            segment,
            t,
            &eps,
            emb,
        )?;
        value += sample.value;
        grad.add_scaled(&sample.grad_phi, 1.0)?;
    }
    let inv = 1.0 / n_mc as f64;
    Ok(LossSample {
        value: value * inv,
        grad_phi: grad.scaled(inv),
    })
}

/// One deterministic reverse step in the selected mode.
pub fn inference_step(
    den: &DenoiserState,
    s: &NoiseSchedule,
    x_t: &WeightVector,
    t: usize,
    emb: &TaskEmbedding,
    mode: InferenceMode,
) -> Result<WeightVector> {
    if t >= s.steps() {
        return Err(Error::arg(format!("t={t} out of [0, {})", s.steps())));
    }
    let eps_hat = den.predict_eps(x_t, t, s.steps(), emb)?;
    let values: Vec<f64> = match mode {
        InferenceMode::Posterior => {
            let alpha_t = s.alpha(t)?;
            let bar_t = s.alpha_bar(t)?;
            let a = 1.0 / alpha_t.sqrt();
            let b = (1.0 - alpha_t) / ((1.0 - bar_t).sqrt() * alpha_t.sqrt());
            x_t.iter()
                .zip(eps_hat.iter())
                .map(|(x, e)| a * x - b * e)
                .collect()
        }
        InferenceMode::Eq2 => {
            let bar_next = s.alpha_bar(t + 1)?;
            let inv = 1.0 / bar_next.sqrt();
            let c = (1.0 - bar_next).sqrt();
            x_t.iter()
                .zip(eps_hat.iter())
                .map(|(x, e)| inv * (x - c * e))
                .collect()
        }
    };
    WeightVector::new(values)
}

/// Runs the full reverse chain from x_0, recording every state and the
/// readouts at t = i·T/k.
pub fn generate_chain(
    den: &DenoiserState,
    s: &NoiseSchedule,
    x_0: &WeightVector,
    emb: &TaskEmbedding,
    mode: InferenceMode,
) -> Result<InferenceChain> {
    if x_0.len() != den.weight_dim() {
        return Err(Error::dim(format!(
            "x_0 dim {} vs denoiser weight dim {}",
            x_0.len(),
            den.weight_dim()
        )));
    }
    let seg_len = s.segment_length();
    let mut states = Vec::with_capacity(s.steps() + 1);
    let mut readouts = Vec::with_capacity(s.segments());
    states.push(x_0.clone());
    let mut x = x_0.clone();
    for t in 0..s.steps() {
        x = inference_step(den, s, &x, t, emb, mode).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at chain step {t}")),
            other => other,
        })?;
        x.check_finite(&format!("chain state after step {t}"))?;
        states.push(x.clone());
        if (t + 1) % seg_len == 0 {
            readouts.push(((t + 1) / seg_len, x.clone()));
        }
    }
    Ok(InferenceChain { states, readouts })
}

/// Chain export for offline visualization: one row per (step, coordinate).
pub fn write_chain_csv<W: Write>(chain: &InferenceChain, mut out: W) -> Result<()> {
    writeln!(out, "step,coord,value")?;
    for (step, state) in chain.states.iter().enumerate() {
        for (coord, value) in state.iter().enumerate() {
            writeln!(out, "{step},{coord},{value}")?;
        }
    }
    Ok(())
}
