//! The conditional noise predictor ε_φ(x_t, t, Emb_T).
//!
//! A dense network over the concatenation of the noisy weight vector, a
//! sinusoidal timestep embedding, and the task embedding. Output width
//! equals the downstream weight dimension D exactly.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Activation, ForwardTrace, NetworkSpec, OutputHead};
use crate::tasks::TaskEmbedding;
use crate::vector::WeightVector;

pub const DEFAULT_T_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

/// Sinusoidal timestep features; entries bounded in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepEmbedding {
    pub values: Vec<f64>,
}

/// For p = 0..dim/2-1 the entries are sin(t·ω_p), cos(t·ω_p) with
/// ω_p = (1/T)·10000^(−2p/dim).
pub fn timestep_embed(t: usize, t_total: usize, dim: usize) -> Result<TimestepEmbedding> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::arg(format!("timestep embedding dim {dim} must be even")));
    }
    if t > t_total {
        return Err(Error::arg(format!("t={t} beyond horizon T={t_total}")));
    }
    let mut values = Vec::with_capacity(dim);
    for p in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * p as f64 / dim as f64) / t_total as f64;
        let arg = t as f64 * omega;
        values.push(arg.sin());
        values.push(arg.cos());
    }
    Ok(TimestepEmbedding { values })
}

/// Denoiser parameters φ plus the architecture they parameterize.
#[derive(Clone, Debug)]
pub struct DenoiserState {
    pub spec: NetworkSpec,
    pub phi: WeightVector,
    weight_dim: usize,
    t_embed_dim: usize,
    emb_dim: usize,
}

impl DenoiserState {
    /// Dense network [D + t_embed_dim + E, hidden..., D] with tanh hidden
    /// activations and a linear output head, Gaussian-initialized.
    pub fn init(
        weight_dim: usize,
        t_embed_dim: usize,
        emb_dim: usize,
        hidden: &[usize],
        init_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let spec = Self::arch_spec(weight_dim, t_embed_dim, emb_dim, hidden)?;
        let phi = nn::init_network(&spec, init_std, rng)?;
        Ok(DenoiserState {
            spec,
            phi,
            weight_dim,
            t_embed_dim,
            emb_dim,
        })
    }

    /// Rebuilds a state around explicit parameters (checkpoint loading).
    pub fn from_parts(
        weight_dim: usize,
        t_embed_dim: usize,
        emb_dim: usize,
        spec: NetworkSpec,
        phi: WeightVector,
    ) -> Result<Self> {
        let expected = Self::arch_spec(
            weight_dim,
            t_embed_dim,
            emb_dim,
            &spec.layer_sizes[1..spec.layer_sizes.len() - 1],
        )?;
        if expected.layer_sizes != spec.layer_sizes {
            return Err(Error::dim(format!(
                "denoiser layer sizes {:?} do not match dims (D={weight_dim}, t={t_embed_dim}, E={emb_dim})",
                spec.layer_sizes
            )));
        }
        if phi.len() != spec.parameter_count() {
            return Err(Error::dim(format!(
                "phi has {} entries, spec needs {}",
                phi.len(),
                spec.parameter_count()
            )));
        }
        Ok(DenoiserState {
            spec,
            phi,
            weight_dim,
            t_embed_dim,
            emb_dim,
        })
    }

    fn arch_spec(
        weight_dim: usize,
        t_embed_dim: usize,
        emb_dim: usize,
        hidden: &[usize],
    ) -> Result<NetworkSpec> {
        if weight_dim == 0 || emb_dim == 0 {
            return Err(Error::InvalidSpec(
                "weight and embedding dims must be >= 1".into(),
            ));
        }
        if t_embed_dim % 2 != 0 || t_embed_dim == 0 {
            return Err(Error::InvalidSpec(
                "timestep embedding dim must be even and positive".into(),
            ));
        }
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(weight_dim + t_embed_dim + emb_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(weight_dim);
        NetworkSpec::new(sizes, Activation::Tanh, OutputHead::Linear)
    }

    pub fn weight_dim(&self) -> usize {
        self.weight_dim
    }

    pub fn t_embed_dim(&self) -> usize {
        self.t_embed_dim
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    fn concat_input(
        &self,
        x: &WeightVector,
        t: usize,
        t_total: usize,
        emb: &TaskEmbedding,
    ) -> Result<Vec<f64>> {
        if x.len() != self.weight_dim {
            return Err(Error::dim(format!(
                "x has dim {}, denoiser expects {}",
                x.len(),
                self.weight_dim
            )));
        }
        if emb.len() != self.emb_dim {
            return Err(Error::dim(format!(
                "embedding has dim {}, denoiser expects {}",
                emb.len(),
                self.emb_dim
            )));
        }
        let temb = timestep_embed(t, t_total, self.t_embed_dim)?;
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(x);
        input.extend_from_slice(&temb.values);
        input.extend_from_slice(&emb.values);
        Ok(input)
    }

    /// ε̂ = forward pass on concat(x_t, timestep_embed(t), emb); pure.
    pub fn predict_eps(
        &self,
        x: &WeightVector,
        t: usize,
        t_total: usize,
        emb: &TaskEmbedding,
    ) -> Result<WeightVector> {
        let input = self.concat_input(x, t, t_total, emb)?;
        let out = nn::forward(&self.spec, &self.phi, &[input])?;
        WeightVector::new(out.into_iter().next().unwrap())
    }

    /// Forward pass keeping the trace needed to backpropagate into φ.
    pub fn predict_eps_traced(
        &self,
        x: &WeightVector,
        t: usize,
        t_total: usize,
        emb: &TaskEmbedding,
    ) -> Result<(WeightVector, ForwardTrace)> {
        let input = self.concat_input(x, t, t_total, emb)?;
        let trace = nn::forward_trace(&self.spec, &self.phi, &[input])?;
        let eps_hat = WeightVector::new(trace.outputs()[0].clone())?;
        Ok((eps_hat, trace))
    }

    /// VJP: gradient of a scalar loss w.r.t. φ given dL/dε̂.
    pub fn backward_phi(&self, trace: &ForwardTrace, d_eps_hat: &[f64]) -> Result<WeightVector> {
        nn::backward(&self.spec, &self.phi, trace, &[d_eps_hat.to_vec()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff;
    use crate::rng::{gaussian_vec, seeded};

    fn emb(values: Vec<f64>) -> TaskEmbedding {
        TaskEmbedding { values }
    }

    #[test]
    fn timestep_embed_basics() {
        let e = timestep_embed(0, 20, 8).unwrap();
        assert_eq!(e.values, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(timestep_embed(0, 20, 7).is_err());
        assert!(timestep_embed(21, 20, 8).is_err());
        for t in 0..=20 {
            let e = timestep_embed(t, 20, 16).unwrap();
            assert!(e.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn timestep_embed_distinguishes_all_steps() {
        let all: Vec<_> = (0..=20).map(|t| timestep_embed(t, 20, 16).unwrap()).collect();
        for a in 0..all.len() {
            for b in (a + 1)..all.len() {
                assert_ne!(all[a], all[b], "t={a} and t={b} collide");
            }
        }
    }

    #[test]
    fn init_shapes_and_param_count() {
        let den = DenoiserState::init(22, 16, 8, &[64], 0.1, &mut seeded(4)).unwrap();
        assert_eq!(den.input_dim(), 46);
        assert_eq!(den.spec.output_dim(), 22);
        assert_eq!(den.phi.len(), 46 * 64 + 64 + 64 * 22 + 22);

        let a = DenoiserState::init(5, 4, 3, &[8, 8], 0.1, &mut seeded(9)).unwrap();
        let b = DenoiserState::init(5, 4, 3, &[8, 8], 0.1, &mut seeded(9)).unwrap();
        assert_eq!(a.phi, b.phi);
    }

    #[test]
    fn zero_phi_predicts_zero() {
        let mut den = DenoiserState::init(4, 4, 2, &[6], 0.1, &mut seeded(1)).unwrap();
        den.phi = WeightVector::zeros(den.phi.len());
        let x = WeightVector::new(vec![0.3, -0.1, 0.9, 0.0]).unwrap();
        let out = den
            .predict_eps(&x, 2, 10, &emb(vec![0.5, -0.5]))
            .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn predict_matches_plain_forward_on_concat() {
        let mut rng = seeded(12);
        let den = DenoiserState::init(6, 4, 3, &[10], 0.2, &mut rng).unwrap();
        let x = WeightVector::new(gaussian_vec(&mut rng, 6, 1.0)).unwrap();
        let e = emb(gaussian_vec(&mut rng, 3, 1.0));
        let t = 3;
        let ours = den.predict_eps(&x, t, 12, &e).unwrap();

        let temb = timestep_embed(t, 12, 4).unwrap();
        let mut concat = Vec::new();
        concat.extend_from_slice(&x);
        concat.extend_from_slice(&temb.values);
        concat.extend_from_slice(&e.values);
        let oracle = nn::forward(&den.spec, &den.phi, &[concat]).unwrap();
        assert_eq!(ours.as_slice(), oracle[0].as_slice());
    }

    #[test]
    fn dimension_mismatches_error() {
        let den = DenoiserState::init(5, 4, 2, &[6], 0.1, &mut seeded(2)).unwrap();
        let x_bad = WeightVector::zeros(4);
        assert!(den.predict_eps(&x_bad, 0, 10, &emb(vec![0.0, 0.0])).is_err());
        let x = WeightVector::zeros(5);
        assert!(den.predict_eps(&x, 0, 10, &emb(vec![0.0])).is_err());
    }

    #[test]
    fn phi_gradient_matches_finite_differences() {
        let mut rng = seeded(21);
        let den = DenoiserState::init(4, 4, 2, &[8], 0.3, &mut rng).unwrap();
        let x = WeightVector::new(gaussian_vec(&mut rng, 4, 1.0)).unwrap();
        let e = emb(gaussian_vec(&mut rng, 2, 1.0));
        let target = WeightVector::new(gaussian_vec(&mut rng, 4, 1.0)).unwrap();

        // Scalar loss: ||eps_hat - target||^2.
        let (eps_hat, trace) = den.predict_eps_traced(&x, 1, 8, &e).unwrap();
        let d: Vec<f64> = eps_hat
            .iter()
            .zip(target.iter())
            .map(|(a, b)| 2.0 * (a - b))
            .collect();
        let analytic = den.backward_phi(&trace, &d).unwrap();

        let numeric = finite_diff(
            |phi| {
                let mut probe = den.clone();
                probe.phi = phi.clone();
                let out = probe.predict_eps(&x, 1, 8, &e)?;
                Ok(out
                    .iter()
                    .zip(target.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum())
            },
            &den.phi,
            1e-5,
        )
        .unwrap();

        let rel = analytic.sub(&numeric).unwrap().norm() / numeric.norm().max(1e-12);
        assert!(rel <= 1e-4, "relative error {rel}");
    }
}
