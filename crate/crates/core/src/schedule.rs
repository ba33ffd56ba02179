//! Noise-schedule algebra.
//!
//! Indexing follows the reversed convention used throughout the pipeline:
//! x_T is the data, x_0 is noise, and products run over suffixes. The
//! schedule stores per-step factors α_0..α_{T-1} and owns both cumulative
//! products
//!
//! - global: ᾱ_t = Π_{j=t}^{T-1} α_j
//! - local:  ᾱ_t^i = Π_{j=t}^{iT/k-1} α_j, for segment i in (0,k]
//!
//! The local table with i=k *is* the global table (same running product
//! from j=T-1 downward), which makes the k=1 equivalence of the two
//! training losses exact rather than approximate.

use crate::error::{Error, Result};
use crate::vector::WeightVector;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    steps: usize,
    segments: usize,
    alphas: Vec<f64>,
    /// local_bars[i-1][t] = Π_{j=t}^{iT/k-1} α_j; length iT/k + 1, entry
    /// at t = iT/k is the empty product 1.
    local_bars: Vec<Vec<f64>>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step factors. `alphas.len()` is
    /// the diffusion horizon T.
    pub fn new(alphas: Vec<f64>, segments: usize) -> Result<Self> {
        let steps = alphas.len();
        if steps == 0 {
            return Err(Error::InvalidSpec("schedule needs at least one step".into()));
        }
        if segments == 0 {
            return Err(Error::InvalidSpec("segment count must be >= 1".into()));
        }
        if steps % segments != 0 {
            return Err(Error::InvalidSpec(format!(
                "segment count {segments} does not divide T={steps}"
            )));
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::InvalidSpec("every alpha must lie in (0,1)".into()));
        }
        if alphas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidSpec("alphas must be nondecreasing".into()));
        }

        // Running multiplication from j = segment end - 1 downward; the
        // i = segments row doubles as the global table.
        let mut local_bars = Vec::with_capacity(segments);
        for i in 1..=segments {
            let end = i * steps / segments;
            let mut bars = vec![1.0; end + 1];
            for t in (0..end).rev() {
                bars[t] = alphas[t] * bars[t + 1];
            }
            local_bars.push(bars);
        }

        Ok(NoiseSchedule {
            steps,
            segments,
            alphas,
            local_bars,
        })
    }

    /// Linear interpolation of α from alpha_min (j=0) to alpha_max (j=T-1).
    pub fn linear(
        steps: usize,
        segments: usize,
        alpha_min: f64,
        alpha_max: f64,
    ) -> Result<Self> {
        if !(alpha_min > 0.0 && alpha_min < 1.0 && alpha_max > 0.0 && alpha_max < 1.0) {
            return Err(Error::InvalidSpec(
                "alpha bounds must lie in (0,1)".into(),
            ));
        }
        if alpha_min > alpha_max {
            return Err(Error::InvalidSpec("alpha_min must be <= alpha_max".into()));
        }
        if steps == 0 {
            return Err(Error::InvalidSpec("schedule needs at least one step".into()));
        }
        let alphas = if steps == 1 {
            vec![alpha_min]
        } else {
            (0..steps)
                .map(|j| {
                    alpha_min + (j as f64 / (steps - 1) as f64) * (alpha_max - alpha_min)
                })
                .collect()
        };
        NoiseSchedule::new(alphas, segments)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn segment_length(&self) -> usize {
        self.steps / self.segments
    }

    /// Chain index where segment i's target sits: iT/k.
    pub fn segment_end(&self, segment: usize) -> Result<usize> {
        self.check_segment(segment)?;
        Ok(segment * self.steps / self.segments)
    }

    pub fn alpha(&self, j: usize) -> Result<f64> {
        self.alphas
            .get(j)
            .copied()
            .ok_or_else(|| Error::arg(format!("alpha index {j} out of range")))
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Global cumulative product ᾱ_t for t in [0, T]; ᾱ_T = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.steps {
            return Err(Error::arg(format!(
                "t={t} out of range for T={}",
                self.steps
            )));
        }
        Ok(self.local_bars[self.segments - 1][t])
    }

    /// Local cumulative product ᾱ_t^i for t in [0, iT/k]; equals 1 at the
    /// segment end.
    pub fn alpha_bar_local(&self, t: usize, segment: usize) -> Result<f64> {
        let end = self.segment_end(segment)?;
        if t > end {
            return Err(Error::arg(format!(
                "t={t} beyond segment end {end} (segment {segment})"
            )));
        }
        Ok(self.local_bars[segment - 1][t])
    }

    /// Forward noising: x_t = sqrt(ᾱ_t^i) θ + sqrt(1-ᾱ_t^i) ε.
    pub fn forward_noise(
        &self,
        theta_target: &WeightVector,
        t: usize,
        segment: usize,
        eps: &WeightVector,
    ) -> Result<WeightVector> {
        if theta_target.len() != eps.len() {
            return Err(Error::dim(format!(
                "forward_noise: theta dim {} vs eps dim {}",
                theta_target.len(),
                eps.len()
            )));
        }
        let bar = self.alpha_bar_local(t, segment)?;
        let signal = bar.sqrt();
        let noise = (1.0 - bar).sqrt();
        let values = theta_target
            .iter()
            .zip(eps.iter())
            .map(|(th, e)| signal * th + noise * e)
            .collect();
        WeightVector::new(values)
    }

    fn check_segment(&self, segment: usize) -> Result<()> {
        if segment == 0 || segment > self.segments {
            return Err(Error::arg(format!(
                "segment {segment} out of (0, {}]",
                self.segments
            )));
        }
        Ok(())
    }
}
