//! Weight preparation: optimize each task's downstream network with
//! SAM-perturbed Adam under augmentation, record the full trajectory,
//! early-stop to determine M, and sample k local target weights at uniform
//! intervals d = M/k.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, AdamState, NetworkSpec};
use crate::tasks::{self, TaskInstance};
use crate::vector::WeightVector;

/// Absolute support-loss improvement below which an epoch counts as stalled.
pub const EARLY_STOP_MIN_IMPROVEMENT: f64 = 1e-4;

/// A recorded optimization trajectory θ_0..θ_M.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task_id: u64,
    pub spec: NetworkSpec,
    /// θ_0 is the recorded initialization; length M+1.
    pub thetas: Vec<WeightVector>,
    /// Support loss at θ_M on the un-augmented support set.
    pub final_loss: f64,
}

impl Trajectory {
    pub fn m(&self) -> usize {
        self.thetas.len() - 1
    }

    pub fn theta_init(&self) -> &WeightVector {
        &self.thetas[0]
    }

    pub fn theta_final(&self) -> &WeightVector {
        self.thetas.last().unwrap()
    }

    pub fn weight_dim(&self) -> usize {
        self.thetas[0].len()
    }

    /// Copy truncated to M' = max(k, floor(M/k)·k) epochs, so any segment
    /// count up to M can re-sample targets from one stored trajectory.
    pub fn truncated_to_multiple(&self, k: usize) -> Result<Trajectory> {
        if k == 0 {
            return Err(Error::arg("k must be >= 1"));
        }
        if self.m() < k {
            return Err(Error::arg(format!(
                "trajectory has M={} epochs, fewer than k={k}",
                self.m()
            )));
        }
        let m = (self.m() / k) * k;
        Ok(Trajectory {
            task_id: self.task_id,
            spec: self.spec.clone(),
            thetas: self.thetas[..=m].to_vec(),
            final_loss: self.final_loss,
        })
    }
}

/// The k uniformly sampled targets θ_d, θ_{2d}, ..., θ_{k·d}.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTargetSet {
    pub k: usize,
    pub d: usize,
    pub targets: Vec<WeightVector>,
}

impl LocalTargetSet {
    /// The global optimum θ_M of the source trajectory.
    pub fn global_target(&self) -> &WeightVector {
        self.targets.last().unwrap()
    }
}

/// Knobs of the weight-preparation loop.
#[derive(Clone, Debug)]
pub struct PrepConfig {
    pub lr: f64,
    /// SAM radius; 0 disables the perturbation.
    pub rho: f64,
    pub noise_std: f64,
    pub rotate: bool,
    pub max_epochs: usize,
    pub patience: usize,
    pub k: usize,
    pub init_std: f64,
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::arg("prep.lr must be positive"));
        }
        if self.rho < 0.0 || self.noise_std < 0.0 {
            return Err(Error::arg("prep.rho and prep.noise_std must be nonnegative"));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.k == 0 {
            return Err(Error::arg("prep.max_epochs, prep.patience, prep.k must be >= 1"));
        }
        if self.max_epochs < self.k {
            return Err(Error::arg("prep.max_epochs must be >= prep.k"));
        }
        if self.init_std <= 0.0 {
            return Err(Error::arg("prep.init_std must be positive"));
        }
        Ok(())
    }
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            lr: 0.005,
            rho: 0.05,
            noise_std: 0.05,
            rotate: false,
            max_epochs: 60,
            patience: 8,
            k: 3,
            init_std: nn::DEFAULT_INIT_STD,
        }
    }
}

/// First epoch (1-based) at which the support loss has failed to improve by
/// at least [`EARLY_STOP_MIN_IMPROVEMENT`] for `patience` consecutive
/// epochs; None if the run never stalls.
fn raw_stop_index(loss_history: &[f64], patience: usize) -> Option<usize> {
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for (idx, &loss) in loss_history.iter().enumerate() {
        if loss <= best - EARLY_STOP_MIN_IMPROVEMENT {
            best = loss;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled == patience {
                return Some(idx + 1);
            }
        }
    }
    None
}

/// Early-stopping rule: the raw stop index (or the history length when the
/// rule never fires), rounded DOWN to the nearest multiple of k, minimum k.
pub fn determine_m(loss_history: &[f64], patience: usize, k: usize) -> Result<usize> {
    if loss_history.is_empty() {
        return Err(Error::Empty("loss history".into()));
    }
    if patience == 0 || k == 0 {
        return Err(Error::arg("patience and k must be >= 1"));
    }
    let raw = raw_stop_index(loss_history, patience).unwrap_or(loss_history.len());
    Ok(((raw / k) * k).max(k))
}

/// Runs the preparation loop from an explicit initialization. Per epoch:
/// augment the support batch, compute the SAM perturbation ε from the
/// gradient at θ_t, step Adam with the gradient taken at θ_t + ε, record
/// θ_{t+1}, and track the un-augmented support loss for early stopping.
pub fn collect_trajectory_from(
    task: &TaskInstance,
    spec: &NetworkSpec,
    cfg: &PrepConfig,
    theta_init: WeightVector,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    cfg.validate()?;
    if task.support.is_empty() {
        return Err(Error::Empty("task support set".into()));
    }
    if theta_init.len() != spec.parameter_count() {
        return Err(Error::dim(format!(
            "init has {} entries, spec needs {}",
            theta_init.len(),
            spec.parameter_count()
        )));
    }

    let mut thetas = vec![theta_init.clone()];
    let mut theta = theta_init;
    let mut state = AdamState::new(theta.len(), cfg.lr)?;
    let mut losses: Vec<f64> = Vec::with_capacity(cfg.max_epochs);
    let mut stop: Option<usize> = None;

    for epoch in 0..cfg.max_epochs {
        let batch = tasks::augment(&task.support, cfg.noise_std, cfg.rotate, rng)?;

        let step = (|| -> Result<(WeightVector, AdamState)> {
            let perturbation = if cfg.rho > 0.0 {
                let at_theta = nn::task_loss_grad(spec, &theta, &batch)?;
                nn::sam_perturb(&at_theta.grad, cfg.rho)?
            } else {
                WeightVector::zeros(theta.len())
            };
            let perturbed = theta.add(&perturbation)?;
            let grad = nn::task_loss_grad(spec, &perturbed, &batch)?.grad;
            nn::adam_step(&state, &theta, &grad)
        })();
        let (next_theta, next_state) = step.map_err(|e| match e {
            Error::NonFinite(msg) => Error::Divergence {
                epoch,
                message: msg,
            },
            other => other,
        })?;
        theta = next_theta;
        state = next_state;
        thetas.push(theta.clone());

        let loss = nn::task_loss(spec, &theta, &task.support).map_err(|e| match e {
            Error::NonFinite(msg) => Error::Divergence {
                epoch,
                message: msg,
            },
            other => other,
        })?;
        losses.push(loss);

        if stop.is_none() {
            stop = raw_stop_index(&losses, cfg.patience);
        }
        if let Some(raw) = stop {
            let m = ((raw / cfg.k) * cfg.k).max(cfg.k);
            if thetas.len() > m {
                break;
            }
        }
    }

    let m = determine_m(&losses, cfg.patience, cfg.k)?;
    thetas.truncate(m + 1);
    let final_loss = nn::task_loss(spec, thetas.last().unwrap(), &task.support)?;
    Ok(Trajectory {
        task_id: task.task_seed,
        spec: spec.clone(),
        thetas,
        final_loss,
    })
}

/// Gaussian-initializes θ_0 from the rng, then runs the preparation loop.
pub fn collect_trajectory(
    task: &TaskInstance,
    spec: &NetworkSpec,
    cfg: &PrepConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    cfg.validate()?;
    let theta_init = nn::init_network(spec, cfg.init_std, rng)?;
    collect_trajectory_from(task, spec, cfg, theta_init, rng)
}

/// θ_d, θ_{2d}, ..., θ_{k·d} as copies; errors unless k divides M.
pub fn sample_local_targets(traj: &Trajectory, k: usize) -> Result<LocalTargetSet> {
    if k == 0 {
        return Err(Error::arg("k must be >= 1"));
    }
    let m = traj.m();
    if m % k != 0 {
        return Err(Error::arg(format!("k={k} does not divide M={m}")));
    }
    let d = m / k;
    if d == 0 {
        return Err(Error::arg(format!("M={m} too short for k={k}")));
    }
    let targets = (1..=k).map(|i| traj.thetas[i * d].clone()).collect();
    Ok(LocalTargetSet { k, d, targets })
}
