//! The REPTILE bi-level training loop over local target weights, plus the
//! plain downstream REPTILE baseline for the ablation ladder.
//!
//! Per outer epoch: B times, sample a task j and a segment i, clone φ, run
//! K plain-gradient-descent inner steps on the per-sample loss (fresh
//! (t, ε) each step), and record the delta φ_i − φ; then apply the outer
//! interpolation φ ← φ + (ζ/B)·Σ deltas.
//!
//! The `loss_kind` realizes the ablation ladder:
//! - `LocalConsistency` — the segment-aware objective (Mc-Di);
//! - `VanillaOnLocals` — the vanilla objective applied to every local
//!   target as if it were the full-horizon endpoint (Tw-Di);
//! - `VanillaGlobalOnly` — segment forced to k, global target only (Mv-Di).
//!
//! Segment draws consume no randomness when k = 1, so `LocalConsistency`
//! and `VanillaGlobalOnly` produce bitwise-identical runs on k = 1 stores.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::DenoiserState;
use crate::diffusion::{self, LossSample};
use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tasks::{TaskEmbedding, TaskInstance};
use crate::vector::WeightVector;
use crate::weightprep::LocalTargetSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    LocalConsistency,
    VanillaOnLocals,
    VanillaGlobalOnly,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "local_consistency" => Ok(LossKind::LocalConsistency),
            "vanilla_on_locals" => Ok(LossKind::VanillaOnLocals),
            "vanilla_global_only" => Ok(LossKind::VanillaGlobalOnly),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::LocalConsistency => "local_consistency",
            LossKind::VanillaOnLocals => "vanilla_on_locals",
            LossKind::VanillaGlobalOnly => "vanilla_global_only",
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaConfig {
    /// Inner-loop learning rate η.
    pub eta: f64,
    /// Outer-loop learning rate ζ.
    pub zeta: f64,
    /// Inner steps K.
    pub inner_steps: usize,
    /// Meta-batch size B.
    pub meta_batch: usize,
    pub epochs: usize,
    pub loss_kind: LossKind,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || self.zeta <= 0.0 {
            return Err(Error::arg("meta.eta and meta.zeta must be positive"));
        }
        if self.meta_batch == 0 {
            return Err(Error::arg("meta.B must be >= 1"));
        }
        Ok(())
    }
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            eta: 0.005,
            zeta: 0.001,
            inner_steps: 3,
            meta_batch: 5,
            epochs: 6000,
            loss_kind: LossKind::LocalConsistency,
        }
    }
}

/// One stored training task: its sampled targets and conditioning vector.
#[derive(Clone, Debug)]
pub struct StoreEntry {
    pub targets: LocalTargetSet,
    pub embedding: TaskEmbedding,
}

#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Mean of the inner-step losses within the epoch (NaN for the
    /// pre-training record, which performs no steps).
    pub mean_loss: f64,
    /// Fixed-probe estimates of each segment loss L_i^loc, i = 1..k.
    pub segment_losses: Vec<f64>,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    pub seed: u64,
    /// records[0] is the pre-training probe state at epoch 0.
    pub records: Vec<TrainRecord>,
    /// Total inner gradient evaluations: the latency/budget counter.
    pub inner_grad_evals: u64,
}

impl TrainLog {
    pub fn final_mean_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.mean_loss)
    }

    /// First epoch at which segment i's probe loss drops to `fraction` of
    /// its pre-training value; None if it never does.
    pub fn first_epoch_below(&self, segment: usize, fraction: f64) -> Option<usize> {
        let initial = self.records.first()?.segment_losses.get(segment - 1)?;
        let threshold = fraction * initial;
        self.records
            .iter()
            .skip(1)
            .find(|r| r.segment_losses[segment - 1] <= threshold)
            .map(|r| r.epoch)
    }
}

/// Number of fixed (task, t, ε) probes per segment used for the per-epoch
/// segment-loss estimates in the TrainLog.
const SEGMENT_PROBES: usize = 8;

struct SegmentProbe {
    task_index: usize,
    t: usize,
    eps: WeightVector,
}

fn draw_probes(
    store: &[StoreEntry],
    s: &NoiseSchedule,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<SegmentProbe>>> {
    let mut per_segment = Vec::with_capacity(s.segments());
    for segment in 1..=s.segments() {
        let end = s.segment_end(segment)?;
        let probes = (0..SEGMENT_PROBES)
            .map(|_| {
                Ok(SegmentProbe {
                    task_index: rng.random_range(0..store.len()),
                    t: rng.random_range(0..end),
                    eps: WeightVector::new(rng::gaussian_vec(rng, dim, 1.0))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        per_segment.push(probes);
    }
    Ok(per_segment)
}

fn probe_segment_losses(
    den: &DenoiserState,
    s: &NoiseSchedule,
    store: &[StoreEntry],
    probes: &[Vec<SegmentProbe>],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(probes.len());
    for (seg_idx, seg_probes) in probes.iter().enumerate() {
        let segment = seg_idx + 1;
        let mut sum = 0.0;
        for p in seg_probes {
            let entry = &store[p.task_index];
            sum += diffusion::local_loss_value(
                den,
                s,
                &entry.targets.targets[segment - 1],
                segment,
                p.t,
                &p.eps,
                &entry.embedding,
            )?;
        }
        out.push(sum / seg_probes.len() as f64);
    }
    Ok(out)
}

/// One inner-step loss sample for the configured kind. The segment draw is
/// shared across kinds (and skipped entirely at k = 1) so matched seeds
/// consume identical randomness.
fn sampled_step_loss(
    den: &DenoiserState,
    s: &NoiseSchedule,
    entry: &StoreEntry,
    kind: LossKind,
    drawn_segment: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossSample> {
    let k = s.segments();
    let dim = entry.targets.targets[0].len();
    match kind {
        LossKind::LocalConsistency => {
            let segment = drawn_segment;
            let t = rng.random_range(0..s.segment_end(segment)?);
            let eps = WeightVector::new(rng::gaussian_vec(rng, dim, 1.0))?;
            diffusion::local_loss_sample(
                den,
                s,
                &entry.targets.targets[segment - 1],
                segment,
                t,
                &eps,
                &entry.embedding,
            )
        }
        LossKind::VanillaOnLocals => {
            let t = rng.random_range(0..s.steps());
            let eps = WeightVector::new(rng::gaussian_vec(rng, dim, 1.0))?;
            diffusion::vanilla_loss_sample(
                den,
                s,
                &entry.targets.targets[drawn_segment - 1],
                t,
                &eps,
                &entry.embedding,
            )
        }
        LossKind::VanillaGlobalOnly => {
            let t = rng.random_range(0..s.steps());
            let eps = WeightVector::new(rng::gaussian_vec(rng, dim, 1.0))?;
            diffusion::vanilla_loss_sample(
                den,
                s,
                &entry.targets.targets[k - 1],
                t,
                &eps,
                &entry.embedding,
            )
        }
    }
}

/// K plain-gradient-descent steps on the local consistency loss for one
/// (target, segment), from a cloned φ. Fresh (t, ε) per step.
pub fn inner_loop(
    den: &DenoiserState,
    phi: &WeightVector,
    target: &WeightVector,
    segment: usize,
    task_emb: &TaskEmbedding,
    s: &NoiseSchedule,
    cfg: &MetaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<WeightVector> {
    cfg.validate()?;
    s.segment_end(segment)?;
    let mut work = den.clone();
    work.phi = phi.clone();
    for _ in 0..cfg.inner_steps {
        let t = rng.random_range(0..s.segment_end(segment)?);
        let eps = WeightVector::new(rng::gaussian_vec(rng, target.len(), 1.0))?;
        let sample =
            diffusion::local_loss_sample(&work, s, target, segment, t, &eps, task_emb)?;
        if !sample.value.is_finite() {
            return Err(Error::NonFinite("inner-loop loss".into()));
        }
        work.phi.add_scaled(&sample.grad_phi, -cfg.eta)?;
    }
    Ok(work.phi)
}

/// Outer interpolation φ' = φ + (ζ/B)·Σ deltas with B = deltas.len().
pub fn outer_update(
    phi: &WeightVector,
    deltas: &[WeightVector],
    zeta: f64,
) -> Result<WeightVector> {
    if deltas.is_empty() {
        return Err(Error::Empty("outer update needs at least one delta".into()));
    }
    let mut out = phi.clone();
    let scale = zeta / deltas.len() as f64;
    for delta in deltas {
        out.add_scaled(delta, scale)?;
    }
    Ok(out)
}

/// The full meta-training loop. Returns the trained state and a log with
/// one record per epoch plus a pre-training probe record.
pub fn meta_train(
    store: &[StoreEntry],
    den: &DenoiserState,
    s: &NoiseSchedule,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<(DenoiserState, TrainLog)> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::Empty("target store".into()));
    }
    for entry in store {
        if entry.targets.k != s.segments() {
            return Err(Error::dim(format!(
                "store entry has k={}, schedule has k={}",
                entry.targets.k,
                s.segments()
            )));
        }
    }
    let dim = store[0].targets.targets[0].len();
    let mut rng = rng::seeded(seed);
    let probes = draw_probes(store, s, dim, &mut rng)?;

    let mut state = den.clone();
    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut inner_grad_evals: u64 = 0;
    let started = Instant::now();

    records.push(TrainRecord {
        epoch: 0,
        mean_loss: f64::NAN,
        segment_losses: probe_segment_losses(&state, s, store, &probes)?,
        elapsed_secs: started.elapsed().as_secs_f64(),
    });

    for epoch in 1..=cfg.epochs {
        let mut deltas = Vec::with_capacity(cfg.meta_batch);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for _ in 0..cfg.meta_batch {
            let j = rng.random_range(0..store.len());
            let segment = diffusion::draw_segment(&mut rng, s.segments());
            let entry = &store[j];
            let mut work = state.clone();
            for _ in 0..cfg.inner_steps {
                let sample =
                    sampled_step_loss(&work, s, entry, cfg.loss_kind, segment, &mut rng)?;
                loss_sum += sample.value;
                loss_count += 1;
                inner_grad_evals += 1;
                work.phi.add_scaled(&sample.grad_phi, -cfg.eta)?;
            }
            deltas.push(work.phi.sub(&state.phi)?);
        }
        state.phi = outer_update(&state.phi, &deltas, cfg.zeta)?;
        state.phi.check_finite("phi after outer update")?;

        records.push(TrainRecord {
            epoch,
            mean_loss: if loss_count == 0 {
                f64::NAN
            } else {
                loss_sum / loss_count as f64
            },
            segment_losses: probe_segment_losses(&state, s, store, &probes)?,
            elapsed_secs: started.elapsed().as_secs_f64(),
        });
    }

    Ok((
        state,
        TrainLog {
            seed,
            records,
            inner_grad_evals,
        },
    ))
}

/// REPTILE directly on downstream weights with the task loss: inner SGD on
/// the support set, outer interpolation. Returns the meta-initialization.
pub fn reptile_baseline(
    tasks: &[TaskInstance],
    spec: &NetworkSpec,
    cfg: &MetaConfig,
    init_std: f64,
    seed: u64,
) -> Result<(WeightVector, u64)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("task collection".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut theta = nn::init_network(spec, init_std, &mut rng)?;
    let mut grad_evals: u64 = 0;
    for _ in 0..cfg.epochs {
        let mut deltas = Vec::with_capacity(cfg.meta_batch);
        for _ in 0..cfg.meta_batch {
            let j = rng.random_range(0..tasks.len());
            let mut inner = theta.clone();
            for _ in 0..cfg.inner_steps {
                let g = nn::task_loss_grad(spec, &inner, &tasks[j].support)?;
                grad_evals += 1;
                inner.add_scaled(&g.grad, -cfg.eta)?;
            }
            deltas.push(inner.sub(&theta)?);
        }
        theta = outer_update(&theta, &deltas, cfg.zeta)?;
    }
    Ok((theta, grad_evals))
}
