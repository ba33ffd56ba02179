//! Seeded experiment runners.
//!
//! All randomness flows from `base_seed` through fixed stream constants,
//! so a full prepare → train → eval pipeline is bitwise reproducible. The
//! in-memory helpers ([`prepare_tasks`], [`train_denoiser`],
//! [`evaluate_source`]) carry the logic; the `run_*` functions wrap them
//! with file input/output for the CLI.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::denoiser::DenoiserState;
use crate::diffusion::{self, InferenceChain};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{self, MetricsRecord};
use crate::io;
use crate::meta::{self, LossKind, MetaConfig, StoreEntry, TrainLog};
use crate::nn::{self, AdamState, NetworkSpec};
use crate::rng::{self, mix_seed, seeded};
use crate::schedule::NoiseSchedule;
use crate::tasks::{self, TaskEmbedding, TaskFamily, TaskInstance};
use crate::theory::{self, QuadraticProblem};
use crate::vector::WeightVector;
use crate::weightprep::{self, Trajectory};

// Seed streams. Every derived generator is mix_seed(base, STREAM) or a
// further mix of task seeds; changing one stage never shifts another.
pub const STREAM_SHARED_INIT: u64 = 1;
pub const STREAM_TRAIN_TASKS: u64 = 2;
pub const STREAM_EVAL_TASKS: u64 = 3;
pub const STREAM_DENOISER_INIT: u64 = 4;
pub const STREAM_META_TRAIN: u64 = 5;
pub const STREAM_EVAL_CHAINS: u64 = 6;
pub const STREAM_PREP: u64 = 7;
pub const STREAM_RANDOM_CONTROL: u64 = 8;
pub const STREAM_REPTILE: u64 = 9;
pub const STREAM_VERIFY: u64 = 10;

const MAX_SEED_CANDIDATES: u64 = 100_000;

/// One task with its collected ground-truth trajectory and embedding.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub index: usize,
    pub task: TaskInstance,
    pub trajectory: Trajectory,
    pub embedding: TaskEmbedding,
}

#[derive(Clone, Debug)]
pub struct PreparedTasks {
    pub spec: NetworkSpec,
    pub tasks: Vec<PreparedTask>,
    /// (index, task_seed, error message) for diverged tasks.
    pub failures: Vec<(usize, u64, String)>,
}

/// Deterministic candidate-seed scan with the cluster-separation filter.
fn select_task_seeds(cfg: &ExperimentConfig, stream: u64, count: usize) -> Result<Vec<u64>> {
    let stream_base = mix_seed(cfg.base_seed, stream);
    let mut seeds = Vec::with_capacity(count);
    let mut candidate: u64 = 0;
    while seeds.len() < count {
        if candidate >= MAX_SEED_CANDIDATES {
            return Err(Error::Breakdown(format!(
                "could not find {count} admissible task seeds in {MAX_SEED_CANDIDATES} candidates"
            )));
        }
        let seed = mix_seed(stream_base, candidate);
        candidate += 1;
        if cfg.task.family == TaskFamily::Blobs && cfg.task.min_separation > 0.0 {
            let task = tasks::sample_task(
                cfg.task.family,
                cfg.task.n_way,
                cfg.task.k_shot,
                cfg.task.query_size,
                seed,
            )?;
            if task.min_cluster_separation().unwrap_or(f64::INFINITY) < cfg.task.min_separation {
                continue;
            }
        }
        seeds.push(seed);
    }
    Ok(seeds)
}

fn shared_init(cfg: &ExperimentConfig, spec: &NetworkSpec) -> Result<Option<WeightVector>> {
    if !cfg.shared_init {
        return Ok(None);
    }
    let mut rng = seeded(mix_seed(cfg.base_seed, STREAM_SHARED_INIT));
    Ok(Some(nn::init_network(spec, cfg.prep.init_std, &mut rng)?))
}

/// Samples `count` tasks from the given stream and collects a trajectory
/// per task. Diverged tasks are recorded and skipped.
pub fn prepare_tasks(
    cfg: &ExperimentConfig,
    stream: u64,
    count: usize,
) -> Result<PreparedTasks> {
    let spec = cfg.downstream_spec()?;
    let init = shared_init(cfg, &spec)?;
    let seeds = select_task_seeds(cfg, stream, count)?;

    let mut out = PreparedTasks {
        spec: spec.clone(),
        tasks: Vec::with_capacity(count),
        failures: Vec::new(),
    };
    for (index, &task_seed) in seeds.iter().enumerate() {
        let task = tasks::sample_task(
            cfg.task.family,
            cfg.task.n_way,
            cfg.task.k_shot,
            cfg.task.query_size,
            task_seed,
        )?;
        let mut prep_rng = seeded(mix_seed(task_seed, STREAM_PREP));
        let collected = match &init {
            Some(theta0) => weightprep::collect_trajectory_from(
                &task,
                &spec,
                &cfg.prep,
                theta0.clone(),
                &mut prep_rng,
            ),
            None => weightprep::collect_trajectory(&task, &spec, &cfg.prep, &mut prep_rng),
        };
        match collected {
            Ok(trajectory) => {
                let embedding = tasks::embed_task(&task)?;
                out.tasks.push(PreparedTask {
                    index,
                    task,
                    trajectory,
                    embedding,
                });
            }
            Err(Error::Divergence { epoch, message }) => {
                out.failures
                    .push((index, task_seed, format!("epoch {epoch}: {message}")));
            }
            Err(other) => return Err(other),
        }
    }
    Ok(out)
}

/// Target store for a segment count, re-truncating each trajectory to a
/// multiple of k.
pub fn store_for_k(prepared: &PreparedTasks, k: usize) -> Result<Vec<StoreEntry>> {
    prepared
        .tasks
        .iter()
        .map(|pt| {
            let truncated = pt.trajectory.truncated_to_multiple(k)?;
            Ok(StoreEntry {
                targets: weightprep::sample_local_targets(&truncated, k)?,
                embedding: pt.embedding.clone(),
            })
        })
        .collect()
}

/// Trains a denoiser on the prepared trajectories with an explicit segment
/// count and loss kind (the ablation ladder reuses this with the same
/// initialization and training seed for every variant). Returns the state,
/// the schedule actually used, and the log.
pub fn train_denoiser(
    cfg: &ExperimentConfig,
    prepared: &PreparedTasks,
    k: usize,
    loss_kind: LossKind,
) -> Result<(DenoiserState, NoiseSchedule, TrainLog)> {
    if prepared.tasks.is_empty() {
        return Err(Error::Empty("no prepared tasks".into()));
    }
    let (schedule, _) = cfg.build_schedule_for_k(k)?;
    let store = store_for_k(prepared, k)?;
    let weight_dim = prepared.spec.parameter_count();
    let emb_dim = cfg.embedding_dim();
    for entry in &store {
        if entry.embedding.len() != emb_dim {
            return Err(Error::dim(format!(
                "embedding dim {} != configured {}",
                entry.embedding.len(),
                emb_dim
            )));
        }
    }
    let mut init_rng = seeded(mix_seed(cfg.base_seed, STREAM_DENOISER_INIT));
    let den = DenoiserState::init(
        weight_dim,
        cfg.denoiser.t_embed_dim,
        emb_dim,
        &cfg.denoiser.hidden,
        cfg.denoiser.init_std,
        &mut init_rng,
    )?;
    let meta_cfg = MetaConfig {
        loss_kind,
        ..cfg.meta.clone()
    };
    let (trained, log) = meta::meta_train(
        &store,
        &den,
        &schedule,
        &meta_cfg,
        mix_seed(cfg.base_seed, STREAM_META_TRAIN),
    )?;
    Ok((trained, schedule, log))
}

/// Where the evaluated weights come from.
pub enum WeightSource<'a> {
    /// Gradient-free generation through the reverse chain.
    Chain(&'a DenoiserState),
    /// A fixed vector for every task (the REPTILE meta-initialization).
    Fixed(&'a WeightVector),
    /// The trajectory's own θ_M: the upper reference.
    GroundTruth,
    /// Fresh Gaussian weights: the chance-level control.
    RandomInit,
}

fn finetune(
    spec: &NetworkSpec,
    start: &WeightVector,
    support: &crate::nn::Batch,
    steps: usize,
    lr: f64,
) -> Result<WeightVector> {
    let mut w = start.clone();
    let mut state = AdamState::new(w.len(), lr)?;
    for _ in 0..steps {
        let g = nn::task_loss_grad(spec, &w, support)?;
        let (w2, s2) = nn::adam_step(&state, &w, &g.grad)?;
        w = w2;
        state = s2;
    }
    Ok(w)
}

/// Evaluates one weight source on the prepared eval tasks: reconstruction
/// MSE against θ_M, per-readout MSE against each θ_{i·d}, and the query
/// metric of the produced weights (optionally after a few fine-tune steps).
pub fn evaluate_source(
    cfg: &ExperimentConfig,
    variant: &str,
    source: WeightSource,
    schedule: &NoiseSchedule,
    eval: &PreparedTasks,
    chains_dir: Option<&Path>,
) -> Result<MetricsRecord> {
    if eval.tasks.is_empty() {
        return Err(Error::Empty("no eval tasks".into()));
    }
    let k = schedule.segments();
    let mut recon = Vec::with_capacity(eval.tasks.len());
    let mut readouts = vec![Vec::with_capacity(eval.tasks.len()); k];
    let mut query = Vec::with_capacity(eval.tasks.len());
    let mut denoiser_evals = 0u64;

    for pt in &eval.tasks {
        let truncated = pt.trajectory.truncated_to_multiple(k)?;
        let targets = weightprep::sample_local_targets(&truncated, k)?;
        let dim = truncated.weight_dim();

        let mut chain: Option<InferenceChain> = None;
        let theta_hat = match &source {
            WeightSource::Chain(den) => {
                let mut chain_rng = seeded(mix_seed(
                    mix_seed(cfg.base_seed, STREAM_EVAL_CHAINS),
                    pt.task.task_seed,
                ));
                let x0 = WeightVector::new(rng::gaussian_vec(&mut chain_rng, dim, 1.0))?;
                let c =
                    diffusion::generate_chain(den, schedule, &x0, &pt.embedding, cfg.inference_mode)?;
                denoiser_evals = schedule.steps() as u64;
                let theta = c.final_state().clone();
                chain = Some(c);
                theta
            }
            WeightSource::Fixed(w) => (*w).clone(),
            WeightSource::GroundTruth => truncated.theta_final().clone(),
            WeightSource::RandomInit => {
                let mut init_rng = seeded(mix_seed(
                    mix_seed(cfg.base_seed, STREAM_RANDOM_CONTROL),
                    pt.task.task_seed,
                ));
                nn::init_network(&eval.spec, cfg.prep.init_std, &mut init_rng)?
            }
        };

        recon.push(theta_hat.mse(targets.global_target())?);
        for i in 1..=k {
            let generated_i = chain
                .as_ref()
                .and_then(|c| c.readout(i))
                .unwrap_or(&theta_hat);
            readouts[i - 1].push(generated_i.mse(&targets.targets[i - 1])?);
        }

        let final_w = if cfg.finetune_steps > 0 {
            finetune(
                &eval.spec,
                &theta_hat,
                &pt.task.support,
                cfg.finetune_steps,
                cfg.prep.lr,
            )?
        } else {
            theta_hat
        };
        query.push(metrics::query_metric(&eval.spec, &final_w, &pt.task.query)?);

        if let (Some(dir), Some(c)) = (chains_dir, &chain) {
            let path = dir.join(format!("chain_{variant}_{:016x}.csv", pt.task.task_seed));
            let mut file = fs::File::create(path)?;
            diffusion::write_chain_csv(c, &mut file)?;
        }
    }

    Ok(MetricsRecord {
        variant: variant.to_string(),
        k,
        t_steps: schedule.steps(),
        seed: cfg.base_seed,
        recon_mse: metrics::mean(&recon),
        readout_mse: readouts.iter().map(|r| metrics::mean(r)).collect(),
        query_metric: metrics::mean(&query),
        denoiser_evals,
    })
}

fn variant_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::LocalConsistency => "mc-di",
        LossKind::VanillaOnLocals => "tw-di",
        LossKind::VanillaGlobalOnly => "mv-di",
    }
}

// ---------------------------------------------------------------------
// File-level runners.
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct PrepareOutcome {
    pub trajectory_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub written: usize,
    pub failures: Vec<(usize, u64, String)>,
}

/// Samples tasks, collects and saves one trajectory file per task, and
/// writes a manifest. Errors if more than 10% of the tasks diverge.
pub fn run_prepare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PrepareOutcome> {
    let traj_dir = out_dir.join("trajectories");
    fs::create_dir_all(&traj_dir)?;
    let prepared = prepare_tasks(cfg, STREAM_TRAIN_TASKS, cfg.n_train_tasks)?;

    let manifest_path = out_dir.join("manifest.csv");
    let mut manifest = fs::File::create(&manifest_path)?;
    writeln!(manifest, "task_index,task_seed,file,M,k,d,D,final_loss")?;
    for pt in &prepared.tasks {
        let file = format!("traj_{:04}.bin", pt.index);
        io::save_trajectory(&pt.trajectory, &traj_dir.join(&file))?;
        let m = pt.trajectory.m();
        writeln!(
            manifest,
            "{},{},{file},{m},{},{},{},{}",
            pt.index,
            pt.trajectory.task_id,
            cfg.schedule.k,
            m / cfg.schedule.k,
            pt.trajectory.weight_dim(),
            pt.trajectory.final_loss,
        )?;
    }
    for (index, seed, message) in &prepared.failures {
        writeln!(manifest, "{index},{seed},DIVERGED,,,,,{message}")?;
    }
    manifest.flush()?;

    let outcome = PrepareOutcome {
        trajectory_dir: traj_dir,
        manifest_path,
        written: prepared.tasks.len(),
        failures: prepared.failures.clone(),
    };
    if outcome.failures.len() * 10 > cfg.n_train_tasks {
        return Err(Error::Breakdown(format!(
            "{} of {} tasks diverged",
            outcome.failures.len(),
            cfg.n_train_tasks
        )));
    }
    Ok(outcome)
}

fn load_trajectory_dir(cfg: &ExperimentConfig, traj_dir: &Path) -> Result<PreparedTasks> {
    let mut paths: Vec<PathBuf> = fs::read_dir(traj_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!(
            "no trajectory files in {}",
            traj_dir.display()
        )));
    }
    let mut tasks_out = Vec::with_capacity(paths.len());
    let mut spec: Option<NetworkSpec> = None;
    for (index, path) in paths.iter().enumerate() {
        let trajectory = io::load_trajectory(path)?;
        match &spec {
            None => spec = Some(trajectory.spec.clone()),
            Some(s) if *s != trajectory.spec => {
                return Err(Error::dim(format!(
                    "trajectory {} has a different network spec",
                    path.display()
                )));
            }
            _ => {}
        }
        let task = tasks::sample_task(
            cfg.task.family,
            cfg.task.n_way,
            cfg.task.k_shot,
            cfg.task.query_size,
            trajectory.task_id,
        )?;
        let embedding = tasks::embed_task(&task)?;
        tasks_out.push(PreparedTask {
            index,
            task,
            trajectory,
            embedding,
        });
    }
    Ok(PreparedTasks {
        spec: spec.unwrap(),
        tasks: tasks_out,
        failures: Vec::new(),
    })
}

pub fn write_trainlog_csv<W: std::io::Write>(log: &TrainLog, k: usize, mut out: W) -> Result<()> {
    let seg_cols: Vec<String> = (1..=k).map(|i| format!("loss_seg_{i}")).collect();
    writeln!(out, "epoch,mean_loss,{},seed", seg_cols.join(","))?;
    for r in &log.records {
        let segs: Vec<String> = r.segment_losses.iter().map(|v| format!("{v}")).collect();
        writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            r.mean_loss,
            segs.join(","),
            log.seed
        )?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub denoiser: DenoiserState,
    pub log: TrainLog,
    pub checkpoint_path: PathBuf,
    pub trainlog_path: PathBuf,
}

/// Loads trajectories, trains with the configured loss kind, saves the
/// checkpoint and the training log.
pub fn run_train(cfg: &ExperimentConfig, traj_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let prepared = load_trajectory_dir(cfg, traj_dir)?;
    let (denoiser, _schedule, log) =
        train_denoiser(cfg, &prepared, cfg.schedule.k, cfg.meta.loss_kind)?;

    let checkpoint_path = out_dir.join("checkpoint.bin");
    io::save_denoiser(&denoiser, log.final_mean_loss(), &checkpoint_path)?;
    let trainlog_path = out_dir.join("trainlog.csv");
    let mut file = fs::File::create(&trainlog_path)?;
    write_trainlog_csv(&log, cfg.schedule.k, &mut file)?;
    Ok(TrainOutcome {
        denoiser,
        log,
        checkpoint_path,
        trainlog_path,
    })
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub records: Vec<MetricsRecord>,
    pub metrics_path: PathBuf,
}

/// Generates weights for freshly prepared held-out tasks and writes the
/// metrics CSV: the checkpoint's variant plus ground-truth and random-init
/// reference rows.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<EvalOutcome> {
    fs::create_dir_all(out_dir)?;
    let (denoiser, _) = io::load_denoiser(checkpoint, cfg.denoiser.t_embed_dim, cfg.embedding_dim())?;
    let eval_set = prepare_tasks(cfg, STREAM_EVAL_TASKS, cfg.n_eval_tasks)?;
    if eval_set.spec.parameter_count() != denoiser.weight_dim() {
        return Err(Error::dim(format!(
            "checkpoint generates {} weights, downstream needs {}",
            denoiser.weight_dim(),
            eval_set.spec.parameter_count()
        )));
    }
    let schedule = cfg.build_schedule()?;

    let chains_dir = if cfg.export_chains {
        let dir = out_dir.join("chains");
        fs::create_dir_all(&dir)?;
        Some(dir)
    } else {
        None
    };

    let records = vec![
        evaluate_source(
            cfg,
            variant_name(cfg.meta.loss_kind),
            WeightSource::Chain(&denoiser),
            &schedule,
            &eval_set,
            chains_dir.as_deref(),
        )?,
        evaluate_source(
            cfg,
            "ground-truth",
            WeightSource::GroundTruth,
            &schedule,
            &eval_set,
            None,
        )?,
        evaluate_source(
            cfg,
            "random-init",
            WeightSource::RandomInit,
            &schedule,
            &eval_set,
            None,
        )?,
    ];

    let metrics_path = out_dir.join("metrics.csv");
    let mut file = fs::File::create(&metrics_path)?;
    metrics::write_metrics_csv(&records, &mut file)?;
    Ok(EvalOutcome {
        records,
        metrics_path,
    })
}

#[derive(Debug)]
pub struct AblationOutcome {
    pub records: Vec<MetricsRecord>,
    pub csv_path: Option<PathBuf>,
    /// Inner gradient evaluations per trained variant (budget audit).
    pub budgets: Vec<(String, u64)>,
}

/// The four-variant ladder under one fixed trajectory set and matched
/// gradient budgets, plus the segment-number sweep for the full method.
/// Budgets are asserted equal across every trained variant.
pub fn run_ablation(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<AblationOutcome> {
    let train_set = prepare_tasks(cfg, STREAM_TRAIN_TASKS, cfg.n_train_tasks)?;
    if train_set.tasks.is_empty() {
        return Err(Error::Empty("no training tasks survived preparation".into()));
    }
    let eval_set = prepare_tasks(cfg, STREAM_EVAL_TASKS, cfg.n_eval_tasks)?;

    let mut records = Vec::new();
    let mut budgets: Vec<(String, u64)> = Vec::new();

    // REPTILE on the downstream weights: gradient-free evaluation of the
    // meta-initialization, budget-matched to the diffusion variants.
    let task_list: Vec<TaskInstance> = train_set.tasks.iter().map(|pt| pt.task.clone()).collect();
    let (meta_init, reptile_evals) = meta::reptile_baseline(
        &task_list,
        &train_set.spec,
        &cfg.meta,
        cfg.prep.init_std,
        mix_seed(cfg.base_seed, STREAM_REPTILE),
    )?;
    budgets.push(("reptile".into(), reptile_evals));
    let (ladder_schedule, _) = cfg.build_schedule_for_k(cfg.schedule.k)?;
    records.push(evaluate_source(
        cfg,
        "reptile",
        WeightSource::Fixed(&meta_init),
        &ladder_schedule,
        &eval_set,
        None,
    )?);

    // Diffusion ladder: Mv-Di (k=1, global target), Tw-Di (locals under the
    // vanilla objective), Mc-Di (local consistency).
    let ladder: [(&str, usize, LossKind); 3] = [
        ("mv-di", 1, LossKind::VanillaGlobalOnly),
        ("tw-di", cfg.schedule.k, LossKind::VanillaOnLocals),
        ("mc-di", cfg.schedule.k, LossKind::LocalConsistency),
    ];
    for (name, k, kind) in ladder {
        let (den, schedule, log) = train_denoiser(cfg, &train_set, k, kind)?;
        budgets.push((name.into(), log.inner_grad_evals));
        records.push(evaluate_source(
            cfg,
            name,
            WeightSource::Chain(&den),
            &schedule,
            &eval_set,
            None,
        )?);
    }

    // Segment sweep for the full method; the ladder's Mc-Di row already
    // covers k = cfg.schedule.k.
    for k in 1..=5 {
        if k == cfg.schedule.k {
            continue;
        }
        let (den, schedule, log) = train_denoiser(cfg, &train_set, k, LossKind::LocalConsistency)?;
        budgets.push((format!("mc-di(k={k})"), log.inner_grad_evals));
        records.push(evaluate_source(
            cfg,
            "mc-di",
            WeightSource::Chain(&den),
            &schedule,
            &eval_set,
            None,
        )?);
    }

    // Fixed-budget protocol: every variant consumed the same number of
    // inner gradient evaluations.
    let expected = (cfg.meta.epochs * cfg.meta.meta_batch * cfg.meta.inner_steps) as u64;
    for (name, evals) in &budgets {
        if *evals != expected {
            return Err(Error::Breakdown(format!(
                "budget mismatch: {name} used {evals} inner gradient evals, expected {expected}"
            )));
        }
    }

    let csv_path = if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join("ablation.csv");
        let mut file = fs::File::create(&path)?;
        metrics::write_metrics_csv(&records, &mut file)?;
        Some(path)
    } else {
        None
    };

    Ok(AblationOutcome {
        records,
        csv_path,
        budgets,
    })
}

#[derive(Clone, Debug)]
pub struct VerifyRow {
    pub check: String,
    pub instance: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub violations: usize,
    pub csv_path: Option<PathBuf>,
}

fn push_bound(rows: &mut Vec<VerifyRow>, check: &str, instance: usize, lhs: f64, rhs: f64) {
    let holds = lhs <= rhs + 1e-12;
    rows.push(VerifyRow {
        check: check.to_string(),
        instance,
        lhs,
        rhs,
        margin: rhs - lhs,
        holds,
    });
}

/// Numeric verification suite: the k=1 loss equivalence, both convergence
/// bounds on 100 random quadratics each, and the gradient checks for the
/// task loss and both diffusion losses.
pub fn run_verify(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<VerifyReport> {
    let mut rows = Vec::new();
    let mut rng = seeded(mix_seed(cfg.base_seed, STREAM_VERIFY));

    // k=1 equivalence of the two loss routes.
    {
        let s = NoiseSchedule::linear(8, 1, 0.7, 0.99)?;
        let den = DenoiserState::init(6, 4, 4, &[12], 0.2, &mut rng)?;
        let report = theory::prop1_check(&s, &den, 100, &mut rng)?;
        push_bound(&mut rows, "prop1_loss_rel", 0, report.max_rel_loss_diff, 1e-12);
        push_bound(&mut rows, "prop1_coeff", 0, report.max_coeff_diff, 0.0);
    }

    // Convergence bounds on random quadratics.
    for i in 0..100 {
        let p = QuadraticProblem::random(20, &mut rng)?;
        let m = rng.random_range(1..=50);
        let r = theory::lemma1_verify(&p, m)?;
        push_bound(&mut rows, "lemma1", i, r.lhs, r.rhs);
    }
    for i in 0..100 {
        let p = QuadraticProblem::random(20, &mut rng)?;
        let c = rng.random_range(0.0..=1.0);
        let m = rng.random_range(0..=50);
        let r = theory::theorem2_verify(&p, c, m, &mut rng)?;
        push_bound(&mut rows, "theorem2", i, r.lhs, r.rhs);
    }

    // Gradient fidelity: task loss and both diffusion losses against
    // central finite differences, relative error in the 2-norm.
    for i in 0..20 {
        let (rel, _) = task_grad_check_instance(&mut rng)?;
        push_bound(&mut rows, "grad_task_loss", i, rel, 1e-4);
    }
    for i in 0..20 {
        let rel = diffusion_grad_check_instance(&mut rng, true)?;
        push_bound(&mut rows, "grad_local_loss", i, rel, 1e-4);
    }
    for i in 0..20 {
        let rel = diffusion_grad_check_instance(&mut rng, false)?;
        push_bound(&mut rows, "grad_vanilla_loss", i, rel, 1e-4);
    }

    let violations = rows.iter().filter(|r| !r.holds).count();
    let csv_path = if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join("verification.csv");
        let mut file = fs::File::create(&path)?;
        writeln!(file, "check,instance,lhs,rhs,margin,holds")?;
        for r in &rows {
            writeln!(
                file,
                "{},{},{},{},{},{}",
                r.check, r.instance, r.lhs, r.rhs, r.margin, r.holds
            )?;
        }
        Some(path)
    } else {
        None
    };

    Ok(VerifyReport {
        rows,
        violations,
        csv_path,
    })
}

fn task_grad_check_instance(rng: &mut rand_chacha::ChaCha8Rng) -> Result<(f64, usize)> {
    use crate::nn::{Activation, Batch, OutputHead, Targets};
    let classification = rng.random_range(0..2) == 0;
    let sizes = vec![
        rng.random_range(2..4usize),
        rng.random_range(2..9usize),
        rng.random_range(2..4usize),
    ];
    let spec = NetworkSpec::new(
        sizes,
        if rng.random_range(0..2) == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        },
        if classification {
            OutputHead::SoftmaxCrossEntropy
        } else {
            OutputHead::MeanSquaredError
        },
    )?;
    let w = nn::init_network(&spec, 0.4, rng)?;
    let n = 5;
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|_| rng::gaussian_vec(rng, spec.input_dim(), 1.0))
        .collect();
    let targets = if classification {
        Targets::Classes((0..n).map(|_| rng.random_range(0..spec.output_dim())).collect())
    } else {
        Targets::Values(
            (0..n)
                .map(|_| rng::gaussian_vec(rng, spec.output_dim(), 1.0))
                .collect(),
        )
    };
    let batch = Batch { inputs, targets };
    let analytic = nn::task_loss_grad(&spec, &w, &batch)?.grad;
    let numeric = nn::finite_diff_grad(&spec, &w, &batch, 1e-5)?;
    let rel = analytic.sub(&numeric)?.norm() / numeric.norm().max(1e-12);
    Ok((rel, w.len()))
}

fn diffusion_grad_check_instance(
    rng: &mut rand_chacha::ChaCha8Rng,
    local: bool,
) -> Result<f64> {
    let s = NoiseSchedule::linear(6, 2, 0.6, 0.99)?;
    let den = DenoiserState::init(4, 4, 3, &[8], 0.3, rng)?;
    let theta = WeightVector::new(rng::gaussian_vec(rng, 4, 0.5))?;
    let eps = WeightVector::new(rng::gaussian_vec(rng, 4, 1.0))?;
    let emb = TaskEmbedding {
        values: rng::gaussian_vec(rng, 3, 1.0),
    };
    let (analytic, value_fn): (WeightVector, Box<dyn Fn(&DenoiserState) -> Result<f64>>) = if local
    {
        let segment = rng.random_range(1..=2);
        let t = rng.random_range(0..s.segment_end(segment)?);
        let sample = diffusion::local_loss_sample(&den, &s, &theta, segment, t, &eps, &emb)?;
        let (theta, eps, emb, s) = (theta.clone(), eps.clone(), emb.clone(), s.clone());
        (
            sample.grad_phi,
            Box::new(move |probe: &DenoiserState| {
                Ok(diffusion::local_loss_sample(probe, &s, &theta, segment, t, &eps, &emb)?.value)
            }),
        )
    } else {
        let t = rng.random_range(0..s.steps());
        let sample = diffusion::vanilla_loss_sample(&den, &s, &theta, t, &eps, &emb)?;
        let (theta, eps, emb, s) = (theta.clone(), eps.clone(), emb.clone(), s.clone());
        (
            sample.grad_phi,
            Box::new(move |probe: &DenoiserState| {
                Ok(diffusion::vanilla_loss_sample(probe, &s, &theta, t, &eps, &emb)?.value)
            }),
        )
    };
    let numeric = nn::finite_diff(
        |phi| {
            let mut probe = den.clone();
            probe.phi = phi.clone();
            value_fn(&probe)
        },
        &den.phi,
        1e-5,
    )?;
    Ok(analytic.sub(&numeric)?.norm() / numeric.norm().max(1e-12))
}
