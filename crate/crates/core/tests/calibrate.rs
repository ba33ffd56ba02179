//! Scratch calibration runs (ignored by default; removed before release).

use mcdi_core::denoiser::DenoiserState;
use mcdi_core::diffusion::{self, InferenceMode};
use mcdi_core::meta::{self, LossKind, MetaConfig, StoreEntry};
use mcdi_core::nn::{self, Activation, NetworkSpec, OutputHead};
use mcdi_core::rng::{gaussian_vec, mix_seed, seeded};
use mcdi_core::schedule::NoiseSchedule;
use mcdi_core::tasks::{self, TaskFamily};
use mcdi_core::vector::WeightVector;
use mcdi_core::weightprep::{self, PrepConfig};

fn pick_task(stream: u64, min_sep: f64) -> tasks::TaskInstance {
    (0..500u64)
        .map(|c| tasks::sample_task(TaskFamily::Blobs, 2, 5, 16, mix_seed(stream, c)).unwrap())
        .find(|t| t.min_cluster_separation().unwrap() >= min_sep)
        .unwrap()
}

#[test]
#[ignore]
fn calibrate_criterion3() {
    let spec = NetworkSpec::new(
        vec![2, 8, 2],
        Activation::Tanh,
        OutputHead::SoftmaxCrossEntropy,
    )
    .unwrap();
    assert_eq!(spec.parameter_count(), 42);
    let task = pick_task(0xC3, 2.0);
    let emb = tasks::embed_task(&task).unwrap();

    let prep_lr = std::env::var("CAL_PREP_LR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.005);
    let prep = PrepConfig {
        lr: prep_lr,
        rho: 0.05,
        noise_std: 0.05,
        rotate: false,
        max_epochs: 60,
        patience: 8,
        k: 3,
        init_std: 0.1,
    };
    let traj = weightprep::collect_trajectory(&task, &spec, &prep, &mut seeded(11)).unwrap();
    println!(
        "prep_lr = {prep_lr}, trajectory M = {}, final_loss = {:.4}",
        traj.m(),
        traj.final_loss
    );
    let targets = weightprep::sample_local_targets(&traj, 3).unwrap();

    let theta0 = traj.theta_init();
    let baselines: Vec<f64> = targets
        .targets
        .iter()
        .map(|t| theta0.mse(t).unwrap())
        .collect();
    println!("baseline MSEs: {baselines:?}");

    for (alpha_min, alpha_max) in [(0.35, 0.999), (0.5, 0.999)] {
        for (eta, zeta, b, k_steps, epochs) in [
            (0.005, 1.0, 5, 3, 1333),
            (0.005, 1.0, 2, 3, 3333),
            (0.003, 1.0, 1, 3, 6666),
        ] {
            let s = NoiseSchedule::linear(12, 3, alpha_min, alpha_max).unwrap();
            let den = DenoiserState::init(42, 16, 8, &[128, 128], 0.1, &mut seeded(21)).unwrap();
            let store = vec![StoreEntry {
                targets: targets.clone(),
                embedding: emb.clone(),
            }];
            let cfg = MetaConfig {
                eta,
                zeta,
                inner_steps: k_steps,
                meta_batch: b,
                epochs,
                loss_kind: LossKind::LocalConsistency,
            };
            let result = meta::meta_train(&store, &den, &s, &cfg, 33);
            let (trained, log) = match result {
                Ok(x) => x,
                Err(e) => {
                    println!(
                        "alpha=({alpha_min},{alpha_max}) eta={eta} zeta={zeta}: DIVERGED {e}"
                    );
                    continue;
                }
            };
            let start: f64 = log.records[0].segment_losses.iter().sum();
            let end: f64 = log.records.last().unwrap().segment_losses.iter().sum();

            // 10 fresh chains.
            let mut ratios = vec![Vec::new(); 3];
            let mut diverged = false;
            for c in 0..10 {
                let x0 =
                    WeightVector::new(gaussian_vec(&mut seeded(500 + c), 42, 1.0)).unwrap();
                match diffusion::generate_chain(&trained, &s, &x0, &emb, InferenceMode::Posterior)
                {
                    Ok(chain) => {
                        for i in 1..=3usize {
                            let mse = chain
                                .readout(i)
                                .unwrap()
                                .mse(&targets.targets[i - 1])
                                .unwrap();
                            ratios[i - 1].push(mse / baselines[i - 1]);
                        }
                    }
                    Err(_) => {
                        diverged = true;
                        break;
                    }
                }
            }
            if diverged {
                println!(
                    "alpha=({alpha_min},{alpha_max}) eta={eta} zeta={zeta}: chain diverged"
                );
                continue;
            }
            let mean_ratios: Vec<f64> = ratios
                .iter()
                .map(|r| r.iter().sum::<f64>() / r.len() as f64)
                .collect();
            println!(
                "alpha=({alpha_min},{alpha_max}) eta={eta} zeta={zeta} B={b} K={k_steps} epochs={epochs}: probe {start:.2}->{end:.4}, readout ratios {mean_ratios:?}"
            );
        }
    }

    // Also check downstream accuracy of the ground truth.
    let q = mcdi_core::harness::metrics::query_metric(&spec, traj.theta_final(), &task.query)
        .unwrap();
    println!("ground-truth query accuracy: {q}");
}

#[test]
#[ignore]
fn calibrate_criterion56() {
    use mcdi_core::harness::run::{
        evaluate_source, prepare_tasks, train_denoiser, WeightSource, STREAM_EVAL_TASKS,
        STREAM_TRAIN_TASKS,
    };
    use mcdi_core::harness::ExperimentConfig;

    let epochs: usize = std::env::var("CAL_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(2666);
    let prep_lr = std::env::var("CAL_PREP_LR").unwrap_or_else(|_| "0.02".into());
    let alpha_min = std::env::var("CAL_ALPHA_MIN").unwrap_or_else(|_| "0.5".into());
    let hidden = std::env::var("CAL_HIDDEN").unwrap_or_else(|_| "128,128".into());
    let t_steps = std::env::var("CAL_T").unwrap_or_else(|_| "12".into());
    let ds_hidden = std::env::var("CAL_DS_HIDDEN").unwrap_or_else(|_| "8".into());
    let base_text = mcdi_core::harness::config::DEFAULT_CONFIG
        .replace("schedule.T=20", &format!("schedule.T={t_steps}"))
        .replace(
            "schedule.alpha_min=0.85",
            &format!("schedule.alpha_min={alpha_min}"),
        )
        .replace(
            "downstream.hidden=32,32",
            &format!("downstream.hidden={ds_hidden}"),
        )
        .replace("prep.lr=0.005", &format!("prep.lr={prep_lr}"))
        .replace("meta.zeta=0.001", "meta.zeta=1.0")
        .replace("meta.epochs=6000", &format!("meta.epochs={epochs}"))
        .replace("denoiser.hidden=128,128", &format!("denoiser.hidden={hidden}"));
    println!("T={t_steps} ds_hidden=[{ds_hidden}] prep_lr={prep_lr} alpha_min={alpha_min} epochs={epochs} hidden={hidden}");

    let mut mc_wins_vs_mv = 0;
    let mut mc_wins_vs_tw = 0;
    let mut seg_order_ok = 0;
    let mut mc_accs = Vec::new();
    let mut gt_accs = Vec::new();
    let mut rand_accs = Vec::new();

    let n_seeds = 4;
    for seed in 0..n_seeds {
        let cfg = ExperimentConfig::parse(
            &base_text.replace("base_seed=42", &format!("base_seed={}", 1000 + seed)),
        )
        .unwrap();
        let train_set = prepare_tasks(&cfg, STREAM_TRAIN_TASKS, cfg.n_train_tasks).unwrap();
        let eval_set = prepare_tasks(&cfg, STREAM_EVAL_TASKS, cfg.n_eval_tasks).unwrap();

        use mcdi_core::meta::LossKind;
        let (mc, s_mc, log_mc) =
            train_denoiser(&cfg, &train_set, 3, LossKind::LocalConsistency).unwrap();
        let (tw, s_tw, _) =
            train_denoiser(&cfg, &train_set, 3, LossKind::VanillaOnLocals).unwrap();
        let (mv, s_mv, _) =
            train_denoiser(&cfg, &train_set, 1, LossKind::VanillaGlobalOnly).unwrap();

        let r_mc =
            evaluate_source(&cfg, "mc", WeightSource::Chain(&mc), &s_mc, &eval_set, None).unwrap();
        let r_tw =
            evaluate_source(&cfg, "tw", WeightSource::Chain(&tw), &s_tw, &eval_set, None).unwrap();
        let r_mv =
            evaluate_source(&cfg, "mv", WeightSource::Chain(&mv), &s_mv, &eval_set, None).unwrap();
        let r_gt = evaluate_source(&cfg, "gt", WeightSource::GroundTruth, &s_mc, &eval_set, None)
            .unwrap();
        let r_rand =
            evaluate_source(&cfg, "rand", WeightSource::RandomInit, &s_mc, &eval_set, None)
                .unwrap();

        if r_mc.recon_mse <= r_mv.recon_mse {
            mc_wins_vs_mv += 1;
        }
        if r_mc.recon_mse <= r_tw.recon_mse {
            mc_wins_vs_tw += 1;
        }
        let e1 = log_mc.first_epoch_below(1, 0.5);
        let e3 = log_mc.first_epoch_below(3, 0.5);
        let order_ok = match (e1, e3) {
            (Some(a), Some(b)) => a <= b,
            (Some(_), None) => true,
            (None, None) => true,
            (None, Some(_)) => false,
        };
        if order_ok {
            seg_order_ok += 1;
        }
        mc_accs.push(r_mc.query_metric);
        gt_accs.push(r_gt.query_metric);
        rand_accs.push(r_rand.query_metric);
        println!(
            "seed {seed}: recon mc={:.4} tw={:.4} mv={:.4} | query mc={:.3} gt={:.3} rand={:.3} | seg epochs {e1:?} vs {e3:?}",
            r_mc.recon_mse, r_tw.recon_mse, r_mv.recon_mse, r_mc.query_metric,
            r_gt.query_metric, r_rand.query_metric
        );
    }
    println!(
        "mc<=mv in {mc_wins_vs_mv}/{n_seeds}, mc<=tw in {mc_wins_vs_tw}/{n_seeds}, seg order in {seg_order_ok}/{n_seeds}"
    );
    println!(
        "mean query: mc={:.3} gt={:.3} rand={:.3}",
        mc_accs.iter().sum::<f64>() / n_seeds as f64,
        gt_accs.iter().sum::<f64>() / n_seeds as f64,
        rand_accs.iter().sum::<f64>() / n_seeds as f64
    );
}

#[test]
#[ignore]
fn diagnose_floor() {
    use mcdi_core::harness::run::{
        evaluate_source, prepare_tasks, train_denoiser, WeightSource, STREAM_EVAL_TASKS,
        STREAM_TRAIN_TASKS,
    };
    use mcdi_core::harness::ExperimentConfig;
    use mcdi_core::meta::LossKind;

    for n_train in [16usize, 64, 256] {
        let text = mcdi_core::harness::config::DEFAULT_CONFIG
            .replace("schedule.T=20", "schedule.T=12")
            .replace("schedule.alpha_min=0.85", "schedule.alpha_min=0.5")
            .replace("downstream.hidden=32,32", "downstream.hidden=")
            .replace("prep.lr=0.005", "prep.lr=0.05")
            .replace("meta.zeta=0.001", "meta.zeta=1.0")
            .replace("meta.epochs=6000", "meta.epochs=2000")
            .replace("n_train_tasks=16", &format!("n_train_tasks={n_train}"));
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let train_set = prepare_tasks(&cfg, STREAM_TRAIN_TASKS, cfg.n_train_tasks).unwrap();
        let eval_set = prepare_tasks(&cfg, STREAM_EVAL_TASKS, cfg.n_eval_tasks).unwrap();
        let (mc, s, _) = train_denoiser(&cfg, &train_set, 3, LossKind::LocalConsistency).unwrap();
        let r_eval =
            evaluate_source(&cfg, "mc", WeightSource::Chain(&mc), &s, &eval_set, None).unwrap();
        let r_train = evaluate_source(
            &cfg,
            "mc",
            WeightSource::Chain(&mc),
            &s,
            &mcdi_core::harness::run::PreparedTasks {
                spec: train_set.spec.clone(),
                tasks: train_set.tasks[..8].to_vec(),
                failures: vec![],
            },
            None,
        )
        .unwrap();
        println!(
            "n_train={n_train}: held-out recon {:.4}, train-task recon {:.4}, held-out query {:.3}",
            r_eval.recon_mse, r_train.recon_mse, r_eval.query_metric
        );
    }
}

#[test]
#[ignore]
fn measure_true_edges() {
    use mcdi_core::harness::run::{
        evaluate_source, prepare_tasks, train_denoiser, WeightSource, STREAM_EVAL_TASKS,
        STREAM_TRAIN_TASKS,
    };
    use mcdi_core::harness::ExperimentConfig;
    use mcdi_core::meta::LossKind;

    let epochs: usize = std::env::var("CAL_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(800);
    let ds_hidden = std::env::var("CAL_DS_HIDDEN").unwrap_or_else(|_| String::new());
    let restarts: u64 = std::env::var("CAL_RESTARTS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(4);
    println!("epochs={epochs} ds_hidden=[{ds_hidden}] restarts={restarts}");

    let mut wins_mv = 0;
    let mut wins_tw = 0;
    let n_seeds = 4u64;
    let mut diff_mv_all = Vec::new();
    let mut diff_tw_all = Vec::new();
    for seed in 0..n_seeds {
        let text = mcdi_core::harness::config::DEFAULT_CONFIG
            .replace("schedule.T=20", "schedule.T=12")
            .replace("schedule.alpha_min=0.85", "schedule.alpha_min=0.5")
            .replace(
                "downstream.hidden=32,32",
                &format!("downstream.hidden={ds_hidden}"),
            )
            .replace("prep.lr=0.005", "prep.lr=0.05")
            .replace("meta.zeta=0.001", "meta.zeta=1.0")
            .replace("meta.epochs=6000", &format!("meta.epochs={epochs}"))
            .replace("base_seed=42", &format!("base_seed={}", 1000 + seed));
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let train_set = prepare_tasks(&cfg, STREAM_TRAIN_TASKS, cfg.n_train_tasks).unwrap();
        let eval_set = prepare_tasks(&cfg, STREAM_EVAL_TASKS, cfg.n_eval_tasks).unwrap();

        let mut means = [0.0f64; 3]; // mc, tw, mv
        for r in 0..restarts {
            let cfg_r = cfg.clone().with_seed(cfg.base_seed + 7777 * (r + 1));
            let kinds = [
                LossKind::LocalConsistency,
                LossKind::VanillaOnLocals,
                LossKind::VanillaGlobalOnly,
            ];
            for (slot, kind) in kinds.iter().enumerate() {
                let k = if *kind == LossKind::VanillaGlobalOnly { 1 } else { 3 };
                let (den, s, _) = train_denoiser(&cfg_r, &train_set, k, *kind).unwrap();
                let rec =
                    evaluate_source(&cfg_r, "x", WeightSource::Chain(&den), &s, &eval_set, None)
                        .unwrap();
                means[slot] += rec.recon_mse / restarts as f64;
            }
        }
        let (mc, tw, mv) = (means[0], means[1], means[2]);
        println!("seed {seed}: mc={mc:.4} tw={tw:.4} mv={mv:.4}  (mc-mv={:+.4}, mc-tw={:+.4})", mc - mv, mc - tw);
        diff_mv_all.push(mc - mv);
        diff_tw_all.push(mc - tw);
        if mc <= mv {
            wins_mv += 1;
        }
        if mc <= tw {
            wins_tw += 1;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "wins: mc<=mv {wins_mv}/{n_seeds}, mc<=tw {wins_tw}/{n_seeds}; mean diffs mv {:+.4}, tw {:+.4}",
        mean(&diff_mv_all),
        mean(&diff_tw_all)
    );
}

#[test]
#[ignore]
fn diagnose_uniform_m() {
    use mcdi_core::harness::run::{
        evaluate_source, prepare_tasks, train_denoiser, WeightSource, STREAM_EVAL_TASKS,
        STREAM_TRAIN_TASKS,
    };
    use mcdi_core::harness::ExperimentConfig;
    use mcdi_core::meta::LossKind;

    let epochs: usize = std::env::var("CAL_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(2000);
    for max_epochs in [30usize, 60] {
        let text = mcdi_core::harness::config::DEFAULT_CONFIG
            .replace("schedule.T=20", "schedule.T=12")
            .replace("schedule.alpha_min=0.85", "schedule.alpha_min=0.5")
            .replace("downstream.hidden=32,32", "downstream.hidden=")
            .replace("prep.lr=0.005", "prep.lr=0.05")
            .replace("prep.max_epochs=60", &format!("prep.max_epochs={max_epochs}"))
            .replace("prep.patience=8", &format!("prep.patience={max_epochs}"))
            .replace("meta.zeta=0.001", "meta.zeta=1.0")
            .replace("meta.epochs=6000", &format!("meta.epochs={epochs}"));
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let train_set = prepare_tasks(&cfg, STREAM_TRAIN_TASKS, cfg.n_train_tasks).unwrap();
        let eval_set = prepare_tasks(&cfg, STREAM_EVAL_TASKS, cfg.n_eval_tasks).unwrap();
        let ms: Vec<usize> = train_set.tasks.iter().map(|t| t.trajectory.m()).collect();
        let (mc, s, _) = train_denoiser(&cfg, &train_set, 3, LossKind::LocalConsistency).unwrap();
        let r_eval =
            evaluate_source(&cfg, "mc", WeightSource::Chain(&mc), &s, &eval_set, None).unwrap();
        let r_train = evaluate_source(
            &cfg,
            "mc",
            WeightSource::Chain(&mc),
            &s,
            &mcdi_core::harness::run::PreparedTasks {
                spec: train_set.spec.clone(),
                tasks: train_set.tasks[..8].to_vec(),
                failures: vec![],
            },
            None,
        )
        .unwrap();
        // Between-target gap scale on eval tasks.
        let mut gap = 0.0;
        for pt in &eval_set.tasks {
            let tr = pt.trajectory.truncated_to_multiple(3).unwrap();
            let tg = mcdi_core::weightprep::sample_local_targets(&tr, 3).unwrap();
            gap += tg.targets[1].mse(&tg.targets[2]).unwrap() / eval_set.tasks.len() as f64;
        }
        println!(
            "max_epochs={max_epochs} Ms={ms:?}: held-out {:.4}, train {:.4}, gap(θ_2d,θ_M) {:.4}, query {:.3}",
            r_eval.recon_mse, r_train.recon_mse, gap, r_eval.query_metric
        );
    }
}

#[test]
#[ignore]
fn measure_edges_short_trajectories() {
    use mcdi_core::harness::run::{
        evaluate_source, prepare_tasks, train_denoiser, WeightSource, STREAM_EVAL_TASKS,
        STREAM_TRAIN_TASKS,
    };
    use mcdi_core::harness::ExperimentConfig;
    use mcdi_core::meta::LossKind;

    let epochs: usize = std::env::var("CAL_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(800);
    let max_epochs: usize = std::env::var("CAL_MAX_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(12);
    let prep_lr = std::env::var("CAL_PREP_LR").unwrap_or_else(|_| "0.05".into());
    let restarts: u64 = std::env::var("CAL_RESTARTS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(4);
    println!("epochs={epochs} max_epochs={max_epochs} prep_lr={prep_lr} restarts={restarts}");

    let mut wins_mv = 0;
    let mut wins_tw = 0;
    let n_seeds = 4u64;
    for seed in 0..n_seeds {
        let text = mcdi_core::harness::config::DEFAULT_CONFIG
            .replace("schedule.T=20", "schedule.T=12")
            .replace("schedule.alpha_min=0.85", "schedule.alpha_min=0.5")
            .replace("downstream.hidden=32,32", &format!("downstream.hidden={}", std::env::var("CAL_DS_HIDDEN").unwrap_or_default()))
            .replace("prep.lr=0.005", &format!("prep.lr={prep_lr}"))
            .replace("prep.max_epochs=60", &format!("prep.max_epochs={max_epochs}"))
            .replace("prep.patience=8", &format!("prep.patience={max_epochs}"))
            .replace("meta.zeta=0.001", "meta.zeta=1.0")
            .replace("meta.epochs=6000", &format!("meta.epochs={epochs}"))
            .replace("base_seed=42", &format!("base_seed={}", 1000 + seed));
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let train_set = prepare_tasks(&cfg, STREAM_TRAIN_TASKS, cfg.n_train_tasks).unwrap();
        let eval_set = prepare_tasks(&cfg, STREAM_EVAL_TASKS, cfg.n_eval_tasks).unwrap();

        // Target separation on eval tasks.
        let mut gap12 = 0.0;
        let mut gap23 = 0.0;
        let mut base = 0.0;
        for pt in &eval_set.tasks {
            let tr = pt.trajectory.truncated_to_multiple(3).unwrap();
            let tg = mcdi_core::weightprep::sample_local_targets(&tr, 3).unwrap();
            let n = eval_set.tasks.len() as f64;
            gap12 += tg.targets[0].mse(&tg.targets[1]).unwrap() / n;
            gap23 += tg.targets[1].mse(&tg.targets[2]).unwrap() / n;
            base += tr.theta_init().mse(tg.global_target()).unwrap() / n;
        }

        let mut means = [0.0f64; 3];
        for r in 0..restarts {
            let cfg_r = cfg.clone().with_seed(cfg.base_seed + 7777 * (r + 1));
            let kinds = [
                LossKind::LocalConsistency,
                LossKind::VanillaOnLocals,
                LossKind::VanillaGlobalOnly,
            ];
            for (slot, kind) in kinds.iter().enumerate() {
                let k = if *kind == LossKind::VanillaGlobalOnly { 1 } else { 3 };
                let (den, s, _) = train_denoiser(&cfg_r, &train_set, k, *kind).unwrap();
                let rec =
                    evaluate_source(&cfg_r, "x", WeightSource::Chain(&den), &s, &eval_set, None)
                        .unwrap();
                means[slot] += rec.recon_mse / restarts as f64;
            }
        }
        let (mc, tw, mv) = (means[0], means[1], means[2]);
        println!(
            "seed {seed}: mc={mc:.4} tw={tw:.4} mv={mv:.4} (mc-mv={:+.4}, mc-tw={:+.4}) gaps12/23=({gap12:.3},{gap23:.3}) base={base:.3}",
            mc - mv,
            mc - tw
        );
        if mc <= mv {
            wins_mv += 1;
        }
        if mc <= tw {
            wins_tw += 1;
        }
    }
    println!("wins: mc<=mv {wins_mv}/{n_seeds}, mc<=tw {wins_tw}/{n_seeds}");
}
