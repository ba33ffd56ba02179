//! Experiment configuration: a flat UTF-8 key=value file, one key per
//! line, `#` comments, keys named after field paths (e.g. `schedule.T=20`).
//!
//! Loading re-checks every module-level invariant. One normalization is
//! applied rather than rejected: when the segment count does not divide
//! the requested horizon, T is adjusted upward to the nearest multiple of
//! k and the adjustment is recorded in `notices` (the theory requires
//! integral i·T/k, and the conventional defaults k=3, T=20 do not divide).

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffusion::InferenceMode;
use crate::error::{Error, Result};
use crate::meta::{LossKind, MetaConfig};
use crate::nn::{Activation, NetworkSpec, OutputHead};
use crate::schedule::NoiseSchedule;
use crate::tasks::TaskFamily;
use crate::weightprep::PrepConfig;

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = "\
# mcdi experiment configuration (key=value, '#' comments)
base_seed=42
n_train_tasks=16
n_eval_tasks=8

schedule.T=20
schedule.k=3
schedule.alpha_min=0.85
schedule.alpha_max=0.999

task.family=blobs
task.n_way=2
task.k_shot=5
task.query_size=16
task.min_separation=2.0

downstream.hidden=32,32
downstream.activation=tanh

prep.lr=0.005
prep.rho=0.05
prep.noise_std=0.05
prep.rotate=false
prep.max_epochs=60
prep.patience=8
prep.init_std=0.1
prep.shared_init=true

meta.eta=0.005
meta.zeta=0.001
meta.K=3
meta.B=5
meta.epochs=6000
meta.loss_kind=local_consistency

denoiser.t_embed_dim=16
denoiser.hidden=128,128
denoiser.init_std=0.1

inference.mode=posterior
eval.finetune_steps=0
eval.export_chains=false
";

#[derive(Clone, Debug)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub k: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

#[derive(Clone, Debug)]
pub struct TaskConfig {
    pub family: TaskFamily,
    pub n_way: usize,
    pub k_shot: usize,
    /// Query samples per class.
    pub query_size: usize,
    /// Minimum cluster separation accepted when selecting blobs task
    /// seeds; 0 disables the filter.
    pub min_separation: f64,
}

#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    pub t_embed_dim: usize,
    pub hidden: Vec<usize>,
    pub init_std: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    pub n_train_tasks: usize,
    pub n_eval_tasks: usize,
    pub schedule: ScheduleConfig,
    pub task: TaskConfig,
    pub downstream_hidden: Vec<usize>,
    pub downstream_activation: Activation,
    pub prep: PrepConfig,
    /// Draw one θ_0 for all tasks instead of one per task.
    pub shared_init: bool,
    pub meta: MetaConfig,
    pub denoiser: DenoiserConfig,
    pub inference_mode: InferenceMode,
    pub finetune_steps: usize,
    pub export_chains: bool,
    /// Human-readable normalization notes from loading (e.g. T adjusted).
    pub notices: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse(DEFAULT_CONFIG).expect("default config must parse")
    }
}

fn parse_list(value: &str, key: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: bad list entry '{part}'")))
        })
        .collect()
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Result<String> {
        self.map
            .remove(key)
            .ok_or_else(|| Error::Config(format!("missing key '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.take(key)?;
        raw.parse::<T>()
            .map_err(|_| Error::Config(format!("{key}: cannot parse '{raw}'")))
    }

    fn parse_bool(&mut self, key: &str) -> Result<bool> {
        match self.take(key)?.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!("{key}: expected true/false, got '{other}'"))),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (line_no, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", line_no + 1))
            })?;
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
        }
        let mut f = Fields { map };

        let base_seed: u64 = f.parse("base_seed")?;
        let n_train_tasks: usize = f.parse("n_train_tasks")?;
        let n_eval_tasks: usize = f.parse("n_eval_tasks")?;

        let mut notices = Vec::new();
        let k: usize = f.parse("schedule.k")?;
        let mut t_steps: usize = f.parse("schedule.T")?;
        if k == 0 {
            return Err(Error::Config("schedule.k must be >= 1".into()));
        }
        if t_steps == 0 {
            return Err(Error::Config("schedule.T must be >= 1".into()));
        }
        if t_steps % k != 0 {
            let adjusted = t_steps.div_ceil(k) * k;
            notices.push(format!(
                "schedule.T adjusted {t_steps} -> {adjusted} so k={k} divides it"
            ));
            t_steps = adjusted;
        }
        let schedule = ScheduleConfig {
            t_steps,
            k,
            alpha_min: f.parse("schedule.alpha_min")?,
            alpha_max: f.parse("schedule.alpha_max")?,
        };

        let family = match f.take("task.family")?.as_str() {
            "blobs" => TaskFamily::Blobs,
            "sine" => TaskFamily::Sine,
            other => return Err(Error::Config(format!("unknown task.family '{other}'"))),
        };
        let task = TaskConfig {
            family,
            n_way: f.parse("task.n_way")?,
            k_shot: f.parse("task.k_shot")?,
            query_size: f.parse("task.query_size")?,
            min_separation: f.parse("task.min_separation")?,
        };

        let downstream_hidden = parse_list(&f.take("downstream.hidden")?, "downstream.hidden")?;
        let downstream_activation = match f.take("downstream.activation")?.as_str() {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            other => {
                return Err(Error::Config(format!(
                    "unknown downstream.activation '{other}'"
                )))
            }
        };

        let prep = PrepConfig {
            lr: f.parse("prep.lr")?,
            rho: f.parse("prep.rho")?,
            noise_std: f.parse("prep.noise_std")?,
            rotate: f.parse_bool("prep.rotate")?,
            max_epochs: f.parse("prep.max_epochs")?,
            patience: f.parse("prep.patience")?,
            k,
            init_std: f.parse("prep.init_std")?,
        };
        let shared_init = f.parse_bool("prep.shared_init")?;

        let meta = MetaConfig {
            eta: f.parse("meta.eta")?,
            zeta: f.parse("meta.zeta")?,
            inner_steps: f.parse("meta.K")?,
            meta_batch: f.parse("meta.B")?,
            epochs: f.parse("meta.epochs")?,
            loss_kind: LossKind::parse(&f.take("meta.loss_kind")?)?,
        };

        let denoiser = DenoiserConfig {
            t_embed_dim: f.parse("denoiser.t_embed_dim")?,
            hidden: parse_list(&f.take("denoiser.hidden")?, "denoiser.hidden")?,
            init_std: f.parse("denoiser.init_std")?,
        };

        let inference_mode = match f.take("inference.mode")?.as_str() {
            "posterior" => InferenceMode::Posterior,
            "eq2" => InferenceMode::Eq2,
            other => return Err(Error::Config(format!("unknown inference.mode '{other}'"))),
        };
        let finetune_steps: usize = f.parse("eval.finetune_steps")?;
        let export_chains = f.parse_bool("eval.export_chains")?;

        if let Some((key, _)) = f.map.iter().next() {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }

        let cfg = ExperimentConfig {
            base_seed,
            n_train_tasks,
            n_eval_tasks,
            schedule,
            task,
            downstream_hidden,
            downstream_activation,
            prep,
            shared_init,
            meta,
            denoiser,
            inference_mode,
            finetune_steps,
            export_chains,
            notices,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    /// Re-checks every module-level invariant.
    pub fn validate(&self) -> Result<()> {
        if self.n_train_tasks == 0 || self.n_eval_tasks == 0 {
            return Err(Error::Config("task counts must be >= 1".into()));
        }
        self.build_schedule()?; // validates alpha bounds, monotonicity, k | T
        self.prep.validate()?;
        self.meta.validate()?;
        if self.task.n_way == 0 || self.task.k_shot == 0 || self.task.query_size == 0 {
            return Err(Error::Config("task.n_way/k_shot/query_size must be >= 1".into()));
        }
        if self.task.family == TaskFamily::Sine {
            if self.task.n_way != 1 {
                return Err(Error::Config("sine tasks require task.n_way=1".into()));
            }
            if self.prep.rotate {
                return Err(Error::Config(
                    "prep.rotate=true requires 2-D inputs (blobs family)".into(),
                ));
            }
        }
        if self.task.min_separation < 0.0 {
            return Err(Error::Config("task.min_separation must be >= 0".into()));
        }
        if self.denoiser.t_embed_dim == 0 || self.denoiser.t_embed_dim % 2 != 0 {
            return Err(Error::Config("denoiser.t_embed_dim must be positive and even".into()));
        }
        if self.denoiser.init_std <= 0.0 {
            return Err(Error::Config("denoiser.init_std must be positive".into()));
        }
        self.downstream_spec()?;
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.schedule.t_steps,
            self.schedule.k,
            self.schedule.alpha_min,
            self.schedule.alpha_max,
        )
    }

    /// Schedule for a different segment count on the same alpha endpoints;
    /// T is lifted to the nearest multiple of k upward. Returns the
    /// schedule and the effective T.
    pub fn build_schedule_for_k(&self, k: usize) -> Result<(NoiseSchedule, usize)> {
        if k == 0 {
            return Err(Error::arg("k must be >= 1"));
        }
        let t = self.schedule.t_steps.div_ceil(k) * k;
        let s = NoiseSchedule::linear(t, k, self.schedule.alpha_min, self.schedule.alpha_max)?;
        Ok((s, t))
    }

    /// The downstream network the tasks are solved with.
    pub fn downstream_spec(&self) -> Result<NetworkSpec> {
        let (input_dim, output_dim, head) = match self.task.family {
            TaskFamily::Blobs => (2, self.task.n_way, OutputHead::SoftmaxCrossEntropy),
            TaskFamily::Sine => (1, 1, OutputHead::MeanSquaredError),
        };
        let mut sizes = Vec::with_capacity(self.downstream_hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.downstream_hidden);
        sizes.push(output_dim);
        NetworkSpec::new(sizes, self.downstream_activation, head)
    }

    pub fn embedding_dim(&self) -> usize {
        crate::tasks::embedding_dim(self.task.family, self.task.n_way)
    }

    /// Copy with a different base seed (the CLI --seed override).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }
}
