//! Run configuration: a flat `section.key = value` text format where every
//! key has a default, so an empty file is a valid config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::actions::{Decoding, DEFAULT_EPSILON, DEFAULT_TOP_P};
use crate::bc::BCConfig;
use crate::env::DEFAULT_HORIZON;
use crate::error::ShopError;
use crate::ppo::PPOConfig;

/// Learning rates for the desk-scale model. The published table values
/// assume a pretrained model four orders of magnitude larger; at this
/// parameter count they move a freshly initialized network by well under a
/// thousandth of its initialization scale, so the run defaults substitute
/// rates sized to the model while keeping every other value from the tables.
pub const DESK_BC_LEARNING_RATE: f64 = 3e-3;
pub const DESK_PPO_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    Bc,
    Ppo,
    Hybrid,
    Uda,
}

impl PipelineKind {
    pub fn label(&self) -> &'static str {
        match self {
            PipelineKind::Bc => "bc",
            PipelineKind::Ppo => "ppo",
            PipelineKind::Hybrid => "hybrid",
            PipelineKind::Uda => "uda",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ShopError> {
        match s {
            "bc" => Ok(PipelineKind::Bc),
            "ppo" => Ok(PipelineKind::Ppo),
            "hybrid" => Ok(PipelineKind::Hybrid),
            "uda" => Ok(PipelineKind::Uda),
            other => Err(ShopError::Config(format!("unknown pipeline '{other}'"))),
        }
    }

    pub fn has_bc_phase(&self) -> bool {
        matches!(self, PipelineKind::Bc | PipelineKind::Hybrid | PipelineKind::Uda)
    }

    pub fn has_ppo_phase(&self) -> bool {
        matches!(self, PipelineKind::Ppo | PipelineKind::Hybrid | PipelineKind::Uda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub out_dir: PathBuf,

    pub catalog_seed: u64,
    pub catalog_products: usize,
    pub catalog_categories: usize,
    pub horizon: usize,

    pub dim: usize,
    pub context_limit: usize,
    pub obs_history: u8,

    pub demo_budget: usize,
    pub category: Option<String>,
    pub bc: BCConfig,

    pub ppo: PPOConfig,
    pub total_env_steps: usize,
    pub init_checkpoint: Option<PathBuf>,

    pub decoding_kind: String,
    pub epsilon: f64,
    pub top_p: f64,
    pub eval_episodes: usize,
    pub eval_runs: usize,
    pub eval_seed: u64,

    pub curve_every_steps: usize,
    pub curve_goals: usize,

    pub n_workers: usize,
    pub worker_addrs: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pipeline: PipelineKind::Ppo,
            seed: 1,
            out_dir: PathBuf::from("runs/out"),
            catalog_seed: 1,
            catalog_products: 50,
            catalog_categories: 5,
            horizon: DEFAULT_HORIZON,
            dim: 64,
            context_limit: 256,
            obs_history: 2,
            demo_budget: 200,
            category: None,
            bc: BCConfig { learning_rate: DESK_BC_LEARNING_RATE, ..BCConfig::default() },
            ppo: PPOConfig { learning_rate: DESK_PPO_LEARNING_RATE, ..PPOConfig::default() },
            total_env_steps: 50_000,
            init_checkpoint: None,
            decoding_kind: "egreedy".to_string(),
            epsilon: DEFAULT_EPSILON,
            top_p: DEFAULT_TOP_P,
            eval_episodes: 200,
            eval_runs: 4,
            eval_seed: 10_007,
            curve_every_steps: 10_000,
            curve_goals: 50,
            n_workers: 1,
            worker_addrs: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn decoding(&self) -> Result<Decoding, ShopError> {
        match self.decoding_kind.as_str() {
            "egreedy" => Ok(Decoding::EpsilonGreedy { epsilon: self.epsilon }),
            "topp" => Ok(Decoding::TopP { p: self.top_p }),
            "sample" => Ok(Decoding::Sample),
            "argmax" => Ok(Decoding::Argmax),
            other => Err(ShopError::Config(format!("unknown decoding '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<(), ShopError> {
        if self.pipeline == PipelineKind::Uda && self.category.is_none() {
            return Err(ShopError::Config("uda requires a category".into()));
        }
        if self.pipeline.has_bc_phase() && self.demo_budget == 0 {
            return Err(ShopError::Config("this pipeline needs a demonstration budget".into()));
        }
        if self.obs_history != 1 && self.obs_history != 2 {
            return Err(ShopError::Config("obs_history must be 1 or 2".into()));
        }
        self.decoding()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pipeline = {}", self.pipeline.label());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out_dir.display());
        let _ = writeln!(s, "catalog.seed = {}", self.catalog_seed);
        let _ = writeln!(s, "catalog.products = {}", self.catalog_products);
        let _ = writeln!(s, "catalog.categories = {}", self.catalog_categories);
        let _ = writeln!(s, "env.horizon = {}", self.horizon);
        let _ = writeln!(s, "model.dim = {}", self.dim);
        let _ = writeln!(s, "model.context_limit = {}", self.context_limit);
        let _ = writeln!(s, "model.obs_history = {}", self.obs_history);
        let _ = writeln!(s, "bc.demos = {}", self.demo_budget);
        if let Some(cat) = &self.category {
            let _ = writeln!(s, "bc.category = {cat}");
        }
        let _ = writeln!(s, "bc.epochs = {}", self.bc.epochs);
        let _ = writeln!(s, "bc.learning_rate = {}", self.bc.learning_rate);
        let _ = writeln!(s, "bc.warmup_steps = {}", self.bc.warmup_steps);
        let _ = writeln!(s, "bc.weight_decay = {}", self.bc.weight_decay);
        let _ = writeln!(s, "bc.batch_size = {}", self.bc.batch_size);
        let _ = writeln!(s, "bc.adam_eps = {}", self.bc.adam_eps);
        let _ = writeln!(s, "bc.adam_beta1 = {}", self.bc.adam_beta1);
        let _ = writeln!(s, "bc.adam_beta2 = {}", self.bc.adam_beta2);
        let _ = writeln!(s, "ppo.n_streams = {}", self.ppo.n_streams);
        let _ = writeln!(s, "ppo.steps_per_stream = {}", self.ppo.steps_per_stream);
        let _ = writeln!(s, "ppo.epochs_per_update = {}", self.ppo.epochs_per_update);
        let _ = writeln!(s, "ppo.batch_size = {}", self.ppo.batch_size);
        let _ = writeln!(s, "ppo.learning_rate = {}", self.ppo.learning_rate);
        let _ = writeln!(s, "ppo.adam_eps = {}", self.ppo.adam_eps);
        let _ = writeln!(s, "ppo.adam_beta1 = {}", self.ppo.adam_beta1);
        let _ = writeln!(s, "ppo.adam_beta2 = {}", self.ppo.adam_beta2);
        let _ = writeln!(s, "ppo.discount = {}", self.ppo.discount);
        let _ = writeln!(s, "ppo.gae_lambda = {}", self.ppo.gae_lambda);
        let _ = writeln!(s, "ppo.entropy_coef = {}", self.ppo.entropy_coef);
        let _ = writeln!(s, "ppo.value_coef = {}", self.ppo.value_coef);
        let _ = writeln!(s, "ppo.max_grad_norm = {}", self.ppo.max_grad_norm);
        let _ = writeln!(s, "ppo.clip_eps = {}", self.ppo.clip_eps);
        let _ = writeln!(s, "ppo.total_env_steps = {}", self.total_env_steps);
        if let Some(ckpt) = &self.init_checkpoint {
            let _ = writeln!(s, "ppo.init_checkpoint = {}", ckpt.display());
        }
        let _ = writeln!(s, "eval.decoding = {}", self.decoding_kind);
        let _ = writeln!(s, "eval.epsilon = {}", self.epsilon);
        let _ = writeln!(s, "eval.top_p = {}", self.top_p);
        let _ = writeln!(s, "eval.episodes = {}", self.eval_episodes);
        let _ = writeln!(s, "eval.runs = {}", self.eval_runs);
        let _ = writeln!(s, "eval.seed = {}", self.eval_seed);
        let _ = writeln!(s, "curve.every_steps = {}", self.curve_every_steps);
        let _ = writeln!(s, "curve.goals = {}", self.curve_goals);
        let _ = writeln!(s, "rollout.n_workers = {}", self.n_workers);
        if !self.worker_addrs.is_empty() {
            let _ = writeln!(s, "rollout.worker_addrs = {}", self.worker_addrs.join(","));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ShopError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ShopError::Config(format!("line {}: expected key = value", lineno + 1)));
            };
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| ShopError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ShopError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ShopError> {
            value
                .parse::<T>()
                .map_err(|_| ShopError::Config(format!("cannot parse '{value}' for {key}")))
        }
        match key {
            "pipeline" => self.pipeline = PipelineKind::parse(value)?,
            "seed" => self.seed = num(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "catalog.seed" => self.catalog_seed = num(key, value)?,
            "catalog.products" => self.catalog_products = num(key, value)?,
            "catalog.categories" => self.catalog_categories = num(key, value)?,
            "env.horizon" => self.horizon = num(key, value)?,
            "model.dim" => self.dim = num(key, value)?,
            "model.context_limit" => self.context_limit = num(key, value)?,
            "model.obs_history" => self.obs_history = num(key, value)?,
            "bc.demos" => self.demo_budget = num(key, value)?,
            "bc.category" => self.category = Some(value.to_string()),
            "bc.epochs" => self.bc.epochs = num(key, value)?,
            "bc.learning_rate" => self.bc.learning_rate = num(key, value)?,
            "bc.warmup_steps" => self.bc.warmup_steps = num(key, value)?,
            "bc.weight_decay" => self.bc.weight_decay = num(key, value)?,
            "bc.batch_size" => self.bc.batch_size = num(key, value)?,
            "bc.adam_eps" => self.bc.adam_eps = num(key, value)?,
            "bc.adam_beta1" => self.bc.adam_beta1 = num(key, value)?,
            "bc.adam_beta2" => self.bc.adam_beta2 = num(key, value)?,
            "ppo.n_streams" => self.ppo.n_streams = num(key, value)?,
            "ppo.steps_per_stream" => self.ppo.steps_per_stream = num(key, value)?,
            "ppo.epochs_per_update" => self.ppo.epochs_per_update = num(key, value)?,
            "ppo.batch_size" => self.ppo.batch_size = num(key, value)?,
            "ppo.learning_rate" => self.ppo.learning_rate = num(key, value)?,
            "ppo.adam_eps" => self.ppo.adam_eps = num(key, value)?,
            "ppo.adam_beta1" => self.ppo.adam_beta1 = num(key, value)?,
            "ppo.adam_beta2" => self.ppo.adam_beta2 = num(key, value)?,
            "ppo.discount" => self.ppo.discount = num(key, value)?,
            "ppo.gae_lambda" => self.ppo.gae_lambda = num(key, value)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = num(key, value)?,
            "ppo.value_coef" => self.ppo.value_coef = num(key, value)?,
            "ppo.max_grad_norm" => self.ppo.max_grad_norm = num(key, value)?,
            "ppo.clip_eps" => self.ppo.clip_eps = num(key, value)?,
            "ppo.total_env_steps" => self.total_env_steps = num(key, value)?,
            "ppo.init_checkpoint" => self.init_checkpoint = Some(PathBuf::from(value)),
            "eval.decoding" => self.decoding_kind = value.to_string(),
            "eval.epsilon" => self.epsilon = num(key, value)?,
            "eval.top_p" => self.top_p = num(key, value)?,
            "eval.episodes" => self.eval_episodes = num(key, value)?,
            "eval.runs" => self.eval_runs = num(key, value)?,
            "eval.seed" => self.eval_seed = num(key, value)?,
            "curve.every_steps" => self.curve_every_steps = num(key, value)?,
            "curve.goals" => self.curve_goals = num(key, value)?,
            "rollout.n_workers" => self.n_workers = num(key, value)?,
            "rollout.worker_addrs" => {
                self.worker_addrs = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            other => return Err(ShopError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ShopError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ShopError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
