//! End-to-end training pipelines: supervised, reinforcement, hybrid, and
//! single-domain supervision followed by all-domain reinforcement.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::actions::Decoding;
use crate::bc::{self, Demonstration};
use crate::config::{PipelineKind, RunConfig};
use crate::env::{generate_catalog, Catalog, Instruction, InstructionSampler};
use crate::error::ShopError;
use crate::eval::{self, EvalReport};
use crate::model::{ModelConfig, SeqModel};
use crate::nn::Adam;
use crate::ppo;
use crate::rollout::{LocalWorker, RolloutCoordinator, ScoreWorker, SocketWorker, WorkerPool};
use crate::text::Vocabulary;
use crate::Real;

// Goal-id namespaces. Demonstrations, rollout streams, curve goals, and the
// final evaluation set can never collide by construction.
pub const DEMO_NAMESPACE: u32 = 1;
pub const ROLLOUT_NAMESPACE_BASE: u32 = 1_000;
pub const CURVE_NAMESPACE: u32 = 2_000;
pub const EVAL_NAMESPACE: u32 = 3_000;

/// Stable per-phase seed derivation, so a hybrid run and a resumed
/// supervised-then-reinforcement run see identical randomness.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct PipelineArtifacts {
    pub model: SeqModel<Real>,
    pub report: EvalReport,
    pub checkpoint: PathBuf,
    pub bc_loss_curve: Vec<f64>,
    pub heldout_agreement: Option<f64>,
}

pub struct PipelineSetup {
    pub catalog: Arc<Catalog>,
    pub vocab: Arc<Vocabulary>,
}

pub fn setup(cfg: &RunConfig) -> Result<PipelineSetup, ShopError> {
    let catalog = Arc::new(generate_catalog(
        cfg.catalog_seed,
        cfg.catalog_products,
        cfg.catalog_categories,
    )?);
    let vocab = Arc::new(catalog.vocabulary());
    Ok(PipelineSetup { catalog, vocab })
}

pub fn initial_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<SeqModel<Real>, ShopError> {
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        dim: cfg.dim,
        context_limit: cfg.context_limit,
        obs_history: cfg.obs_history,
    };
    match &cfg.init_checkpoint {
        Some(path) => SeqModel::load(path, model_cfg),
        None => Ok(SeqModel::new(model_cfg, derive_seed(cfg.seed, "init"))),
    }
}

/// Sample goals and script their demonstrations; unreachable targets are
/// skipped and resampled, deterministically.
pub fn generate_demos(
    catalog: &Arc<Catalog>,
    cfg: &RunConfig,
    category: Option<&str>,
) -> Result<Vec<Demonstration>, ShopError> {
    let mut sampler = InstructionSampler::new(DEMO_NAMESPACE, derive_seed(cfg.seed, "demo"));
    let mut instructions = Vec::with_capacity(cfg.demo_budget);
    let mut attempts = 0;
    while instructions.len() < cfg.demo_budget {
        attempts += 1;
        if attempts > cfg.demo_budget * 8 {
            return Err(ShopError::Contract(
                "could not script enough demonstrations; check the horizon and catalog size".into(),
            ));
        }
        let inst = match category {
            Some(cat) => sampler.sample_in_category(catalog, cat),
            None => sampler.sample(catalog),
        };
        instructions.push(inst);
    }
    let demos: Result<Vec<Demonstration>, ShopError> = instructions
        .par_iter()
        .map(|inst| bc::oracle_demonstrate(catalog, inst, cfg.horizon))
        .collect();
    demos
}

pub fn build_workers(
    cfg: &RunConfig,
    model: &Arc<SeqModel<Real>>,
    vocab: &Arc<Vocabulary>,
) -> Result<WorkerPool<Real>, ShopError> {
    let workers: Vec<Arc<dyn ScoreWorker<Real>>> = if cfg.worker_addrs.is_empty() {
        (0..cfg.n_workers.max(1))
            .map(|_| {
                Arc::new(LocalWorker::new(model.clone(), vocab.clone()))
                    as Arc<dyn ScoreWorker<Real>>
            })
            .collect()
    } else {
        let mut workers: Vec<Arc<dyn ScoreWorker<Real>>> = Vec::new();
        for addr in &cfg.worker_addrs {
            workers.push(Arc::new(SocketWorker::connect(addr, model.cfg.arch_hash())?));
        }
        workers
    };
    Ok(WorkerPool::new(workers))
}

pub struct PpoPhaseOutput {
    pub env_steps: usize,
    pub updates: usize,
}

struct CsvSink {
    file: Option<std::fs::File>,
}

impl CsvSink {
    fn create(path: Option<PathBuf>, header: &str) -> Result<Self, ShopError> {
        match path {
            Some(path) => {
                let mut file = std::fs::File::create(path)?;
                writeln!(file, "{header}")?;
                Ok(CsvSink { file: Some(file) })
            }
            None => Ok(CsvSink { file: None }),
        }
    }

    fn row(&mut self, line: &str) -> Result<(), ShopError> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Reinforcement phase: repeat collect-then-update until the transition
/// budget is spent, appending per-update statistics and periodic held-out
/// evaluations.
pub fn ppo_phase(
    model: &mut SeqModel<Real>,
    setup: &PipelineSetup,
    cfg: &RunConfig,
    out_dir: Option<&std::path::Path>,
) -> Result<PpoPhaseOutput, ShopError> {
    let snapshot = Arc::new(model.clone());
    let pool = build_workers(cfg, &snapshot, &setup.vocab)?;
    let mut coordinator = RolloutCoordinator::new(
        setup.catalog.clone(),
        setup.vocab.clone(),
        snapshot,
        pool,
        cfg.ppo.n_streams,
        cfg.horizon,
        ROLLOUT_NAMESPACE_BASE,
        derive_seed(cfg.seed, "rollout"),
    );
    let mut adam = Adam::new(cfg.ppo.adam(), &model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "ppo-shuffle"));

    let mut curve_sampler = InstructionSampler::new(CURVE_NAMESPACE, derive_seed(cfg.seed, "curve"));
    let curve_goals: Vec<Instruction> =
        (0..cfg.curve_goals).map(|_| curve_sampler.sample(&setup.catalog)).collect();

    let mut train_csv = CsvSink::create(
        out_dir.map(|d| d.join("training_stats.csv")),
        "update,env_steps,mean_episode_reward,score_so_far,policy_loss,value_loss,entropy,clip_fraction,approx_kl",
    )?;
    let mut curve_csv = CsvSink::create(
        out_dir.map(|d| d.join("learning_curve.csv")),
        "env_steps,score,success_rate,policy_loss,value_loss,entropy,clip_fraction",
    )?;

    let mut env_steps = 0usize;
    let mut updates = 0usize;
    let mut episode_rewards: Vec<f64> = Vec::new();
    let mut next_curve = cfg.curve_every_steps;

    while env_steps < cfg.total_env_steps {
        coordinator.refresh_snapshot(&model.params)?;
        let (buffer, stats) = coordinator.collect(cfg.ppo.steps_per_stream, Decoding::Sample)?;
        env_steps += stats.transitions;
        episode_rewards.extend(stats.episode_rewards.iter().copied());

        let update = ppo::ppo_update(model, &setup.vocab, &buffer, &cfg.ppo, &mut adam, &mut shuffle_rng)
            .map_err(|e| ShopError::Numeric(format!("ppo phase, update {updates}: {e}")))?;
        updates += 1;

        let recent: Vec<f64> = stats.episode_rewards;
        let mean_episode_reward = if recent.is_empty() {
            0.0
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        };
        let score_so_far = if episode_rewards.is_empty() {
            0.0
        } else {
            100.0 * episode_rewards.iter().sum::<f64>() / episode_rewards.len() as f64
        };
        train_csv.row(&format!(
            "{updates},{env_steps},{mean_episode_reward},{score_so_far},{},{},{},{},{}",
            update.policy_loss, update.value_loss, update.entropy, update.clip_fraction, update.approx_kl
        ))?;

        if env_steps >= next_curve && !curve_goals.is_empty() {
            let report = eval::evaluate(
                model,
                &setup.vocab,
                &setup.catalog,
                &curve_goals,
                cfg.decoding()?,
                1,
                cfg.horizon,
                derive_seed(cfg.seed, "curve-eval").wrapping_add(env_steps as u64),
            )?;
            curve_csv.row(&format!(
                "{env_steps},{},{},{},{},{},{}",
                report.score,
                report.success_rate,
                update.policy_loss,
                update.value_loss,
                update.entropy,
                update.clip_fraction
            ))?;
            next_curve += cfg.curve_every_steps;
        }
    }

    Ok(PpoPhaseOutput { env_steps, updates })
}

/// Fresh held-out goals for the final evaluation, disjoint by namespace from
/// every goal stream used in training.
pub fn eval_goals(setup: &PipelineSetup, cfg: &RunConfig) -> Vec<Instruction> {
    let mut sampler = InstructionSampler::new(EVAL_NAMESPACE, cfg.eval_seed);
    (0..cfg.eval_episodes).map(|_| sampler.sample(&setup.catalog)).collect()
}

/// Run the configured phase sequence end to end, writing artifacts
/// (checkpoints, curves, report, config copy) under the output directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineArtifacts, ShopError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let setup = setup(cfg)?;
    setup.catalog.save(&cfg.out_dir.join("catalog.jsonl"))?;
    setup.vocab.save(&cfg.out_dir.join("vocab.txt"))?;
    cfg.save(&cfg.out_dir.join("config.txt"))?;

    let mut model = initial_model(cfg, &setup.vocab)?;
    let mut bc_loss_curve = Vec::new();
    let mut heldout_agreement = None;

    if cfg.pipeline.has_bc_phase() {
        let category = match cfg.pipeline {
            PipelineKind::Uda => cfg.category.as_deref(),
            _ => None,
        };
        let demos = generate_demos(&setup.catalog, cfg, category)
            .map_err(|e| ShopError::Contract(format!("bc phase (demo generation): {e}")))?;
        bc::save_demonstrations(&demos, &cfg.out_dir.join("demos.jsonl"))?;

        // Hold out a fifth of the demonstrations for the agreement metric.
        let n_heldout = demos.len() / 5;
        let (heldout, train) = demos.split_at(n_heldout);
        let curve = bc::train_bc(&mut model, &setup.vocab, train, &cfg.bc, derive_seed(cfg.seed, "bc"))
            .map_err(|e| ShopError::Numeric(format!("bc phase (training): {e}")))?;
        bc_loss_curve = curve;
        if !heldout.is_empty() {
            heldout_agreement = Some(bc::next_action_agreement(&model, &setup.vocab, heldout)?);
        }
        if !bc_loss_curve.is_empty() {
            let mut f = std::fs::File::create(cfg.out_dir.join("bc_losses.csv"))?;
            writeln!(f, "epoch,mean_loss")?;
            for (i, loss) in bc_loss_curve.iter().enumerate() {
                writeln!(f, "{i},{loss}")?;
            }
        }
        model.save(&cfg.out_dir.join("bc.ckpt"))?;
    }

    if cfg.pipeline.has_ppo_phase() {
        ppo_phase(&mut model, &setup, cfg, Some(&cfg.out_dir))
            .map_err(|e| ShopError::Numeric(format!("ppo phase: {e}")))?;
    }

    let goals = eval_goals(&setup, cfg);
    let report = eval::evaluate(
        &model,
        &setup.vocab,
        &setup.catalog,
        &goals,
        cfg.decoding()?,
        cfg.eval_runs,
        cfg.horizon,
        derive_seed(cfg.eval_seed, "final-eval"),
    )
    .map_err(|e| ShopError::Numeric(format!("final evaluation: {e}")))?;
    report.save(&cfg.out_dir.join("report.txt"))?;

    let checkpoint = cfg.out_dir.join("model.ckpt");
    model.save(&checkpoint)?;

    Ok(PipelineArtifacts { model, report, checkpoint, bc_loss_curve, heldout_agreement })
}
