use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shoprl::bc;
use shoprl::config::{PipelineKind, RunConfig};
use shoprl::env::InstructionSampler;
use shoprl::error::ShopError;
use shoprl::eval;
use shoprl::model::SeqModel;
use shoprl::pipeline::{self, derive_seed};
use shoprl::rollout::ScoringServer;
use shoprl::Real;

#[derive(Parser)]
#[command(name = "shoprl", about = "Goal-conditioned shopping agent: train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (flat key = value; empty or absent means defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Action selection at inference: egreedy, topp, sample, argmax.
    #[arg(long)]
    decoding: Option<String>,
    /// Epsilon for egreedy decoding.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Nucleus mass for topp decoding.
    #[arg(long)]
    top_p: Option<f64>,
    /// How many recent observations feed the model (1 or 2).
    #[arg(long)]
    obs_history: Option<u8>,
    /// Single supervision category (single-domain pipelines).
    #[arg(long)]
    category: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a catalog (and its vocabulary) into the output directory.
    GenCatalog(CommonArgs),
    /// Script oracle demonstrations into the output directory.
    GenDemos(CommonArgs),
    /// Supervised training on oracle demonstrations.
    TrainBc(CommonArgs),
    /// Reinforcement training from scratch.
    TrainPpo(CommonArgs),
    /// Supervised training followed by reinforcement fine-tuning.
    TrainHybrid(CommonArgs),
    /// Single-category supervision, then all-category reinforcement.
    TrainUda(CommonArgs),
    /// Evaluate a checkpoint on held-out goals.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate one checkpoint under all four decodings.
    CompareDecodings {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Replay one episode, printing observations, distributions, choices.
    InspectEpisode {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve score requests over a local socket (worker process).
    Serve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7701")]
        addr: String,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, ShopError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(decoding) = &common.decoding {
        cfg.decoding_kind = decoding.clone();
    }
    if let Some(epsilon) = common.epsilon {
        cfg.epsilon = epsilon;
    }
    if let Some(top_p) = common.top_p {
        cfg.top_p = top_p;
    }
    if let Some(h) = common.obs_history {
        cfg.obs_history = h;
    }
    if let Some(cat) = &common.category {
        cfg.category = Some(cat.clone());
    }
    Ok(cfg)
}

fn train(common: &CommonArgs, kind: PipelineKind) -> Result<(), ShopError> {
    let mut cfg = load_config(common)?;
    cfg.pipeline = kind;
    cfg.validate()?;
    let artifacts = pipeline::run_pipeline(&cfg)?;
    if let Some(agreement) = artifacts.heldout_agreement {
        println!("held-out next-action agreement: {agreement:.4}");
    }
    print!("{}", artifacts.report.human_readable());
    println!("checkpoint: {}", artifacts.checkpoint.display());
    Ok(())
}

fn run(command: &Command) -> Result<(), ShopError> {
    match command {
        Command::GenCatalog(common) => {
            let cfg = load_config(common)?;
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let setup = pipeline::setup(&cfg)?;
            setup.catalog.save(&cfg.out_dir.join("catalog.jsonl"))?;
            setup.vocab.save(&cfg.out_dir.join("vocab.txt"))?;
            println!(
                "catalog: {} products, {} categories, vocabulary of {} tokens",
                setup.catalog.len(),
                setup.catalog.categories().len(),
                setup.vocab.len()
            );
            for (cat, frac) in setup.catalog.unique_attribute_fractions() {
                println!("  {cat}: {:.1}% unique attributes", 100.0 * frac);
            }
            Ok(())
        }
        Command::GenDemos(common) => {
            let cfg = load_config(common)?;
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let setup = pipeline::setup(&cfg)?;
            let demos = pipeline::generate_demos(&setup.catalog, &cfg, cfg.category.as_deref())?;
            bc::save_demonstrations(&demos, &cfg.out_dir.join("demos.jsonl"))?;
            let mean: f64 = demos.iter().map(|d| d.final_reward).sum::<f64>() / demos.len() as f64;
            println!(
                "{} demonstrations (mean reward {mean:.3}) -> {}",
                demos.len(),
                cfg.out_dir.join("demos.jsonl").display()
            );
            Ok(())
        }
        Command::TrainBc(common) => train(common, PipelineKind::Bc),
        Command::TrainPpo(common) => train(common, PipelineKind::Ppo),
        Command::TrainHybrid(common) => train(common, PipelineKind::Hybrid),
        Command::TrainUda(common) => train(common, PipelineKind::Uda),
        Command::Eval { common, checkpoint } => {
            let mut cfg = load_config(common)?;
            cfg.init_checkpoint = Some(checkpoint.clone());
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let setup = pipeline::setup(&cfg)?;
            let model = pipeline::initial_model(&cfg, &setup.vocab)?;
            let goals = pipeline::eval_goals(&setup, &cfg);
            let report = eval::evaluate(
                &model,
                &setup.vocab,
                &setup.catalog,
                &goals,
                cfg.decoding()?,
                cfg.eval_runs,
                cfg.horizon,
                derive_seed(cfg.eval_seed, "final-eval"),
            )?;
            report.save(&cfg.out_dir.join("report.txt"))?;
            print!("{}", report.human_readable());
            Ok(())
        }
        Command::CompareDecodings { common, checkpoint } => {
            let mut cfg = load_config(common)?;
            cfg.init_checkpoint = Some(checkpoint.clone());
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let setup = pipeline::setup(&cfg)?;
            let model = pipeline::initial_model(&cfg, &setup.vocab)?;
            let goals = pipeline::eval_goals(&setup, &cfg);
            let reports = eval::compare_decodings(
                &model,
                &setup.vocab,
                &setup.catalog,
                &goals,
                cfg.epsilon,
                cfg.top_p,
                cfg.eval_runs,
                cfg.horizon,
                derive_seed(cfg.eval_seed, "compare"),
            )?;
            println!("decoding      score   success rate");
            for report in &reports {
                println!(
                    "{:<12} {:>7.2} {:>12.2}",
                    report.decoding, report.score, report.success_rate
                );
                report.save(&cfg.out_dir.join(format!("report_{}.txt", report.decoding)))?;
            }
            Ok(())
        }
        Command::InspectEpisode { common, checkpoint } => {
            let mut cfg = load_config(common)?;
            cfg.init_checkpoint = checkpoint.clone();
            cfg.validate()?;
            let setup = pipeline::setup(&cfg)?;
            let model: SeqModel<Real> = pipeline::initial_model(&cfg, &setup.vocab)?;
            let mut sampler = InstructionSampler::new(pipeline::EVAL_NAMESPACE, cfg.eval_seed);
            let goal = sampler.sample(&setup.catalog);
            println!("goal: {}", goal.goal_text.join(" "));
            let mut trace = Vec::new();
            let mut rng = rand::SeedableRng::seed_from_u64(derive_seed(cfg.seed, "inspect"));
            let reward = eval::run_episode(
                &model,
                &setup.vocab,
                &setup.catalog,
                goal,
                cfg.decoding()?,
                cfg.horizon,
                &mut rng,
                Some(&mut trace),
            )?;
            for (t, step) in trace.iter().enumerate() {
                println!("--- step {t} ---");
                println!("observation: {}", step.observation_text.join(" "));
                let total: f64 = step.set.probs.iter().sum();
                println!("actions (probabilities sum to {total:.12}):");
                for (i, action) in step.set.actions.iter().enumerate() {
                    let marker = if i == step.chosen { ">" } else { " " };
                    println!(
                        " {marker} [{:.4}] {:?} {}",
                        step.set.probs[i],
                        action.kind,
                        action.surface_text()
                    );
                }
                if step.done {
                    println!("episode done, reward {}", step.reward);
                }
            }
            println!("total reward: {reward}");
            Ok(())
        }
        Command::Serve { common, checkpoint, addr } => {
            let mut cfg = load_config(common)?;
            cfg.init_checkpoint = Some(checkpoint.clone());
            cfg.validate()?;
            let setup = pipeline::setup(&cfg)?;
            let model = pipeline::initial_model(&cfg, &setup.vocab)?;
            let server = ScoringServer::spawn(addr, model, setup.vocab.clone())?;
            println!("scoring worker listening on {}", server.addr());
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ ShopError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
