use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use optrepair::analysis::{edited_policy, lemma3_suite, theorem1_suite, theorem2_suite};
use optrepair::attacks::AttackSpec;
use optrepair::env::{value_iteration, GridLanderEnv};
use optrepair::experiment::{desk_env, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "optrepair", about = "Attack, repair and imitate GridLander demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Run the attack/repair benchmark grid (the default).
    Run(RunArgs),
    /// Check the dominance, repair-monotonicity and segment claims on sampled policies.
    Theory(TheoryArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single attack instead of the grid, e.g. `kind=END,eta=0.6,gamma=0.6,seed=3`.
    #[arg(long)]
    attack: Option<AttackSpec>,
    /// Number of parts; may repeat.
    #[arg(long = "parts")]
    parts: Vec<usize>,
    #[arg(long)]
    no_override: bool,
    /// Train one monolithic clone on the repaired data instead of chaining options.
    #[arg(long)]
    no_options: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse cells already listed in the output manifest.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TheoryArgs {
    /// Environment config; defaults to the benchmark grid.
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    eps_p: f64,
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(a) = args.attack {
        cfg.fixed_attack = Some(a);
    }
    if !args.parts.is_empty() {
        cfg.parts = args.parts;
    }
    if args.no_override {
        cfg.use_override = false;
    }
    if args.no_options {
        cfg.use_options = false;
    }
    if let Some(o) = args.out {
        cfg.out = o;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let start = std::time::Instant::now();
    let res = run_experiment(&cfg, args.resume)?;
    println!(
        "clean clone: mean {:.2}, median {:.2}; {} table rows in {} ({:.1}s)",
        res.clean_mean,
        res.clean_median,
        res.table.len(),
        cfg.out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn theory(args: TheoryArgs) -> Result<()> {
    let env = match &args.env {
        Some(p) => GridLanderEnv::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => desk_env(),
    };
    let optimal = value_iteration(&env, 1e-9)?;
    let t1 = theorem1_suite(&env, &optimal, args.samples, args.seed, args.eps_p)?;
    println!(
        "theorem1: {} sampled, {} dominated, {} counterexamples, witness {:?}",
        t1.sampled,
        t1.dominated,
        t1.counterexamples.len(),
        t1.witness
    );
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let starts = env.top_row_starts();
    for k in [1, 3, 6] {
        let pi = edited_policy(&optimal, &env, k, &mut rng);
        let t2 = theorem2_suite(&pi, &optimal, &env, &starts, env.default_t_max(), args.eps_p)?;
        println!(
            "theorem2 ({k} edits): {} repairs, monotone {}, final ratio {:.4}",
            t2.repair.states.len(),
            t2.monotone,
            t2.repair.final_ratio
        );
    }
    for m in [2, 3] {
        let l3 = lemma3_suite(&env, &optimal, args.samples, m, args.seed, args.eps_p)?;
        println!(
            "lemma3 (M={m}): {} sampled, {} checked, {} counterexamples",
            l3.sampled,
            l3.checked,
            l3.counterexamples.len()
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Some(Command::Run(a)) => run(a),
        Some(Command::Theory(a)) => theory(a),
        None => run(cli.run),
    }
}
