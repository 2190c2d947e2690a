use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maq_cli::config::{parse_list, resolve_out, RunConfig};
use maq_cli::pipeline::{self, CellStatus, Demos, RunOutput};
use maq_core::agents::AgentKind;
use maq_core::{MaqError, Result};

#[derive(Parser)]
#[command(name = "maq-lab", version, about = "Macro action quantization lab")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Named base settings: `desk` (default) or `paper`.
    #[arg(long, global = true)]
    preset: Option<String>,

    /// `key = value` configuration file applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one setting, `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output root (default: $MAQ_LAB_OUT, else ./maq-lab-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations.
    GenDemos {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the codebook model on the demonstration training split.
    TrainVqvae {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long = "H")]
        horizon: Option<usize>,
        #[arg(long = "K")]
        codes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one agent.
    TrainAgent {
        /// maq_dsac, maq_symmetric, grid_dsac or bc.
        #[arg(long)]
        agent: Option<String>,
        #[arg(long)]
        vqvae: Option<PathBuf>,
        /// Required by maq_symmetric and bc.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Roll out policies and score them against held-out demonstrations.
    Evaluate {
        #[arg(long = "policy", required = true)]
        policies: Vec<PathBuf>,
        /// Codebook checkpoints; each codebook policy is matched by digest.
        #[arg(long = "vqvae")]
        vqvaes: Vec<PathBuf>,
        #[arg(long)]
        demos: PathBuf,
    },
    /// Sweep H, K and seeds: train a codebook and an agent per cell, evaluate, and
    /// write a long-format heatmap CSV.
    Ablate {
        /// Demonstrations to use; generated in memory when omitted.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long = "H-list", default_value = "1,2,4,8")]
        horizons: String,
        #[arg(long = "K-list", default_value = "8,16,32")]
        codes: String,
        #[arg(long)]
        seeds: Option<String>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the effective configuration as a config file.
    ShowConfig,
}

fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.preset {
        Some(name) => RunConfig::preset(name)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &global.config {
        cfg.apply_file(path)?;
    }
    for assignment in &global.overrides {
        cfg.apply_override(assignment)?;
    }
    // the environment only replaces the built-in default root
    if global.out.is_some() || cfg.out == RunConfig::default().out {
        cfg.out = resolve_out(global.out.as_deref());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_run(run: &RunOutput) {
    for f in &run.manifest.files {
        println!("{}  {}", f.sha256, run.dir.join(&f.path).display());
    }
}

fn parse_agent(tag: &str) -> Result<AgentKind> {
    AgentKind::from_tag(tag).ok_or_else(|| MaqError::Config(format!("unknown agent '{tag}'")))
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::GenDemos { count } => {
            let run = pipeline::gen_demos(&cfg, count.unwrap_or(cfg.demo_count))?;
            print_run(&run);
        }
        Command::TrainVqvae {
            demos,
            horizon,
            codes,
            seed,
        } => {
            let h = horizon.unwrap_or(cfg.horizon);
            let k = codes.unwrap_or(cfg.codes);
            let run = pipeline::train_vqvae_run(&cfg, &demos, h, k, seed.unwrap_or(cfg.seeds[0]))?;
            print_run(&run);
        }
        Command::TrainAgent {
            agent,
            vqvae,
            demos,
            seed,
        } => {
            let kind = match agent {
                Some(tag) => parse_agent(&tag)?,
                None => cfg.agent,
            };
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let run = pipeline::train_agent_run(&cfg, kind, seed, vqvae.as_deref(), demos.as_deref())?;
            print_run(&run);
        }
        Command::Evaluate {
            policies,
            vqvaes,
            demos,
        } => {
            let out = pipeline::evaluate_run(&cfg, &policies, &vqvaes, &demos)?;
            for run in out.runs.iter().chain(&out.summaries) {
                print_run(run);
            }
        }
        Command::Ablate {
            demos,
            horizons,
            codes,
            seeds,
            jobs,
        } => {
            let horizons: Vec<usize> = parse_list(&horizons, "H-list")?;
            let codes: Vec<usize> = parse_list(&codes, "K-list")?;
            if let Some(s) = seeds {
                cfg.seeds = parse_list(&s, "seeds")?;
            }
            let loaded = match &demos {
                Some(p) => Demos::load(p, cfg.split_seed)?,
                None => Demos::new(&pipeline::generate_demos(cfg.demo_count)?, cfg.split_seed)?,
            };
            let out = pipeline::ablate_run(&cfg, &loaded, demos.as_deref(), &horizons, &codes, &cfg.seeds, jobs)?;
            for (cell, status) in &out.cells {
                let tag = if *status == CellStatus::Resumed { "resumed" } else { "computed" };
                eprintln!("cell {cell}: {tag}");
            }
            for (cell, message) in &out.failures {
                eprintln!("cell {cell}: FAILED: {message}");
            }
            print_run(&out.heatmap);
            if !out.failures.is_empty() {
                eprintln!("maq-lab: {} of the ablation cells failed", out.failures.len());
                return Ok(false);
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("maq-lab: {e}");
            ExitCode::FAILURE
        }
    }
}
