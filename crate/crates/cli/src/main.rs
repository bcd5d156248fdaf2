use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssprompt_cli as cli;

#[derive(Parser)]
#[command(
    name = "ssprompt",
    about = "Prompt learning laboratory for a small frozen promptable-segmentation model",
    version
)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the surrogate on the source corpus and freeze it.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Learn prompts with one method on a few-shot sample.
    Learn {
        #[arg(long)]
        method: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "downstream")]
        dataset: String,
        #[arg(long, default_value = "config")]
        condition: String,
        #[arg(long, default_value_t = 16)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "learnable")]
        weights: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate prompts (or the frozen defaults) on an evaluation split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long, default_value = "downstream")]
        dataset: String,
        #[arg(long, default_value = "config")]
        condition: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Reverse-mode gradients against central finite differences, per op and
    /// end to end.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Six-row ablation over shared seeds: defaults, each branch with fixed
    /// and learnable weights, and the joint method.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        no_plots: bool,
    },
    /// Shot sweep (4, 8, 12, 16) for the joint method.
    Shots {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        no_plots: bool,
    },
    /// Adverse-condition sweep: clean, fog, night, rain, snow.
    Conditions {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        no_plots: bool,
    },
    /// Training efficiency: wall time, peak tensor memory, and encoder
    /// invocation counters, joint method versus context tokens.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        steps: u64,
        #[arg(long, default_value_t = 10)]
        warmup: u64,
        #[arg(long)]
        no_plots: bool,
    },
    /// Coordinate-space spatial prompt learning against the embedding-space
    /// methods.
    Vspl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        no_plots: bool,
    },
    /// Learnt semantic weights by pretraining-frequency role.
    Weights {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Export one sample as a binary PPM plus a plain-text label map.
    Export {
        #[arg(long, default_value = "downstream")]
        dataset: String,
        #[arg(long, default_value = "config")]
        condition: String,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(args: Args) -> Result<(), cli::CliError> {
    match args.cmd {
        Cmd::Pretrain { config, out, seed } => cli::cmd_pretrain(config.as_deref(), &out, seed),
        Cmd::Learn {
            method,
            model,
            dataset,
            condition,
            shots,
            seed,
            out,
            weights,
            config,
        } => cli::cmd_learn(
            &method,
            &model,
            &dataset,
            &condition,
            shots,
            seed,
            &out,
            &weights,
            config.as_deref(),
        ),
        Cmd::Eval {
            model,
            prompts,
            dataset,
            condition,
            out,
            config,
        } => cli::cmd_eval(
            &model,
            prompts.as_deref(),
            &dataset,
            &condition,
            &out,
            config.as_deref(),
        ),
        Cmd::Gradcheck { seed } => cli::cmd_gradcheck(seed).map(|_| ()),
        Cmd::Ablate {
            model,
            out,
            config,
            seed,
            seeds,
            no_plots,
        } => cli::cmd_ablate(&model, &out, config.as_deref(), seed, seeds, !no_plots),
        Cmd::Shots {
            model,
            out,
            config,
            seed,
            seeds,
            no_plots,
        } => cli::cmd_shots(&model, &out, config.as_deref(), seed, seeds, !no_plots),
        Cmd::Conditions {
            model,
            out,
            config,
            seed,
            seeds,
            no_plots,
        } => cli::cmd_conditions(&model, &out, config.as_deref(), seed, seeds, !no_plots),
        Cmd::Bench {
            model,
            out,
            config,
            seed,
            steps,
            warmup,
            no_plots,
        } => cli::cmd_bench(&model, &out, config.as_deref(), seed, steps, warmup, !no_plots),
        Cmd::Vspl {
            model,
            out,
            config,
            seed,
            seeds,
            no_plots,
        } => cli::cmd_vspl(&model, &out, config.as_deref(), seed, seeds, !no_plots),
        Cmd::Weights {
            model,
            out,
            config,
            seed,
            seeds,
        } => cli::cmd_weights(&model, &out, config.as_deref(), seed, seeds),
        Cmd::Export {
            dataset,
            condition,
            split,
            index,
            out,
            config,
        } => cli::cmd_export(&dataset, &condition, &split, index, &out, config.as_deref()),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
