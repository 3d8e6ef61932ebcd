use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tokensds_cli::commands::{self, artifacts};
use tokensds_cli::{Overrides, Run};

#[derive(Parser)]
#[command(
    name = "tokensds",
    version,
    about = "Token-conditioned score distillation on toy scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Divides every stage's step budget by 10.
    #[arg(long)]
    fast: bool,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Overrides the Stage III guidance scale.
    #[arg(long)]
    cfg_scale: Option<f64>,
}

impl Common {
    fn run(&self) -> Result<Run> {
        Run::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                fast: self.fast,
                force: self.force,
                cfg_scale: self.cfg_scale,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy denoiser.
    Pretrain(Common),
    /// Learn the semantic token and adapter.
    Stage1(Common),
    /// Learn the geometric token.
    Stage2(Common),
    /// Distill the voxel grid.
    Stage3(Common),
    /// Render orbit frames of a grid.
    Render {
        #[command(flatten)]
        common: Common,
        /// Grid checkpoint; defaults to the Stage III output.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Output directory; defaults to `frames/` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print consistency and held-out accuracy of a grid.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Rerun Stage III with new prompt text.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        /// Output file name inside the output directory.
        #[arg(long, default_value = artifacts::GRID_EDIT)]
        output: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(c) => commands::cmd_pretrain(&c.run()?),
        Command::Stage1(c) => commands::cmd_stage1(&c.run()?),
        Command::Stage2(c) => commands::cmd_stage2(&c.run()?),
        Command::Stage3(c) => commands::cmd_stage3(&c.run()?),
        Command::Render {
            common,
            grid,
            frames,
            out,
        } => {
            let run = common.run()?;
            let grid = grid.unwrap_or_else(|| run.path(artifacts::GRID));
            let out = out.unwrap_or_else(|| run.path(artifacts::FRAMES));
            commands::cmd_render(&run, &grid, frames, &out)
        }
        Command::Eval { common, grid } => {
            let run = common.run()?;
            let grid = grid.unwrap_or_else(|| run.path(artifacts::GRID));
            println!("{}", commands::cmd_eval(&run, &grid)?);
            Ok(())
        }
        Command::Edit { common, prompt, output } => commands::cmd_edit(&common.run()?, &prompt, &output),
    }
}
