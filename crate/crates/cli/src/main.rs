use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusedet_cli::{cmd_detect, cmd_eval, cmd_register, cmd_synth, cmd_train, CliError, Overrides, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "fusedet", version, about = "Infrared/visible fused small-target detection")]
struct Cli {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed; required here or in the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Disable the attention block
    #[arg(long, global = true)]
    no_cbam: bool,
    /// Disable fusion and use a single stream (infrared unless --vis-only)
    #[arg(long, global = true)]
    no_fusion: bool,
    /// Infrared stream only
    #[arg(long, global = true)]
    ir_only: bool,
    /// Visible stream only
    #[arg(long, global = true)]
    vis_only: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    Synth {
        /// Number of pairs (overrides synth_count)
        #[arg(long)]
        count: Option<usize>,
    },
    /// Register visible images onto infrared ones
    Register {
        /// Directory of ir_<stem>.pgm images
        #[arg(long)]
        ir_dir: Option<PathBuf>,
        /// Directory of unregistered vis_<stem>.pgm images
        #[arg(long)]
        vis_dir: Option<PathBuf>,
    },
    /// Train a detector
    Train {
        /// Directory of ir_<stem>.pgm images
        #[arg(long)]
        ir_dir: Option<PathBuf>,
        /// Directory of registered vis_<stem>.pgm images (the output of `register`)
        #[arg(long)]
        vis_dir: Option<PathBuf>,
        /// Directory of labels_<stem>.txt files (defaults to the infrared directory)
        #[arg(long)]
        labels_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled dataset
    Eval {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of ir_<stem>.pgm images
        #[arg(long)]
        ir_dir: Option<PathBuf>,
        /// Directory of registered vis_<stem>.pgm images (the output of `register`)
        #[arg(long)]
        vis_dir: Option<PathBuf>,
        /// Directory of labels_<stem>.txt files (defaults to the infrared directory)
        #[arg(long)]
        labels_dir: Option<PathBuf>,
    },
    /// Detect targets in one image pair
    Detect {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Infrared image
        #[arg(long)]
        ir: PathBuf,
        /// Unregistered visible image
        #[arg(long)]
        vis: Option<PathBuf>,
        /// Write the infrared image with detection boxes drawn
        #[arg(long)]
        annotate: Option<PathBuf>,
    },
}

fn set(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out,
        no_cbam: cli.no_cbam,
        no_fusion: cli.no_fusion,
        ir_only: cli.ir_only,
        vis_only: cli.vis_only,
    };
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &ov)?;
    let stdout = &mut std::io::stdout();
    match cli.command {
        Command::Synth { count } => {
            if let Some(n) = count {
                cfg.synth_count = n;
            }
            cmd_synth(&cfg, stdout)
        }
        Command::Register { ir_dir, vis_dir } => {
            set(&mut cfg.ir_dir, ir_dir);
            set(&mut cfg.vis_dir, vis_dir);
            cmd_register(&cfg, stdout).map(|_| ())
        }
        Command::Train {
            ir_dir,
            vis_dir,
            labels_dir,
        } => {
            set(&mut cfg.ir_dir, ir_dir);
            set(&mut cfg.vis_dir, vis_dir);
            set(&mut cfg.labels_dir, labels_dir);
            cmd_train(&cfg, stdout).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            ir_dir,
            vis_dir,
            labels_dir,
        } => {
            set(&mut cfg.checkpoint, checkpoint);
            set(&mut cfg.ir_dir, ir_dir);
            set(&mut cfg.vis_dir, vis_dir);
            set(&mut cfg.labels_dir, labels_dir);
            cmd_eval(&cfg, stdout).map(|_| ())
        }
        Command::Detect {
            checkpoint,
            ir,
            vis,
            annotate,
        } => {
            set(&mut cfg.checkpoint, checkpoint);
            let vis = if ov.ir_only { None } else { vis };
            cmd_detect(&cfg, &ir, vis.as_deref(), annotate.as_deref(), stdout).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
