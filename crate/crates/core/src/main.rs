use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lpci::commands;
use lpci::config::RunConfig;
use lpci::Result;

/// LiDAR range-image diffusion: project scans, train the denoiser, sample
/// new scenes, and score them.
#[derive(Parser)]
#[command(name = "lpci", version, about)]
struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dotted config override, repeatable: --set schedule.kind=ramp
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Project point-cloud scans into range and/or bird's-eye images.
    Project {
        /// Input scans (.bin packed float32 records, or .lpci N×4 tensors).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated views: equirect, bev.
        #[arg(long, default_value = "equirect")]
        views: String,
        /// Also write 16-bit grayscale PNGs.
        #[arg(long)]
        png: bool,
    },
    /// Tabulate noise schedules as CSV (step, beta, alpha, alpha_bar, snr).
    Schedules {
        /// Comma-separated schedule kinds, or "all".
        #[arg(long, default_value = "linear")]
        kinds: String,
        /// Override the step count from the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory for the CSV files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a directory of .lpci range images.
    Train {
        /// Directory of training images; split 80/10/10 by sorted name.
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Override training.epochs from the config.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images from a trained checkpoint.
    Sample {
        /// Checkpoint produced by `lpci train`.
        checkpoint: PathBuf,
        /// Number of images to generate.
        #[arg(long)]
        count: Option<usize>,
        /// Base RNG seed; image i uses seed+i.
        #[arg(long)]
        seed: Option<u64>,
        /// Reverse-process steps (defaults to the full schedule).
        #[arg(long = "sample-steps")]
        sample_steps: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write 16-bit grayscale PNGs.
        #[arg(long)]
        png: bool,
    },
    /// Reconstruct a point cloud from an equirect range image.
    Backproject {
        /// Input .lpci range image with embedded projection meta.
        input: PathBuf,
        /// Output cloud: .bin for packed records, .lpci for an N×4 tensor.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated images against a reference set.
    Eval {
        /// Directory of generated .lpci images.
        generated: PathBuf,
        /// Directory of reference .lpci images.
        reference: PathBuf,
        /// Report output path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut sets = cli.sets.clone();
    // Subcommand flags are sugar for config overrides; translating them
    // here keeps one resolution path and one validation pass.
    match &cli.cmd {
        Cmd::Schedules { steps: Some(n), .. } => sets.push(format!("schedule.params.steps={n}")),
        Cmd::Train { epochs: Some(n), .. } => sets.push(format!("training.epochs={n}")),
        Cmd::Sample { count, seed, sample_steps, .. } => {
            if let Some(n) = count {
                sets.push(format!("sampling.count={n}"));
            }
            if let Some(s) = seed {
                sets.push(format!("seed={s}"));
            }
            if let Some(k) = sample_steps {
                sets.push(format!("sampling.steps={k}"));
            }
        }
        _ => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;

    match &cli.cmd {
        Cmd::Project { inputs, out, views, png } => {
            let views = commands::parse_views(views)?;
            commands::cmd_project(&cfg, inputs, out, &views, *png)
        }
        Cmd::Schedules { kinds, out, .. } => {
            let kinds = commands::parse_kinds(kinds)?;
            commands::cmd_schedules(&cfg, &kinds, out)
        }
        Cmd::Train { data, out, resume, .. } => {
            commands::cmd_train(&cfg, data, out, resume.as_deref())
        }
        Cmd::Sample { checkpoint, out, png, .. } => {
            commands::cmd_sample(&cfg, checkpoint, out, *png)
        }
        Cmd::Backproject { input, out } => commands::cmd_backproject(&cfg, input, out),
        Cmd::Eval { generated, reference, out } => {
            commands::cmd_eval(&cfg, generated, reference, out)
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("LPCI_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: LPCI_THREADS must be a positive integer, got '{threads}'");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
