use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedrecon_cli::{commands, CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedrecon", version, about = "Federated MR reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides experiment.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated seeds (overrides experiment.seed/repeats).
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Worker threads.
    #[arg(long, global = true, env = "FEDRECON_THREADS")]
    threads: Option<usize>,

    /// Generate missing dataset files instead of failing.
    #[arg(long, global = true)]
    generate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic sites.
    GenData,
    /// Train and evaluate `train.strategy`.
    Train,
    /// Scenario comparison tables.
    Compare,
    /// Source→target ablation of cross-site modeling.
    AblateCm,
    /// Export bottleneck latents of `export.model` for every site.
    ExportLatents,
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cfg = load_config(cli)?;
    let seeds = match &cli.seeds {
        Some(s) if s.is_empty() => return Err(CliError::Config("--seeds is empty".into())),
        Some(s) => s.clone(),
        None => cfg.default_seeds(),
    };
    match cli.command {
        Command::GenData => {
            for p in commands::gen_data(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Train => {
            for r in commands::train(&cfg, &seeds, cli.generate)? {
                println!(
                    "seed {} {} → {}: ssim {:.4} psnr {:.3}",
                    r.meta.seed,
                    r.meta.train_sites.join("+"),
                    r.meta.test_site,
                    r.mean_ssim,
                    r.mean_psnr
                );
            }
        }
        Command::Compare => println!("{}", commands::compare(&cfg, &seeds, cli.generate)?.display()),
        Command::AblateCm => println!("{}", commands::ablate_cm(&cfg, &seeds, cli.generate)?.display()),
        Command::ExportLatents => {
            for p in commands::export_latents(&cfg, cli.generate)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(2)
        }
    }
}
