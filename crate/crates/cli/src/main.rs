use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conform_cli::bench::{emit, Template};
use conform_cli::commands::{
    ablate, cmd_run, gradcheck, report_json, DEFAULT_TAU_GRID, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
use conform_cli::config::{parse_step_set, parse_tau_grid};
use conform_cli::{CliError, CliResult, Overrides, RunConfig};

/// Contrastive attention guidance on a toy diffusion sandbox.
#[derive(Parser)]
#[command(name = "conform", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one trajectory and write report.json and final token maps.
    Run {
        #[command(flatten)]
        common: Common,
        /// Apply contrastive guidance (the default).
        #[arg(long, overrides_with = "unguided")]
        guided: bool,
        /// Plain DDIM, no guidance.
        #[arg(long)]
        unguided: bool,
    },
    /// Grid search over τ; one guided run per τ per seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated temperatures.
        #[arg(long)]
        tau_grid: Option<String>,
        /// Number of seeds per τ, starting at the configured seed.
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Compare autodiff and finite-difference gradients of the loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Add this to the first autodiff coordinate (to see a failure).
        #[arg(long, hide = true)]
        sabotage: Option<f64>,
    },
    /// Write benchmark configs for a prompt template.
    Bench {
        /// animal-animal, animal-object, object-object or multi-object.
        template: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Base config the template's groups are applied to.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "bench")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run config; the default sandbox when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Total denoising steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated refinement step indices, or "none".
    #[arg(long, value_parser = parse_step_set)]
    refine_at: Option<BTreeSet<usize>>,
    #[arg(long)]
    refine_iters: Option<usize>,
    /// First step index without optimization.
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::sandbox(),
        };
        base.with_overrides(&Overrides {
            seed: self.seed,
            tau: self.tau,
            alpha: self.alpha,
            steps: self.steps,
            refine_at: self.refine_at.clone(),
            refine_iters: self.refine_iters,
            cutoff: self.cutoff,
            out_dir: self.out_dir.clone(),
        })
    }
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Run {
            common, unguided, ..
        } => {
            let cfg = common.load()?;
            let out = cmd_run(&cfg, !unguided)?;
            let last = out.report.final_step().expect("at least one step");
            println!(
                "{} run, seed {}, {} steps: binding {} separation {}; wrote {}",
                if unguided { "unguided" } else { "guided" },
                cfg.guidance.seed,
                out.report.steps.len(),
                fmt_score(last.binding_score),
                fmt_score(last.separation_score),
                out.report_path.display(),
            );
        }
        Command::Ablate {
            common,
            tau_grid,
            count,
        } => {
            let cfg = common.load()?;
            let grid = match tau_grid {
                Some(s) => parse_tau_grid(&s)?,
                None => DEFAULT_TAU_GRID.to_vec(),
            };
            if count == 0 {
                return Err(CliError::config("count: need at least one seed"));
            }
            let seeds: Vec<u64> = (0..count)
                .map(|i| cfg.guidance.seed.wrapping_add(i))
                .collect();
            let table = ablate(&cfg, &grid, &seeds)?;
            println!("tau\tseeds\tbinding\tseparation");
            for row in &table.rows {
                println!(
                    "{}\t{}\t{}\t{}",
                    row.tau,
                    row.seeds,
                    fmt_score(row.mean_binding_score),
                    fmt_score(row.mean_separation_score)
                );
            }
            let path = cfg.output_dir.join("ablation.json");
            std::fs::create_dir_all(&cfg.output_dir)
                .map_err(|e| CliError::io(&cfg.output_dir, e))?;
            std::fs::write(&path, report_json(&table)).map_err(|e| CliError::io(&path, e))?;
            println!("{} runs; wrote {}", table.runs_executed, path.display());
        }
        Command::Gradcheck { common, sabotage } => {
            let cfg = common.load()?;
            let perturb = |g: &mut Vec<f64>| {
                if let (Some(delta), Some(first)) = (sabotage, g.first_mut()) {
                    *first += delta;
                }
            };
            let points = gradcheck(&cfg, &perturb)?;
            for p in &points {
                println!(
                    "point {} seed {}: max relative error {:.3e} {}",
                    p.point,
                    p.seed,
                    p.worst().max_rel_error,
                    if p.passed() { "ok" } else { "FAIL" }
                );
            }
            let (worst, at) = points
                .iter()
                .map(|p| (p.worst(), p.point))
                .max_by(|a, b| a.0.max_rel_error.total_cmp(&b.0.max_rel_error))
                .expect("points are checked");
            println!(
                "max relative error {:.3e} over {} points (h = {GRADCHECK_STEP:e}, tolerance {GRADCHECK_TOLERANCE:e})",
                worst.max_rel_error,
                points.len()
            );
            if worst.max_rel_error >= GRADCHECK_TOLERANCE {
                return Err(CliError::Check(format!(
                    "point {at} max relative error {:.3e} at coordinate {} (autodiff {:e}, finite difference {:e})",
                    worst.max_rel_error, worst.worst_index, worst.autodiff, worst.finite_diff
                )));
            }
        }
        Command::Bench {
            template,
            count,
            config,
            out_dir,
        } => {
            let template: Template = template.parse()?;
            let base = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::sandbox(),
            };
            let paths = emit(template, count, &base, &out_dir)?;
            println!(
                "wrote {} {} configs to {}",
                paths.len(),
                template,
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("usage-error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
