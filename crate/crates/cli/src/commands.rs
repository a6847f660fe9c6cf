use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use conform_core::metrics::{compare_gradients, finite_diff_grad, GradComparison, LossOracle};
use conform_core::sampler::{ddim_step, guidance_gradient};
use conform_core::{
    ddim_sample, guided_sample, AttentionMaps, GuidanceConfig, RunReport, Tensor, ToyModel,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::export::export_map;

pub fn build_model(cfg: &RunConfig) -> CliResult<ToyModel> {
    Ok(ToyModel::from_seed(
        cfg.model.dims(),
        cfg.model.seed,
        cfg.guidance.total_steps,
    )?)
}

/// Run one trajectory. Unguided runs use the plain DDIM loop and record no
/// losses.
pub fn run(cfg: &RunConfig, guided: bool) -> CliResult<RunReport> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let traj = if guided {
        guided_sample(&model, &cfg.groups, &cfg.guidance)?
    } else {
        ddim_sample(&model, cfg.guidance.seed)?
    };
    let report = RunReport::from_trajectory(
        &traj,
        &cfg.groups,
        &cfg.guidance,
        model.dims(),
        cfg.model.seed,
        guided,
    )?;
    Ok(report)
}

pub fn report_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Files written by [`cmd_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub report_path: PathBuf,
    pub map_paths: Vec<PathBuf>,
}

/// Run and write `report.json` plus one P2 image per token of the final maps
/// under `maps/`.
pub fn cmd_run(cfg: &RunConfig, guided: bool) -> CliResult<RunOutput> {
    let report = run(cfg, guided)?;
    let report_path = cfg.output_dir.join("report.json");
    write(&report_path, &report_json(&report))?;

    let mut map_paths = Vec::new();
    if let Some(maps) = &report.final_maps {
        let dir = cfg.output_dir.join("maps");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for j in 0..maps.l {
            let path = dir.join(format!("token_{j:02}.pgm"));
            export_map(&maps.token_map(j)?, &path)?;
            map_paths.push(path);
        }
    }
    Ok(RunOutput {
        report,
        report_path,
        map_paths,
    })
}

pub const DEFAULT_TAU_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub tau: f64,
    pub seed: u64,
    pub binding_score: Option<f64>,
    pub separation_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tau: f64,
    pub seeds: usize,
    pub mean_binding_score: Option<f64>,
    pub mean_separation_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Trajectories actually sampled.
    pub runs_executed: usize,
    pub rows: Vec<AblationRow>,
    /// Sorted by τ, then seed.
    pub runs: Vec<AblationRun>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<_>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One guided run per `(τ, seed)`, spread over the rayon pool, with final
/// scores averaged per τ.
pub fn ablate(cfg: &RunConfig, grid: &[f64], seeds: &[u64]) -> CliResult<AblationTable> {
    if grid.is_empty() {
        return Err(CliError::config("tau-grid: empty"));
    }
    for &tau in grid {
        GuidanceConfig {
            tau,
            ..cfg.guidance.clone()
        }
        .validate()?;
    }
    let model = build_model(cfg)?;
    let executed = AtomicUsize::new(0);
    let jobs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let mut runs = jobs
        .par_iter()
        .map(|&(tau, seed)| {
            let guidance = GuidanceConfig {
                tau,
                seed,
                ..cfg.guidance.clone()
            };
            let traj = guided_sample(&model, &cfg.groups, &guidance)?;
            executed.fetch_add(1, Ordering::Relaxed);
            let report = RunReport::from_trajectory(
                &traj,
                &cfg.groups,
                &guidance,
                model.dims(),
                cfg.model.seed,
                true,
            )?;
            let last = report.final_step().expect("at least one step");
            Ok(AblationRun {
                tau,
                seed,
                binding_score: last.binding_score,
                separation_score: last.separation_score,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    runs.sort_by(|a, b| a.tau.total_cmp(&b.tau).then(a.seed.cmp(&b.seed)));

    let mut taus: Vec<f64> = grid.to_vec();
    taus.sort_by(f64::total_cmp);
    let rows = taus
        .iter()
        .map(|&tau| {
            let mine = || runs.iter().filter(move |r| r.tau == tau);
            AblationRow {
                tau,
                seeds: mine().count(),
                mean_binding_score: mean(mine().map(|r| r.binding_score)),
                mean_separation_score: mean(mine().map(|r| r.separation_score)),
            }
        })
        .collect();
    Ok(AblationTable {
        runs_executed: executed.into_inner(),
        rows,
        runs,
    })
}

pub const GRADCHECK_POINTS: usize = 10;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Result at one sampled latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckPoint {
    pub point: usize,
    pub seed: u64,
    /// Worst coordinate of the first step's loss (no previous maps).
    pub first_step: GradComparison,
    /// Worst coordinate of the following step's loss (with previous maps).
    pub next_step: GradComparison,
}

impl GradcheckPoint {
    pub fn worst(&self) -> &GradComparison {
        if self.next_step.max_rel_error > self.first_step.max_rel_error {
            &self.next_step
        } else {
            &self.first_step
        }
    }

    pub fn passed(&self) -> bool {
        self.worst().max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Compare tape gradients of the guidance loss against extended-precision
/// central differences at [`GRADCHECK_POINTS`] latents.
///
/// Point `k` starts from the sampler's initial latent for seed `seed + k`.
/// The loss is checked there without previous maps, and again one plain DDIM
/// step later with the first step's maps as the previous maps. `perturb`
/// edits each autodiff gradient before comparison; it exists to prove the
/// check can fail.
pub fn gradcheck(
    cfg: &RunConfig,
    perturb: &dyn Fn(&mut Vec<f64>),
) -> CliResult<Vec<GradcheckPoint>> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let loss = cfg.guidance.loss();
    let total = cfg.guidance.total_steps;
    let compare =
        |z: &Tensor, t: usize, prev: Option<&AttentionMaps>| -> CliResult<GradComparison> {
            let (_, grad, _) = guidance_gradient(&model, z, t, prev, &cfg.groups, loss)?;
            let mut data = grad.into_data();
            perturb(&mut data);
            let autodiff = Tensor::new(z.shape().to_vec(), data)?;
            let oracle = LossOracle::new(&model, z, prev, &cfg.groups, loss)?;
            let fd = finite_diff_grad(|x| oracle.eval(x), z, GRADCHECK_STEP)?;
            Ok(compare_gradients(&autodiff, &fd)?)
        };
    (0..GRADCHECK_POINTS)
        .map(|point| {
            let seed = cfg.guidance.seed.wrapping_add(point as u64);
            let z_first = model.initial_latent(seed);
            let pred = model.predict(&z_first, total)?;
            let first_step = compare(&z_first, total, None)?;
            let z_next = ddim_step(&z_first, &pred.eps, model.schedule(), total)?;
            let next_step = compare(&z_next, total.saturating_sub(1), Some(&pred.maps))?;
            Ok(GradcheckPoint {
                point,
                seed,
                first_step,
                next_step,
            })
        })
        .collect()
}
