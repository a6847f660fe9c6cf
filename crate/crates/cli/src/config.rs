use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use conform_core::{GuidanceConfig, ModelDims, TokenGroup, TokenGroups};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Model shape plus the seed its weights are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: usize,
    pub l: usize,
    pub d_text: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::from_dims(ModelDims::default(), 0)
    }
}

impl ModelConfig {
    pub fn from_dims(dims: ModelDims, seed: u64) -> Self {
        let ModelDims {
            h,
            w,
            c,
            d,
            l,
            d_text,
        } = dims;
        ModelConfig {
            h,
            w,
            c,
            d,
            l,
            d_text,
            seed,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            h: self.h,
            w: self.w,
            c: self.c,
            d: self.d,
            l: self.l,
            d_text: self.d_text,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a run needs. `groups` is the only required field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub groups: TokenGroups,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// The default sandbox: two subject/attribute pairs ("a red backpack and
    /// a green suitcase" with tokens 2, 3 and 6, 7).
    pub fn sandbox() -> Self {
        RunConfig {
            guidance: GuidanceConfig::default(),
            model: ModelConfig::default(),
            groups: TokenGroups::new(vec![TokenGroup::new(3, [2]), TokenGroup::new(7, [6])])
                .expect("distinct tokens"),
            output_dir: default_output_dir(),
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(CliError::config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> CliResult<()> {
        self.guidance.validate()?;
        self.model.dims().validate()?;
        self.groups.validate_for(self.model.l)?;
        Ok(())
    }

    /// Apply command-line overrides, then re-validate.
    pub fn with_overrides(mut self, o: &Overrides) -> CliResult<Self> {
        let g = &mut self.guidance;
        if let Some(v) = o.seed {
            g.seed = v;
        }
        if let Some(v) = o.tau {
            g.tau = v;
        }
        if let Some(v) = o.alpha {
            g.alpha = v;
        }
        if let Some(v) = o.steps {
            g.total_steps = v;
        }
        if let Some(v) = &o.refine_at {
            g.refine_at = v.clone();
        }
        if let Some(v) = o.refine_iters {
            g.refine_iters = v;
        }
        if let Some(v) = o.cutoff {
            g.cutoff_step = v;
        }
        if let Some(v) = &o.out_dir {
            self.output_dir = v.clone();
        }
        self.validate()?;
        Ok(self)
    }
}

/// Values given on the command line, each replacing the config field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub refine_at: Option<BTreeSet<usize>>,
    pub refine_iters: Option<usize>,
    pub cutoff: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

/// Comma-separated step indices; `none` or an empty string for no steps.
pub fn parse_step_set(s: &str) -> Result<BTreeSet<usize>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(BTreeSet::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad step index {p:?}: {e}"))
        })
        .collect()
}

/// Comma-separated temperatures, each positive and finite.
pub fn parse_tau_grid(s: &str) -> CliResult<Vec<f64>> {
    let mut grid = Vec::new();
    for p in s.split(',') {
        let tau: f64 = p
            .trim()
            .parse()
            .map_err(|e| CliError::config(format!("tau-grid: bad value {p:?}: {e}")))?;
        if !(tau.is_finite() && tau > 0.0) {
            return Err(CliError::config(format!(
                "tau-grid: tau must be > 0, got {tau}"
            )));
        }
        if grid.contains(&tau) {
            return Err(CliError::config(format!("tau-grid: duplicate value {tau}")));
        }
        grid.push(tau);
    }
    Ok(grid)
}
