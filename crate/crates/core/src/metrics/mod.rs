//! Attention-map quality scores, run reports and finite-difference
//! gradient oracles.
//!
//! All three scores are means of cosine similarities between token maps
//! flattened row-major; for softmax outputs they fall in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMaps;
use crate::error::{Error, Result};
use crate::loss::cosine_sim;
use crate::numerics::{Dd, Tensor};
use crate::pairing::TokenGroups;
use crate::sampler::{GuidanceConfig, ModelDims, Trajectory};

mod oracle;

pub use oracle::{check_guidance_gradient, FdValue, LossOracle};

fn token_maps(a: &AttentionMaps, groups: &TokenGroups) -> Result<Vec<Vec<Tensor>>> {
    groups.validate_for(a.l)?;
    groups
        .groups()
        .iter()
        .map(|g| g.tokens().map(|t| a.token_map(t)).collect())
        .collect()
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean similarity between tokens of the same group. Higher means attributes
/// sit on their subject.
pub fn binding_score(a: &AttentionMaps, groups: &TokenGroups) -> Result<f64> {
    let maps = token_maps(a, groups)?;
    let mut sims = Vec::new();
    for group in &maps {
        for (i, u) in group.iter().enumerate() {
            for (j, v) in group.iter().enumerate() {
                if i != j {
                    sims.push(cosine_sim(u.data(), v.data())?);
                }
            }
        }
    }
    mean(&sims).ok_or(Error::UndefinedMetric(
        "binding score needs a group with two tokens",
    ))
}

/// Mean similarity between tokens of different groups. Lower means better
/// separated subjects.
pub fn separation_score(a: &AttentionMaps, groups: &TokenGroups) -> Result<f64> {
    let maps = token_maps(a, groups)?;
    let mut sims = Vec::new();
    for (gi, gu) in maps.iter().enumerate() {
        for (gj, gv) in maps.iter().enumerate() {
            if gi == gj {
                continue;
            }
            for u in gu {
                for v in gv {
                    sims.push(cosine_sim(u.data(), v.data())?);
                }
            }
        }
    }
    mean(&sims).ok_or(Error::UndefinedMetric("separation score needs two groups"))
}

/// One minus the mean similarity of each grouped token's map with its map
/// from the previous timestep. Zero means perfectly stable attention.
pub fn scatter_score(
    current: &AttentionMaps,
    previous: &AttentionMaps,
    groups: &TokenGroups,
) -> Result<f64> {
    if !current.same_layout(previous) {
        return Err(Error::dim(
            "scatter_score",
            &[current.h, current.w, current.l],
            &[previous.h, previous.w, previous.l],
        ));
    }
    groups.validate_for(current.l)?;
    let sims = groups
        .labelled_tokens()
        .map(|(_, t)| cosine_sim(current.token_map(t)?.data(), previous.token_map(t)?.data()))
        .collect::<Result<Vec<_>>>()?;
    Ok(1.0 - mean(&sims).expect("groups are non-empty"))
}

/// Central differences `(f(z + h·e_k) − f(z − h·e_k)) / 2h` for every coordinate.
///
/// The divisor is the step actually taken after rounding `z_k ± h`, computed
/// exactly. `f` may return `f64` or [`Dd`] values.
pub fn finite_diff_grad<F, V>(mut f: F, z: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<V>,
    V: FdValue,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Oracle(format!("step h must be positive, got {h}")));
    }
    let mut eval = |x: Vec<f64>| -> Result<V> {
        let t = Tensor::new(z.shape().to_vec(), x).map_err(|e| Error::Oracle(e.to_string()))?;
        let v = f(&t).map_err(|e| Error::Oracle(e.to_string()))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Oracle(format!("f returned {v:?}")))
        }
    };
    let mut grad = Vec::with_capacity(z.len());
    for k in 0..z.len() {
        let mut plus = z.data().to_vec();
        plus[k] += h;
        let mut minus = z.data().to_vec();
        minus[k] -= h;
        let step = Dd::from(plus[k]) - Dd::from(minus[k]);
        grad.push(V::quotient(eval(plus)?, eval(minus)?, step));
    }
    Tensor::new(z.shape().to_vec(), grad)
}

/// Worst coordinate of an autodiff/finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradComparison {
    /// `max_k |ad_k − fd_k| / (|fd_k| + 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
}

pub fn compare_gradients(autodiff: &Tensor, finite_diff: &Tensor) -> Result<GradComparison> {
    if autodiff.shape() != finite_diff.shape() {
        return Err(Error::dim(
            "compare_gradients",
            autodiff.shape(),
            finite_diff.shape(),
        ));
    }
    let mut worst = GradComparison {
        max_rel_error: 0.0,
        worst_index: 0,
        autodiff: 0.0,
        finite_diff: 0.0,
    };
    for (k, (&a, &f)) in autodiff.data().iter().zip(finite_diff.data()).enumerate() {
        let rel = (a - f).abs() / (f.abs() + 1e-8);
        if k == 0 || rel > worst.max_rel_error {
            worst = GradComparison {
                max_rel_error: rel,
                worst_index: k,
                autodiff: a,
                finite_diff: f,
            };
        }
    }
    Ok(worst)
}

/// Per-step scores of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub timestep: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    pub loss_evaluations: usize,
    pub binding_score: Option<f64>,
    pub separation_score: Option<f64>,
    pub scatter_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub guided: bool,
    pub guidance: GuidanceConfig,
    pub model: ModelDims,
    pub model_seed: u64,
    pub groups: TokenGroups,
    pub steps: Vec<StepReport>,
    pub final_maps: Option<AttentionMaps>,
}

impl RunReport {
    pub fn from_trajectory(
        traj: &Trajectory,
        groups: &TokenGroups,
        guidance: &GuidanceConfig,
        model: ModelDims,
        model_seed: u64,
        guided: bool,
    ) -> Result<Self> {
        let mut steps = Vec::with_capacity(traj.steps.len());
        let mut previous: Option<&AttentionMaps> = None;
        for rec in &traj.steps {
            steps.push(StepReport {
                step: rec.step_index,
                timestep: rec.timestep,
                loss: rec.loss(),
                loss_evaluations: rec.losses.len(),
                binding_score: defined(binding_score(&rec.maps, groups))?,
                separation_score: defined(separation_score(&rec.maps, groups))?,
                scatter_score: previous
                    .map(|p| scatter_score(&rec.maps, p, groups))
                    .transpose()?,
            });
            previous = Some(&rec.maps);
        }
        Ok(RunReport {
            seed: guidance.seed,
            guided,
            guidance: guidance.clone(),
            model,
            model_seed,
            groups: groups.clone(),
            steps,
            final_maps: traj.final_maps().cloned(),
        })
    }

    pub fn final_step(&self) -> Option<&StepReport> {
        self.steps.last()
    }

    /// Mean scatter over steps before `cutoff` where it is defined.
    pub fn mean_scatter_before(&self, cutoff: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.step < cutoff)
            .filter_map(|s| s.scatter_score)
            .collect();
        mean(&vals)
    }
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::TokenGroup;

    /// Maps with 4 pixels and the given per-token columns.
    fn maps(cols: &[[f64; 4]]) -> AttentionMaps {
        let slices: Vec<Tensor> = cols
            .iter()
            .map(|c| Tensor::new(vec![2, 2], c.to_vec()).unwrap())
            .collect();
        AttentionMaps::from_token_maps(&slices, 0).unwrap()
    }

    fn two_pairs() -> TokenGroups {
        TokenGroups::new(vec![TokenGroup::new(0, [1]), TokenGroup::new(2, [3])]).unwrap()
    }

    const E0: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
    const E1: [f64; 4] = [0.0, 1.0, 0.0, 0.0];
    const E2: [f64; 4] = [0.0, 0.0, 1.0, 0.0];
    const E3: [f64; 4] = [0.0, 0.0, 0.0, 1.0];

    #[test]
    fn binding_examples() {
        let g = two_pairs();
        assert!((binding_score(&maps(&[E0, E0, E1, E1]), &g).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(binding_score(&maps(&[E0, E1, E2, E3]), &g).unwrap(), 0.0);
        // group 0 identical (sim 1), group 1 orthogonal (sim 0)
        assert!((binding_score(&maps(&[E0, E0, E2, E3]), &g).unwrap() - 0.5).abs() < 1e-15);
        let singles =
            TokenGroups::new(vec![TokenGroup::new(0, []), TokenGroup::new(1, [])]).unwrap();
        assert!(matches!(
            binding_score(&maps(&[E0, E1, E2, E3]), &singles),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn separation_examples() {
        let g = TokenGroups::new(vec![TokenGroup::new(0, []), TokenGroup::new(1, [])]).unwrap();
        assert_eq!(separation_score(&maps(&[E0, E1, E2, E3]), &g).unwrap(), 0.0);
        assert!((separation_score(&maps(&[E0, E0, E0, E0]), &g).unwrap() - 1.0).abs() < 1e-15);
        let one_group = TokenGroups::new(vec![TokenGroup::new(0, [1])]).unwrap();
        assert!(matches!(
            separation_score(&maps(&[E0, E1, E2, E3]), &one_group),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn separation_two_cross_pairs_half() {
        // group A = {0}, group B = {1, 2}; cross pairs (0,1) sim 1, (0,2) sim 0
        let g = TokenGroups::new(vec![TokenGroup::new(0, []), TokenGroup::new(1, [2])]).unwrap();
        let v = separation_score(&maps(&[E0, E0, E1, E3]), &g).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scatter_examples() {
        let g = two_pairs();
        let a = maps(&[E0, E1, E2, E3]);
        assert!(scatter_score(&a, &a, &g).unwrap().abs() < 1e-15);
        let b = maps(&[E1, E0, E3, E2]);
        assert!((scatter_score(&a, &b, &g).unwrap() - 1.0).abs() < 1e-15);

        let single = TokenGroups::new(vec![TokenGroup::new(0, [1])]).unwrap();
        // token 0: sim 1; token 1: [0,1,0,0]·[0,1,1,0]/√2 ... pick sim 0.5 via 60°
        let s = 3f64.sqrt();
        let cur = maps(&[E0, [1.0, s, 0.0, 0.0], E2, E3]);
        let prev = maps(&[E0, [1.0, 0.0, 0.0, 0.0], E2, E3]);
        // cos = 1 / 2
        assert!((scatter_score(&cur, &prev, &single).unwrap() - 0.25).abs() < 1e-15);

        let other = AttentionMaps::new(1, 4, 4, 0, &Tensor::full(&[1, 4, 4], 0.25)).unwrap();
        assert!(matches!(
            scatter_score(&a, &other, &g),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let z = Tensor::new(vec![2, 2], vec![0.1, -3.0, 2.5, 7.0]).unwrap();
        for h in [1e-5, 1e-2, 0.5] {
            let g = finite_diff_grad(|x| Ok(x.sum()), &z, h).unwrap();
            assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
            let g = finite_diff_grad(|_| Ok(4.2), &z, h).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
        let err = finite_diff_grad(|_| Ok(f64::NAN), &z, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }
}
