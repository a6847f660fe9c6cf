//! Toy differentiable denoiser, deterministic DDIM backward process and
//! contrastive latent guidance.
//!
//! Step index `i` runs from 0 (noisiest) to `T - 1`; it denoises timestep
//! `t = T - i` into `t - 1`. At each step below the cutoff the latent is
//! pushed down the gradient of the contrastive loss before the DDIM update.
//! At refinement steps the loss/update cycle repeats `refine_iters` times,
//! recomputing attention from the freshly updated latent each time.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention_on_tape, AttentionMaps, ProjectionWeights, TextEmbedding};
use crate::error::{Error, Result};
use crate::loss::{conform_loss_on_tape, LossConfig};
use crate::numerics::{derived, Tape, Tensor, Var};
use crate::pairing::TokenGroups;

/// Shape of the toy model: latent `h × w × c`, attention width `d`,
/// `l` text tokens of width `d_text`.
///
/// Missing fields deserialize to their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: usize,
    pub l: usize,
    pub d_text: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            h: 16,
            w: 16,
            c: 4,
            d: 8,
            l: 8,
            d_text: 16,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.h", self.h),
            ("model.w", self.w),
            ("model.c", self.c),
            ("model.d", self.d),
            ("model.l", self.l),
            ("model.d_text", self.d_text),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be ≥ 1"));
            }
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.h, self.w, self.c]
    }
}

/// Linear β schedule from 1e-4 to 0.02 and its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `ᾱ_t` for `t = 0..=T`, with `ᾱ_0 = 1`.
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub const BETA_START: f64 = 1e-4;
    pub const BETA_END: f64 = 0.02;

    pub fn linear(total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::config("total_steps", "must be ≥ 1"));
        }
        let mut alphas_cumprod = Vec::with_capacity(total_steps + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for s in 0..total_steps {
            let frac = if total_steps == 1 {
                0.0
            } else {
                s as f64 / (total_steps - 1) as f64
            };
            let beta = Self::BETA_START + frac * (Self::BETA_END - Self::BETA_START);
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Ok(NoiseSchedule { alphas_cumprod })
    }

    pub fn total_steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    /// `ᾱ_t`, `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }
}

/// Deterministic DDIM update from timestep `t` to `t - 1` given the noise
/// prediction for `z`.
pub fn ddim_step(z: &Tensor, eps: &Tensor, schedule: &NoiseSchedule, t: usize) -> Result<Tensor> {
    if t == 0 || t > schedule.total_steps() {
        return Err(Error::Index {
            index: t,
            extent: schedule.total_steps() + 1,
        });
    }
    let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let (sa, sn) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_prev, sn_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    z.zip_with(eps, "ddim_step", |z, e| {
        let z0 = (z - sn * e) / sa;
        sa_prev * z0 + sn_prev * e
    })
}

/// `z − α·∇`.
pub fn latent_update(z: &Tensor, grad: &Tensor, alpha: f64) -> Result<Tensor> {
    z.zip_with(grad, "latent_update", |z, g| z - alpha * g)
}

/// Output of one forward pass of the toy denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eps: Tensor,
    pub maps: AttentionMaps,
}

/// Single cross-attention block standing in for a text-conditioned noise
/// predictor: `ε̂ = (A · E W_V) W_O` with `A` the pixel-to-token attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dims: ModelDims,
    seed: u64,
    text: TextEmbedding,
    projections: ProjectionWeights,
    w_v: Tensor,
    w_o: Tensor,
    schedule: NoiseSchedule,
}

impl ToyModel {
    /// Standard deviation of query logits for unit-variance latents.
    pub const QUERY_GAIN: f64 = 2.0;
    pub const OUTPUT_GAIN: f64 = 1.0;

    /// Weights and embedding fully determined by `seed`.
    pub fn from_seed(dims: ModelDims, seed: u64, total_steps: usize) -> Result<Self> {
        dims.validate()?;
        let text = TextEmbedding::random(dims.l, dims.d_text, &mut derived(seed, 1))?;
        let w_q = Tensor::randn(&[dims.c, dims.d], &mut derived(seed, 2))
            .scale(Self::QUERY_GAIN / (dims.c as f64).sqrt())?;
        let w_k = Tensor::randn(&[dims.d_text, dims.d], &mut derived(seed, 3));
        let w_v = Tensor::randn(&[dims.d_text, dims.d], &mut derived(seed, 4));
        let w_o = Tensor::randn(&[dims.d, dims.c], &mut derived(seed, 5))
            .scale(Self::OUTPUT_GAIN / (dims.d as f64).sqrt())?;
        Ok(ToyModel {
            dims,
            seed,
            text,
            projections: ProjectionWeights::new(w_q, w_k)?,
            w_v,
            w_o,
            schedule: NoiseSchedule::linear(total_steps)?,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn text(&self) -> &TextEmbedding {
        &self.text
    }

    pub fn projections(&self) -> &ProjectionWeights {
        &self.projections
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Replace the output projection.
    pub fn with_output_weights(mut self, w_o: Tensor) -> Result<Self> {
        if w_o.shape() != self.w_o.shape() {
            return Err(Error::dim(
                "with_output_weights",
                self.w_o.shape(),
                w_o.shape(),
            ));
        }
        self.w_o = w_o;
        Ok(self)
    }

    /// Replace the query projection.
    pub fn with_query_weights(mut self, w_q: Tensor) -> Result<Self> {
        self.projections = ProjectionWeights::new(w_q, self.projections.w_k.clone())?;
        Ok(self)
    }

    /// Record the forward pass; returns `(ε̂ as h × w × c, attention as (h·w) × l)`.
    pub fn predict_on_tape(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let ModelDims { h, w, c, .. } = self.dims;
        if tape.shape(z) != [h, w, c] {
            return Err(Error::dim("predict", tape.shape(z), &[h, w, c]));
        }
        let attn = cross_attention_on_tape(tape, z, &self.text, &self.projections)?;
        let values = tape.constant(self.text.tokens().matmul(&self.w_v)?);
        let w_o = tape.constant(self.w_o.clone());
        let mixed = tape.matmul(attn, values)?;
        let eps = tape.matmul(mixed, w_o)?;
        let eps = tape.reshape(eps, &[h, w, c])?;
        Ok((eps, attn))
    }

    pub fn predict(&self, z: &Tensor, t: usize) -> Result<Prediction> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (eps, attn) = self.predict_on_tape(&mut tape, zv)?;
        let ModelDims { h, w, l, .. } = self.dims;
        Ok(Prediction {
            eps: tape.value(eps).clone(),
            maps: AttentionMaps::new(h, w, l, t, tape.value(attn))?,
        })
    }

    /// Seeded standard-normal starting latent `z_T`.
    pub fn initial_latent(&self, seed: u64) -> Tensor {
        Tensor::randn(&self.dims.latent_shape(), &mut derived(seed, 0))
    }
}

/// Hyper-parameters of the guided backward process. Missing fields
/// deserialize to their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub tau: f64,
    pub alpha: f64,
    pub total_steps: usize,
    pub refine_at: BTreeSet<usize>,
    pub refine_iters: usize,
    pub cutoff_step: usize,
    pub seed: u64,
    /// Include features from the previous timestep's maps.
    pub cross_timestep: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            tau: 0.5,
            alpha: 20.0,
            total_steps: 50,
            refine_at: BTreeSet::from([0, 10, 20]),
            refine_iters: 5,
            cutoff_step: 25,
            seed: 0,
            cross_timestep: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        LossConfig::new(self.tau)?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config(
                "alpha",
                format!("must be ≥ 0, got {}", self.alpha),
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be ≥ 1"));
        }
        if let Some(&bad) = self.refine_at.iter().find(|&&s| s >= self.total_steps) {
            return Err(Error::config(
                "refine_at",
                format!("step {bad} outside [0, {})", self.total_steps),
            ));
        }
        if self.cutoff_step > self.total_steps {
            return Err(Error::config(
                "cutoff_step",
                format!(
                    "{} exceeds total_steps {}",
                    self.cutoff_step, self.total_steps
                ),
            ));
        }
        if self.refine_iters == 0 {
            return Err(Error::config("refine_iters", "must be ≥ 1"));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { tau: self.tau }
    }

    /// Loss/update cycles performed at step `i`.
    pub fn updates_at(&self, step: usize) -> usize {
        if step >= self.cutoff_step {
            0
        } else if self.refine_at.contains(&step) {
            self.refine_iters
        } else {
            1
        }
    }

    /// Guidance disabled: no step size and no refinement.
    pub fn unguided(&self) -> Self {
        GuidanceConfig {
            alpha: 0.0,
            refine_at: BTreeSet::new(),
            ..self.clone()
        }
    }
}

/// Latent entering step `step_index`, with the attention of the step before.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub step_index: usize,
    pub prev_maps: Option<AttentionMaps>,
}

/// What happened during one backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step_index: usize,
    pub timestep: usize,
    /// Latent after the DDIM update.
    pub latent: Tensor,
    /// Attention of the final prediction at this step.
    pub maps: AttentionMaps,
    /// Every loss value evaluated at this step, in order.
    pub losses: Vec<f64>,
}

impl StepRecord {
    /// Last loss evaluated at this step.
    pub fn loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: Tensor,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn final_latent(&self) -> &Tensor {
        self.steps.last().map_or(&self.initial, |s| &s.latent)
    }

    pub fn final_maps(&self) -> Option<&AttentionMaps> {
        self.steps.last().map(|s| &s.maps)
    }
}

/// Notifications emitted while sampling.
#[derive(Debug)]
pub enum Event<'a> {
    /// A loss evaluation: `iteration` counts from 0 within the step.
    Loss {
        step: usize,
        iteration: usize,
        value: f64,
        maps: &'a AttentionMaps,
    },
    Step(&'a StepRecord),
}

/// Loss at `z`, its gradient with respect to `z`, and the maps it used.
pub fn guidance_gradient(
    model: &ToyModel,
    z: &Tensor,
    timestep: usize,
    previous: Option<&AttentionMaps>,
    groups: &TokenGroups,
    loss: LossConfig,
) -> Result<(f64, Tensor, AttentionMaps)> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let (_, attn) = model.predict_on_tape(&mut tape, zv)?;
    let value = conform_loss_on_tape(&mut tape, attn, previous, groups, loss)?;
    let grads = tape.backward(value)?;
    let ModelDims { h, w, l, .. } = model.dims;
    Ok((
        tape.value(value).item()?,
        grads.wrt(zv),
        AttentionMaps::new(h, w, l, timestep, tape.value(attn))?,
    ))
}

/// Loss only, no gradient.
pub fn guidance_loss(
    model: &ToyModel,
    z: &Tensor,
    previous: Option<&AttentionMaps>,
    groups: &TokenGroups,
    loss: LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let (_, attn) = model.predict_on_tape(&mut tape, zv)?;
    let value = conform_loss_on_tape(&mut tape, attn, previous, groups, loss)?;
    tape.value(value).item()
}

/// One backward step with guidance.
pub fn denoise_step(
    model: &ToyModel,
    state: &LatentState,
    groups: &TokenGroups,
    cfg: &GuidanceConfig,
) -> Result<StepRecord> {
    denoise_step_observed(model, state, groups, cfg, &mut |_| {})
}

pub fn denoise_step_observed(
    model: &ToyModel,
    state: &LatentState,
    groups: &TokenGroups,
    cfg: &GuidanceConfig,
    observer: &mut dyn FnMut(Event<'_>),
) -> Result<StepRecord> {
    let total = model.schedule.total_steps();
    let step = state.step_index;
    if step >= total || step >= cfg.total_steps {
        return Err(Error::Contract(format!(
            "step index {step} beyond {} steps",
            cfg.total_steps.min(total)
        )));
    }
    let timestep = total - step;
    let previous = if cfg.cross_timestep {
        state.prev_maps.as_ref()
    } else {
        None
    };

    let mut z = state.z.clone();
    let mut losses = Vec::new();
    for iteration in 0..cfg.updates_at(step) {
        let (value, grad, maps) =
            guidance_gradient(model, &z, timestep, previous, groups, cfg.loss())
                .map_err(|e| e.at_step(step))?;
        observer(Event::Loss {
            step,
            iteration,
            value,
            maps: &maps,
        });
        losses.push(value);
        z = latent_update(&z, &grad, cfg.alpha).map_err(|e| e.at_step(step))?;
    }

    let pred = model.predict(&z, timestep).map_err(|e| e.at_step(step))?;
    let latent =
        ddim_step(&z, &pred.eps, &model.schedule, timestep).map_err(|e| e.at_step(step))?;
    let record = StepRecord {
        step_index: step,
        timestep,
        latent,
        maps: pred.maps,
        losses,
    };
    observer(Event::Step(&record));
    Ok(record)
}

/// Full guided backward process from the seeded `z_T`.
pub fn guided_sample(
    model: &ToyModel,
    groups: &TokenGroups,
    cfg: &GuidanceConfig,
) -> Result<Trajectory> {
    guided_sample_observed(model, groups, cfg, &mut |_| {})
}

pub fn guided_sample_observed(
    model: &ToyModel,
    groups: &TokenGroups,
    cfg: &GuidanceConfig,
    observer: &mut dyn FnMut(Event<'_>),
) -> Result<Trajectory> {
    cfg.validate()?;
    check_model_matches(model, cfg)?;
    groups.validate_for(model.dims.l)?;

    let initial = model.initial_latent(cfg.seed);
    let mut state = LatentState {
        z: initial.clone(),
        step_index: 0,
        prev_maps: None,
    };
    let mut steps = Vec::with_capacity(cfg.total_steps);
    for _ in 0..cfg.total_steps {
        let record = denoise_step_observed(model, &state, groups, cfg, observer)?;
        state = LatentState {
            z: record.latent.clone(),
            step_index: record.step_index + 1,
            prev_maps: Some(record.maps.clone()),
        };
        steps.push(record);
    }
    Ok(Trajectory { initial, steps })
}

/// Plain DDIM with no guidance machinery at all.
pub fn ddim_sample(model: &ToyModel, seed: u64) -> Result<Trajectory> {
    let total = model.schedule.total_steps();
    let initial = model.initial_latent(seed);
    let mut z = initial.clone();
    let mut steps = Vec::with_capacity(total);
    for step in 0..total {
        let timestep = total - step;
        let pred = model.predict(&z, timestep)?;
        z = ddim_step(&z, &pred.eps, &model.schedule, timestep)?;
        steps.push(StepRecord {
            step_index: step,
            timestep,
            latent: z.clone(),
            maps: pred.maps,
            losses: Vec::new(),
        });
    }
    Ok(Trajectory { initial, steps })
}

fn check_model_matches(model: &ToyModel, cfg: &GuidanceConfig) -> Result<()> {
    if model.schedule.total_steps() != cfg.total_steps {
        return Err(Error::config(
            "total_steps",
            format!(
                "model schedule has {} steps, config asks for {}",
                model.schedule.total_steps(),
                cfg.total_steps
            ),
        ));
    }
    Ok(())
}

/// Result of a backtracking line search along the negative gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Backtrack {
    pub z: Tensor,
    pub alpha: f64,
    pub halvings: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Update with the largest `α / 2^k` (`k ≤ 30`) that strictly lowers the loss.
///
/// Returns `Ok(None)` when the gradient is exactly zero.
pub fn backtracked_update(
    model: &ToyModel,
    z: &Tensor,
    previous: Option<&AttentionMaps>,
    groups: &TokenGroups,
    loss: LossConfig,
    alpha: f64,
) -> Result<Option<Backtrack>> {
    const MAX_HALVINGS: usize = 30;
    let (before, grad, _) = guidance_gradient(model, z, 0, previous, groups, loss)?;
    if grad.data().iter().all(|&g| g == 0.0) {
        return Ok(None);
    }
    let mut step = alpha;
    for halvings in 0..=MAX_HALVINGS {
        let candidate = latent_update(z, &grad, step)?;
        let after = guidance_loss(model, &candidate, previous, groups, loss)?;
        if after < before {
            return Ok(Some(Backtrack {
                z: candidate,
                alpha: step,
                halvings,
                loss_before: before,
                loss_after: after,
            }));
        }
        step *= 0.5;
    }
    Err(Error::Contract(format!(
        "no decrease after {MAX_HALVINGS} halvings from alpha {alpha}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::TokenGroup;

    fn groups() -> TokenGroups {
        TokenGroups::new(vec![TokenGroup::new(2, [1]), TokenGroup::new(5, [4])]).unwrap()
    }

    fn small(total: usize) -> ToyModel {
        ToyModel::from_seed(
            ModelDims {
                h: 4,
                w: 4,
                c: 2,
                d: 4,
                l: 6,
                d_text: 5,
            },
            3,
            total,
        )
        .unwrap()
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::linear(50).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(NoiseSchedule::linear(1).is_ok());
    }

    #[test]
    fn latent_update_examples() {
        let z = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        assert_eq!(latent_update(&z, &g, 20.0).unwrap().data(), &[-9.0, 12.0]);
        assert_eq!(latent_update(&z, &Tensor::zeros(&[2]), 20.0).unwrap(), z);
        assert_eq!(latent_update(&z, &g, 0.0).unwrap(), z);
        assert!(matches!(
            latent_update(&z, &Tensor::zeros(&[3]), 1.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn predict_shapes_and_zero_output() {
        let model = ToyModel::from_seed(ModelDims::default(), 0, 50).unwrap();
        let z = model.initial_latent(1);
        let p = model.predict(&z, 50).unwrap();
        assert_eq!(p.eps.shape(), &[16, 16, 4]);
        assert_eq!(p.maps.tensor().shape(), &[16, 16, 8]);
        assert_eq!(model.predict(&z, 50).unwrap(), p);

        let zeroed = model
            .clone()
            .with_output_weights(Tensor::zeros(&[8, 4]))
            .unwrap();
        let p0 = zeroed.predict(&z, 50).unwrap();
        assert!(p0.eps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ddim_with_alpha_bar_one_is_identity() {
        let s = NoiseSchedule::linear(3).unwrap();
        let z = Tensor::new(vec![2], vec![0.4, -1.0]).unwrap();
        let out = ddim_step(&z, &Tensor::zeros(&[2]), &s, 1).unwrap();
        // eps = 0 → z_{t-1} = sqrt(ᾱ_{t-1}/ᾱ_t) z
        let r = (s.alpha_bar(0) / s.alpha_bar(1)).sqrt();
        assert!((out.data()[0] - 0.4 * r).abs() < 1e-15);
        assert!(ddim_step(&z, &z, &s, 0).is_err());
    }

    #[test]
    fn loss_counts_per_step() {
        let model = small(8);
        let cfg = GuidanceConfig {
            total_steps: 8,
            refine_at: BTreeSet::from([0, 3]),
            refine_iters: 3,
            cutoff_step: 5,
            ..GuidanceConfig::default()
        };
        let traj = guided_sample(&model, &groups(), &cfg).unwrap();
        let counts: Vec<_> = traj.steps.iter().map(|s| s.losses.len()).collect();
        assert_eq!(counts, [3, 1, 1, 3, 1, 0, 0, 0]);
    }

    #[test]
    fn cutoff_leaves_latent_untouched() {
        let model = small(4);
        let cfg = GuidanceConfig {
            total_steps: 4,
            refine_at: BTreeSet::new(),
            cutoff_step: 0,
            ..GuidanceConfig::default()
        };
        let guided = guided_sample(&model, &groups(), &cfg).unwrap();
        let plain = ddim_sample(&model, cfg.seed).unwrap();
        assert_eq!(guided, plain);
    }

    #[test]
    fn single_step_run() {
        let model = small(1);
        let cfg = GuidanceConfig {
            total_steps: 1,
            refine_at: BTreeSet::new(),
            cutoff_step: 1,
            ..GuidanceConfig::default()
        };
        let traj = guided_sample(&model, &groups(), &cfg).unwrap();
        assert_eq!(traj.steps.len(), 1);
        assert_eq!(traj.steps[0].timestep, 1);
    }

    #[test]
    fn config_validation() {
        let ok = GuidanceConfig::default();
        assert!(ok.validate().is_ok());
        let bad = |f: fn(&mut GuidanceConfig)| {
            let mut c = ok.clone();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert!(matches!(
            bad(|c| c.tau = 0.0),
            Error::Config { field: "tau", .. }
        ));
        assert!(matches!(
            bad(|c| c.alpha = -1.0),
            Error::Config { field: "alpha", .. }
        ));
        assert!(matches!(
            bad(|c| c.total_steps = 0),
            Error::Config {
                field: "total_steps",
                ..
            }
        ));
        assert!(matches!(
            bad(|c| {
                c.refine_at.insert(50);
            }),
            Error::Config {
                field: "refine_at",
                ..
            }
        ));
        assert!(matches!(
            bad(|c| c.cutoff_step = 51),
            Error::Config {
                field: "cutoff_step",
                ..
            }
        ));
        assert!(matches!(
            bad(|c| c.refine_iters = 0),
            Error::Config {
                field: "refine_iters",
                ..
            }
        ));
    }

    #[test]
    fn pairing_errors_carry_step_context() {
        let model = small(3);
        let one = TokenGroups::new(vec![TokenGroup::new(1, [2])]).unwrap();
        let cfg = GuidanceConfig {
            total_steps: 3,
            refine_at: BTreeSet::new(),
            cutoff_step: 3,
            ..GuidanceConfig::default()
        };
        let err = guided_sample(&model, &one, &cfg).unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 0, .. }));
        assert_eq!(err.root(), &Error::NoNegatives(0));
    }
}
