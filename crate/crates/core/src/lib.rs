//! Contrastive cross-attention guidance for diffusion latents.
//!
//! Attention maps of grouped prompt tokens (a subject and its attributes)
//! are pseudo-labelled by group, paired with the maps from the previous
//! timestep, and scored with an InfoNCE objective. The gradient of that
//! objective with respect to the latent steers each denoising step. A small
//! single-block denoiser with a deterministic DDIM sampler hosts the whole
//! loop so it can be run and checked exhaustively.

pub mod attention;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod numerics;
pub mod pairing;
pub mod sampler;

pub use attention::{cross_attention, AttentionMaps, ProjectionWeights, TextEmbedding};
pub use error::{Error, Result};
pub use loss::{conform_loss, cosine_sim, infonce, LossConfig};
pub use metrics::{binding_score, finite_diff_grad, scatter_score, separation_score, RunReport};
pub use numerics::{Tape, Tensor, Var};
pub use pairing::{build_features, enumerate_pairs, TokenGroup, TokenGroups};
pub use sampler::{
    ddim_sample, denoise_step, guided_sample, latent_update, GuidanceConfig, LatentState,
    ModelDims, ToyModel, Trajectory,
};
