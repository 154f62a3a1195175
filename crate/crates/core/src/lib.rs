//! Prompt-driven token pruning for vision-transformer feature sequences.
//!
//! An image is split into patch tokens and passed through transformer
//! encoder blocks. After selected blocks, a box prompt is pooled into region
//! features with RoIAlign, every token is scored against them with
//! entropy-weighted similarity, and low-scoring tokens are dropped (or zeroed)
//! before the remaining blocks run.
//!
//! The crate also carries the pieces needed to study that mechanism without
//! real data: seeded synthetic scenes, prompt perturbations, a FLOPs model,
//! segmentation losses and metrics, and parameter sweeps.

pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod numerics;
pub mod pipeline;
pub mod prune;
pub mod roi;
pub mod selfcheck;
pub mod sweep;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
pub use pipeline::{
    estimate_flops, perturb_prompt, run_pipeline, CostReport, Model, PerturbationKind, PipelineConfig,
    PipelineOutput, PromptPerturbation,
};
pub use prune::{prato_score, MaskMode, Projections, PruneConfig, PrunedTokens, RelevanceBundle, ThresholdPolicy};
pub use roi::BoxPrompt;
pub use sweep::{run_sweep, SweepSpec, SweepSummary};
pub use synth::{generate_scene, Scene, TargetKind};
pub use tokenizer::{GridShape, ImageTensor, TokenGrid};
