//! Desk-scale model-merging toolkit for decoder-only transformer
//! checkpoints: reasoning-aware null-space projection of an instruction
//! task vector, instruction-attention-guided coefficient solving, baseline
//! merge algorithms, subspace diagnostics, and the metrics to verify the
//! mechanism.
//!
//! Pipeline shape:
//!
//! ```text
//! gen-toy ──► (θ_B, θ_R, θ_I) + calibration corpora
//! stage1  ──► feature Grams at thinking tokens ─► projector ─► Δ⊥
//! stage2  ──► attention alignment/leakage on θ_R + Δ⊥ ─► per-head α̃
//! merge   ──► θ_⋆ = θ_R + λ ⊕ α⋆ Δ⊥   (or a baseline recipe)
//! eval    ──► think-KL, attention score, end-think rate
//! ```
//!
//! All merge arithmetic runs in f64; checkpoints store f32.

pub mod attncoef;
pub mod calibration;
pub mod error;
pub mod linalg;
pub mod merger;
pub mod metrics;
pub mod nanoformer;
pub mod nullproj;
pub mod tensorstore;
pub mod vectors;

pub use attncoef::{
    accumulate_stats, qp_objective, solve_coefficients, CoefficientMap, HeadStats, SpanSets,
    StageTwoConfig,
};
pub use calibration::{
    extract_think_positions, gen_toy_corpora, gen_toy_triple, load_instruction_set,
    load_reasoning_set, CorpusProfile, InstructionSample, ReasoningSample, SpecialTokenRegistry,
    ToyProfile, ToyTriple,
};
pub use error::{Error, Result};
pub use merger::{
    dare_drop, karcher_merge, rain_assemble, run_recipe, slerp_merge, task_arithmetic, ties_trim,
    MergeInputs, MergeMethod, MergeRecipe,
};
pub use metrics::{attn_score, endthink_rate, kl_bound_check, l_think, AttnScoreReport, ThinkKlReport};
pub use nanoformer::{
    forward, greedy_decode, next_token_log_softmax, CapturePoint, CaptureSite, ForwardTrace, Model,
    TokenSequence,
};
pub use nullproj::{
    build_projector, collect_think_grams, project_task_vector, verify_annihilation,
    FeatureGramStore, ProjectedTaskVector, Projector, ProjectorMode,
};
pub use tensorstore::{
    canonical_schema, read_checkpoint, write_checkpoint, Checkpoint, ModelConfig, Tensor,
};
pub use vectors::{
    apply_delta, extract_task_vector, principal_subspace_similarity, read_task_vector,
    write_task_vector, SubmoduleId, SubmoduleKind, SubspaceReport, TaskVector,
};
