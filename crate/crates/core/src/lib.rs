//! Modality-aware contrastive learning at desk scale.
//!
//! The crate provides the masked contrastive objective (InfoNCE restricted
//! to candidates sharing the positive's modality signature), standard and
//! bidirectional InfoNCE with analytic gradients, a toy per-signature linear
//! encoder, a synthetic dataset generator with a tunable modal gap, a
//! retrieval evaluator, and an ablation harness tying them together.

pub mod batch;
mod ddouble;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod harness;
pub mod io_store;
pub mod loss;
pub mod math;
pub mod modality;
pub mod synthgen;

pub use batch::{assemble_batch, random_samples, Batch, BatchOptions, CandidateSource, Sample};
pub use encoder::{train, EncoderParams, RawItem, TrainConfig, TrainLog, TrainingExample};
pub use error::{Error, Result};
pub use eval::{evaluate, rank_candidates, recall_at_k, RetrievalReport, TaggedEmbedding};
pub use harness::{
    run_composition_sweep, run_hard_negative_ablation, run_mamcl_ablation, ExperimentReport,
    ExperimentSpec,
};
pub use loss::{
    bidirectional_infonce_loss, compute_loss, gradient_check, infonce_loss, mamcl_loss,
    similarity_matrix, GradCheckReport, LossConfig, LossKind, LossResult, SimilarityMatrix,
};
pub use math::{cosine, l2_normalize, log_sum_exp, Embedding};
pub use modality::{build_mask, signature_of, MaskMatrix, Modality, ModalitySignature};
pub use synthgen::{generate, SynthConfig, SynthDataset};
