//! Dual attention networks for multimodal reasoning (r-DAN) and cross-modal
//! matching (m-DAN), built on a small reverse-mode differentiation core.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod mdan;
pub mod params;
pub mod rdan;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod trace;

pub use attention::{AttentionResult, Dropout, RegionSet};
pub use error::{DanError, Result};
pub use mdan::{JointEmbedding, MDan, MDanConfig, Modality, Quadruplet};
pub use params::ParamStore;
pub use rdan::{RDan, RDanConfig, VqaExample};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use text::TokenSequence;
pub use trace::AttentionTrace;
