//! Window-specific 3D encoder models.
//!
//! A model is a residual squeeze-excitation encoder mapping one windowed,
//! normalized volume to a fixed-length feature vector, plus a single-logit
//! linear head. Forward and backward passes are hand-written in f64 so
//! gradients are exact, deterministic, and verifiable against finite
//! differences.

pub mod checkpoint;
pub mod encoder;
pub mod layers;
pub mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use encoder::{
    batch_from_volumes, build_encoder, Encoder, EncoderCache, EncoderConfig, EncoderState, Head,
    Provenance,
};
pub use tensor::{sigmoid, PTensor, Tensor};
