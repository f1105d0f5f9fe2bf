//! Contrastive sequential diffusion at desk scale.
//!
//! A synthetic corpus of step-by-step tasks is generated by [`synthio`]; a
//! dual encoder ([`embedder`]) embeds captions and scenes; a rule-based
//! [`captioner`] makes step texts self-contained; a small pixel-space
//! [`diffuser`] generates candidate scenes seeded from early latents of
//! earlier steps; a contrastive [`selector`] picks one candidate per step.
//! [`pipeline`] ties these together and [`eval`] holds metrics and ablations.

pub mod captioner;
pub mod diffuser;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod selector;
pub mod synthio;

pub use error::{Error, Result};
