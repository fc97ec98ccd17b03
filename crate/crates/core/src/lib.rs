//! Hallucination-aware joint training for a micro causal transformer.
//!
//! A frozen backbone carries LoRA adapters and a mid-layer MLP detection
//! head; both are optimized with a masked `CE + λ·BCE` objective over a
//! synthetic closed-domain QA corpus with exact token-level labels.

pub mod corpus;
pub mod detector;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod probes;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
