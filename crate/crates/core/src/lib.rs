//! Case-based classification with learned, edge-weighted bipolar
//! argumentation graphs.
//!
//! Labelled cases become arguments. Small neural networks produce their base
//! scores and the attack/support weights between them, a differentiable
//! gradual semantics turns the resulting graph into class scores, and every
//! prediction can be exported as the argument subgraph that produced it.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod explain;
pub mod fuzzy;
pub mod heads;
pub mod qbaf;
pub mod run;
pub mod semantics;
pub mod train;

pub use error::{Error, Result};
