//! Humor recognition with a finetuning-style classifier head and a
//! prompting-style verbalizer head over a small text encoder, plus
//! influence-function attribution of test predictions to training examples,
//! checked against leave-one-out retraining and exact-Hessian solves.

pub mod corpus;
pub mod diffengine;
pub mod error;
pub mod harness;
pub mod influence;
mod linalg;
pub mod oracle;
pub mod stats;
pub mod textmodel;
pub mod trainer;

pub use error::{Error, Result};
