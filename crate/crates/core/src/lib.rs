//! Unpaired vision-language pre-training with cross-modal CutMix, at desk
//! scale: patch gallery, concept-grounded patch substitution, masking, a
//! small transformer with a hand-written backward pass, the three training
//! objectives, and a synthetic benchmark for checking alignment.

pub mod detections;
pub mod error;
pub mod gallery;
pub mod losses;
pub mod masking;
pub mod model;
pub mod seeding;
pub mod synthbench;
pub mod tavp;
pub mod textproc;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
