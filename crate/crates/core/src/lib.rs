//! Progressive modality freezing (PMF) for multi-modal knowledge-graph
//! entity alignment.
//!
//! Entities of two knowledge graphs are encoded per modality (structure,
//! relation bag, attribute bag, image vector). Each epoch, modality features
//! that have no close counterpart in the other graph receive a low relevance
//! score; features scoring zero are frozen (their gradient is stopped) and the
//! remaining features are fused with relevance weights. Training minimizes a
//! cross-modality contrastive loss inside each graph plus a cross-graph
//! contrastive loss over seed alignments.
//!
//! Module map:
//! - [`data`]: knowledge-graph model, file layout, seed splits, synthetic pairs.
//! - [`diff`]: small reverse-mode autodiff tape over dense matrices.
//! - [`encoders`]: graph attention and dense per-modality encoders.
//! - [`integration`]: relevance scores, freezing, fusion, threshold schedule.
//! - [`objectives`]: cross-modality and cross-graph contrastive losses.
//! - [`training`]: AdamW, warm-up schedule, probation, the training loop.
//! - [`inference`]: ranking, greedy matching, Hits@n and MRR.
//! - [`experiment`]: configuration, run directories, sweeps and reports.

pub mod checkpoint;
pub mod data;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod integration;
pub mod modality;
pub mod objectives;
pub mod training;

pub use error::{PmfError, Result};
pub use modality::{Modality, Side};
