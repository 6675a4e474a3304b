//! Association networks over neuro trees: a self-contained tensor and
//! reverse-mode autodiff core, the tree data model, association cells,
//! recursive propagation, and a small training harness.

pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod extract;
pub mod oracles;
pub mod propagate;
pub mod tensor;
pub mod train;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
pub use tree::{NeuroTree, NodeId, Payload};
