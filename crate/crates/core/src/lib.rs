//! Domain-adaptive embedding training with graph-based pseudo-labeling and
//! an adversarial mutual-information objective.
//!
//! The pipeline has three stages. Stage 1 pre-trains a small feature
//! extractor on labeled source embeddings while pulling the source and
//! target feature distributions together with a multi-kernel MMD penalty.
//! Stage 2 trains a graph convolutional scorer on pivot subgraphs of the
//! source set, scores target pairs with it, clusters the resulting linkage
//! graph by an iterative edge threshold, and finetunes on the pseudo-labels.
//! Stage 3 alternates a minimization step on the target prototype matrix
//! with a maximization step on the extractor, both driven by a
//! mutual-information loss over the target classifier outputs.
//!
//! Modules follow that structure: [`numerics`] is the dense-matrix
//! substrate, [`datasynth`] generates synthetic two-domain benchmarks,
//! [`graph`] builds pivot subgraphs and clusters linkage graphs, [`gcn`]
//! trains and applies the edge scorer, [`losses`] holds the differentiable
//! objectives, [`adapt`] runs the three training stages, [`metrics`]
//! evaluates clusterings and embeddings, and [`cli`] wires the stages into
//! subcommands with file-based handoffs.

pub mod adapt;
pub mod cli;
pub mod datasynth;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod numerics;

pub use error::{Error, Result};
