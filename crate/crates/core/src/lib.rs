//! Convolutional autoencoder with a class-specific self-expressive layer.
//!
//! The encoder maps images to feature vectors, the self-expressive layer
//! reconstructs each feature column from the other columns of its own class,
//! and a mirrored decoder maps features back to pixels. Training pushes the
//! class subspaces apart in feature space. The crate also carries the
//! analysis tooling around it: principal angles between class subspaces,
//! a lasso self-expressive solver, and k-NN / sparse-representation
//! classifiers.

pub mod classify;
pub mod data;
pub mod model;
pub mod optim;
pub mod subspace;
pub mod tensor;

pub use tensor::{Graph, Tensor, Var};
