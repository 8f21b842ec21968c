//! Matrix embeddings of gridworld programs learned from Hoare triples, and
//! propagation of grader feedback through those embeddings.
//!
//! Numeric code is generic over [`numcore::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod corpus;
pub mod dsl;
pub mod experiment;
pub mod feedback;
pub mod gridworld;
pub mod interpreter;
pub mod npm;
pub mod numcore;
pub mod treemodels;

pub type Matrix64 = numcore::Matrix<f64>;
pub type Matrix32 = numcore::Matrix<f32>;
pub type NpmModel64 = npm::NpmModel<f64>;
pub type NpmModel32 = npm::NpmModel<f32>;
pub type TreeParams64 = treemodels::TreeParams<f64>;
pub type TreeParams32 = treemodels::TreeParams<f32>;
pub type FeedbackHeads64 = treemodels::FeedbackHeads<f64>;
pub type FeedbackHeads32 = treemodels::FeedbackHeads<f32>;
pub type RnnPost64 = treemodels::RnnPost<f64>;
pub type RnnPost32 = treemodels::RnnPost<f32>;
