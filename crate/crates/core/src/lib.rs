//! Static concept embeddings distilled from contextualised mention vectors.
//!
//! The pipeline runs mention vectors ([`store`]) through exact neighbour
//! search ([`simsearch`]), mines weakly labelled positive pairs either from
//! neighbourhood structure ([`mining`]) or from concept-property knowledge
//! ([`distsup`]), trains a linear projection with a supervised contrastive
//! objective ([`contrastive`]), aggregates the projected mentions into one
//! vector per concept ([`distill`]), and evaluates the result ([`eval`]).

mod binfmt;

pub mod contrastive;
pub mod distill;
pub mod distsup;
pub mod eval;
pub mod mining;
pub mod simsearch;
pub mod store;
pub mod synth;

pub use binfmt::FormatError;
