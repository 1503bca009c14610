//! Encoder-decoder pipeline for image-caption ranking and caption
//! generation over precomputed image features.
//!
//! The encoder ([`lstm`], [`joint`]) learns a shared space for images and
//! sentences with a pairwise ranking loss. The decoder ([`nlm`]) is a
//! structure-content neural language model conditioned on vectors from that
//! space; [`generation`] samples POS templates, decodes candidates and ranks
//! them with a translation score and a Kneser-Ney trigram model ([`kn`]).
//! [`eval`] implements the bidirectional ranking protocol and
//! [`regularities`] the vector-arithmetic queries and PCA projections.

pub mod archive;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod generation;
pub mod gradcheck;
pub mod ingest;
pub mod joint;
pub mod kn;
pub mod lstm;
pub mod nlm;
pub mod numcore;
pub mod regularities;

pub use error::{Error, Result};
