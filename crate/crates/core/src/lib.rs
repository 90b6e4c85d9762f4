//! Partition-based regularity machinery for explicit finite hypergraph
//! systems.
//!
//! The crate works with small, fully enumerable instances: a hypergraph
//! system is a tuple of labelled finite vertex classes together with a
//! uniform top layer of edges, and every quantity of interest — density,
//! conditional expectation, energy, discrepancy — is computed from exact
//! integer counts over explicit product spaces. On top of that substrate sit
//! the refinement loops (energy increment, the randomness/structure
//! dichotomy, the preliminary and full regularity decompositions), good-atom
//! classification with bad-set mass bounds, numerical counting checks with a
//! bundle generalization and its doubling identity, and the removal pipeline
//! that rewrites the top-layer sets into zero-copy replacements of bounded
//! complexity.
//!
//! Everything is deterministic given the inputs and a seed: randomized search
//! (the alternating discrepancy heuristic, random instance generation) draws
//! from per-edge ChaCha substreams, and the refinement loops break ties in a
//! fixed canonical order. Brute-force enumeration is the intended
//! verification oracle throughout, so constructors reject instances whose
//! product spaces exceed a configurable cell cap.

pub mod counting;
pub mod discrepancy;
pub mod error;
pub mod measure;
pub mod regularity;
pub mod removal;
pub mod seeding;
pub mod system;

pub use error::{Error, Result};
