//! Strategy prediction core.
//!
//! Everything in this crate is pure computation over in-memory data and only
//! needs an allocator: the domain model for student/problem interaction logs,
//! a synthetic world generator with known latent structure, a small reverse-mode
//! tensor kernel, the attention-based mastery model, mastery-weighted walk
//! embeddings, strategy alignment and symmetry scoring, hierarchical DP-Means
//! clustering with coarse-to-fine refinement, the recurrent strategy decoder and
//! the sampling / fairness machinery used to evaluate it.
//!
//! File formats, timing and the command-line front end live in the companion
//! `stratpred` crate.

#![no_std]

extern crate alloc;

pub mod corpus;
pub mod harness;
pub mod hdp;
pub mod mastery;
pub mod mvec;
pub mod predictor;
pub mod rng;
pub mod symmetry;
pub mod synthetic;
pub mod tensor;

pub use corpus::{Corpus, CorpusError, KcId, ProblemId, SectionId, StrategyTrace, StudentId, TransactionRecord, UnitId};
pub use tensor::{Matrix, ParamStore, TensorError};
