//! # dfmk
//!
//! Discrete flow matching over small token vocabularies with a geometric
//! (metric-induced) probability path or a mixture path, sampled with a
//! continuous-time Markov chain.
//!
//! The crate is organised bottom-up:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`geometry`] | distance matrices, pmfs, Gibbs and mixture conditional paths, Fisher–Rao speed/length/energy |
//! | [`scheduler`] | kinetic-optimal lookup tables, closed-form and heuristic schedulers |
//! | [`path`] | a path family bound to a scheduler, with analytic time derivatives |
//! | [`ctmc`] | probability velocities, jump decompositions, first-order and moment-corrected jump probabilities, forward-equation reference |
//! | [`sampler`] | the multi-position, multi-codebook inference loop and posterior providers |
//! | [`forward`] | training-side corruption sampling, prediction masks and the weighted masked NLL |
//! | [`harness`] | Monte Carlo simulation, NFE sweeps, speed diagnostics, reports |
//! | [`io`] | JSON and binary file formats |
//!
//! Token indices are zero-based everywhere.

// `!(x > 0.0)` style checks are how NaN gets rejected along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ctmc;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod path;
pub mod rng;
pub mod sampler;
pub mod scheduler;

pub use error::{Error, Result};
pub use geometry::{DistanceMatrix, DistanceSet, PathFamily, Pmf};
pub use path::ConditionalPath;
pub use scheduler::{Averaging, KoSchedule, NamedKappa, SchedulerSpec, SchedulerTable, TableKind};
