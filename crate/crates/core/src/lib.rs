//! Symbolic abstraction and controller synthesis for sampled control systems.
//!
//! The pipeline runs in four stages:
//!
//! 1. a [`dynamics::ControlSystem`] together with a [`growth::GrowthBound`]
//!    bounding how fast neighbouring trajectories can separate;
//! 2. [`abstraction::build_abstraction`] quantizes states and inputs on
//!    uniform lattices and over-approximates every sampled transition by an
//!    infinity-norm ball, producing a [`transition::FiniteSystem`];
//! 3. [`synthesis`] solves safety, reach-avoid and reach-and-stay games on
//!    the finite system and returns a memoryless [`synthesis::Controller`];
//! 4. [`closed_loop`] refines that controller back onto the sampled plant
//!    and monitors the resulting trajectories.
//!
//! [`relations`] computes maximal (alternating) approximate simulation
//! relations between finite systems and Monte-Carlo checks the relation
//! between the sampled plant and its abstraction.
//!
//! Data-parallel loops use rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain iterators otherwise. Results never
//! depend on the number of worker threads.

pub mod abstraction;
pub mod closed_loop;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod growth;
pub mod par;
pub mod relations;
pub mod synthesis;
pub mod transition;

pub use error::{Error, Result};
