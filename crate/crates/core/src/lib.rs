//! Object-permanence reasoning on a synthetic 6x6 grid world.
//!
//! The pipeline: [`worldsim`] generates episodes in which a small target
//! object is moved, hidden, and carried around by container objects;
//! [`perception`] turns frames into noisy per-object observations;
//! [`tracker`] stitches observations into tracks; [`mht`] runs an iterative
//! multi-hop transformer over the tracked tokens to localize the hidden
//! target; [`training`] and [`eval`] close the loop.

pub mod bbox;
pub mod eval;
pub mod mht;
pub mod perception;
pub mod training;
pub mod tensor;
pub mod tracker;
pub mod worldsim;

pub use bbox::BBox;
pub use tensor::{Adam, AdamState, Param, ParamStore, Tape, TensorId};
