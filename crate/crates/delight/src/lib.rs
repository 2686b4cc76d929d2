//! DeLighT: deep and light-weight transformer blocks built on group
//! linear transformations, with analytical parameter and MAC accounting
//! and a small training harness for toy sequence tasks.

pub mod accounting;
pub mod block;
pub mod book;
pub mod dextra;
pub mod error;
pub mod glt;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod params;
pub mod scaling;
pub mod tasks;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Tensor, TensorId};
