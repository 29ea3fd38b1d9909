//! Closed-loop CSI activity recognition with teacher-labelled adaptation.

pub mod adapt;
pub mod error;
pub mod harness;
pub mod model;
pub mod net;
pub mod numerics;
pub mod sim;
pub mod sync;
pub mod teacher;

pub use error::{Error, Result};
