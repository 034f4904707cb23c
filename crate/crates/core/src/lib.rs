//! Desk-scale laboratory for off-target zero-shot translation.
//!
//! A tiny decoder-only transformer is trained on synthetic languages with
//! an exact translation oracle, first with plain likelihood on supervised
//! directions, then with an added unlikelihood term on samples whose
//! instruction names the wrong direction.

pub mod autodiff;
pub mod cli;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
