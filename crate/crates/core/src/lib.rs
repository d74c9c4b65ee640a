//! Multi-task dynamic-connectivity network for localizing eloquent cortex.

pub mod connectivity;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod layers;
pub mod loss;
pub mod model;
pub mod seeding;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
