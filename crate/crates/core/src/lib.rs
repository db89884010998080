//! Analysis and simulation of piecewise-smooth ODEs with a codimension-2
//! discontinuity set `x = y = 0`.

pub mod classify;
pub mod entry_chart;
pub mod error;
pub mod expr;
pub mod integrate;
pub mod linalg;
pub mod ode;
pub mod regularization;
pub mod scaling_chart;
pub mod scenarios;
pub mod system;

pub use error::{Error, Result};
pub use linalg::{Mat2, Vec2};
pub use regularization::Regularization;
pub use system::{SystemDef, SystemSpec};
