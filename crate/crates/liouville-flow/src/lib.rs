//! Invertible Runge–Kutta flows of ReQU vector fields with exact step
//! log-determinants, a radial Beckmann transport oracle, projected-gradient
//! density estimation, and the capacity/PAC bound ledger that certifies the
//! whole pipeline.

mod artifact;

pub mod beckmann;
pub mod bounds;
pub mod cli;
pub mod density;
pub mod error;
pub mod linalg;
pub mod flow;
pub mod quad;
pub mod requ_net;
pub mod rng;
pub mod spline;

pub use error::{Error, Result};
