mod bfgs;
pub mod error;
pub mod fitter;
pub mod gamma;
pub mod lambda;
pub mod likelihood;
mod linalg;
pub mod metrics;
pub mod mixture;
pub mod penalty;
pub mod quad;
pub mod summary;
pub mod uncertainty;
