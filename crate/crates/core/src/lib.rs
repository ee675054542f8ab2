pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod forward;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optics;
pub mod optim;
pub mod spatial;
pub mod tensor;
pub mod reconstruct;
pub mod simulator;

pub use rustfft::num_complex;
