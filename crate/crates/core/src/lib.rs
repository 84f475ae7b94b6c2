pub mod autodiff;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod harmonics;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod plot;
pub mod special;
pub mod training;

pub use error::{Error, Result};
