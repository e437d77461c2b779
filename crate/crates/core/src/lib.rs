pub mod error;
pub mod grouping;
pub mod kernel;
mod linalg;
pub mod panelio;
pub mod pipeline;
pub mod postgroup;
pub mod prelim;
pub mod qrcore;
pub mod simlab;
pub mod variants;

pub use error::{Error, Result};
