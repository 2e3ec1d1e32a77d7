pub mod aggregate;
pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod init;
pub mod model;
pub mod numerics;
pub mod rank;
pub mod represent;
pub mod train;

mod binio;

pub use error::{Result, RtaError};
