//! Run registry, analysis cache, HTTP service and command line for topklm.

pub mod api;
pub mod cache;
pub mod cli;
pub mod error;
pub mod registry;
pub mod server;

pub use error::ServiceError;
pub use registry::Registry;
