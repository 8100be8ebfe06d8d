//! Session service and command-line front end for the vessel segmentation
//! workbench.

pub mod api;
pub mod config;
pub mod session;

use arspl_core::dataset::DatasetError;
use arspl_core::spl::SplError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Spl(#[from] SplError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
extern crate self as arspl_service;
#[cfg(test)]
mod tests;
