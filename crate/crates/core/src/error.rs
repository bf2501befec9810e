use thiserror::Error;

use crate::augment::AugmentError;
use crate::dataset::DatasetError;
use crate::embed::StoreError;
use crate::fusion::FusionError;
use crate::las::LasError;
use crate::metrics::MetricsError;
use crate::raster::RasterError;
use crate::types::ManifestError;

/// Any toolkit error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Las(#[from] LasError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable error name for machine-readable reporting.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Las(e) => e.name(),
            Error::Raster(e) => e.name(),
            Error::Manifest(e) => e.name(),
            Error::Dataset(e) => e.name(),
            Error::Augment(_) => "InvalidConfig",
            Error::Store(e) => e.name(),
            Error::Fusion(e) => e.name(),
            Error::Metrics(e) => e.name(),
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
