use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] biovista_core::Error),
}

impl CliError {
    pub fn name(&self) -> &'static str {
        match self {
            CliError::MissingInput(_) => "MissingInput",
            CliError::Config(_) => "InvalidConfig",
            CliError::Io { .. } => "IoError",
            CliError::Data(_) => "DataError",
            CliError::Core(e) => e.name(),
        }
    }

    /// 1 validation failure, 2 missing input, 3 data error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::MissingInput(_) => 2,
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Io { .. } | CliError::Data(_) => 3,
            CliError::Core(e) => match e.name() {
                "InvalidConfig" | "DuplicateId" | "SplitConflict" | "InvalidSample" => 1,
                _ => 3,
            },
        }
    }
}

macro_rules! core_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

core_from!(
    biovista_core::las::LasError,
    biovista_core::raster::RasterError,
    biovista_core::types::ManifestError,
    biovista_core::dataset::DatasetError,
    biovista_core::augment::AugmentError,
    biovista_core::embed::StoreError,
    biovista_core::fusion::FusionError,
    biovista_core::metrics::MetricsError
);

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| CliError::Io { path: path.into(), source })
    }
}
