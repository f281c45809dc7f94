use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::params::ParamError;
use crate::synth::SynthError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("memory state became non-finite at layer {layer}")]
    NonFiniteMemory { layer: usize },
    #[error("{component} loss is not finite ({value})")]
    NonFiniteLoss { component: &'static str, value: f64 },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },
    #[error("answer id {id} outside vocabulary of {len}")]
    InvalidAnswer { id: usize, len: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    /// Whether the failure is numerical (NaN/Inf) rather than usage or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteMemory { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteGrad { .. }
                | Error::Tensor(TensorError::NonFinite { .. })
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Checkpoint(CheckpointError::Io(_)) | Error::Synth(SynthError::Io(_))
        ) || matches!(self, Error::Config(ConfigError::Io { .. }))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

impl crate::gradcheck::CheckError for Error {
    fn is_non_finite(&self) -> bool {
        self.is_numerical()
    }
}
