use std::io;
use std::path::{Path, PathBuf};

use bricks_core::devices::DeviceError;
use bricks_core::mlcore::MlError;
use bricks_core::sessions::SessionError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("session `{0}` not found")]
    SessionNotFound(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} is corrupt: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("cannot encode JSON: {0}")]
    Encode(#[source] serde_json::Error),
    #[error("session `{0}` is shutting down")]
    WorkerGone(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
}

impl ServiceError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        ServiceError::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// HTTP status and stable machine-readable code.
    pub fn status_and_code(&self) -> (u16, &'static str) {
        match self {
            ServiceError::SessionNotFound(_) => (404, "session_not_found"),
            ServiceError::Malformed(_) => (422, "malformed"),
            ServiceError::Session(e) => match e {
                SessionError::WrongMode { .. } => (409, "wrong_mode"),
                SessionError::WrongRunState { .. } => (409, "wrong_run_state"),
                SessionError::NotFound(_) => (404, "not_found"),
                SessionError::WrongExperiment { .. } => (422, "wrong_experiment"),
                SessionError::InvalidInput(_) => (422, "invalid_input"),
                SessionError::Ml(m) => (422, ml_code(m)),
                SessionError::Device(d) => device_status(d),
                SessionError::Replay(_) => (500, "replay"),
            },
            ServiceError::WorkerGone(_) => (503, "session_closing"),
            ServiceError::Bind { .. } => (500, "bind"),
            ServiceError::Internal(_) => (500, "internal"),
            ServiceError::Io { .. } | ServiceError::Corrupt { .. } | ServiceError::Encode(_) => {
                (500, "storage")
            }
        }
    }
}

pub(crate) fn device_status(e: &DeviceError) -> (u16, &'static str) {
    match e {
        DeviceError::Unavailable(_) => (503, "device_unavailable"),
        DeviceError::Protocol(_) => (503, "device_protocol"),
        DeviceError::Remote { .. } => (503, "device_error"),
        DeviceError::Config(_) => (422, "device_config"),
    }
}

fn ml_code(e: &MlError) -> &'static str {
    match e {
        MlError::NoTrainingData => "no_training_data",
        MlError::InvalidK { .. } => "invalid_k",
        MlError::InvalidResolution(_) => "invalid_resolution",
        MlError::InsufficientData { .. } => "insufficient_data",
        MlError::DegenerateX => "degenerate_x",
        MlError::UninvertibleLine(_) => "uninvertible_line",
        MlError::OutOfRange { .. } => "out_of_range",
    }
}

impl From<DeviceError> for ServiceError {
    fn from(e: DeviceError) -> Self {
        ServiceError::Session(SessionError::Device(e))
    }
}

impl From<MlError> for ServiceError {
    fn from(e: MlError) -> Self {
        ServiceError::Session(SessionError::Ml(e))
    }
}
