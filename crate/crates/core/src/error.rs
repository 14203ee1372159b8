//! Error type shared by every pipeline stage.
//!
//! Each variant records which stage raised it so the CLI can name the
//! originating module in its exit message. Configuration problems are kept
//! distinct from pipeline failures because they map to a different exit code.

use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage an error originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Maskgen,
    Model,
    Losses,
    Detector,
    Evalkit,
    Datapipe,
    Trainer,
    Cli,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Maskgen => "maskgen",
            Stage::Model => "model",
            Stage::Losses => "losses",
            Stage::Detector => "detector",
            Stage::Evalkit => "evalkit",
            Stage::Datapipe => "datapipe",
            Stage::Trainer => "trainer",
            Stage::Cli => "cli",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{stage}: dimension mismatch: {msg}")]
    Dimension { stage: Stage, msg: String },

    #[error("{stage}: invalid argument: {msg}")]
    Argument { stage: Stage, msg: String },

    #[error("{stage}: invalid state: {msg}")]
    State { stage: Stage, msg: String },

    /// Configuration problem; the CLI maps this to exit code 2.
    #[error("config: {msg}")]
    Config { msg: String },

    #[error("{stage}: non-finite value in component '{component}'{detail}")]
    Numeric {
        stage: Stage,
        component: String,
        detail: String,
    },

    #[error("datapipe: missing dataset directory {0}")]
    Layout(PathBuf),

    #[error("datapipe: pairing error: {msg}")]
    Pairing { msg: String },

    #[error("{stage}: {path}: unsupported container format version {found} (this build reads version {expected})")]
    FormatVersion {
        stage: Stage,
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{stage}: {path}: {source}")]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage}: {path}: {source}")]
    Image {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{stage}: tensor backend: {source}")]
    Tensor {
        stage: Stage,
        #[source]
        source: candle_core::Error,
    },
}

impl Error {
    pub fn dimension(stage: Stage, msg: impl Into<String>) -> Self {
        Error::Dimension { stage, msg: msg.into() }
    }

    pub fn argument(stage: Stage, msg: impl Into<String>) -> Self {
        Error::Argument { stage, msg: msg.into() }
    }

    pub fn state(stage: Stage, msg: impl Into<String>) -> Self {
        Error::State { stage, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config { msg: msg.into() }
    }

    pub fn numeric(stage: Stage, component: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stage,
            component: component.into(),
            detail: detail.into(),
        }
    }

    pub fn tensor(stage: Stage) -> impl FnOnce(candle_core::Error) -> Self {
        move |source| Error::Tensor { stage, source }
    }

    pub fn io(stage: Stage, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { stage, path, source }
    }

    pub fn image(stage: Stage, path: impl Into<PathBuf>) -> impl FnOnce(image::ImageError) -> Self {
        let path = path.into();
        move |source| Error::Image { stage, path, source }
    }

    /// True for errors that should exit with the usage/config code (2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
