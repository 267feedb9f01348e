use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{what} = {value} is outside the valid range [0, 1]")]
    ValueOutOfRange { what: &'static str, value: f64 },

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("expression normal equations are singular; use reg_lambda > 0")]
    IllConditioned,

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate})")]
    Diverged { epoch: usize, learning_rate: f64 },

    #[error("dataset quality: {resampled} of {count} samples had to be resampled (limit 1%)")]
    DatasetQuality { resampled: usize, count: usize },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_frame(self, frame: usize) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::ValueOutOfRange { .. } => "value_out_of_range",
            Error::InvalidSize(_) => "invalid_size",
            Error::Invalid(_) => "invalid_input",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::IllConditioned => "ill_conditioned",
            Error::Diverged { .. } => "diverged",
            Error::DatasetQuality { .. } => "dataset_quality",
            Error::Frame { source, .. } | Error::File { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "parse",
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
