use thiserror::Error;

/// Errors raised across estimation, grouping and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error at row {row}, column `{column}`: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("unbalanced panel: subjects {subjects:?} do not share the common time set")]
    Balance { subjects: Vec<String> },

    #[error("degenerate index: all index values equal {value}")]
    DegenerateIndex { value: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("local design too sparse at z = {z}{}: {available} usable observations, {required} required", context_suffix(.context))]
    LocalDesign {
        z: f64,
        context: Option<String>,
        available: usize,
        required: usize,
    },

    #[error("subject fits failed: {}", summarize_failures(.failures))]
    SubjectFits { failures: Vec<(String, Error)> },

    #[error("bandwidth selection failed: {0}")]
    BandwidthSelection(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("inference unavailable at z = {z}: {reason}")]
    InferenceUnavailable { z: f64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

fn summarize_failures(failures: &[(String, Error)]) -> String {
    failures
        .iter()
        .map(|(label, err)| format!("[{label}] {err}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Short machine-readable kind, used by the CLI's structured error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Data { .. } => "data",
            Error::Balance { .. } => "balance",
            Error::DegenerateIndex { .. } => "degenerate_index",
            Error::InvalidInput(_) => "invalid_input",
            Error::LocalDesign { .. } => "local_design",
            Error::SubjectFits { .. } => "subject_fits",
            Error::BandwidthSelection(_) => "bandwidth_selection",
            Error::Alignment(_) => "alignment",
            Error::InferenceUnavailable { .. } => "inference_unavailable",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }

    /// Attach a label (subject or group) to a local-design error.
    pub(crate) fn with_context(self, label: impl Into<String>) -> Error {
        match self {
            Error::LocalDesign {
                z,
                context: None,
                available,
                required,
            } => Error::LocalDesign {
                z,
                context: Some(label.into()),
                available,
                required,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
