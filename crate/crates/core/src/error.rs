use thiserror::Error;

pub type Result<T> = std::result::Result<T, SteerError>;

#[derive(Debug, Error)]
pub enum SteerError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        /// Per-iteration (residual_h0, residual_h1).
        history: Vec<(f64, f64)>,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Failure inside one arrow of the steering pipeline.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<SteerError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl SteerError {
    pub fn domain(msg: impl Into<String>) -> Self {
        SteerError::Domain(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        SteerError::Numerical(msg.into())
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        SteerError::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        SteerError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage tags.
    pub fn root(&self) -> &SteerError {
        match self {
            SteerError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit status used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            SteerError::Config { .. } | SteerError::Json(_) | SteerError::Io(_) => 2,
            SteerError::Csv(_) => 2,
            SteerError::Convergence { .. } => 3,
            SteerError::Domain(_) | SteerError::Numerical(_) => 4,
            SteerError::Stage { .. } => unreachable!(),
        }
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
