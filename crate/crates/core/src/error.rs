use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite observation at index {0}")]
    NonFiniteObservation(usize),

    #[error("transition matrix has no unique stationary distribution")]
    NoUniqueStationary,

    #[error("variance collapsed below floor {floor:e} in state {state}")]
    VarianceCollapse { state: usize, floor: f64 },

    #[error("all {0} EM restarts failed")]
    AllRestartsFailed(usize),

    #[error("no posterior draws fall inside the integration region")]
    EmptyRegion,

    #[error("no importance draws fall inside the integration region")]
    NoImportanceDrawsInRegion,

    #[error("non-finite importance weight at draw {index}")]
    NonFiniteWeight { index: usize },

    #[error("region mass bracket not reached after {attempts} adjustments (last mass {last_mass:.4})")]
    RegionBracket { attempts: usize, last_mass: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("every candidate K failed")]
    NoCandidateSucceeded,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// True for failures of the numerical pipeline rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_numerical(),
            Error::InvalidInput(_)
            | Error::NonFiniteObservation(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => false,
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
