use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Location of a local fit inside a composite plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub batch: usize,
    pub level: usize,
    pub x: f64,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "batch {}, level {}, x = {}", self.batch, self.level, self.x)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient local data: {have} weighted points, need {need}")]
    InsufficientLocalData { have: usize, need: usize },

    #[error("degenerate design: {0}")]
    Degenerate(String),

    #[error("no kernel mass at x = {x} after bandwidth widening")]
    EmptyNeighborhood { x: f64 },

    #[error("infeasible quantile grid: {0}")]
    InfeasibleGrid(String),

    #[error("no root: {0}")]
    NoRoot(String),

    #[error("singular plan: {0}")]
    SingularPlan(String),

    #[error("flat curvature at x = {x}")]
    FlatCurvature { x: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("division by zero: {0}")]
    DivideByZero(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{cell}: {source}")]
    AtCell {
        cell: Cell,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at(self, cell: Cell) -> Self {
        Error::AtCell {
            cell,
            source: Box::new(self),
        }
    }

    /// Strips cell coordinates, if any.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtCell { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for errors caused by bad inputs rather than by estimation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::InvalidInput(_) | Error::Parse { .. } | Error::LengthMismatch { .. }
        )
    }
}
