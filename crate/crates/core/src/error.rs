use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },

    #[error("non-binary treatment at row {row}: {value}")]
    NonBinaryTreatment { row: usize, value: f64 },

    #[error("instrument must take at least 2 distinct values, found {0}")]
    TooFewInstrumentValues(usize),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("empty cell (d={d}, z_index={z})")]
    EmptyCell { d: u8, z: usize },

    #[error("cell (d={d}, z_index={z}) has {count} observation(s); at least 2 required")]
    SparseCell { d: u8, z: usize, count: usize },

    #[error("empty instrument cell z_index={0}")]
    EmptyInstrumentCell(usize),

    #[error("zero total kernel weight in cell {0}")]
    ZeroKernelWeight(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("linear program is infeasible")]
    Infeasible,

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("iteration limit reached: {0}")]
    MaxIterations(String),

    #[error("solution is not optimal (status {0})")]
    NotOptimal(String),

    #[error("ball constraint is active; dual measure is not interpretable")]
    BallActive,

    #[error("active-set regularity violated: {0}")]
    RegularityViolated(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate tangency at y={y}: curvature {curvature}")]
    DegenerateTangency { y: f64, curvature: f64 },

    #[error("quadrature did not converge on [{a}, {b}]")]
    Quadrature { a: f64, b: f64 },

    #[error("empty solution set")]
    EmptySet,
}
