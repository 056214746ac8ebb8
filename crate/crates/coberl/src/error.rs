use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoberlError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("replay not ready: {have} stored, {need} required")]
    NotReady { have: usize, need: usize },
    #[error("csv error at line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("training halted: {0}")]
    Halted(String),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoberlError>;
