use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network geometry: {0}")]
    Network(String),

    #[error("steer angle {0} rad is outside (-pi/2, pi/2)")]
    SteerOutOfRange(f64),

    #[error("straight path: turn center is undefined for zero steer angle")]
    StraightPath,

    #[error("aggressiveness {0} is outside [-1, 1]")]
    Aggressiveness(f64),

    #[error("non-positive gap {0} m between vehicles")]
    CollisionState(f64),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
