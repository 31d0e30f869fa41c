use alloc::string::String;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("pose is {distance:.3} m from the centerline (limit {limit:.3} m)")]
    OffTrack { distance: f64, limit: f64 },
    #[error("control error: {0}")]
    Control(String),
    #[error("dataset error: {0}")]
    Dataset(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            actual,
        })
    }
}
