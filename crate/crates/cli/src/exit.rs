use std::fmt;

use dsformer::Error;

pub const OK: i32 = 0;
pub const CONFIG: i32 = 2;
pub const DATA: i32 = 3;
pub const NUMERIC: i32 = 4;

/// Invalid or unreadable configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Missing, unreadable or malformed dataset or checkpoint.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

/// Exit code for an error, from the first cause that determines one.
pub fn code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return CONFIG;
        }
        if cause.is::<DataError>() {
            return DATA;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Numeric(_) => NUMERIC,
                Error::Validation(_) | Error::Contract(_) | Error::Dimension(_) => CONFIG,
                Error::Parse { .. }
                | Error::Generation(_)
                | Error::Rollout(_)
                | Error::Checkpoint(_)
                | Error::Io(_)
                | Error::Json(_) => DATA,
            };
        }
        if cause.is::<std::io::Error>() {
            return DATA;
        }
    }
    1
}
