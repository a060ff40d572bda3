//! Process exit codes and the error-to-code mapping.

use std::fmt;

pub const EXIT_OK: u8 = 0;
/// Unexpected internal failure.
pub const EXIT_FAILURE: u8 = 1;
/// Bad configuration, override, or command-line usage.
pub const EXIT_CONFIG: u8 = 2;
/// Unreadable or malformed input data.
pub const EXIT_DATA: u8 = 3;
/// Salience statistics do not match the corpus or extractor.
pub const EXIT_STALE_STATS: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Finds the most specific known error in the chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<sbl_core::Error>() {
            return match e {
                sbl_core::Error::StaleStats(_) => EXIT_STALE_STATS,
                sbl_core::Error::InvalidArgument { .. } | sbl_core::Error::UnknownTap(_) => EXIT_CONFIG,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_FAILURE
}
