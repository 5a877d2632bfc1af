use std::fmt;

/// Exit code 2: bad usage or unusable input.
pub const EXIT_USAGE: u8 = 2;
/// Exit code 3: the work itself failed (training diverged, output unwritable).
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<lenforge::Error> for Failure {
    fn from(e: lenforge::Error) -> Self {
        match e {
            lenforge::Error::Diverged { .. } | lenforge::Error::Io(_) => Failure::runtime(e.to_string()),
            other => Failure::usage(other.to_string()),
        }
    }
}
