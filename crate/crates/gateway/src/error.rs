use std::fmt;

/// A failure tagged with the pipeline stage that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub stage: String,
    pub message: String,
}

impl CliError {
    pub fn new(stage: impl Into<String>, message: impl fmt::Display) -> Self {
        Self { stage: stage.into(), message: message.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<selfroute::policy::PolicyError> for CliError {
    fn from(e: selfroute::policy::PolicyError) -> Self {
        match e {
            selfroute::policy::PolicyError::Stage { stage, message } => CliError::new(stage.as_str(), message),
            other => CliError::new("policy", other),
        }
    }
}
