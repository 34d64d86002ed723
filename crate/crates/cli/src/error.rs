use std::path::Path;

use savae::checkpoint::CheckpointError;
use savae::corpus::CorpusError;
use savae::evaluation::EvalError;
use savae::inference::InferenceError;
use savae::model::ModelError;
use savae::training::TrainError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(Vec<String>),
    Io(String),
    Corpus(String),
    Checkpoint(String),
    Model(String),
    Training(String),
    Input(String),
    Evaluation(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Corpus(_) => "corpus",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Model(_) => "model",
            CliError::Training(_) => "training",
            CliError::Input(_) => "input",
            CliError::Evaluation(_) => "evaluation",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Corpus(_) | CliError::Input(_) => 5,
            CliError::Checkpoint(_) => 6,
            CliError::Model(_) | CliError::Training(_) => 7,
            CliError::Evaluation(_) => 8,
        }
    }

    /// `error[<category>]: <message>` on one line.
    pub fn line(&self) -> String {
        let message = match self {
            CliError::Config(v) => v.join("; "),
            CliError::Usage(m)
            | CliError::Io(m)
            | CliError::Corpus(m)
            | CliError::Checkpoint(m)
            | CliError::Model(m)
            | CliError::Training(m)
            | CliError::Input(m)
            | CliError::Evaluation(m) => m.clone(),
        };
        format!("error[{}]: {}", self.category(), message.replace('\n', " "))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Corpus(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Checkpoint(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(v) => CliError::Config(v),
            other => CliError::Model(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(v) => CliError::Config(v),
            TrainError::Model(m) => m.into(),
            other => CliError::Training(other.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Io { .. } => CliError::Io(e.to_string()),
            InferenceError::Model(m) => m.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Evaluation(e.to_string())
    }
}
