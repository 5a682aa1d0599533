use r23d::avatar::AvatarError;
use r23d::netarch::NetError;
use r23d::register::RegisterError;
use r23d::trainloop::TrainError;

/// A failure with its process exit code: 2 for input and configuration
/// problems, 3 for model and shape problems.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn model(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<AvatarError> for CliError {
    fn from(e: AvatarError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io { .. } | NetError::Config(_) => Self::input(e.to_string()),
            _ => Self::model(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Net(n) => n.into(),
            TrainError::Avatar(a) => a.into(),
            TrainError::Shape(_) | TrainError::Num(_) | TrainError::Diverged(_) => Self::model(e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}

impl From<RegisterError> for CliError {
    fn from(e: RegisterError) -> Self {
        match e {
            RegisterError::Net(n) => n.into(),
            RegisterError::Train(t) => t.into(),
            RegisterError::Avatar(a) => a.into(),
            RegisterError::Num(_) => Self::model(e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}
