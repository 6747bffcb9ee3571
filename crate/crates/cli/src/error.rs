use sigzsl::dataset::DatasetError;
use sigzsl::discriminator::DiscriminatorError;
use sigzsl::metrics::MetricsError;
use sigzsl::net::NetError;
use sigzsl::nn::NnError;
use sigzsl::synth::SynthError;
use sigzsl::train::TrainError;
use sigzsl::zsl::ZslError;
use thiserror::Error;

/// Failure classes, one exit code each.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Nn(NnError::NonFinite(_)) => CliError::Numeric(e.to_string()),
            NetError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DiscriminatorError> for CliError {
    fn from(e: DiscriminatorError) -> Self {
        match e {
            DiscriminatorError::NotPositiveDefinite(_) => CliError::Numeric(e.to_string()),
            DiscriminatorError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::EmptySweep | MetricsError::UnsortedSweep => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteUpdate { .. } => CliError::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Net(n) => n.into(),
            TrainError::Discriminator(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ZslError> for CliError {
    fn from(e: ZslError) -> Self {
        match e {
            ZslError::Net(n) => n.into(),
            ZslError::Discriminator(d) => d.into(),
            ZslError::Metrics(m) => m.into(),
            ZslError::Mismatch(m) => CliError::Data(m),
        }
    }
}
