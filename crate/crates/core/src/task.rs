use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Darcy,
    Topology,
    Charge,
    Turbulence,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Darcy, Task::Topology, Task::Charge, Task::Turbulence];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Darcy => "darcy",
            Task::Topology => "topology",
            Task::Charge => "charge",
            Task::Turbulence => "turbulence",
        }
    }

    /// Channels produced by the denoiser.
    pub fn data_channels(self) -> usize {
        match self {
            Task::Darcy => 2,
            _ => 1,
        }
    }

    /// Conditioning channels concatenated to the noisy input.
    pub fn cond_channels(self) -> usize {
        match self {
            Task::Darcy | Task::Turbulence => 0,
            Task::Charge => 1,
            Task::Topology => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown task '{s}' (expected darcy, topology, charge or turbulence)")))
    }
}
