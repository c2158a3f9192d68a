use std::fmt;
use std::str::FromStr;

use geodp_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    SweepInto,
    PickOutOfHole,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Reach, TaskKind::SweepInto, TaskKind::PickOutOfHole];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::SweepInto => "sweep_into",
            TaskKind::PickOutOfHole => "pick_out_of_hole",
        }
    }

    pub fn default_max_steps(self) -> usize {
        match self {
            TaskKind::Reach => 60,
            TaskKind::SweepInto => 100,
            TaskKind::PickOutOfHole => 120,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Self::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!("unknown task `{s}`; valid tasks: {}", valid.join(", ")))
        })
    }
}
