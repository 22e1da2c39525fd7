use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-label tasks (scenes) train a softmax group; multi-label tasks
/// (events) train independent sigmoids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SingleLabel => "single-label",
            TaskKind::MultiLabel => "multi-label",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-label" => Ok(TaskKind::SingleLabel),
            "multi-label" => Ok(TaskKind::MultiLabel),
            other => Err(Error::Parameter(format!("unknown task kind {other:?}"))),
        }
    }
}

/// One task of the sequence with its ordered class list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u32,
    pub name: String,
    pub kind: TaskKind,
    pub classes: Vec<String>,
}

impl TaskSpec {
    pub fn new(id: u32, name: impl Into<String>, kind: TaskKind, classes: Vec<String>) -> Self {
        TaskSpec {
            id,
            name: name.into(),
            kind,
            classes,
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Configuration(format!(
                "task {} ({}) has no classes",
                self.id, self.name
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.is_empty() || c.contains([',', '\t', '\n']) {
                return Err(Error::Configuration(format!(
                    "task {}: invalid class name {c:?}",
                    self.id
                )));
            }
            if self.classes[..i].contains(c) {
                return Err(Error::Registry(format!(
                    "task {}: duplicate class {c:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}
