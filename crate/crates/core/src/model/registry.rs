use std::ops::Range;

use crate::error::{Error, Result};
use crate::losses::LogitPartition;
use crate::task::{TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Softmax,
    Sigmoid,
}

impl From<TaskKind> for Head {
    fn from(kind: TaskKind) -> Self {
        match kind {
            TaskKind::SingleLabel => Head::Softmax,
            TaskKind::MultiLabel => Head::Sigmoid,
        }
    }
}

impl Head {
    pub fn kind(self) -> TaskKind {
        match self {
            Head::Softmax => TaskKind::SingleLabel,
            Head::Sigmoid => TaskKind::MultiLabel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub unit: usize,
    pub task_id: u32,
    pub name: String,
    pub head: Head,
}

/// Maps classifier output units to the task and class they belong to.
/// Units are contiguous per task, in registration order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassRegistry {
    entries: Vec<ClassEntry>,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub(crate) fn push_raw(&mut self, task_id: u32, name: String, head: Head) {
        self.entries.push(ClassEntry {
            unit: self.entries.len(),
            task_id,
            name,
            head,
        });
    }

    pub fn register(&mut self, task: &TaskSpec) -> Result<Range<usize>> {
        task.validate()?;
        if let Some(last) = self.entries.last() {
            if task.id <= last.task_id {
                return Err(Error::Registry(format!(
                    "task id {} must exceed the last registered id {}",
                    task.id, last.task_id
                )));
            }
        }
        if let Some(dup) = task
            .classes
            .iter()
            .find(|c| self.entries.iter().any(|e| &e.name == *c))
        {
            return Err(Error::Registry(format!(
                "class {dup:?} of task {} is already registered",
                task.id
            )));
        }
        let start = self.entries.len();
        for c in &task.classes {
            self.push_raw(task.id, c.clone(), task.kind.into());
        }
        Ok(start..self.entries.len())
    }

    /// Task ids in registration order.
    pub fn task_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = Vec::new();
        for e in &self.entries {
            if ids.last() != Some(&e.task_id) {
                ids.push(e.task_id);
            }
        }
        ids
    }

    pub fn task_units(&self, task_id: u32) -> Option<Range<usize>> {
        let start = self.entries.iter().position(|e| e.task_id == task_id)?;
        let len = self.entries[start..]
            .iter()
            .take_while(|e| e.task_id == task_id)
            .count();
        Some(start..start + len)
    }

    pub fn task_head(&self, task_id: u32) -> Option<Head> {
        self.entries
            .iter()
            .find(|e| e.task_id == task_id)
            .map(|e| e.head)
    }

    /// Splits the logits into the units of tasks registered before
    /// `task_id` (old) and the units of `task_id` itself (new).
    pub fn partition(&self, task_id: u32) -> Result<LogitPartition> {
        let new = self
            .task_units(task_id)
            .ok_or_else(|| Error::Registry(format!("task {task_id} is not registered")))?;
        LogitPartition::new(0..new.start, new, self.len())
    }

    /// Units of all single-label (softmax) classes.
    pub fn scene_units(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.head == Head::Softmax)
            .map(|e| e.unit)
            .collect()
    }

    pub fn class_names(&self, units: Range<usize>) -> Vec<String> {
        self.entries[units].iter().map(|e| e.name.clone()).collect()
    }
}
