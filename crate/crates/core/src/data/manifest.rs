use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::task::{TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One manifest record: `feature_ref<TAB>task_id<TAB>labels<TAB>split`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Reference exactly as written in the manifest.
    pub feature_ref: String,
    /// `feature_ref` resolved against the manifest's directory.
    pub path: PathBuf,
    pub task_id: u32,
    pub labels: Vec<String>,
    pub split: Split,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.feature_ref,
            self.task_id,
            self.labels.join(","),
            self.split
        )
    }
}

/// Parses manifest text, keeping only rows of `task`. Blank lines and lines
/// starting with `#` are skipped. File existence is not checked here.
pub fn parse_manifest(text: &str, origin: &Path, task: &TaskSpec) -> Result<Vec<ManifestEntry>> {
    let base = origin.parent().unwrap_or_else(|| Path::new(""));
    let err = |line: usize, message: String| Error::Manifest {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let [feature_ref, task_id, labels, split] = fields[..] else {
            return Err(err(
                line_no,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        };
        if feature_ref.is_empty() {
            return Err(err(line_no, "empty feature_ref".into()));
        }
        let task_id: u32 = task_id
            .trim()
            .parse()
            .map_err(|_| err(line_no, format!("task_id {task_id:?} is not an integer")))?;
        let split: Split = split.trim().parse().map_err(|e| err(line_no, e))?;
        if task_id != task.id {
            continue;
        }
        let labels: Vec<String> = if labels.is_empty() {
            Vec::new()
        } else {
            labels.split(',').map(|s| s.trim().to_owned()).collect()
        };
        if let Some(unknown) = labels.iter().find(|l| task.class_index(l).is_none()) {
            return Err(err(
                line_no,
                format!("class {unknown:?} is not part of task {} ({})", task.id, task.name),
            ));
        }
        match task.kind {
            TaskKind::SingleLabel if labels.len() != 1 => {
                return Err(err(
                    line_no,
                    format!("single-label task needs exactly one label, found {}", labels.len()),
                ));
            }
            _ => {}
        }
        for (j, l) in labels.iter().enumerate() {
            if labels[..j].contains(l) {
                return Err(err(line_no, format!("label {l:?} listed twice")));
            }
        }
        entries.push(ManifestEntry {
            feature_ref: feature_ref.to_owned(),
            path: base.join(feature_ref),
            task_id,
            labels,
            split,
        });
    }
    Ok(entries)
}

/// Reads and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: &Path, task: &TaskSpec) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_manifest(&text, path, task)?;
    for (line, entry) in line_numbers(&text, task.id).zip(&entries) {
        if !entry.path.is_file() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line,
                message: format!("missing file {}", entry.path.display()),
            });
        }
    }
    Ok(entries)
}

fn line_numbers(text: &str, task_id: u32) -> impl Iterator<Item = usize> + '_ {
    text.lines().enumerate().filter_map(move |(i, raw)| {
        if raw.trim().is_empty() || raw.starts_with('#') {
            return None;
        }
        let id = raw.split('\t').nth(1)?.trim().parse::<u32>().ok()?;
        (id == task_id).then_some(i + 1)
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
