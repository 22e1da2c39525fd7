//! Per-step metrics reports and their renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::task::TaskKind;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    F1,
}

impl Metric {
    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::SingleLabel => Metric::Accuracy,
            TaskKind::MultiLabel => Metric::F1,
        }
    }

    fn short(self) -> &'static str {
        match self {
            Metric::Accuracy => "Acc",
            Metric::F1 => "F1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: u32,
    pub task_name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub version: u32,
    pub step: u32,
    pub records: Vec<TaskRecord>,
    /// Accuracy over every scene class learned so far; present once more
    /// than one scene task exists.
    pub overall_scene_accuracy: Option<f64>,
    /// Task id to p.p. drop from its first evaluation.
    pub forgetting: BTreeMap<u32, f64>,
    pub confusion: Option<ConfusionMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl MetricsReport {
    pub fn record(&self, task_id: u32) -> Option<&TaskRecord> {
        self.records.iter().find(|r| r.task_id == task_id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let report: MetricsReport =
            serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if report.version != REPORT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported report version {}", report.version),
            ));
        }
        Ok(report)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn emit(&self, format: ReportFormat, path: &Path) -> Result<()> {
        let text = match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Text => render_table(std::slice::from_ref(self)),
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Renders a sequence of step reports as one table: a row per task (plus
/// the overall scene row when present), a column per step, forgetting in
/// parentheses.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut tasks: Vec<&TaskRecord> = Vec::new();
    for r in reports {
        for rec in &r.records {
            if !tasks.iter().any(|t| t.task_id == rec.task_id) {
                tasks.push(rec);
            }
        }
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Task".to_string()];
    header.extend(reports.iter().map(|r| format!("t={}", r.step)));
    rows.push(header);
    if reports.iter().any(|r| r.overall_scene_accuracy.is_some()) {
        let mut row = vec!["Overall scenes (Acc)".to_string()];
        row.extend(reports.iter().map(|r| {
            r.overall_scene_accuracy
                .map(|v| format!("{v:.2}"))
                .unwrap_or_default()
        }));
        rows.push(row);
    }
    for t in tasks {
        let mut row = vec![format!("Task {}: {} ({})", t.task_id, t.task_name, t.metric.short())];
        for r in reports {
            let cell = match r.record(t.task_id) {
                None => String::new(),
                Some(rec) => match r.forgetting.get(&t.task_id) {
                    Some(&f) if f > 0.0 => format!("{:.2} ({f:.2}↓)", rec.value),
                    Some(&f) if f < 0.0 => format!("{:.2} ({:.2}↑)", rec.value, -f),
                    _ => format!("{:.2}", rec.value),
                },
            };
            row.push(cell);
        }
        rows.push(row);
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        }
    }
    if let Some(cm) = reports.last().and_then(|r| r.confusion.as_ref()) {
        out.push('\n');
        out.push_str(&render_confusion(cm));
    }
    out
}

/// Confusion counts with a `|` column rule and a `-` row rule at the
/// old/new class boundary.
pub fn render_confusion(cm: &ConfusionMatrix) -> String {
    let w = cm
        .counts
        .iter()
        .flatten()
        .map(|c| c.to_string().len())
        .max()
        .unwrap_or(1)
        .max(3);
    let name_w = cm.classes.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (i, row) in cm.counts.iter().enumerate() {
        if i == cm.boundary && i > 0 {
            let _ = writeln!(out, "{}", "-".repeat(name_w + 1 + row.len() * (w + 1) + 2));
        }
        let _ = write!(out, "{:<name_w$} ", cm.classes[i]);
        for (j, c) in row.iter().enumerate() {
            if j == cm.boundary && j > 0 {
                out.push_str(" |");
            }
            let _ = write!(out, " {c:>w$}");
        }
        out.push('\n');
    }
    out
}
