use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    JobStart,
    BootstrapDone,
    TaskScheduled,
    TaskLaunched,
    TaskDone,
    TaskFailed,
    TaskCanceled,
    NodeFailed,
    JobEnd,
}

impl EventKind {
    pub fn is_task_terminal(self) -> bool {
        matches!(self, Self::TaskDone | Self::TaskFailed | Self::TaskCanceled)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("kind serializes");
        f.write_str(v.as_str().unwrap_or_default())
    }
}

/// One line of the event log. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Seconds from job start.
    pub ts: f64,
    pub kind: EventKind,
    pub task_uid: Option<String>,
    pub node_ids: Option<Vec<u32>>,
    pub detail: String,
}

impl Event {
    pub fn job(ts: f64, kind: EventKind, detail: impl Into<String>) -> Self {
        Self {
            ts,
            kind,
            task_uid: None,
            node_ids: None,
            detail: detail.into(),
        }
    }

    pub fn task(
        ts: f64,
        kind: EventKind,
        uid: &str,
        nodes: Option<Vec<u32>>,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            ts,
            kind,
            task_uid: Some(uid.to_string()),
            node_ids: nodes,
            detail: detail.into(),
        }
    }

    /// Value of a `key=value` token in `detail`.
    pub fn detail_field(&self, key: &str) -> Option<&str> {
        detail_field(&self.detail, key)
    }
}

pub fn detail_field<'a>(detail: &'a str, key: &str) -> Option<&'a str> {
    detail.split_whitespace().find_map(|tok| {
        tok.split_once('=')
            .filter(|(k, _)| *k == key)
            .map(|(_, v)| v)
    })
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("event log I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Append-only record of one job; ground truth for every metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: Event) {
        debug_assert!(
            self.events.last().is_none_or(|e| e.ts <= event.ts),
            "event log timestamps must not decrease"
        );
        self.events.push(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.events.iter()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn first_of(&self, kind: EventKind) -> Option<&Event> {
        self.events.iter().find(|e| e.kind == kind)
    }

    pub fn job_start(&self) -> Option<&Event> {
        self.first_of(EventKind::JobStart)
    }

    pub fn job_end_ts(&self) -> Option<f64> {
        self.first_of(EventKind::JobEnd).map(|e| e.ts)
    }

    pub fn bootstrap_ts(&self) -> Option<f64> {
        self.first_of(EventKind::BootstrapDone).map(|e| e.ts)
    }

    /// Last terminal event per task uid, in first-seen order.
    pub fn terminal_events(&self) -> Vec<&Event> {
        let mut order: Vec<&str> = Vec::new();
        let mut last: std::collections::HashMap<&str, &Event> = Default::default();
        for e in self.events.iter().filter(|e| e.kind.is_task_terminal()) {
            if let Some(uid) = e.task_uid.as_deref() {
                if last.insert(uid, e).is_none() {
                    order.push(uid);
                }
            }
        }
        order.into_iter().map(|u| last[u]).collect()
    }

    /// JSON-lines serialization, one event per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        Self::read_from(text.as_bytes())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, LogError> {
        let mut events = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| LogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: Event = serde_json::from_str(&line).map_err(|e| LogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push(ev);
        }
        Ok(Self { events })
    }

    pub fn write(&self, path: &Path) -> Result<(), LogError> {
        let io = |source| LogError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, LogError> {
        let f = std::fs::File::open(path).map_err(|source| LogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_line_shape() {
        let mut log = EventLog::new();
        log.push(Event::job(0.0, EventKind::JobStart, "nodes=2"));
        log.push(Event::task(
            1.5,
            EventKind::TaskScheduled,
            "a",
            Some(vec![0, 1]),
            "cores=2 gpus=0",
        ));
        let text = log.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            r#"{"ts":0.0,"kind":"JOB_START","task_uid":null,"node_ids":null,"detail":"nodes=2"}"#
        );
        assert_eq!(
            lines[1],
            r#"{"ts":1.5,"kind":"TASK_SCHEDULED","task_uid":"a","node_ids":[0,1],"detail":"cores=2 gpus=0"}"#
        );
        assert_eq!(EventLog::from_jsonl(&text).unwrap(), log);
        assert_eq!(log.events[1].detail_field("cores"), Some("2"));
        assert_eq!(log.events[1].detail_field("mem"), None);
    }

    #[test]
    fn bad_line_reports_position() {
        let err = EventLog::from_jsonl("{\"ts\":0.0,\"kind\":\"JOB_START\",\"task_uid\":null,\"node_ids\":null,\"detail\":\"\"}\n{oops\n")
            .unwrap_err();
        assert!(matches!(err, LogError::Parse { line: 2, .. }));
    }

    #[test]
    fn kind_display_matches_wire_name() {
        assert_eq!(EventKind::NodeFailed.to_string(), "NODE_FAILED");
    }
}
