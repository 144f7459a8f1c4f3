//! Append-only JSONL run log: one header line, then one event per line.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::RunConfig;

pub const LOG_SCHEMA: &str = "promptbo-runlog";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogError {
    #[error("run log I/O error: {0}")]
    Io(String),
    #[error("run log is corrupt at line {line}: {message}")]
    LogCorrupt { line: usize, message: String },
}

impl From<std::io::Error> for LogError {
    fn from(e: std::io::Error) -> Self {
        LogError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    D0Generated,
    Evaluation,
    ElicitationCandidate,
    IncumbentRescored,
    FeatureSetSelected,
    GpFitted,
    TargetsSelected,
    Realization,
    Diagnostic,
    BaselineStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogEvent {
    pub sequence_no: u64,
    pub event_kind: EventKind,
    pub round: usize,
    pub payload: Value,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    /// `reelicit` or a baseline name.
    pub method: String,
    /// Ablation mode for `reelicit`, absent for baselines.
    pub mode: Option<String>,
    pub config_digest: String,
    pub config: RunConfig,
}

impl LogHeader {
    pub fn new(method: &str, mode: Option<&str>, config: &RunConfig) -> Self {
        Self {
            schema: LOG_SCHEMA.into(),
            version: LOG_VERSION,
            method: method.into(),
            mode: mode.map(str::to_string),
            config_digest: config.digest(),
            config: config.clone(),
        }
    }

    /// Method label as used in reports, e.g. `reelicit`, `reelicit_no_bo`, `opro`.
    pub fn label(&self) -> String {
        match self.mode.as_deref() {
            None | Some("full") => self.method.clone(),
            Some(m) => format!("{}_{m}", self.method),
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// In-memory event list, mirrored to a file when a path is given. Every
/// append is flushed, so a crash leaves a valid prefix.
#[derive(Debug)]
pub struct RunLog {
    header: LogHeader,
    events: Vec<RunLogEvent>,
    file: Option<File>,
    path: Option<PathBuf>,
}

impl RunLog {
    pub fn in_memory(header: LogHeader) -> Self {
        Self {
            header,
            events: Vec::new(),
            file: None,
            path: None,
        }
    }

    /// Creates (truncating) a log file and writes the header.
    pub fn create(path: &Path, header: LogHeader) -> Result<Self, LogError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = File::create(path)?;
        writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        file.flush()?;
        Ok(Self {
            header,
            events: Vec::new(),
            file: Some(file),
            path: Some(path.to_path_buf()),
        })
    }

    /// Rewrites `path` with `header` and `events`, then keeps appending.
    pub fn rewrite(path: &Path, header: LogHeader, events: Vec<RunLogEvent>) -> Result<Self, LogError> {
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut f = File::create(&tmp)?;
            writeln!(f, "{}", serde_json::to_string(&header).expect("header serializes"))?;
            for e in &events {
                writeln!(f, "{}", serde_json::to_string(e).expect("event serializes"))?;
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            header,
            events,
            file: Some(file),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn header(&self) -> &LogHeader {
        &self.header
    }

    pub fn events(&self) -> &[RunLogEvent] {
        &self.events
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&mut self, kind: EventKind, round: usize, payload: Value) -> Result<&RunLogEvent, LogError> {
        let sequence_no = self.events.last().map_or(0, |e| e.sequence_no + 1);
        let event = RunLogEvent {
            sequence_no,
            event_kind: kind,
            round,
            payload,
            timestamp: now(),
        };
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&event).expect("event serializes"))?;
            f.flush()?;
        }
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }

    pub fn into_events(self) -> Vec<RunLogEvent> {
        self.events
    }
}

/// Reads a log. A final line without a newline that fails to parse is taken
/// as an interrupted write and dropped.
pub fn read_log(path: &Path) -> Result<(LogHeader, Vec<RunLogEvent>), LogError> {
    let text = std::fs::read_to_string(path)?;
    parse_log(&text)
}

pub fn parse_log(text: &str) -> Result<(LogHeader, Vec<RunLogEvent>), LogError> {
    let complete_tail = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let Some(first) = lines.first() else {
        return Err(LogError::LogCorrupt {
            line: 1,
            message: "empty log".into(),
        });
    };
    let header: LogHeader = serde_json::from_str(first).map_err(|e| LogError::LogCorrupt {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema != LOG_SCHEMA || header.version != LOG_VERSION {
        return Err(LogError::LogCorrupt {
            line: 1,
            message: format!("unsupported schema {} v{}", header.schema, header.version),
        });
    }
    let mut events: Vec<RunLogEvent> = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunLogEvent>(line) {
            Ok(e) => {
                if let Some(prev) = events.last() {
                    if e.sequence_no <= prev.sequence_no {
                        return Err(LogError::LogCorrupt {
                            line: i + 1,
                            message: "sequence numbers must increase".into(),
                        });
                    }
                }
                events.push(e);
            }
            Err(_) if i + 1 == lines.len() && !complete_tail => {
                log::warn!("dropping truncated final log line");
            }
            Err(e) => {
                return Err(LogError::LogCorrupt {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((header, events))
}

/// Events with timestamps blanked, for comparing runs.
pub fn without_timestamps(events: &[RunLogEvent]) -> Vec<RunLogEvent> {
    events
        .iter()
        .cloned()
        .map(|mut e| {
            e.timestamp.clear();
            e
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_and_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut log = RunLog::create(&path, LogHeader::new("reelicit", Some("full"), &RunConfig::default())).unwrap();
        log.append(EventKind::D0Generated, 0, json!({"n": 5})).unwrap();
        log.append(EventKind::Evaluation, 0, json!({"score": 0.5})).unwrap();
        let (h, ev) = read_log(&path).unwrap();
        assert_eq!(h.method, "reelicit");
        assert_eq!(without_timestamps(&ev), without_timestamps(log.events()));
        assert_eq!(ev[1].sequence_no, 1);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"sequence_no\": 2, \"event_");
        let (_, ev) = parse_log(&text).unwrap();
        assert_eq!(ev.len(), 2);
        text.push('\n');
        assert!(matches!(parse_log(&text), Err(LogError::LogCorrupt { line: 4, .. })));
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(parse_log("").is_err());
        assert!(parse_log("{\"hello\": 1}\n").is_err());
    }

    #[test]
    fn event_kinds_are_snake_case() {
        assert_eq!(serde_json::to_string(&EventKind::FeatureSetSelected).unwrap(), "\"feature_set_selected\"");
        assert_eq!(serde_json::to_string(&EventKind::D0Generated).unwrap(), "\"d0_generated\"");
    }
}
