//! Newline-delimited JSON event log.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStart,
    Release,
    Expired,
    Assignment,
    Plan,
    Replan,
    Planning,
    Trigger,
    Hold,
    Failure,
    Recovery,
    Corridor,
    CorridorEnd,
    Collision,
    Intrusion,
    Stage,
    Completion,
    CommandRejected,
    RunEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: u32,
    pub kind: EventKind,
    pub payload: Value,
}

/// In-memory log. Recording can be switched off for bulk experiments; the
/// `recent` window still feeds live observers.
#[derive(Clone, Debug, Default)]
pub struct EventLog {
    pub record: bool,
    events: Vec<Event>,
    recent: Vec<Event>,
    pub keep_recent: bool,
}

impl EventLog {
    pub fn new(record: bool) -> Self {
        Self {
            record,
            ..Self::default()
        }
    }

    pub fn push(&mut self, step: u32, kind: EventKind, payload: Value) {
        if !self.record && !self.keep_recent {
            return;
        }
        let e = Event { step, kind, payload };
        if self.keep_recent {
            self.recent.push(e.clone());
        }
        if self.record {
            self.events.push(e);
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Events since the previous call.
    pub fn drain_recent(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.recent)
    }
}

pub fn write_jsonl<W: Write>(events: &[Event], mut out: W) -> Result<(), SimError> {
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(|e| SimError::Config(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl(events: &[Event]) -> String {
    let mut buf = Vec::new();
    write_jsonl(events, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Event>, SimError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Event =
            serde_json::from_str(&line).map_err(|e| SimError::Config(format!("event log line {}: {e}", i + 1)))?;
        out.push(e);
    }
    Ok(out)
}
