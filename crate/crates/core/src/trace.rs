//! Typed event trace shared by the network, sessions and orchestrator.
//!
//! Each record renders as one text line starting with a fixed-precision
//! timestamp, so simulated runs with equal seeds produce identical logs.

use crate::network::ControlKind;
use crate::session::Phase;
use crate::topology::{NodeId, PortId};
use crate::wire::MessageKind;
use std::fmt;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Control {
        correlation: u64,
        kind: ControlKind,
        ingress: PortId,
        egress: PortId,
    },
    Session {
        alice: NodeId,
        bob: NodeId,
        phase: Phase,
    },
    KeysBanked {
        alice: NodeId,
        bob: NodeId,
        blocks: u64,
        bits: u64,
    },
    Message {
        from: String,
        to: String,
        kind: MessageKind,
        size: usize,
        job: u64,
    },
    Warning(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time_s: f64,
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} ", self.time_s)?;
        match &self.event {
            TraceEvent::Control {
                correlation,
                kind,
                ingress,
                egress,
            } => {
                write!(f, "control {kind} {ingress} {egress} corr={correlation}")
            }
            TraceEvent::Session { alice, bob, phase } => {
                write!(f, "session {alice}<->{bob} {phase}")
            }
            TraceEvent::KeysBanked {
                alice,
                bob,
                blocks,
                bits,
            } => {
                write!(f, "keys {alice}<->{bob} blocks={blocks} bits={bits}")
            }
            TraceEvent::Message {
                from,
                to,
                kind,
                size,
                job,
            } => {
                write!(f, "msg {from}->{to} {kind} size={size} job={job}")
            }
            TraceEvent::Warning(text) => write!(f, "warn {text}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time_s: f64, event: TraceEvent) {
        self.records.push(TraceRecord { time_s, event });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: Trace) {
        self.records.extend(other.records);
    }

    /// Wire messages belonging to one job, in order.
    pub fn job_messages(&self, job: u64) -> impl Iterator<Item = (f64, MessageKind)> + '_ {
        self.records.iter().filter_map(move |r| match &r.event {
            TraceEvent::Message { kind, job: j, .. } if *j == job => Some((r.time_s, *kind)),
            _ => None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}

/// Trace handle for components running on several threads.
#[derive(Debug, Clone, Default)]
pub struct SharedTrace(Arc<Mutex<Trace>>);

impl SharedTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, time_s: f64, event: TraceEvent) {
        self.0
            .lock()
            .expect("trace lock poisoned")
            .push(time_s, event);
    }

    pub fn snapshot(&self) -> Trace {
        self.0.lock().expect("trace lock poisoned").clone()
    }
}
