//! Sequential time-sharing of the single Alice across many Bobs.
//!
//! A schedule is planned in closed form ([`build_schedule`]) and then run on
//! the emulated testbed ([`execute_schedule`]): for each entry the quantum
//! path is set up, the QKD session initializes and generates until the
//! demanded bits sit in both key stores, and the path is released before
//! the next Bob is served.

use crate::clock::Clock;
use crate::link_model::{LinkModel, LinkModelError};
use crate::network::{compute_path, NetworkError, OpticalNetwork, Path, SWITCHING_DELAY_S};
use crate::session::{QkdSession, SessionError};
use crate::testbed::Testbed;
use crate::topology::{ChannelClass, NodeId, NodeRole};
use crate::trace::{Trace, TraceEvent};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyDemand {
    pub bob: NodeId,
    pub bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    #[default]
    Fifo,
    ShortestDistanceFirst,
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::Fifo => "fifo",
            Policy::ShortestDistanceFirst => "shortest-distance-first",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("demand for `{0}` must request at least one bit")]
    EmptyDemand(NodeId),
    #[error("`{0}` is not a Bob node")]
    NotABob(NodeId),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Model(#[from] LinkModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub bob: NodeId,
    pub requested_bits: u64,
    pub start: f64,
    /// Switching time for path setup plus teardown.
    pub switch: f64,
    pub init: f64,
    pub generation: f64,
    pub end: f64,
    pub path: Path,
}

impl ScheduleEntry {
    pub fn distance_km(&self) -> f64 {
        self.path.length_km
    }

    pub fn duration(&self) -> f64 {
        self.switch + self.init + self.generation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub entries: Vec<ScheduleEntry>,
    pub makespan: f64,
    pub policy: Policy,
}

impl Schedule {
    /// `bob,start,switch,init,generation,end`, one row per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bob,start,switch,init,generation,end\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                e.bob, e.start, e.switch, e.init, e.generation, e.end
            );
        }
        out
    }
}

pub fn build_schedule(
    demands: &[KeyDemand],
    network: &OpticalNetwork,
    alice: &NodeId,
    model: &dyn LinkModel<f64>,
    block_bits: u32,
    policy: Policy,
) -> Result<Schedule, ScheduleError> {
    let idle = BTreeSet::new();
    let block = u64::from(block_bits.max(1));
    let mut planned = Vec::with_capacity(demands.len());
    for d in demands {
        if d.bits == 0 {
            return Err(ScheduleError::EmptyDemand(d.bob.clone()));
        }
        match network.topology().role(&d.bob) {
            Some(NodeRole::Bob) => {}
            Some(_) => return Err(ScheduleError::NotABob(d.bob.clone())),
            None => return Err(NetworkError::UnknownNode(d.bob.clone()).into()),
        }
        let path = compute_path(
            network.topology(),
            &idle,
            alice,
            &d.bob,
            ChannelClass::Quantum,
        )?;
        let km = path.length_km;
        let blocks = d.bits.div_ceil(block);
        planned.push(ScheduleEntry {
            bob: d.bob.clone(),
            requested_bits: d.bits,
            start: 0.0,
            switch: SWITCHING_DELAY_S * 2.0 * path.hops.len() as f64,
            init: model.init_time_s(km)?,
            generation: (blocks * block) as f64 / model.secret_key_rate_bps(km)?,
            end: 0.0,
            path,
        });
    }
    if policy == Policy::ShortestDistanceFirst {
        planned.sort_by(|a, b| {
            a.distance_km()
                .total_cmp(&b.distance_km())
                .then_with(|| a.bob.cmp(&b.bob))
        });
    }
    let mut t = 0.0;
    for e in &mut planned {
        e.start = t;
        e.end = e.start + e.switch + e.init + e.generation;
        t = e.end;
    }
    Ok(Schedule {
        entries: planned,
        makespan: t,
        policy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryStatus {
    Completed,
    Failed(String),
    NotRun,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutedEntry {
    pub bob: NodeId,
    pub requested_bits: u64,
    pub delivered_bits: u64,
    /// Planned start/end, shifted to the execution's start time.
    pub planned_start: f64,
    pub planned_end: f64,
    pub start: f64,
    pub end: f64,
    pub status: EntryStatus,
}

#[derive(Debug, Clone)]
pub struct ExecutionReport {
    pub entries: Vec<ExecutedEntry>,
    pub started_at: f64,
    pub finished_at: f64,
    pub trace: Trace,
    pub failure: Option<ScheduleError>,
}

impl ExecutionReport {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "bob,planned_start,planned_end,executed_start,executed_end,requested_bits,delivered_bits,status\n",
        );
        for e in &self.entries {
            let status = match &e.status {
                EntryStatus::Completed => "completed".to_string(),
                EntryStatus::Failed(why) => format!("failed: {}", why.replace(',', ";")),
                EntryStatus::NotRun => "not-run".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                e.bob,
                e.planned_start,
                e.planned_end,
                e.start,
                e.end,
                e.requested_bits,
                e.delivered_bits,
                status
            );
        }
        out
    }
}

/// Run `schedule` on the testbed, advancing `clock`.
pub fn execute_schedule(
    schedule: &Schedule,
    testbed: &mut Testbed,
    clock: &mut dyn Clock,
) -> ExecutionReport {
    execute_schedule_with(schedule, testbed, clock, |_, _, _, _| {})
}

/// As [`execute_schedule`], calling `before_entry(index, network, clock,
/// trace)` ahead of each entry. Used to inject faults.
pub fn execute_schedule_with(
    schedule: &Schedule,
    testbed: &mut Testbed,
    clock: &mut dyn Clock,
    mut before_entry: impl FnMut(usize, &mut OpticalNetwork, &mut dyn Clock, &mut Trace),
) -> ExecutionReport {
    let started_at = clock.now();
    let mut trace = Trace::new();
    let mut entries: Vec<ExecutedEntry> = schedule
        .entries
        .iter()
        .map(|e| ExecutedEntry {
            bob: e.bob.clone(),
            requested_bits: e.requested_bits,
            delivered_bits: 0,
            planned_start: started_at + e.start,
            planned_end: started_at + e.end,
            start: f64::NAN,
            end: f64::NAN,
            status: EntryStatus::NotRun,
        })
        .collect();
    let mut failure = None;
    for (i, planned) in schedule.entries.iter().enumerate() {
        before_entry(i, &mut testbed.network, clock, &mut trace);
        entries[i].start = clock.now();
        match run_entry(planned, testbed, clock, &mut trace) {
            Ok(delivered) => {
                entries[i].delivered_bits = delivered;
                entries[i].status = EntryStatus::Completed;
                entries[i].end = clock.now();
            }
            Err(e) => {
                entries[i].status = EntryStatus::Failed(e.to_string());
                entries[i].end = clock.now();
                failure = Some(e);
                break;
            }
        }
    }
    ExecutionReport {
        entries,
        started_at,
        finished_at: clock.now(),
        trace,
        failure,
    }
}

/// Serve one Bob: path up, session to completion, path down.
/// Returns the bits banked in both stores.
fn run_entry(
    entry: &ScheduleEntry,
    tb: &mut Testbed,
    clock: &mut dyn Clock,
    trace: &mut Trace,
) -> Result<u64, ScheduleError> {
    let alice = tb.alice.node().clone();
    let seed = tb.next_session_seed();
    let mut session = QkdSession::new(alice, entry.bob.clone(), tb.params.block_bits, seed)?;
    session.request_path(clock.now(), trace)?;
    if let Err(e) = tb.network.establish_path(&entry.path, clock, trace) {
        tb.alice.stop_session(&mut session, clock.now(), trace);
        return Err(e.into());
    }
    let generated = generate(entry, tb, &mut session, clock, trace);
    tb.alice.stop_session(&mut session, clock.now(), trace);
    tb.network.teardown_path(&entry.path, clock, trace)?;
    generated
}

fn generate(
    entry: &ScheduleEntry,
    tb: &mut Testbed,
    session: &mut QkdSession,
    clock: &mut dyn Clock,
    trace: &mut Trace,
) -> Result<u64, ScheduleError> {
    let model = &tb.model;
    tb.alice.start_session(
        session,
        entry.path.clone(),
        &tb.network,
        model,
        clock.now(),
        trace,
    )?;
    let tick = tb.params.tick_s;
    let on_grid = |t: f64| {
        let k = t / tick;
        let r = k.round();
        if (k - r).abs() < 1e-6 {
            r * tick
        } else {
            k.ceil() * tick
        }
    };
    let target = session.time_to_bank(entry.requested_bits, model)?;
    if entry.path.length_km > tb.model.reference_km {
        trace.push(
            clock.now(),
            TraceEvent::Warning(format!(
                "{} km to {} is beyond the calibrated link range",
                entry.path.length_km, entry.bob
            )),
        );
    }
    loop {
        let now = clock.now();
        // periodic banks sit on the tick grid; the completing bank is the
        // exact event time
        let next = on_grid(now + tb.params.bank_interval_s).min(target);
        let next = if next <= now {
            on_grid(now + tick)
        } else {
            next
        };
        clock.advance_to(next);
        {
            let mut keys = tb.keys.lock().expect("key registry lock poisoned");
            session.advance(clock.now(), model, &mut keys, trace)?;
        }
        if session.bits_cut() >= entry.requested_bits {
            return Ok(session.bits_cut());
        }
    }
}

/// Number of times a session reached `initializing` while another session
/// on the same Alice had not yet been torn down.
pub fn exclusivity_violations(trace: &Trace) -> usize {
    use crate::session::Phase;
    let mut open: Vec<(NodeId, NodeId)> = Vec::new();
    let mut violations = 0;
    for r in trace.records() {
        if let TraceEvent::Session { alice, bob, phase } = &r.event {
            match phase {
                Phase::Initializing { .. } => {
                    if open.iter().any(|(a, _)| a == alice) {
                        violations += 1;
                    }
                    open.push((alice.clone(), bob.clone()));
                }
                Phase::TornDown => {
                    if let Some(i) = open.iter().position(|(a, b)| a == alice && b == bob) {
                        open.remove(i);
                    }
                }
                _ => {}
            }
        }
    }
    violations
}
