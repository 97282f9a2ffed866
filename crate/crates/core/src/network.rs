//! Emulated SDN-controlled optical circuit switch.
//!
//! The switch is a set of partitions (topology nodes with role
//! `switch-partition`). A cross-connect joins two ports of one partition and
//! holds both exclusively. All state changes go through
//! [`OpticalNetwork::apply_control`], which charges the switching delay to the
//! caller's clock and records the message in the trace.

use crate::clock::Clock;
use crate::topology::{ChannelClass, NodeId, NodeRole, PortId, Topology};
use crate::trace::{Trace, TraceEvent};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use thiserror::Error;

/// Reconfiguration time of the beam-steering switch, per cross-connect.
pub const SWITCHING_DELAY_S: f64 = 0.025;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("unknown port `{0}`")]
    UnknownPort(PortId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("ports `{0}` and `{1}` are not on the same switch partition")]
    NotSwitchable(PortId, PortId),
    #[error("port `{0}` already carries an active cross-connect")]
    PortBusy(PortId),
    #[error("no active cross-connect {0} -> {1}")]
    NotFound(PortId, PortId),
    #[error("correlation id {0} was already used")]
    DuplicateCorrelation(u64),
    #[error("no free {class} path from `{from}` to `{to}`")]
    NoPath {
        from: NodeId,
        to: NodeId,
        class: ChannelClass,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlKind {
    AddCrossConnect,
    RemoveCrossConnect,
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlKind::AddCrossConnect => "add-crossconnect",
            ControlKind::RemoveCrossConnect => "remove-crossconnect",
        })
    }
}

/// Flow-mod-like instruction to the switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMessage {
    pub kind: ControlKind,
    pub ingress: PortId,
    pub egress: PortId,
    pub correlation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossConnect {
    pub ingress: PortId,
    pub egress: PortId,
    pub established_at: f64,
}

/// Ordered ingress/egress pair of a cross-connect on a path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hop {
    pub ingress: PortId,
    pub egress: PortId,
}

/// Port-level route between two endpoint nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub from: NodeId,
    pub to: NodeId,
    pub class: ChannelClass,
    /// Every port visited, starting at a port of `from` and ending at a port
    /// of `to`. Consecutive pairs (0,1), (2,3), ... are fiber segments; pairs
    /// (1,2), (3,4), ... are cross-connects.
    pub ports: Vec<PortId>,
    pub hops: Vec<Hop>,
    pub length_km: f64,
}

impl Path {
    fn empty(node: &NodeId, class: ChannelClass) -> Self {
        Self {
            from: node.clone(),
            to: node.clone(),
            class,
            ports: Vec::new(),
            hops: Vec::new(),
            length_km: 0.0,
        }
    }
}

/// Active cross-connects; a partial matching on ports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwitchState {
    connects: BTreeMap<Hop, CrossConnect>,
    busy: BTreeSet<PortId>,
}

impl SwitchState {
    pub fn is_busy(&self, port: &PortId) -> bool {
        self.busy.contains(port)
    }

    pub fn cross_connects(&self) -> impl Iterator<Item = &CrossConnect> {
        self.connects.values()
    }

    pub fn len(&self) -> usize {
        self.connects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.connects.is_empty()
    }

    pub fn contains(&self, hop: &Hop) -> bool {
        self.connects.contains_key(hop)
    }
}

#[derive(Debug, Clone)]
pub struct OpticalNetwork {
    topology: Topology,
    switch: SwitchState,
    next_correlation: u64,
    used_correlations: BTreeSet<u64>,
}

impl OpticalNetwork {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            switch: SwitchState::default(),
            next_correlation: 1,
            used_correlations: BTreeSet::new(),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn switch(&self) -> &SwitchState {
        &self.switch
    }

    /// Build a control message with a fresh correlation id.
    pub fn control_message(
        &mut self,
        kind: ControlKind,
        ingress: PortId,
        egress: PortId,
    ) -> ControlMessage {
        let correlation = self.next_correlation;
        self.next_correlation += 1;
        ControlMessage {
            kind,
            ingress,
            egress,
            correlation,
        }
    }

    pub fn apply_control(
        &mut self,
        msg: &ControlMessage,
        clock: &mut dyn Clock,
        trace: &mut Trace,
    ) -> Result<(), NetworkError> {
        let (ing, eg) = (&msg.ingress, &msg.egress);
        for p in [ing, eg] {
            if !self.topology.has_port(p) {
                return Err(NetworkError::UnknownPort(p.clone()));
            }
        }
        if self.used_correlations.contains(&msg.correlation) {
            return Err(NetworkError::DuplicateCorrelation(msg.correlation));
        }
        let hop = Hop {
            ingress: ing.clone(),
            egress: eg.clone(),
        };
        match msg.kind {
            ControlKind::AddCrossConnect => {
                if !self.switchable(ing, eg) {
                    return Err(NetworkError::NotSwitchable(ing.clone(), eg.clone()));
                }
                for p in [ing, eg] {
                    if self.switch.busy.contains(p) {
                        return Err(NetworkError::PortBusy(p.clone()));
                    }
                }
                clock.charge(SWITCHING_DELAY_S);
                let cc = CrossConnect {
                    ingress: ing.clone(),
                    egress: eg.clone(),
                    established_at: clock.now(),
                };
                self.switch.busy.insert(ing.clone());
                self.switch.busy.insert(eg.clone());
                self.switch.connects.insert(hop, cc);
            }
            ControlKind::RemoveCrossConnect => {
                if self.switch.connects.remove(&hop).is_none() {
                    return Err(NetworkError::NotFound(ing.clone(), eg.clone()));
                }
                self.switch.busy.remove(ing);
                self.switch.busy.remove(eg);
                clock.charge(SWITCHING_DELAY_S);
            }
        }
        self.used_correlations.insert(msg.correlation);
        if self.next_correlation <= msg.correlation {
            self.next_correlation = msg.correlation + 1;
        }
        trace.push(
            clock.now(),
            TraceEvent::Control {
                correlation: msg.correlation,
                kind: msg.kind,
                ingress: ing.clone(),
                egress: eg.clone(),
            },
        );
        Ok(())
    }

    fn switchable(&self, a: &PortId, b: &PortId) -> bool {
        if a == b {
            return false;
        }
        match (self.topology.owner(a), self.topology.owner(b)) {
            (Some(x), Some(y)) => {
                x == y && self.topology.role(x) == Some(NodeRole::SwitchPartition)
            }
            _ => false,
        }
    }

    /// Shortest free path of the requested class, given current switch state.
    pub fn compute_path(
        &self,
        from: &NodeId,
        to: &NodeId,
        class: ChannelClass,
    ) -> Result<Path, NetworkError> {
        compute_path(&self.topology, &self.switch.busy, from, to, class)
    }

    /// Apply every hop of `path`. On failure, hops already applied by this
    /// call are removed again before the error is returned.
    pub fn establish_path(
        &mut self,
        path: &Path,
        clock: &mut dyn Clock,
        trace: &mut Trace,
    ) -> Result<Vec<ControlMessage>, NetworkError> {
        self.run_hops(path.hops.iter(), ControlKind::AddCrossConnect, clock, trace)
    }

    /// Remove every hop of `path`, in reverse order.
    pub fn teardown_path(
        &mut self,
        path: &Path,
        clock: &mut dyn Clock,
        trace: &mut Trace,
    ) -> Result<Vec<ControlMessage>, NetworkError> {
        self.run_hops(
            path.hops.iter().rev(),
            ControlKind::RemoveCrossConnect,
            clock,
            trace,
        )
    }

    fn run_hops<'a>(
        &mut self,
        hops: impl Iterator<Item = &'a Hop>,
        kind: ControlKind,
        clock: &mut dyn Clock,
        trace: &mut Trace,
    ) -> Result<Vec<ControlMessage>, NetworkError> {
        let inverse = match kind {
            ControlKind::AddCrossConnect => ControlKind::RemoveCrossConnect,
            ControlKind::RemoveCrossConnect => ControlKind::AddCrossConnect,
        };
        let mut applied: Vec<ControlMessage> = Vec::new();
        for hop in hops {
            let msg = self.control_message(kind, hop.ingress.clone(), hop.egress.clone());
            if let Err(e) = self.apply_control(&msg, clock, trace) {
                for done in applied.iter().rev() {
                    let undo =
                        self.control_message(inverse, done.ingress.clone(), done.egress.clone());
                    self.apply_control(&undo, clock, trace)
                        .expect("rollback of a just-applied cross-connect");
                }
                return Err(e);
            }
            applied.push(msg);
        }
        Ok(applied)
    }

    pub fn is_established(&self, path: &Path) -> bool {
        path.hops.iter().all(|h| self.switch.contains(h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Next {
    /// Standing on a port; the next move crosses its fiber.
    Fiber,
    /// Just arrived over a fiber; the next move is a cross-connect.
    Switch,
}

#[derive(Debug, PartialEq)]
struct Frontier {
    km: f64,
    ports: Vec<PortId>,
    next: Next,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    // reversed: BinaryHeap pops the shortest, then lexicographically smallest
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .km
            .total_cmp(&self.km)
            .then_with(|| other.ports.cmp(&self.ports))
            .then_with(|| other.next.cmp(&self.next))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over (port, next-move) states. Only switch partitions may be
/// transited; ties on length are broken by the lexicographic port sequence.
pub fn compute_path(
    topology: &Topology,
    busy: &BTreeSet<PortId>,
    from: &NodeId,
    to: &NodeId,
    class: ChannelClass,
) -> Result<Path, NetworkError> {
    for n in [from, to] {
        if topology.role(n).is_none() {
            return Err(NetworkError::UnknownNode(n.clone()));
        }
    }
    if from == to {
        return Ok(Path::empty(from, class));
    }
    let mut heap = BinaryHeap::new();
    for p in topology.ports_of(from) {
        heap.push(Frontier {
            km: 0.0,
            ports: vec![p.clone()],
            next: Next::Fiber,
        });
    }
    let mut settled: BTreeSet<(PortId, Next)> = BTreeSet::new();
    while let Some(Frontier { km, ports, next }) = heap.pop() {
        let here = ports
            .last()
            .expect("frontier paths are never empty")
            .clone();
        if !settled.insert((here.clone(), next)) {
            continue;
        }
        match next {
            Next::Fiber => {
                let Some(seg) = topology.segment_at(&here) else {
                    continue;
                };
                if seg.class != class {
                    continue;
                }
                let there = seg
                    .other_end(&here)
                    .expect("segment contains its port")
                    .clone();
                if ports.contains(&there) {
                    continue;
                }
                let mut next_ports = ports.clone();
                next_ports.push(there);
                heap.push(Frontier {
                    km: km + seg.km,
                    ports: next_ports,
                    next: Next::Switch,
                });
            }
            Next::Switch => {
                let owner = topology.owner(&here).expect("validated port");
                if owner == to {
                    return Ok(finish(from, to, class, ports, km));
                }
                if topology.role(owner) != Some(NodeRole::SwitchPartition) || busy.contains(&here) {
                    continue;
                }
                for out in topology.ports_of(owner) {
                    if out == &here || busy.contains(out) || ports.contains(out) {
                        continue;
                    }
                    let mut next_ports = ports.clone();
                    next_ports.push(out.clone());
                    heap.push(Frontier {
                        km,
                        ports: next_ports,
                        next: Next::Fiber,
                    });
                }
            }
        }
    }
    Err(NetworkError::NoPath {
        from: from.clone(),
        to: to.clone(),
        class,
    })
}

fn finish(from: &NodeId, to: &NodeId, class: ChannelClass, ports: Vec<PortId>, km: f64) -> Path {
    let hops = ports
        .iter()
        .skip(1)
        .step_by(2)
        .zip(ports.iter().skip(2).step_by(2))
        .map(|(i, e)| Hop {
            ingress: i.clone(),
            egress: e.clone(),
        })
        .collect();
    Path {
        from: from.clone(),
        to: to.clone(),
        class,
        ports,
        hops,
        length_km: km,
    }
}
