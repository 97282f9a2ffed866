//! Fiber graph: nodes, their ports, and the segments joining ports.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

macro_rules! string_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Identifier of a node (QKD endpoint or switch partition).
    NodeId
);
string_id!(
    /// Globally unique port identifier.
    PortId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    Alice,
    Bob,
    SwitchPartition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelClass {
    Quantum,
    Classical,
}

impl fmt::Display for ChannelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelClass::Quantum => "quantum",
            ChannelClass::Classical => "classical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: NodeRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortSpec {
    pub id: PortId,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberSegment {
    pub a: PortId,
    pub b: PortId,
    pub km: f64,
    pub class: ChannelClass,
}

impl FiberSegment {
    pub fn other_end(&self, port: &PortId) -> Option<&PortId> {
        if &self.a == port {
            Some(&self.b)
        } else if &self.b == port {
            Some(&self.a)
        } else {
            None
        }
    }
}

/// Serializable description of a topology, as found in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub nodes: Vec<NodeSpec>,
    pub ports: Vec<PortSpec>,
    pub segments: Vec<FiberSegment>,
}

impl TopologySpec {
    /// One Alice (`node1`) time-shared by one Bob per entry of `bob_km`
    /// (`node2`, `node3`, ...). Quantum and classical fibers land on two
    /// separate switch partitions, `sw-q` and `sw-c`, so every Alice-Bob
    /// path uses exactly one cross-connect.
    pub fn testbed(bob_km: &[f64]) -> Self {
        let mut nodes = vec![NodeSpec {
            id: "node1".into(),
            role: NodeRole::Alice,
        }];
        let mut ports = Vec::new();
        let mut segments = Vec::new();
        for (i, _) in bob_km.iter().enumerate() {
            nodes.push(NodeSpec {
                id: NodeId(format!("node{}", i + 2)),
                role: NodeRole::Bob,
            });
        }
        nodes.push(NodeSpec {
            id: "sw-q".into(),
            role: NodeRole::SwitchPartition,
        });
        nodes.push(NodeSpec {
            id: "sw-c".into(),
            role: NodeRole::SwitchPartition,
        });

        let lengths = std::iter::once(0.0).chain(bob_km.iter().copied());
        for (i, km) in lengths.enumerate() {
            let n = i + 1;
            let node = NodeId(format!("node{n}"));
            for (class, tag, sw) in [
                (ChannelClass::Quantum, "q", "sw-q"),
                (ChannelClass::Classical, "c", "sw-c"),
            ] {
                let end = PortId(format!("n{n}-{tag}"));
                let sw_port = PortId(format!("sw{tag}-{n}"));
                ports.push(PortSpec {
                    id: end.clone(),
                    node: node.clone(),
                });
                ports.push(PortSpec {
                    id: sw_port.clone(),
                    node: sw.into(),
                });
                segments.push(FiberSegment {
                    a: end,
                    b: sw_port,
                    km,
                    class,
                });
            }
        }
        Self {
            nodes,
            ports,
            segments,
        }
    }
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self::testbed(&[0.0, 10.0, 25.0])
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(NodeId),
    #[error("duplicate port id `{0}`")]
    DuplicatePort(PortId),
    #[error("port `{port}` references unknown node `{node}`")]
    UnknownOwner { port: PortId, node: NodeId },
    #[error("segment references unknown port `{0}`")]
    UnknownPort(PortId),
    #[error("segment joins port `{0}` to itself")]
    SelfLoop(PortId),
    #[error("port `{0}` terminates more than one fiber segment")]
    PortReused(PortId),
    #[error("segment {a}-{b} has invalid length {km} km")]
    BadLength { a: PortId, b: PortId, km: f64 },
}

/// Validated, indexed topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    roles: BTreeMap<NodeId, NodeRole>,
    owners: BTreeMap<PortId, NodeId>,
    node_ports: BTreeMap<NodeId, Vec<PortId>>,
    segments: Vec<FiberSegment>,
    segment_at: BTreeMap<PortId, usize>,
}

impl Topology {
    pub fn new(spec: &TopologySpec) -> Result<Self, TopologyError> {
        let mut roles = BTreeMap::new();
        for n in &spec.nodes {
            if roles.insert(n.id.clone(), n.role).is_some() {
                return Err(TopologyError::DuplicateNode(n.id.clone()));
            }
        }
        let mut owners = BTreeMap::new();
        let mut node_ports: BTreeMap<NodeId, Vec<PortId>> =
            roles.keys().map(|n| (n.clone(), Vec::new())).collect();
        for p in &spec.ports {
            let Some(list) = node_ports.get_mut(&p.node) else {
                return Err(TopologyError::UnknownOwner {
                    port: p.id.clone(),
                    node: p.node.clone(),
                });
            };
            if owners.insert(p.id.clone(), p.node.clone()).is_some() {
                return Err(TopologyError::DuplicatePort(p.id.clone()));
            }
            list.push(p.id.clone());
        }
        for list in node_ports.values_mut() {
            list.sort();
        }
        let mut segment_at = BTreeMap::new();
        for (i, s) in spec.segments.iter().enumerate() {
            for p in [&s.a, &s.b] {
                if !owners.contains_key(p) {
                    return Err(TopologyError::UnknownPort(p.clone()));
                }
            }
            if s.a == s.b {
                return Err(TopologyError::SelfLoop(s.a.clone()));
            }
            if !s.km.is_finite() || s.km < 0.0 {
                return Err(TopologyError::BadLength {
                    a: s.a.clone(),
                    b: s.b.clone(),
                    km: s.km,
                });
            }
            for p in [&s.a, &s.b] {
                if segment_at.insert(p.clone(), i).is_some() {
                    return Err(TopologyError::PortReused(p.clone()));
                }
            }
        }
        Ok(Self {
            roles,
            owners,
            node_ports,
            segments: spec.segments.clone(),
            segment_at,
        })
    }

    pub fn role(&self, node: &NodeId) -> Option<NodeRole> {
        self.roles.get(node).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, NodeRole)> {
        self.roles.iter().map(|(n, r)| (n, *r))
    }

    pub fn nodes_with_role(&self, role: NodeRole) -> Vec<NodeId> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn owner(&self, port: &PortId) -> Option<&NodeId> {
        self.owners.get(port)
    }

    pub fn has_port(&self, port: &PortId) -> bool {
        self.owners.contains_key(port)
    }

    /// Ports of `node`, sorted by id.
    pub fn ports_of(&self, node: &NodeId) -> &[PortId] {
        self.node_ports.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn segment_at(&self, port: &PortId) -> Option<&FiberSegment> {
        self.segment_at.get(port).map(|&i| &self.segments[i])
    }

    pub fn segments(&self) -> &[FiberSegment] {
        &self.segments
    }

    /// Segment joining exactly these two ports, if any.
    pub fn segment_between(&self, a: &PortId, b: &PortId) -> Option<&FiberSegment> {
        self.segment_at(a).filter(|s| s.other_end(a) == Some(b))
    }
}
