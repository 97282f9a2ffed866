//! Everything the scheduler and orchestrator act upon: the optical network,
//! the shared Alice, the key stores and the link model.

use crate::link_model::ChannelModel;
use crate::network::OpticalNetwork;
use crate::session::{AliceDevice, KeyRegistry, SharedKeys, DEFAULT_BLOCK_BITS};
use crate::topology::{NodeId, NodeRole, Topology};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestbedParams {
    pub block_bits: u32,
    /// Simulation tick, s.
    pub tick_s: f64,
    /// Interval at which generating sessions bank keys, s.
    pub bank_interval_s: f64,
    pub seed: u64,
}

impl Default for TestbedParams {
    fn default() -> Self {
        Self {
            block_bits: DEFAULT_BLOCK_BITS,
            tick_s: 1e-3,
            bank_interval_s: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct Testbed {
    pub network: OpticalNetwork,
    pub alice: AliceDevice,
    pub keys: SharedKeys,
    pub model: ChannelModel<f64>,
    pub params: TestbedParams,
    sessions_started: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TestbedError {
    #[error("topology must contain exactly one alice node, found {0}")]
    AliceCount(usize),
}

impl Testbed {
    pub fn new(
        topology: Topology,
        model: ChannelModel<f64>,
        params: TestbedParams,
    ) -> Result<Self, TestbedError> {
        let alices = topology.nodes_with_role(NodeRole::Alice);
        if alices.len() != 1 {
            return Err(TestbedError::AliceCount(alices.len()));
        }
        let qkd_nodes: Vec<NodeId> = topology
            .nodes()
            .filter(|(_, r)| *r != NodeRole::SwitchPartition)
            .map(|(n, _)| n.clone())
            .collect();
        Ok(Self {
            alice: AliceDevice::new(alices[0].clone()),
            keys: KeyRegistry::new(&qkd_nodes).shared(),
            network: OpticalNetwork::new(topology),
            model,
            params,
            sessions_started: 0,
        })
    }

    pub fn alice_node(&self) -> &NodeId {
        self.alice.node()
    }

    /// Seed for the next session's key generator, derived from the scenario
    /// seed so each session draws an independent stream.
    pub(crate) fn next_session_seed(&mut self) -> u64 {
        self.sessions_started += 1;
        splitmix64(self.params.seed ^ self.sessions_started.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
