#![allow(dead_code)]

use qkdnfv::session::KeyRegistry;
use qkdnfv::testbed::{Testbed, TestbedParams};
use qkdnfv::topology::{NodeId, Topology, TopologySpec};
use qkdnfv::trace::Trace;
use qkdnfv::wire::MessageKind;
use qkdnfv::ChannelModel;

pub fn testbed(bob_km: &[f64], seed: u64) -> Testbed {
    let topo = Topology::new(&TopologySpec::testbed(bob_km)).unwrap();
    Testbed::new(
        topo,
        ChannelModel::default(),
        TestbedParams {
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn node(s: &str) -> NodeId {
    NodeId::from(s)
}

/// Deposit `bytes` of fresh material shared by node1 and `bob`.
pub fn fill(tb: &Testbed, bob: &str, bytes: usize, fill_byte: u8) {
    let mut keys = tb.keys.lock().unwrap();
    let material: Vec<u8> = (0..bytes)
        .map(|i| (i as u8).wrapping_mul(31) ^ fill_byte)
        .collect();
    keys.deposit(&node("node1"), &node(bob), material, 0.0)
        .unwrap();
}

/// Workflow kinds of `job`, in trace order.
pub fn workflow_kinds(trace: &Trace, job: u64) -> Vec<MessageKind> {
    trace.job_messages(job).map(|(_, k)| k).collect()
}

/// Independent oracle for the eight-step order: transfer-init, flow-mod+,
/// key-request, key-response, image-chunk+, key-id-notify, deploy-report,
/// ack-200.
pub fn is_workflow(kinds: &[MessageKind]) -> bool {
    use MessageKind::*;
    let steps: [(MessageKind, bool); 8] = [
        (TransferInit, false),
        (FlowMod, true),
        (KeyRequest, false),
        (KeyResponse, false),
        (ImageChunk, true),
        (KeyIdNotify, false),
        (DeployReport, false),
        (Ack200, false),
    ];
    let mut i = 0;
    for (kind, repeats) in steps {
        if kinds.get(i) != Some(&kind) {
            return false;
        }
        i += 1;
        if repeats {
            while kinds.get(i) == Some(&kind) {
                i += 1;
            }
        }
    }
    i == kinds.len()
}

/// Every block present in both stores of a pair holds the same bytes, and
/// each block id known to one side of a pair is known to the other.
pub fn pairing_violations(keys: &KeyRegistry, nodes: &[NodeId]) -> usize {
    let mut bad = 0;
    for n in nodes {
        let Ok(store) = keys.store(n) else { continue };
        for b in store.blocks() {
            let peer = if &b.alice == n { &b.bob } else { &b.alice };
            match keys.store(peer).ok().and_then(|s| s.get(&b.key_id)) {
                Some(other) if other.material == b.material => {}
                _ => bad += 1,
            }
        }
    }
    bad
}
