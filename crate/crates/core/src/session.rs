//! QKD sessions between the shared Alice and one Bob, and the paired key
//! stores they fill.
//!
//! Key material is produced by a seeded generator and written to the Alice
//! and Bob stores in the same call, which stands in for the quantum channel.
//! Each store tracks consumption on its own.

use crate::link_model::{LinkModel, LinkModelError};
use crate::network::{OpticalNetwork, Path};
use crate::topology::NodeId;
use crate::trace::{Trace, TraceEvent};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::sync::{Arc, Mutex};
use thiserror::Error;

pub const DEFAULT_BLOCK_BITS: u32 = 256;

/// Opaque 128-bit key identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 16]);

impl KeyId {
    pub fn from_u128(v: u128) -> Self {
        Self(v.to_be_bytes())
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyBlock {
    pub key_id: KeyId,
    pub material: Vec<u8>,
    pub alice: NodeId,
    pub bob: NodeId,
    pub created_at: f64,
    pub consumed: bool,
    /// Block this one was split from, if any.
    pub parent: Option<KeyId>,
}

impl KeyBlock {
    pub fn length_bits(&self) -> u64 {
        self.material.len() as u64 * 8
    }

    fn peer_of(&self, owner: &NodeId) -> &NodeId {
        if &self.alice == owner {
            &self.bob
        } else {
            &self.alice
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KeyStoreError {
    #[error("no key store for node `{0}`")]
    UnknownStore(NodeId),
    #[error("requested {requested} bits but only {available} available")]
    InsufficientMaterial { requested: u64, available: u64 },
    #[error("unknown key id {0}")]
    UnknownKeyId(KeyId),
    #[error("key {0} was already consumed at this store")]
    AlreadyConsumed(KeyId),
    #[error("key requests must be positive")]
    ZeroLength,
    #[error("stores disagree about key {0}")]
    PairMismatch(KeyId),
}

/// Queue position: (cut sequence, split generation). Children of a split
/// keep their parent's place so consumption stays oldest-first.
type Slot = (u64, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct KeyStore {
    owner: NodeId,
    blocks: BTreeMap<KeyId, KeyBlock>,
    queue: BTreeMap<Slot, KeyId>,
    slots: BTreeMap<KeyId, Slot>,
    available_bits: u64,
}

impl KeyStore {
    fn new(owner: NodeId) -> Self {
        Self {
            owner,
            blocks: BTreeMap::new(),
            queue: BTreeMap::new(),
            slots: BTreeMap::new(),
            available_bits: 0,
        }
    }

    pub fn owner(&self) -> &NodeId {
        &self.owner
    }

    pub fn available_bits(&self) -> u64 {
        self.available_bits
    }

    /// Unconsumed bits shared with `peer`.
    pub fn available_bits_with(&self, peer: &NodeId) -> u64 {
        self.queue
            .values()
            .map(|id| &self.blocks[id])
            .filter(|b| b.peer_of(&self.owner) == peer)
            .map(KeyBlock::length_bits)
            .sum()
    }

    pub fn get(&self, id: &KeyId) -> Option<&KeyBlock> {
        self.blocks.get(id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &KeyBlock> {
        self.blocks.values()
    }

    fn insert(&mut self, block: KeyBlock, slot: Slot) {
        if !block.consumed {
            self.available_bits += block.length_bits();
            self.queue.insert(slot, block.key_id);
        }
        self.slots.insert(block.key_id, slot);
        self.blocks.insert(block.key_id, block);
    }

    fn consume(&mut self, id: &KeyId) -> Result<KeyBlock, KeyStoreError> {
        let block = self
            .blocks
            .get_mut(id)
            .ok_or(KeyStoreError::UnknownKeyId(*id))?;
        if block.consumed {
            return Err(KeyStoreError::AlreadyConsumed(*id));
        }
        block.consumed = true;
        self.available_bits -= block.length_bits();
        let slot = self.slots[id];
        self.queue.remove(&slot);
        Ok(block.clone())
    }

    /// One line per block: `key_id bits consumed alice<->bob created parent`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for b in self.blocks.values() {
            let parent = b
                .parent
                .map(|p| p.to_string())
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "key_id={} bits={} consumed={} pair={}<->{} created={:.6} parent={}",
                b.key_id,
                b.length_bits(),
                b.consumed,
                b.alice,
                b.bob,
                b.created_at,
                parent
            );
        }
        out
    }
}

/// Every key store of a scenario, plus the id allocator they share.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyRegistry {
    stores: BTreeMap<NodeId, KeyStore>,
    next_id: u128,
    next_seq: u64,
}

pub type SharedKeys = Arc<Mutex<KeyRegistry>>;

impl KeyRegistry {
    pub fn new<'a>(nodes: impl IntoIterator<Item = &'a NodeId>) -> Self {
        Self {
            stores: nodes
                .into_iter()
                .map(|n| (n.clone(), KeyStore::new(n.clone())))
                .collect(),
            next_id: 1,
            next_seq: 0,
        }
    }

    pub fn shared(self) -> SharedKeys {
        Arc::new(Mutex::new(self))
    }

    pub fn store(&self, node: &NodeId) -> Result<&KeyStore, KeyStoreError> {
        self.stores
            .get(node)
            .ok_or_else(|| KeyStoreError::UnknownStore(node.clone()))
    }

    fn store_mut(&mut self, node: &NodeId) -> Result<&mut KeyStore, KeyStoreError> {
        self.stores
            .get_mut(node)
            .ok_or_else(|| KeyStoreError::UnknownStore(node.clone()))
    }

    fn fresh_id(&mut self) -> KeyId {
        let id = KeyId::from_u128(self.next_id);
        self.next_id += 1;
        id
    }

    /// Record one block of shared material at both ends.
    pub fn deposit(
        &mut self,
        alice: &NodeId,
        bob: &NodeId,
        material: Vec<u8>,
        created_at: f64,
    ) -> Result<KeyBlock, KeyStoreError> {
        self.store(alice)?;
        self.store(bob)?;
        let block = KeyBlock {
            key_id: self.fresh_id(),
            material,
            alice: alice.clone(),
            bob: bob.clone(),
            created_at,
            consumed: false,
            parent: None,
        };
        let slot = (self.next_seq, 0);
        self.next_seq += 1;
        self.store_mut(alice)?.insert(block.clone(), slot);
        self.store_mut(bob)?.insert(block.clone(), slot);
        Ok(block)
    }

    /// Take exactly `length_bits` (rounded up to whole bytes) of the oldest
    /// material `owner` shares with `peer`.
    ///
    /// A request that matches the oldest block exactly returns that block.
    /// Otherwise the taken bytes are re-issued under a new key id, and any
    /// unused tail of the last block stays available under a child id; both
    /// are recorded at the peer so it can fetch them by id.
    pub fn reserve_key(
        &mut self,
        owner: &NodeId,
        peer: &NodeId,
        length_bits: u64,
    ) -> Result<KeyBlock, KeyStoreError> {
        if length_bits == 0 {
            return Err(KeyStoreError::ZeroLength);
        }
        self.store(peer)?;
        let want_bytes = length_bits.div_ceil(8) as usize;
        let store = self.store(owner)?;

        let mut picked: Vec<KeyId> = Vec::new();
        let mut have = 0usize;
        for id in store.queue.values() {
            let b = &store.blocks[id];
            if b.peer_of(owner) != peer {
                continue;
            }
            picked.push(*id);
            have += b.material.len();
            if have >= want_bytes {
                break;
            }
        }
        if have < want_bytes {
            return Err(KeyStoreError::InsufficientMaterial {
                requested: want_bytes as u64 * 8,
                available: have as u64 * 8,
            });
        }

        for id in &picked {
            match self.store(peer)?.get(id) {
                Some(b) if !b.consumed => {}
                _ => return Err(KeyStoreError::PairMismatch(*id)),
            }
        }
        if picked.len() == 1 && have == want_bytes {
            return self.store_mut(owner)?.consume(&picked[0]);
        }

        let mut material = Vec::with_capacity(have);
        let mut template = None;
        for id in &picked {
            let b = self.store_mut(owner)?.consume(id)?;
            self.store_mut(peer)?.consume(id)?;
            material.extend_from_slice(&b.material);
            template = Some(b);
        }
        let last = template.expect("at least one block picked");
        let tail = material.split_off(want_bytes);
        let last_slot = self.store(owner)?.slots[&last.key_id];
        let created_at = last.created_at;
        let (alice, bob) = (last.alice.clone(), last.bob.clone());

        let issued = KeyBlock {
            key_id: self.fresh_id(),
            material,
            alice: alice.clone(),
            bob: bob.clone(),
            created_at,
            consumed: false,
            parent: None,
        };
        self.store_mut(peer)?.insert(issued.clone(), last_slot);
        let issued = KeyBlock {
            consumed: true,
            ..issued
        };
        self.store_mut(owner)?.insert(issued.clone(), last_slot);

        if !tail.is_empty() {
            let child = KeyBlock {
                key_id: self.fresh_id(),
                material: tail,
                alice,
                bob,
                created_at,
                consumed: false,
                parent: Some(last.key_id),
            };
            let child_slot = (last_slot.0, last_slot.1 + 1);
            self.store_mut(owner)?.insert(child.clone(), child_slot);
            self.store_mut(peer)?.insert(child, child_slot);
        }
        Ok(issued)
    }

    /// Look up a block by id at `owner` and consume it there.
    pub fn fetch_key_by_id(
        &mut self,
        owner: &NodeId,
        id: &KeyId,
    ) -> Result<KeyBlock, KeyStoreError> {
        self.store_mut(owner)?.consume(id)
    }

    /// Drop a key from one store entirely, as if it had never arrived.
    /// Used for fault injection.
    pub fn forget(&mut self, owner: &NodeId, id: &KeyId) -> Result<(), KeyStoreError> {
        let store = self.store_mut(owner)?;
        let block = store
            .blocks
            .remove(id)
            .ok_or(KeyStoreError::UnknownKeyId(*id))?;
        if let Some(slot) = store.slots.remove(id) {
            if store.queue.remove(&slot).is_some() {
                store.available_bits -= block.length_bits();
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase {
    Idle,
    PathPending,
    Initializing { until: f64 },
    Generating,
    TornDown,
}

impl Phase {
    /// Initializing or generating: the session holds the Alice device.
    pub fn is_active(&self) -> bool {
        matches!(self, Phase::Initializing { .. } | Phase::Generating)
    }

    fn name(&self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::PathPending => "path-pending",
            Phase::Initializing { .. } => "initializing",
            Phase::Generating => "generating",
            Phase::TornDown => "torn-down",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Initializing { until } => write!(f, "initializing until={until:.6}"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("Alice `{alice}` is busy with Bob `{bob}`")]
    AliceBusy { alice: NodeId, bob: NodeId },
    #[error("quantum path to `{0}` is not established")]
    PathNotEstablished(NodeId),
    #[error("session in phase `{found}` cannot {action}")]
    InvalidPhase {
        found: &'static str,
        action: &'static str,
    },
    #[error("block size must be a positive multiple of 8 bits, got {0}")]
    BadBlockSize(u32),
    #[error(transparent)]
    Model(#[from] LinkModelError),
    #[error(transparent)]
    Keys(#[from] KeyStoreError),
}

/// One key-generation session between the shared Alice and a Bob.
#[derive(Debug, Clone)]
pub struct QkdSession {
    alice: NodeId,
    bob: NodeId,
    phase: Phase,
    path: Option<Path>,
    started_at: f64,
    block_bits: u32,
    bits_cut: u64,
    remainder_bits: u64,
    rng: ChaCha8Rng,
}

impl QkdSession {
    pub fn new(
        alice: NodeId,
        bob: NodeId,
        block_bits: u32,
        seed: u64,
    ) -> Result<Self, SessionError> {
        if block_bits == 0 || !block_bits.is_multiple_of(8) {
            return Err(SessionError::BadBlockSize(block_bits));
        }
        Ok(Self {
            alice,
            bob,
            phase: Phase::Idle,
            path: None,
            started_at: 0.0,
            block_bits,
            bits_cut: 0,
            remainder_bits: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn alice(&self) -> &NodeId {
        &self.alice
    }

    pub fn bob(&self) -> &NodeId {
        &self.bob
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_ref()
    }

    pub fn distance_km(&self) -> f64 {
        self.path.as_ref().map_or(0.0, |p| p.length_km)
    }

    /// Bits already written to the stores in whole blocks.
    pub fn bits_cut(&self) -> u64 {
        self.bits_cut
    }

    /// Generated bits not yet forming a whole block.
    pub fn remainder_bits(&self) -> u64 {
        self.remainder_bits
    }

    fn set_phase(&mut self, phase: Phase, now: f64, trace: &mut Trace) {
        self.phase = phase;
        trace.push(
            now,
            TraceEvent::Session {
                alice: self.alice.clone(),
                bob: self.bob.clone(),
                phase,
            },
        );
    }

    /// idle -> path-pending, while the scheduler sets up the optical path.
    pub fn request_path(&mut self, now: f64, trace: &mut Trace) -> Result<(), SessionError> {
        if self.phase != Phase::Idle {
            return Err(SessionError::InvalidPhase {
                found: self.phase.name(),
                action: "request a path",
            });
        }
        self.set_phase(Phase::PathPending, now, trace);
        Ok(())
    }

    /// Bank whatever the link has produced up to `now`. Returns the blocks
    /// cut by this call; the same blocks are now in both stores.
    pub fn advance(
        &mut self,
        now: f64,
        model: &dyn LinkModel<f64>,
        keys: &mut KeyRegistry,
        trace: &mut Trace,
    ) -> Result<Vec<KeyBlock>, SessionError> {
        match self.phase {
            Phase::Initializing { until } => {
                if now < until {
                    return Ok(Vec::new());
                }
                self.set_phase(Phase::Generating, until, trace);
            }
            Phase::Generating => {}
            other => {
                return Err(SessionError::InvalidPhase {
                    found: other.name(),
                    action: "advance",
                })
            }
        }
        let d = self.distance_km();
        let total = model.key_bits_generated(d, now - self.started_at)?;
        let block = u64::from(self.block_bits);
        let whole = total / block;
        let fresh = whole.saturating_sub(self.bits_cut / block);
        let mut cut = Vec::with_capacity(fresh as usize);
        for _ in 0..fresh {
            let mut material = vec![0u8; self.block_bits as usize / 8];
            self.rng.fill_bytes(&mut material);
            cut.push(keys.deposit(&self.alice, &self.bob, material, now)?);
        }
        self.bits_cut += fresh * block;
        self.remainder_bits = total.saturating_sub(self.bits_cut);
        if fresh > 0 {
            trace.push(
                now,
                TraceEvent::KeysBanked {
                    alice: self.alice.clone(),
                    bob: self.bob.clone(),
                    blocks: fresh,
                    bits: fresh * block,
                },
            );
        }
        Ok(cut)
    }

    /// Earliest time at which at least `bits` will have been cut.
    pub fn time_to_bank(&self, bits: u64, model: &dyn LinkModel<f64>) -> Result<f64, SessionError> {
        let d = self.distance_km();
        let block = u64::from(self.block_bits);
        let needed = bits.div_ceil(block) * block;
        let rate = model.secret_key_rate_bps(d)?;
        Ok(self.started_at + model.init_time_s(d)? + needed as f64 / rate)
    }
}

/// The single, time-shared Alice device.
#[derive(Debug, Clone)]
pub struct AliceDevice {
    node: NodeId,
    serving: Option<NodeId>,
}

impl AliceDevice {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            serving: None,
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn serving(&self) -> Option<&NodeId> {
        self.serving.as_ref()
    }

    /// Start the key servers on an established path. The session waits in
    /// `initializing` until the link's initialization time has passed.
    pub fn start_session(
        &mut self,
        session: &mut QkdSession,
        path: Path,
        network: &OpticalNetwork,
        model: &dyn LinkModel<f64>,
        now: f64,
        trace: &mut Trace,
    ) -> Result<(), SessionError> {
        if let Some(bob) = &self.serving {
            return Err(SessionError::AliceBusy {
                alice: self.node.clone(),
                bob: bob.clone(),
            });
        }
        if !matches!(session.phase, Phase::Idle | Phase::PathPending) {
            return Err(SessionError::InvalidPhase {
                found: session.phase.name(),
                action: "start",
            });
        }
        if path.from != self.node || path.to != session.bob || !network.is_established(&path) {
            return Err(SessionError::PathNotEstablished(session.bob.clone()));
        }
        let init = model.init_time_s(path.length_km)?;
        session.path = Some(path);
        session.started_at = now;
        session.bits_cut = 0;
        session.remainder_bits = 0;
        self.serving = Some(session.bob.clone());
        session.set_phase(Phase::Initializing { until: now + init }, now, trace);
        Ok(())
    }

    /// Tear the session down from any phase; partial blocks are dropped.
    pub fn stop_session(&mut self, session: &mut QkdSession, now: f64, trace: &mut Trace) {
        if self.serving.as_ref() == Some(&session.bob) && session.phase.is_active() {
            self.serving = None;
        }
        session.remainder_bits = 0;
        session.set_phase(Phase::TornDown, now, trace);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use crate::link_model::ChannelModel;
    use crate::topology::{ChannelClass, Topology, TopologySpec};

    fn nodes() -> Vec<NodeId> {
        ["node1", "node2", "node3", "node4"]
            .iter()
            .map(|s| NodeId::from(*s))
            .collect()
    }

    fn registry() -> KeyRegistry {
        KeyRegistry::new(&nodes())
    }

    fn a() -> NodeId {
        "node1".into()
    }
    fn b() -> NodeId {
        "node2".into()
    }

    #[test]
    fn reserve_exact_block() {
        let mut r = registry();
        let blk = r.deposit(&a(), &b(), vec![7; 32], 0.0).unwrap();
        let got = r.reserve_key(&a(), &b(), 256).unwrap();
        assert_eq!(got.key_id, blk.key_id);
        assert!(got.consumed);
        assert_eq!(r.store(&a()).unwrap().available_bits(), 0);
        assert_eq!(
            r.fetch_key_by_id(&a(), &blk.key_id),
            Err(KeyStoreError::AlreadyConsumed(blk.key_id))
        );
        // still fetchable once at Bob
        assert_eq!(
            r.fetch_key_by_id(&b(), &blk.key_id).unwrap().material,
            vec![7; 32]
        );
    }

    #[test]
    fn reserve_from_empty_store() {
        let mut r = registry();
        assert!(matches!(
            r.reserve_key(&a(), &b(), 1),
            Err(KeyStoreError::InsufficientMaterial { available: 0, .. })
        ));
    }

    #[test]
    fn reserve_splits_across_blocks() {
        let mut r = registry();
        let b1 = r.deposit(&a(), &b(), (0..32).collect(), 1.0).unwrap();
        let b2 = r.deposit(&a(), &b(), (100..132).collect(), 2.0).unwrap();
        let got = r.reserve_key(&a(), &b(), 384).unwrap();
        assert_eq!(got.length_bits(), 384);
        let mut want: Vec<u8> = (0..32).collect();
        want.extend(100..116);
        assert_eq!(got.material, want);
        assert_ne!(got.key_id, b1.key_id);
        assert_ne!(got.key_id, b2.key_id);

        for (owner, peer, avail) in [(a(), b(), 128), (b(), a(), 384 + 128)] {
            let s = r.store(&owner).unwrap();
            assert_eq!(s.available_bits_with(&peer), avail);
            let child = s.blocks().find(|k| k.parent == Some(b2.key_id)).unwrap();
            assert_eq!(child.material, (116..132).collect::<Vec<u8>>());
        }
        // Bob can fetch the issued key under its new id
        assert_eq!(
            r.fetch_key_by_id(&b(), &got.key_id).unwrap().material,
            got.material
        );
        // constituents are retired at both ends
        assert!(r.fetch_key_by_id(&b(), &b1.key_id).is_err());
        // the child is next in line
        let next = r.reserve_key(&a(), &b(), 128).unwrap();
        assert_eq!(next.parent, Some(b2.key_id));
    }

    #[test]
    fn reserve_rounds_to_bytes_and_keeps_peers_apart() {
        let mut r = registry();
        r.deposit(&a(), &"node3".into(), vec![1; 32], 0.0).unwrap();
        assert!(r.reserve_key(&a(), &b(), 8).is_err());
        r.deposit(&a(), &b(), vec![2; 32], 0.0).unwrap();
        let k = r.reserve_key(&a(), &b(), 3).unwrap();
        assert_eq!(k.material, vec![2]);
        assert_eq!(r.reserve_key(&a(), &b(), 0), Err(KeyStoreError::ZeroLength));
    }

    #[test]
    fn unknown_key_and_dump() {
        let mut r = registry();
        let id = KeyId::from_u128(999);
        assert_eq!(
            r.fetch_key_by_id(&b(), &id),
            Err(KeyStoreError::UnknownKeyId(id))
        );
        r.deposit(&a(), &b(), vec![0; 2], 3.0).unwrap();
        assert_eq!(
            r.store(&b()).unwrap().dump(),
            "key_id=00000000000000000000000000000001 bits=16 consumed=false pair=node1<->node2 created=3.000000 parent=-\n"
        );
    }

    fn setup(bob: &str) -> (OpticalNetwork, Path, SimClock, Trace) {
        let mut net = OpticalNetwork::new(Topology::new(&TopologySpec::default()).unwrap());
        let mut clock = SimClock::new();
        let mut trace = Trace::new();
        let path = net
            .compute_path(&a(), &bob.into(), ChannelClass::Quantum)
            .unwrap();
        net.establish_path(&path, &mut clock, &mut trace).unwrap();
        (net, path, clock, trace)
    }

    #[test]
    fn start_session_enters_initializing() {
        let model = ChannelModel::<f64>::default();
        let (net, path, _, mut trace) = setup("node2");
        let mut alice = AliceDevice::new(a());
        let mut s = QkdSession::new(a(), b(), 256, 1).unwrap();
        alice
            .start_session(&mut s, path, &net, &model, 0.0, &mut trace)
            .unwrap();
        assert_eq!(s.phase(), Phase::Initializing { until: 400.0 });

        let (net4, path4, _, mut trace4) = setup("node4");
        let mut alice4 = AliceDevice::new(a());
        let mut s4 = QkdSession::new(a(), "node4".into(), 256, 1).unwrap();
        alice4
            .start_session(&mut s4, path4, &net4, &model, 100.0, &mut trace4)
            .unwrap();
        assert_eq!(s4.phase(), Phase::Initializing { until: 1365.0 });
    }

    #[test]
    fn second_session_on_busy_alice() {
        let model = ChannelModel::<f64>::default();
        let (net, path, _, mut trace) = setup("node2");
        let mut alice = AliceDevice::new(a());
        let mut s1 = QkdSession::new(a(), b(), 256, 1).unwrap();
        alice
            .start_session(&mut s1, path.clone(), &net, &model, 0.0, &mut trace)
            .unwrap();
        let mut s2 = QkdSession::new(a(), "node3".into(), 256, 2).unwrap();
        let err = alice
            .start_session(&mut s2, path, &net, &model, 0.0, &mut trace)
            .unwrap_err();
        assert!(matches!(err, SessionError::AliceBusy { .. }));
        alice.stop_session(&mut s1, 1.0, &mut trace);
        assert!(alice.serving().is_none());
    }

    #[test]
    fn path_must_be_established() {
        let model = ChannelModel::<f64>::default();
        let net = OpticalNetwork::new(Topology::new(&TopologySpec::default()).unwrap());
        let path = net.compute_path(&a(), &b(), ChannelClass::Quantum).unwrap();
        let mut alice = AliceDevice::new(a());
        let mut s = QkdSession::new(a(), b(), 256, 1).unwrap();
        assert_eq!(
            alice.start_session(&mut s, path, &net, &model, 0.0, &mut Trace::new()),
            Err(SessionError::PathNotEstablished(b()))
        );
    }

    #[test]
    fn advance_cuts_blocks() {
        let model = ChannelModel::<f64>::default();
        let (net, path, _, mut trace) = setup("node2");
        let mut keys = registry();
        let mut alice = AliceDevice::new(a());
        let mut s = QkdSession::new(a(), b(), 256, 9).unwrap();
        alice
            .start_session(&mut s, path, &net, &model, 0.0, &mut trace)
            .unwrap();
        assert!(s
            .advance(399.0, &model, &mut keys, &mut trace)
            .unwrap()
            .is_empty());
        assert!(s
            .advance(400.0, &model, &mut keys, &mut trace)
            .unwrap()
            .is_empty());
        assert_eq!(s.phase(), Phase::Generating);
        let cut = s.advance(401.0, &model, &mut keys, &mut trace).unwrap();
        // 4000 bits: 15 whole blocks, 160 left over
        assert_eq!(cut.len(), 15);
        assert_eq!(s.remainder_bits(), 160);
        for blk in &cut {
            assert_eq!(
                keys.store(&a()).unwrap().get(&blk.key_id),
                keys.store(&b()).unwrap().get(&blk.key_id)
            );
        }
        alice.stop_session(&mut s, 401.0, &mut trace);
        assert_eq!(s.phase(), Phase::TornDown);
        assert_eq!(s.remainder_bits(), 0);
        assert!(s.advance(402.0, &model, &mut keys, &mut trace).is_err());
    }

    #[test]
    fn same_seed_same_material() {
        let model = ChannelModel::<f64>::default();
        let run = || {
            let (net, path, _, mut trace) = setup("node3");
            let mut keys = registry();
            let mut alice = AliceDevice::new(a());
            let mut s = QkdSession::new(a(), "node3".into(), 256, 77).unwrap();
            alice
                .start_session(&mut s, path, &net, &model, 0.0, &mut trace)
                .unwrap();
            s.advance(800.0, &model, &mut keys, &mut trace).unwrap()
        };
        let (x, y) = (run(), run());
        assert!(!x.is_empty());
        assert_eq!(x, y);
    }

    #[test]
    fn bad_block_size() {
        assert!(matches!(
            QkdSession::new(a(), b(), 0, 0),
            Err(SessionError::BadBlockSize(0))
        ));
        assert!(matches!(
            QkdSession::new(a(), b(), 12, 0),
            Err(SessionError::BadBlockSize(12))
        ));
    }
}
