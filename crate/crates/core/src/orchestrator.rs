//! Central orchestrator and slave DC stacks running the secure image
//! transfer workflow.
//!
//! For every job the orchestrator announces the transfer, programs the
//! classical data path, obtains a key from the Alice key server, encrypts
//! the image, streams it in chunks and finally names the key id. The slave
//! decrypts with its Bob store, checks the digest and registers the image
//! with its VIM stub before answering with a deploy report, which the
//! orchestrator closes with ack-200.
//!
//! Slaves are reached through a [`SlaveLink`]: in-process (every message
//! still goes through the frame codec) or over TCP on localhost.

use crate::clock::Clock;
use crate::crypto::{self, record, CipherMode, CounterNonces, CryptoError, EncryptedPayload};
use crate::network::{NetworkError, OpticalNetwork, Path};
use crate::scheduler::{
    build_schedule, execute_schedule, ExecutionReport, KeyDemand, Policy, Schedule,
};
use crate::session::{KeyId, SharedKeys};
use crate::testbed::Testbed;
use crate::topology::{ChannelClass, NodeId, NodeRole};
use crate::trace::{Trace, TraceEvent};
use crate::wire::{WireError, WireMessage, MAX_CHUNK_DATA};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, VecDeque};
use std::fmt::{self, Write as _};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::thread::JoinHandle;
use std::time::Instant;
use thiserror::Error;

/// Trace endpoint name of the orchestrator.
pub const CO: &str = "co";
/// Trace endpoint name of the SDN controller.
pub const SDN: &str = "sdn";

pub fn slave_endpoint(node: &NodeId) -> String {
    format!("dc-{node}")
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// A network function image held in the central catalog.
#[derive(Clone, PartialEq, Eq)]
pub struct VnfImage {
    image_id: String,
    name: String,
    payload: Vec<u8>,
    checksum: [u8; 32],
}

impl VnfImage {
    pub fn new(image_id: impl Into<String>, name: impl Into<String>, payload: Vec<u8>) -> Self {
        let checksum = sha256(&payload);
        Self {
            image_id: image_id.into(),
            name: name.into(),
            payload,
            checksum,
        }
    }

    /// Seeded pseudo-random payload of `size` bytes.
    pub fn synthetic(
        image_id: impl Into<String>,
        name: impl Into<String>,
        size: usize,
        seed: u64,
    ) -> Self {
        let mut payload = vec![0u8; size];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut payload);
        Self::new(image_id, name, payload)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn checksum(&self) -> &[u8; 32] {
        &self.checksum
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

impl fmt::Debug for VnfImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VnfImage")
            .field("image_id", &self.image_id)
            .field("name", &self.name)
            .field("len", &self.payload.len())
            .field("checksum", &hex(&self.checksum))
            .finish()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    images: BTreeMap<String, VnfImage>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces an image, keyed by its id.
    pub fn insert(&mut self, image: VnfImage) {
        self.images.insert(image.image_id.clone(), image);
    }

    pub fn get(&self, image_id: &str) -> Option<&VnfImage> {
        self.images.get(image_id)
    }

    pub fn images(&self) -> impl Iterator<Item = &VnfImage> {
        self.images.values()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Requested,
    PathSetup,
    KeyObtained,
    Encrypted,
    Transferring,
    Notified,
    Decrypted,
    Deployed,
    Acked,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Requested,
        Stage::PathSetup,
        Stage::KeyObtained,
        Stage::Encrypted,
        Stage::Transferring,
        Stage::Notified,
        Stage::Decrypted,
        Stage::Deployed,
        Stage::Acked,
    ];

    pub fn next(self) -> Option<Stage> {
        Self::ALL.get(self as usize + 1).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Requested => "requested",
            Stage::PathSetup => "path-setup",
            Stage::KeyObtained => "key-obtained",
            Stage::Encrypted => "encrypted",
            Stage::Transferring => "transferring",
            Stage::Notified => "notified",
            Stage::Decrypted => "decrypted",
            Stage::Deployed => "deployed",
            Stage::Acked => "acked",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fault switches for exercising the failure paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Faults {
    /// Flip one bit of the last image chunk after it leaves the orchestrator.
    pub tamper_chunk: bool,
    /// Remove the key from the destination store before it is named.
    pub drop_key_at_slave: bool,
    /// Encrypt a copy of the image with one bit flipped, keeping the
    /// catalog checksum.
    pub corrupt_image: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRequest {
    pub image_id: String,
    pub dest: NodeId,
    #[serde(default)]
    pub mode: CipherMode,
    #[serde(default)]
    pub faults: Faults,
}

impl TransferRequest {
    pub fn new(image_id: impl Into<String>, dest: impl Into<NodeId>, mode: CipherMode) -> Self {
        Self {
            image_id: image_id.into(),
            dest: dest.into(),
            mode,
            faults: Faults::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JobTimings {
    pub encrypt_s: f64,
    pub send_s: f64,
    pub decrypt_s: f64,
    /// Requested to the last recorded stage.
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobFailure {
    /// Stage the job was trying to reach.
    pub at: Stage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferJob {
    pub id: u64,
    pub image_id: String,
    pub dest: NodeId,
    pub mode: CipherMode,
    pub image_bytes: u64,
    /// Encoded encrypted payload, as streamed in chunks.
    pub payload_bytes: u64,
    pub chunks: u32,
    pub key_id: Option<KeyId>,
    pub state: Stage,
    pub failure: Option<JobFailure>,
    pub history: Vec<(Stage, f64)>,
    pub timings: JobTimings,
}

impl TransferJob {
    fn new(id: u64, req: &TransferRequest, now: f64) -> Self {
        Self {
            id,
            image_id: req.image_id.clone(),
            dest: req.dest.clone(),
            mode: req.mode,
            image_bytes: 0,
            payload_bytes: 0,
            chunks: 0,
            key_id: None,
            state: Stage::Requested,
            failure: None,
            history: vec![(Stage::Requested, now)],
            timings: JobTimings::default(),
        }
    }

    pub fn is_acked(&self) -> bool {
        self.state == Stage::Acked
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }

    fn started_at(&self) -> f64 {
        self.history[0].1
    }

    fn advance(&mut self, stage: Stage, now: f64) {
        assert!(
            self.failure.is_none(),
            "job {} advanced after failing",
            self.id
        );
        assert_eq!(
            self.state.next(),
            Some(stage),
            "job {} skipped a stage",
            self.id
        );
        self.state = stage;
        self.history.push((stage, now));
        self.timings.total_s = now - self.started_at();
    }

    fn fail(&mut self, at: Stage, reason: impl Into<String>, now: f64) {
        let reason = reason.into();
        log::warn!("job {} failed at {at}: {reason}", self.id);
        self.failure = Some(JobFailure { at, reason });
        self.timings.total_s = now - self.started_at();
    }

    /// One line of `key=value` fields.
    pub fn record(&self) -> String {
        let mut s =
            format!(
            "job={} image={} dest={} mode={} image_bytes={} payload_bytes={} chunks={} key_id={}",
            self.id,
            self.image_id,
            self.dest,
            self.mode,
            self.image_bytes,
            self.payload_bytes,
            self.chunks,
            self.key_id.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
        );
        match &self.failure {
            None => {
                let _ = write!(s, " state={}", self.state);
            }
            Some(f) => {
                let _ = write!(
                    s,
                    " state=failed at={} reason={}",
                    f.at,
                    f.reason.replace(' ', "_")
                );
            }
        }
        let t = &self.timings;
        let _ = write!(
            s,
            " encrypt_s={:.6} send_s={:.6} decrypt_s={:.6} total_s={:.6} stages=",
            t.encrypt_s, t.send_s, t.decrypt_s, t.total_s
        );
        for (i, (stage, at)) in self.history.iter().enumerate() {
            let sep = if i == 0 { "" } else { "," };
            let _ = write!(s, "{sep}{stage}@{at:.6}");
        }
        s
    }
}

/// Reference transfer used for the default modeled throughputs: image size
/// in bytes and the seconds spent encrypting, sending and decrypting it.
pub const DEMO_IMAGE_BYTES: f64 = 16e9;
pub const DEMO_ENCRYPT_S: f64 = 126.0;
pub const DEMO_SEND_S: f64 = 33.0;
pub const DEMO_DECRYPT_S: f64 = 144.0;

/// How encrypt, send and decrypt durations are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhaseTiming {
    /// Durations are size divided by a throughput in bytes/s and charged to
    /// the clock.
    Modeled {
        #[serde(default = "demo_encrypt_bps")]
        encrypt_bps: f64,
        #[serde(default = "demo_send_bps")]
        send_bps: f64,
        #[serde(default = "demo_decrypt_bps")]
        decrypt_bps: f64,
    },
    /// Durations are measured around the real work.
    Measured,
}

fn demo_encrypt_bps() -> f64 {
    DEMO_IMAGE_BYTES / DEMO_ENCRYPT_S
}

fn demo_send_bps() -> f64 {
    DEMO_IMAGE_BYTES / DEMO_SEND_S
}

fn demo_decrypt_bps() -> f64 {
    DEMO_IMAGE_BYTES / DEMO_DECRYPT_S
}

impl Default for PhaseTiming {
    fn default() -> Self {
        PhaseTiming::Modeled {
            encrypt_bps: demo_encrypt_bps(),
            send_bps: demo_send_bps(),
            decrypt_bps: demo_decrypt_bps(),
        }
    }
}

impl PhaseTiming {
    fn modeled(&self, bytes: usize, pick: fn(f64, f64, f64) -> f64) -> Option<f64> {
        match *self {
            PhaseTiming::Modeled {
                encrypt_bps,
                send_bps,
                decrypt_bps,
            } => Some(bytes as f64 / pick(encrypt_bps, send_bps, decrypt_bps)),
            PhaseTiming::Measured => None,
        }
    }

    fn encrypt(&self, bytes: usize) -> Option<f64> {
        self.modeled(bytes, |e, _, _| e)
    }

    fn send(&self, bytes: usize) -> Option<f64> {
        self.modeled(bytes, |_, s, _| s)
    }

    fn decrypt(&self, bytes: usize) -> Option<f64> {
        self.modeled(bytes, |_, _, d| d)
    }
}

/// Image accepted by a slave's VIM stub.
#[derive(Clone, PartialEq, Eq)]
pub struct Deployed {
    pub job: u64,
    pub name: String,
    pub bytes: Vec<u8>,
    pub checksum: [u8; 32],
}

impl fmt::Debug for Deployed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Deployed")
            .field("job", &self.job)
            .field("name", &self.name)
            .field("len", &self.bytes.len())
            .finish()
    }
}

#[derive(Debug)]
struct Staging {
    image_id: String,
    name: String,
    size: u64,
    checksum: [u8; 32],
    mode: CipherMode,
    next_seq: u32,
    buf: Vec<u8>,
}

/// Remote DC: Bob key store, chunk staging and the VIM stub.
#[derive(Debug)]
pub struct SlaveStack {
    node: NodeId,
    keys: SharedKeys,
    timing: PhaseTiming,
    staging: BTreeMap<u64, Staging>,
    vim: BTreeMap<String, Deployed>,
}

impl SlaveStack {
    pub fn new(node: NodeId, keys: SharedKeys, timing: PhaseTiming) -> Self {
        Self {
            node,
            keys,
            timing,
            staging: BTreeMap::new(),
            vim: BTreeMap::new(),
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn deployed(&self, image_id: &str) -> Option<&Deployed> {
        self.vim.get(image_id)
    }

    pub fn vim(&self) -> impl Iterator<Item = (&String, &Deployed)> {
        self.vim.iter()
    }

    /// Jobs with chunks staged but not yet deployed.
    pub fn pending_jobs(&self) -> usize {
        self.staging.len()
    }

    /// Process one incoming message and return the reply, if any.
    pub fn handle(&mut self, msg: WireMessage) -> Option<WireMessage> {
        let nack = |job: u64, reason: &str| {
            Some(WireMessage::Nack {
                job,
                reason: reason.into(),
            })
        };
        match msg {
            WireMessage::TransferInit {
                job,
                image_id,
                name,
                size,
                checksum,
                mode,
            } => {
                if self.staging.contains_key(&job) {
                    return nack(job, "duplicate-job");
                }
                self.staging.insert(
                    job,
                    Staging {
                        image_id,
                        name,
                        size,
                        checksum,
                        mode,
                        next_seq: 0,
                        buf: Vec::new(),
                    },
                );
                None
            }
            WireMessage::ImageChunk { job, seq, data } => {
                let Some(st) = self.staging.get_mut(&job) else {
                    return nack(job, "unknown-job");
                };
                if seq != st.next_seq {
                    self.staging.remove(&job);
                    return nack(job, "out-of-order-chunk");
                }
                st.next_seq += 1;
                st.buf.extend_from_slice(&data);
                None
            }
            WireMessage::KeyIdNotify {
                job,
                image_id,
                key_id,
            } => {
                let Some(st) = self.staging.remove(&job) else {
                    return nack(job, "unknown-job");
                };
                Some(match self.deploy(job, st, &image_id, key_id) {
                    Ok(decrypt_s) => WireMessage::DeployReport {
                        job,
                        image_id,
                        decrypt_s,
                    },
                    Err(reason) => WireMessage::Nack {
                        job,
                        reason: reason.into(),
                    },
                })
            }
            WireMessage::Nack { job, .. } => {
                self.staging.remove(&job);
                None
            }
            WireMessage::Ack200 { .. } => None,
            other => nack(other.job(), "unexpected-message"),
        }
    }

    fn deploy(
        &mut self,
        job: u64,
        st: Staging,
        image_id: &str,
        key_id: KeyId,
    ) -> Result<f64, &'static str> {
        if st.image_id != image_id {
            return Err("image-mismatch");
        }
        let payload = EncryptedPayload::decode(&st.buf).map_err(|e| e.code())?;
        if payload.key_id() != key_id {
            return Err("key-id-mismatch");
        }
        if payload.mode() != st.mode {
            return Err("mode-mismatch");
        }
        let started = Instant::now();
        let plain = {
            let mut keys = self.keys.lock().expect("key registry lock poisoned");
            crypto::decrypt(&payload, &mut keys, &self.node).map_err(|e: CryptoError| e.code())?
        };
        if plain.len() as u64 != st.size || sha256(&plain) != st.checksum {
            return Err("corrupt-image");
        }
        let measured = started.elapsed().as_secs_f64();
        self.vim.insert(
            image_id.to_string(),
            Deployed {
                job,
                name: st.name,
                bytes: plain,
                checksum: st.checksum,
            },
        );
        Ok(self.timing.decrypt(st.size as usize).unwrap_or(measured))
    }
}

#[derive(Debug, Error)]
pub enum TransferError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("truncated-stream")]
    TruncatedStream,
    #[error("no reply from slave")]
    NoReply,
    #[error("slave endpoint thread panicked")]
    SlavePanicked,
}

impl From<io::Error> for TransferError {
    fn from(e: io::Error) -> Self {
        TransferError::Wire(WireError::Io(e))
    }
}

/// Read messages from `stream` until the slave produces a reply, write the
/// reply back and return it. The stream ending first is an error.
pub fn receive_and_deploy(
    slave: &mut SlaveStack,
    reader: &mut impl Read,
    writer: &mut impl Write,
) -> Result<WireMessage, TransferError> {
    loop {
        let Some(msg) = WireMessage::read_from(reader)? else {
            return Err(TransferError::TruncatedStream);
        };
        if let Some(reply) = slave.handle(msg) {
            reply.write_to(writer)?;
            writer.flush()?;
            return Ok(reply);
        }
    }
}

/// Serve one connection until the peer closes it.
pub fn serve_connection(slave: &mut SlaveStack, stream: TcpStream) -> Result<(), TransferError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(msg) = WireMessage::read_from(&mut reader)? {
        if let Some(reply) = slave.handle(msg) {
            reply.write_to(&mut writer)?;
            writer.flush()?;
        }
    }
    Ok(())
}

/// Orchestrator-side endpoint of a slave.
pub trait SlaveLink {
    fn send(&mut self, msg: &WireMessage) -> Result<(), TransferError>;
    /// Flush anything buffered towards the slave.
    fn flush(&mut self) -> Result<(), TransferError> {
        Ok(())
    }
    fn recv(&mut self) -> Result<WireMessage, TransferError>;
}

/// Slave in the same process. Messages are encoded and decoded on the way.
#[derive(Debug)]
pub struct InProcessLink {
    slave: SlaveStack,
    replies: VecDeque<WireMessage>,
}

impl InProcessLink {
    pub fn new(slave: SlaveStack) -> Self {
        Self {
            slave,
            replies: VecDeque::new(),
        }
    }

    pub fn slave(&self) -> &SlaveStack {
        &self.slave
    }

    pub fn into_slave(self) -> SlaveStack {
        self.slave
    }
}

impl SlaveLink for InProcessLink {
    fn send(&mut self, msg: &WireMessage) -> Result<(), TransferError> {
        let frame = msg.encode()?;
        let msg = WireMessage::decode(&frame)?;
        if let Some(reply) = self.slave.handle(msg) {
            let frame = reply.encode()?;
            self.replies.push_back(WireMessage::decode(&frame)?);
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage, TransferError> {
        self.replies.pop_front().ok_or(TransferError::NoReply)
    }
}

#[derive(Debug)]
pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpLink {
    pub fn connect(addr: SocketAddr) -> Result<Self, TransferError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::with_capacity(256 * 1024, stream),
        })
    }

    /// Flush and half-close, which ends the slave's serving loop.
    pub fn close(mut self) -> Result<(), TransferError> {
        self.writer.flush()?;
        self.writer.get_ref().shutdown(Shutdown::Write)?;
        Ok(())
    }
}

impl SlaveLink for TcpLink {
    fn send(&mut self, msg: &WireMessage) -> Result<(), TransferError> {
        msg.write_to(&mut self.writer)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), TransferError> {
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage, TransferError> {
        self.writer.flush()?;
        WireMessage::read_from(&mut self.reader)?.ok_or(TransferError::TruncatedStream)
    }
}

/// Slave stack listening on a TCP port in its own thread. It serves a
/// single orchestrator connection and hands the stack back once that
/// connection closes.
#[derive(Debug)]
pub struct SlaveServer {
    addr: SocketAddr,
    handle: JoinHandle<Result<SlaveStack, TransferError>>,
}

impl SlaveServer {
    pub fn spawn(mut slave: SlaveStack, bind: SocketAddr) -> io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        log::info!("slave {} listening on {addr}", slave.node());
        let handle = std::thread::Builder::new()
            .name(format!("slave-{}", slave.node()))
            .spawn(move || {
                let (stream, peer) = listener.accept()?;
                log::debug!("slave {} accepted {peer}", slave.node());
                serve_connection(&mut slave, stream)?;
                Ok(slave)
            })?;
        Ok(Self { addr, handle })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn join(self) -> Result<SlaveStack, TransferError> {
        self.handle
            .join()
            .map_err(|_| TransferError::SlavePanicked)?
    }
}

/// The master side of the workflow. Holds at most one classical data path,
/// released when the next job needs the switch or on [`Orchestrator::finish`].
#[derive(Debug)]
pub struct Orchestrator {
    co: NodeId,
    timing: PhaseTiming,
    nonces: CounterNonces,
    next_job: u64,
    held: Option<Path>,
    trace: Trace,
}

impl Orchestrator {
    /// `co` is the node hosting the orchestrator and the Alice key server.
    pub fn new(co: NodeId, timing: PhaseTiming, nonce_prefix: u32) -> Self {
        Self {
            co,
            timing,
            nonces: CounterNonces::new(nonce_prefix),
            next_job: 1,
            held: None,
            trace: Trace::new(),
        }
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn held_path(&self) -> Option<&Path> {
        self.held.as_ref()
    }

    /// Run one job end to end. Failures are reported in the returned job;
    /// the slave is told to drop its staging with a nack.
    #[allow(clippy::too_many_arguments)]
    pub fn transfer_image(
        &mut self,
        catalog: &Catalog,
        req: &TransferRequest,
        network: &mut OpticalNetwork,
        keys: &SharedKeys,
        link: &mut dyn SlaveLink,
        clock: &mut dyn Clock,
    ) -> TransferJob {
        let id = self.next_job;
        self.next_job += 1;
        let mut job = TransferJob::new(id, req, clock.now());
        if let Err((at, reason)) = self.run_job(&mut job, catalog, req, network, keys, link, clock)
        {
            job.fail(at, reason, clock.now());
            if at > Stage::Requested {
                let abort = WireMessage::Nack {
                    job: id,
                    reason: job.failure.as_ref().unwrap().reason.clone(),
                };
                // a dead link already failed the job; nothing more to tell it
                let _ = self.send(link, &req.dest, &abort, clock.now());
            }
        }
        job
    }

    #[allow(clippy::too_many_arguments)]
    fn run_job(
        &mut self,
        job: &mut TransferJob,
        catalog: &Catalog,
        req: &TransferRequest,
        network: &mut OpticalNetwork,
        keys: &SharedKeys,
        link: &mut dyn SlaveLink,
        clock: &mut dyn Clock,
    ) -> Result<(), (Stage, String)> {
        let dest = &req.dest;
        let image = catalog
            .get(&req.image_id)
            .ok_or_else(|| (Stage::Requested, format!("unknown-image {}", req.image_id)))?;
        if network.topology().role(dest) != Some(NodeRole::Bob) {
            return Err((Stage::Requested, format!("unknown-destination {dest}")));
        }
        job.image_bytes = image.len() as u64;
        let link_err = |at: Stage| move |e: TransferError| (at, format!("link: {e}"));

        let init = WireMessage::TransferInit {
            job: job.id,
            image_id: image.image_id.clone(),
            name: image.name.clone(),
            size: image.len() as u64,
            checksum: image.checksum,
            mode: req.mode,
        };
        self.send(link, dest, &init, clock.now())
            .map_err(link_err(Stage::PathSetup))?;

        self.setup_path(dest, network, clock, job.id)
            .map_err(|e| (Stage::PathSetup, e.to_string()))?;
        job.advance(Stage::PathSetup, clock.now());

        let bits = match req.mode {
            CipherMode::Aes256 => crypto::AES_KEY_BITS,
            CipherMode::Otp => (image.len() as u64 * 8).max(8),
        };
        let key = {
            let mut reg = keys.lock().expect("key registry lock poisoned");
            crypto::request_key(
                &mut reg,
                &self.co,
                dest,
                bits,
                job.id,
                clock.now(),
                &mut self.trace,
            )
            .map_err(|e| (Stage::KeyObtained, CryptoError::from(e).code().to_string()))?
        };
        let key_id = key.key_id;
        job.key_id = Some(key_id);
        job.advance(Stage::KeyObtained, clock.now());

        let started = Instant::now();
        let sealed = if req.faults.corrupt_image && !image.is_empty() {
            let mut bad = image.payload.clone();
            bad[0] ^= 0x01;
            crypto::encrypt(&bad, key, req.mode, &mut self.nonces)
        } else {
            crypto::encrypt(&image.payload, key, req.mode, &mut self.nonces)
        }
        .map_err(|e| (Stage::Encrypted, e.code().to_string()))?;
        let mut bytes = sealed.encode();
        drop(sealed);
        job.timings.encrypt_s = spend(
            clock,
            self.timing.encrypt(image.len()),
            started.elapsed().as_secs_f64(),
        );
        job.advance(Stage::Encrypted, clock.now());

        if req.faults.tamper_chunk {
            let last = bytes.len() - 1;
            bytes[last] ^= 0x80;
        }
        job.payload_bytes = bytes.len() as u64;
        let started = Instant::now();
        let t0 = clock.now();
        for (seq, data) in bytes.chunks(MAX_CHUNK_DATA).enumerate() {
            if let Some(d) = self.timing.send(data.len()) {
                clock.charge(d);
            }
            let chunk = WireMessage::ImageChunk {
                job: job.id,
                seq: seq as u32,
                data: data.to_vec(),
            };
            self.send(link, dest, &chunk, clock.now())
                .map_err(link_err(Stage::Transferring))?;
            job.chunks += 1;
        }
        link.flush().map_err(link_err(Stage::Transferring))?;
        job.timings.send_s = match self.timing {
            PhaseTiming::Modeled { .. } => clock.now() - t0,
            PhaseTiming::Measured => started.elapsed().as_secs_f64(),
        };
        job.advance(Stage::Transferring, clock.now());

        if req.faults.drop_key_at_slave {
            let mut reg = keys.lock().expect("key registry lock poisoned");
            // the key may already be gone; the slave reports it either way
            let _ = reg.forget(dest, &key_id);
        }
        let notify = WireMessage::KeyIdNotify {
            job: job.id,
            image_id: image.image_id.clone(),
            key_id,
        };
        self.send(link, dest, &notify, clock.now())
            .map_err(link_err(Stage::Notified))?;
        job.advance(Stage::Notified, clock.now());

        let reply = link.recv().map_err(link_err(Stage::Decrypted))?;
        match &reply {
            WireMessage::DeployReport { decrypt_s, .. } => {
                if matches!(self.timing, PhaseTiming::Modeled { .. }) {
                    clock.charge(*decrypt_s);
                }
                record(
                    &mut self.trace,
                    clock.now(),
                    &slave_endpoint(dest),
                    CO,
                    &reply,
                );
                job.timings.decrypt_s = *decrypt_s;
                job.advance(Stage::Decrypted, clock.now());
                job.advance(Stage::Deployed, clock.now());
            }
            WireMessage::Nack { reason, .. } => {
                record(
                    &mut self.trace,
                    clock.now(),
                    &slave_endpoint(dest),
                    CO,
                    &reply,
                );
                let at = if reason == "corrupt-image" {
                    Stage::Deployed
                } else {
                    Stage::Decrypted
                };
                return Err((at, reason.clone()));
            }
            other => {
                return Err((
                    Stage::Decrypted,
                    format!("unexpected-reply {}", other.kind()),
                ))
            }
        }

        self.send(
            link,
            dest,
            &WireMessage::Ack200 { job: job.id },
            clock.now(),
        )
        .map_err(link_err(Stage::Acked))?;
        job.advance(Stage::Acked, clock.now());
        Ok(())
    }

    fn send(
        &mut self,
        link: &mut dyn SlaveLink,
        dest: &NodeId,
        msg: &WireMessage,
        now: f64,
    ) -> Result<(), TransferError> {
        record(&mut self.trace, now, CO, &slave_endpoint(dest), msg);
        link.send(msg)
    }

    /// Release the held data path, then connect `co` to `dest` over the
    /// classical plane. Every cross-connect change is sent as a flow-mod.
    fn setup_path(
        &mut self,
        dest: &NodeId,
        network: &mut OpticalNetwork,
        clock: &mut dyn Clock,
        job: u64,
    ) -> Result<(), NetworkError> {
        self.release(network, clock, job)?;
        let path = network.compute_path(&self.co, dest, ChannelClass::Classical)?;
        let mut applied = Trace::new();
        let result = network.establish_path(&path, clock, &mut applied);
        self.merge_control(applied, job);
        result?;
        self.held = Some(path);
        Ok(())
    }

    fn release(
        &mut self,
        network: &mut OpticalNetwork,
        clock: &mut dyn Clock,
        job: u64,
    ) -> Result<(), NetworkError> {
        let Some(path) = self.held.take() else {
            return Ok(());
        };
        let mut applied = Trace::new();
        let result = network.teardown_path(&path, clock, &mut applied);
        self.merge_control(applied, job);
        result.map(|_| ())
    }

    fn merge_control(&mut self, applied: Trace, job: u64) {
        for r in applied.records() {
            if let TraceEvent::Control {
                correlation,
                kind,
                ingress,
                egress,
            } = &r.event
            {
                let msg = WireMessage::FlowMod {
                    job,
                    correlation: *correlation,
                    kind: *kind,
                    ingress: ingress.clone(),
                    egress: egress.clone(),
                };
                record(&mut self.trace, r.time_s, CO, SDN, &msg);
            }
            self.trace.push(r.time_s, r.event.clone());
        }
    }

    /// Tear down the held data path. The flow-mods carry job id 0.
    pub fn finish(
        &mut self,
        network: &mut OpticalNetwork,
        clock: &mut dyn Clock,
    ) -> Result<(), NetworkError> {
        self.release(network, clock, 0)
    }
}

/// Charge a modeled duration to the clock, or return the measured one.
fn spend(clock: &mut dyn Clock, modeled: Option<f64>, measured: f64) -> f64 {
    match modeled {
        Some(d) => {
            clock.charge(d);
            d
        }
        None => measured,
    }
}

/// How the orchestrator reaches the slaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transport {
    /// Slaves in-process; phase durations from `timing`.
    InProcess(PhaseTiming),
    /// One TCP listener per slave on `host`. Port 0 picks ephemeral ports,
    /// otherwise slave `i` (in destination order) binds `base_port + i`.
    /// Transfers run on the wall clock with measured durations.
    Tcp {
        host: std::net::IpAddr,
        base_port: u16,
    },
}

#[derive(Debug, Clone)]
pub struct ProvisioningPlan {
    pub demands: Vec<KeyDemand>,
    pub transfers: Vec<TransferRequest>,
    pub policy: Policy,
    pub transport: Transport,
    pub nonce_prefix: u32,
}

#[derive(Debug)]
pub struct ScenarioReport {
    pub schedule: Option<Schedule>,
    pub execution: Option<ExecutionReport>,
    pub jobs: Vec<TransferJob>,
    /// Key generation followed by the transfers.
    pub trace: Trace,
    pub slaves: BTreeMap<NodeId, SlaveStack>,
    /// Problems outside individual jobs.
    pub errors: Vec<String>,
}

impl ScenarioReport {
    pub fn all_acked(&self) -> bool {
        self.jobs.iter().all(TransferJob::is_acked)
    }

    pub fn is_success(&self) -> bool {
        self.errors.is_empty() && self.all_acked()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(s) = &self.schedule {
            let _ = writeln!(
                out,
                "schedule policy={} entries={} makespan_s={:.6}",
                s.policy,
                s.entries.len(),
                s.makespan
            );
        }
        if let Some(x) = &self.execution {
            let _ = writeln!(
                out,
                "execution started_s={:.6} finished_s={:.6} complete={}",
                x.started_at,
                x.finished_at,
                x.is_complete()
            );
        }
        for job in &self.jobs {
            let _ = writeln!(out, "{}", job.record());
        }
        for e in &self.errors {
            let _ = writeln!(out, "error {e}");
        }
        let acked = self.jobs.iter().filter(|j| j.is_acked()).count();
        let _ = writeln!(
            out,
            "summary jobs={} acked={} failed={}",
            self.jobs.len(),
            acked,
            self.jobs.len() - acked
        );
        out
    }
}

/// Key demands needed on top of `explicit` so that every transfer finds its
/// key, given what the Alice store already shares with each destination.
pub fn key_shortfall(
    transfers: &[TransferRequest],
    catalog: &Catalog,
    testbed: &Testbed,
    explicit: &[KeyDemand],
) -> Vec<KeyDemand> {
    let mut order: Vec<NodeId> = Vec::new();
    let mut need: BTreeMap<NodeId, u64> = BTreeMap::new();
    for t in transfers {
        let Some(image) = catalog.get(&t.image_id) else {
            continue;
        };
        if testbed.network.topology().role(&t.dest) != Some(NodeRole::Bob) {
            continue;
        }
        if !need.contains_key(&t.dest) {
            order.push(t.dest.clone());
        }
        *need.entry(t.dest.clone()).or_default() +=
            t.mode.key_bits_for(image.len(), testbed.params.block_bits);
    }
    let keys = testbed.keys.lock().expect("key registry lock poisoned");
    let alice = keys.store(testbed.alice_node()).ok();
    order
        .into_iter()
        .filter_map(|dest| {
            let have = alice.map_or(0, |s| s.available_bits_with(&dest))
                + explicit
                    .iter()
                    .filter(|d| d.bob == dest)
                    .map(|d| d.bits)
                    .sum::<u64>();
            let short = need[&dest].saturating_sub(have);
            (short > 0).then_some(KeyDemand {
                bob: dest,
                bits: short,
            })
        })
        .collect()
}

/// Generate keys (explicit demands plus whatever the transfers lack), then
/// run every transfer. A failed job does not stop the others.
pub fn run_secured_provisioning(
    plan: &ProvisioningPlan,
    catalog: &Catalog,
    testbed: &mut Testbed,
    clock: &mut dyn Clock,
) -> ScenarioReport {
    let mut report = ScenarioReport {
        schedule: None,
        execution: None,
        jobs: Vec::new(),
        trace: Trace::new(),
        slaves: BTreeMap::new(),
        errors: Vec::new(),
    };

    let mut demands = plan.demands.clone();
    demands.extend(key_shortfall(
        &plan.transfers,
        catalog,
        testbed,
        &plan.demands,
    ));
    if !demands.is_empty() {
        let alice = testbed.alice_node().clone();
        match build_schedule(
            &demands,
            &testbed.network,
            &alice,
            &testbed.model,
            testbed.params.block_bits,
            plan.policy,
        ) {
            Ok(schedule) => {
                let exec = execute_schedule(&schedule, testbed, clock);
                if let Some(e) = &exec.failure {
                    report.errors.push(format!("key generation: {e}"));
                }
                report.trace.extend(exec.trace.clone());
                report.schedule = Some(schedule);
                report.execution = Some(exec);
            }
            Err(e) => report.errors.push(format!("schedule: {e}")),
        }
    }

    let mut dests: Vec<NodeId> = Vec::new();
    for t in &plan.transfers {
        if !dests.contains(&t.dest)
            && testbed.network.topology().role(&t.dest) == Some(NodeRole::Bob)
        {
            dests.push(t.dest.clone());
        }
    }
    let co = testbed.alice_node().clone();
    match plan.transport {
        Transport::InProcess(timing) => {
            let mut links: BTreeMap<NodeId, InProcessLink> = dests
                .iter()
                .map(|d| {
                    (
                        d.clone(),
                        InProcessLink::new(SlaveStack::new(
                            d.clone(),
                            testbed.keys.clone(),
                            timing,
                        )),
                    )
                })
                .collect();
            let mut orch = Orchestrator::new(co, timing, plan.nonce_prefix);
            run_jobs(
                &mut orch,
                plan,
                catalog,
                testbed,
                clock,
                &mut report,
                &mut links,
            );
            report.trace.extend(orch.into_trace());
            report.slaves = links
                .into_iter()
                .map(|(d, l)| (d, l.into_slave()))
                .collect();
        }
        Transport::Tcp { host, base_port } => {
            let mut wall = crate::clock::WallClock::starting_at(clock.now());
            let mut servers = Vec::new();
            let mut links: BTreeMap<NodeId, TcpLink> = BTreeMap::new();
            for (i, d) in dests.iter().enumerate() {
                let port = if base_port == 0 {
                    0
                } else {
                    base_port.saturating_add(i as u16)
                };
                let slave = SlaveStack::new(d.clone(), testbed.keys.clone(), PhaseTiming::Measured);
                let started = SlaveServer::spawn(slave, SocketAddr::new(host, port))
                    .map_err(TransferError::from)
                    .and_then(|srv| TcpLink::connect(srv.addr()).map(|link| (srv, link)));
                match started {
                    Ok((srv, link)) => {
                        servers.push(srv);
                        links.insert(d.clone(), link);
                    }
                    Err(e) => report.errors.push(format!("slave {d}: {e}")),
                }
            }
            let mut orch = Orchestrator::new(co, PhaseTiming::Measured, plan.nonce_prefix);
            run_jobs(
                &mut orch,
                plan,
                catalog,
                testbed,
                &mut wall,
                &mut report,
                &mut links,
            );
            report.trace.extend(orch.into_trace());
            for (d, link) in links {
                if let Err(e) = link.close() {
                    report.errors.push(format!("closing link to {d}: {e}"));
                }
            }
            for srv in servers {
                match srv.join() {
                    Ok(slave) => {
                        report.slaves.insert(slave.node().clone(), slave);
                    }
                    Err(e) => report.errors.push(format!("slave endpoint: {e}")),
                }
            }
        }
    }
    report
}

fn run_jobs<L: SlaveLink>(
    orch: &mut Orchestrator,
    plan: &ProvisioningPlan,
    catalog: &Catalog,
    testbed: &mut Testbed,
    clock: &mut dyn Clock,
    report: &mut ScenarioReport,
    links: &mut BTreeMap<NodeId, L>,
) {
    let mut unreachable = Unreachable;
    for req in &plan.transfers {
        let link: &mut dyn SlaveLink = match links.get_mut(&req.dest) {
            Some(l) => l,
            None => &mut unreachable,
        };
        let job = orch.transfer_image(
            catalog,
            req,
            &mut testbed.network,
            &testbed.keys,
            link,
            clock,
        );
        report.jobs.push(job);
    }
    if let Err(e) = orch.finish(&mut testbed.network, clock) {
        report.errors.push(format!("releasing data path: {e}"));
    }
}

/// Stand-in link for destinations without a slave.
struct Unreachable;

impl SlaveLink for Unreachable {
    fn send(&mut self, _: &WireMessage) -> Result<(), TransferError> {
        Err(TransferError::NoReply)
    }

    fn recv(&mut self) -> Result<WireMessage, TransferError> {
        Err(TransferError::NoReply)
    }
}
