//! Scenario files and the runnable scenarios behind the command line.
//!
//! A scenario is one TOML file. Every field has a default, so an empty file
//! describes the three-Bob testbed with one 16 MiB image per Bob.
//! Scenario commands return their output files as text; writing them is up
//! to the caller.

use crate::clock::SimClock;
use crate::crypto::CipherMode;
use crate::link_model::{ChannelModel, LinkModel, LinkModelError};
use crate::orchestrator::{
    run_secured_provisioning, Catalog, PhaseTiming, ProvisioningPlan, TransferRequest, Transport,
    VnfImage,
};
use crate::scheduler::{build_schedule, execute_schedule, KeyDemand, Policy};
use crate::session::DEFAULT_BLOCK_BITS;
use crate::testbed::{splitmix64, Testbed, TestbedParams};
use crate::topology::{NodeId, NodeRole, Topology, TopologySpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_IMAGE_BYTES: u64 = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Simulated clock and in-process slaves.
    #[default]
    Simulate,
    /// Slaves behind localhost sockets; transfers run on the wall clock.
    Serve,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulate" => Ok(Mode::Simulate),
            "serve" => Ok(Mode::Serve),
            other => Err(format!(
                "unknown mode `{other}` (expected simulate or serve)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageConfig {
    pub image_id: String,
    #[serde(default)]
    pub name: Option<String>,
    /// Defaults to the scenario's `image_size_bytes`.
    #[serde(default)]
    pub size_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub distances_km: Vec<f64>,
    /// Also emit a gnuplot script next to the CSV.
    pub gnuplot: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            distances_km: (0..=10).map(|i| f64::from(i) * 2.5).collect(),
            gnuplot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: IpAddr,
    /// 0 picks ephemeral ports; otherwise slaves bind consecutive ports.
    pub base_port: u16,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: IpAddr::from([127, 0, 0, 1]),
            base_port: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub mode: Mode,
    pub policy: Policy,
    /// Cipher for the default transfers.
    pub cipher: CipherMode,
    pub block_bits: u32,
    pub image_size_bytes: u64,
    pub output_dir: PathBuf,
    pub tick_s: f64,
    pub bank_interval_s: f64,
    /// Bob distances for the built-in testbed. Ignored when `topology` is set.
    pub bob_km: Vec<f64>,
    pub topology: Option<TopologySpec>,
    pub channel: ChannelModel<f64>,
    /// Phase durations of simulated transfers.
    pub timing: PhaseTiming,
    pub demands: Vec<KeyDemand>,
    pub images: Vec<ImageConfig>,
    /// Empty means one transfer of the first image to every Bob.
    pub transfers: Vec<TransferRequest>,
    pub sweep: SweepConfig,
    pub serve: ServeConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 1,
            mode: Mode::Simulate,
            policy: Policy::Fifo,
            cipher: CipherMode::Aes256,
            block_bits: DEFAULT_BLOCK_BITS,
            image_size_bytes: DEFAULT_IMAGE_BYTES,
            output_dir: PathBuf::from("out"),
            tick_s: 1e-3,
            bank_interval_s: 1.0,
            bob_km: vec![0.0, 10.0, 25.0],
            topology: None,
            channel: ChannelModel::default(),
            timing: PhaseTiming::default(),
            demands: Vec::new(),
            images: Vec::new(),
            transfers: Vec::new(),
            sweep: SweepConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ScenarioError {
    pub fn is_config(&self) -> bool {
        matches!(self, ScenarioError::Config(_))
    }
}

fn config_err(e: impl ToString) -> ScenarioError {
    ScenarioError::Config(e.to_string())
}

impl From<LinkModelError> for ScenarioError {
    fn from(e: LinkModelError) -> Self {
        config_err(e)
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn topology_spec(&self) -> TopologySpec {
        self.topology
            .clone()
            .unwrap_or_else(|| TopologySpec::testbed(&self.bob_km))
    }

    pub fn bobs(&self) -> Result<Vec<NodeId>, ScenarioError> {
        let topo = Topology::new(&self.topology_spec()).map_err(config_err)?;
        Ok(topo.nodes_with_role(NodeRole::Bob))
    }

    /// Image catalog. Payloads are seeded from the scenario seed and the
    /// image's position in the list.
    pub fn catalog(&self) -> Catalog {
        let mut catalog = Catalog::new();
        for (i, img) in self.resolved_images().iter().enumerate() {
            let size = img.size_bytes.unwrap_or(self.image_size_bytes) as usize;
            let seed = splitmix64(self.seed ^ (i as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
            let name = img.name.clone().unwrap_or_else(|| img.image_id.clone());
            catalog.insert(VnfImage::synthetic(img.image_id.clone(), name, size, seed));
        }
        catalog
    }

    fn resolved_images(&self) -> Vec<ImageConfig> {
        if self.images.is_empty() {
            vec![ImageConfig {
                image_id: "vnf-image".into(),
                name: Some("vnf".into()),
                size_bytes: None,
            }]
        } else {
            self.images.clone()
        }
    }

    pub fn resolved_transfers(&self) -> Result<Vec<TransferRequest>, ScenarioError> {
        if !self.transfers.is_empty() {
            return Ok(self.transfers.clone());
        }
        let image = self.resolved_images()[0].image_id.clone();
        Ok(self
            .bobs()?
            .into_iter()
            .map(|b| TransferRequest::new(image.clone(), b, self.cipher))
            .collect())
    }

    /// Explicit demands, or 4096 bits per Bob when none are given.
    pub fn resolved_demands(&self) -> Result<Vec<KeyDemand>, ScenarioError> {
        if !self.demands.is_empty() {
            return Ok(self.demands.clone());
        }
        Ok(self
            .bobs()?
            .into_iter()
            .map(|bob| KeyDemand { bob, bits: 4096 })
            .collect())
    }

    pub fn testbed(&self) -> Result<Testbed, ScenarioError> {
        let topo = Topology::new(&self.topology_spec()).map_err(config_err)?;
        let params = TestbedParams {
            block_bits: self.block_bits,
            tick_s: self.tick_s,
            bank_interval_s: self.bank_interval_s,
            seed: self.seed,
        };
        Testbed::new(topo, self.channel, params).map_err(config_err)
    }

    /// Every violated invariant, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.topology.is_some() && self.bob_km != ScenarioConfig::default().bob_km {
            out.push("set either `topology` or `bob_km`, not both".into());
        }
        if let Some(d) = self.bob_km.iter().find(|d| !d.is_finite() || **d < 0.0) {
            out.push(format!(
                "bob_km entries must be finite and non-negative, got {d}"
            ));
        }
        let topo = match Topology::new(&self.topology_spec()) {
            Ok(t) => Some(t),
            Err(e) => {
                out.push(format!("topology: {e}"));
                None
            }
        };
        if let Some(t) = &topo {
            let alices = t.nodes_with_role(NodeRole::Alice).len();
            if alices != 1 {
                out.push(format!(
                    "topology must have exactly one alice node, found {alices}"
                ));
            }
            if t.nodes_with_role(NodeRole::Bob).is_empty() {
                out.push("topology has no bob node".into());
            }
        }
        if let Err(e) = self.channel.validate() {
            out.push(format!("channel: {e}"));
        }
        if self.block_bits == 0 || !self.block_bits.is_multiple_of(8) {
            out.push(format!(
                "block_bits must be a positive multiple of 8, got {}",
                self.block_bits
            ));
        }
        if !(self.tick_s > 0.0 && self.tick_s.is_finite()) {
            out.push(format!("tick_s must be positive, got {}", self.tick_s));
        }
        if !(self.bank_interval_s > 0.0 && self.bank_interval_s.is_finite()) {
            out.push(format!(
                "bank_interval_s must be positive, got {}",
                self.bank_interval_s
            ));
        }
        if let PhaseTiming::Modeled {
            encrypt_bps,
            send_bps,
            decrypt_bps,
        } = self.timing
        {
            if [encrypt_bps, send_bps, decrypt_bps]
                .iter()
                .any(|v| !(*v > 0.0 && v.is_finite()))
            {
                out.push("timing throughputs must be positive".into());
            }
        }
        if let Some(d) = self
            .sweep
            .distances_km
            .iter()
            .find(|d| !d.is_finite() || **d < 0.0)
        {
            out.push(format!(
                "sweep distances must be finite and non-negative, got {d}"
            ));
        }
        let is_bob = |n: &NodeId| topo.as_ref().and_then(|t| t.role(n)) == Some(NodeRole::Bob);
        for d in &self.demands {
            if !is_bob(&d.bob) {
                out.push(format!("demand names `{}`, which is not a bob node", d.bob));
            }
            if d.bits == 0 {
                out.push(format!("demand for `{}` requests zero bits", d.bob));
            }
        }
        let mut ids: Vec<&str> = Vec::new();
        for img in &self.images {
            if ids.contains(&img.image_id.as_str()) {
                out.push(format!("image `{}` is listed twice", img.image_id));
            }
            ids.push(&img.image_id);
        }
        let images = self.resolved_images();
        for t in &self.transfers {
            if !images.iter().any(|i| i.image_id == t.image_id) {
                out.push(format!("transfer names unknown image `{}`", t.image_id));
            }
            if !is_bob(&t.dest) {
                out.push(format!(
                    "transfer destination `{}` is not a bob node",
                    t.dest
                ));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            out.push("output_dir must not be empty".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        match self.problems().as_slice() {
            [] => Ok(()),
            many => Err(ScenarioError::Config(many.join("; "))),
        }
    }
}

/// Files produced by a scenario plus a short human summary. A scenario that
/// ran but did not succeed still returns its files, with `failure` set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioOutput {
    pub files: BTreeMap<String, String>,
    pub summary: String,
    pub failure: Option<String>,
}

impl ScenarioOutput {
    pub fn is_success(&self) -> bool {
        self.failure.is_none()
    }

    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ScenarioError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        for (name, body) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(io(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

pub const FIG2_HEADER: &str = "distance_km,init_time_s,key_rate_bps,qber,attenuation_db";

/// Link model sampled at each distance, one CSV row per distance.
pub fn fig2_csv(model: &ChannelModel<f64>, distances: &[f64]) -> Result<String, ScenarioError> {
    let mut csv = format!("{FIG2_HEADER}\n");
    for &d in distances {
        if !d.is_finite() {
            return Err(config_err(format!("distance {d} is not finite")));
        }
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            d,
            model.init_time_s(d)?,
            model.secret_key_rate_bps(d)?,
            model.qber(d)?,
            model.attenuation_db(d)?
        );
    }
    Ok(csv)
}

const FIG2_GNUPLOT: &str = "\
set datafile separator ','
set key autotitle columnhead
set xlabel 'distance (km)'
set terminal pngcairo size 1200,400
set output 'fig2.png'
set multiplot layout 1,3
set ylabel 'init time (s)'
plot 'fig2.csv' using 1:2 with linespoints
set ylabel 'secret key rate (b/s)'
set logscale y
plot 'fig2.csv' using 1:3 with linespoints
unset logscale y
set ylabel 'QBER'
set y2label 'attenuation (dB)'
set y2tics
plot 'fig2.csv' using 1:4 with linespoints, '' using 1:5 axes x1y2 with linespoints
unset multiplot
";

/// Sweep the link model. `distances` overrides the configured list.
pub fn cmd_fig2_sweep(
    config: &ScenarioConfig,
    distances: Option<&[f64]>,
) -> Result<ScenarioOutput, ScenarioError> {
    config.channel.validate()?;
    let distances = distances.unwrap_or(&config.sweep.distances_km);
    if let Some(d) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(config_err(format!(
            "bad distance {d}: must be finite and non-negative"
        )));
    }
    let mut out = ScenarioOutput::default();
    out.files
        .insert("fig2.csv".into(), fig2_csv(&config.channel, distances)?);
    if config.sweep.gnuplot {
        out.files.insert("fig2.gp".into(), FIG2_GNUPLOT.into());
    }
    out.summary = format!("swept {} distances", distances.len());
    Ok(out)
}

/// Plan and execute key generation for the configured demands on a
/// simulated clock.
pub fn cmd_timeshare_demo(config: &ScenarioConfig) -> Result<ScenarioOutput, ScenarioError> {
    config.validate()?;
    let mut tb = config.testbed()?;
    let demands = config.resolved_demands()?;
    let alice = tb.alice_node().clone();
    let schedule = build_schedule(
        &demands,
        &tb.network,
        &alice,
        &tb.model,
        config.block_bits,
        config.policy,
    )
    .map_err(config_err)?;
    let mut clock = SimClock::new();
    let report = execute_schedule(&schedule, &mut tb, &mut clock);

    let mut out = ScenarioOutput::default();
    out.files.insert("schedule.csv".into(), schedule.to_csv());
    out.files.insert("executed.csv".into(), report.to_csv());
    out.files.insert("trace.log".into(), report.trace.to_text());
    out.files.insert("keys.txt".into(), key_dump(&tb));
    out.summary = format!(
        "{} entries, planned makespan {:.6} s, executed in {:.6} s",
        schedule.entries.len(),
        schedule.makespan,
        report.finished_at - report.started_at
    );
    out.failure = report.failure.map(|e| e.to_string());
    Ok(out)
}

/// Key generation followed by every configured transfer.
pub fn cmd_transfer_demo(config: &ScenarioConfig) -> Result<ScenarioOutput, ScenarioError> {
    config.validate()?;
    let mut tb = config.testbed()?;
    let catalog = config.catalog();
    let transport = match config.mode {
        Mode::Simulate => Transport::InProcess(config.timing),
        Mode::Serve => Transport::Tcp {
            host: config.serve.host,
            base_port: config.serve.base_port,
        },
    };
    let plan = ProvisioningPlan {
        demands: config.demands.clone(),
        transfers: config.resolved_transfers()?,
        policy: config.policy,
        transport,
        nonce_prefix: splitmix64(config.seed) as u32,
    };
    let mut clock = SimClock::new();
    let report = run_secured_provisioning(&plan, &catalog, &mut tb, &mut clock);

    let mut out = ScenarioOutput::default();
    out.files.insert("report.txt".into(), report.to_text());
    out.files.insert("trace.log".into(), report.trace.to_text());
    if let Some(s) = &report.schedule {
        out.files.insert("schedule.csv".into(), s.to_csv());
    }
    if let Some(x) = &report.execution {
        out.files.insert("executed.csv".into(), x.to_csv());
    }
    let acked = report.jobs.iter().filter(|j| j.is_acked()).count();
    out.summary = format!("{acked}/{} transfer jobs acked", report.jobs.len());
    for job in &report.jobs {
        let t = &job.timings;
        let _ = write!(
            out.summary,
            "\n  job {} -> {}: encrypt {:.3} s, send {:.3} s, decrypt {:.3} s, total {:.3} s",
            job.id, job.dest, t.encrypt_s, t.send_s, t.decrypt_s, t.total_s
        );
    }
    if !report.is_success() {
        let mut why: Vec<String> = report.errors.clone();
        why.extend(report.jobs.iter().filter_map(|j| {
            j.failure
                .as_ref()
                .map(|f| format!("job {} failed at {}: {}", j.id, f.at, f.reason))
        }));
        out.failure = Some(why.join("; "));
    }
    Ok(out)
}

/// Check the configuration and render it with every default filled in.
pub fn cmd_validate(config: &ScenarioConfig) -> Result<ScenarioOutput, ScenarioError> {
    config.validate()?;
    let mut resolved = config.clone();
    resolved.transfers = config.resolved_transfers()?;
    resolved.images = config.resolved_images();
    Ok(ScenarioOutput {
        summary: resolved.to_toml(),
        ..ScenarioOutput::default()
    })
}

fn key_dump(tb: &Testbed) -> String {
    let keys = tb.keys.lock().expect("key registry lock poisoned");
    let mut out = String::new();
    for (node, _) in tb.network.topology().nodes() {
        if let Ok(store) = keys.store(node) {
            let _ = writeln!(
                out,
                "# store {node} available_bits={}",
                store.available_bits()
            );
            out.push_str(&store.dump());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_scenario() {
        let c = ScenarioConfig::from_toml("").unwrap();
        assert_eq!(c, ScenarioConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ScenarioConfig::default();
        let back = ScenarioConfig::from_toml(&cmd_validate(&c).unwrap().summary).unwrap();
        assert_eq!(back.transfers.len(), 3);
        assert_eq!(back.channel, c.channel);
        back.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ScenarioConfig::from_toml("sede = 3")
            .unwrap_err()
            .is_config());
        assert!(ScenarioConfig::from_toml("[channel]\nrate = 3.0")
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn references_must_exist() {
        let c = ScenarioConfig::from_toml(
            "[[demands]]\nbob = \"node9\"\nbits = 10\n[[transfers]]\nimage_id = \"x\"\ndest = \"node1\"\n",
        )
        .unwrap();
        let p = c.problems();
        assert_eq!(p.len(), 3, "{p:?}");
    }

    #[test]
    fn sweep_rows() {
        let c = ScenarioConfig::default();
        let out = cmd_fig2_sweep(&c, Some(&[0.0, 25.0])).unwrap();
        assert_eq!(
            out.files["fig2.csv"],
            format!("{FIG2_HEADER}\n0,400,4000,0.01,0\n25,1265,100,0.053,5\n")
        );
        let out = cmd_fig2_sweep(&c, Some(&[])).unwrap();
        assert_eq!(out.files["fig2.csv"], format!("{FIG2_HEADER}\n"));
        assert!(cmd_fig2_sweep(&c, Some(&[-1.0])).unwrap_err().is_config());
    }

    #[test]
    fn timeshare_is_deterministic() {
        let c = ScenarioConfig::default();
        assert_eq!(
            cmd_timeshare_demo(&c).unwrap(),
            cmd_timeshare_demo(&c).unwrap()
        );
    }

    #[test]
    fn small_transfer_demo() {
        let mut c = ScenarioConfig::from_toml("image_size_bytes = 4096\ncipher = \"otp\"").unwrap();
        c.bob_km = vec![5.0];
        let out = cmd_transfer_demo(&c).unwrap();
        assert!(
            out.files["report.txt"].contains("state=acked"),
            "{}",
            out.files["report.txt"]
        );
    }
}
