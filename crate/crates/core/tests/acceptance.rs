//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! then fails if any criterion failed.

mod common;

use common::{is_workflow, node, pairing_violations, testbed, workflow_kinds};
use qkdnfv::clock::{Clock, SimClock};
use qkdnfv::crypto::{
    decrypt, decrypt_with_key, encrypt, CipherMode, CounterNonces, CryptoError, EncryptedPayload,
};
use qkdnfv::orchestrator::{
    run_secured_provisioning, Catalog, PhaseTiming, ProvisioningPlan, TransferRequest, Transport,
    VnfImage,
};
use qkdnfv::scenario::{cmd_fig2_sweep, cmd_timeshare_demo, cmd_transfer_demo, ScenarioConfig};
use qkdnfv::scheduler::{build_schedule, execute_schedule, KeyDemand, Policy};
use qkdnfv::session::{KeyId, KeyRegistry, KeyStoreError, Phase};
use qkdnfv::testbed::Testbed;
use qkdnfv::topology::NodeId;
use qkdnfv::trace::{Trace, TraceEvent};
use qkdnfv::wire::MessageKind;
use qkdnfv::{ChannelModelF64, LinkModel};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

type Outcome = Result<String, String>;
type Registry = (KeyRegistry, Vec<NodeId>, Vec<KeyId>);

fn check(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

fn parse_rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect()
}

fn anchors() -> Outcome {
    let started = Instant::now();
    let out = cmd_fig2_sweep(&ScenarioConfig::default(), Some(&[0.0, 25.0]))
        .map_err(|e| e.to_string())?;
    let rows = parse_rows(&out.files["fig2.csv"]);
    check(rows.len() == 2, || format!("{} rows", rows.len()))?;
    let (near, far) = (&rows[0], &rows[1]);
    // the anchors are exact, not approximate
    check(near[1] == 400.0 && far[1] == 1265.0, || {
        format!("init {} / {}", near[1], far[1])
    })?;
    check(near[2] == 4000.0 && far[2] == 100.0, || {
        format!("rate {} / {}", near[2], far[2])
    })?;
    check(far[3] == 0.053, || format!("qber {}", far[3]))?;
    check(near[3] == 0.010 && near[4] == 0.0 && far[4] == 5.0, || {
        format!("{near:?} {far:?}")
    })?;
    let secs = started.elapsed().as_secs_f64();
    check(secs < 1.0, || format!("took {secs:.3} s"))?;
    Ok(format!("rows {near:?} {far:?} in {secs:.3} s"))
}

fn monotonicity() -> Outcome {
    let started = Instant::now();
    let distances: Vec<f64> = (0..=100).map(|i| 0.25 * f64::from(i)).collect();
    let out =
        cmd_fig2_sweep(&ScenarioConfig::default(), Some(&distances)).map_err(|e| e.to_string())?;
    let rows = parse_rows(&out.files["fig2.csv"]);
    check(rows.len() == 101, || format!("{} rows", rows.len()))?;
    let m = ChannelModelF64::default();
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        check(a[1] < b[1], || {
            format!("init not increasing at {} km", b[0])
        })?;
        check(a[2] > b[2], || {
            format!("rate not decreasing at {} km", b[0])
        })?;
        check(a[3] < b[3], || {
            format!("qber not increasing at {} km", b[0])
        })?;
    }
    let mut worst: f64 = 0.0;
    for w in rows.windows(3) {
        worst = worst.max((w[2][4] - 2.0 * w[1][4] + w[0][4]).abs());
    }
    check(worst <= 1e-9, || {
        format!("attenuation second difference {worst:e}")
    })?;
    for r in &rows {
        check(
            r[1] == m.init_time_s(r[0]).unwrap()
                && r[2] == m.secret_key_rate_bps(r[0]).unwrap()
                && r[3] == m.qber(r[0]).unwrap()
                && r[4] == m.attenuation_db(r[0]).unwrap(),
            || format!("row {r:?} differs from the model"),
        )?;
    }
    let secs = started.elapsed().as_secs_f64();
    check(secs < 1.0, || format!("took {secs:.3} s"))?;
    Ok(format!(
        "101 rows, max |second difference| {worst:e}, {secs:.3} s"
    ))
}

/// Sessions that reached initializing while another session of the same
/// Alice had not been torn down.
fn overlapping_sessions(trace: &Trace) -> usize {
    let mut live: Vec<NodeId> = Vec::new();
    let mut violations = 0;
    for r in trace.records() {
        if let TraceEvent::Session { bob, phase, .. } = &r.event {
            match phase {
                Phase::Initializing { .. } => {
                    if live.iter().any(|b| b != bob) {
                        violations += 1;
                    }
                    live.push(bob.clone());
                }
                Phase::TornDown => live.retain(|b| b != bob),
                _ => {}
            }
        }
    }
    violations
}

struct ScheduleRuns {
    worst_gap: f64,
    violations: usize,
    testbeds: Vec<Testbed>,
    wall_s: f64,
    simulated_s: f64,
}

fn schedule_runs() -> Result<ScheduleRuns, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let mut runs = ScheduleRuns {
        worst_gap: 0.0,
        violations: 0,
        testbeds: Vec::new(),
        wall_s: 0.0,
        simulated_s: 0.0,
    };
    for run in 0..100 {
        let bobs = rng.random_range(1..=5usize);
        let km: Vec<f64> = (0..bobs).map(|_| rng.random_range(0.0..=25.0)).collect();
        let mut tb = testbed(&km, rng.next_u64());
        let mut demands: Vec<KeyDemand> = (0..bobs)
            .map(|i| KeyDemand {
                bob: NodeId(format!("node{}", i + 2)),
                bits: rng.random_range(256..=65536),
            })
            .collect();
        // shuffle the arrival order
        for i in (1..demands.len()).rev() {
            demands.swap(i, rng.random_range(0..=i));
        }
        let policy = if rng.random_bool(0.5) {
            Policy::Fifo
        } else {
            Policy::ShortestDistanceFirst
        };
        let schedule = build_schedule(
            &demands,
            &tb.network,
            &node("node1"),
            &tb.model,
            256,
            policy,
        )
        .map_err(|e| format!("run {run}: {e}"))?;
        let mut clock = SimClock::new();
        let report = execute_schedule(&schedule, &mut tb, &mut clock);
        if let Some(e) = report.failure {
            return Err(format!("run {run}: {e}"));
        }
        let gap = (report.finished_at - report.started_at - schedule.makespan).abs();
        runs.worst_gap = runs.worst_gap.max(gap);
        runs.simulated_s += clock.now();
        runs.violations += overlapping_sessions(&report.trace);
        runs.violations += qkdnfv::scheduler::exclusivity_violations(&report.trace);
        runs.testbeds.push(tb);
    }
    runs.wall_s = started.elapsed().as_secs_f64();
    Ok(runs)
}

fn scheduler_oracle(runs: &ScheduleRuns) -> Outcome {
    check(runs.worst_gap <= 1e-3, || {
        format!("worst |executed - makespan| = {:e} s", runs.worst_gap)
    })?;
    check(runs.wall_s < 30.0, || format!("took {:.2} s", runs.wall_s))?;
    Ok(format!(
        "100 sets, worst gap {:e} s, {:.0} simulated s in {:.2} s",
        runs.worst_gap, runs.simulated_s, runs.wall_s
    ))
}

fn exclusivity(runs: &ScheduleRuns) -> Outcome {
    check(runs.violations == 0, || {
        format!("{} violations", runs.violations)
    })?;
    Ok("0 violations over 100 runs".into())
}

/// Pairing over every store, then a first and second consumption of every
/// still-available block at each store.
fn pairing_and_single_use(registries: &mut [Registry]) -> Outcome {
    let mut violations = 0;
    let mut first: Option<String> = None;
    let mut blocks = 0;
    let mut consumptions = 0;
    for (keys, nodes, dropped) in registries.iter_mut() {
        // keys removed on purpose by the drop-key fault leave their peer unpaired
        violations += pairing_violations(keys, nodes) - dropped.len();
        for n in nodes.iter() {
            let Ok(store) = keys.store(n) else { continue };
            blocks += store.blocks().count();
            let ids: Vec<_> = store.blocks().map(|b| (b.key_id, b.consumed)).collect();
            for (id, consumed) in ids {
                if !consumed {
                    if let Err(e) = keys.fetch_key_by_id(n, &id) {
                        violations += 1;
                        first.get_or_insert(format!("first use of {id} at {n}: {e}"));
                    }
                    consumptions += 1;
                }
                let again = keys.fetch_key_by_id(n, &id);
                if again != Err(KeyStoreError::AlreadyConsumed(id)) {
                    violations += 1;
                    first.get_or_insert(format!(
                        "second use of {id} at {n}: {:?}",
                        again.map(|b| b.key_id)
                    ));
                }
            }
        }
    }
    check(violations == 0, || {
        format!(
            "{violations} violations, first: {}",
            first.unwrap_or_default()
        )
    })?;
    Ok(format!(
        "{blocks} blocks across stores, {consumptions} first uses, 0 violations"
    ))
}

fn crypto_round_trip() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    let (a, b) = (node("a"), node("b"));
    let mut violations: Vec<String> = Vec::new();
    let mut nonces = CounterNonces::new(0xacce_0006);
    let max = 1usize << 20;
    let mut total = 0usize;
    for i in 0..1000 {
        // log-uniform over 1 B .. 1 MiB, with both ends included
        let len = match i {
            0 => 1,
            1 => max,
            _ => (2f64.powf(rng.random_range(0.0..20.0)) as usize).clamp(1, max),
        };
        total += len;
        let mut data = vec![0u8; len];
        rng.fill_bytes(&mut data);
        let mut pad = vec![0u8; len];
        rng.fill_bytes(&mut pad);
        let mut aes_key = vec![0u8; 32];
        rng.fill_bytes(&mut aes_key);
        let mut keys = KeyRegistry::new(&[a.clone(), b.clone()]);
        keys.deposit(&a, &b, aes_key, 0.0).unwrap();
        keys.deposit(&a, &b, pad.clone(), 0.0).unwrap();

        let k = keys.reserve_key(&a, &b, 256).unwrap();
        let aes_block = k.clone();
        let sealed =
            encrypt(&data, k, CipherMode::Aes256, &mut nonces).map_err(|e| e.to_string())?;
        let wire = EncryptedPayload::decode(&sealed.encode()).map_err(|e| e.to_string())?;
        match decrypt(&wire, &mut keys, &b) {
            Ok(p) if p == data => {}
            other => violations.push(format!("aes len {len}: {:?}", other.map(|p| p.len()))),
        }

        // one single-bit tamper over key id, nonce, ciphertext and tag
        let mut tampered = sealed.clone();
        if let EncryptedPayload::Aes256 {
            key_id,
            nonce,
            ciphertext,
            tag,
        } = &mut tampered
        {
            let bits = (16 + nonce.len() + ciphertext.len() + tag.len()) * 8;
            let bit = rng.random_range(0..bits);
            let (byte, mask) = (bit / 8, 1u8 << (bit % 8));
            match byte {
                x if x < 16 => key_id.0[x] ^= mask,
                x if x < 28 => nonce[x - 16] ^= mask,
                x if x < 28 + ciphertext.len() => ciphertext[x - 28] ^= mask,
                x => tag[x - 28 - ciphertext.len()] ^= mask,
            }
        }
        if decrypt_with_key(&tampered, &aes_block) != Err(CryptoError::IntegrityFailure) {
            violations.push(format!("tamper not detected, len {len}"));
        }

        let k = keys.reserve_key(&a, &b, len as u64 * 8).unwrap();
        let otp = encrypt(&data, k, CipherMode::Otp, &mut nonces).map_err(|e| e.to_string())?;
        let oracle: Vec<u8> = data.iter().zip(&pad).map(|(d, p)| d ^ p).collect();
        if otp.ciphertext() != oracle.as_slice() {
            violations.push(format!("otp differs from xor oracle, len {len}"));
        }
        let wire = EncryptedPayload::decode(&otp.encode()).map_err(|e| e.to_string())?;
        match decrypt(&wire, &mut keys, &b) {
            Ok(p) if p == data => {}
            other => violations.push(format!("otp len {len}: {:?}", other.map(|p| p.len()))),
        }

        if len >= 2 {
            let short = rng.random_range(1..len);
            keys.deposit(&a, &b, vec![0x42; short], 0.0).unwrap();
            let k = keys.reserve_key(&a, &b, short as u64 * 8).unwrap();
            if encrypt(&data, k, CipherMode::Otp, &mut nonces).is_ok() {
                violations.push(format!("short otp key accepted, len {len} key {short}"));
            }
        }
    }
    check(violations.is_empty(), || {
        format!("{} violations, first: {}", violations.len(), violations[0])
    })?;
    Ok(format!(
        "1000 payloads, {:.1} MiB, 0 violations in {:.2} s",
        total as f64 / f64::from(1 << 20),
        started.elapsed().as_secs_f64()
    ))
}

fn workflow_sequence() -> Result<(String, Registry), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    let mut catalog = Catalog::new();
    for i in 0..8 {
        let size = rng.random_range(1..=256 * 1024usize);
        catalog.insert(VnfImage::synthetic(
            format!("vnf-{i}"),
            format!("function {i}"),
            size,
            rng.next_u64(),
        ));
    }
    let dests = ["node2", "node3", "node4"];
    let mut transfers: Vec<TransferRequest> = (0..50)
        .map(|_| {
            let mode = if rng.random_bool(0.3) {
                CipherMode::Otp
            } else {
                CipherMode::Aes256
            };
            let image = format!("vnf-{}", rng.random_range(0..8));
            TransferRequest::new(image, dests[rng.random_range(0..3)], mode)
        })
        .collect();
    // failing jobs interleaved, to show ack-200 is withheld from them
    for (i, fault) in [(7usize, 0u8), (19, 1), (33, 2)] {
        let mut bad = TransferRequest::new("vnf-0", dests[i % 3], CipherMode::Aes256);
        bad.faults.tamper_chunk = fault == 0;
        bad.faults.drop_key_at_slave = fault == 1;
        bad.faults.corrupt_image = fault == 2;
        transfers.insert(i, bad);
    }
    let plan = ProvisioningPlan {
        demands: Vec::new(),
        transfers: transfers.clone(),
        policy: Policy::Fifo,
        transport: Transport::InProcess(PhaseTiming::default()),
        nonce_prefix: 7,
    };
    let mut tb = testbed(&[0.0, 10.0, 25.0], 77);
    let report = run_secured_provisioning(&plan, &catalog, &mut tb, &mut SimClock::new());
    check(report.errors.is_empty(), || report.errors.join("; "))?;

    let mut violations = Vec::new();
    let mut successes = 0;
    for (job, req) in report.jobs.iter().zip(&transfers) {
        let kinds = workflow_kinds(&report.trace, job.id);
        let faulty = req.faults != Default::default();
        let acked_in_trace = kinds.contains(&MessageKind::Ack200);
        let verified = report.slaves[&job.dest]
            .deployed(&job.image_id)
            .is_some_and(|d| {
                d.job >= job.id && d.bytes == catalog.get(&job.image_id).unwrap().payload()
            });
        if faulty {
            if acked_in_trace || job.is_acked() {
                violations.push(format!("faulty job {} acked", job.id));
            }
            continue;
        }
        if !(job.is_acked() && is_workflow(&kinds)) {
            violations.push(format!("job {}: {:?} {:?}", job.id, job.failure, kinds));
            continue;
        }
        // ack-200 follows the slave's deploy report, which it sends only after
        // the checksum passed
        let report_at = kinds.iter().position(|k| *k == MessageKind::DeployReport);
        let ack_at = kinds.iter().position(|k| *k == MessageKind::Ack200);
        if !(verified && report_at < ack_at) {
            violations.push(format!("job {} acked without verified deploy", job.id));
        }
        successes += 1;
    }
    check(successes == 50, || format!("{successes} successful jobs"))?;
    check(violations.is_empty(), || {
        format!("{} violations, first: {}", violations.len(), violations[0])
    })?;
    let nodes: Vec<NodeId> = (1..=4).map(|i| NodeId(format!("node{i}"))).collect();
    let keys = tb.keys.lock().unwrap().clone();
    let dropped = transfers
        .iter()
        .zip(&report.jobs)
        .filter(|(r, _)| r.faults.drop_key_at_slave)
        .filter_map(|(_, j)| j.key_id)
        .collect();
    Ok((
        "50 jobs in the exact order, 3 faulty jobs never acked".to_string(),
        (keys, nodes, dropped),
    ))
}

fn serve_mode_transfer() -> Outcome {
    let started = Instant::now();
    let size = 16 << 20;
    let mut catalog = Catalog::new();
    catalog.insert(VnfImage::synthetic("vnf-16m", "16 MiB image", size, 8));
    let plan = ProvisioningPlan {
        demands: Vec::new(),
        transfers: vec![TransferRequest::new("vnf-16m", "node3", CipherMode::Aes256)],
        policy: Policy::Fifo,
        transport: Transport::Tcp {
            host: "127.0.0.1".parse().unwrap(),
            base_port: 0,
        },
        nonce_prefix: 8,
    };
    let mut tb = testbed(&[0.0, 10.0, 25.0], 8);
    let report = run_secured_provisioning(&plan, &catalog, &mut tb, &mut SimClock::new());
    let job = report.jobs.first().ok_or("no job")?;
    check(report.is_success(), || report.to_text())?;
    let t = job.timings;
    check(
        t.encrypt_s > 0.0 && t.send_s > 0.0 && t.decrypt_s > 0.0,
        || format!("breakdown {t:?}"),
    )?;
    check(t.total_s < 10.0, || {
        format!("requested to acked took {:.3} s", t.total_s)
    })?;
    let deployed = report.slaves[&job.dest]
        .deployed("vnf-16m")
        .ok_or("not deployed")?;
    check(
        deployed.bytes == catalog.get("vnf-16m").unwrap().payload(),
        || "deployed bytes differ".into(),
    )?;
    Ok(format!(
        "16 MiB over localhost: encrypt {:.3} s, send {:.3} s, decrypt {:.3} s, total {:.3} s (run {:.2} s)",
        t.encrypt_s,
        t.send_s,
        t.decrypt_s,
        t.total_s,
        started.elapsed().as_secs_f64()
    ))
}

fn determinism() -> Outcome {
    let config = ScenarioConfig::from_toml(
        "seed = 42\nimage_size_bytes = 20000\n\
         [[transfers]]\nimage_id = \"vnf-image\"\ndest = \"node4\"\nmode = \"otp\"\n\
         [[transfers]]\nimage_id = \"vnf-image\"\ndest = \"node2\"\n\
         [[demands]]\nbob = \"node3\"\nbits = 3000\n",
    )
    .map_err(|e| e.to_string())?;
    let runs = |c: &ScenarioConfig| -> Result<Vec<_>, String> {
        let s = |r: Result<_, qkdnfv::scenario::ScenarioError>| r.map_err(|e| e.to_string());
        Ok(vec![
            s(cmd_fig2_sweep(c, None))?,
            s(cmd_timeshare_demo(c))?,
            s(cmd_transfer_demo(c))?,
        ])
    };
    let first = runs(&config)?;
    let second = runs(&config)?;
    let files: usize = first.iter().map(|o| o.files.len()).sum();
    for (x, y) in first.iter().zip(&second) {
        for (name, body) in &x.files {
            check(y.files.get(name) == Some(body), || {
                format!("{name} differs between runs")
            })?;
        }
    }
    check(first.iter().all(|o| o.is_success()), || {
        "a scenario failed".into()
    })?;
    Ok(format!(
        "{files} output files byte-identical across two runs"
    ))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("1 anchor reproduction", anchors()));
    results.push(("2 monotonicity sweep", monotonicity()));
    let runs = schedule_runs();
    let mut registries: Vec<Registry> = Vec::new();
    match &runs {
        Ok(r) => {
            results.push(("3 scheduler oracle equivalence", scheduler_oracle(r)));
            results.push(("4 alice exclusivity", exclusivity(r)));
            for tb in &r.testbeds {
                let nodes: Vec<NodeId> = tb
                    .network
                    .topology()
                    .nodes()
                    .map(|(n, _)| n.clone())
                    .collect();
                registries.push((tb.keys.lock().unwrap().clone(), nodes, Vec::new()));
            }
        }
        Err(e) => {
            results.push(("3 scheduler oracle equivalence", Err(e.clone())));
            results.push(("4 alice exclusivity", Err(e.clone())));
        }
    }
    let workflow = workflow_sequence();
    if let Ok((_, reg)) = &workflow {
        registries.push(reg.clone());
    }
    results.push((
        "5 key pairing and single use",
        pairing_and_single_use(&mut registries),
    ));
    results.push(("6 crypto round trip", crypto_round_trip()));
    results.push(("7 workflow sequence", workflow.map(|(s, _)| s)));
    results.push(("8 desk-scale serve transfer", serve_mode_transfer()));
    results.push(("9 determinism", determinism()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
