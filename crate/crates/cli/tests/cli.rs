use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qkdnfv(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdnfv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run qkdnfv")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn sweep_writes_csv_and_plot_script() {
    let dir = tempfile::tempdir().unwrap();
    let o = qkdnfv(&["fig2-sweep", "--distances", "0,25"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("fig2.csv")).unwrap();
    assert_eq!(
        csv,
        "distance_km,init_time_s,key_rate_bps,qber,attenuation_db\n0,400,4000,0.01,0\n25,1265,100,0.053,5\n"
    );
    assert!(dir.path().join("fig2.gp").exists());
    assert_eq!(stdout(&o).trim(), "swept 2 distances");
}

#[test]
fn validate_prints_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = qkdnfv(&["validate", "--seed", "9"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let cfg = qkdnfv::scenario::ScenarioConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg.seed, 9);
}

#[test]
fn timeshare_and_transfer_run_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(
        &cfg,
        "seed = 3\nimage_size_bytes = 4096\nbob_km = [0.0, 5.0]\n\
         [[demands]]\nbob = \"node3\"\nbits = 1024\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = qkdnfv(&["timeshare", "-c", cfg], dir.path());
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in ["schedule.csv", "executed.csv", "trace.log", "keys.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let o = qkdnfv(&["transfer", "-c", cfg], dir.path());
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(
        report.contains("summary jobs=2 acked=2 failed=0"),
        "{report}"
    );
}

#[test]
fn serve_mode_transfer_over_localhost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("serve.toml");
    fs::write(&cfg, "image_size_bytes = 65536\nbob_km = [10.0]\n").unwrap();
    let o = qkdnfv(
        &["transfer", "--mode", "serve", "-c", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(
        stdout(&o).contains("1/1 transfer jobs acked"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn failed_transfer_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fault.toml");
    fs::write(
        &cfg,
        "image_size_bytes = 2048\nbob_km = [0.0]\n\
         [[transfers]]\nimage_id = \"vnf-image\"\ndest = \"node2\"\nfaults = { tamper_chunk = true }\n",
    )
    .unwrap();
    let o = qkdnfv(&["transfer", "-c", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    for body in [
        "no_such_key = 1\n",
        "bob_km = [-1.0]\n",
        "block_bits = \"wide\"\n",
    ] {
        fs::write(&cfg, body).unwrap();
        let o = qkdnfv(&["validate", "-c", cfg.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(1), "{body}");
        assert!(!o.stderr.is_empty());
    }
    let o = qkdnfv(
        &["validate", "-c", "/nonexistent/scenario.toml"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}
