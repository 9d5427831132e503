use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use conic_ricci::cli::store::{decode_arrays, encode_arrays, fnv1a, read_series, Manifest};
use conic_ricci::cli::{self, parse_config, CheckKind, ExperimentConfig, ModelKind, ResumeOverrides};
use conic_ricci::error::Error;
use conic_ricci::flow::FlowMode;
use proptest::prelude::*;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_conic-ricci"))
}

fn read_bytes(dir: &Path, file: &str) -> Vec<u8> {
    fs::read(dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

#[test]
fn empty_config_gives_the_defaults() {
    let c = parse_config("").unwrap();
    assert_eq!(c, ExperimentConfig::default());
    assert_eq!(c.model.kind, ModelKind::PuncturedTorus);
    assert_eq!(c.model.punctures, 1);
    assert_eq!(c.model.alpha, 0.5);
    assert_eq!(c.model.resolution, 96);
    assert_eq!(c.flow.mode, FlowMode::Raw);
    assert_eq!(c.flow.t_end, 50.0);
    assert_eq!(c.checks(), CheckKind::raw_default());
}

#[test]
fn invalid_values_name_the_key_and_line() {
    let msg = parse_config("[model]\nresolution = 48\nalpha = -1.0\n").unwrap_err().to_string();
    assert!(msg.contains("model.alpha"), "{msg}");
    assert!(msg.contains("line 3"), "{msg}");
}

#[test]
fn unknown_keys_and_type_errors_carry_line_numbers() {
    let unknown = parse_config("[flow]\nt_end = 2.0\nsteps = 4\n").unwrap_err().to_string();
    assert!(unknown.contains("steps") && unknown.contains("line 3"), "{unknown}");
    let mismatch = parse_config("\n[model]\nresolution = \"many\"\n").unwrap_err().to_string();
    assert!(mismatch.contains("line 3"), "{mismatch}");
    let section = parse_config("[solver]\nx = 1\n").unwrap_err().to_string();
    assert!(section.contains("solver"), "{section}");
}

#[test]
fn checks_must_match_the_flow_mode() {
    let err = parse_config("[flow]\nmode = \"rescaled\"\n[diagnostics]\nchecks = [\"bounds\"]\n");
    assert!(err.is_err());
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    for name in ["acceptance.toml", "rescaled.toml", "smoke.toml", "gauged.toml", "injected-fault.toml"] {
        let c = cli::load_config(&config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c, "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn configs_round_trip_through_toml(
        alpha in 0.05f64..1.0,
        punctures in 1usize..4,
        resolution in 16usize..256,
        t_end in 1.0f64..100.0,
        rescaled in any::<bool>(),
        csv_every in 1usize..10,
        schedule in proptest::collection::vec(0.01f64..1.0, 0..5),
    ) {
        let mut c = ExperimentConfig::default();
        c.model.alpha = alpha;
        c.model.punctures = punctures;
        c.model.resolution = resolution;
        c.flow.t_end = t_end;
        c.flow.mode = if rescaled { FlowMode::Rescaled } else { FlowMode::Raw };
        c.output.csv_every = csv_every;
        c.output.snapshot_schedule = schedule.iter().map(|s| s * t_end).collect();
        c.output.snapshot_schedule.sort_by(f64::total_cmp);
        c.output.snapshot_schedule.dedup();
        let back = parse_config(&c.to_toml()).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn cric_arrays_round_trip() {
    let a = [1.0, -2.5, f64::MIN_POSITIVE, 1e300];
    let b: [f64; 0] = [];
    let bytes = encode_arrays(&[&a, &b]);
    assert_eq!(&bytes[..4], b"CRIC");
    let back = decode_arrays(Path::new("mem"), &bytes).unwrap();
    assert_eq!(back, vec![a.to_vec(), Vec::new()]);
}

#[test]
fn cric_rejects_bad_headers_and_truncation() {
    let bytes = encode_arrays(&[&[1.0, 2.0]]);
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_arrays(Path::new("m"), &magic), Err(Error::Snapshot { .. })));
    let mut version = bytes.clone();
    version[4] = 99;
    let msg = decode_arrays(Path::new("v"), &version).unwrap_err().to_string();
    assert!(msg.contains("version"), "{msg}");
    assert!(decode_arrays(Path::new("t"), &bytes[..bytes.len() - 3]).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode_arrays(Path::new("x"), &trailing).is_err());
}

#[test]
fn fnv1a_matches_reference_values() {
    assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
    assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
}

#[test]
fn smoke_run_passes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = binary()
        .args(["--threads", "1", "run"])
        .arg(config_path("smoke.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elapsed < 10.0, "{elapsed}");
    let manifest = Manifest::read(dir.path()).unwrap();
    assert!(manifest.complete);
    manifest.verify(dir.path()).unwrap();
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.ends_with("overall pass\n"), "{report}");
    let series = read_series(&dir.path().join("series.csv")).unwrap();
    assert!(!series.is_empty());
    let header = fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert!(header.starts_with("time,min_u,max_u,min_R,max_R,total_curvature,newton_iters\n"));

    let again = binary().arg("check").arg(dir.path()).output().unwrap();
    assert_eq!(again.status.code(), Some(0));
}

#[test]
fn injected_fault_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = binary()
        .arg("run")
        .arg(config_path("injected-fault.toml"))
        .args(["-o"])
        .arg(dir.path())
        .env("CONIC_RICCI_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("injected-fault fail"), "{report}");
}

#[test]
fn errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = binary().arg("resume").arg(dir.path().join("nothing")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nalpha = -1.0\n").unwrap();
    let out = binary().arg("run").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.alpha"));
}

#[test]
fn tampered_snapshot_fails_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cli::load_config(&config_path("smoke.toml")).unwrap();
    cli::run_experiment(&cfg, Some(dir.path())).unwrap();
    let snap = dir.path().join("snap_00001.cric");
    let mut bytes = fs::read(&snap).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&snap, bytes).unwrap();
    match cli::check(dir.path()) {
        Err(Error::Checksum { path }) => assert!(path.ends_with("snap_00001.cric"), "{path:?}"),
        other => panic!("expected a checksum error, got {other:?}"),
    }
    assert!(cli::resume(dir.path(), &ResumeOverrides::default()).is_err());
}

fn resume_config(t_end: f64) -> ExperimentConfig {
    let mut c = cli::load_config(&config_path("acceptance.toml")).unwrap();
    c.model.resolution = 48;
    c.flow.t_end = t_end;
    c.flow.track_potential = true;
    c.output.csv_every = 3;
    // resumed runs keep their schedule, so it has to end at the kill time
    c.output.snapshot_schedule = vec![0.5, 1.0, 2.0, 5.0, 10.0];
    c.validate_standalone().unwrap();
    c
}

#[test]
fn resume_reproduces_an_unbroken_run() {
    let full = tempfile::tempdir().unwrap();
    let cut = tempfile::tempdir().unwrap();
    let whole = cli::run_experiment(&resume_config(50.0), Some(full.path())).unwrap();
    let first = cli::run_experiment(&resume_config(10.0), Some(cut.path())).unwrap();
    assert!(first.failure.is_none());
    let resumed = cli::resume(cut.path(), &ResumeOverrides { t_end: Some(50.0) }).unwrap();
    assert!(!resumed.no_op);
    assert_eq!(resumed.passed(), whole.passed());

    let manifest = Manifest::read(full.path()).unwrap();
    for entry in &manifest.entries {
        assert_eq!(read_bytes(full.path(), &entry.file), read_bytes(cut.path(), &entry.file), "{}", entry.file);
    }
    assert_eq!(read_bytes(full.path(), "MANIFEST"), read_bytes(cut.path(), "MANIFEST"));

    let again = cli::resume(cut.path(), &ResumeOverrides::default()).unwrap();
    assert!(again.no_op);
    assert_eq!(read_bytes(full.path(), "MANIFEST"), read_bytes(cut.path(), "MANIFEST"));
}

#[test]
fn resume_rejects_an_earlier_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cli::load_config(&config_path("smoke.toml")).unwrap();
    cli::run_experiment(&cfg, Some(dir.path())).unwrap();
    let done = cli::resume(dir.path(), &ResumeOverrides { t_end: Some(0.5) });
    match done {
        Ok(o) => assert!(o.no_op),
        Err(e) => assert!(e.to_string().contains("t_end"), "{e}"),
    }
}

#[test]
fn oracle_command_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cli::load_config(&config_path("rescaled.toml")).unwrap();
    cfg.model.resolution = 32;
    let sol = cli::oracle(&cfg, Some(dir.path())).unwrap();
    assert!(sol.residual <= 1e-8);
    let text = fs::read_to_string(dir.path().join("oracle.txt")).unwrap();
    assert!(text.contains("residual"), "{text}");
    assert!(dir.path().join("oracle.cric").exists());
}
