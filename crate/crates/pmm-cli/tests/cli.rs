use std::path::PathBuf;
use std::process::{Command, Output};

fn pmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmm")).args(args).output().expect("run pmm")
}

fn stdout_of(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn temp_file(name: &str, content: &str) -> PathBuf {
    let path = std::env::temp_dir().join(format!("pmm_cli_test_{name}"));
    std::fs::write(&path, content).expect("write temp file");
    path
}

#[test]
fn topology_table_matches_part_counts() {
    let out = pmm(&["topology", "--rows", "4", "--cols", "4"]);
    let text = stdout_of(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("cells,qubits,couplers,dacs,junctions"));
    assert_eq!(lines.next(), Some("16,128,328,968,24000"));
    assert_eq!(lines.next(), None);
}

#[test]
fn unknown_flags_exit_with_usage_error() {
    let out = pmm(&["topology", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_reproduces_routing_statistics() {
    let args = ["demux", "--pulses", "5000", "--p-gate", "0.02", "--leaf", "9", "--seed", "41"];
    let first = pmm(&args);
    let second = pmm(&args);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);

    let other =
        pmm(&["demux", "--pulses", "5000", "--p-gate", "0.02", "--leaf", "9", "--seed", "42"]);
    assert_ne!(first.stdout, other.stdout);
}

#[test]
fn errorbound_reports_the_soak_bound() {
    let out = pmm(&[
        "errorbound",
        "--operations",
        "15000000",
        "--errors",
        "0",
        "--confidence",
        "0.95",
    ]);
    assert_eq!(stdout_of(&out), "upper_bound\n1.997e-7\n");
}

#[test]
fn sudden_anneal_leaves_coupled_pair_random() {
    // A ferromagnetic pair inside one cell: half of all spin words are
    // ground states, and a near-instant anneal cannot do better than the
    // uniform distribution it starts from.
    let problem = temp_file("sudden.txt", "K 0 4 -1.0\n");
    let out = pmm(&[
        "anneal",
        "--problem",
        problem.to_str().unwrap(),
        "--tf",
        "0.001",
        "--repeats",
        "400",
        "--seed",
        "7",
    ]);
    let text = stdout_of(&out);
    let mut total = 0u32;
    let mut ground = 0u32;
    for line in text.lines().skip(1) {
        let is_ground = line.rsplit(',').next().expect("is_ground column");
        total += 1;
        ground += (is_ground == "1") as u32;
    }
    assert_eq!(total, 400);
    let fraction = ground as f64 / total as f64;
    assert!((fraction - 0.5).abs() < 0.1, "ground fraction {fraction}");
}

#[test]
fn calibration_file_round_trips_into_programming() {
    let calibration = std::env::temp_dir().join("pmm_cli_test_cal.txt");
    let cal = pmm(&[
        "calibrate",
        "--noise-free",
        "--seed",
        "3",
        "--out",
        calibration.to_str().unwrap(),
    ]);
    assert!(cal.status.success(), "stderr: {}", String::from_utf8_lossy(&cal.stderr));

    let problem =
        temp_file("program.txt", "h 0 0.25\nh 4 -0.125\nK 0 4 -0.5\nK 1 5 0.5\n");
    let out = pmm(&[
        "program",
        "--problem",
        problem.to_str().unwrap(),
        "--calibration",
        calibration.to_str().unwrap(),
        "--mode",
        "reset-first",
        "--seed",
        "5",
    ]);
    let text = stdout_of(&out);
    assert!(text.contains("dacs_on_target = 64 of 64"), "report:\n{text}");
    assert!(text.contains("mode = reset-first"));
}
