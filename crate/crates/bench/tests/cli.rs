use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_soft-bench"))
}

#[test]
fn pinv_trace_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    let status = bench().args(["--mode", "pinv_trace", "--m", "49", "--repeats", "2", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# {\"mode\":\"pinv_trace\""));
    assert_eq!(lines.next().unwrap(), "m,instance,iteration,residual");
    let finals: Vec<f64> = text.lines().filter(|l| l.starts_with("49,") && l.split(',').nth(2) == Some("20")).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(finals.len(), 2);
    assert!(finals.iter().all(|r| *r < 1e-5));
}

#[test]
fn scale_to_stdout_has_slope_rows() {
    let out = bench().args(["--mode", "scale", "--n", "196,392,784", "--m", "4", "--d-e", "8"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("slope,")).count(), 2);
}

#[test]
fn empty_m_list_exits_with_usage_code() {
    let out = bench().args(["--mode", "pinv_trace", "--m", ""]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_mode_and_bad_specs_exit_with_usage_code() {
    for args in [
        vec!["--mode", "nope"],
        vec!["--mode", "scale", "--repeats", "1"],
        vec!["--mode", "scale", "--n", "784,392"],
        vec!["--mode", "train", "--sampling", "pool", "--m", "15"],
        vec!["--mode", "train", "--sampling", "dither"],
    ] {
        let out = bench().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn missing_mode_is_a_usage_error() {
    assert_eq!(bench().output().unwrap().status.code(), Some(2));
}
