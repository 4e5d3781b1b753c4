use std::fs;
use std::process::{Command, Output};

fn pactrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pactrain"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn selftest_passes() {
    let out = pactrain(&["selftest"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 9);
}

#[test]
fn missing_config_is_a_config_error() {
    let out = pactrain(&["run", "/nonexistent/pactrain.toml"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn malformed_and_unknown_keys_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[experiment]\nname = \"x\"\nmodes = [full\n", "line 3"),
        (
            "[experiment]\nname = \"x\"\n\n[train]\nepochz = 3\n",
            "epochz",
        ),
        ("[experiment]\nname = \"x\"\nmodes = [\"warp\"]\n", "warp"),
        (
            "[experiment]\nname = \"x\"\n[train]\nlr = -1.0\n",
            "learning rate",
        ),
    ];
    for (i, (src, needle)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("c{i}.toml"));
        fs::write(&path, src).unwrap();
        let out = pactrain(&["run", path.to_str().unwrap()]);
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert_eq!(code(&out), 1, "case {i}: {stderr}");
        assert!(stderr.contains(needle), "case {i}: {stderr}");
    }
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&pactrain(&["run"])), 1);
    assert_eq!(code(&pactrain(&["--transport", "udp", "selftest"])), 1);
    assert_eq!(code(&pactrain(&["--help"])), 0);
}

#[test]
fn run_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "[experiment]\nname = \"c\"\nmodes = [\"full\", \"packed\"]\nbandwidths = [\"1Gbps\"]\n\
         [train]\nepochs = 4\nworkers = 2\nhidden = [16]\n[data]\nsamples = 600\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = pactrain(&[
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
        "run",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let meta = fs::read_to_string(out_dir.join("run.meta")).unwrap();
    assert!(meta.contains("seed = 3"), "{meta}");

    let table = String::from_utf8_lossy(&out.stdout).into_owned();
    let again = pactrain(&["summarize", out_dir.to_str().unwrap()]);
    assert_eq!(code(&again), 0);
    assert_eq!(String::from_utf8_lossy(&again.stdout), table);

    assert_eq!(
        code(&pactrain(&[
            "summarize",
            dir.path().join("nope").to_str().unwrap()
        ])),
        1
    );
}

#[test]
fn tcp_transport_matches_sim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "[experiment]\nname = \"c\"\nmodes = [\"packed\", \"packed+ternary\"]\nbandwidths = [\"1Gbps\"]\n\
         target_accuracy = 0.3\n[train]\nepochs = 3\nworkers = 3\nhidden = [16]\n[data]\nsamples = 600\n",
    )
    .unwrap();
    let mut csvs = Vec::new();
    for transport in ["sim", "tcp"] {
        let out_dir = dir.path().join(transport);
        let out = pactrain(&[
            "--transport",
            transport,
            "--out",
            out_dir.to_str().unwrap(),
            "run",
            cfg.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        csvs.push(fs::read(out_dir.join("1Gbps_packed+ternary_r0.5.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}
