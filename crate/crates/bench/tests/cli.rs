use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_ifrm-bench");

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(extra: &[&str], lib_dir: Option<&Path>) -> Server {
    let mut cmd = Command::new(BIN);
    cmd.args(["serve", "--listen", "127.0.0.1:0", "--rx-len", "1048576", "--timeout-secs", "5"])
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::null());
    match lib_dir {
        Some(d) => cmd.env("IFUNC_LIB_DIR", d),
        None => cmd.env_remove("IFUNC_LIB_DIR"),
    };
    let mut child = cmd.spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listen line").to_string();
    Server { child, addr }
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("IFUNC_LIB_DIR").output().unwrap()
}

#[test]
fn latency_over_tcp_writes_csv() {
    let srv = serve(&[], None);
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("lat.csv");
    let r = run(&[
        "latency",
        "--connect",
        &srv.addr,
        "--sizes",
        "1..64",
        "--iters",
        "20",
        "--warmup",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "mode,payload_size,frame_size,iterations,min_ns,median_ns,p99_ns,msgs_per_sec");
    assert_eq!(rows.len(), 1 + 7);
    for (row, size) in rows[1..].iter().zip([1, 2, 4, 8, 16, 32, 64]) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[0], "ifunc");
        assert_eq!(f[1].parse::<usize>().unwrap(), size);
        assert_eq!(f[2].parse::<usize>().unwrap(), size + 65 + 32);
        assert_eq!(f[3], "20");
        let (min, med, p99): (u64, u64, u64) = (f[4].parse().unwrap(), f[5].parse().unwrap(), f[6].parse().unwrap());
        assert!(min <= med && med <= p99);
    }
}

#[test]
fn am_throughput_and_mode_mismatch() {
    let srv = serve(&["--mode", "am"], None);
    let r = run(&[
        "throughput",
        "--connect",
        &srv.addr,
        "--mode",
        "am",
        "--sizes",
        "1,4096",
        "--iters",
        "5",
        "--batch",
        "16",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("am,1,18,80,"));

    let r = run(&["latency", "--connect", &srv.addr, "--sizes", "1", "--iters", "1"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("rejected"));
}

#[test]
fn xor_demo_over_tcp() {
    let srv = serve(&[], None);
    let r = run(&["demo-xor", "--connect", &srv.addr, "--count", "25", "--max-len", "5000"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("25 inputs decoded intact"));
}

#[test]
fn inline_code_needs_trust_without_a_package() {
    let empty = TempDir::new().unwrap();
    let args = |addr: &str| {
        vec![
            "throughput".to_string(),
            "--connect".into(),
            addr.into(),
            "--sizes".into(),
            "8".into(),
            "--iters".into(),
            "3".into(),
            "--batch".into(),
            "4".into(),
            "--inline".into(),
            "--timeout-secs".into(),
            "3".into(),
        ]
    };
    let trusting = serve(&["--trust-inline"], Some(empty.path()));
    let a = args(&trusting.addr);
    let r = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let strict = serve(&[], Some(empty.path()));
    let a = args(&strict.addr);
    let r = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(run(&["latency", "--sizes", "0..4"]).status.code(), Some(1));
    assert_eq!(run(&["latency", "--iters", "0", "--sizes", "1"]).status.code(), Some(1));
    assert_eq!(run(&["serve"]).status.code(), Some(1));
}
