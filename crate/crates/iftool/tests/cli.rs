use std::fs;
use std::process::{Command, Output};

use ifrm::packages::{COUNTER_SRC, XOR_SRC};
use tempfile::TempDir;

fn iftool(args: &[&std::ffi::OsStr]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iftool")).args(args).output().unwrap()
}

macro_rules! os {
    ($($a:expr),*) => { &[$(std::ffi::OsStr::new($a)),*] };
}

#[test]
fn asm_dis_digest() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("counter.ifasm");
    let out = dir.path().join("counter.ifn");
    fs::write(&src, COUNTER_SRC).unwrap();

    let r = iftool(os!("asm", &src, "-o", &out));
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"IFNC");

    let r = iftool(os!("dis", &out));
    assert!(r.status.success());
    let listing = String::from_utf8(r.stdout).unwrap();
    assert!(listing.contains("call ctr_inc"));

    let relisted = dir.path().join("again.ifasm");
    fs::write(&relisted, &listing).unwrap();
    let out2 = dir.path().join("again.ifn");
    assert!(iftool(os!("asm", &relisted, "-o", &out2)).status.success());
    assert_eq!(fs::read(&out2).unwrap(), bytes);

    let r = iftool(os!("digest", &out));
    assert!(r.status.success());
    let hex = String::from_utf8(r.stdout).unwrap();
    assert_eq!(hex.trim(), ::hex::encode(ifrm::vm::package_digest(&bytes)));
    assert_eq!(hex.trim().len(), 64);
}

#[test]
fn errors_exit_one_and_write_nothing() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("bad.ifasm");
    let out = dir.path().join("bad.ifn");
    fs::write(&src, XOR_SRC.replace("lts", "frob")).unwrap();
    let r = iftool(os!("asm", &src, "-o", &out));
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("frob"));
    assert!(r.stdout.is_empty());
    assert!(!out.exists());

    fs::write(&out, b"not a package").unwrap();
    assert_eq!(iftool(os!("dis", &out)).status.code(), Some(1));
    assert_eq!(iftool(os!("digest", &dir.path().join("missing.ifn"))).status.code(), Some(1));
    assert_eq!(iftool(os!("bogus")).status.code(), Some(1));
}
