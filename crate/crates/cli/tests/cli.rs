use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: [&str; 6] = [
    "--set",
    "synthgen.n_samples=40",
    "--set",
    "train.epochs=3",
    "--set",
    "train.batch_size=8",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protomotif"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_hash(dir: &Path) -> String {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, files);
            } else {
                files.push(p);
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_str().unwrap().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn generate(dir: &Path, seed: &str) {
    let mut args = vec!["generate", "--seed", seed, "--out", s(dir)];
    args.extend(SMALL);
    ok(&args);
}

#[test]
fn generate_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    generate(&a, "3");
    generate(&b, "3");
    generate(&c, "4");
    assert_eq!(tree_hash(&a), tree_hash(&b));
    assert_ne!(tree_hash(&a), tree_hash(&c));
    assert!(a.join("manifest.txt").is_file());
    assert!(a.join("config.toml").is_file());
    assert!(a.join("images/train/0.ptn").is_file());
    assert!(a.join("masks/test/39.ptn").is_file());
}

#[test]
fn bad_config_is_a_usage_error_and_writes_nothing() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("d");
    let r = run(&["generate", "--set", "synthgen.train_fraction=0.9", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("fraction"));
    assert!(!out.exists());

    let r = run(&["generate", "--set", "synthgen.bogus=1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());

    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["ablate", "--mode", "sideways", "--data", "x", "--out", "y"]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nothing");
    let r = run(&["train", "--data", s(&missing), "--out", s(&t.path().join("run"))]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(&["eval", "--checkpoint", s(&missing), "--data", s(&missing)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn train_resume_eval_and_interpret() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    generate(&data, "1");

    let full = t.path().join("full");
    let mut args = vec!["train", "--seed", "1", "--data", s(&data), "--out", s(&full)];
    args.extend(SMALL);
    let stdout = ok(&args);
    assert!(stdout.contains("test_accuracy"));

    let part = t.path().join("part");
    let mut args = vec!["train", "--seed", "1", "--data", s(&data), "--out", s(&part), "--halt-after", "1"];
    args.extend(SMALL);
    assert!(ok(&args).contains("halted_at_epoch\t1"));
    assert!(!part.join("record.tsv").exists());
    let last = part.join("last.ckpt");
    ok(&["train", "--data", s(&data), "--out", s(&part), "--resume", s(&last)]);
    for f in ["record.tsv", "pushes.tsv", "best.ckpt", "last.ckpt", "config.toml"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }

    let record = fs::read_to_string(full.join("record.tsv")).unwrap();
    let test_acc: f64 = record
        .lines()
        .find(|l| l.split('\t').nth(1) == Some("test"))
        .and_then(|l| l.split('\t').nth(3))
        .expect("test row")
        .parse()
        .unwrap();
    let best = full.join("best.ckpt");
    let eval = ok(&["eval", "--checkpoint", s(&best), "--data", s(&data)]);
    let acc: f64 = eval.lines().nth(1).unwrap().split('\t').nth(2).unwrap().parse().unwrap();
    assert_eq!(acc, test_acc);

    let mut bytes = fs::read(&best).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = t.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let r = run(&["eval", "--checkpoint", s(&bad), "--data", s(&data)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).to_lowercase().contains("crc"));

    let interp = t.path().join("interp");
    ok(&["interpret", "--checkpoint", s(&best), "--data", s(&data), "--out", s(&interp), "--topk", "3"]);
    let regions = fs::read_to_string(interp.join("regions.tsv")).unwrap();
    assert!(regions.starts_with("prototype\tsample\tregion_kind\textent"));
    assert!(regions.lines().count() > 1);
    let recovery = fs::read_to_string(interp.join("recovery.tsv")).unwrap();
    assert_eq!(recovery.lines().count(), 3);
    let pgm = fs::read_dir(interp.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "pgm"))
        .expect("a PGM map");
    let text = fs::read_to_string(pgm).unwrap();
    let mut tok = text.split_whitespace();
    assert_eq!(tok.next(), Some("P2"));
    let dims: Vec<usize> = tok.by_ref().take(3).map(|x| x.parse().unwrap()).collect();
    assert_eq!(dims, vec![64, 64, 255]);
    let px: Vec<u32> = tok.map(|x| x.parse().unwrap()).collect();
    assert_eq!(px.len(), 64 * 64);
    assert!(px.iter().all(|&v| v <= 255));

    let again = t.path().join("interp2");
    ok(&["interpret", "--checkpoint", s(&best), "--data", s(&data), "--out", s(&again), "--topk", "3"]);
    assert_eq!(tree_hash(&interp), tree_hash(&again));
}
