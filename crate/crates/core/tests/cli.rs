//! The `lrh` binary: determinism, exit codes and the file round trip
//! through all four subcommands.

use std::path::Path;
use std::process::{Command, Output};

use lrh::io;
use lrh::{CtfParams, FourierImage, ParticleStack, Pose};

fn lrh(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lrh"));
    cmd.args(args).env("RUST_LOG", "warn");
    match threads {
        Some(t) => cmd.env("LRH_THREADS", t),
        None => cmd.env_remove("LRH_THREADS"),
    };
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, "[simulate]\nimages = 120\ngrid = 10\n\n[estimate]\nepochs = 4\nbatch_size = 40\ncutoff_period = 2\n").unwrap();
    path.to_str().unwrap().to_owned()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = lrh(&["simulate", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()], None);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["stack.lrhs", "truth/truth_volumes.lrhv", "truth/truth.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let c = dir.path().join("c");
    lrh(&["simulate", "--config", &cfg, "--seed", "4", "--out", c.to_str().unwrap()], None);
    assert_ne!(read(&a.join("stack.lrhs")), read(&c.join("stack.lrhs")));
}

#[test]
fn single_worker_estimate_is_reproducible_and_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let sim = dir.path().join("sim");
    assert_eq!(code(&lrh(&["simulate", "--config", &cfg, "--out", sim.to_str().unwrap()], None)), 0);
    let stack = sim.join("stack.lrhs");
    let fits = [dir.path().join("f1"), dir.path().join("f2")];
    for f in &fits {
        let o = lrh(&["estimate", "--config", &cfg, "--stack", stack.to_str().unwrap(), "--out", f.to_str().unwrap()], Some("1"));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["model.lrhv", "fit.json"] {
        assert_eq!(read(&fits[0].join(f)), read(&fits[1].join(f)), "{f}");
    }

    let emb = dir.path().join("emb");
    let o = lrh(&["embed", "--stack", stack.to_str().unwrap(), "--fit", fits[0].to_str().unwrap(), "--out", emb.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(emb.join("latents.csv")).unwrap().lines().count(), 121);

    let rep = dir.path().join("rep");
    let truth = sim.join("truth");
    let args = ["report", "--fit", fits[0].to_str().unwrap(), "--stack", stack.to_str().unwrap(), "--truth", truth.to_str().unwrap(), "--out", rep.to_str().unwrap()];
    let o = lrh(&args, None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("largest principal angle"));
    assert!(rep.read_dir().unwrap().next().is_some());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.lrhs");
    let out = dir.path().join("o");
    let o = lrh(&["estimate", "--stack", missing.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.lrhs"));

    assert_eq!(code(&lrh(&["estimate", "--stack", "x", "--objective", "xx"], None)), 1);
    assert_eq!(code(&lrh(&["estimate", "--stack", "x", "--objective", "ls", "--pose-opt", "on"], None)), 1);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[estimate]\nnot_a_key = 1\n").unwrap();
    assert_eq!(code(&lrh(&["simulate", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()], None)), 1);

    // a well-formed file holding zero images: header only, empty sidecar lists
    let empty = dir.path().join("empty.lrhs");
    let one = ParticleStack { n: 8, voxel_size: 1.0, images: vec![FourierImage::zeros(8)], ctfs: vec![CtfParams::identity()], poses: vec![Pose::identity()], sigma2: 1.0 };
    io::write_stack(&empty, &one, None).unwrap();
    let mut bytes = read(&empty);
    bytes.truncate(40);
    bytes[8..16].copy_from_slice(&0u64.to_le_bytes());
    std::fs::write(&empty, bytes).unwrap();
    let sidecar = dir.path().join("empty.json");
    let mut meta: serde_json::Value = serde_json::from_slice(&read(&sidecar)).unwrap();
    meta["poses"] = serde_json::json!([]);
    meta["ctfs"] = serde_json::json!([]);
    std::fs::write(&sidecar, meta.to_string()).unwrap();
    assert_eq!(code(&lrh(&["estimate", "--stack", empty.to_str().unwrap(), "--out", out.to_str().unwrap()], None)), 1);
}
