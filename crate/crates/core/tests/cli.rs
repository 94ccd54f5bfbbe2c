use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn fus3d() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fus3d"));
    c.env_remove("FUS3D_SEED");
    c
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn synth(dir: &Path, seed: &str, extra: &[&str]) -> Vec<u8> {
    synth_frames(dir, seed, "40", extra)
}

fn synth_frames(dir: &Path, seed: &str, frames: &str, extra: &[&str]) -> Vec<u8> {
    let out = fus3d()
        .args(["synth", "--seed", seed, "--frames", frames])
        .args(["--prompts", dir.join("p.bin").to_str().unwrap(), "--gt", dir.join("g.bin").to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

#[test]
fn synth_map_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("p.bin"), dir.path().join("g.bin"));
    let mut synth = fus3d()
        .args(["synth", "--seed", "7", "--prompts", p.to_str().unwrap(), "--gt", g.to_str().unwrap()])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut map = fus3d()
        .args(["map", "-", "--mode", "sliding-window", "--window-radius", "6"])
        .stdin(Stdio::from(synth.stdout.take().unwrap()))
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let eval = fus3d()
        .args(["eval", "-", "--gt", g.to_str().unwrap(), "--prompts", p.to_str().unwrap(), "--no-background"])
        .stdin(Stdio::from(map.stdout.take().unwrap()))
        .output()
        .unwrap();
    assert!(synth.wait().unwrap().success());
    assert!(map.wait().unwrap().success());
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let metrics: Value = serde_json::from_slice(&eval.stdout).unwrap();
    for key in ["miou", "fmiou", "acc"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(metrics["miou"].as_f64().unwrap() > 0.3);
    assert_eq!(metrics["exclude_background"], true);
}

#[test]
fn eval_with_mismatched_dimension_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let stream = synth(dir.path(), "1", &[]);
    let snap = dir.path().join("s.bin");
    let mut map = fus3d().args(["map", "--out", snap.to_str().unwrap()]).stdin(Stdio::piped()).spawn().unwrap();
    std::io::Write::write_all(&mut map.stdin.take().unwrap(), &stream).unwrap();
    assert!(map.wait().unwrap().success());

    let p32 = dir.path().join("p32.bin");
    let out = fus3d()
        .args(["synth", "--dim", "32", "--frames", "1", "--prompts", p32.to_str().unwrap(), "--out", "/dev/null"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = fus3d()
        .args(["eval", snap.to_str().unwrap(), "--gt", dir.path().join("g.bin").to_str().unwrap()])
        .args(["--prompts", p32.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn map_fuse_query_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    std::fs::write(d("stream.bin"), synth(dir.path(), "2", &[])).unwrap();
    std::fs::write(d("cfg.txt"), "# tuned\nlambda = 2.5\nfusion_period = 3\n").unwrap();
    let report_path = d("report.json");
    let ok = |args: &[&str]| {
        let out = fus3d().args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    ok(&["map", &d("stream.bin"), "--config", &d("cfg.txt"), "--mode", "global", "--out", &d("s.bin"), "--report", &report_path]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["mode"], "global");
    assert_eq!(report["frames_total"], 40);
    assert_eq!(report["fusion_passes"], 0);

    let snap = fus3d_core::MapSnapshot::load(Path::new(&d("s.bin"))).unwrap();
    assert_eq!(snap.config.lambda, 2.5);
    assert_eq!(snap.config.fusion_period, 3);
    assert!(snap.fused_dense.is_none());

    ok(&["fuse", &d("s.bin"), "--out", &d("f.bin")]);
    let fused = fus3d_core::MapSnapshot::load(Path::new(&d("f.bin"))).unwrap();
    assert!(fused.fused_dense.is_some());
    assert!(fused.instances.instances().iter().any(|r| r.fused.is_some()));

    let csv = String::from_utf8(ok(&["query", &d("f.bin"), "--prompts", &d("p.bin"), "--label", "chair", "--layer", "dense-fused"])).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("ix,iy,iz,similarity"));
    assert_eq!(lines.count(), fused.dense.len());

    ok(&["query", &d("f.bin"), "--prompts", &d("p.bin"), "--layer", "instance-fused", "--out", &d("pred.bin")]);
    let from_labels: Value = serde_json::from_slice(&ok(&["eval", &d("pred.bin"), "--gt", &d("g.bin"), "--prompts", &d("p.bin")])).unwrap();
    let from_snap: Value = serde_json::from_slice(&ok(&["eval", &d("f.bin"), "--gt", &d("g.bin"), "--prompts", &d("p.bin")])).unwrap();
    assert_eq!(from_labels, from_snap);

    let out = fus3d().args(["query", &d("f.bin"), "--prompts", &d("p.bin"), "--layer", "sideways"]).output().unwrap();
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn mapping_is_deterministic_and_seed_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("stream.bin");
    std::fs::write(&stream, synth(dir.path(), "3", &["--noise-profile", "split-heavy"])).unwrap();
    let map = |seed: &str, env: Option<&str>| {
        let mut c = fus3d();
        c.args(["map", stream.to_str().unwrap(), "--mode", "sliding-window", "--seed", seed]);
        if let Some(e) = env {
            c.env("FUS3D_SEED", e);
        }
        let out = c.output().unwrap();
        assert!(out.status.success());
        out.stdout
    };
    let a = map("5", None);
    assert_eq!(a, map("5", None));
    assert_eq!(a, map("9", Some("5")));
    assert_ne!(a, map("9", None));

    let s1 = synth(dir.path(), "3", &[]);
    let mut c = fus3d();
    c.env("FUS3D_SEED", "3");
    let out = c.args(["synth", "--seed", "99", "--frames", "40"]).output().unwrap();
    assert_eq!(out.stdout, s1);
}

#[test]
fn malformed_inputs_give_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = synth_frames(dir.path(), "4", "3", &[]);
    bytes.truncate(bytes.len() - 10);
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, &bytes).unwrap();
    let out = fus3d().args(["map", bad.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "parse");
    assert!(e["error"]["offset"].as_u64().unwrap() > 48);

    let out = fus3d().args(["map", "--mode", "everywhere", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(error_json(&out)["error"]["kind"], "config");
    let out = fus3d().arg("teleport").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
    let out = fus3d().args(["synth", "--scene", "corridor", "--length=-3"]).output().unwrap();
    assert_eq!(error_json(&out)["error"]["kind"], "invalid_input");
}

#[test]
fn bench_memory_reports_linear_and_bounded_bytes() {
    let out = fus3d().args(["bench-memory", "--lengths", "6,12,24", "--window-radius", "3", "--dim", "16"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let bytes = |mode: &str| -> Vec<f64> {
        v["runs"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|r| r["mode"] == mode)
            .map(|r| r["peak_dense_bytes"].as_f64().unwrap())
            .collect()
    };
    let (g, w) = (bytes("global"), bytes("sliding-window"));
    assert_eq!((g.len(), w.len()), (3, 3));
    assert!(g[0] < g[1] && g[1] < g[2]);
    assert!(w.iter().all(|&b| b <= 2.0 * w[0]));
}
