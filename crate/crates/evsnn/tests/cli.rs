use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evsnn::spk;

fn evsnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evsnn")).args(args).output().expect("spawn evsnn")
}

fn ok(args: &[&str]) -> String {
    let out = evsnn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn small_synth(dir: &Path) {
    ok(&["synth", "--seed", "7", "--places", "3", "--events-per-place", "24", "--out", p(dir), "--set", "synth.width=16", "--set", "synth.height=12"]);
}

#[test]
fn synth_twice_gives_identical_trees() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--seed", "7", "--places", "20", "--out", p(&a)]);
    ok(&["synth", "--seed", "7", "--places", "20", "--out", p(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.iter().any(|(n, _)| n == "manifest.txt"));
    assert_eq!(ta, tb);
}

#[test]
fn missing_out_is_a_usage_error() {
    assert_eq!(evsnn(&["synth", "--places", "3"]).status.code(), Some(2));
}

#[test]
fn single_place_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evsnn(&["synth", "--places", "1", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_places"));
}

#[test]
fn bad_config_line_is_reported_with_its_number() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "seed=3\n# comment\ntrain.lr=fast\n").unwrap();
    let out = evsnn(&["synth", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn convert_writes_two_spike_tensors_per_window() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data);
    let out = tmp.path().join("spk");
    let stdout = ok(&["convert", "--manifest", p(&data), "--sequence", "traverse0", "--out", p(&out)]);
    assert_eq!(stdout.trim(), "3 volumes");
    for kind in ["mcs", "tss"] {
        let t = spk::load(&out.join(format!("traverse0_00000_{kind}.spk"))).unwrap();
        assert_eq!(t.dims(), [4, 2, 12, 16]);
        assert!(fs::read(out.join(format!("traverse0_00000_{kind}.spk"))).unwrap().starts_with(b"SPK1"));
    }
}

#[test]
fn convert_of_an_empty_stream_reports_zero_volumes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("empty.csv"), "").unwrap();
    fs::write(dir.join("poses.csv"), "").unwrap();
    fs::write(
        dir.join("manifest.txt"),
        "resolution=8x8\ninterval_s=0.25\ncoord_mode=planar\nsequence=s,empty.csv,poses.csv\n",
    )
    .unwrap();
    let stdout = ok(&["convert", "--manifest", p(dir), "--out", p(&dir.join("out"))]);
    assert_eq!(stdout.trim(), "0 volumes");
}

#[test]
fn truncated_event_file_names_the_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data);
    let bin = data.join("traverse0.bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes.truncate(bytes.len() - 5);
    fs::write(&bin, bytes).unwrap();
    let out = evsnn(&["convert", "--manifest", p(&data), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("offset"), "{err}");
}

#[test]
fn missing_manifest_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evsnn(&["convert", "--manifest", p(&tmp.path().join("nope")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn energy_of_injected_counts() {
    let out = ok(&["energy", "--mode", "ann", "--mac", "4.38e9"]);
    assert!(out.contains("energy: 20.148 mJ"), "{out}");
    let out = ok(&["energy", "--mode", "snn-static", "--ac", "0.47e9", "--mac", "1.03e9"]);
    assert!(out.contains("energy: 5.161 mJ"), "{out}");
    assert!(out.contains("assumed firing rate"), "{out}");
}

#[test]
fn energy_reference_rows() {
    let out = ok(&["energy", "--table5"]);
    for v in ["20.148", "5.161", "5.521", "39.606"] {
        assert!(out.contains(v), "{v} missing from\n{out}");
    }
}

#[test]
fn measured_energy_needs_an_input_batch() {
    assert_eq!(evsnn(&["energy", "--mode", "snn-measured"]).status.code(), Some(2));
}

#[test]
fn measured_energy_writes_spike_rates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data);
    let out = tmp.path().join("e");
    let stdout = ok(&["energy", "--mode", "snn-measured", "--manifest", p(&data), "--out", p(&out), "--set", "model.scale=0.125"]);
    assert!(stdout.contains("mode: snn-measured"), "{stdout}");
    let rates = fs::read_to_string(out.join("spike_rates.csv")).unwrap();
    assert!(rates.starts_with("layer,rate\n"));
    assert!(out.join("energy.csv").exists());
}

#[test]
fn train_then_eval_is_independent_of_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data);
    let run = tmp.path().join("run");
    let stdout = ok(&["train", "--manifest", p(&data), "--out", p(&run), "--steps", "2", "--set", "model.scale=0.125"]);
    assert!(stdout.starts_with("2 steps"), "{stdout}");
    let trace = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    let ck = run.join("model.sew");
    let e1 = tmp.path().join("e1");
    let e3 = tmp.path().join("e3");
    ok(&["eval", "--manifest", p(&data), "--checkpoint", p(&ck), "--out", p(&e1), "--phi-sweep", "--threads", "1"]);
    ok(&["eval", "--manifest", p(&data), "--checkpoint", p(&ck), "--out", p(&e3), "--phi-sweep", "--threads", "3"]);
    for f in ["metrics.csv", "pr.csv", "metrics.txt"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e3.join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(e1.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("phi,recall@1,recall@5,recall@10,recall@20,f1_max"));
    assert_eq!(metrics.lines().count(), 6);
}

#[test]
fn periodic_checkpoints_and_best() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data);
    let run = tmp.path().join("run");
    ok(&[
        "train", "--manifest", p(&data), "--out", p(&run), "--steps", "2",
        "--set", "model.scale=0.125", "--set", "train.checkpoint_every=1", "--set", "train.optimizer=adam",
    ]);
    for f in ["step000001.sew", "step000002.sew", "best.sew", "model.sew", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.contains("train.optimizer=adam\n"));
    assert!(!echo.contains("train.momentum"));
}

#[test]
fn eval_rejects_a_corrupt_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data);
    let ck = tmp.path().join("bad.sew");
    fs::write(&ck, b"SEW1\x05\x00").unwrap();
    let out = evsnn(&["eval", "--manifest", p(&data), "--checkpoint", p(&ck), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(3));
}
