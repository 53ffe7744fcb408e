//! End-to-end checks of the `mosaic` binary: exit codes, help text and the
//! artifacts each subcommand writes.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "model.depth=2",
    "--set",
    "model.dim=32",
    "--set",
    "model.heads=2",
    "--set",
    "model.proj_hidden=64",
    "--set",
    "model.proj_out=32",
    "--set",
    "run.clips_per_class=8",
    "--set",
    "run.batch=8",
    "--set",
    "run.steps=4",
    "--set",
    "run.erank_clips=64",
    "--set",
    "run.probe_epochs=5",
];

fn mosaic(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mosaic"));
    cmd.args(args);
    if let Some(dir) = out {
        cmd.arg("--out").arg(dir);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_config_keys() {
    let o = mosaic(&["--help"], None);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["mask.rho_t", "optim.tau", "run.erank_clips", "mel.target_frames"] {
        assert!(text.contains(key), "help text lacks {key}");
    }
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    let o = mosaic(&["pretrain", "--config", missing.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.cfg"), "{}", stderr(&o));

    assert_eq!(mosaic(&["transmogrify"], None).status.code(), Some(1));
    let o = mosaic(&["pretrain", "--set", "optim.tau=-1"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("optim.tau"), "{}", stderr(&o));
    assert_eq!(mosaic(&["pretrain", "--set", "no.such_key=1"], Some(dir.path())).status.code(), Some(1));
    assert_eq!(mosaic(&["probe", "--kind", "layer"], Some(dir.path())).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("noise.wav");
    std::fs::write(&bad, b"definitely not RIFF data").unwrap();
    let o = mosaic(&["spectrogram", bad.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_exits_zero() {
    let o = mosaic(&["gradcheck"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pretrain_loss"));
}

#[test]
fn pretrain_probe_erank_report_chain() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("tiny");
    let step = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend_from_slice(TINY);
        let o = mosaic(&all, Some(&run));
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };
    step(&["pretrain", "--deterministic"]);
    assert!(run.join("checkpoint").is_dir());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 4);

    step(&["probe", "--kind", "last"]);
    step(&["erank", "--modes", "none,time_freq"]);
    let csv = std::fs::read_to_string(run.join("erank.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    assert!(rows[0].starts_with("none,") && rows[1].starts_with("time_freq,"), "{csv}");

    let o = mosaic(&["report", run.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("| tiny | 4 |") && text.contains("Effective rank"), "{text}");
}
