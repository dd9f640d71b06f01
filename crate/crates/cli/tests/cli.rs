//! Drives the `groupdiff` binary through a full tiny workflow.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_groupdiff"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("stdout: {}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"
version = 1
mode = "groupdiff_l"

[model]
depth = 2
hidden = 16
heads = 2
patch = 4
image_size = 8
channels = 3
num_classes = 3
max_group = 4
time_embed_dim = 8
mlp_ratio = 2

[schedule]
timesteps = 50
beta_start = 0.001
beta_end = 0.2

[group]
group_size = 3
query_mode = "similarity"
tau = 0.7
seed = 0

[noise]
sigma_tv = 5
label_dropout_p = 0.5

[train]
iterations = 10
batch_groups = 4
seed = 1
checkpoint_every = 5

[train.optimizer]
lr = 0.001
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
weight_decay = 0.01

[sampler]
steps = 4
cfg_scale = 1.5
guidance_interval = { start = 0.0, end = 1.0 }
group_window = { start = 0.0, end = 1.0 }
group_size = 3
seed = 2
clip_x0 = true

[eval]
eval_groups = 12
attention_groups = 2
probe_layer = 1
cfg_grid = []
group_windows = []

[paths]
dataset = "DIR/data.gdd"
index = "DIR/data.gdi"
out_dir = "DIR/run"
"#;

fn setup(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data.gdd");
    let index = dir.join("data.gdi");
    let text = ok(&[
        "dataset",
        "gen",
        "--out",
        s(&data),
        "--classes",
        "3",
        "--per-class",
        "16",
        "--size",
        "8",
    ]);
    assert!(text.contains("wrote 48 images"));
    ok(&[
        "index",
        "build",
        "--dataset",
        s(&data),
        "--tau",
        "0.7",
        "--out",
        s(&index),
    ]);
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, CONFIG.replace("DIR", s(dir))).unwrap();
    cfg
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d);
    let text = ok(&["train", "--config", s(&cfg)]);
    assert!(text.contains("trained 10 iterations"));
    let ckpt = d.join("run/model.gdf");
    assert!(d.join("run/ckpt_5.gdf").is_file());

    let traces = d.join("traces");
    std::fs::create_dir(&traces).unwrap();
    for seed in 0..12 {
        let out = traces.join(format!("t{seed:02}.gdt"));
        ok(&[
            "sample",
            "--ckpt",
            s(&ckpt),
            "--config",
            s(&cfg),
            "--mode",
            "groupdiff_l",
            "--group-size",
            "3",
            "--cfg",
            "2.0",
            "--steps",
            "4",
            "--group-window",
            "0:0.5",
            "--seed",
            &seed.to_string(),
            "--capture",
            "--out",
            s(&out),
        ]);
    }
    let stats = d.join("stats.csv");
    let svg = d.join("profile.svg");
    let text = ok(&[
        "analyze",
        "attn",
        "--trace",
        s(&traces.join("t00.gdt")),
        "--out",
        s(&stats),
        "--plot",
        s(&svg),
    ]);
    assert!(text.contains("aggregate S_cross"));
    let csv = std::fs::read_to_string(&stats).unwrap();
    assert!(csv.starts_with("step,layer,image,p_self,p_cross_mean,p_cross_max,s_cross"));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let fid = d.join("fid.csv");
    ok(&[
        "eval",
        "fid",
        "--gen",
        s(&traces),
        "--ref",
        s(&d.join("data.gdd")),
        "--out",
        s(&fid),
    ]);
    assert!(std::fs::read_to_string(&fid)
        .unwrap()
        .starts_with("generated,reference,fid_proxy\n36,48,"));

    let text = ok(&[
        "eval",
        "probe",
        "--ckpt",
        s(&ckpt),
        "--config",
        s(&cfg),
        "--dataset",
        s(&d.join("data.gdd")),
        "--layer",
        "1",
    ]);
    assert!(text.contains("accuracy"));

    let sweep = d.join("sweep.csv");
    ok(&[
        "eval",
        "sweep",
        "--ckpt",
        s(&ckpt),
        "--config",
        s(&cfg),
        "--dataset",
        s(&d.join("data.gdd")),
        "--grid",
        "1.0,2.0",
        "--groups",
        "12",
        "--out",
        s(&sweep),
    ]);
    let table = std::fs::read_to_string(&sweep).unwrap();
    assert!(table.starts_with("s,fid,is_argmin\n1,"));
    assert_eq!(table.matches("true").count(), 1);

    let probe = d.join("probe.csv");
    let text = ok(&[
        "analyze",
        "cross-condition",
        "--ckpt",
        s(&ckpt),
        "--config",
        s(&cfg),
        "--group-size",
        "3",
        "--new-class",
        "2",
        "--out",
        s(&probe),
    ]);
    assert!(text.contains("anchor delta"));
    assert_eq!(std::fs::read_to_string(&probe).unwrap().lines().count(), 3);
}

#[test]
fn reproduce_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d);
    let base: String = std::fs::read_to_string(&cfg)
        .unwrap()
        .lines()
        .map(|l| match l.strip_prefix('[') {
            Some(rest) => format!("[base.{rest}\n"),
            None => format!("{l}\n"),
        })
        .collect();
    let manifest = format!(
        "version = 1\nout_dir = {:?}\n[[runs]]\ntag = \"n3\"\n[[runs]]\ntag = \"n2\"\nset = {{ sampler = {{ group_size = 2 }}, eval = {{ eval_groups = 18 }} }}\n[base]\n{base}",
        d.join("study")
    );
    let m = d.join("manifest.toml");
    std::fs::write(&m, manifest).unwrap();
    let text = ok(&["reproduce", "--manifest", s(&m)]);
    assert!(text.contains("2 runs, 0 failed"));
    let summary = std::fs::read_to_string(d.join("study/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(d.join("study/n2/metrics.csv").is_file());
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d);
    let bad = d.join("bad.toml");
    std::fs::write(
        &bad,
        std::fs::read_to_string(&cfg)
            .unwrap()
            .replace("[model]", "[model]\ndeph = 2"),
    )
    .unwrap();
    assert_eq!(run(&["train", "--config", s(&bad)]).status.code(), Some(2));
    let missing = d.join("missing.toml");
    std::fs::write(
        &missing,
        std::fs::read_to_string(&cfg)
            .unwrap()
            .replace("data.gdd", "nope.gdd"),
    )
    .unwrap();
    assert_eq!(
        run(&["train", "--config", s(&missing)]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["sample", "--ckpt", s(&d.join("data.gdd")), "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&[
            "dataset",
            "gen",
            "--out",
            s(&d.join("x.gdd")),
            "--size",
            "4"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d);
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("lr = 0.001", "lr = 1e300");
    std::fs::write(&cfg, text).unwrap();
    let out = run(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at iteration"));
}

#[test]
fn untrained_probe_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d);
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("iterations = 10", "iterations = 0");
    std::fs::write(&cfg, text).unwrap();
    ok(&["train", "--config", s(&cfg)]);
    let out = run(&[
        "analyze",
        "cross-condition",
        "--ckpt",
        s(&d.join("run/model.gdf")),
        "--config",
        s(&cfg),
        "--group-size",
        "3",
        "--new-class",
        "1",
        "--out",
        s(&d.join("p.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("untrained"));
}
