//! End-to-end pipeline: dataset, index, training, sampling, analysis,
//! evaluation and manifests, on a tiny configuration.

use std::path::Path;

use groupdiff::config::{ExperimentManifest, RunConfig};
use groupdiff::data::{self, Dataset, DatasetSpec};
use groupdiff::denoiser::{Denoiser, ModelConfig};
use groupdiff::eval;
use groupdiff::experiment;
use groupdiff::grouping::{self, DatasetIndex};
use groupdiff::metrics;
use groupdiff::sampler::{self, Mode, SampleTrace};

fn tiny_run(dir: &Path) -> RunConfig {
    let ds = data::generate_dataset(&DatasetSpec {
        num_classes: 3,
        images_per_class: 16,
        image_size: 8,
        ..Default::default()
    })
    .unwrap();
    let idx = grouping::build_index(&ds, data::encode, 0.7).unwrap();
    ds.save(&dir.join("data.gdd")).unwrap();
    idx.save(&dir.join("data.gdi")).unwrap();
    let mut run = RunConfig {
        model: ModelConfig {
            depth: 2,
            hidden: 16,
            heads: 2,
            patch: 4,
            image_size: 8,
            num_classes: 3,
            max_group: 4,
            time_embed_dim: 8,
            mlp_ratio: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    run.train.iterations = 20;
    run.train.batch_groups = 4;
    run.train.checkpoint_every = 10;
    run.noise.label_dropout_p = 0.5;
    run.sampler.steps = 5;
    run.sampler.group_size = 3;
    run.eval.eval_groups = 12;
    run.eval.attention_groups = 2;
    run.eval.probe_layer = 1;
    run.paths.dataset = dir.join("data.gdd");
    run.paths.index = dir.join("data.gdi");
    run.paths.out_dir = dir.join("run");
    run
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn train_sample_analyze_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let (ds, idx) = experiment::load_inputs(&run).unwrap();
    let out = dir.path().join("run");
    let (model, log) = experiment::train_run(&run, &ds, &idx, &out).unwrap();
    assert_eq!(log.len(), 20);
    for f in [
        "config.toml",
        "model.gdf",
        "ckpt_10.gdf",
        "ckpt_20.gdf",
        "log.csv",
        "loss.svg",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(Denoiser::load(&out.join("model.gdf")).unwrap(), model);
    assert_eq!(
        bytes(&out.join("model.gdf")),
        bytes(&out.join("ckpt_20.gdf"))
    );
    assert_eq!(RunConfig::load(&out.join("config.toml")).unwrap(), run);

    let schedule = run.schedule.build().unwrap();
    let mut plan = run.sampler_plan();
    plan.capture_attention = true;
    let trace = sampler::generate(&plan, &model, &schedule).unwrap();
    assert!(trace.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(trace.block_sums.len(), plan.steps * run.model.depth);
    let path = dir.path().join("t.gdt");
    trace.save(&path).unwrap();
    assert_eq!(SampleTrace::load(&path).unwrap(), trace);

    let csv_path = dir.path().join("stats.csv");
    metrics::write_attention_csv(&trace.block_sums, &csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("step,layer,image,p_self,p_cross_mean,p_cross_max,s_cross\n"));
    assert_eq!(text.lines().count(), 1 + trace.block_sums.len() * 3);

    let metrics =
        experiment::evaluate_run(&run, &model, &ds, &eval::dataset_pixels(&ds), &out).unwrap();
    assert!(metrics.fid_proxy.is_finite() && metrics.fid_proxy >= 0.0);
    assert!(metrics.s_cross.is_some());
    assert!((0.0..=1.0).contains(&metrics.probe_acc));
    for f in ["attention.csv", "profile.csv", "profile.svg", "metrics.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

fn manifest(dir: &Path, runs: &str) -> ExperimentManifest {
    let run = tiny_run(dir);
    let base = run.to_toml().unwrap();
    let base: String = base
        .lines()
        .map(|l| match l.strip_prefix('[') {
            Some(rest) => format!("[base.{rest}\n"),
            None => format!("{l}\n"),
        })
        .collect();
    let text = format!(
        "version = 1\nout_dir = {:?}\n{runs}\n[base]\n{base}",
        dir.join("out")
    );
    ExperimentManifest::from_toml(&text).unwrap()
}

#[test]
fn empty_manifest_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "");
    assert!(experiment::reproduce(&m).unwrap().is_empty());
    let text = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert_eq!(text, "tag,fid_proxy,s_cross,probe_acc,status\n");
}

#[test]
fn identical_configs_give_identical_rows_and_failures_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(
        dir.path(),
        "[[runs]]\ntag = \"a\"\n[[runs]]\ntag = \"broken\"\nset = { train = { optimizer = { lr = 1e300 } } }\n\
         [[runs]]\ntag = \"b\"\n[[runs]]\ntag = \"single\"\nset = { mode = \"baseline\", sampler = { group_size = 1 }, eval = { eval_groups = 48 } }\n",
    );
    let before = (
        bytes(&dir.path().join("data.gdd")),
        bytes(&dir.path().join("data.gdi")),
    );
    let rows = experiment::reproduce(&m).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].outcome, rows[2].outcome);
    assert!(rows[0].outcome.is_ok());
    assert!(rows[1].outcome.as_ref().unwrap_err().contains("diverged"));
    assert!(dir.path().join("out/broken/error.txt").is_file());
    assert_eq!(rows[3].outcome.as_ref().unwrap().s_cross, None);

    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(
        lines[1].replacen("a,", "", 1),
        lines[3].replacen("b,", "", 1)
    );
    assert!(lines[4].starts_with("single,") && lines[4].contains(",,"));
    let after = (
        bytes(&dir.path().join("data.gdd")),
        bytes(&dir.path().join("data.gdi")),
    );
    assert!(before == after, "inputs were modified");
}

#[test]
fn seeded_runs_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    let (ds, idx) = experiment::load_inputs(&run).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    experiment::train_run(&run, &ds, &idx, &a).unwrap();
    experiment::train_run(&run, &ds, &idx, &b).unwrap();
    assert_eq!(bytes(&a.join("model.gdf")), bytes(&b.join("model.gdf")));
    assert_eq!(bytes(&a.join("log.csv")), bytes(&b.join("log.csv")));

    let model = Denoiser::load(&a.join("model.gdf")).unwrap();
    let schedule = run.schedule.build().unwrap();
    let mut plan = run.sampler_plan();
    plan.capture_attention = true;
    let t1 = sampler::generate(&plan, &model, &schedule)
        .unwrap()
        .to_bytes();
    let t2 = sampler::generate(&plan, &model, &schedule)
        .unwrap()
        .to_bytes();
    assert_eq!(t1, t2);
}

#[test]
fn artifacts_reject_foreign_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    assert!(Dataset::load(&run.paths.index).is_err());
    assert!(DatasetIndex::load(&run.paths.dataset).is_err());
    assert!(Denoiser::load(&run.paths.dataset).is_err());
    assert!(SampleTrace::load(&run.paths.dataset).is_err());
}

#[test]
fn mismatched_index_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(dir.path());
    let other = data::generate_dataset(&DatasetSpec {
        num_classes: 3,
        images_per_class: 5,
        image_size: 8,
        ..Default::default()
    })
    .unwrap();
    let idx = grouping::build_index(&other, data::encode, 0.7).unwrap();
    idx.save(&dir.path().join("other.gdi")).unwrap();
    run.paths.index = dir.path().join("other.gdi");
    assert!(experiment::load_inputs(&run).is_err());
}

#[test]
fn groupdiff_f_sampling_uses_joint_attention_in_both_branches() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(dir.path());
    run.mode = Mode::GroupdiffF;
    let (ds, idx) = experiment::load_inputs(&run).unwrap();
    let (model, _) = experiment::train_run(&run, &ds, &idx, &dir.path().join("f")).unwrap();
    let schedule = run.schedule.build().unwrap();
    let f = sampler::generate(&run.sampler_plan(), &model, &schedule).unwrap();
    let mut plan = run.sampler_plan();
    plan.mode = Mode::GroupdiffL;
    let l = sampler::generate(&plan, &model, &schedule).unwrap();
    plan.mode = Mode::Baseline;
    let b = sampler::generate(&plan, &model, &schedule).unwrap();
    assert_ne!(f.images, l.images);
    assert_ne!(l.images, b.images);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let run = RunConfig::load(&root.join("desk.toml")).unwrap();
    let runs = ExperimentManifest::load(&root.join("group_size.toml"))
        .unwrap()
        .resolve()
        .unwrap();
    let sizes: Vec<usize> = runs.iter().map(|(_, c)| c.group.group_size).collect();
    assert_eq!(sizes, [1, 2, 4, 8]);
    assert_eq!(runs[2].1.model, run.model);
    assert_eq!(runs[0].1.mode, Mode::Baseline);
}
