//! End-to-end runs: train, evaluate, and collect the per-run metrics that
//! make up a manifest summary.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentManifest, RunConfig};
use crate::data::Dataset;
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval;
use crate::grouping::DatasetIndex;
use crate::metrics::{self, csv_io, Aggregation, AttentionBlockSums, Level};
use crate::plot::{self, Series};
use crate::sampler::{self, GroupRequest, SamplerPlan, Window};
use crate::tensor::Tensor;
use crate::train::{self, LogRow};

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Loads the dataset and index named by the config and checks they belong
/// together.
pub fn load_inputs(run: &RunConfig) -> Result<(Dataset, DatasetIndex)> {
    run.validate_paths()?;
    let ds = Dataset::load(&run.paths.dataset)?;
    let idx = DatasetIndex::load(&run.paths.index)?;
    if idx.ids()
        != ds
            .images
            .iter()
            .map(|im| im.id)
            .collect::<Vec<_>>()
            .as_slice()
    {
        return Err(Error::Config(format!(
            "{} was not built from {}",
            run.paths.index.display(),
            run.paths.dataset.display()
        )));
    }
    Ok((ds, idx))
}

/// Trains the run's model, writing `log.csv`, `loss.svg`, `model.gdf` and
/// `ckpt_<iter>.gdf` at the configured interval into `out_dir`.
pub fn train_run(
    run: &RunConfig,
    dataset: &Dataset,
    index: &DatasetIndex,
    out_dir: &Path,
) -> Result<(Denoiser, Vec<LogRow>)> {
    run.validate()?;
    create_dir(out_dir)?;
    run.save(&out_dir.join("config.toml"))?;
    let schedule = run.schedule.build()?;
    let init = Denoiser::new(run.model.clone(), run.train.seed)?;
    let every = run.train.checkpoint_every;
    let (model, log) = train::train(
        init,
        &run.train_config(),
        dataset,
        index,
        &schedule,
        |row, m| {
            let done = row.iteration + 1;
            if every > 0 && done % every == 0 {
                m.save(&out_dir.join(format!("ckpt_{done}.gdf")))?;
            }
            Ok(())
        },
    )?;
    model.save(&out_dir.join("model.gdf"))?;
    train::write_log_csv(&log, &out_dir.join("log.csv"))?;
    let pts = log.iter().map(|r| (r.iteration as f64, r.loss)).collect();
    plot::write_line_plot(
        &out_dir.join("loss.svg"),
        "training loss",
        "iteration",
        "loss",
        &[Series {
            name: "loss".into(),
            points: pts,
        }],
    )?;
    Ok((model, log))
}

/// Generates `groups` groups with attention capture, cycling classes.
pub fn attention_records(
    plan: &SamplerPlan,
    groups: usize,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Vec<AttentionBlockSums>> {
    let k = denoiser.config().num_classes;
    let plan = SamplerPlan {
        capture_attention: true,
        ..plan.clone()
    };
    let requests: Vec<GroupRequest> = (0..groups)
        .map(|g| GroupRequest {
            labels: vec![g % k; plan.group_size],
            member_seeds: (0..plan.group_size)
                .map(|i| crate::rng::derive_seed(plan.seed ^ 0xA77E, &[g as u64, i as u64]))
                .collect(),
        })
        .collect();
    Ok(
        sampler::generate_groups(&plan, &requests, denoiser, schedule)?
            .into_iter()
            .flat_map(|t| t.block_sums)
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub fid_proxy: f64,
    /// `None` when no cross-sample attention was captured (groups of one or
    /// a model that never attends jointly).
    pub s_cross: Option<f64>,
    pub probe_acc: f64,
}

/// Evaluates a trained model: quality proxy, attention statistics, probe,
/// and the optional window and guidance sweeps. Writes CSV and SVG files
/// into `out_dir`.
pub fn evaluate_run(
    run: &RunConfig,
    model: &Denoiser,
    dataset: &Dataset,
    reference: &[Tensor],
    out_dir: &Path,
) -> Result<RunMetrics> {
    create_dir(out_dir)?;
    let schedule = run.schedule.build()?;
    let plan = run.sampler_plan();
    let ev = &run.eval;

    let generated = eval::generate_eval_set(&plan, ev.eval_groups, model, &schedule)?;
    let fid_proxy = eval::fid_proxy(&generated, reference)?;

    let records = if plan.group_size > 1 && ev.attention_groups > 0 {
        attention_records(&plan, ev.attention_groups, model, &schedule)?
    } else {
        Vec::new()
    };
    metrics::write_attention_csv(&records, &out_dir.join("attention.csv"))?;
    let s_cross = if records.is_empty() {
        None
    } else {
        let p = metrics::step_profile(&records)?;
        write_profile(&p, &out_dir.join("profile.csv"))?;
        let curve = |v: &[f64]| {
            p.steps
                .iter()
                .zip(v)
                .map(|(&k, &y)| (k as f64, y))
                .collect()
        };
        plot::write_line_plot(
            &out_dir.join("profile.svg"),
            "cross-sample attention per step",
            "sampling step",
            "attention",
            &[
                Series {
                    name: "P_cross mean".into(),
                    points: curve(&p.p_cross_mean),
                },
                Series {
                    name: "P_cross max".into(),
                    points: curve(&p.p_cross_max),
                },
            ],
        )?;
        Some(metrics::aggregate_s_cross(
            &records,
            Aggregation::AverageFirst,
            Level::Image,
        )?)
    };

    let probe = eval::linear_probe(model, ev.probe_layer, dataset, &schedule, run.train.seed)?;

    if !ev.group_windows.is_empty() {
        let rows = ev
            .group_windows
            .iter()
            .map(|w| {
                let p = SamplerPlan {
                    group_window: *w,
                    ..plan.clone()
                };
                Ok((
                    *w,
                    eval::fid_proxy(
                        &eval::generate_eval_set(&p, ev.eval_groups, model, &schedule)?,
                        reference,
                    )?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        write_windows(&rows, &out_dir.join("windows.csv"))?;
    }
    if !ev.cfg_grid.is_empty() {
        let table = eval::cfg_sweep(
            &plan,
            &ev.cfg_grid,
            ev.eval_groups,
            reference,
            model,
            &schedule,
        )?;
        eval::write_sweep_csv(&table, &out_dir.join("sweep.csv"))?;
        let pts = table.rows.clone();
        plot::write_line_plot(
            &out_dir.join("sweep.svg"),
            "guidance sweep",
            "cfg scale",
            "fid proxy",
            &[Series {
                name: "fid".into(),
                points: pts,
            }],
        )?;
    }

    let m = RunMetrics {
        fid_proxy,
        s_cross,
        probe_acc: probe.accuracy,
    };
    write_metrics(&m, &out_dir.join("metrics.csv"))?;
    Ok(m)
}

fn write_profile(p: &metrics::StepProfile, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["step", "p_cross_mean", "p_cross_max"])?;
    for i in 0..p.steps.len() {
        w.write_record([
            p.steps[i].to_string(),
            p.p_cross_mean[i].to_string(),
            p.p_cross_max[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_windows(rows: &[(Window, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["window_start", "window_end", "fid"])?;
    for (win, f) in rows {
        w.write_record([win.start.to_string(), win.end.to_string(), f.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_metrics(m: &RunMetrics, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["fid_proxy", "s_cross", "probe_acc"])?;
    w.write_record([
        m.fid_proxy.to_string(),
        opt(m.s_cross),
        m.probe_acc.to_string(),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub tag: String,
    pub outcome: std::result::Result<RunMetrics, String>,
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["tag", "fid_proxy", "s_cross", "probe_acc", "status"])?;
    for r in rows {
        match &r.outcome {
            Ok(m) => w.write_record([
                r.tag.clone(),
                m.fid_proxy.to_string(),
                opt(m.s_cross),
                m.probe_acc.to_string(),
                "ok".into(),
            ])?,
            Err(e) => w.write_record([
                r.tag.clone(),
                String::new(),
                String::new(),
                String::new(),
                e.clone(),
            ])?,
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every manifest entry in order. A failing run is recorded in its
/// row (and in `<tag>/error.txt`) and the remaining runs still execute.
/// Datasets and indexes are only read.
pub fn reproduce(manifest: &ExperimentManifest) -> Result<Vec<SummaryRow>> {
    let runs = manifest.resolve()?;
    create_dir(&manifest.out_dir)?;
    let mut inputs: HashMap<(PathBuf, PathBuf), (Dataset, DatasetIndex, Vec<Tensor>)> =
        HashMap::new();
    let mut rows = Vec::with_capacity(runs.len());
    for (tag, run) in runs {
        log::info!("run {tag}");
        let out = run.paths.out_dir.clone();
        let outcome = (|| -> Result<RunMetrics> {
            let key = (run.paths.dataset.clone(), run.paths.index.clone());
            if !inputs.contains_key(&key) {
                let (ds, idx) = load_inputs(&run)?;
                let px = eval::dataset_pixels(&ds);
                inputs.insert(key.clone(), (ds, idx, px));
            }
            let (ds, idx, px) = &inputs[&key];
            let (model, _) = train_run(&run, ds, idx, &out)?;
            evaluate_run(&run, &model, ds, px, &out)
        })();
        if let Err(e) = &outcome {
            log::warn!("run {tag} failed: {e}");
            let _ = create_dir(&out).and_then(|_| {
                std::fs::write(out.join("error.txt"), format!("{e}\n"))
                    .map_err(|io| Error::io(&out, io))
            });
        }
        rows.push(SummaryRow {
            tag,
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }
    write_summary(&rows, &manifest.out_dir.join("summary.csv"))?;
    Ok(rows)
}
