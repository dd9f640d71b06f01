//! `groupdiff` command-line driver.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 for
//! numeric failures such as divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use groupdiff::config::{ExperimentManifest, RunConfig};
use groupdiff::data::{self, Dataset, DatasetSpec};
use groupdiff::denoiser::Denoiser;
use groupdiff::diffusion::{NoiseSchedule, ScheduleConfig};
use groupdiff::error::{Error, Result};
use groupdiff::eval;
use groupdiff::experiment;
use groupdiff::grouping;
use groupdiff::metrics::{self, Aggregation, Level, RankBy};
use groupdiff::plot::{self, Series};
use groupdiff::sampler::{self, Mode, SampleTrace, SamplerPlan, Window};

#[derive(Parser)]
#[command(
    name = "groupdiff",
    version,
    about = "Group diffusion on a toy image dataset"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset management.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Similarity index management.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `paths.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample one group and write a trace file.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        plan: PlanArgs,
        /// Record block sums of the unconditional branch.
        #[arg(long)]
        capture: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention analysis.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Quality, probe and guidance evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Train and evaluate every run of a manifest.
    Reproduce {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Generate a procedural dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Within-class style spread; larger values make classes less uniform.
        #[arg(long, default_value_t = 0.05)]
        similarity: f64,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Encode a dataset and store the similarity index.
    Build {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = grouping::DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Per-record cross-sample statistics of a trace.
    Attn {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also draw the per-step profile as SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Relabel one member at a time and measure how far the anchor moves.
    CrossCondition {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        new_class: usize,
        #[arg(long, value_enum, default_value = "member-to-anchor")]
        rank_by: RankArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Quality proxy of generated images against a dataset.
    Fid {
        /// A trace file or a directory of `.gdt` traces.
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on pooled denoiser features.
    Probe {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 2)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quality proxy over a grid of guidance scales.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// `start:end:step` or a comma list.
        #[arg(long, default_value = "1.0:3.0:0.1")]
        grid: String,
        /// Groups generated per scale.
        #[arg(long, default_value_t = 64)]
        groups: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Run config supplying the noise schedule and sampler defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long = "cfg")]
    cfg_scale: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Normalized-time window `start:end` with group attention on.
    #[arg(long)]
    group_window: Option<Window>,
    /// Normalized-time window `start:end` with guidance applied.
    #[arg(long)]
    guidance_interval: Option<Window>,
    /// Layer range `first:last` (half-open) allowed to attend jointly.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RankArg {
    MemberToAnchor,
    AnchorToMember,
}

struct Loaded {
    model: Denoiser,
    schedule: NoiseSchedule,
    plan: SamplerPlan,
}

impl ModelArgs {
    fn load(&self) -> Result<Loaded> {
        let model = Denoiser::load(&self.ckpt)?;
        let (schedule, plan) = match &self.config {
            Some(p) => {
                let run = RunConfig::load(p)?;
                if run.model != *model.config() {
                    return Err(Error::Config(format!(
                        "{} describes a different model than {}",
                        p.display(),
                        self.ckpt.display()
                    )));
                }
                (run.schedule.build()?, run.sampler_plan())
            }
            None => (ScheduleConfig::default().build()?, SamplerPlan::default()),
        };
        Ok(Loaded {
            model,
            schedule,
            plan,
        })
    }
}

impl PlanArgs {
    fn apply(&self, mut plan: SamplerPlan) -> Result<SamplerPlan> {
        if let Some(v) = self.mode {
            plan.mode = v;
        }
        if let Some(v) = self.group_size {
            plan.group_size = v;
        }
        if let Some(v) = self.cfg_scale {
            plan.cfg_scale = v;
        }
        if let Some(v) = self.steps {
            plan.steps = v;
        }
        if let Some(v) = self.group_window {
            plan.group_window = v;
        }
        if let Some(v) = self.guidance_interval {
            plan.guidance_interval = v;
        }
        if let Some(s) = &self.layers {
            let bad = || Error::InvalidArgument(format!("layer range {s:?} is not first:last"));
            let (a, b) = s.split_once(':').ok_or_else(bad)?;
            plan.group_layers = Some((
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ));
        }
        if let Some(v) = self.class {
            plan.class_label = v;
        }
        if let Some(v) = self.seed {
            plan.seed = v;
        }
        Ok(plan)
    }
}

/// Creates the parent directory of an output file.
fn prepare(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    prepare(path)?;
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_plan(plan: &SamplerPlan, l: &Loaded) -> Result<()> {
    plan.validate(l.schedule.len())?;
    let cfg = l.model.config();
    if plan.group_size > cfg.max_group {
        return Err(Error::InvalidArgument(format!(
            "group size {} exceeds the model's {} sample slots",
            plan.group_size, cfg.max_group
        )));
    }
    if plan.class_label >= cfg.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {} out of range",
            plan.class_label
        )));
    }
    Ok(())
}

fn load_traces(path: &Path) -> Result<Vec<SampleTrace>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "gdt"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no .gdt traces in {}",
                path.display()
            )));
        }
        files.iter().map(|p| SampleTrace::load(p)).collect()
    } else {
        Ok(vec![SampleTrace::load(path)?])
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCmd::Gen {
            out,
            classes,
            per_class,
            size,
            seed,
            similarity,
        }) => {
            let ds = data::generate_dataset(&DatasetSpec {
                num_classes: classes,
                images_per_class: per_class,
                image_size: size,
                seed,
                similarity_structure: similarity,
            })?;
            prepare(&out)?;
            ds.save(&out)?;
            let (within, between) = data::similarity_gap(&ds)?;
            println!("wrote {} images to {}", ds.len(), out.display());
            println!("mean cosine within class {within:.4}, between classes {between:.4}");
        }
        Command::Index(IndexCmd::Build { dataset, tau, out }) => {
            let ds = Dataset::load(&dataset)?;
            let idx = grouping::build_index(&ds, data::encode, tau)?;
            prepare(&out)?;
            idx.save(&out)?;
            println!(
                "indexed {} images (dim {}, tau {tau}) into {}",
                idx.len(),
                idx.dim(),
                out.display()
            );
        }
        Command::Train { config, out } => {
            let run = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| run.paths.out_dir.clone());
            let (ds, idx) = experiment::load_inputs(&run)?;
            let (_, log) = experiment::train_run(&run, &ds, &idx, &out)?;
            let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "trained {} iterations, final loss {last:.5}; outputs in {}",
                log.len(),
                out.display()
            );
        }
        Command::Sample {
            model,
            plan,
            capture,
            out,
        } => {
            let l = model.load()?;
            let mut p = plan.apply(l.plan.clone())?;
            p.capture_attention = capture;
            check_plan(&p, &l)?;
            let trace = sampler::generate(&p, &l.model, &l.schedule)?;
            prepare(&out)?;
            trace.save(&out)?;
            println!(
                "sampled {} images in {} steps ({} attention records) to {}",
                p.group_size,
                p.steps,
                trace.block_sums.len(),
                out.display()
            );
        }
        Command::Analyze(AnalyzeCmd::Attn {
            trace,
            out,
            plot: svg,
        }) => {
            let t = SampleTrace::load(&trace)?;
            prepare(&out)?;
            metrics::write_attention_csv(&t.block_sums, &out)?;
            if t.block_sums.is_empty() {
                println!("trace has no attention records; wrote header only");
            } else {
                let s = metrics::aggregate_s_cross(
                    &t.block_sums,
                    Aggregation::AverageFirst,
                    Level::Image,
                )?;
                println!("{} records, aggregate S_cross {s:.6}", t.block_sums.len());
                if let Some(svg) = svg {
                    let p = metrics::trace_profile(&t)?;
                    let pts = p
                        .steps
                        .iter()
                        .zip(&p.p_cross_mean)
                        .map(|(&k, &v)| (k as f64, v))
                        .collect();
                    prepare(&svg)?;
                    plot::write_line_plot(
                        &svg,
                        "cross-sample attention per step",
                        "sampling step",
                        "P_cross mean",
                        &[Series {
                            name: "P_cross mean".into(),
                            points: pts,
                        }],
                    )?;
                }
            }
        }
        Command::Analyze(AnalyzeCmd::CrossCondition {
            model,
            plan,
            new_class,
            rank_by,
            out,
        }) => {
            let l = model.load()?;
            let p = plan.apply(l.plan.clone())?;
            check_plan(&p, &l)?;
            let rank_by = match rank_by {
                RankArg::MemberToAnchor => RankBy::MemberToAnchor,
                RankArg::AnchorToMember => RankBy::AnchorToMember,
            };
            let report =
                metrics::cross_condition_probe(&p, new_class, rank_by, &l.model, &l.schedule)?;
            let mut w = csv_writer(&out)?;
            w.write_record(["member", "attention", "rank", "anchor_delta"])?;
            for (rank, (j, a)) in report.ranking.iter().enumerate() {
                w.write_record([
                    j.to_string(),
                    a.to_string(),
                    rank.to_string(),
                    report.anchor_deltas[*j].to_string(),
                ])?;
            }
            flush(w, &out)?;
            let (hi, lo) = report.extreme_deltas();
            println!("anchor delta: highest-attention member {hi:.6}, lowest {lo:.6}");
        }
        Command::Eval(EvalCmd::Fid {
            gen,
            reference,
            out,
        }) => {
            let traces = load_traces(&gen)?;
            let mut images = Vec::new();
            for t in &traces {
                images.extend(eval::split_images(&t.images)?);
            }
            let ds = Dataset::load(&reference)?;
            let fid = eval::fid_proxy(&images, &eval::dataset_pixels(&ds))?;
            let mut w = csv_writer(&out)?;
            w.write_record(["generated", "reference", "fid_proxy"])?;
            w.write_record([
                images.len().to_string(),
                ds.len().to_string(),
                fid.to_string(),
            ])?;
            flush(w, &out)?;
            println!(
                "fid proxy {fid:.6} ({} generated vs {} reference)",
                images.len(),
                ds.len()
            );
        }
        Command::Eval(EvalCmd::Probe {
            model,
            dataset,
            layer,
            seed,
            out,
        }) => {
            let l = model.load()?;
            let ds = Dataset::load(&dataset)?;
            let r = eval::linear_probe(&l.model, layer, &ds, &l.schedule, seed)?;
            if let Some(out) = out {
                let mut w = csv_writer(&out)?;
                w.write_record(["layer", "accuracy", "train_size", "test_size"])?;
                w.write_record([
                    r.layer.to_string(),
                    r.accuracy.to_string(),
                    r.train_size.to_string(),
                    r.test_size.to_string(),
                ])?;
                flush(w, &out)?;
            }
            println!(
                "probe layer {layer}: accuracy {:.4} ({} train / {} test)",
                r.accuracy, r.train_size, r.test_size
            );
        }
        Command::Eval(EvalCmd::Sweep {
            model,
            plan,
            dataset,
            grid,
            groups,
            out,
            plot: svg,
        }) => {
            let l = model.load()?;
            let p = plan.apply(l.plan.clone())?;
            check_plan(&p, &l)?;
            let grid = eval::parse_grid(&grid)?;
            let ds = Dataset::load(&dataset)?;
            let table = eval::cfg_sweep(
                &p,
                &grid,
                groups,
                &eval::dataset_pixels(&ds),
                &l.model,
                &l.schedule,
            )?;
            prepare(&out)?;
            eval::write_sweep_csv(&table, &out)?;
            if let Some(svg) = svg {
                prepare(&svg)?;
                plot::write_line_plot(
                    &svg,
                    "guidance sweep",
                    "cfg scale",
                    "fid proxy",
                    &[Series {
                        name: "fid".into(),
                        points: table.rows.clone(),
                    }],
                )?;
            }
            let (s, f) = table.best();
            println!("best scale {s} with fid proxy {f:.6}");
        }
        Command::Reproduce { manifest } => {
            let m = ExperimentManifest::load(&manifest)?;
            let rows = experiment::reproduce(&m)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "{} runs, {failed} failed; summary in {}",
                rows.len(),
                m.out_dir.join("summary.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
