//! Run configurations and experiment manifests, stored as TOML.
//!
//! Unknown keys are rejected everywhere and both documents carry a
//! `version` field.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::ModelConfig;
use crate::diffusion::{GroupNoisePolicy, ScheduleConfig};
use crate::error::{Error, Result};
use crate::grouping::GroupSpec;
use crate::sampler::{Mode, SamplerPlan, Window};
use crate::tensor::optim::AdamWConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: usize,
    pub batch_groups: usize,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many iterations; 0 keeps
    /// only the final one.
    pub checkpoint_every: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            iterations: t.iterations,
            batch_groups: t.batch_groups,
            seed: t.seed,
            checkpoint_every: 0,
            optimizer: t.optimizer,
        }
    }
}

/// Sampling defaults; the mode comes from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSettings {
    pub steps: usize,
    pub cfg_scale: f64,
    pub guidance_interval: Window,
    pub group_window: Window,
    pub group_layers: Option<(usize, usize)>,
    pub group_size: usize,
    pub seed: u64,
    pub clip_x0: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let p = SamplerPlan::default();
        SamplerSettings {
            steps: p.steps,
            cfg_scale: p.cfg_scale,
            guidance_interval: p.guidance_interval,
            group_window: p.group_window,
            group_layers: p.group_layers,
            group_size: p.group_size,
            seed: p.seed,
            clip_x0: p.clip_x0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Groups generated for the quality proxy, cycling over classes.
    pub eval_groups: usize,
    /// Groups generated with attention capture.
    pub attention_groups: usize,
    /// Block whose pooled output feeds the linear probe.
    pub probe_layer: usize,
    /// Extra guidance scales to sweep; empty skips the sweep.
    pub cfg_grid: Vec<f64>,
    /// Extra group-attention windows to evaluate.
    pub group_windows: Vec<Window>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            eval_groups: 64,
            attention_groups: 4,
            probe_layer: 1,
            cfg_grid: Vec::new(),
            group_windows: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub index: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "dataset.gdd".into(),
            index: "index.gdi".into(),
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub mode: Mode,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub group: GroupSpec,
    pub noise: GroupNoisePolicy,
    pub train: TrainSettings,
    pub sampler: SamplerSettings,
    pub eval: EvalSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            mode: Mode::GroupdiffL,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            group: GroupSpec::default(),
            noise: GroupNoisePolicy::default(),
            train: TrainSettings::default(),
            sampler: SamplerSettings::default(),
            eval: EvalSettings::default(),
            paths: Paths::default(),
        }
    }
}

fn check_version(v: u32, what: &str) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(Error::Config(format!(
            "{what} version {v}, this build reads {CONFIG_VERSION}"
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            iterations: self.train.iterations,
            batch_groups: self.train.batch_groups,
            group: self.group.clone(),
            noise: self.noise.clone(),
            optimizer: self.train.optimizer.clone(),
            seed: self.train.seed,
        }
    }

    pub fn sampler_plan(&self) -> SamplerPlan {
        let s = &self.sampler;
        SamplerPlan {
            mode: self.mode,
            steps: s.steps,
            cfg_scale: s.cfg_scale,
            guidance_interval: s.guidance_interval,
            group_window: s.group_window,
            group_layers: s.group_layers,
            group_size: s.group_size,
            seed: s.seed,
            clip_x0: s.clip_x0,
            ..Default::default()
        }
    }

    /// Checks every field except paths.
    pub fn validate(&self) -> Result<()> {
        check_version(self.version, "run config")?;
        self.model.validate()?;
        let schedule = self.schedule.build()?;
        self.train_config().validate()?;
        self.sampler_plan()
            .validate(schedule.len())
            .map_err(|e| Error::Config(e.to_string()))?;
        let m = &self.model;
        if self.mode != Mode::Baseline && self.group.group_size > m.max_group {
            return Err(Error::Config(format!(
                "training group size {} exceeds max_group {}",
                self.group.group_size, m.max_group
            )));
        }
        if self.sampler.group_size > m.max_group {
            return Err(Error::Config(format!(
                "sampling group size {} exceeds max_group {}",
                self.sampler.group_size, m.max_group
            )));
        }
        if self.eval.probe_layer >= m.depth {
            return Err(Error::Config(format!(
                "probe layer {} outside depth {}",
                self.eval.probe_layer, m.depth
            )));
        }
        for w in &self.eval.group_windows {
            Window::new(w.start, w.end).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Checks that the dataset and index exist.
    pub fn validate_paths(&self) -> Result<()> {
        for p in [&self.paths.dataset, &self.paths.index] {
            if !p.is_file() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// One tagged entry of a manifest. `set` holds overrides merged into the
/// manifest's base config, e.g. `set = { sampler = { group_size = 8 } }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRun {
    pub tag: String,
    #[serde(default)]
    pub set: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub version: u32,
    /// Each run writes to `out_dir/<tag>`, the summary to `out_dir/summary.csv`.
    pub out_dir: PathBuf,
    pub base: RunConfig,
    #[serde(default)]
    pub runs: Vec<ManifestRun>,
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentManifest {
    /// Run configs in manifest order, with overrides applied and each
    /// run's `out_dir` pointed at its tag directory.
    pub fn resolve(&self) -> Result<Vec<(String, RunConfig)>> {
        check_version(self.version, "manifest")?;
        let mut seen = HashSet::new();
        let base = toml::Table::try_from(&self.base).map_err(|e| Error::Config(e.to_string()))?;
        self.runs
            .iter()
            .map(|r| {
                let ok = !r.tag.is_empty()
                    && r.tag
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
                    && r.tag != "."
                    && r.tag != "..";
                if !ok {
                    return Err(Error::Config(format!(
                        "tag {:?} must be a plain file name",
                        r.tag
                    )));
                }
                if !seen.insert(r.tag.as_str()) {
                    return Err(Error::Config(format!("duplicate tag {:?}", r.tag)));
                }
                let mut t = base.clone();
                merge(&mut t, &r.set);
                let mut c: RunConfig = toml::Value::Table(t)
                    .try_into()
                    .map_err(|e| Error::Config(format!("run {:?}: {e}", r.tag)))?;
                c.paths.out_dir = self.out_dir.join(&r.tag);
                c.validate()
                    .map_err(|e| Error::Config(format!("run {:?}: {e}", r.tag)))?;
                Ok((r.tag.clone(), c))
            })
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: ExperimentManifest =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.resolve()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips() {
        let mut c = RunConfig::default();
        c.sampler.group_window = Window::new(0.0, 0.4).unwrap();
        c.sampler.group_layers = Some((1, 3));
        c.eval.cfg_grid = vec![1.0, 1.1];
        c.noise.label_dropout_p = 0.15;
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::default().to_toml().unwrap();
        let bad = text.replace("[model]", "[model]\nhiden = 3");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = text.replacen("version = 1", "version = 2", 1);
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = RunConfig::default();
        c.sampler.group_size = 99;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval.probe_layer = 9;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.noise.label_dropout_p = 2.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_paths_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.paths.dataset = dir.path().join("nope.gdd");
        assert!(c.validate_paths().is_err());
    }

    fn manifest(runs: &str) -> String {
        let base = RunConfig::default().to_toml().unwrap();
        let base: String = base
            .lines()
            .map(|l| match l.strip_prefix('[') {
                Some(rest) => format!("[base.{rest}\n"),
                None => format!("{l}\n"),
            })
            .collect();
        format!("version = 1\nout_dir = \"out\"\n{runs}\n[base]\n{base}")
    }

    #[test]
    fn manifest_overrides_merge_into_base() {
        let text = manifest(
            "[[runs]]\ntag = \"n1\"\nset = { mode = \"baseline\", sampler = { group_size = 1 } }\n\
             [[runs]]\ntag = \"n8\"\nset = { sampler = { group_size = 8 } }\n",
        );
        let m = ExperimentManifest::from_toml(&text).unwrap();
        let runs = m.resolve().unwrap();
        assert_eq!(runs[0].1.mode, Mode::Baseline);
        assert_eq!(runs[0].1.sampler.group_size, 1);
        assert_eq!(runs[1].1.sampler.group_size, 8);
        assert_eq!(runs[1].1.sampler.steps, RunConfig::default().sampler.steps);
        assert_eq!(runs[1].1.paths.out_dir, PathBuf::from("out/n8"));
    }

    #[test]
    fn manifest_rejects_bad_tags_and_keys() {
        let dup = manifest("[[runs]]\ntag = \"a\"\n[[runs]]\ntag = \"a\"\n");
        assert!(ExperimentManifest::from_toml(&dup).is_err());
        let slash = manifest("[[runs]]\ntag = \"a/b\"\n");
        assert!(ExperimentManifest::from_toml(&slash).is_err());
        let typo = manifest("[[runs]]\ntag = \"a\"\nset = { sampler = { group_sise = 2 } }\n");
        assert!(ExperimentManifest::from_toml(&typo).is_err());
        let empty = manifest("");
        assert!(ExperimentManifest::from_toml(&empty)
            .unwrap()
            .resolve()
            .unwrap()
            .is_empty());
    }
}
