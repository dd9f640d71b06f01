//! Training loop for all three modes.
//!
//! Each iteration draws `batch_groups` distinct anchors, decides label
//! dropout per anchor, and sizes its group by mode:
//!
//! | mode          | kept label | dropped label |
//! |---------------|------------|---------------|
//! | `baseline`    | 1          | 1             |
//! | `groupdiff_f` | N          | N             |
//! | `groupdiff_l` | 1          | N             |
//!
//! Grouped members share the anchor's (possibly null) label and attend
//! jointly; the loss is the per-member MSE summed within a group and
//! averaged over groups.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::{embed, Denoiser, ForwardBatch, ForwardOptions, Segment};
use crate::diffusion::{self, GroupNoisePolicy, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grouping::{self, DatasetIndex, GroupSpec};
use crate::metrics::csv_io;
use crate::rng::{self, tag};
use crate::sampler::Mode;
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::tape::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    /// Anchors per iteration.
    pub batch_groups: usize,
    pub group: GroupSpec,
    pub noise: GroupNoisePolicy,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::GroupdiffL,
            iterations: 5000,
            batch_groups: 32,
            group: GroupSpec::default(),
            noise: GroupNoisePolicy::default(),
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_groups == 0 {
            return Err(Error::Config("batch_groups must be >= 1".into()));
        }
        self.group.validate()?;
        self.noise.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Stateful trainer; [`Trainer::step`] runs one iteration.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    index: &'a DatasetIndex,
    schedule: &'a NoiseSchedule,
    model: Denoiser,
    optimizer: AdamW,
    /// Images in model space (`2p - 1`), by dataset position.
    x0: Vec<Vec<f64>>,
    iteration: usize,
}

struct GroupPlan {
    positions: Vec<usize>,
    label: usize,
    joint: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Denoiser,
        config: TrainConfig,
        dataset: &'a Dataset,
        index: &'a DatasetIndex,
        schedule: &'a NoiseSchedule,
    ) -> Result<Self> {
        config.validate()?;
        let cfg = model.config();
        if config.batch_groups > dataset.len() {
            return Err(Error::Config(format!(
                "batch of {} anchors from {} images",
                config.batch_groups,
                dataset.len()
            )));
        }
        if dataset.image_size != cfg.image_size || dataset.num_classes != cfg.num_classes {
            return Err(Error::Config(format!(
                "dataset ({} px, {} classes) does not match model ({} px, {} classes)",
                dataset.image_size, dataset.num_classes, cfg.image_size, cfg.num_classes
            )));
        }
        if index.len() != dataset.len()
            || index
                .ids()
                .iter()
                .zip(&dataset.images)
                .any(|(a, b)| *a != b.id)
        {
            return Err(Error::Config(
                "index was not built from this dataset".into(),
            ));
        }
        if config.mode != Mode::Baseline && config.group.group_size > cfg.max_group {
            return Err(Error::Config(format!(
                "group size {} exceeds the model's {} sample slots",
                config.group.group_size, cfg.max_group
            )));
        }
        let optimizer = AdamW::new(config.optimizer.clone(), model.params())?;
        let x0 = dataset
            .images
            .iter()
            .map(|im| im.pixels.data().iter().map(|p| 2.0 * p - 1.0).collect())
            .collect();
        Ok(Trainer {
            config,
            dataset,
            index,
            schedule,
            model,
            optimizer,
            x0,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn plan_groups(&self, it: u64) -> Result<Vec<GroupPlan>> {
        let cfg = &self.config;
        let null = self.model.config().null_label();
        let mut arng = rng::rng_from(cfg.seed, &[tag::ANCHORS, it]);
        let anchors = rand::seq::index::sample(&mut arng, self.dataset.len(), cfg.batch_groups);
        anchors
            .iter()
            .enumerate()
            .map(|(b, pos)| {
                let anchor = &self.dataset.images[pos];
                let mut drng = rng::rng_from(cfg.seed, &[tag::DROPOUT, it, b as u64]);
                let (label, dropped) = diffusion::label_dropout(
                    &[anchor.class_id],
                    cfg.noise.label_dropout_p,
                    null,
                    &mut drng,
                );
                let grouped = match cfg.mode {
                    Mode::Baseline => false,
                    Mode::GroupdiffF => true,
                    Mode::GroupdiffL => dropped,
                } && cfg.group.group_size > 1;
                let positions = if grouped {
                    let spec = GroupSpec {
                        seed: rng::derive_seed(cfg.seed, &[it, b as u64]),
                        ..cfg.group.clone()
                    };
                    grouping::assemble_group(anchor.id, &spec, self.index)?
                        .ids
                        .iter()
                        .map(|&id| self.index.position(id))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    vec![pos]
                };
                Ok(GroupPlan {
                    positions,
                    label: label[0],
                    joint: grouped,
                })
            })
            .collect()
    }

    /// Runs one iteration and returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let it = self.iteration as u64;
        let cfg = self.model.config().clone();
        let t_max = self.schedule.len();
        let groups = self.plan_groups(it)?;
        let per = cfg.image_len();
        let n: usize = groups.iter().map(|g| g.positions.len()).sum();

        let mut x = Vec::with_capacity(n * per);
        let mut noise = Vec::with_capacity(n * per);
        let mut timesteps = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut segments = Vec::with_capacity(groups.len());
        let mut weights = Vec::with_capacity(n);
        let w = 1.0 / groups.len() as f64;
        for (b, g) in groups.iter().enumerate() {
            let size = g.positions.len();
            let mut trng = rng::rng_from(self.config.seed, &[tag::TIMESTEPS, it, b as u64]);
            let ts = diffusion::sample_group_timesteps(
                size,
                self.config.noise.sigma_tv,
                t_max,
                &mut trng,
            );
            debug_assert!(diffusion::max_deviation(&ts) <= self.config.noise.sigma_tv);
            let mut nrng = rng::rng_from(self.config.seed, &[tag::NOISE, it, b as u64]);
            let eps = rng::normal_vec(&mut nrng, size * per);
            for ((pos, t), e) in g.positions.iter().zip(&ts).zip(eps.chunks(per)) {
                x.extend(diffusion::mix(
                    &self.x0[*pos],
                    e,
                    self.schedule.alpha_bar(*t),
                ));
            }
            noise.extend(eps);
            timesteps.extend(ts);
            labels.extend(std::iter::repeat_n(g.label, size));
            segments.push(if g.joint {
                Segment::joint(size)
            } else {
                Segment::isolated(1)
            });
            weights.extend(std::iter::repeat_n(w, size));
        }
        let shape = vec![n, cfg.image_size, cfg.image_size, cfg.channels];
        let x = Tensor::new(shape.clone(), x)?;
        let target = embed::patchify(&Tensor::new(shape, noise)?, cfg.patch)?
            .reshape(&[n * cfg.tokens_per_image(), cfg.patch_dim()])?;

        let diverged = |loss: f64| Error::Diverged {
            iteration: self.iteration,
            loss,
        };
        let mut g = Graph::new();
        let vars = self
            .model
            .params()
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let batch = ForwardBatch {
            x: &x,
            timesteps: &timesteps,
            labels: &labels,
            segments: &segments,
        };
        let built = self
            .model
            .build(&mut g, &vars, &batch, &ForwardOptions::default());
        let (out, _, _) = built.map_err(|e| {
            if e.is_numeric() {
                diverged(f64::NAN)
            } else {
                e
            }
        })?;
        let loss_var = g
            .segment_mse(out, &target, cfg.tokens_per_image(), &weights)
            .map_err(|e| {
                if e.is_numeric() {
                    diverged(f64::NAN)
                } else {
                    e
                }
            })?;
        let loss = g.value(loss_var).item();
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        let grads = g.backward(loss_var).map_err(|_| diverged(loss))?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(self.model.params())
            .map(|(v, p)| grads.get_or_zeros(*v, p))
            .collect();
        self.optimizer
            .step(self.model.params_mut(), &grads)
            .map_err(|e| if e.is_numeric() { diverged(loss) } else { e })?;
        self.iteration += 1;
        Ok(loss)
    }
}

/// Runs `config.iterations` steps. `on_iteration` sees the log row and the
/// model after every step.
pub fn train<F>(
    model: Denoiser,
    config: &TrainConfig,
    dataset: &Dataset,
    index: &DatasetIndex,
    schedule: &NoiseSchedule,
    mut on_iteration: F,
) -> Result<(Denoiser, Vec<LogRow>)>
where
    F: FnMut(&LogRow, &Denoiser) -> Result<()>,
{
    let mut trainer = Trainer::new(model, config.clone(), dataset, index, schedule)?;
    let mut log = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let loss = trainer.step()?;
        let row = LogRow {
            iteration: trainer.iteration() - 1,
            loss,
            lr: config.optimizer.lr,
        };
        on_iteration(&row, trainer.model())?;
        log.push(row);
    }
    Ok((trainer.into_model(), log))
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["iter", "loss", "lr"])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.loss.to_string(),
            r.lr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Moving average over windows of `k` consecutive entries.
pub fn smoothed(values: &[f64], k: usize) -> Vec<f64> {
    if k == 0 || values.len() < k {
        return Vec::new();
    }
    values
        .windows(k)
        .map(|w| w.iter().sum::<f64>() / k as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, DatasetSpec};
    use crate::denoiser::ModelConfig;
    use crate::diffusion::ScheduleConfig;

    fn fixture() -> (Dataset, DatasetIndex, NoiseSchedule) {
        let ds = data::generate_dataset(&DatasetSpec {
            num_classes: 3,
            images_per_class: 8,
            image_size: 8,
            ..Default::default()
        })
        .unwrap();
        let idx = grouping::build_index(&ds, data::encode, 0.7).unwrap();
        let s = ScheduleConfig::default().build().unwrap();
        (ds, idx, s)
    }

    fn model() -> Denoiser {
        Denoiser::new(
            ModelConfig {
                depth: 1,
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
            1,
        )
        .unwrap()
    }

    fn cfg(mode: Mode, iterations: usize, p: f64) -> TrainConfig {
        TrainConfig {
            mode,
            iterations,
            batch_groups: 4,
            noise: GroupNoisePolicy {
                label_dropout_p: p,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn run(c: &TrainConfig) -> (Denoiser, Vec<LogRow>) {
        let (ds, idx, s) = fixture();
        train(model(), c, &ds, &idx, &s, |_, _| Ok(())).unwrap()
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (m, log) = run(&cfg(Mode::GroupdiffF, 0, 0.1));
        assert_eq!(m, model());
        assert!(log.is_empty());
    }

    #[test]
    fn baseline_equals_late_mode_without_dropout() {
        let a = run(&cfg(Mode::Baseline, 5, 0.0));
        let b = run(&cfg(Mode::GroupdiffL, 5, 0.0));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn late_mode_differs_once_groups_appear() {
        let a = run(&cfg(Mode::Baseline, 3, 1.0));
        let b = run(&cfg(Mode::GroupdiffL, 3, 1.0));
        assert_ne!(a.1, b.1);
    }

    #[test]
    fn training_is_deterministic() {
        let c = cfg(Mode::GroupdiffF, 4, 0.5);
        assert_eq!(run(&c), run(&c));
    }

    #[test]
    fn loss_decreases_on_toy_data() {
        let (_, log) = run(&cfg(Mode::GroupdiffF, 200, 0.1));
        let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
        let s = smoothed(&losses, 5);
        let head = s[..20].iter().sum::<f64>() / 20.0;
        let tail = s[s.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.8 * head, "head {head} tail {tail}");
    }

    #[test]
    fn huge_learning_rate_reports_iteration() {
        let mut c = cfg(Mode::Baseline, 50, 0.1);
        c.optimizer.lr = 1e300;
        let (ds, idx, s) = fixture();
        let err = train(model(), &c, &ds, &idx, &s, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (ds, idx, s) = fixture();
        let mut c = cfg(Mode::GroupdiffF, 1, 0.1);
        c.batch_groups = 100;
        assert!(Trainer::new(model(), c, &ds, &idx, &s).is_err());
        let mut c = cfg(Mode::GroupdiffF, 1, 0.1);
        c.group.group_size = 5;
        assert!(Trainer::new(model(), c, &ds, &idx, &s).is_err());
    }

    #[test]
    fn log_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_log_csv(
            &[LogRow {
                iteration: 0,
                loss: 1.5,
                lr: 1e-3,
            }],
            &p,
        )
        .unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "iter,loss,lr\n0,1.5,0.001\n");
    }
}
