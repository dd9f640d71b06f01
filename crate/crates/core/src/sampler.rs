//! Ancestral DDPM sampling with classifier-free guidance in three modes.
//!
//! Time runs over `steps` respaced timesteps. Step `k` has normalized time
//! `k / steps`, so `0` is pure noise and values near `1` are nearly clean.
//! Group-attention and guidance windows are half-open on that axis:
//! `[g0, g1)` covers steps with `g0 <= k / steps < g1`, and `[0, 0]` never
//! fires.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttnCaptureSpec, Denoiser, ForwardBatch, ForwardOptions, Segment};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::metrics::AttentionBlockSums;
use crate::rng::{self, tag};
use crate::tensor::checkpoint::{Reader, WriteLe};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Both guidance branches run per image.
    Baseline,
    /// Both branches use group attention.
    GroupdiffF,
    /// Only the unconditional branch uses group attention.
    GroupdiffL,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "groupdiff_f" => Ok(Mode::GroupdiffF),
            "groupdiff_l" => Ok(Mode::GroupdiffL),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?}; expected baseline, groupdiff_f or groupdiff_l"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::GroupdiffF => "groupdiff_f",
            Mode::GroupdiffL => "groupdiff_l",
        })
    }
}

/// Half-open interval `[start, end)` on normalized denoising time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub const ALWAYS: Window = Window {
        start: 0.0,
        end: 1.0,
    };
    pub const NEVER: Window = Window {
        start: 0.0,
        end: 0.0,
    };

    pub fn new(start: f64, end: f64) -> Result<Self> {
        let w = Window { start, end };
        w.validate("window")?;
        Ok(w)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(0.0 <= self.start && self.start <= self.end && self.end <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{what} [{}, {}] must satisfy 0 <= start <= end <= 1",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn contains(&self, tau: f64) -> bool {
        self.start <= tau && tau < self.end
    }
}

impl std::str::FromStr for Window {
    type Err = Error;

    /// Parses `start:end`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("window {s:?} is not start:end")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("window bound {v:?} is not a number")))
        };
        Window::new(parse(a)?, parse(b)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerPlan {
    pub mode: Mode,
    pub steps: usize,
    pub cfg_scale: f64,
    pub guidance_interval: Window,
    pub group_window: Window,
    /// Half-open layer range `[first, last)` allowed to attend jointly;
    /// `None` means every layer.
    pub group_layers: Option<(usize, usize)>,
    pub group_size: usize,
    pub class_label: usize,
    pub seed: u64,
    /// Per-member noise seeds; `None` derives them from `seed`.
    pub member_seeds: Option<Vec<u64>>,
    pub clip_x0: bool,
    pub capture_attention: bool,
    /// Steps whose input `x_t` is kept in the trace.
    pub snapshot_steps: Vec<usize>,
}

impl Default for SamplerPlan {
    fn default() -> Self {
        SamplerPlan {
            mode: Mode::GroupdiffL,
            steps: 50,
            cfg_scale: 1.5,
            guidance_interval: Window::ALWAYS,
            group_window: Window::ALWAYS,
            group_layers: None,
            group_size: 4,
            class_label: 0,
            seed: 0,
            member_seeds: None,
            clip_x0: true,
            capture_attention: false,
            snapshot_steps: Vec::new(),
        }
    }
}

impl SamplerPlan {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::InvalidArgument("group_size must be >= 1".into()));
        }
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::InvalidArgument(format!(
                "steps {} outside [1, {timesteps}]",
                self.steps
            )));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cfg scale {} must be >= 0",
                self.cfg_scale
            )));
        }
        self.guidance_interval.validate("guidance interval")?;
        self.group_window.validate("group window")?;
        if let Some((a, b)) = self.group_layers {
            if a > b {
                return Err(Error::InvalidArgument(format!(
                    "layer window {a}..{b} is reversed"
                )));
            }
        }
        if let Some(s) = &self.member_seeds {
            if s.len() != self.group_size {
                return Err(Error::InvalidArgument(format!(
                    "{} member seeds for a group of {}",
                    s.len(),
                    self.group_size
                )));
            }
        }
        if let Some(&bad) = self.snapshot_steps.iter().find(|&&k| k >= self.steps) {
            return Err(Error::InvalidArgument(format!(
                "snapshot step {bad} >= {}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn member_seed(&self, i: usize) -> u64 {
        match &self.member_seeds {
            Some(s) => s[i],
            None => rng::derive_seed(self.seed, &[tag::SAMPLER, i as u64]),
        }
    }

    /// The plan's own group: every member labelled `class_label`.
    pub fn request(&self) -> GroupRequest {
        GroupRequest {
            labels: vec![self.class_label; self.group_size],
            member_seeds: (0..self.group_size).map(|i| self.member_seed(i)).collect(),
        }
    }
}

/// One group to generate: member labels and noise seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRequest {
    pub labels: Vec<usize>,
    pub member_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    /// `[N, H, W, Ch]` pixels in `[0, 1]`.
    pub images: Tensor,
    /// Unconditional-branch block sums, one record per step and layer, for
    /// steps where group attention was on.
    pub block_sums: Vec<AttentionBlockSums>,
    /// `(step, x_t)` in model space for each requested snapshot step.
    pub snapshots: Vec<(usize, Tensor)>,
    /// Schedule timestep of each sampling step.
    pub timesteps: Vec<usize>,
}

/// `e_c + s * (e_c - e_u)`; `s = 0` returns `e_c` unchanged.
pub fn cfg_combine(e_c: &[f64], e_u: &[f64], s: f64) -> Result<Vec<f64>> {
    if e_c.len() != e_u.len() {
        return Err(Error::Dimension(format!(
            "guidance branches differ in length: {} vs {}",
            e_c.len(),
            e_u.len()
        )));
    }
    if s == 0.0 {
        return Ok(e_c.to_vec());
    }
    Ok(e_c.iter().zip(e_u).map(|(c, u)| c + s * (c - u)).collect())
}

/// `steps` schedule indices from `T - 1` down to `0`, evenly spaced.
pub fn respaced_timesteps(timesteps: usize, steps: usize) -> Vec<usize> {
    if steps <= 1 {
        return vec![timesteps - 1];
    }
    (0..steps)
        .map(|k| {
            let frac = k as f64 / (steps - 1) as f64;
            ((timesteps - 1) as f64 * (1.0 - frac)).round() as usize
        })
        .collect()
}

/// Per-step switches derived from a plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControl {
    pub group_on: bool,
    pub scale: f64,
}

pub fn step_control(plan: &SamplerPlan, k: usize) -> StepControl {
    let tau = k as f64 / plan.steps as f64;
    StepControl {
        group_on: plan.mode != Mode::Baseline && plan.group_window.contains(tau),
        scale: if plan.guidance_interval.contains(tau) {
            plan.cfg_scale
        } else {
            0.0
        },
    }
}

fn layer_flags(plan: &SamplerPlan, depth: usize) -> Option<Vec<bool>> {
    plan.group_layers
        .map(|(a, b)| (0..depth).map(|d| d >= a && d < b).collect())
}

/// Guided noise predictions for a packed batch of groups at one step.
///
/// `x` is `[sum N, H, W, Ch]` with groups consecutive; `sizes` gives each
/// group's size. Returns the guided scores and, when `capture` is set, the
/// unconditional-branch block sums per group.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn predict_scores(
    x: &Tensor,
    timestep: usize,
    labels: &[usize],
    sizes: &[usize],
    mode: Mode,
    control: StepControl,
    group_layers: Option<&[bool]>,
    capture: bool,
    denoiser: &Denoiser,
) -> Result<(Vec<f64>, Vec<Vec<(usize, Vec<f64>)>>)> {
    let n = x.shape()[0];
    if sizes.contains(&0) || sizes.iter().sum::<usize>() != n || n == 0 {
        return Err(Error::InvalidArgument(
            "groups must be non-empty and cover the batch".into(),
        ));
    }
    let (cond_joint, uncond_joint) = match mode {
        Mode::Baseline => (false, false),
        Mode::GroupdiffF => (control.group_on, control.group_on),
        Mode::GroupdiffL => (false, control.group_on),
    };
    let capture = capture && uncond_joint;
    let need_uncond = control.scale != 0.0 || capture;
    let null = denoiser.config().null_label();

    let mut segments: Vec<Segment> = sizes
        .iter()
        .map(|&s| Segment {
            images: s,
            joint: cond_joint,
            capture: false,
        })
        .collect();
    let mut all_labels = labels.to_vec();
    let input;
    let xin = if need_uncond {
        segments.extend(sizes.iter().map(|&s| Segment {
            images: s,
            joint: uncond_joint,
            capture,
        }));
        all_labels.extend(std::iter::repeat_n(null, n));
        let mut shape = x.shape().to_vec();
        shape[0] *= 2;
        input = Tensor::new(shape, [x.data(), x.data()].concat())?;
        &input
    } else {
        x
    };
    let ts = vec![timestep; xin.shape()[0]];
    let out = denoiser.forward(
        &ForwardBatch {
            x: xin,
            timesteps: &ts,
            labels: &all_labels,
            segments: &segments,
        },
        &ForwardOptions {
            group_layers: group_layers.map(|g| g.to_vec()),
            capture: AttnCaptureSpec {
                enabled: capture,
                layers: None,
            },
            feature_layer: None,
        },
    )?;
    let half = x.len();
    let e = out.eps.data();
    let guided = if need_uncond {
        cfg_combine(&e[..half], &e[half..], control.scale)?
    } else {
        e.to_vec()
    };
    let mut caps = vec![Vec::new(); sizes.len()];
    for c in out.captures {
        caps[c.segment - sizes.len()].push((c.layer, c.matrix));
    }
    Ok((guided, caps))
}

/// Generates the plan's own group.
pub fn generate(
    plan: &SamplerPlan,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
) -> Result<SampleTrace> {
    let mut traces = generate_groups(plan, &[plan.request()], denoiser, schedule)?;
    Ok(traces.remove(0))
}

/// Generates several groups in lockstep, packing them into one forward
/// pass per step. Each group's trace is identical to generating it alone.
pub fn generate_groups(
    plan: &SamplerPlan,
    requests: &[GroupRequest],
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Vec<SampleTrace>> {
    plan.validate(schedule.len())?;
    let cfg = denoiser.config().clone();
    for r in requests {
        if r.labels.len() != r.member_seeds.len() || r.labels.is_empty() {
            return Err(Error::InvalidArgument(
                "group request needs one seed per label".into(),
            ));
        }
        if r.labels.len() > cfg.max_group {
            return Err(Error::InvalidArgument(format!(
                "group of {} exceeds {} sample slots",
                r.labels.len(),
                cfg.max_group
            )));
        }
        if let Some(&bad) = r.labels.iter().find(|&&c| c > cfg.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {}]",
                cfg.num_classes
            )));
        }
    }
    let sizes: Vec<usize> = requests.iter().map(|r| r.labels.len()).collect();
    let labels: Vec<usize> = requests
        .iter()
        .flat_map(|r| r.labels.iter().copied())
        .collect();
    let n = labels.len();
    let per = cfg.image_len();
    let mut rngs: Vec<rng::Rng> = requests
        .iter()
        .flat_map(|r| {
            r.member_seeds
                .iter()
                .map(|&s| rng::rng_from(s, &[tag::NOISE]))
        })
        .collect();
    let mut x: Vec<f64> = rngs
        .iter_mut()
        .flat_map(|r| rng::normal_vec(r, per))
        .collect();
    let shape = vec![n, cfg.image_size, cfg.image_size, cfg.channels];
    let layers = layer_flags(plan, cfg.depth);
    let ts = respaced_timesteps(schedule.len(), plan.steps);

    let mut block_sums: Vec<Vec<AttentionBlockSums>> = vec![Vec::new(); requests.len()];
    let mut snapshots: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); requests.len()];

    for (k, &t) in ts.iter().enumerate() {
        let xt = Tensor::new(shape.clone(), x)?;
        if plan.snapshot_steps.contains(&k) {
            let mut off = 0;
            for (g, &s) in sizes.iter().enumerate() {
                let mut sh = shape.clone();
                sh[0] = s;
                snapshots[g].push((
                    k,
                    Tensor::new(sh, xt.data()[off * per..(off + s) * per].to_vec())?,
                ));
                off += s;
            }
        }
        let control = step_control(plan, k);
        let (eps, caps) = predict_scores(
            &xt,
            t,
            &labels,
            &sizes,
            plan.mode,
            control,
            layers.as_deref(),
            plan.capture_attention,
            denoiser,
        )
        .map_err(|e| match e {
            Error::Numeric(_) => Error::SamplingDiverged { step: k },
            other => other,
        })?;
        for (g, list) in caps.into_iter().enumerate() {
            block_sums[g].extend(list.into_iter().map(|(layer, matrix)| AttentionBlockSums {
                step: k,
                layer,
                n: sizes[g],
                matrix,
            }));
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = if k + 1 < ts.len() {
            schedule.alpha_bar(ts[k + 1])
        } else {
            1.0
        };
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut next = xt.into_data();
        for (i, r) in rngs.iter_mut().enumerate() {
            let noise = if var > 0.0 {
                rng::normal_vec(r, per)
            } else {
                Vec::new()
            };
            let xs = &mut next[i * per..(i + 1) * per];
            for (j, v) in xs.iter_mut().enumerate() {
                let e = eps[i * per + j];
                let mut x0 = (*v - sb * e) / sa;
                if plan.clip_x0 {
                    x0 = x0.clamp(-1.0, 1.0);
                }
                *v = c0 * x0 + ct * *v;
                if var > 0.0 {
                    *v += var.sqrt() * noise[j];
                }
            }
            if xs.iter().any(|v| !v.is_finite()) {
                return Err(Error::SamplingDiverged { step: k });
            }
        }
        x = next;
    }

    let mut out = Vec::with_capacity(requests.len());
    let mut off = 0;
    for (g, &s) in sizes.iter().enumerate() {
        let pixels: Vec<f64> = x[off * per..(off + s) * per]
            .iter()
            .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect();
        let mut sh = shape.clone();
        sh[0] = s;
        out.push(SampleTrace {
            images: Tensor::new(sh, pixels)?,
            block_sums: std::mem::take(&mut block_sums[g]),
            snapshots: std::mem::take(&mut snapshots[g]),
            timesteps: ts.clone(),
        });
        off += s;
    }
    Ok(out)
}

pub const TRACE_MAGIC: &[u8; 4] = b"GDT1";

impl SampleTrace {
    /// `GDT1` layout: magic, `u32 N, u32 H, u32 W, u32 Ch`, `u32 steps` and
    /// the step timesteps, the image pixels, `u32` record count and records
    /// `(u32 step, u32 layer, u32 n, n*n f64)`, then `u32` snapshot count and
    /// snapshots `(u32 step, N*H*W*Ch f64)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.images.shape();
        let mut out = Vec::new();
        out.extend_from_slice(TRACE_MAGIC);
        for &d in s {
            out.put_u32(d as u32);
        }
        out.put_u32(self.timesteps.len() as u32);
        for &t in &self.timesteps {
            out.put_u32(t as u32);
        }
        out.put_f64s(self.images.data());
        out.put_u32(self.block_sums.len() as u32);
        for r in &self.block_sums {
            out.put_u32(r.step as u32);
            out.put_u32(r.layer as u32);
            out.put_u32(r.n as u32);
            out.put_f64s(&r.matrix);
        }
        out.put_u32(self.snapshots.len() as u32);
        for (k, t) in &self.snapshots {
            out.put_u32(*k as u32);
            out.put_f64s(t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        r.magic(TRACE_MAGIC)?;
        let shape: Vec<usize> = (0..4)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let steps = r.u32()? as usize;
        let timesteps = (0..steps)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let len = shape.iter().product();
        let images = Tensor::new(shape.clone(), r.f64s(len)?)?;
        let records = r.u32()? as usize;
        let mut block_sums = Vec::with_capacity(records);
        for _ in 0..records {
            let step = r.u32()? as usize;
            let layer = r.u32()? as usize;
            let n = r.u32()? as usize;
            block_sums.push(AttentionBlockSums {
                step,
                layer,
                n,
                matrix: r.f64s(n * n)?,
            });
        }
        let snaps = r.u32()? as usize;
        let mut snapshots = Vec::with_capacity(snaps);
        for _ in 0..snaps {
            let k = r.u32()? as usize;
            snapshots.push((k, Tensor::new(shape.clone(), r.f64s(len)?)?));
        }
        r.finish()?;
        Ok(SampleTrace {
            images,
            block_sums,
            snapshots,
            timesteps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
