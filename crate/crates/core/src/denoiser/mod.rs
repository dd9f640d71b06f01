//! Patch transformer denoiser whose attention can span a whole group.
//!
//! Conditioning follows the adaLN-zero recipe: a timestep embedding plus a
//! class embedding (with one extra null row) modulates every block through
//! zero-initialized shift, scale and gate projections, so a fresh model
//! predicts zero noise.
//!
//! A forward pass takes a packed batch of images split into contiguous
//! [`Segment`]s. Each segment is one group; when it is `joint` (and the layer
//! is inside the layer window) its members attend over all of their tokens
//! together, otherwise each member attends only to itself.

pub mod embed;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::attention::{AttnBlock, BlockLayout};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, Tensor, Var};

pub use embed::{add_sample_embedding, group_attention, patchify, unpatchify};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Real classes; the null label is `num_classes`.
    pub num_classes: usize,
    /// Number of learned sample slots, the largest supported group.
    pub max_group: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            hidden: 64,
            heads: 4,
            patch: 4,
            image_size: 16,
            channels: 3,
            num_classes: 8,
            max_group: 16,
            time_embed_dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("depth, hidden, heads and mlp_ratio must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if !self.hidden.is_multiple_of(4) {
            return bad(format!(
                "hidden {} must be a multiple of 4 for 2-D positions",
                self.hidden
            ));
        }
        if self.patch == 0
            || !self.image_size.is_multiple_of(self.patch)
            || self.image_size / self.patch < 2
        {
            return bad(format!(
                "image size {} must split into at least 2x2 patches of {}",
                self.image_size, self.patch
            ));
        }
        if self.channels == 0 || self.num_classes == 0 || self.max_group == 0 {
            return bad("channels, num_classes and max_group must be positive".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be even and >= 2".into());
        }
        Ok(())
    }

    /// Patches per image.
    pub fn tokens_per_image(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// One group inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub images: usize,
    /// Members attend across the whole segment.
    pub joint: bool,
    /// Record block sums for this segment.
    pub capture: bool,
}

impl Segment {
    pub fn isolated(images: usize) -> Self {
        Segment {
            images,
            joint: false,
            capture: false,
        }
    }

    pub fn joint(images: usize) -> Self {
        Segment {
            images,
            joint: true,
            capture: false,
        }
    }
}

/// Packed denoiser input. Members of segment `s` occupy consecutive images
/// and take sample slots `0..images`.
#[derive(Clone, Debug)]
pub struct ForwardBatch<'a> {
    /// `[n, H, W, Ch]` noisy images.
    pub x: &'a Tensor,
    pub timesteps: &'a [usize],
    pub labels: &'a [usize],
    pub segments: &'a [Segment],
}

/// Which layers record attention block sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnCaptureSpec {
    pub enabled: bool,
    /// `None` means every layer.
    pub layers: Option<Vec<usize>>,
}

impl AttnCaptureSpec {
    pub fn all_layers() -> Self {
        AttnCaptureSpec {
            enabled: true,
            layers: None,
        }
    }

    fn wants(&self, layer: usize) -> bool {
        self.enabled && self.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Per-layer switch for joint attention; `None` allows every layer.
    pub group_layers: Option<Vec<bool>>,
    pub capture: AttnCaptureSpec,
    /// Return mean-pooled token activations after this block.
    pub feature_layer: Option<usize>,
}

/// Block sums of one segment at one layer. `matrix` is `images x images`,
/// averaged over heads and query tokens; isolated layers give the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentCapture {
    pub layer: usize,
    pub segment: usize,
    pub images: usize,
    pub matrix: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[n, H, W, Ch]` predicted noise.
    pub eps: Tensor,
    pub captures: Vec<SegmentCapture>,
    /// `[n, C]` when a feature layer was requested.
    pub features: Option<Tensor>,
}

const GLOBAL_PARAMS: usize = 8;
const BLOCK_PARAMS: usize = 10;

// global parameter slots
const PATCH_W: usize = 0;
const PATCH_B: usize = 1;
const SLOTS: usize = 2;
const T_W1: usize = 3;
const T_B1: usize = 4;
const T_W2: usize = 5;
const T_B2: usize = 6;
const CLASSES: usize = 7;

// per-block offsets
const MOD_W: usize = 0;
const MOD_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const PROJ_W: usize = 4;
const PROJ_B: usize = 5;
const FC1_W: usize = 6;
const FC1_B: usize = 7;
const FC2_W: usize = 8;
const FC2_B: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: ModelConfig,
    params: Vec<Tensor>,
    pos_embed: Tensor,
}

fn xavier(rng: &mut rng::Rng, fan_in: usize, fan_out: usize) -> Tensor {
    use rand::Rng as _;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-a..a))
}

fn normal(rng: &mut rng::Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let v = rng::normal_vec(rng, n)
        .into_iter()
        .map(|x| x * std)
        .collect();
    Tensor::new(shape.to_vec(), v).expect("shape")
}

impl Denoiser {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_from(seed, &[tag::INIT]);
        let c = config.hidden;
        let hidden_mlp = c * config.mlp_ratio;
        let mut params = vec![
            xavier(&mut rng, config.patch_dim(), c),
            Tensor::zeros(&[c]),
            normal(&mut rng, &[config.max_group, c], 0.02),
            normal(&mut rng, &[config.time_embed_dim, c], 0.02),
            Tensor::zeros(&[c]),
            normal(&mut rng, &[c, c], 0.02),
            Tensor::zeros(&[c]),
            normal(&mut rng, &[config.num_classes + 1, c], 0.02),
        ];
        for _ in 0..config.depth {
            params.extend([
                Tensor::zeros(&[c, 6 * c]),
                Tensor::zeros(&[6 * c]),
                xavier(&mut rng, c, 3 * c),
                Tensor::zeros(&[3 * c]),
                xavier(&mut rng, c, c),
                Tensor::zeros(&[c]),
                xavier(&mut rng, c, hidden_mlp),
                Tensor::zeros(&[hidden_mlp]),
                xavier(&mut rng, hidden_mlp, c),
                Tensor::zeros(&[c]),
            ]);
        }
        params.extend([
            Tensor::zeros(&[c, 2 * c]),
            Tensor::zeros(&[2 * c]),
            Tensor::zeros(&[c, config.patch_dim()]),
            Tensor::zeros(&[config.patch_dim()]),
        ]);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let want = Self::param_shapes(&config);
        if params.len() != want.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                params.len()
            )));
        }
        for ((p, w), name) in params.iter().zip(&want).zip(Self::param_names(&config)) {
            if p.shape() != w.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: shape {:?}, expected {w:?}",
                    p.shape()
                )));
            }
        }
        let side = config.image_size / config.patch;
        let pos_embed = embed::sincos_2d(side, config.hidden);
        Ok(Denoiser {
            config,
            params,
            pos_embed,
        })
    }

    fn param_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let c = cfg.hidden;
        let m = c * cfg.mlp_ratio;
        let mut s = vec![
            vec![cfg.patch_dim(), c],
            vec![c],
            vec![cfg.max_group, c],
            vec![cfg.time_embed_dim, c],
            vec![c],
            vec![c, c],
            vec![c],
            vec![cfg.num_classes + 1, c],
        ];
        for _ in 0..cfg.depth {
            s.extend([
                vec![c, 6 * c],
                vec![6 * c],
                vec![c, 3 * c],
                vec![3 * c],
                vec![c, c],
                vec![c],
                vec![c, m],
                vec![m],
                vec![m, c],
                vec![c],
            ]);
        }
        s.extend([
            vec![c, 2 * c],
            vec![2 * c],
            vec![c, cfg.patch_dim()],
            vec![cfg.patch_dim()],
        ]);
        s
    }

    pub fn param_names(cfg: &ModelConfig) -> Vec<String> {
        let mut names: Vec<String> = [
            "patch.w", "patch.b", "slots", "time.w1", "time.b1", "time.w2", "time.b2", "classes",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for d in 0..cfg.depth {
            for p in [
                "mod.w", "mod.b", "qkv.w", "qkv.b", "proj.w", "proj.b", "fc1.w", "fc1.b", "fc2.w",
                "fc2.b",
            ] {
                names.push(format!("blocks.{d}.{p}"));
            }
        }
        names.extend(
            ["final.mod.w", "final.mod.b", "out.w", "out.b"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn slot_table(&self) -> &Tensor {
        &self.params[SLOTS]
    }

    /// True while the output head is still exactly zero, i.e. the model has
    /// never taken an optimizer step that moved it.
    pub fn is_untrained(&self) -> bool {
        let n = self.params.len();
        self.params[n - 2].data().iter().all(|&v| v == 0.0)
            && self.params[n - 1].data().iter().all(|&v| v == 0.0)
    }

    /// Adds Gaussian noise of standard deviation `std` to every parameter.
    /// Gives an untrained model nontrivial outputs for tests and benchmarks.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = rng::rng_from(seed, &[tag::INIT, 1]);
        for p in &mut self.params {
            let noise = rng::normal_vec(&mut rng, p.len());
            p.data_mut()
                .iter_mut()
                .zip(noise)
                .for_each(|(v, z)| *v += std * z);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_batch(&self, b: &ForwardBatch) -> Result<usize> {
        let cfg = &self.config;
        b.x.require_rank(4, "denoiser input")?;
        let n = b.x.shape()[0];
        if b.x.shape()[1..] != [cfg.image_size, cfg.image_size, cfg.channels] {
            return Err(Error::Dimension(format!(
                "input {:?} does not match {}x{}x{} images",
                b.x.shape(),
                cfg.image_size,
                cfg.image_size,
                cfg.channels
            )));
        }
        if b.timesteps.len() != n || b.labels.len() != n {
            return Err(Error::Dimension(format!(
                "{n} images with {} timesteps and {} labels",
                b.timesteps.len(),
                b.labels.len()
            )));
        }
        if let Some(&bad) = b.labels.iter().find(|&&c| c > cfg.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {}]",
                cfg.num_classes
            )));
        }
        let total: usize = b.segments.iter().map(|s| s.images).sum();
        if total != n || b.segments.iter().any(|s| s.images == 0) {
            return Err(Error::Dimension(format!(
                "segments cover {total} images, batch has {n}"
            )));
        }
        if let Some(s) = b.segments.iter().find(|s| s.images > cfg.max_group) {
            return Err(Error::InvalidArgument(format!(
                "group of {} exceeds {} sample slots",
                s.images, cfg.max_group
            )));
        }
        Ok(n)
    }

    fn layout_for(
        &self,
        segments: &[Segment],
        joint_layer: bool,
    ) -> (BlockLayout, Vec<Option<usize>>) {
        let mut blocks = Vec::new();
        let mut owner = Vec::new();
        let mut first = 0;
        for (si, s) in segments.iter().enumerate() {
            if s.joint && joint_layer && s.images > 1 {
                blocks.push(AttnBlock {
                    first_image: first,
                    images: s.images,
                    capture: s.capture,
                });
                owner.push(Some(si));
            } else {
                for k in 0..s.images {
                    blocks.push(AttnBlock {
                        first_image: first + k,
                        images: 1,
                        capture: false,
                    });
                    owner.push(None);
                }
            }
            first += s.images;
        }
        (
            BlockLayout {
                tokens_per_image: self.config.tokens_per_image(),
                blocks,
            },
            owner,
        )
    }

    /// Records the forward pass on `g`. `params` are the graph nodes of
    /// [`Denoiser::params`], in order. Returns the `[n*L, patch_dim]`
    /// prediction node, captures, and the pooled feature node if requested.
    pub fn build(
        &self,
        g: &mut Graph,
        params: &[Var],
        batch: &ForwardBatch,
        opts: &ForwardOptions,
    ) -> Result<(Var, Vec<SegmentCapture>, Option<Var>)> {
        let cfg = &self.config;
        let n = self.check_batch(batch)?;
        if let Some(gl) = &opts.group_layers {
            if gl.len() != cfg.depth {
                return Err(Error::Dimension(format!(
                    "{} layer flags for depth {}",
                    gl.len(),
                    cfg.depth
                )));
            }
        }
        if let Some(f) = opts.feature_layer {
            if f >= cfg.depth {
                return Err(Error::InvalidArgument(format!(
                    "feature layer {f} outside depth {}",
                    cfg.depth
                )));
            }
        }
        if let Some(ls) = &opts.capture.layers {
            if let Some(bad) = ls.iter().find(|&&l| l >= cfg.depth) {
                return Err(Error::InvalidArgument(format!(
                    "capture layer {bad} outside depth {}",
                    cfg.depth
                )));
            }
        }
        let c = cfg.hidden;
        let l = cfg.tokens_per_image();
        let p = |i: usize| params[i];
        let blk = |d: usize, k: usize| params[GLOBAL_PARAMS + d * BLOCK_PARAMS + k];
        let fin = GLOBAL_PARAMS + cfg.depth * BLOCK_PARAMS;

        // tokens
        let patches = patchify(batch.x, cfg.patch)?.reshape(&[n * l, cfg.patch_dim()])?;
        let x_in = g.constant(patches)?;
        let mut h = g.linear(x_in, p(PATCH_W), p(PATCH_B))?;
        let pos = Tensor::new(vec![n * l, c], self.pos_embed.data().repeat(n))?;
        let pos = g.constant(pos)?;
        h = g.add(h, pos)?;
        let slot_ids: Vec<usize> = batch.segments.iter().flat_map(|s| 0..s.images).collect();
        let slots = g.gather(p(SLOTS), &slot_ids)?;
        let slots = g.repeat_rows(slots, l)?;
        h = g.add(h, slots)?;

        // conditioning, one row per image
        let temb = g.constant(embed::timestep_embedding(
            batch.timesteps,
            cfg.time_embed_dim,
        ))?;
        let t1 = g.linear(temb, p(T_W1), p(T_B1))?;
        let t1 = g.silu(t1)?;
        let t2 = g.linear(t1, p(T_W2), p(T_B2))?;
        let cls = g.gather(p(CLASSES), batch.labels)?;
        let cond = g.add(t2, cls)?;
        let cond = g.silu(cond)?;

        let mut captures = Vec::new();
        let mut features = None;
        for d in 0..cfg.depth {
            let joint_layer = opts.group_layers.as_ref().is_none_or(|gl| gl[d]);
            let capture = opts.capture.wants(d);
            let (layout, owner) = self.layout_for(batch.segments, joint_layer);

            let m = g.linear(cond, blk(d, MOD_W), blk(d, MOD_B))?;
            let m = g.repeat_rows(m, l)?;
            let chunk = |g: &mut Graph, k: usize| g.slice_cols(m, k * c, c);
            let (shift1, scale1, gate1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
            let (shift2, scale2, gate2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

            let a = modulate(g, h, shift1, scale1)?;
            let qkv = g.linear(a, blk(d, QKV_W), blk(d, QKV_B))?;
            let a = g.attention(qkv, cfg.heads, &layout, capture.then_some(d))?;
            let a = g.linear(a, blk(d, PROJ_W), blk(d, PROJ_B))?;
            let a = g.mul(gate1, a)?;
            h = g.add(h, a)?;

            let f = modulate(g, h, shift2, scale2)?;
            let f = g.linear(f, blk(d, FC1_W), blk(d, FC1_B))?;
            let f = g.gelu(f)?;
            let f = g.linear(f, blk(d, FC2_W), blk(d, FC2_B))?;
            let f = g.mul(gate2, f)?;
            h = g.add(h, f)?;

            if capture {
                let mut recorded = g.take_captures();
                for (si, s) in batch.segments.iter().enumerate() {
                    if !s.capture {
                        continue;
                    }
                    let found = recorded
                        .iter()
                        .position(|tc| owner[tc.capture.block] == Some(si));
                    let matrix = match found {
                        Some(pos) => recorded.swap_remove(pos).capture.matrix,
                        None => identity(s.images),
                    };
                    captures.push(SegmentCapture {
                        layer: d,
                        segment: si,
                        images: s.images,
                        matrix,
                    });
                }
            }
            if opts.feature_layer == Some(d) {
                features = Some(mean_pool(g, h, n, l)?);
            }
        }

        let m = g.linear(cond, p(fin), p(fin + 1))?;
        let m = g.repeat_rows(m, l)?;
        let shift = g.slice_cols(m, 0, c)?;
        let scale = g.slice_cols(m, c, c)?;
        let out = modulate(g, h, shift, scale)?;
        let out = g.linear(out, p(fin + 2), p(fin + 3))?;
        Ok((out, captures, features))
    }

    /// Inference forward pass.
    pub fn forward(&self, batch: &ForwardBatch, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mut g = Graph::no_grad();
        let vars = self
            .params
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let (out, captures, feats) = self.build(&mut g, &vars, batch, opts)?;
        let n = batch.x.shape()[0];
        let cfg = &self.config;
        let patches =
            g.value(out)
                .clone()
                .reshape(&[n, cfg.tokens_per_image(), cfg.patch_dim()])?;
        Ok(ForwardOutput {
            eps: unpatchify(&patches, cfg.patch, cfg.image_size, cfg.channels)?,
            captures,
            features: feats.map(|f| g.value(f).clone()),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint {
            meta,
            tensors: Self::param_names(&self.config)
                .into_iter()
                .zip(self.params.iter().cloned())
                .collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = toml::from_str(&ck.meta)
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let names = Self::param_names(&config);
        if ck.tensors.len() != names.len()
            || ck.tensors.iter().zip(&names).any(|((a, _), b)| a != b)
        {
            return Err(Error::Config(
                "checkpoint tensors do not match the model layout".into(),
            ));
        }
        Self::from_params(config, ck.tensors.iter().map(|(_, t)| t.clone()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let s = g.add_scalar(scale, 1.0)?;
    let y = g.mul(n, s)?;
    g.add(y, shift)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Mean over each image's `l` token rows: `[n*l, C]` to `[n, C]`, as a
/// constant (features are never differentiated).
fn mean_pool(g: &mut Graph, h: Var, n: usize, l: usize) -> Result<Var> {
    let t = g.value(h);
    let c = t.row_len();
    let mut out = vec![0.0; n * c];
    for (i, img) in t.data().chunks(l * c).enumerate() {
        for tok in img.chunks(c) {
            out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(tok)
                .for_each(|(o, v)| *o += v / l as f64);
        }
    }
    g.constant(Tensor::new(vec![n, c], out)?)
}
