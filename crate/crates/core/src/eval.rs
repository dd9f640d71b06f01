//! Generation-quality proxy, linear probes on denoiser features, and the
//! guidance-scale sweep.
//!
//! The quality proxy is a Fréchet distance between Gaussians fitted to toy
//! encoder features of generated and reference images.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::data::{self, Dataset, FEATURE_DIM};
use crate::denoiser::{Denoiser, ForwardBatch, ForwardOptions, Segment};
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::csv_io;
use crate::par;
use crate::rng::{self, tag};
use crate::sampler::{self, GroupRequest, SamplerPlan};
use crate::tensor::Tensor;

/// Eigenvalues above `-PSD_TOL` count as zero.
pub const PSD_TOL: f64 = 1e-8;

/// Gaussian summary of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGaussian {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureGaussian {
    /// Checks symmetry and positive semi-definiteness.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::Dimension(format!(
                "mean of {d} with covariance of {}",
                cov.len()
            )));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian statistics".into()));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[i * d + j], cov[j * d + i]);
                if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let g = FeatureGaussian { mean, cov, count };
        let min = g.matrix().symmetric_eigenvalues().min();
        if min < -PSD_TOL {
            return Err(Error::InvalidArgument(format!(
                "covariance has eigenvalue {min:e}"
            )));
        }
        Ok(g)
    }

    /// Sample mean and unbiased covariance of the rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 samples, got {n}"
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("feature rows differ in length".into()));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..=i {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        FeatureGaussian::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Square root of a symmetric PSD matrix with tolerance clamping.
fn sqrtm_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new(m);
    let mut vals = e.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOL {
            return Err(Error::Numeric(format!(
                "matrix square root of eigenvalue {v:e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

/// Squared Fréchet distance `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The cross term equals the sum of singular values of `S_a^(1/2) S_b^(1/2)`,
/// which avoids square-rooting the tiny eigenvalues of a matrix product.
pub fn frechet_distance(a: &FeatureGaussian, b: &FeatureGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "feature dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = a.matrix();
    let sb = b.matrix();
    let (ta, tb) = (sa.trace(), sb.trace());
    let cross: f64 = (sqrtm_psd(sa)? * sqrtm_psd(sb)?).singular_values().sum();
    let d = mean_term + ta + tb - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Splits `[N, H, W, Ch]` into per-image tensors.
pub fn split_images(batch: &Tensor) -> Result<Vec<Tensor>> {
    batch.require_rank(4, "image batch")?;
    let s = batch.shape();
    let per = s[1] * s[2] * s[3];
    batch
        .data()
        .chunks(per)
        .map(|c| Tensor::new(s[1..].to_vec(), c.to_vec()))
        .collect()
}

pub fn encode_all(images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    par::map_indexed(images.len(), |i| data::encode_pixels(&images[i]))
        .into_iter()
        .collect()
}

/// Fréchet distance between encoder-feature Gaussians of two image sets.
/// Both sets need more images than the feature dimension.
pub fn fid_proxy(generated: &[Tensor], reference: &[Tensor]) -> Result<f64> {
    let min = FEATURE_DIM + 1;
    if generated.len() < min || reference.len() < min {
        return Err(Error::InvalidArgument(format!(
            "fid proxy needs at least {min} images per set, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    let a = FeatureGaussian::fit(&encode_all(generated)?)?;
    let b = FeatureGaussian::fit(&encode_all(reference)?)?;
    frechet_distance(&a, &b)
}

pub fn dataset_pixels(dataset: &Dataset) -> Vec<Tensor> {
    dataset.images.iter().map(|im| im.pixels.clone()).collect()
}

/// Generates `groups` groups with the plan's settings, cycling the class
/// label over `0..num_classes`, and returns every member image. Group `g`
/// takes its noise seeds from `derive_seed(plan.seed, [g, i])`.
pub fn generate_eval_set(
    plan: &SamplerPlan,
    groups: usize,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    const GROUPS_PER_CALL: usize = 16;
    let k = denoiser.config().num_classes;
    let requests: Vec<GroupRequest> = (0..groups)
        .map(|g| GroupRequest {
            labels: vec![g % k; plan.group_size],
            member_seeds: (0..plan.group_size)
                .map(|i| rng::derive_seed(plan.seed, &[g as u64, i as u64]))
                .collect(),
        })
        .collect();
    let plan = SamplerPlan {
        capture_attention: false,
        snapshot_steps: Vec::new(),
        ..plan.clone()
    };
    let mut out = Vec::with_capacity(groups * plan.group_size);
    for chunk in requests.chunks(GROUPS_PER_CALL) {
        for trace in sampler::generate_groups(&plan, chunk, denoiser, schedule)? {
            out.extend(split_images(&trace.images)?);
        }
    }
    Ok(out)
}

/// Multinomial ridge regression onto one-hot targets, with standardized
/// inputs and an unpenalized bias.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(dim + 1) x classes`, bias row last.
    weights: DMatrix<f64>,
}

impl RidgeClassifier {
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
        lambda: f64,
    ) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::Dimension(format!(
                "{n} feature rows vs {} labels",
                labels.len()
            )));
        }
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ridge penalty {lambda} < 0"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        let d = features[0].len();
        let mut mean = vec![0.0; d];
        for r in features {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for r in features {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let scale: Vec<f64> = scale
            .iter()
            .map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let mut clf = RidgeClassifier {
            mean,
            scale,
            weights: DMatrix::zeros(d + 1, classes),
        };
        let x = DMatrix::from_fn(n, d + 1, |i, j| clf.input(&features[i], j));
        let y = DMatrix::from_fn(n, classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        let mut gram = x.transpose() * &x;
        for j in 0..d {
            gram[(j, j)] += lambda;
        }
        // a tiny jitter keeps the bias block invertible when lambda is 0
        for j in 0..=d {
            gram[(j, j)] += 1e-10;
        }
        let rhs = x.transpose() * y;
        clf.weights = gram
            .cholesky()
            .ok_or_else(|| {
                Error::Numeric("ridge normal equations are not positive definite".into())
            })?
            .solve(&rhs);
        Ok(clf)
    }

    fn input(&self, row: &[f64], j: usize) -> f64 {
        if j == self.mean.len() {
            1.0
        } else {
            (row[j] - self.mean[j]) * self.scale[j]
        }
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let d = self.mean.len();
        let x = DVector::from_fn(d + 1, |j, _| self.input(row, j));
        let scores = self.weights.transpose() * x;
        scores.argmax().0
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &c)| self.predict(f) == c)
            .count();
        hits as f64 / features.len() as f64
    }
}

pub const PROBE_RIDGE: f64 = 1.0;
pub const PROBE_TRAIN_FRACTION: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub layer: usize,
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Shuffles with `seed`, fits a ridge classifier on the first 70% and
/// reports accuracy on the rest.
pub fn probe_accuracy(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    seed: u64,
) -> Result<(f64, usize, usize)> {
    let n = features.len();
    if n != labels.len() {
        return Err(Error::Dimension(format!(
            "{n} feature rows vs {} labels",
            labels.len()
        )));
    }
    if labels.iter().all(|&c| Some(&c) == labels.first()) {
        return Err(Error::InvalidArgument(
            "probe needs at least two classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_from(seed, &[tag::SPLIT]));
    let n_train = ((n as f64 * PROBE_TRAIN_FRACTION).round() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            idx.iter().map(|&i| features[i].clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (xtr, ytr) = pick(&order[..n_train]);
    let (xte, yte) = pick(&order[n_train..]);
    let clf = RidgeClassifier::fit(&xtr, &ytr, classes, PROBE_RIDGE)?;
    Ok((clf.accuracy(&xte, &yte), n_train, n - n_train))
}

/// Mean-pooled activations after block `layer` for every dataset image,
/// noised to the middle of the schedule and labelled with the null class.
pub fn denoiser_features(
    denoiser: &Denoiser,
    layer: usize,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    const BATCH: usize = 64;
    let cfg = denoiser.config();
    if dataset.image_size != cfg.image_size {
        return Err(Error::Dimension(format!(
            "dataset images are {} px, model expects {}",
            dataset.image_size, cfg.image_size
        )));
    }
    let t = schedule.len() / 2;
    let ab = schedule.alpha_bar(t);
    let per = cfg.image_len();
    let chunks: Vec<&[data::ToyImage]> = dataset.images.chunks(BATCH).collect();
    let parts = par::map_indexed(chunks.len(), |ci| -> Result<Vec<Vec<f64>>> {
        let imgs = chunks[ci];
        let mut x = Vec::with_capacity(imgs.len() * per);
        for im in imgs {
            let x0: Vec<f64> = im.pixels.data().iter().map(|p| 2.0 * p - 1.0).collect();
            let eps = rng::normal_vec(&mut rng::rng_from(seed, &[tag::PROBE, im.id]), per);
            x.extend(diffusion::mix(&x0, &eps, ab));
        }
        let n = imgs.len();
        let x = Tensor::new(vec![n, cfg.image_size, cfg.image_size, cfg.channels], x)?;
        let ts = vec![t; n];
        let labels = vec![cfg.null_label(); n];
        let segments = vec![Segment::isolated(1); n];
        let out = denoiser.forward(
            &ForwardBatch {
                x: &x,
                timesteps: &ts,
                labels: &labels,
                segments: &segments,
            },
            &ForwardOptions {
                feature_layer: Some(layer),
                ..Default::default()
            },
        )?;
        let f = out.features.expect("feature layer requested");
        Ok((0..n).map(|i| f.row(i).to_vec()).collect())
    });
    let mut rows = Vec::with_capacity(dataset.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

/// Linear probe on pooled denoiser features at normalized noise time 0.5.
pub fn linear_probe(
    denoiser: &Denoiser,
    layer: usize,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ProbeResult> {
    let feats = denoiser_features(denoiser, layer, dataset, schedule, seed)?;
    let labels: Vec<usize> = dataset.images.iter().map(|im| im.class_id).collect();
    let (accuracy, train_size, test_size) =
        probe_accuracy(&feats, &labels, dataset.num_classes, seed)?;
    Ok(ProbeResult {
        layer,
        accuracy,
        train_size,
        test_size,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    /// `(scale, fid_proxy)` in grid order.
    pub rows: Vec<(f64, f64)>,
    /// Index of the lowest fid; ties keep the first.
    pub argmin: usize,
}

impl SweepTable {
    pub fn best(&self) -> (f64, f64) {
        self.rows[self.argmin]
    }
}

/// One generation and evaluation per guidance scale, with shared seeds.
pub fn cfg_sweep(
    template: &SamplerPlan,
    grid: &[f64],
    groups: usize,
    reference: &[Tensor],
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty guidance grid".into()));
    }
    let fids = par::map_indexed(grid.len(), |i| {
        let plan = SamplerPlan {
            cfg_scale: grid[i],
            ..template.clone()
        };
        plan.validate(schedule.len())?;
        fid_proxy(
            &generate_eval_set(&plan, groups, denoiser, schedule)?,
            reference,
        )
    });
    let mut rows = Vec::with_capacity(grid.len());
    for (s, f) in grid.iter().zip(fids) {
        rows.push((*s, f?));
    }
    let argmin = (0..rows.len()).fold(0, |best, i| if rows[i].1 < rows[best].1 { i } else { best });
    Ok(SweepTable { rows, argmin })
}

/// Parses `start:end:step` into an inclusive grid, or a comma list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let num = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("{v:?} is not a number")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step.is_nan() || step <= 0.0 || b < a {
            return Err(Error::InvalidArgument(format!("bad grid {s:?}")));
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        // rounded to 10 decimals so 0.1 steps print cleanly
        return Ok((0..=n)
            .map(|i| ((a + i as f64 * step) * 1e10).round() / 1e10)
            .collect());
    }
    s.split(',').map(num).collect()
}

pub fn write_sweep_csv(table: &SweepTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["s", "fid", "is_argmin"])?;
    for (i, (s, f)) in table.rows.iter().enumerate() {
        w.write_record([
            s.to_string(),
            f.to_string(),
            (i == table.argmin).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gauss(mean: &[f64], cov: &[f64]) -> FeatureGaussian {
        FeatureGaussian::new(mean.to_vec(), cov.to_vec(), 10).unwrap()
    }

    #[test]
    fn one_dimensional_closed_form() {
        let d = frechet_distance(&gauss(&[0.0], &[1.0]), &gauss(&[2.0], &[1.0])).unwrap();
        assert!((d - 4.0).abs() < 1e-9);
        // (mu1-mu2)^2 + (s1-s2)^2 with s = 1, 3
        let d = frechet_distance(&gauss(&[1.0], &[1.0]), &gauss(&[0.0], &[9.0])).unwrap();
        assert!((d - 5.0).abs() < 1e-9);
    }

    #[test]
    fn commuting_diagonal_closed_form() {
        let a = gauss(&[0.0, 0.0], &[1.0, 0.0, 0.0, 4.0]);
        let b = gauss(&[0.0, 0.0], &[4.0, 0.0, 0.0, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_psd_and_asymmetric() {
        assert!(FeatureGaussian::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0], 3).is_err());
        assert!(FeatureGaussian::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0], 3).is_err());
        assert!(FeatureGaussian::new(vec![0.0], vec![-1e-9], 3).is_ok());
        assert!(FeatureGaussian::fit(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fit_matches_hand_statistics() {
        let g = FeatureGaussian::fit(&[vec![0.0, 1.0], vec![2.0, 1.0], vec![4.0, 4.0]]).unwrap();
        assert_eq!(g.mean, vec![2.0, 2.0]);
        // var x = 4, var y = 3, cov = 3
        assert_eq!(g.cov, vec![4.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn identical_sets_have_zero_proxy() {
        let ds = data::generate_dataset(&data::DatasetSpec {
            images_per_class: 8,
            ..Default::default()
        })
        .unwrap();
        let px = dataset_pixels(&ds);
        assert!(fid_proxy(&px, &px).unwrap() < 1e-8);
        assert!(fid_proxy(&px[..10], &px).is_err());
    }

    #[test]
    fn one_hot_features_are_perfectly_separable() {
        let labels: Vec<usize> = (0..60).map(|i| i % 4).collect();
        let feats: Vec<Vec<f64>> = labels
            .iter()
            .map(|&c| (0..4).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect();
        let (acc, tr, te) = probe_accuracy(&feats, &labels, 4, 0).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!((tr, te), (42, 18));
        assert!(probe_accuracy(&feats, &vec![1; 60], 4, 0).is_err());
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let k = 4;
        let n = 2000;
        let mut r = rng::rng_from(5, &[]);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| rng::normal_vec(&mut r, 6)).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(&mut r);
        let (acc, _, te) = probe_accuracy(&feats, &labels, k, 1).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / te as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn encoder_features_separate_classes() {
        let ds = data::generate_dataset(&data::DatasetSpec::default()).unwrap();
        let feats = encode_all(&dataset_pixels(&ds)).unwrap();
        let labels: Vec<usize> = ds.images.iter().map(|im| im.class_id).collect();
        let (acc, _, _) = probe_accuracy(&feats, &labels, ds.num_classes, 0).unwrap();
        assert!(acc >= 0.9, "accuracy {acc}");
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("1.0:3.0:0.1").unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[3], 1.3);
        assert_eq!(*g.last().unwrap(), 3.0);
        assert_eq!(parse_grid("1.5").unwrap(), vec![1.5]);
        assert_eq!(parse_grid("1,2.5").unwrap(), vec![1.0, 2.5]);
        assert!(parse_grid("3:1:0.1").is_err());
        assert!(parse_grid("a").is_err());
    }

    fn psd(seed: u64, d: usize) -> FeatureGaussian {
        let mut r = rng::rng_from(seed, &[]);
        let a = rng::normal_vec(&mut r, d * d);
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
            }
        }
        FeatureGaussian::new(rng::normal_vec(&mut r, d), cov, d + 1).unwrap()
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_zero_on_identity(seed in any::<u64>(), d in 1usize..6) {
            let a = psd(seed, d);
            let b = psd(seed ^ 0xABCD, d);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
            prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-9);
        }
    }
}
