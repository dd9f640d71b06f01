//! Cross-sample attention statistics.
//!
//! `B[i][j]` is the share of image `i`'s query attention that lands on image
//! `j`'s keys, averaged over the image's `L` query tokens and the heads, so
//! each row of `B` sums to one. The cross set of image `i` is
//! `{B[i][j] : j != i}`; its peakedness `S = (max - mean) / max` is the
//! cross-sample attention score.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::sampler::{self, SampleTrace, SamplerPlan};
use crate::tensor::tol;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockSums {
    pub step: usize,
    pub layer: usize,
    pub n: usize,
    /// Row-major `n x n`.
    pub matrix: Vec<f64>,
}

impl AttentionBlockSums {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    pub fn validate(&self) -> Result<()> {
        check_stochastic(&self.matrix, self.n)
    }
}

fn check_stochastic(matrix: &[f64], n: usize) -> Result<()> {
    if matrix.len() != n * n || n == 0 {
        return Err(Error::Dimension(format!(
            "{} entries for a {n}x{n} matrix",
            matrix.len()
        )));
    }
    for (i, row) in matrix.chunks(n).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (s - 1.0).abs() > tol::STOCHASTIC {
            return Err(Error::InvalidArgument(format!(
                "row {i} is not stochastic (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Normalized block sums from full attention weights.
///
/// `heads` holds one row-major `[N*L, N*L]` softmax matrix per head.
pub fn block_sums(heads: &[Vec<f64>], n: usize, l: usize) -> Result<Vec<f64>> {
    let tokens = n * l;
    if heads.is_empty() || n == 0 || l == 0 {
        return Err(Error::InvalidArgument(
            "block sums need at least one head, image and token".into(),
        ));
    }
    let mut sums = vec![0.0; n * n];
    for w in heads {
        if w.len() != tokens * tokens {
            return Err(Error::Dimension(format!(
                "attention matrix has {} entries, expected {tokens}^2",
                w.len()
            )));
        }
        for (q, row) in w.chunks(tokens).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > tol::STOCHASTIC {
                return Err(Error::InvalidArgument(format!(
                    "attention row {q} is not stochastic (sum {s})"
                )));
            }
        }
        crate::tensor::attention::accumulate_block_sums(w, n, l, &mut sums);
    }
    let norm = 1.0 / (l * heads.len()) as f64;
    sums.iter_mut().for_each(|v| *v *= norm);
    Ok(sums)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossSampleStats {
    pub p_self: f64,
    pub p_cross: Vec<f64>,
    pub p_cross_mean: f64,
    pub p_cross_max: f64,
    /// Absent for a single-image group.
    pub s_cross: Option<f64>,
}

/// Peakedness of a cross set; zero when there is no cross mass at all.
pub fn peakedness(p_cross: &[f64]) -> Option<f64> {
    if p_cross.is_empty() {
        return None;
    }
    let max = p_cross.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = p_cross.iter().sum::<f64>() / p_cross.len() as f64;
    Some(if max > 0.0 {
        ((max - mean) / max).max(0.0)
    } else {
        0.0
    })
}

/// Per-image statistics of an `n x n` block-sum matrix.
pub fn cross_stats(matrix: &[f64], n: usize) -> Result<Vec<CrossSampleStats>> {
    check_stochastic(matrix, n)?;
    Ok((0..n)
        .map(|i| {
            let row = &matrix[i * n..(i + 1) * n];
            let p_cross: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| row[j]).collect();
            let (mean, max) = if p_cross.is_empty() {
                (0.0, 0.0)
            } else {
                (
                    p_cross.iter().sum::<f64>() / p_cross.len() as f64,
                    p_cross.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                )
            };
            CrossSampleStats {
                p_self: row[i],
                s_cross: peakedness(&p_cross),
                p_cross,
                p_cross_mean: mean,
                p_cross_max: max,
            }
        })
        .collect())
}

/// Mean of several same-size block-sum matrices.
pub fn average_matrix(records: &[&AttentionBlockSums]) -> Result<(Vec<f64>, usize)> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no attention records captured".into()))?;
    let n = first.n;
    let mut acc = vec![0.0; n * n];
    for r in records {
        if r.n != n {
            return Err(Error::Dimension(format!(
                "mixed group sizes {n} and {}",
                r.n
            )));
        }
        acc.iter_mut().zip(&r.matrix).for_each(|(a, v)| *a += v);
    }
    let k = records.len() as f64;
    acc.iter_mut().for_each(|v| *v /= k);
    Ok((acc, n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average `B` over all records, then take the statistic.
    #[default]
    AverageFirst,
    /// Statistic per `(step, layer)` record, then average.
    PerRecord,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Mean over images of each image's score.
    #[default]
    Image,
    /// One score over every off-diagonal entry of the group.
    Group,
}

fn score(matrix: &[f64], n: usize, level: Level) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "cross-sample score needs at least 2 images".into(),
        ));
    }
    match level {
        Level::Image => {
            let stats = cross_stats(matrix, n)?;
            Ok(stats.iter().filter_map(|s| s.s_cross).sum::<f64>() / n as f64)
        }
        Level::Group => {
            check_stochastic(matrix, n)?;
            let off: Vec<f64> = (0..n * n)
                .filter(|k| k / n != k % n)
                .map(|k| matrix[k])
                .collect();
            Ok(peakedness(&off).unwrap_or(0.0))
        }
    }
}

/// One cross-sample attention score for a set of records (one group or many
/// groups of the same size).
pub fn aggregate_s_cross(
    records: &[AttentionBlockSums],
    order: Aggregation,
    level: Level,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "no attention records captured".into(),
        ));
    }
    match order {
        Aggregation::AverageFirst => {
            let refs: Vec<&AttentionBlockSums> = records.iter().collect();
            let (m, n) = average_matrix(&refs)?;
            score(&m, n, level)
        }
        Aggregation::PerRecord => {
            let mut total = 0.0;
            for r in records {
                total += score(&r.matrix, r.n, level)?;
            }
            Ok(total / records.len() as f64)
        }
    }
}

/// Mean cross mass per image, averaged over records: `sum_{j != i} B[i][j]`
/// divided by `n - 1`, then over images.
pub fn mean_cross_mass(records: &[AttentionBlockSums]) -> Result<f64> {
    let refs: Vec<&AttentionBlockSums> = records.iter().collect();
    let (m, n) = average_matrix(&refs)?;
    let stats = cross_stats(&m, n)?;
    Ok(stats.iter().map(|s| s.p_cross_mean).sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepProfile {
    pub steps: Vec<usize>,
    pub p_cross_mean: Vec<f64>,
    pub p_cross_max: Vec<f64>,
}

/// Per-step curves, averaging over images and layers.
pub fn step_profile(records: &[AttentionBlockSums]) -> Result<StepProfile> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "trace has no captured attention".into(),
        ));
    }
    let mut steps: Vec<usize> = records.iter().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut profile = StepProfile {
        steps: steps.clone(),
        p_cross_mean: Vec::with_capacity(steps.len()),
        p_cross_max: Vec::with_capacity(steps.len()),
    };
    for &k in &steps {
        let (mut mean, mut max, mut count) = (0.0, 0.0, 0usize);
        for r in records.iter().filter(|r| r.step == k) {
            for s in cross_stats(&r.matrix, r.n)? {
                mean += s.p_cross_mean;
                max += s.p_cross_max;
                count += 1;
            }
        }
        profile.p_cross_mean.push(mean / count as f64);
        profile.p_cross_max.push(max / count as f64);
    }
    Ok(profile)
}

pub fn trace_profile(trace: &SampleTrace) -> Result<StepProfile> {
    step_profile(&trace.block_sums)
}

/// Pearson correlation of `(x, y)` pairs.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs >= 3 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::InvalidArgument(
            "correlation of a constant sequence".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation between cross-sample scores and a quality metric.
pub fn fid_correlation(pairs: &[(f64, f64)]) -> Result<f64> {
    pearson(pairs)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} vs {} values",
            x.len(),
            y.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = ranks(x).into_iter().zip(ranks(y)).collect();
    pearson(&pairs)
}

/// Which attention direction orders members in the cross-condition probe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// Mass from member `j`'s queries onto the anchor, `B[j][0]`.
    #[default]
    MemberToAnchor,
    /// Mass from the anchor's queries onto member `j`, `B[0][j]`.
    AnchorToMember,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossConditionReport {
    /// Non-anchor members with their attention score, highest first.
    pub ranking: Vec<(usize, f64)>,
    /// L2 change of the anchor image when member `j` gets the new label,
    /// indexed by `j` (entry 0 replaces the anchor itself).
    pub anchor_deltas: Vec<f64>,
    pub reference: SampleTrace,
}

impl CrossConditionReport {
    pub fn highest(&self) -> usize {
        self.ranking[0].0
    }

    pub fn lowest(&self) -> usize {
        self.ranking[self.ranking.len() - 1].0
    }

    /// Anchor change for the highest- and lowest-ranked replacements.
    pub fn extreme_deltas(&self) -> (f64, f64) {
        (
            self.anchor_deltas[self.highest()],
            self.anchor_deltas[self.lowest()],
        )
    }
}

/// Generates the reference group with attention capture, ranks the other
/// members by attention, then regenerates once per member with that
/// member's label set to `new_class` (same noise) and measures how far the
/// anchor image moves.
pub fn cross_condition_probe(
    plan: &SamplerPlan,
    new_class: usize,
    rank_by: RankBy,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
) -> Result<CrossConditionReport> {
    if denoiser.is_untrained() {
        return Err(Error::Untrained(
            "cross-condition probe on a model whose output head is still zero".into(),
        ));
    }
    let n = plan.group_size;
    if n < 3 {
        return Err(Error::InvalidArgument(
            "cross-condition probe needs a group of at least 3".into(),
        ));
    }
    if new_class >= denoiser.config().num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {new_class} out of range"
        )));
    }
    let mut plan = plan.clone();
    plan.capture_attention = true;
    let request = plan.request();
    let mut requests = vec![request.clone()];
    for j in 0..n {
        let mut r = request.clone();
        r.labels[j] = new_class;
        requests.push(r);
    }
    let mut traces = sampler::generate_groups(&plan, &requests, denoiser, schedule)?;
    let reference = traces.remove(0);
    let scores: Vec<f64> = if reference.block_sums.is_empty() {
        vec![0.0; n]
    } else {
        let refs: Vec<&AttentionBlockSums> = reference.block_sums.iter().collect();
        let (m, _) = average_matrix(&refs)?;
        (0..n)
            .map(|j| match rank_by {
                RankBy::MemberToAnchor => m[j * n],
                RankBy::AnchorToMember => m[j],
            })
            .collect()
    };
    let mut ranking: Vec<(usize, f64)> = (1..n).map(|j| (j, scores[j])).collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let per = reference.images.len() / n;
    let anchor = &reference.images.data()[..per];
    let anchor_deltas = traces
        .iter()
        .map(|t| {
            t.images.data()[..per]
                .iter()
                .zip(anchor)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(CrossConditionReport {
        ranking,
        anchor_deltas,
        reference,
    })
}

/// Writes per-record, per-image statistics with the columns
/// `step, layer, image, p_self, p_cross_mean, p_cross_max, s_cross`.
pub fn write_attention_csv(records: &[AttentionBlockSums], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record([
        "step",
        "layer",
        "image",
        "p_self",
        "p_cross_mean",
        "p_cross_max",
        "s_cross",
    ])?;
    for r in records {
        for (i, s) in cross_stats(&r.matrix, r.n)?.iter().enumerate() {
            w.write_record([
                r.step.to_string(),
                r.layer.to_string(),
                i.to_string(),
                s.p_self.to_string(),
                s.p_cross_mean.to_string(),
                s.p_cross_max.to_string(),
                s.s_cross.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Csv(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(n: usize, matrix: Vec<f64>) -> AttentionBlockSums {
        AttentionBlockSums {
            step: 0,
            layer: 0,
            n,
            matrix,
        }
    }

    fn block_diagonal(n: usize, l: usize) -> Vec<f64> {
        let t = n * l;
        let mut w = vec![0.0; t * t];
        for q in 0..t {
            let img = q / l;
            for k in img * l..(img + 1) * l {
                w[q * t + k] = 1.0 / l as f64;
            }
        }
        w
    }

    /// Straight double loop over query and key tokens.
    fn oracle(heads: &[Vec<f64>], n: usize, l: usize) -> Vec<f64> {
        let t = n * l;
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for w in heads {
                    for q in i * l..(i + 1) * l {
                        for k in j * l..(j + 1) * l {
                            s += w[q * t + k];
                        }
                    }
                }
                b[i * n + j] = s / (l * heads.len()) as f64;
            }
        }
        b
    }

    fn random_stochastic(t: usize, seed: u64) -> Vec<f64> {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from(seed, &[]);
        let mut w: Vec<f64> = (0..t * t).map(|_| rng.random::<f64>() + 1e-3).collect();
        for row in w.chunks_mut(t) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        w
    }

    #[test]
    fn block_diagonal_gives_identity() {
        let b = block_sums(&[block_diagonal(3, 4)], 3, 4).unwrap();
        assert_eq!(b, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }

    #[test]
    fn uniform_attention_gives_uniform_blocks() {
        let t = 8;
        let b = block_sums(&[vec![1.0 / t as f64; t * t]], 4, 2).unwrap();
        assert!(b.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn crafted_two_by_two() {
        let w = vec![
            0.1, 0.2, 0.3, 0.4, //
            0.5, 0.5, 0.0, 0.0, //
            0.25, 0.25, 0.25, 0.25, //
            0.0, 0.1, 0.0, 0.9,
        ];
        let b = block_sums(&[w], 2, 2).unwrap();
        let want = [0.65, 0.35, 0.3, 0.7];
        for (a, e) in b.iter().zip(want) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn non_stochastic_rejected() {
        assert!(block_sums(&[vec![0.5; 4]], 1, 2).is_ok());
        assert!(block_sums(&[vec![0.6; 4]], 1, 2).is_err());
    }

    #[test]
    fn pair_groups_have_zero_score() {
        let stats = cross_stats(&[0.7, 0.3, 0.1, 0.9], 2).unwrap();
        assert!(stats.iter().all(|s| s.s_cross == Some(0.0)));
        assert_eq!(
            aggregate_s_cross(
                &[record(2, vec![0.7, 0.3, 0.1, 0.9])],
                Aggregation::AverageFirst,
                Level::Image
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn hand_evaluated_score() {
        let p = [0.4, 0.1, 0.1];
        assert!((peakedness(&p).unwrap() - 0.5).abs() < 1e-15);
        let row0 = [0.4, 0.4, 0.1, 0.1];
        let m: Vec<f64> = row0.iter().chain(&[0.25; 12]).copied().collect();
        let s = cross_stats(&m, 4).unwrap();
        assert!((s[0].p_cross_mean - 0.2).abs() < 1e-15);
        assert_eq!(s[0].p_cross_max, 0.4);
        assert!((s[0].s_cross.unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(s[1].s_cross, Some(0.0));
    }

    #[test]
    fn single_image_has_no_score() {
        let s = cross_stats(&[1.0], 1).unwrap();
        assert_eq!(s[0].s_cross, None);
        assert!(aggregate_s_cross(
            &[record(1, vec![1.0])],
            Aggregation::AverageFirst,
            Level::Image
        )
        .is_err());
    }

    #[test]
    fn profiles_of_constant_and_isolated_traces() {
        let iso: Vec<_> = (0..3)
            .map(|k| AttentionBlockSums {
                step: k,
                layer: 0,
                n: 3,
                matrix: vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
            })
            .collect();
        let p = step_profile(&iso).unwrap();
        assert_eq!(p.p_cross_mean, vec![0.0; 3]);
        assert_eq!(p.p_cross_max, vec![0.0; 3]);

        let m = vec![0.5, 0.3, 0.2, 0.2, 0.6, 0.2, 0.1, 0.1, 0.8];
        let c: Vec<_> = (0..4)
            .flat_map(|k| {
                let m = m.clone();
                (0..2).map(move |layer| AttentionBlockSums {
                    step: k,
                    layer,
                    n: 3,
                    matrix: m.clone(),
                })
            })
            .collect();
        let p = step_profile(&c).unwrap();
        let stats = cross_stats(&m, 3).unwrap();
        let mean = stats.iter().map(|s| s.p_cross_mean).sum::<f64>() / 3.0;
        assert!(p.p_cross_mean.iter().all(|v| (v - mean).abs() < 1e-15));
        assert!(step_profile(&[]).is_err());
    }

    #[test]
    fn pearson_cases() {
        let lin: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert!((pearson(&lin).unwrap() - 1.0).abs() < 1e-15);
        let anti: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, -3.0 * i as f64)).collect();
        assert!((pearson(&anti).unwrap() + 1.0).abs() < 1e-15);
        // hand-computed: sxy = 10, sxx = 10, syy = 14.8
        let pairs = [(1.0, 2.0), (2.0, 1.0), (3.0, 4.0), (4.0, 3.0), (5.0, 6.0)];
        let want = 10.0 / (10.0f64 * 14.8).sqrt();
        assert!((pearson(&pairs).unwrap() - want).abs() < 1e-12);
        assert!(pearson(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]).is_err());
        assert!(pearson(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
    }

    #[test]
    fn spearman_handles_ties_and_monotone_maps() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (-v).exp()).collect();
        assert!((spearman(&x, &y).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn aggregation_orders_agree_on_constant_records() {
        let m = vec![0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.25, 0.25, 0.5];
        let recs = vec![record(3, m.clone()), record(3, m)];
        let a = aggregate_s_cross(&recs, Aggregation::AverageFirst, Level::Image).unwrap();
        let b = aggregate_s_cross(&recs, Aggregation::PerRecord, Level::Image).unwrap();
        assert!((a - b).abs() < 1e-15);
        let g = aggregate_s_cross(&recs, Aggregation::AverageFirst, Level::Group).unwrap();
        assert!((0.0..1.0).contains(&g));
    }

    #[test]
    fn csv_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_attention_csv(&[record(2, vec![0.7, 0.3, 0.1, 0.9])], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,layer,image,p_self,p_cross_mean,p_cross_max,s_cross"
        );
        assert_eq!(lines.count(), 2);
    }

    proptest! {
        #[test]
        fn block_sums_match_double_loop(seed in 0u64..100_000, n in 1usize..4, l in 1usize..5, h in 1usize..3) {
            let heads: Vec<Vec<f64>> = (0..h).map(|k| random_stochastic(n * l, seed * 7 + k as u64)).collect();
            let b = block_sums(&heads, n, l).unwrap();
            let want = oracle(&heads, n, l);
            for (x, y) in b.iter().zip(&want) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for row in b.chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= tol::STOCHASTIC);
            }
        }

        #[test]
        fn score_is_scale_invariant(p in proptest::collection::vec(0.01f64..1.0, 1..6), lambda in 0.01f64..100.0) {
            let scaled: Vec<f64> = p.iter().map(|v| v * lambda).collect();
            let a = peakedness(&p).unwrap();
            let b = peakedness(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((0.0..1.0).contains(&a));
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            prop_assert!(mean <= p.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-15);
        }
    }
}
