//! Softmax attention kernels.
//!
//! [`scaled_dot_attention`] is the plain single-head operator. The block
//! kernels below are what the denoiser runs: multi-head attention over a
//! packed `[tokens, 3C]` projection where tokens are partitioned into
//! independent attention blocks. A block is either one image (ordinary
//! per-image attention) or a whole group of images (group attention), so the
//! group reshape `[N, L, C] -> [1, N*L, C]` is expressed purely as a choice
//! of block boundaries.

use super::kernels::{dot, matmul, matmul_bt, softmax_in_place};
use super::{tol, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Row-wise `softmax(q k^T / sqrt(d))`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    q.require_rank(2, "attention q")?;
    k.require_rank(2, "attention k")?;
    let (s, d) = (q.shape()[0], q.shape()[1]);
    if k.shape() != [s, d] {
        return Err(Error::Dimension(format!(
            "attention q {:?} vs k {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if d == 0 {
        return Err(Error::Dimension("attention head dim must be >= 1".into()));
    }
    q.check_finite("attention q")?;
    k.check_finite("attention k")?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = matmul_bt(q.data(), k.data(), s, d, s);
    for row in w.chunks_mut(s) {
        row.iter_mut().for_each(|x| *x *= scale);
        softmax_in_place(row);
    }
    Tensor::new(vec![s, s], w)
}

/// Single-head `softmax(q k^T / sqrt(d)) v` for `q, k, v` of shape `[S, d]`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if v.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "attention v {:?} vs q {:?}",
            v.shape(),
            q.shape()
        )));
    }
    v.check_finite("attention v")?;
    let w = attention_weights(q, k)?;
    debug_assert!(w
        .data()
        .chunks(q.shape()[0])
        .all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= tol::STOCHASTIC));
    w.matmul(v)
}

/// One independent attention block: a run of whole images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub first_image: usize,
    pub images: usize,
    /// Compute image-to-image block sums for this block.
    pub capture: bool,
}

/// Block partition of a packed token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub tokens_per_image: usize,
    pub blocks: Vec<AttnBlock>,
}

impl BlockLayout {
    pub fn total_images(&self) -> usize {
        self.blocks.iter().map(|b| b.images).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.total_images() * self.tokens_per_image
    }

    fn validate(&self) -> Result<()> {
        let mut next = 0;
        for b in &self.blocks {
            if b.first_image != next || b.images == 0 {
                return Err(Error::Dimension(format!(
                    "attention blocks must tile the images contiguously; block {b:?} at image {next}"
                )));
            }
            next += b.images;
        }
        Ok(())
    }
}

/// Normalized image-to-image attention mass for one captured block.
///
/// `matrix[i * images + j]` is the share of image `i`'s query attention that
/// lands on image `j`'s keys, averaged over the image's queries and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCapture {
    pub block: usize,
    pub images: usize,
    pub matrix: Vec<f64>,
}

pub struct BlockAttnOutput {
    /// `[tokens, C]`
    pub out: Vec<f64>,
    /// Per block, per head, the `n x n` weights; empty when not kept.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub captures: Vec<BlockCapture>,
}

struct BlockResult {
    out: Vec<f64>,
    probs: Vec<Vec<f64>>,
    capture: Option<Vec<f64>>,
}

/// Copies the `[n, dh]` slice of head `h` for section `part` (0=q, 1=k, 2=v).
fn gather_head(
    qkv: &[f64],
    start_token: usize,
    n: usize,
    channels: usize,
    part: usize,
    h: usize,
    dh: usize,
) -> Vec<f64> {
    let stride = 3 * channels;
    let off = part * channels + h * dh;
    let mut out = Vec::with_capacity(n * dh);
    for t in 0..n {
        let row = (start_token + t) * stride + off;
        out.extend_from_slice(&qkv[row..row + dh]);
    }
    out
}

/// Multi-head attention over each block of `layout`.
///
/// `qkv` is `[tokens, 3C]` with the query, key and value projections packed
/// along columns; heads split each section into contiguous `C / heads`
/// column ranges.
pub fn block_attention_forward(
    qkv: &[f64],
    channels: usize,
    heads: usize,
    layout: &BlockLayout,
    keep_probs: bool,
) -> Result<BlockAttnOutput> {
    layout.validate()?;
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::Dimension(format!(
            "{channels} channels not divisible into {heads} heads"
        )));
    }
    let tokens = layout.total_tokens();
    if qkv.len() != tokens * 3 * channels {
        return Err(Error::Dimension(format!(
            "qkv has {} values, layout needs {tokens} x {}",
            qkv.len(),
            3 * channels
        )));
    }
    let dh = channels / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let l = layout.tokens_per_image;

    let results: Vec<BlockResult> = par::map_indexed(layout.blocks.len(), |bi| {
        let block = layout.blocks[bi];
        let start = block.first_image * l;
        let n = block.images * l;
        let mut out = vec![0.0; n * channels];
        let mut probs = Vec::new();
        let mut sums = block
            .capture
            .then(|| vec![0.0; block.images * block.images]);
        for h in 0..heads {
            let q = gather_head(qkv, start, n, channels, 0, h, dh);
            let k = gather_head(qkv, start, n, channels, 1, h, dh);
            let v = gather_head(qkv, start, n, channels, 2, h, dh);
            let mut p = matmul_bt(&q, &k, n, dh, n);
            for row in p.chunks_mut(n) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            let o = matmul(&p, &v, n, n, dh);
            for t in 0..n {
                out[t * channels + h * dh..t * channels + (h + 1) * dh]
                    .copy_from_slice(&o[t * dh..(t + 1) * dh]);
            }
            if let Some(s) = sums.as_mut() {
                accumulate_block_sums(&p, block.images, l, s);
            }
            if keep_probs {
                probs.push(p);
            }
        }
        if let Some(s) = sums.as_mut() {
            let norm = 1.0 / (l * heads) as f64;
            s.iter_mut().for_each(|x| *x *= norm);
        }
        BlockResult {
            out,
            probs,
            capture: sums,
        }
    });

    let mut out = vec![0.0; tokens * channels];
    let mut probs = Vec::with_capacity(results.len());
    let mut captures = Vec::new();
    for (bi, r) in results.into_iter().enumerate() {
        let block = layout.blocks[bi];
        let start = block.first_image * l * channels;
        out[start..start + r.out.len()].copy_from_slice(&r.out);
        probs.push(r.probs);
        if let Some(matrix) = r.capture {
            captures.push(BlockCapture {
                block: bi,
                images: block.images,
                matrix,
            });
        }
    }
    Ok(BlockAttnOutput {
        out,
        probs,
        captures,
    })
}

/// Adds the raw (unnormalized) image-to-image mass of one head's weights.
pub fn accumulate_block_sums(p: &[f64], images: usize, tokens_per_image: usize, sums: &mut [f64]) {
    let n = images * tokens_per_image;
    for qi in 0..n {
        let a = qi / tokens_per_image;
        let row = &p[qi * n..(qi + 1) * n];
        for b in 0..images {
            let seg = &row[b * tokens_per_image..(b + 1) * tokens_per_image];
            sums[a * images + b] += seg.iter().sum::<f64>();
        }
    }
}

/// Gradient of [`block_attention_forward`] with respect to `qkv`.
pub fn block_attention_backward(
    qkv: &[f64],
    grad_out: &[f64],
    probs: &[Vec<Vec<f64>>],
    channels: usize,
    heads: usize,
    layout: &BlockLayout,
) -> Vec<f64> {
    let dh = channels / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let l = layout.tokens_per_image;
    let stride = 3 * channels;

    let per_block: Vec<Vec<f64>> = par::map_indexed(layout.blocks.len(), |bi| {
        let block = layout.blocks[bi];
        let start = block.first_image * l;
        let n = block.images * l;
        let mut dqkv = vec![0.0; n * stride];
        for (h, p) in probs[bi].iter().enumerate().take(heads) {
            let q = gather_head(qkv, start, n, channels, 0, h, dh);
            let k = gather_head(qkv, start, n, channels, 1, h, dh);
            let v = gather_head(qkv, start, n, channels, 2, h, dh);
            let mut d_o = Vec::with_capacity(n * dh);
            for t in 0..n {
                let row = (start + t) * channels + h * dh;
                d_o.extend_from_slice(&grad_out[row..row + dh]);
            }
            // dV = P^T dO, dP = dO V^T
            let d_v = super::kernels::matmul_at(p, &d_o, n, n, dh);
            let mut d_s = matmul_bt(&d_o, &v, n, dh, n);
            for (ds_row, p_row) in d_s.chunks_mut(n).zip(p.chunks(n)) {
                let c = dot(ds_row, p_row);
                for (ds, &pv) in ds_row.iter_mut().zip(p_row) {
                    *ds = pv * (*ds - c) * scale;
                }
            }
            let d_q = matmul(&d_s, &k, n, n, dh);
            let d_k = super::kernels::matmul_at(&d_s, &q, n, n, dh);
            for t in 0..n {
                let base = t * stride + h * dh;
                dqkv[base..base + dh].copy_from_slice(&d_q[t * dh..(t + 1) * dh]);
                dqkv[base + channels..base + channels + dh]
                    .copy_from_slice(&d_k[t * dh..(t + 1) * dh]);
                dqkv[base + 2 * channels..base + 2 * channels + dh]
                    .copy_from_slice(&d_v[t * dh..(t + 1) * dh]);
            }
        }
        dqkv
    });

    let mut grad = vec![0.0; qkv.len()];
    for (bi, d) in per_block.into_iter().enumerate() {
        let start = layout.blocks[bi].first_image * l * stride;
        grad[start..start + d.len()].copy_from_slice(&d);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_key_forces_unit_weight() {
        let out = scaled_dot_attention(
            &t(&[1, 1], &[0.3]),
            &t(&[1, 1], &[-2.0]),
            &t(&[1, 1], &[3.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = t(&[2, 1], &[0.5, -1.0]);
        let k = t(&[2, 1], &[1.0, 1.0]);
        let v = t(&[2, 1], &[0.0, 2.0]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for x in out.data() {
            assert!((x - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_case_matches_scalar_softmax() {
        // q=[[1],[0]], k=[[1],[0]], v=[[1],[0]], d=1.
        // Row 0 logits (1, 0): weight on v0 = e/(e+1).
        // Row 1 logits (0, 0): weight 1/2.
        let e = std::f64::consts::E;
        let want = [e / (e + 1.0), 0.5];
        let x = t(&[2, 1], &[1.0, 0.0]);
        let out = scaled_dot_attention(&x, &x, &x).unwrap();
        for (g, w) in out.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
        // Frozen decimal: e/(e+1) = 0.7310585786300049
        assert!((out.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn weights_are_row_stochastic() {
        let q = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.7).sin() * 4.0);
        let k = Tensor::from_fn(&[5, 3], |i| (i as f64 * 1.3).cos() * 4.0);
        let w = attention_weights(&q, &k).unwrap();
        for row in w.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= tol::STOCHASTIC);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[3, 1], &[1.0, 2.0, 3.0]);
        assert!(matches!(
            scaled_dot_attention(&a, &b, &a),
            Err(Error::Dimension(_))
        ));
        let bad = t(&[2, 1], &[1.0, f64::INFINITY]);
        assert!(matches!(
            scaled_dot_attention(&bad, &a, &a),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layout_must_be_contiguous() {
        let layout = BlockLayout {
            tokens_per_image: 1,
            blocks: vec![AttnBlock {
                first_image: 1,
                images: 1,
                capture: false,
            }],
        };
        assert!(block_attention_forward(&[0.0; 3], 1, 1, &layout, false).is_err());
    }
}
