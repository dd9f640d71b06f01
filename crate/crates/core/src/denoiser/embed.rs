//! Patch layout, fixed embeddings, and the functional group attention.

use crate::error::{Error, Result};
use crate::tensor::attention::{block_attention_forward, AttnBlock, BlockCapture, BlockLayout};
use crate::tensor::Tensor;

/// `[N, H, W, Ch]` to `[N, L, p*p*Ch]`. Patches are in raster order and each
/// patch row is its pixels in raster order, channels innermost.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    images.require_rank(4, "patchify")?;
    let (n, h, w, c) = dims4(images);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} image not divisible into {patch}x{patch} patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let row = patch * patch * c;
    let mut out = Vec::with_capacity(images.len());
    let src = images.data();
    for i in 0..n {
        for py in 0..ph {
            for px in 0..pw {
                for y in 0..patch {
                    let start = ((i * h + py * patch + y) * w + px * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    debug_assert_eq!(out.len(), n * ph * pw * row);
    Tensor::new(vec![n, ph * pw, row], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    patch: usize,
    image_size: usize,
    channels: usize,
) -> Result<Tensor> {
    patches.require_rank(3, "unpatchify")?;
    let (n, l, row) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
    if patch == 0 || !image_size.is_multiple_of(patch) {
        return Err(Error::Dimension(format!(
            "image size {image_size} not divisible by patch {patch}"
        )));
    }
    let side = image_size / patch;
    if l != side * side || row != patch * patch * channels {
        return Err(Error::Dimension(format!(
            "patches {:?} do not tile a {image_size}x{image_size}x{channels} image",
            patches.shape()
        )));
    }
    let mut out = vec![0.0; n * image_size * image_size * channels];
    let src = patches.data();
    let seg = patch * channels;
    for i in 0..n {
        for p in 0..l {
            let (py, px) = (p / side, p % side);
            for y in 0..patch {
                let from = ((i * l + p) * patch + y) * seg;
                let to = ((i * image_size + py * patch + y) * image_size + px * patch) * channels;
                out[to..to + seg].copy_from_slice(&src[from..from + seg]);
            }
        }
    }
    Tensor::new(vec![n, image_size, image_size, channels], out)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// Fixed 2-D sin-cos position table `[side*side, dim]`: the first half of
/// the channels encode the row, the second half the column.
pub fn sincos_2d(side: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; side * side * dim];
    for r in 0..side {
        for c in 0..side {
            let row = &mut data[(r * side + c) * dim..(r * side + c + 1) * dim];
            fill_sincos(&mut row[..half], r as f64);
            fill_sincos(&mut row[half..2 * half], c as f64);
        }
    }
    Tensor::new(vec![side * side, dim], data).expect("table shape")
}

fn fill_sincos(out: &mut [f64], pos: f64) {
    let quarter = out.len() / 2;
    for k in 0..quarter {
        let freq = 1.0 / 10_000f64.powf(k as f64 / quarter.max(1) as f64);
        out[k] = (pos * freq).sin();
        out[quarter + k] = (pos * freq).cos();
    }
}

/// Sinusoidal timestep features `[ts.len(), dim]`, cosines first.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; ts.len() * dim];
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data[i * dim + k] = (t as f64 * freq).cos();
            data[i * dim + half + k] = (t as f64 * freq).sin();
        }
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding shape")
}

/// `h[i, l, :] + slot_table[i, :]` for every patch `l` of member `i`.
pub fn add_sample_embedding(h: &Tensor, slot_table: &Tensor) -> Result<Tensor> {
    h.require_rank(3, "add_sample_embedding")?;
    slot_table.require_rank(2, "add_sample_embedding")?;
    let (n, l, c) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    if n > slot_table.shape()[0] {
        return Err(Error::InvalidArgument(format!(
            "group of {n} exceeds {} sample slots",
            slot_table.shape()[0]
        )));
    }
    if slot_table.shape()[1] != c {
        return Err(Error::Dimension(format!(
            "slot width {} vs hidden {c}",
            slot_table.shape()[1]
        )));
    }
    let mut out = h.data().to_vec();
    for i in 0..n {
        let slot = slot_table.row(i);
        for tok in out[i * l * c..(i + 1) * l * c].chunks_mut(c) {
            tok.iter_mut().zip(slot).for_each(|(x, s)| *x += s);
        }
    }
    Tensor::new(h.shape().to_vec(), out)
}

/// Multi-head self-attention of `h: [N, L, C]` using `h` itself as query,
/// key and value. With `group_on` all `N*L` tokens attend jointly and the
/// image-to-image block sums are returned; otherwise each image attends
/// only to itself.
pub fn group_attention(
    h: &Tensor,
    group_on: bool,
    heads: usize,
) -> Result<(Tensor, Option<BlockCapture>)> {
    h.require_rank(3, "group_attention")?;
    h.check_finite("group_attention input")?;
    let (n, l, c) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let blocks = if group_on {
        vec![AttnBlock {
            first_image: 0,
            images: n,
            capture: true,
        }]
    } else {
        (0..n)
            .map(|i| AttnBlock {
                first_image: i,
                images: 1,
                capture: false,
            })
            .collect()
    };
    let layout = BlockLayout {
        tokens_per_image: l,
        blocks,
    };
    let mut qkv = Vec::with_capacity(3 * h.len());
    for tok in h.data().chunks(c) {
        for _ in 0..3 {
            qkv.extend_from_slice(tok);
        }
    }
    let res = block_attention_forward(&qkv, c, heads, &layout, false)?;
    let out = Tensor::new(vec![n, l, c], res.out)?;
    out.check_finite("group_attention output")?;
    Ok((out, res.captures.into_iter().next()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::scaled_dot_attention;
    use proptest::prelude::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::rng_from(seed, &[]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), crate::rng::normal_vec(&mut rng, n)).unwrap()
    }

    #[test]
    fn whole_image_patch_is_flat_image() {
        let x = rand_tensor(&[1, 4, 4, 3], 1);
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 48]);
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn patches_are_raster_ordered() {
        let x = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(
            p.data(),
            &[0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]
        );
    }

    #[test]
    fn patchify_rejects_indivisible() {
        assert!(patchify(&Tensor::zeros(&[1, 6, 6, 3]), 4).is_err());
    }

    #[test]
    fn slot_embedding_cases() {
        let h = rand_tensor(&[2, 3, 4], 2);
        let zero = Tensor::zeros(&[4, 4]);
        assert_eq!(add_sample_embedding(&h, &zero).unwrap(), h);

        let h = Tensor::zeros(&[2, 2, 1]);
        let table = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let out = add_sample_embedding(&h, &table).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 2.0, 2.0]);

        assert!(add_sample_embedding(&Tensor::zeros(&[3, 2, 1]), &table).is_err());
    }

    #[test]
    fn single_image_group_attention_is_unchanged_by_flag() {
        let h = rand_tensor(&[1, 4, 8], 3);
        let (a, _) = group_attention(&h, true, 2).unwrap();
        let (b, _) = group_attention(&h, false, 2).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn isolated_attention_is_per_image_attention() {
        let h = rand_tensor(&[3, 4, 4], 4);
        let (out, cap) = group_attention(&h, false, 1).unwrap();
        assert!(cap.is_none());
        for i in 0..3 {
            let img = Tensor::new(vec![4, 4], h.data()[i * 16..(i + 1) * 16].to_vec()).unwrap();
            let want = scaled_dot_attention(&img, &img, &img).unwrap();
            assert_eq!(&out.data()[i * 16..(i + 1) * 16], want.data());
        }
    }

    /// Softmax attention over all `N*L` tokens with explicit loops.
    pub(crate) fn full_attention_oracle(h: &Tensor, heads: usize) -> Vec<f64> {
        let (n, l, c) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let tokens = n * l;
        let dh = c / heads;
        let x = h.data();
        let mut out = vec![0.0; tokens * c];
        for hd in 0..heads {
            for q in 0..tokens {
                let scores: Vec<f64> = (0..tokens)
                    .map(|k| {
                        (0..dh)
                            .map(|d| x[q * c + hd * dh + d] * x[k * c + hd * dh + d])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..dh {
                    out[q * c + hd * dh + d] = (0..tokens)
                        .map(|k| e[k] / z * x[k * c + hd * dh + d])
                        .sum::<f64>();
                }
            }
        }
        out
    }

    #[test]
    fn crafted_two_by_two_matches_oracle() {
        let h = Tensor::new(vec![2, 2, 1], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (out, cap) = group_attention(&h, true, 1).unwrap();
        let want = full_attention_oracle(&h, 1);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
        let cap = cap.unwrap();
        for row in cap.matrix.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn position_table_rows_differ() {
        let t = sincos_2d(4, 8);
        assert_eq!(t.shape(), &[16, 8]);
        for i in 0..16 {
            for j in i + 1..16 {
                assert!(t.row(i) != t.row(j));
            }
        }
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(seed in 0u64..500, n in 1usize..3, side in 1usize..4, p in 1usize..4) {
            let size = side * p;
            let x = rand_tensor(&[n, size, size, 3], seed);
            let back = unpatchify(&patchify(&x, p).unwrap(), p, size, 3).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn joint_attention_matches_full_oracle(
            seed in 0u64..10_000, n in 1usize..4, l in 1usize..5, heads_pow in 0u32..3,
        ) {
            let heads = 1usize << heads_pow;
            let c = 8;
            let h = rand_tensor(&[n, l, c], seed);
            let (out, _) = group_attention(&h, true, heads).unwrap();
            let want = full_attention_oracle(&h, heads);
            for (a, b) in out.data().iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
