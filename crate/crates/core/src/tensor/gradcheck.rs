//! Central-difference verification of tape gradients.

use super::tape::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter, flat index)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh graph and the parameters bound as trainable leaves,
/// and must return a scalar node.
pub fn grad_check<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check step must be > 0, got {h}"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars = ps
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check objective is {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Numeric("grad_check objective is not finite".into()));
    }
    let grads = g.backward(out)?;

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (pi, (p, v)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(*v, p);
        for i in 0..p.len() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::attention::{AttnBlock, BlockLayout};
    use super::super::tol;
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::rng_from(seed, &[]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), crate::rng::normal_vec(&mut rng, n)).unwrap()
    }

    #[test]
    fn square_at_three() {
        let r = grad_check(&[Tensor::scalar(3.0)], 1e-4, |g, v| g.mul(v[0], v[0])).unwrap();
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(&[Tensor::scalar(3.0)], 1e-4, |g, _| {
            g.constant(Tensor::scalar(5.0))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(&[Tensor::scalar(1.0)], 0.0, |g, v| g.sum(v[0])).is_err());
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        let x = rand_tensor(&[3, 4], 1);
        let w = rand_tensor(&[4, 5], 2);
        let b = rand_tensor(&[5], 3);
        let r = grad_check(&[x, w, b], tol::GRAD_STEP, |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            let y = g.layer_norm(y)?;
            let y1 = g.gelu(y)?;
            let y2 = g.silu(y)?;
            let y = g.mul(y1, y2)?;
            let y = g.add_scalar(y, 0.5)?;
            let y = g.add(y, y1)?;
            let s = g.slice_cols(y, 1, 3)?;
            let s = g.mul(s, s)?;
            g.sum(s)
        })
        .unwrap();
        assert!(r.max_rel_error < tol::GRAD_CHECK, "{r:?}");
    }

    #[test]
    fn gather_repeat_and_loss() {
        let table = rand_tensor(&[4, 3], 5);
        let x = rand_tensor(&[6, 3], 6);
        let target = rand_tensor(&[6, 3], 7);
        let r = grad_check(&[table, x], tol::GRAD_STEP, |g, v| {
            let e = g.gather(v[0], &[2, 0, 2])?;
            let e = g.repeat_rows(e, 2)?;
            let y = g.add(v[1], e)?;
            g.segment_mse(y, &target, 2, &[0.5, 1.0, 2.0])
        })
        .unwrap();
        assert!(r.max_rel_error < tol::GRAD_CHECK, "{r:?}");
    }

    #[test]
    fn block_attention_gradient() {
        let qkv = rand_tensor(&[6, 12], 9);
        let layout = BlockLayout {
            tokens_per_image: 2,
            blocks: vec![
                AttnBlock {
                    first_image: 0,
                    images: 2,
                    capture: false,
                },
                AttnBlock {
                    first_image: 2,
                    images: 1,
                    capture: false,
                },
            ],
        };
        let r = grad_check(&[qkv], tol::GRAD_STEP, |g, v| {
            let a = g.attention(v[0], 2, &layout, None)?;
            let a2 = g.mul(a, a)?;
            g.sum(a2)
        })
        .unwrap();
        assert!(r.max_rel_error < tol::GRAD_CHECK, "{r:?}");
    }
}
