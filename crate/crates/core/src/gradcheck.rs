//! Central finite-difference validation of reverse-mode gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{AaptError, Result};
use crate::tensor::Tensor;

/// Max over coordinates of `|g_ad - g_fd| / max(1, |g_fd|)` for a scalar map
/// of a single tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h, None, 0)
}

/// Same check over several inputs. With `coords = Some(n)` only `n`
/// randomly chosen coordinates (per input) are probed by finite differences.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f32, coords: Option<usize>, seed: u64) -> Result<f32>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    if h <= 0.0 {
        return Err(AaptError::Contract("grad_check step must be positive".into()));
    }
    let analytic: Vec<Vec<f32>> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.input(t)).collect();
        let loss = f(&g, &vars);
        if !loss.item().is_finite() {
            return Err(AaptError::NonFinite("grad_check loss".into()));
        }
        let grads = g.backward(loss)?;
        vars.iter().map(|v| grads.of_or_zero(*v)).collect()
    };
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::no_grad();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| g.constant(t)).collect();
        let v = f(&g, &vars).item();
        if !v.is_finite() {
            return Err(AaptError::NonFinite("grad_check probe".into()));
        }
        Ok(v as f64)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let idx: Vec<usize> = match coords {
            Some(n) if n < t.numel() => sample(&mut rng, t.numel(), n).into_vec(),
            _ => (0..t.numel()).collect(),
        };
        for i in idx {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let fd = ((up - down) / (2.0 * h as f64)) as f32;
            let err = (analytic[ti][i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn weights(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 7 + 3) % 11) as f32 / 11.0 - 0.4)
}

/// Finite-difference error of every differentiable primitive, each under a
/// fixed random input and a non-uniform readout.
pub fn primitive_suite() -> Result<Vec<(&'static str, f32)>> {
    let h = 1e-3;
    let w34 = weights(&[3, 4]);
    let w = &w34;
    let mut out = vec![
        ("add", grad_check_many(|g, v| v[0].add(v[1]).mul(g.constant(&weights(&[2, 3]))).sum(), &[rnd(&[2, 3], 1), rnd(&[2, 3], 2)], h, None, 0)?),
        ("sub", grad_check_many(|g, v| v[0].sub(v[1]).mul(g.constant(&weights(&[2, 3]))).sum(), &[rnd(&[2, 3], 3), rnd(&[2, 3], 4)], h, None, 0)?),
        ("mul", grad_check_many(|_, v| v[0].mul(v[1]).sum(), &[rnd(&[2, 3], 5), rnd(&[2, 3], 6)], h, None, 0)?),
        ("add_row", grad_check_many(|_, v| v[0].add_row(v[1]).square().mean(), &[rnd(&[3, 4], 7), rnd(&[4], 8)], h, None, 0)?),
        ("mul_row", grad_check_many(|_, v| v[0].mul_row(v[1]).square().mean(), &[rnd(&[3, 4], 9), rnd(&[4], 10)], h, None, 0)?),
        ("matmul", grad_check_many(|_, v| v[0].matmul(v[1]).square().mean(), &[rnd(&[3, 4], 11), rnd(&[4, 5], 12)], h, None, 0)?),
        ("silu", grad_check(|g, v| v.silu().mul(g.constant(w)).sum(), &rnd(&[3, 4], 100), h)?),
        ("exp", grad_check(|g, v| v.scale(0.5).exp().mul(g.constant(w)).sum(), &rnd(&[3, 4], 101), h)?),
        ("tanh", grad_check(|g, v| v.tanh().mul(g.constant(w)).sum(), &rnd(&[3, 4], 102), h)?),
        ("softplus", grad_check(|g, v| v.softplus().mul(g.constant(w)).sum(), &rnd(&[3, 4], 103), h)?),
        ("scale", grad_check(|g, v| v.scale(-1.5).add_scalar(0.3).mul(g.constant(w)).sum(), &rnd(&[3, 4], 104), h)?),
        ("layer_norm", grad_check(|g, v| v.layer_norm(1e-5).mul(g.constant(w)).sum(), &rnd(&[3, 4], 105), h)?),
        ("mean", grad_check(|_, v| v.square().mean(), &rnd(&[3, 4], 106), h)?),
        ("mse", grad_check(|g, v| v.mse(g.constant(w)), &rnd(&[3, 4], 107), h)?),
        ("group_mean", grad_check(|_, v| v.group_mean_rows(3).square().sum(), &rnd(&[3, 4], 108), h)?),
        ("slice_cols", grad_check(|_, v| v.slice_cols(1, 2).square().sum(), &rnd(&[3, 4], 109), h)?),
        ("slice_rows", grad_check(|_, v| v.slice_rows(1, 3).square().sum(), &rnd(&[3, 4], 110), h)?),
        ("reshape", grad_check(|_, v| v.reshape(&[4, 3]).slice_cols(0, 1).square().sum(), &rnd(&[3, 4], 111), h)?),
    ];
    let idx = Arc::new(vec![0u32, 5, 5, 11, 2, 7]);
    out.push(("gather", grad_check(|_, v| v.gather(idx.clone(), vec![2, 3]).square().sum(), &rnd(&[3, 4], 112), h)?));
    let cos = Arc::new((0..6).map(|i| (i as f32 * 0.4).cos()).collect::<Vec<_>>());
    let sin = Arc::new((0..6).map(|i| (i as f32 * 0.4).sin()).collect::<Vec<_>>());
    out.push(("rope", grad_check(|g, v| v.rope(cos.clone(), sin.clone()).mul(g.constant(w)).sum(), &rnd(&[3, 4], 113), h)?));
    out.push(("concat_rows", grad_check_many(|g, v| Var::concat_rows(&[v[0], v[1]]).mul(g.constant(&weights(&[5, 4]))).sum(), &[rnd(&[2, 4], 20), rnd(&[3, 4], 21)], h, None, 0)?));
    out.push(("concat_cols", grad_check_many(|g, v| Var::concat_cols(&[v[0], v[1]]).mul(g.constant(&weights(&[3, 5]))).sum(), &[rnd(&[3, 2], 22), rnd(&[3, 3], 23)], h, None, 0)?));
    #[rustfmt::skip]
    let mask = Arc::new(vec![
        true, false, false, false,
        true, true, false, false,
        true, false, true, true,
    ]);
    out.push((
        "attention",
        grad_check_many(|g, v| v[0].attention(v[1], v[2], mask.clone(), 2).mul(g.constant(w)).sum(), &[rnd(&[3, 4], 30), rnd(&[4, 4], 31), rnd(&[4, 4], 32)], h, None, 0)?,
    ));
    out.push((
        "conv2d",
        grad_check_many(
            |g, v| v[0].conv2d(v[1], Some(v[2])).mul(g.constant(&weights(&[2, 3, 4, 4]))).sum(),
            &[rnd(&[2, 2, 4, 4], 40), rnd(&[3, 2, 3, 3], 41), rnd(&[3], 42)],
            h,
            None,
            0,
        )?,
    ));
    Ok(out)
}
