//! Finite-difference gradient verification.
//!
//! [`finite_diff_grad`] is the independent oracle: a central-difference
//! estimate that never touches the tape. The check routines compare tape
//! gradients against it with the error convention
//! `err = |a - n| / max(1, |a|, |n|)` — relative above unit scale, absolute
//! below it — which is the tightest reading central differences at step 1e-5
//! can meet in f64 when losses are kept O(1).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ForwardMode, Model};
use crate::params::{DepthwiseKernel, FlatParam, FullKernel, LinearWeights, NormAffine};
use crate::tape::GradTape;
use crate::tensor::{Axis, Tensor4};

/// Central-difference gradient estimate of a scalar function:
/// `(f(t + step e_i) - f(t - step e_i)) / (2 step)` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite difference step must be > 0");
    let mut grad = vec![0.0; theta.len()];
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + step;
        let fp = f(&work);
        work[i] = theta[i] - step;
        let fm = f(&work);
        work[i] = theta[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Error between an analytic and a numeric gradient entry.
#[inline]
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, f64::max(analytic.abs(), numeric.abs()))
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Weighted-sum loss used by the checks: `sum_i w_i out_i / len`, kept O(1).
fn weighted_loss(out: &Tensor4, weights: &[f64]) -> f64 {
    debug_assert_eq!(out.len(), weights.len());
    let scale = 1.0 / out.len() as f64;
    out.data().iter().zip(weights).map(|(o, w)| o * w).sum::<f64>() * scale
}

fn loss_seed(shape: (usize, usize, usize, usize), weights: &[f64]) -> Tensor4 {
    let n = weights.len() as f64;
    Tensor4::from_vec(
        shape.0,
        shape.1,
        shape.2,
        shape.3,
        weights.iter().map(|w| w / n).collect(),
    )
    .expect("seed shape")
}

/// Worst relative error observed across one full sweep of the primitive
/// gradient checks (every differentiable op, input and parameter sides).
/// Deterministic for a fixed seed.
pub fn check_primitive_gradients(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut track = |err: f64| worst = worst.max(err);

    let (n, h, w, c) = (1usize, 4usize, 5usize, 6usize);
    let x = Tensor4::random(n, h, w, c, -1.0, 1.0, &mut rng);
    let numel = n * h * w * c;
    let lw: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();

    // shift2d, input side
    {
        let mut tape = GradTape::new();
        let xv = tape.input(x.clone());
        let y = tape.shift2d(xv, 2, Axis::Horizontal)?;
        let grads = tape.backward(y, &loss_seed((n, h, w, c), &lw))?;
        let numeric = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(n, h, w, c, theta.to_vec()).unwrap();
                weighted_loss(&crate::ops::shift2d(&xt, 2, Axis::Horizontal).unwrap(), &lw)
            },
            x.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric));
    }

    // depthwise conv, input and kernel sides
    {
        let mut k = DepthwiseKernel::zeros(c, 3, true)?;
        for v in k.weight.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in k.bias.as_mut().unwrap().iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut tape = GradTape::new();
        let xv = tape.input(x.clone());
        let kv = tape.param_depthwise(k.clone());
        let y = tape.depthwise_conv2d(xv, kv)?;
        let grads = tape.backward(y, &loss_seed((n, h, w, c), &lw))?;

        let numeric_x = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(n, h, w, c, theta.to_vec()).unwrap();
                weighted_loss(&crate::ops::depthwise_conv2d(&xt, &k).unwrap(), &lw)
            },
            x.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric_x));

        let numeric_k = finite_diff_grad(
            |theta| {
                let mut kt = k.clone();
                kt.write_from_flat(theta);
                weighted_loss(&crate::ops::depthwise_conv2d(&x, &kt).unwrap(), &lw)
            },
            &k.to_flat(),
            step,
        );
        track(max_rel_error(grads.get(kv).unwrap(), &numeric_k));
    }

    // full conv, input and kernel sides
    {
        let mut k = FullKernel::zeros(c, 4, 3, true)?;
        for v in k.weight.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let lw4: Vec<f64> = (0..n * h * w * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = GradTape::new();
        let xv = tape.input(x.clone());
        let kv = tape.param_full(k.clone());
        let y = tape.full_conv2d(xv, kv)?;
        let grads = tape.backward(y, &loss_seed((n, h, w, 4), &lw4))?;

        let numeric_x = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(n, h, w, c, theta.to_vec()).unwrap();
                weighted_loss(&crate::ops::full_conv2d(&xt, &k).unwrap(), &lw4)
            },
            x.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric_x));

        let numeric_k = finite_diff_grad(
            |theta| {
                let mut kt = k.clone();
                kt.write_from_flat(theta);
                weighted_loss(&crate::ops::full_conv2d(&x, &kt).unwrap(), &lw4)
            },
            &k.to_flat(),
            step,
        );
        track(max_rel_error(grads.get(kv).unwrap(), &numeric_k));
    }

    // channel linear, input and weight sides
    {
        let mut wts = LinearWeights::zeros(c, 4);
        for v in wts.weight.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in wts.bias.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let lw4: Vec<f64> = (0..n * h * w * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = GradTape::new();
        let xv = tape.input(x.clone());
        let wv = tape.param_linear(wts.clone());
        let y = tape.channel_linear(xv, wv)?;
        let grads = tape.backward(y, &loss_seed((n, h, w, 4), &lw4))?;

        let numeric_x = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(n, h, w, c, theta.to_vec()).unwrap();
                weighted_loss(&crate::ops::channel_linear(&xt, &wts).unwrap(), &lw4)
            },
            x.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric_x));

        let numeric_w = finite_diff_grad(
            |theta| {
                let mut wt = wts.clone();
                wt.write_from_flat(theta);
                weighted_loss(&crate::ops::channel_linear(&x, &wt).unwrap(), &lw4)
            },
            &wts.to_flat(),
            step,
        );
        track(max_rel_error(grads.get(wv).unwrap(), &numeric_w));
    }

    // layer norm, input and affine sides
    {
        let eps = 1e-5;
        let mut affine = NormAffine::unit(c);
        for v in affine.gamma.iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in affine.beta.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let mut tape = GradTape::new();
        let xv = tape.input(x.clone());
        let av = tape.param_norm(affine.clone());
        let y = tape.layer_norm(xv, av, eps)?;
        let grads = tape.backward(y, &loss_seed((n, h, w, c), &lw))?;

        let numeric_x = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(n, h, w, c, theta.to_vec()).unwrap();
                weighted_loss(&crate::ops::layer_norm(&xt, &affine, eps).unwrap(), &lw)
            },
            x.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric_x));

        let numeric_a = finite_diff_grad(
            |theta| {
                let mut at = affine.clone();
                at.write_from_flat(theta);
                weighted_loss(&crate::ops::layer_norm(&x, &at, eps).unwrap(), &lw)
            },
            &affine.to_flat(),
            step,
        );
        track(max_rel_error(grads.get(av).unwrap(), &numeric_a));
    }

    // gelu
    {
        let mut tape = GradTape::new();
        let xv = tape.input(x.clone());
        let y = tape.gelu(xv);
        let grads = tape.backward(y, &loss_seed((n, h, w, c), &lw))?;
        let numeric = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(n, h, w, c, theta.to_vec()).unwrap();
                weighted_loss(&crate::ops::gelu(&xt), &lw)
            },
            x.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric));
    }

    // global average pool
    {
        let lwc: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = GradTape::new();
        let xv = tape.input(x.clone());
        let y = tape.global_avg_pool(xv);
        let grads = tape.backward(y, &loss_seed((n, 1, 1, c), &lwc))?;
        let numeric = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(n, h, w, c, theta.to_vec()).unwrap();
                weighted_loss(&crate::ops::global_avg_pool(&xt), &lwc)
            },
            x.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric));
    }

    // add (fan-out through both arms), scale, slice + concat, space_to_depth
    {
        let mut tape = GradTape::new();
        let xv = tape.input(x.clone());
        let s = tape.scale(xv, 1.7);
        let y = tape.add(xv, s)?;
        let grads = tape.backward(y, &loss_seed((n, h, w, c), &lw))?;
        let numeric = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(n, h, w, c, theta.to_vec()).unwrap();
                weighted_loss(&xt.add(&xt.scale(1.7)).unwrap(), &lw)
            },
            x.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric));
    }
    {
        let mut tape = GradTape::new();
        let xv = tape.input(x.clone());
        let a = tape.slice_channels(xv, 0, 2)?;
        let b = tape.slice_channels(xv, 2, c - 2)?;
        let y = tape.concat_channels(&[b, a])?;
        let grads = tape.backward(y, &loss_seed((n, h, w, c), &lw))?;
        let numeric = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(n, h, w, c, theta.to_vec()).unwrap();
                let a = crate::ops::slice_channels(&xt, 0, 2).unwrap();
                let b = crate::ops::slice_channels(&xt, 2, c - 2).unwrap();
                weighted_loss(&crate::ops::concat_channels(&[&b, &a]).unwrap(), &lw)
            },
            x.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric));
    }
    {
        let x2 = Tensor4::random(1, 4, 4, 3, -1.0, 1.0, &mut rng);
        let lw2: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = GradTape::new();
        let xv = tape.input(x2.clone());
        let y = tape.space_to_depth(xv, 2)?;
        let grads = tape.backward(y, &loss_seed((1, 2, 2, 12), &lw2))?;
        let numeric = finite_diff_grad(
            |theta| {
                let xt = Tensor4::from_vec(1, 4, 4, 3, theta.to_vec()).unwrap();
                weighted_loss(&crate::ops::space_to_depth(&xt, 2).unwrap(), &lw2)
            },
            x2.data(),
            step,
        );
        track(max_rel_error(grads.get(xv).unwrap(), &numeric));
    }

    Ok(worst)
}

/// Result of a whole-model gradient check.
#[derive(Debug)]
pub struct ModelGradcheck {
    /// Worst error and the parameter tensor it occurred in.
    pub max_err: f64,
    pub worst_param: String,
    /// Scalars compared per parameter tensor.
    pub samples_per_tensor: usize,
}

/// Compare tape gradients of every parameter tensor against central finite
/// differences on a random sample of scalars per tensor.
///
/// The loss is a fixed random weighted mean of the logits, so it is O(1) and
/// differentiable everywhere. Deterministic for fixed seed.
pub fn check_model_gradients(
    model: &Model,
    images: &Tensor4,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<ModelGradcheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;

    let fwd = model.forward_tape(images, ForwardMode::Eval)?;
    let logits_shape = fwd.tape.value(fwd.logits).shape();
    let logit_count = logits_shape.0 * logits_shape.3;
    let lw: Vec<f64> = (0..logit_count).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = fwd.tape.backward(fwd.logits, &loss_seed(logits_shape, &lw))?;

    let mut worst = 0.0f64;
    let mut worst_param = String::new();

    let mut scratch = model.clone();
    for (name, var) in &fwd.params {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; scratch.param_flat_len(name)]);
        let flat_len = analytic.len();
        for _ in 0..samples_per_tensor {
            let idx = rng.random_range(0..flat_len);
            let base = scratch.get_param_scalar(name, idx);

            scratch.set_param_scalar(name, idx, base + step);
            let fp = weighted_loss(&scratch.forward(images)?, &lw);
            scratch.set_param_scalar(name, idx, base - step);
            let fm = weighted_loss(&scratch.forward(images)?, &lw);
            scratch.set_param_scalar(name, idx, base);

            let numeric = (fp - fm) / (2.0 * step);
            let err = rel_error(analytic[idx], numeric);
            if err > worst {
                worst = err;
                worst_param = name.clone();
            }
        }
    }

    Ok(ModelGradcheck {
        max_err: worst,
        worst_param,
        samples_per_tensor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative_is_exact() {
        // f(t) = t^2 at t = 3: central differences are exact on quadratics.
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sine_derivative_at_zero() {
        let g = finite_diff_grad(|t| t[0].sin(), &[0.0], 1e-5);
        assert!((g[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn primitive_gradients_match_over_ten_seeds() {
        for seed in 0..10 {
            let worst = check_primitive_gradients(seed).unwrap();
            assert!(worst < 1e-6, "seed {seed}: worst primitive gradient error {worst:.3e}");
        }
    }
}
