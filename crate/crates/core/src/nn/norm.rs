//! Batch normalization (statistics over batch and space per channel) and
//! group normalization (statistics over channel groups and space per sample),
//! with exact backward passes through the normalization statistics.

use super::{check_channels, Mode, NormState};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    Batch,
    Group,
}

/// Retained forward state for the backward pass: the normalized activations
/// and one inverse standard deviation per statistics block.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Tensor5<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    kind: NormKind,
    channels_per_group: usize,
}

fn block_stats<T: Scalar>(data: &[T], indices: impl Iterator<Item = (usize, usize)> + Clone) -> (T, T) {
    let mut count = 0usize;
    let mut sum = T::zero();
    for (lo, hi) in indices.clone() {
        for v in &data[lo..hi] {
            sum = sum + *v;
        }
        count += hi - lo;
    }
    let mean = sum / T::from_usize_c(count);
    let mut var = T::zero();
    for (lo, hi) in indices {
        for v in &data[lo..hi] {
            let dv = *v - mean;
            var = var + dv * dv;
        }
    }
    (mean, var / T::from_usize_c(count))
}

/// Normalizes each channel over `(n, d, h, w)`. Train mode uses batch
/// statistics (biased variance) and advances the running statistics by
/// exponential moving average (unbiased variance, the usual convention);
/// eval mode reads the running statistics and leaves the state untouched.
/// With n = 1 the batch statistics reduce to per-channel spatial statistics.
pub fn batchnorm3d<T: Scalar>(
    input: &Tensor5<T>,
    state: &mut NormState<T>,
    mode: Mode,
) -> Result<(Tensor5<T>, Option<NormCache<T>>)> {
    check_channels("batchnorm3d", input, state.channels())?;
    let [n, c, d, h, w] = input.shape();
    let plane = d * h * w;
    let count = n * plane;
    let mut out = Tensor5::zeros(input.shape());

    match mode {
        Mode::Eval => {
            for bc in 0..c {
                let inv = T::one() / (state.running_var[bc] + state.epsilon).sqrt();
                let (mean, gamma, beta) = (state.running_mean[bc], state.gamma[bc], state.beta[bc]);
                for bn in 0..n {
                    let base = (bn * c + bc) * plane;
                    for i in base..base + plane {
                        out.data_mut()[i] = gamma * (input.data()[i] - mean) * inv + beta;
                    }
                }
            }
            Ok((out, None))
        }
        Mode::Train => {
            let mut xhat = Tensor5::zeros(input.shape());
            let mut inv_std = vec![T::zero(); c];
            for bc in 0..c {
                let ranges = (0..n).map(|bn| {
                    let base = (bn * c + bc) * plane;
                    (base, base + plane)
                });
                let (mean, var) = block_stats(input.data(), ranges.clone());
                let inv = T::one() / (var + state.epsilon).sqrt();
                inv_std[bc] = inv;
                let (gamma, beta) = (state.gamma[bc], state.beta[bc]);
                for (lo, hi) in ranges {
                    for i in lo..hi {
                        let xh = (input.data()[i] - mean) * inv;
                        xhat.data_mut()[i] = xh;
                        out.data_mut()[i] = gamma * xh + beta;
                    }
                }
                let m = state.momentum;
                let unbiased = if count > 1 {
                    var * T::from_usize_c(count) / T::from_usize_c(count - 1)
                } else {
                    var
                };
                state.running_mean[bc] = (T::one() - m) * state.running_mean[bc] + m * mean;
                state.running_var[bc] = (T::one() - m) * state.running_var[bc] + m * unbiased;
            }
            let cache = NormCache {
                xhat,
                inv_std,
                gamma: state.gamma.clone(),
                kind: NormKind::Batch,
                channels_per_group: 0,
            };
            Ok((out, Some(cache)))
        }
    }
}

/// Backward through the train-mode batch-norm transform.
/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm3d_grad<T: Scalar>(
    cache: &NormCache<T>,
    upstream: &Tensor5<T>,
) -> Result<(Tensor5<T>, Vec<T>, Vec<T>)> {
    if cache.kind != NormKind::Batch {
        return Err(Error::Shape("batchnorm3d_grad: cache is not from batchnorm3d".into()));
    }
    if upstream.shape() != cache.xhat.shape() {
        return Err(Error::Shape(format!(
            "batchnorm3d_grad: upstream shape {:?} does not match cached {:?}",
            upstream.shape(),
            cache.xhat.shape()
        )));
    }
    let [n, c, d, h, w] = upstream.shape();
    let plane = d * h * w;
    let count = T::from_usize_c(n * plane);
    let mut grad_input = Tensor5::zeros(upstream.shape());
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for bc in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for bn in 0..n {
            let base = (bn * c + bc) * plane;
            for i in base..base + plane {
                let dy = upstream.data()[i];
                sum_dy = sum_dy + dy;
                sum_dy_xh = sum_dy_xh + dy * cache.xhat.data()[i];
            }
        }
        grad_beta[bc] = sum_dy;
        grad_gamma[bc] = sum_dy_xh;
        let scale = cache.gamma[bc] * cache.inv_std[bc];
        let mean_dy = sum_dy / count;
        let mean_dy_xh = sum_dy_xh / count;
        for bn in 0..n {
            let base = (bn * c + bc) * plane;
            for i in base..base + plane {
                let dy = upstream.data()[i];
                grad_input.data_mut()[i] =
                    scale * (dy - mean_dy - cache.xhat.data()[i] * mean_dy_xh);
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

/// Normalizes each `(sample, group)` block over its channels and spatial
/// voxels, then applies per-channel gamma/beta. Identical in train and eval
/// modes; with channels-per-group 1 this is per-channel instance norm.
pub fn groupnorm3d<T: Scalar>(
    input: &Tensor5<T>,
    state: &NormState<T>,
) -> Result<(Tensor5<T>, NormCache<T>)> {
    check_channels("groupnorm3d", input, state.channels())?;
    let [n, c, d, h, w] = input.shape();
    let g = state.channels_per_group;
    if g == 0 || c % g != 0 {
        return Err(Error::Config(format!(
            "groupnorm3d: channels-per-group {} does not divide channel count {}",
            g, c
        )));
    }
    let groups = c / g;
    let plane = d * h * w;
    let mut out = Tensor5::zeros(input.shape());
    let mut xhat = Tensor5::zeros(input.shape());
    let mut inv_std = vec![T::zero(); n * groups];
    for bn in 0..n {
        for bg in 0..groups {
            let ranges = (bg * g..(bg + 1) * g).map(|bc| {
                let base = (bn * c + bc) * plane;
                (base, base + plane)
            });
            let (mean, var) = block_stats(input.data(), ranges);
            let inv = T::one() / (var + state.epsilon).sqrt();
            inv_std[bn * groups + bg] = inv;
            for bc in bg * g..(bg + 1) * g {
                let (gamma, beta) = (state.gamma[bc], state.beta[bc]);
                let base = (bn * c + bc) * plane;
                for i in base..base + plane {
                    let xh = (input.data()[i] - mean) * inv;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = gamma * xh + beta;
                }
            }
        }
    }
    let cache = NormCache {
        xhat,
        inv_std,
        gamma: state.gamma.clone(),
        kind: NormKind::Group,
        channels_per_group: g,
    };
    Ok((out, cache))
}

/// Backward through group norm. Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn groupnorm3d_grad<T: Scalar>(
    cache: &NormCache<T>,
    upstream: &Tensor5<T>,
) -> Result<(Tensor5<T>, Vec<T>, Vec<T>)> {
    if cache.kind != NormKind::Group {
        return Err(Error::Shape("groupnorm3d_grad: cache is not from groupnorm3d".into()));
    }
    if upstream.shape() != cache.xhat.shape() {
        return Err(Error::Shape(format!(
            "groupnorm3d_grad: upstream shape {:?} does not match cached {:?}",
            upstream.shape(),
            cache.xhat.shape()
        )));
    }
    let [n, c, d, h, w] = upstream.shape();
    let g = cache.channels_per_group;
    let groups = c / g;
    let plane = d * h * w;
    let count = T::from_usize_c(g * plane);
    let mut grad_input = Tensor5::zeros(upstream.shape());
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for bn in 0..n {
        for bg in 0..groups {
            // Per-element chain value g_i = dy_i * gamma(channel of i); the
            // block statistics couple all elements of the block.
            let mut sum_g = T::zero();
            let mut sum_g_xh = T::zero();
            for bc in bg * g..(bg + 1) * g {
                let base = (bn * c + bc) * plane;
                for i in base..base + plane {
                    let gv = upstream.data()[i] * cache.gamma[bc];
                    sum_g = sum_g + gv;
                    sum_g_xh = sum_g_xh + gv * cache.xhat.data()[i];
                }
            }
            let inv = cache.inv_std[bn * groups + bg];
            let mean_g = sum_g / count;
            let mean_g_xh = sum_g_xh / count;
            for bc in bg * g..(bg + 1) * g {
                let base = (bn * c + bc) * plane;
                for i in base..base + plane {
                    let dy = upstream.data()[i];
                    let xh = cache.xhat.data()[i];
                    grad_input.data_mut()[i] =
                        inv * (dy * cache.gamma[bc] - mean_g - xh * mean_g_xh);
                    grad_gamma[bc] = grad_gamma[bc] + dy * xh;
                    grad_beta[bc] = grad_beta[bc] + dy;
                }
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngExt, SeedableRng};

    fn random_tensor(shape: [usize; 5], rng: &mut impl Rng) -> Tensor5<f64> {
        let data = (0..shape.iter().product()).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor5::from_vec(shape, data).unwrap()
    }

    #[test]
    fn bn_train_normalizes_each_channel() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let input = random_tensor([2, 3, 4, 4, 4], &mut r);
        let mut state = NormState::<f64>::new(3, 0.1, 1e-5, 1);
        let (out, _) = batchnorm3d(&input, &mut state, Mode::Train).unwrap();
        let plane = 64;
        for bc in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for bn in 0..2 {
                let base = (bn * 3 + bc) * plane;
                for i in base..base + plane {
                    sum += out.data()[i];
                    sq += out.data()[i] * out.data()[i];
                }
            }
            let mean = sum / 128.0;
            let var = sq / 128.0 - mean * mean;
            assert!(mean.abs() <= 1e-6, "channel {bc} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "channel {bc} var {var}");
        }
    }

    #[test]
    fn constant_channel_outputs_beta() {
        let input = Tensor5::filled([1, 2, 2, 2, 2], 5.0f64);
        let mut state = NormState::<f64>::new(2, 0.1, 1e-5, 1);
        state.beta = vec![0.7, -0.3];
        let (out, _) = batchnorm3d(&input, &mut state, Mode::Train).unwrap();
        for bc in 0..2 {
            for i in 0..8 {
                let v = out.data()[bc * 8 + i];
                assert!((v - state.beta[bc]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bn_eval_is_idempotent_on_state() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let input = random_tensor([1, 2, 4, 4, 4], &mut r);
        let mut state = NormState::<f64>::new(2, 0.1, 1e-5, 1);
        batchnorm3d(&input, &mut state, Mode::Train).unwrap();
        let snapshot = state.clone();
        let (a, cache) = batchnorm3d(&input, &mut state, Mode::Eval).unwrap();
        let (b, _) = batchnorm3d(&input, &mut state, Mode::Eval).unwrap();
        assert!(cache.is_none());
        assert_eq!(a, b);
        assert_eq!(state, snapshot);
    }

    #[test]
    fn gn_single_group_normalizes_whole_sample() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let input = random_tensor([1, 4, 2, 2, 2], &mut r);
        let state = NormState::<f64>::new(4, 0.1, 1e-5, 4); // one group of all channels
        let (out, _) = groupnorm3d(&input, &state).unwrap();
        let n = out.len() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gn_constant_input_outputs_beta() {
        let input = Tensor5::filled([1, 2, 2, 2, 2], -4.0f64);
        let mut state = NormState::<f64>::new(2, 0.1, 1e-5, 1);
        state.beta = vec![1.5, 2.5];
        let (out, _) = groupnorm3d(&input, &state).unwrap();
        for bc in 0..2 {
            for i in 0..8 {
                assert!((out.data()[bc * 8 + i] - state.beta[bc]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gn_rejects_non_divisible_grouping() {
        let input = Tensor5::<f64>::zeros([1, 3, 2, 2, 2]);
        let state = NormState::<f64>::new(3, 0.1, 1e-5, 2);
        assert!(groupnorm3d(&input, &state).is_err());
    }

    #[test]
    fn gn_is_mode_independent_and_deterministic() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let input = random_tensor([2, 4, 2, 2, 2], &mut r);
        let state = NormState::<f64>::new(4, 0.1, 1e-5, 2);
        let (a, _) = groupnorm3d(&input, &state).unwrap();
        let (b, _) = groupnorm3d(&input, &state).unwrap();
        assert_eq!(a, b);
    }
}
