//! Shared randomized-check machinery: every helper draws small random
//! instances, runs a production kernel against its brute-force oracle (or a
//! finite-difference gradient), and panics with a description on the first
//! mismatch. Both the kernel test suite and the acceptance suite call these.

#![allow(dead_code)]

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxseg::nn::{self, ConvWeights, Mode, NormState};
use voxseg::oracles;
use voxseg::tensor::Tensor5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_t5_f64(shape: [usize; 5], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor5<f64> {
    let data = (0..shape.iter().product()).map(|_| r.random_range(lo..hi)).collect();
    Tensor5::from_vec(shape, data).unwrap()
}

fn assert_close_abs(got: &[f32], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let diff = (g as f64 - w).abs();
        assert!(diff <= tol, "{what}: element {i} differs by {diff:.3e} ({g} vs {w})");
    }
}

fn assert_rel_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let e = oracles::rel_err(g, w);
        assert!(e <= tol, "{what}: element {i} rel err {e:.3e} ({g} vs {w})");
    }
}

// ---------------------------------------------------------------------------
// Oracle equivalence (criterion 1): f32 production vs f64 brute force.
// ---------------------------------------------------------------------------

pub fn check_conv3d_oracle(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=2usize);
        let c_in = r.random_range(1..=4usize);
        let c_out = r.random_range(1..=3usize);
        let k = *[1usize, 2, 3].get(r.random_range(0..3usize)).unwrap();
        let pad = r.random_range(0..=1usize);
        let stride = r.random_range(1..=2usize);
        let sp = r.random_range(k.max(3)..=8usize);
        let input = random_t5_f64([n, c_in, sp, sp, sp], -1.0, 1.0, &mut r);
        let weight = random_t5_f64([c_out, c_in, k, k, k], -1.0, 1.0, &mut r);
        let bias: Vec<f64> = (0..c_out).map(|_| r.random_range(-1.0..1.0)).collect();

        let (want, oshape) = oracles::naive_conv3d(
            input.data(),
            input.shape(),
            weight.data(),
            weight.shape(),
            &bias,
            [pad; 3],
            [stride; 3],
        );
        let w32 = ConvWeights::new(weight.cast::<f32>(), bias.iter().map(|&b| b as f32).collect()).unwrap();
        let got = nn::conv3d(&input.cast::<f32>(), &w32, [pad; 3], [stride; 3]).unwrap();
        assert_eq!(got.shape(), oshape, "conv3d instance {inst}: shape");
        assert_close_abs(got.data(), &want, 1e-5, &format!("conv3d instance {inst}"));
    }
}

pub fn check_transposed_conv3d_oracle(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=2usize);
        let c_in = r.random_range(1..=4usize);
        let c_out = r.random_range(1..=3usize);
        let sp = r.random_range(1..=4usize);
        let input = random_t5_f64([n, c_in, sp, sp, sp], -1.0, 1.0, &mut r);
        let weight = random_t5_f64([c_out, c_in, 2, 2, 2], -1.0, 1.0, &mut r);
        let bias: Vec<f64> = (0..c_out).map(|_| r.random_range(-1.0..1.0)).collect();

        let (want, oshape) = oracles::naive_transposed_conv3d(
            input.data(),
            input.shape(),
            weight.data(),
            weight.shape(),
            &bias,
        );
        let w32 = ConvWeights::new(weight.cast::<f32>(), bias.iter().map(|&b| b as f32).collect()).unwrap();
        let got = nn::transposed_conv3d(&input.cast::<f32>(), &w32).unwrap();
        assert_eq!(got.shape(), oshape, "transposed_conv3d instance {inst}: shape");
        assert_close_abs(got.data(), &want, 1e-5, &format!("transposed_conv3d instance {inst}"));
    }
}

pub fn check_maxpool3d_oracle(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=2usize);
        let c = r.random_range(1..=4usize);
        let sp = 2 * r.random_range(1..=4usize);
        let input = random_t5_f64([n, c, sp, sp, sp], -1.0, 1.0, &mut r);
        let (want, want_arg, oshape) = oracles::naive_maxpool3d(input.data(), input.shape());
        let (got, got_arg) = nn::maxpool3d(&input.cast::<f32>()).unwrap();
        assert_eq!(got.shape(), oshape, "maxpool3d instance {inst}: shape");
        assert_close_abs(got.data(), &want, 1e-5, &format!("maxpool3d instance {inst}"));
        let got_arg: Vec<usize> = got_arg.iter().map(|&a| a as usize).collect();
        assert_eq!(got_arg, want_arg, "maxpool3d instance {inst}: argmax");
    }
}

pub fn check_batchnorm3d_oracle(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=2usize);
        let c = r.random_range(1..=4usize);
        let sp = r.random_range(2..=8usize);
        let input = random_t5_f64([n, c, sp, sp, sp], -2.0, 2.0, &mut r);
        let gamma: Vec<f64> = (0..c).map(|_| r.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
        let eps = 1e-5;

        let want = oracles::naive_batchnorm_train(input.data(), input.shape(), &gamma, &beta, eps);
        let mut state = NormState::<f32>::new(c, 0.1, eps, 1);
        state.gamma = gamma.iter().map(|&g| g as f32).collect();
        state.beta = beta.iter().map(|&b| b as f32).collect();
        let (got, _) = nn::batchnorm3d(&input.cast::<f32>(), &mut state, Mode::Train).unwrap();
        assert_close_abs(got.data(), &want, 1e-5, &format!("batchnorm3d instance {inst}"));
    }
}

pub fn check_groupnorm3d_oracle(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=2usize);
        let cpg = r.random_range(1..=3usize);
        let groups = r.random_range(1..=2usize);
        let c = cpg * groups;
        let sp = r.random_range(2..=8usize);
        let input = random_t5_f64([n, c, sp, sp, sp], -2.0, 2.0, &mut r);
        let gamma: Vec<f64> = (0..c).map(|_| r.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
        let eps = 1e-5;

        let want = oracles::naive_groupnorm(input.data(), input.shape(), &gamma, &beta, eps, cpg);
        let mut state = NormState::<f32>::new(c, 0.1, eps, cpg);
        state.gamma = gamma.iter().map(|&g| g as f32).collect();
        state.beta = beta.iter().map(|&b| b as f32).collect();
        let (got, _) = nn::groupnorm3d(&input.cast::<f32>(), &state).unwrap();
        assert_close_abs(got.data(), &want, 1e-5, &format!("groupnorm3d instance {inst}"));
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks (criterion 2), double precision.
// ---------------------------------------------------------------------------

/// Weighted-sum functional: L(x) = sum(upstream .* op(x)). The analytic
/// gradient of L is exactly what each `_grad` kernel returns.
fn fd_vs_analytic(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    spec: &oracles::FiniteDiffSpec,
    what: &str,
) {
    let fd = oracles::finite_diff_grad(f, x, spec.step);
    assert_rel_close(analytic, &fd, spec.tol, what);
}

pub fn fd_check_conv3d(instances: usize, seed: u64) {
    let spec = oracles::FiniteDiffSpec::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = 1;
        let c_in = r.random_range(1..=2usize);
        let c_out = r.random_range(1..=2usize);
        let k = *[1usize, 2, 3].get(r.random_range(0..3usize)).unwrap();
        let pad = r.random_range(0..=1usize);
        let sp = r.random_range(k.max(3)..=5usize);
        let ishape = [n, c_in, sp, sp, sp];
        let wshape = [c_out, c_in, k, k, k];
        let input = random_t5_f64(ishape, -1.0, 1.0, &mut r);
        let weight = random_t5_f64(wshape, -1.0, 1.0, &mut r);
        let bias: Vec<f64> = (0..c_out).map(|_| r.random_range(-0.5..0.5)).collect();
        let w = ConvWeights::new(weight.clone(), bias.clone()).unwrap();
        let out = nn::conv3d(&input, &w, [pad; 3], [1, 1, 1]).unwrap();
        let upstream = random_t5_f64(out.shape(), -1.0, 1.0, &mut r);
        let (gi, gw) = nn::conv3d_grad(&input, &w, [pad; 3], [1, 1, 1], &upstream).unwrap();

        let what = format!("conv3d fd instance {inst}");
        let up = upstream.clone();
        let wref = w.clone();
        fd_vs_analytic(
            &mut |x| {
                let t = Tensor5::from_vec(ishape, x.to_vec()).unwrap();
                let o = nn::conv3d(&t, &wref, [pad; 3], [1, 1, 1]).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            input.data(),
            gi.data(),
            &spec,
            &format!("{what}: grad_input"),
        );
        let iref = input.clone();
        let bias2 = bias.clone();
        fd_vs_analytic(
            &mut |wx| {
                let wt = ConvWeights::new(Tensor5::from_vec(wshape, wx.to_vec()).unwrap(), bias2.clone()).unwrap();
                let o = nn::conv3d(&iref, &wt, [pad; 3], [1, 1, 1]).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            weight.data(),
            gw.weight.data(),
            &spec,
            &format!("{what}: grad_weight"),
        );
        let wref2 = weight.clone();
        fd_vs_analytic(
            &mut |bx| {
                let wt = ConvWeights::new(wref2.clone(), bx.to_vec()).unwrap();
                let o = nn::conv3d(&iref, &wt, [pad; 3], [1, 1, 1]).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            &bias,
            &gw.bias,
            &spec,
            &format!("{what}: grad_bias"),
        );
    }
}

pub fn fd_check_transposed_conv3d(instances: usize, seed: u64) {
    let spec = oracles::FiniteDiffSpec::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let c_in = r.random_range(1..=2usize);
        let c_out = r.random_range(1..=2usize);
        let sp = r.random_range(1..=3usize);
        let ishape = [1, c_in, sp, sp, sp];
        let wshape = [c_out, c_in, 2, 2, 2];
        let input = random_t5_f64(ishape, -1.0, 1.0, &mut r);
        let weight = random_t5_f64(wshape, -1.0, 1.0, &mut r);
        let bias: Vec<f64> = (0..c_out).map(|_| r.random_range(-0.5..0.5)).collect();
        let w = ConvWeights::new(weight.clone(), bias.clone()).unwrap();
        let out = nn::transposed_conv3d(&input, &w).unwrap();
        let upstream = random_t5_f64(out.shape(), -1.0, 1.0, &mut r);
        let (gi, gw) = nn::transposed_conv3d_grad(&input, &w, &upstream).unwrap();

        let what = format!("transposed_conv3d fd instance {inst}");
        let up = upstream.clone();
        let wref = w.clone();
        fd_vs_analytic(
            &mut |x| {
                let t = Tensor5::from_vec(ishape, x.to_vec()).unwrap();
                let o = nn::transposed_conv3d(&t, &wref).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            input.data(),
            gi.data(),
            &spec,
            &format!("{what}: grad_input"),
        );
        let iref = input.clone();
        let bias2 = bias.clone();
        fd_vs_analytic(
            &mut |wx| {
                let wt = ConvWeights::new(Tensor5::from_vec(wshape, wx.to_vec()).unwrap(), bias2.clone()).unwrap();
                let o = nn::transposed_conv3d(&iref, &wt).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            weight.data(),
            gw.weight.data(),
            &spec,
            &format!("{what}: grad_weight"),
        );
        let wref2 = weight.clone();
        fd_vs_analytic(
            &mut |bx| {
                let wt = ConvWeights::new(wref2.clone(), bx.to_vec()).unwrap();
                let o = nn::transposed_conv3d(&iref, &wt).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            &bias,
            &gw.bias,
            &spec,
            &format!("{what}: grad_bias"),
        );
    }
}

pub fn fd_check_maxpool3d(instances: usize, seed: u64) {
    let spec = oracles::FiniteDiffSpec::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = 1;
        let c = r.random_range(1..=2usize);
        let sp = 2 * r.random_range(1..=3usize);
        let ishape = [n, c, sp, sp, sp];
        // Tie-free with margins far above the fd step: a shuffled ramp.
        let len: usize = ishape.iter().product();
        let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.05).collect();
        for i in (1..len).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        let input = Tensor5::from_vec(ishape, vals).unwrap();
        let (out, arg) = nn::maxpool3d(&input).unwrap();
        let upstream = random_t5_f64(out.shape(), -1.0, 1.0, &mut r);
        let gi = nn::maxpool3d_grad(ishape, &arg, &upstream).unwrap();

        let up = upstream.clone();
        fd_vs_analytic(
            &mut |x| {
                let t = Tensor5::from_vec(ishape, x.to_vec()).unwrap();
                let (o, _) = nn::maxpool3d(&t).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            input.data(),
            gi.data(),
            &spec,
            &format!("maxpool3d fd instance {inst}"),
        );
    }
}

pub fn fd_check_relu(instances: usize, seed: u64) {
    let spec = oracles::FiniteDiffSpec::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let ishape = [1, 2, 3, 3, 3];
        // Keep activations away from the kink at 0.
        let data: Vec<f64> = (0..54)
            .map(|_| {
                let mag = r.random_range(0.05..1.0);
                if r.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let input = Tensor5::from_vec(ishape, data).unwrap();
        let upstream = random_t5_f64(ishape, -1.0, 1.0, &mut r);
        let gi = nn::relu_grad(&input, &upstream);
        let up = upstream.clone();
        fd_vs_analytic(
            &mut |x| {
                let t = Tensor5::from_vec(ishape, x.to_vec()).unwrap();
                nn::relu(&t).data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            input.data(),
            gi.data(),
            &spec,
            &format!("relu fd instance {inst}"),
        );
    }
}

pub fn fd_check_batchnorm3d(instances: usize, seed: u64) {
    let spec = oracles::FiniteDiffSpec::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=2usize);
        let c = r.random_range(1..=2usize);
        let sp = r.random_range(2..=4usize);
        let ishape = [n, c, sp, sp, sp];
        let input = random_t5_f64(ishape, -2.0, 2.0, &mut r);
        let mut state = NormState::<f64>::new(c, 0.1, 1e-5, 1);
        state.gamma = (0..c).map(|_| r.random_range(0.5..1.5)).collect();
        state.beta = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
        let (out, cache) = nn::batchnorm3d(&input, &mut state.clone(), Mode::Train).unwrap();
        let cache = cache.unwrap();
        let upstream = random_t5_f64(out.shape(), -1.0, 1.0, &mut r);
        let (gi, ggamma, gbeta) = nn::batchnorm3d_grad(&cache, &upstream).unwrap();

        let what = format!("batchnorm3d fd instance {inst}");
        let up = upstream.clone();
        let st = state.clone();
        fd_vs_analytic(
            &mut |x| {
                let t = Tensor5::from_vec(ishape, x.to_vec()).unwrap();
                let (o, _) = nn::batchnorm3d(&t, &mut st.clone(), Mode::Train).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            input.data(),
            gi.data(),
            &spec,
            &format!("{what}: grad_input"),
        );
        let iref = input.clone();
        let st2 = state.clone();
        fd_vs_analytic(
            &mut |g| {
                let mut s = st2.clone();
                s.gamma = g.to_vec();
                let (o, _) = nn::batchnorm3d(&iref, &mut s, Mode::Train).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            &state.gamma,
            &ggamma,
            &spec,
            &format!("{what}: grad_gamma"),
        );
        let st3 = state.clone();
        fd_vs_analytic(
            &mut |b| {
                let mut s = st3.clone();
                s.beta = b.to_vec();
                let (o, _) = nn::batchnorm3d(&iref, &mut s, Mode::Train).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            &state.beta,
            &gbeta,
            &spec,
            &format!("{what}: grad_beta"),
        );
    }
}

pub fn fd_check_groupnorm3d(instances: usize, seed: u64) {
    let spec = oracles::FiniteDiffSpec::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=2usize);
        let cpg = r.random_range(1..=2usize);
        let groups = r.random_range(1..=2usize);
        let c = cpg * groups;
        let sp = r.random_range(2..=4usize);
        let ishape = [n, c, sp, sp, sp];
        let input = random_t5_f64(ishape, -2.0, 2.0, &mut r);
        let mut state = NormState::<f64>::new(c, 0.1, 1e-5, cpg);
        state.gamma = (0..c).map(|_| r.random_range(0.5..1.5)).collect();
        state.beta = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
        let (out, cache) = nn::groupnorm3d(&input, &state).unwrap();
        let upstream = random_t5_f64(out.shape(), -1.0, 1.0, &mut r);
        let (gi, ggamma, gbeta) = nn::groupnorm3d_grad(&cache, &upstream).unwrap();

        let what = format!("groupnorm3d fd instance {inst}");
        let up = upstream.clone();
        let st = state.clone();
        fd_vs_analytic(
            &mut |x| {
                let t = Tensor5::from_vec(ishape, x.to_vec()).unwrap();
                let (o, _) = nn::groupnorm3d(&t, &st).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            input.data(),
            gi.data(),
            &spec,
            &format!("{what}: grad_input"),
        );
        let iref = input.clone();
        let st2 = state.clone();
        fd_vs_analytic(
            &mut |g| {
                let mut s = st2.clone();
                s.gamma = g.to_vec();
                let (o, _) = nn::groupnorm3d(&iref, &s).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            &state.gamma,
            &ggamma,
            &spec,
            &format!("{what}: grad_gamma"),
        );
        let st3 = state.clone();
        fd_vs_analytic(
            &mut |b| {
                let mut s = st3.clone();
                s.beta = b.to_vec();
                let (o, _) = nn::groupnorm3d(&iref, &s).unwrap();
                o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            &state.beta,
            &gbeta,
            &spec,
            &format!("{what}: grad_beta"),
        );
    }
}

pub fn fd_check_softmax_ce(instances: usize, seed: u64) {
    let spec = oracles::FiniteDiffSpec::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=2usize);
        let sp = r.random_range(2..=4usize);
        let lshape = [n, 2, sp, sp, sp];
        let logits = random_t5_f64(lshape, -2.0, 2.0, &mut r);
        let targets: Vec<u8> = (0..n * sp * sp * sp).map(|_| r.random_range(0..=1u8)).collect();
        let (_, grad) = nn::softmax_cross_entropy(&logits, &targets).unwrap();
        let t = targets.clone();
        fd_vs_analytic(
            &mut |x| {
                let l = Tensor5::from_vec(lshape, x.to_vec()).unwrap();
                nn::softmax_cross_entropy(&l, &t).unwrap().0
            },
            logits.data(),
            grad.data(),
            &spec,
            &format!("softmax_ce fd instance {inst}"),
        );
    }
}

pub fn fd_check_concat(instances: usize, seed: u64) {
    let spec = oracles::FiniteDiffSpec::default();
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(1..=2usize);
        let ca = r.random_range(1..=2usize);
        let cb = r.random_range(1..=2usize);
        let sp = r.random_range(2..=3usize);
        let a = random_t5_f64([n, ca, sp, sp, sp], -1.0, 1.0, &mut r);
        let b = random_t5_f64([n, cb, sp, sp, sp], -1.0, 1.0, &mut r);
        let merged = nn::concat_channels(&a, &b).unwrap();
        let upstream = random_t5_f64(merged.shape(), -1.0, 1.0, &mut r);
        let (ga, gb) = nn::concat_channels_grad(&upstream, ca).unwrap();
        let up = upstream.clone();
        let bref = b.clone();
        let ash = a.shape();
        fd_vs_analytic(
            &mut |x| {
                let t = Tensor5::from_vec(ash, x.to_vec()).unwrap();
                let m = nn::concat_channels(&t, &bref).unwrap();
                m.data().iter().zip(up.data()).map(|(p, q)| p * q).sum()
            },
            a.data(),
            ga.data(),
            &spec,
            &format!("concat fd instance {inst}: grad_a"),
        );
        let aref = a.clone();
        let bsh = b.shape();
        fd_vs_analytic(
            &mut |x| {
                let t = Tensor5::from_vec(bsh, x.to_vec()).unwrap();
                let m = nn::concat_channels(&aref, &t).unwrap();
                m.data().iter().zip(up.data()).map(|(p, q)| p * q).sum()
            },
            b.data(),
            gb.data(),
            &spec,
            &format!("concat fd instance {inst}: grad_b"),
        );
    }
}

// ---------------------------------------------------------------------------
// Integer-exact filter and metric oracles.
// ---------------------------------------------------------------------------

pub fn check_median3d_oracle(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for inst in 0..instances {
        let d = r.random_range(3..=8usize);
        let h = r.random_range(3..=10usize);
        let w = r.random_range(3..=10usize);
        let radius = r.random_range(1..=2usize);
        let data: Vec<u8> = (0..d * h * w).map(|_| r.random()).collect();
        let want = voxseg::oracles::naive_median3d_u8(&data, [d, h, w], radius);
        let vol = voxseg::volume::Volume::new([d, h, w], 1.0, voxseg::volume::VoxelData::U8(data)).unwrap();
        let got = voxseg::preprocess::median3d(&vol, radius).unwrap();
        assert_eq!(got.as_u8().unwrap(), &want[..], "median3d instance {inst} (r={radius})");
    }
}

pub fn check_bernsen_oracle(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for inst in 0..instances {
        let d = r.random_range(1..=3usize);
        let h = r.random_range(4..=16usize);
        let w = r.random_range(4..=16usize);
        let radius = r.random_range(1..=3usize);
        let c_min = r.random_range(0..=60u8);
        let low = r.random_range(0..=255u8);
        let data: Vec<u8> = (0..d * h * w).map(|_| r.random()).collect();
        let want = voxseg::oracles::naive_bernsen(&data, [d, h, w], radius, c_min, low);
        let vol = voxseg::volume::Volume::new([d, h, w], 1.0, voxseg::volume::VoxelData::U8(data)).unwrap();
        let params = voxseg::preprocess::BernsenParams { window_radius: radius, c_min, low_level: low };
        let got = voxseg::preprocess::bernsen_threshold(&vol, &params).unwrap();
        assert_eq!(got.as_u8().unwrap(), &want[..], "bernsen instance {inst} (r={radius} c={c_min} L={low})");
    }
}

pub fn check_confusion_oracle(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for inst in 0..instances {
        let n = r.random_range(8..=128usize);
        let pred: Vec<u8> = (0..n).map(|_| r.random_range(0..=1u8)).collect();
        let truth: Vec<u8> = (0..n).map(|_| r.random_range(0..=1u8)).collect();
        let (tp, fp, fneg, tn) = voxseg::oracles::naive_confusion(&pred, &truth);
        let pv = voxseg::volume::Volume::new([1, 1, n], 1.0, voxseg::volume::VoxelData::U8(pred)).unwrap();
        let tv = voxseg::volume::Volume::new([1, 1, n], 1.0, voxseg::volume::VoxelData::U8(truth)).unwrap();
        let c = voxseg::metrics::confusion_counts(&pv, &tv).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fneg, tn), "confusion instance {inst}");
        assert_eq!(c.total(), n as u64);
    }
}

pub fn check_nlm_oracle(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for inst in 0..instances {
        let h = r.random_range(6..=16usize);
        let w = r.random_range(6..=16usize);
        let h_param = r.random_range(0.02..0.2f64);
        let pr = r.random_range(1..=2usize);
        let sr = r.random_range(2..=4usize);
        // Unit-scale noisy slice; the f32 production values widen exactly.
        let f32s: Vec<f32> = (0..h * w).map(|_| r.random_range(0.0..1.0f32)).collect();
        let data: Vec<f64> = f32s.iter().map(|&x| x as f64).collect();
        let want = voxseg::oracles::naive_nlm2d(&data, h, w, h_param, 0.0, pr, sr);
        let vol = voxseg::volume::Volume::new([1, h, w], 1.0, voxseg::volume::VoxelData::F32(f32s)).unwrap();
        let got = voxseg::preprocess::nlm_denoise(&vol, h_param, pr, sr).unwrap();
        for (i, (&g, &wv)) in got.as_f32().unwrap().iter().zip(&want).enumerate() {
            assert!(
                (g as f64 - wv).abs() <= 1e-6,
                "nlm instance {inst} pixel {i}: {g} vs {wv}"
            );
        }
    }
}
