//! Forward kernels against direct nested-loop oracles.

use icdarts_autograd::{Conv2dCfg, PoolCfg, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Input value at a possibly out-of-range coordinate, zero outside the image.
fn at(x: &Tensor<f64>, n: usize, c: usize, y: isize, xx: isize) -> Option<f64> {
    let s = x.shape();
    if y < 0 || xx < 0 || y as usize >= s[2] || xx as usize >= s[3] {
        return None;
    }
    Some(x.data()[((n * s[1] + c) * s[2] + y as usize) * s[3] + xx as usize])
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, cfg: Conv2dCfg) -> (Vec<usize>, Vec<f64>) {
    let (n, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let cout_g = cout / cfg.groups;
    let ext = |len: usize, k: usize, s: usize, p: usize, d: usize| (len + 2 * p - d * (k - 1) - 1) / s + 1;
    let ho = ext(h, kh, cfg.stride.0, cfg.padding.0, cfg.dilation.0);
    let wo = ext(wd, kw, cfg.stride.1, cfg.padding.1, cfg.dilation.1);
    let mut out = Vec::new();
    for b in 0..n {
        for o in 0..cout {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * cfg.stride.0 + i * cfg.dilation.0) as isize - cfg.padding.0 as isize;
                                let xx = (ox * cfg.stride.1 + j * cfg.dilation.1) as isize - cfg.padding.1 as isize;
                                if let Some(v) = at(x, b, g * cin_g + ci, y, xx) {
                                    acc += v * w.data()[((o * cin_g + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, cout, ho, wo], out)
}

/// Max over the window with padded positions read as zero, and mean over
/// the in-image positions only.
fn pool_oracle(x: &Tensor<f64>, cfg: PoolCfg, max: bool) -> Vec<f64> {
    let s = x.shape();
    let ext = |len: usize| (len + 2 * cfg.padding - cfg.kernel) / cfg.stride + 1;
    let mut out = Vec::new();
    for b in 0..s[0] {
        for c in 0..s[1] {
            for oy in 0..ext(s[2]) {
                for ox in 0..ext(s[3]) {
                    let mut vals = Vec::new();
                    let mut padded = false;
                    for i in 0..cfg.kernel {
                        for j in 0..cfg.kernel {
                            let y = (oy * cfg.stride + i) as isize - cfg.padding as isize;
                            let xx = (ox * cfg.stride + j) as isize - cfg.padding as isize;
                            match at(x, b, c, y, xx) {
                                Some(v) => vals.push(v),
                                None => padded = true,
                            }
                        }
                    }
                    out.push(if max {
                        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        if padded { m.max(0.0) } else { m }
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    });
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dense_conv_matches_loops(
        cin in 1usize..4, cout in 1usize..4, k in 1usize..4, stride in 1usize..3,
        pad in 0usize..3, dil in 1usize..3, side in 5usize..9, seed in any::<u64>(),
    ) {
        let cfg = Conv2dCfg { stride: (stride, stride), padding: (pad, pad), dilation: (dil, dil), groups: 1 };
        let x = random(&[2, cin, side, side + 1], seed);
        let w = random(&[cout, cin, k, k], seed ^ 1);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, None, cfg);
        let (shape, expected) = conv_oracle(&x, &w, cfg);
        prop_assert_eq!(tape.value(y).shape(), &shape[..]);
        prop_assert!(close(tape.value(y).data(), &expected));
    }

    #[test]
    fn depthwise_conv_matches_loops(
        c in 1usize..5, k in 1usize..6, stride in 1usize..3, pad in 0usize..3,
        dil in 1usize..3, side in 6usize..10, seed in any::<u64>(),
    ) {
        prop_assume!(side + 2 * pad > dil * (k - 1));
        let cfg = Conv2dCfg { stride: (stride, stride), padding: (pad, pad), dilation: (dil, dil), groups: c };
        let x = random(&[2, c, side, side], seed);
        let w = random(&[c, 1, k, k], seed ^ 2);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, None, cfg);
        let (shape, expected) = conv_oracle(&x, &w, cfg);
        prop_assert_eq!(tape.value(y).shape(), &shape[..]);
        prop_assert!(close(tape.value(y).data(), &expected));
    }

    #[test]
    fn pooling_matches_loops(k in 1usize..6, stride in 1usize..3, side in 5usize..9, seed in any::<u64>()) {
        let pad = k / 2;
        let cfg = PoolCfg::new(k, stride, pad);
        let x = random(&[2, 3, side, side], seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mx = tape.max_pool(xv, cfg);
        let av = tape.avg_pool(xv, cfg);
        prop_assert!(close(tape.value(mx).data(), &pool_oracle(&x, cfg, true)));
        prop_assert!(close(tape.value(av).data(), &pool_oracle(&x, cfg, false)));
    }

    #[test]
    fn softmax_sums_to_one(n in 1usize..16, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[n], seed).map(|v| v * 30.0));
        let p = tape.softmax(x);
        prop_assert!((tape.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(tape.value(p).data().iter().all(|v| *v >= 0.0));
    }
}
