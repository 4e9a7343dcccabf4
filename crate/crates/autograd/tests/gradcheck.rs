//! Central finite-difference checks of every differentiable op, in f64.

use icdarts_autograd::{Activation, Conv2dCfg, PoolCfg, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces any output to a scalar through a fixed random projection so that
/// every output element carries a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = tape.reshape(y, &[1, n]);
    let r = tape.constant(random(&[1, n], &mut rng));
    let out = tape.linear(flat, r, None);
    tape.sum_all(out)
}

/// Norm-wise relative error between analytic and numeric gradients of every input.
fn check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let y = build(&mut tape, &vars);
        let l = project(&mut tape, y, 99);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let y = build(&mut tape, &vars);
    let loss = project(&mut tape, y, 99);
    let grads = tape.backward(loss);

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric: Vec<f64> = (0..input.len())
            .map(|k| {
                let mut vals = inputs.to_vec();
                vals[i].data_mut()[k] += EPS;
                let up = eval(&vals);
                vals[i].data_mut()[k] -= 2.0 * EPS;
                let down = eval(&vals);
                (up - down) / (2.0 * EPS)
            })
            .collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn assert_close(name: &str, err: f64) {
    assert!(err <= TOL, "{name}: relative gradient error {err:e} exceeds {TOL:e}");
}

#[test]
fn conv2d_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 4, 4, 4], &mut rng);
    let cases: Vec<(&str, Vec<usize>, Conv2dCfg, bool)> = vec![
        ("dense 3x3", vec![3, 4, 3, 3], Conv2dCfg::new(1, 1), true),
        ("strided 3x3", vec![5, 4, 3, 3], Conv2dCfg::new(2, 1), false),
        ("dilated 3x3", vec![4, 4, 3, 3], Conv2dCfg::new(1, 2).dilated(2), false),
        ("depthwise 5x5", vec![4, 1, 5, 5], Conv2dCfg::new(1, 2).grouped(4), false),
        ("depthwise strided", vec![4, 1, 3, 3], Conv2dCfg::new(2, 1).grouped(4), false),
        ("pointwise", vec![6, 4, 1, 1], Conv2dCfg::new(1, 0), true),
        ("pointwise strided", vec![2, 4, 1, 1], Conv2dCfg::new(2, 0), false),
    ];
    for (name, wshape, cfg, bias) in cases {
        let w = random(&wshape, &mut rng);
        let mut inputs = vec![x.clone(), w];
        if bias {
            inputs.push(random(&[wshape[0]], &mut rng));
        }
        let err = check(&inputs, |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), cfg));
        assert_close(name, err);
    }
}

#[test]
fn asymmetric_factorized_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 6, 6], &mut rng);
    let w1 = random(&[3, 3, 1, 5], &mut rng);
    let w2 = random(&[3, 3, 5, 1], &mut rng);
    let c1 = Conv2dCfg { stride: (1, 2), padding: (0, 2), dilation: (1, 1), groups: 1 };
    let c2 = Conv2dCfg { stride: (2, 1), padding: (2, 0), dilation: (1, 1), groups: 1 };
    let err = check(&[x, w1, w2], |t, v| {
        let a = t.conv2d(v[0], v[1], None, c1);
        t.conv2d(a, v[2], None, c2)
    });
    assert_close("factorized", err);
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 4, 4, 4], &mut rng);
    let g = Tensor::from_fn(&[4], |i| 0.5 + i as f64 * 0.3);
    let b = random(&[4], &mut rng);
    let err = check(&[x.clone(), g.clone(), b.clone()], |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).0);
    assert_close("bn train", err);
    let rm = [0.1, -0.2, 0.0, 0.3];
    let rv = [1.0, 0.5, 2.0, 0.9];
    let err = check(&[x, g, b], |t, v| t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5));
    assert_close("bn eval", err);
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Keep inputs away from the kinks of piecewise-linear activations.
    let x = Tensor::from_fn(&[2, 4, 4, 4], |_| {
        let m: f64 = rng.random_range(0.05..3.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    for kind in [
        Activation::Relu,
        Activation::LeakyRelu(0.2),
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Swish,
    ] {
        let err = check(std::slice::from_ref(&x), |t, v| t.activation(v[0], kind));
        assert_close(&format!("{kind:?}"), err);
    }
    let x6 = x.map(|v| v * 3.0 + 0.01);
    let err = check(&[x6], |t, v| t.activation(v[0], Activation::Relu6));
    assert_close("relu6", err);
}

#[test]
fn pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 4, 4, 4], &mut rng);
    for cfg in [PoolCfg::new(3, 1, 1), PoolCfg::new(3, 2, 1), PoolCfg::new(5, 1, 2)] {
        let err = check(std::slice::from_ref(&x), |t, v| t.max_pool(v[0], cfg));
        assert_close("max pool", err);
        let err = check(std::slice::from_ref(&x), |t, v| t.avg_pool(v[0], cfg));
        assert_close("avg pool", err);
    }
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3, 4, 4], &mut rng);
    let b = random(&[2, 2, 4, 4], &mut rng);
    let c = random(&[2, 3, 4, 4], &mut rng);
    assert_close("concat", check(&[a.clone(), b], |t, v| t.concat(&[v[0], v[1], v[0]])));
    assert_close("crop", check(std::slice::from_ref(&a), |t, v| t.crop(v[0], 1)));
    assert_close("gap", check(std::slice::from_ref(&a), |t, v| t.global_avg_pool(v[0])));
    assert_close(
        "lin",
        check(&[a.clone(), c.clone()], |t, v| t.linear_comb(&[(v[0], 0.7), (v[1], -1.3), (v[0], 2.0)])),
    );
    let w = random(&[3], &mut rng);
    assert_close("mix", check(&[a.clone(), c.clone(), w], |t, v| {
        let s = t.softmax(v[2]);
        t.mix(&[v[0], v[1], v[0]], s)
    }));
    let s = random(&[2, 3], &mut rng);
    assert_close("channel scale", check(&[a.clone(), s], |t, v| {
        let g = t.activation(v[1], Activation::Sigmoid);
        t.channel_scale(v[0], g)
    }));
    assert_close("sample scale", check(std::slice::from_ref(&a), |t, v| t.sample_scale(v[0], vec![0.0, 1.7])));
    let x = random(&[3, 5], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let bias = random(&[4], &mut rng);
    assert_close("linear", check(&[x, w, bias], |t, v| t.linear(v[0], v[1], Some(v[2]))));
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&[4, 5], &mut rng);
    let labels = [0, 4, 2, 2];
    let err = check(std::slice::from_ref(&logits), |t, v| t.cross_entropy(v[0], &labels));
    assert_close("cross entropy", err);
    let teacher = random(&[4, 5], &mut rng);
    for temp in [1.0, 2.0, 4.0] {
        let err = check(&[logits.clone(), teacher.clone()], |t, v| t.soft_target_ce(v[0], v[1], temp));
        assert_close("soft target", err);
    }
}

#[test]
fn frozen_inputs_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(&[1, 1, 2, 2]), false);
    let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1]), true);
    let y = tape.conv2d(x, w, None, Conv2dCfg::new(1, 0));
    let l = tape.sum_all(y);
    let grads = tape.backward(l);
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap().data(), &[4.0]);
}
