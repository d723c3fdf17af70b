use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_ct_core::nn::layers;
use sparse_ct_core::nn::unet::TensorKind;
use sparse_ct_core::nn::{
    backward, count_params, forward, init_unet, mse_loss, unet_forward, AdamConfig, AdamState,
    BridgeCombine, Mode, Tensor4, UNetConfig, UNetParams, Variant,
};

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Relative error with an absolute floor: conv biases that feed batch norm
/// have an exactly zero gradient, where central differences only see
/// rounding noise of order 1e-10.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + H;
            let up = f(&probe);
            probe[i] = orig - H;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn assert_close(name: &str, analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len(), "{name}");
    let worst = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    if worst >= TOL {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            if rel_err(*a, *n) >= TOL {
                eprintln!("{i}: {a:e} vs {n:e}");
            }
        }
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

fn check_conv(k: usize) {
    let (in_ch, out_ch) = (2, 3);
    let x = random_tensor([2, in_ch, 5, 6], 1);
    let w = random_vec(out_ch * in_ch * k * k, 2);
    let b = random_vec(out_ch, 3);
    let r = random_tensor([2, out_ch, 5, 6], 4);
    let loss =
        |x: &Tensor4<f64>, w: &[f64], b: &[f64]| dot(&layers::conv_forward(x, w, b, out_ch, k), &r);
    let g = layers::conv_backward(&x, &w, out_ch, k, &r);
    let gx = numeric_grad(x.data(), |v| {
        loss(&Tensor4::from_vec(x.shape(), v.to_vec()).unwrap(), &w, &b)
    });
    assert_close("conv input", g.input.data(), &gx);
    assert_close(
        "conv weight",
        &g.weight,
        &numeric_grad(&w, |v| loss(&x, v, &b)),
    );
    assert_close("conv bias", &g.bias, &numeric_grad(&b, |v| loss(&x, &w, v)));
}

#[test]
fn conv3x3_gradients() {
    check_conv(3);
}

#[test]
fn conv1x1_gradients() {
    check_conv(1);
}

#[test]
fn batch_norm_gradients() {
    let x = random_tensor([3, 2, 4, 4], 5);
    let gamma = vec![1.3, -0.7];
    let beta = vec![0.2, 0.5];
    let r = random_tensor(x.shape(), 6);
    let loss =
        |x: &Tensor4<f64>, g: &[f64], b: &[f64]| dot(&layers::bn_forward(x, g, b, None).0, &r);
    let (_, cache) = layers::bn_forward(&x, &gamma, &beta, None);
    let g = layers::bn_backward(&cache, &gamma, &r);
    let gx = numeric_grad(x.data(), |v| {
        loss(
            &Tensor4::from_vec(x.shape(), v.to_vec()).unwrap(),
            &gamma,
            &beta,
        )
    });
    assert_close("bn input", g.input.data(), &gx);
    assert_close(
        "bn gamma",
        &g.gamma,
        &numeric_grad(&gamma, |v| loss(&x, v, &beta)),
    );
    assert_close(
        "bn beta",
        &g.beta,
        &numeric_grad(&beta, |v| loss(&x, &gamma, v)),
    );
}

#[test]
fn batch_norm_eval_matches_train_with_frozen_stats() {
    let x = random_tensor([2, 3, 4, 4], 7);
    let gamma = vec![1.0, 2.0, 0.5];
    let beta = vec![0.0, -1.0, 0.3];
    let (train, cache) = layers::bn_forward(&x, &gamma, &beta, None);
    let (eval, _) = layers::bn_forward(
        &x,
        &gamma,
        &beta,
        Some((&cache.batch_mean, &cache.batch_var)),
    );
    for (a, b) in train.data().iter().zip(eval.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

fn check_elementwise(
    name: &str,
    shape: [usize; 4],
    fwd: impl Fn(&Tensor4<f64>) -> Tensor4<f64>,
    bwd: impl Fn(&Tensor4<f64>, &Tensor4<f64>) -> Tensor4<f64>,
) {
    let x = random_tensor(shape, 8);
    let y = fwd(&x);
    let r = random_tensor(y.shape(), 9);
    let analytic = bwd(&x, &r);
    let numeric = numeric_grad(x.data(), |v| {
        dot(&fwd(&Tensor4::from_vec(shape, v.to_vec()).unwrap()), &r)
    });
    assert_close(name, analytic.data(), &numeric);
}

#[test]
fn relu_gradients() {
    check_elementwise("relu", [2, 2, 4, 4], layers::relu_forward, |x, r| {
        layers::relu_backward(&layers::relu_forward(x), r)
    });
}

#[test]
fn maxpool_gradients() {
    check_elementwise(
        "maxpool",
        [2, 2, 6, 4],
        |x| layers::maxpool_forward(x).0,
        |x, r| {
            let (_, arg) = layers::maxpool_forward(x);
            layers::maxpool_backward(&arg, x.shape(), r)
        },
    );
}

#[test]
fn upsample_gradients() {
    check_elementwise(
        "upsample",
        [2, 3, 3, 2],
        layers::upsample_forward,
        |_, r| layers::upsample_backward(r),
    );
}

#[test]
fn concat_and_add_gradients() {
    let a = random_tensor([2, 2, 3, 3], 10);
    let b = random_tensor([2, 3, 3, 3], 11);
    let r = random_tensor([2, 5, 3, 3], 12);
    let (ga, gb) = layers::split(&r, 2);
    let na = numeric_grad(a.data(), |v| {
        dot(
            &layers::concat(&Tensor4::from_vec(a.shape(), v.to_vec()).unwrap(), &b),
            &r,
        )
    });
    let nb = numeric_grad(b.data(), |v| {
        dot(
            &layers::concat(&a, &Tensor4::from_vec(b.shape(), v.to_vec()).unwrap()),
            &r,
        )
    });
    assert_close("concat a", ga.data(), &na);
    assert_close("concat b", gb.data(), &nb);

    let c = random_tensor([2, 2, 3, 3], 13);
    let rc = random_tensor([2, 2, 3, 3], 14);
    let nc = numeric_grad(a.data(), |v| {
        dot(
            &layers::add(&Tensor4::from_vec(a.shape(), v.to_vec()).unwrap(), &c),
            &rc,
        )
    });
    assert_close("add", rc.data(), &nc);
}

fn tiny(variant: Variant, combine: BridgeCombine) -> UNetConfig {
    UNetConfig {
        depth: 1,
        base_channels: 2,
        variant,
        bridge_combine: combine,
        input_size: 8,
    }
}

fn flat(p: &UNetParams<f64>) -> Vec<f64> {
    p.learnable().into_iter().flatten().copied().collect()
}

fn unflat(p: &mut UNetParams<f64>, v: &[f64]) {
    let mut it = v.iter();
    for t in p.learnable_mut() {
        for x in t.iter_mut() {
            *x = *it.next().unwrap();
        }
    }
}

fn check_network(cfg: UNetConfig) {
    let mut params = init_unet::<f64>(&cfg, 21).unwrap();
    params.head.weight = random_vec(params.head.weight.len(), 20);
    let x = random_tensor([2, 1, cfg.input_size, cfg.input_size], 22);
    let r = random_tensor(x.shape(), 23);
    let (_, cache) = forward(&params, &cfg, &x, Mode::Train).unwrap();
    let grads = backward(&params, &cfg, &cache, &r).unwrap();
    let mut probe = params.clone();
    let numeric = numeric_grad(&flat(&params), |v| {
        unflat(&mut probe, v);
        dot(&forward(&probe, &cfg, &x, Mode::Train).unwrap().0, &r)
    });
    assert_close(&format!("{cfg:?}"), &flat(&grads), &numeric);
}

#[test]
fn tiny_dual_frame_add_gradients() {
    check_network(tiny(Variant::DualFrame, BridgeCombine::Add));
}

#[test]
fn tiny_dual_frame_concat_gradients() {
    check_network(tiny(Variant::DualFrame, BridgeCombine::Concat));
}

#[test]
fn tiny_standard_gradients() {
    check_network(tiny(Variant::Standard, BridgeCombine::Add));
}

#[test]
fn two_level_network_gradients() {
    check_network(UNetConfig {
        depth: 2,
        base_channels: 1,
        variant: Variant::DualFrame,
        bridge_combine: BridgeCombine::Add,
        input_size: 8,
    });
}

#[test]
fn head_bias_gradient_is_sum_of_upstream() {
    let cfg = tiny(Variant::DualFrame, BridgeCombine::Add);
    let mut params = init_unet::<f64>(&cfg, 1).unwrap();
    params.head.weight = random_vec(params.head.weight.len(), 4);
    let x = random_tensor([3, 1, 8, 8], 2);
    let r = random_tensor(x.shape(), 3);
    let (_, cache) = forward(&params, &cfg, &x, Mode::Train).unwrap();
    let g = backward(&params, &cfg, &cache, &r).unwrap();
    let sum: f64 = r.data().iter().sum();
    assert!((g.head.bias[0] - sum).abs() < 1e-12);

    let zero = Tensor4::zeros(x.shape());
    let g0 = backward(&params, &cfg, &cache, &zero).unwrap();
    assert!(flat(&g0).iter().all(|&v| v == 0.0));
}

#[test]
fn backward_needs_train_cache() {
    let cfg = tiny(Variant::DualFrame, BridgeCombine::Add);
    let params = init_unet::<f64>(&cfg, 1).unwrap();
    let x = random_tensor([1, 1, 8, 8], 2);
    let (_, cache) = forward(&params, &cfg, &x, Mode::Eval).unwrap();
    assert!(backward(&params, &cfg, &cache, &x).is_err());
}

#[test]
fn forward_contracts() {
    let cfg = UNetConfig {
        depth: 4,
        base_channels: 2,
        input_size: 64,
        ..UNetConfig::default()
    };
    let mut params = init_unet::<f32>(&cfg, 5).unwrap();
    assert!(params.head.weight.iter().all(|&w| w == 0.0));
    params.head.weight = random_vec(params.head.weight.len(), 7)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let x = random_tensor([2, 1, 64, 64], 6).cast::<f32>();
    let (y, _) = forward(&params, &cfg, &x, Mode::Eval).unwrap();
    assert_eq!(y.shape(), [2, 1, 64, 64]);
    assert!(y.data().iter().any(|&v| v != 0.0));
    let (y2, _) = forward(&params, &cfg, &x, Mode::Eval).unwrap();
    assert_eq!(y.data(), y2.data());

    params.head.weight.iter_mut().for_each(|w| *w = 0.0);
    let zero = Tensor4::<f32>::zeros([1, 1, 64, 64]);
    let (z, _) = forward(&params, &cfg, &zero, Mode::Train).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));

    let wrong = Tensor4::<f32>::zeros([1, 1, 32, 32]);
    assert!(forward(&params, &cfg, &wrong, Mode::Eval).is_err());
}

#[test]
fn network_eval_matches_train_with_frozen_stats() {
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 2,
        input_size: 16,
        ..UNetConfig::default()
    };
    let mut params = init_unet::<f64>(&cfg, 3).unwrap();
    params.head.weight = random_vec(params.head.weight.len(), 5);
    let x = random_tensor([2, 1, 16, 16], 4);
    let (train, cache) = forward(&params, &cfg, &x, Mode::Train).unwrap();
    let stats: Vec<(Vec<f64>, Vec<f64>)> = cache
        .batch_stats()
        .into_iter()
        .map(|(m, v)| (m.to_vec(), v.to_vec()))
        .collect();
    let mut running = params
        .tensors_mut()
        .into_iter()
        .filter(|(_, k, _)| *k == TensorKind::RunningStat);
    for (m, v) in &stats {
        *running.next().unwrap().2 = m.clone();
        *running.next().unwrap().2 = v.clone();
    }
    drop(running);
    let (eval, _) = forward(&params, &cfg, &x, Mode::Eval).unwrap();
    for (a, b) in train.data().iter().zip(eval.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn running_stats_follow_momentum() {
    let cfg = tiny(Variant::DualFrame, BridgeCombine::Add);
    let mut params = init_unet::<f64>(&cfg, 3).unwrap();
    let x = random_tensor([2, 1, 8, 8], 4);
    let (_, cache) = unet_forward(&mut params, &cfg, &x, Mode::Train).unwrap();
    let (m, v) = cache.batch_stats()[0];
    let bn = &params.encoders[0].first.bn;
    assert!((bn.running_mean[0] - 0.1 * m[0]).abs() < 1e-12);
    assert!((bn.running_var[0] - (0.9 + 0.1 * v[0])).abs() < 1e-12);
    let before = params.clone();
    unet_forward(&mut params, &cfg, &x, Mode::Eval).unwrap();
    assert_eq!(params, before);
}

#[test]
fn init_is_deterministic() {
    let cfg = UNetConfig::default();
    let a = init_unet::<f32>(&cfg, 9).unwrap();
    assert_eq!(a, init_unet::<f32>(&cfg, 9).unwrap());
    assert_ne!(a, init_unet::<f32>(&cfg, 10).unwrap());
    let bad = UNetConfig {
        input_size: 100,
        ..cfg
    };
    assert!(init_unet::<f32>(&bad, 0).is_err());
}

#[test]
fn parameter_counts() {
    // one encoder (1->1), bottleneck (1->2), 1x1 bridge (1->2),
    // decoder ((2+1)->1), head: 24 + 66 + 4 + 42 + 2
    let tiny = UNetConfig {
        depth: 1,
        base_channels: 1,
        variant: Variant::DualFrame,
        bridge_combine: BridgeCombine::Add,
        input_size: 4,
    };
    assert_eq!(count_params(&tiny), 138);
    let standard = UNetConfig {
        variant: Variant::Standard,
        ..tiny
    };
    assert_eq!(count_params(&standard), 134);
    let concat = UNetConfig {
        bridge_combine: BridgeCombine::Concat,
        ..tiny
    };
    assert_eq!(count_params(&concat), 143);

    let p = init_unet::<f32>(&tiny, 0).unwrap();
    let first_unit: usize = p
        .tensors()
        .iter()
        .filter(|(n, k, _)| n.starts_with("enc0.conv1.") && *k == TensorKind::Learnable)
        .map(|(_, _, t)| t.len())
        .sum();
    assert_eq!(first_unit, 9 + 1 + 2);

    for cfg in [
        UNetConfig::default(),
        UNetConfig::full_scale(),
        tiny,
        concat,
    ] {
        let p = init_unet::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.learnable_count(), count_params(&cfg));
    }

    let small = UNetConfig::default();
    let doubled = UNetConfig {
        base_channels: 16,
        ..small
    };
    let ratio = count_params(&doubled) as f64 / count_params(&small) as f64;
    assert!((3.5..=4.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn adam_matches_scalar_trace() {
    let cfg = tiny(Variant::Standard, BridgeCombine::Add);
    let mut params = init_unet::<f64>(&cfg, 0).unwrap();
    let start = flat(&params);
    let mut grads = UNetParams::<f64>::zeros_like(&cfg);
    let gvals: Vec<f64> = (0..start.len())
        .map(|i| 0.5 - (i % 7) as f64 * 0.3)
        .collect();
    unflat(&mut grads, &gvals);
    let lr = 1e-3;
    let mut state = AdamState::new(&params, AdamConfig::default());
    state.update(&mut params, &grads, lr).unwrap();
    let first = flat(&params);
    for ((p0, p1), g) in start.iter().zip(&first).zip(&gvals) {
        assert!((p1 - (p0 - lr * g.signum())).abs() < 1e-9 * lr.max(1.0));
    }
    state.update(&mut params, &grads, lr).unwrap();
    let second = flat(&params);
    for (i, g) in gvals.iter().enumerate() {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut p = start[i];
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((second[i] - p).abs() < 1e-12);
    }

    let frozen = params.clone();
    let zero = UNetParams::<f64>::zeros_like(&cfg);
    state.update(&mut params, &zero, lr).unwrap();
    // moments decay but do not vanish, so parameters still move
    assert_ne!(flat(&params), flat(&frozen));

    let mut fresh = init_unet::<f64>(&cfg, 0).unwrap();
    let before = fresh.clone();
    let mut s = AdamState::new(&fresh, AdamConfig::default());
    s.update(&mut fresh, &zero, lr).unwrap();
    assert_eq!(fresh, before);

    let mut bad = zero.clone();
    bad.head.bias[0] = f64::NAN;
    assert!(s.update(&mut fresh, &bad, lr).is_err());
}

#[test]
fn mse_loss_shapes() {
    let a = random_tensor([2, 1, 4, 4], 1);
    let b = random_tensor([2, 1, 4, 4], 2);
    let (l, g) = mse_loss(&a, &b).unwrap();
    assert!(l > 0.0);
    assert_eq!(g.shape(), a.shape());
}
