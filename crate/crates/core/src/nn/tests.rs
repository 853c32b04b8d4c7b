use super::*;
use crate::tensor::Tensor;

fn dense_net(input: usize, output: usize, seed: u64) -> NetworkSpec {
    NetworkSpec::new(
        vec![input],
        vec![Block::Dense { input, output }],
        seed,
    )
    .unwrap()
}

fn set_params(params: &mut ParamSet, name: &str, data: Vec<f64>) {
    let t = params
        .tensors
        .iter_mut()
        .find(|(n, _)| n == name)
        .unwrap();
    t.1.data_mut().copy_from_slice(&data);
}

#[test]
fn dense_identity_passes_input_through() {
    let spec = dense_net(3, 3, 0);
    let mut params = spec.init_params();
    set_params(
        &mut params,
        "0.weight",
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    );
    set_params(&mut params, "0.bias", vec![0.0; 3]);
    let x = Tensor::from_vec(vec![0.5, -2.0, 3.25]);
    let y = forward(&spec, &params, &x).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv1d_all_ones_kernel_hand_check() {
    // kernel [1,1], stride 1, single channel: <1,2,3> -> <3,5>
    let spec = NetworkSpec::new(
        vec![1, 3],
        vec![Block::Conv1d {
            in_channels: 1,
            out_channels: 1,
            kernel: 2,
            stride: 1,
        }],
        0,
    )
    .unwrap();
    let mut params = spec.init_params();
    set_params(&mut params, "0.weight", vec![1.0, 1.0]);
    set_params(&mut params, "0.bias", vec![0.0]);
    let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = forward(&spec, &params, &x).unwrap();
    assert_eq!(y.shape(), &[1, 2]);
    assert_eq!(y.data(), &[3.0, 5.0]);
}

#[test]
fn conv_transpose1d_hand_check() {
    // input <1,2>, kernel [1,1], stride 2 -> <1,1,2,2> minus overlap: out len 4
    let spec = NetworkSpec::new(
        vec![1, 2],
        vec![Block::ConvTranspose1d {
            in_channels: 1,
            out_channels: 1,
            kernel: 2,
            stride: 2,
        }],
        0,
    )
    .unwrap();
    let mut params = spec.init_params();
    set_params(&mut params, "0.weight", vec![1.0, 1.0]);
    set_params(&mut params, "0.bias", vec![0.0]);
    let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let y = forward(&spec, &params, &x).unwrap();
    assert_eq!(y.shape(), &[1, 4]);
    assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0]);
}

/// Straight-line recomputation of dense(3->4) tanh dense(4->2) with explicit loops.
fn oracle_dense_tanh_dense(params: &ParamSet, x: &[f64]) -> Vec<f64> {
    let w1 = params.tensors[0].1.data();
    let b1 = params.tensors[1].1.data();
    let w2 = params.tensors[2].1.data();
    let b2 = params.tensors[3].1.data();
    let mut h = [0.0f64; 4];
    for o in 0..4 {
        let mut acc = b1[o];
        for i in 0..3 {
            acc += w1[o * 3 + i] * x[i];
        }
        h[o] = acc.tanh();
    }
    let mut y = vec![0.0f64; 2];
    for o in 0..2 {
        let mut acc = b2[o];
        for i in 0..4 {
            acc += w2[o * 4 + i] * h[i];
        }
        y[o] = acc;
    }
    y
}

#[test]
fn three_layer_net_matches_straight_line_oracle() {
    let spec = NetworkSpec::new(
        vec![3],
        vec![
            Block::Dense { input: 3, output: 4 },
            Block::Tanh,
            Block::Dense { input: 4, output: 2 },
        ],
        42,
    )
    .unwrap();
    let params = spec.init_params();
    let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
    let y = forward(&spec, &params, &x).unwrap();
    let expected = oracle_dense_tanh_dense(&params, x.data());
    for (a, b) in y.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn forward_is_pure() {
    let spec = NetworkSpec::new(
        vec![5],
        vec![
            Block::Dense { input: 5, output: 8 },
            Block::Relu,
            Block::Dense { input: 8, output: 3 },
            Block::Softmax,
        ],
        7,
    )
    .unwrap();
    let params = spec.init_params();
    let x = Tensor::from_vec(vec![0.1, 0.2, -0.3, 0.4, -0.5]);
    let y1 = forward(&spec, &params, &x).unwrap();
    let y2 = forward(&spec, &params, &x).unwrap();
    assert_eq!(y1.data(), y2.data());
}

#[test]
fn init_is_seed_deterministic() {
    let spec = dense_net(6, 4, 99);
    assert_eq!(spec.init_params(), spec.init_params());
    let other = dense_net(6, 4, 100);
    assert_ne!(spec.init_params(), other.init_params());
}

#[test]
fn shape_mismatch_is_config_error() {
    let spec = dense_net(3, 2, 0);
    let params = spec.init_params();
    let bad = Tensor::from_vec(vec![1.0, 2.0]);
    assert!(matches!(
        forward(&spec, &params, &bad),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn zero_output_grad_gives_zero_gradients() {
    let spec = NetworkSpec::new(
        vec![4],
        vec![
            Block::Dense { input: 4, output: 6 },
            Block::Tanh,
            Block::Dense { input: 6, output: 2 },
        ],
        3,
    )
    .unwrap();
    let params = spec.init_params();
    let x = Tensor::from_vec(vec![1.0, -1.0, 0.5, 2.0]);
    let cache = forward_cached(&spec, &params, &x).unwrap();
    let g = Tensor::zeros(vec![2]);
    let (grads, gx) = backward(&spec, &params, &cache, &g).unwrap();
    assert!(grads.tensors.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
    assert!(gx.data().iter().all(|v| *v == 0.0));
}

#[test]
fn scalar_linear_gradient() {
    // f(w) = w * x with x = 2: dL/dw = 2 when output_grad = 1.
    let spec = dense_net(1, 1, 0);
    let mut params = spec.init_params();
    set_params(&mut params, "0.weight", vec![0.7]);
    set_params(&mut params, "0.bias", vec![0.0]);
    let x = Tensor::from_vec(vec![2.0]);
    let cache = forward_cached(&spec, &params, &x).unwrap();
    let (grads, gx) = backward(&spec, &params, &cache, &Tensor::from_vec(vec![1.0])).unwrap();
    assert_eq!(grads.tensors[0].1.data(), &[2.0]);
    assert_eq!(gx.data(), &[0.7]);
}

/// Central finite differences of a scalar loss over every parameter.
fn fd_param_grads(
    spec: &NetworkSpec,
    params: &ParamSet,
    x: &Tensor,
    loss: impl Fn(&Tensor) -> f64,
) -> ParamSet {
    let step = 1e-4;
    let mut fd = params.zeros_like();
    for ti in 0..params.tensors.len() {
        for j in 0..params.tensors[ti].1.numel() {
            let mut plus = params.clone();
            plus.tensors[ti].1.data_mut()[j] += step;
            let mut minus = params.clone();
            minus.tensors[ti].1.data_mut()[j] -= step;
            let lp = loss(&forward(spec, &plus, x).unwrap());
            let lm = loss(&forward(spec, &minus, x).unwrap());
            fd.tensors[ti].1.data_mut()[j] = (lp - lm) / (2.0 * step);
        }
    }
    fd
}

fn max_rel_err(a: &ParamSet, b: &ParamSet) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, ta), (_, tb)) in a.tensors.iter().zip(&b.tensors) {
        for (va, vb) in ta.data().iter().zip(tb.data()) {
            let denom = va.abs().max(vb.abs()).max(1e-4);
            worst = worst.max((va - vb).abs() / denom);
        }
    }
    worst
}

fn gradcheck(spec: NetworkSpec, x: Tensor) {
    let params = spec.init_params();
    // loss = sum of c_i * y_i with fixed pseudo-random weights
    let out_n: usize = spec.output_shape().unwrap().iter().product();
    let coeffs: Vec<f64> = (0..out_n).map(|i| ((i * 7 + 3) % 11) as f64 / 7.0 - 0.6).collect();
    let loss = |y: &Tensor| -> f64 { y.data().iter().zip(&coeffs).map(|(v, c)| v * c).sum() };
    let cache = forward_cached(&spec, &params, &x).unwrap();
    let g = Tensor::new(cache.output().shape().to_vec(), coeffs.clone()).unwrap();
    let (grads, _) = backward(&spec, &params, &cache, &g).unwrap();
    let fd = fd_param_grads(&spec, &params, &x, loss);
    let err = max_rel_err(&grads, &fd);
    assert!(err < 1e-3, "gradcheck rel err {err}");
}

fn random_input(shape: Vec<usize>, seed: u64) -> Tensor {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn gradients_match_finite_differences_per_block() {
    for trial in 0..20 {
        gradcheck(
            NetworkSpec::new(
                vec![5],
                vec![
                    Block::Dense { input: 5, output: 7 },
                    Block::Tanh,
                    Block::Dense { input: 7, output: 4 },
                    Block::Softmax,
                ],
                trial,
            )
            .unwrap(),
            random_input(vec![5], trial + 1000),
        );
        gradcheck(
            NetworkSpec::new(
                vec![2, 11],
                vec![
                    Block::Conv1d {
                        in_channels: 2,
                        out_channels: 3,
                        kernel: 3,
                        stride: 2,
                    },
                    Block::Tanh,
                    Block::Flatten,
                    Block::Dense { input: 15, output: 4 },
                ],
                trial,
            )
            .unwrap(),
            random_input(vec![2, 11], trial + 2000),
        );
        gradcheck(
            NetworkSpec::new(
                vec![4],
                vec![
                    Block::Dense { input: 4, output: 6 },
                    Block::Reshape { channels: 3, len: 2 },
                    Block::ConvTranspose1d {
                        in_channels: 3,
                        out_channels: 2,
                        kernel: 3,
                        stride: 2,
                    },
                    Block::Relu,
                ],
                trial,
            )
            .unwrap(),
            random_input(vec![4], trial + 3000),
        );
    }
}

#[test]
fn adam_zero_gradient_leaves_params_unchanged() {
    let spec = dense_net(3, 3, 1);
    let mut params = spec.init_params();
    let before = params.clone();
    let grads = params.zeros_like();
    let mut state = OptimizerState::new(&params, AdamConfig::default());
    adam_step(&mut params, &grads, &mut state).unwrap();
    assert_eq!(params, before);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_constant_gradient_step_approaches_learning_rate() {
    let spec = dense_net(1, 1, 1);
    let mut params = spec.init_params();
    let mut grads = params.zeros_like();
    grads.tensors[0].1.data_mut()[0] = 0.37;
    grads.tensors[1].1.data_mut()[0] = -3.0;
    let cfg = AdamConfig::default();
    let mut state = OptimizerState::new(&params, cfg);
    let mut prev = params.clone();
    let mut last_steps = vec![];
    for _ in 0..2000 {
        adam_step(&mut params, &grads, &mut state).unwrap();
        last_steps = params
            .tensors
            .iter()
            .zip(&prev.tensors)
            .map(|((_, a), (_, b))| (a.data()[0] - b.data()[0]).abs())
            .collect();
        prev = params.clone();
    }
    for s in last_steps {
        assert!((s - cfg.learning_rate).abs() < 1e-5, "step magnitude {s}");
    }
}

/// Independent scalar Adam used to cross-check two composite steps.
#[test]
fn adam_two_steps_match_scalar_reimplementation() {
    let cfg = AdamConfig::default();
    let g1 = 0.8;
    let g2 = -0.25;
    let mut p = 1.5;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    for (t, g) in [(1, g1), (2, g2)] {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        p -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
    }

    let spec = dense_net(1, 1, 0);
    let mut params = spec.init_params();
    set_params(&mut params, "0.weight", vec![1.5]);
    let mut state = OptimizerState::new(&params, cfg);
    for g in [g1, g2] {
        let mut grads = params.zeros_like();
        grads.tensors[0].1.data_mut()[0] = g;
        adam_step(&mut params, &grads, &mut state).unwrap();
    }
    assert!((params.tensors[0].1.data()[0] - p).abs() < 1e-14);
}

#[test]
fn reparameterize_examples() {
    assert_eq!(reparameterize(&[1.0, -2.0], &[0.3, 0.7], &[0.0, 0.0]), vec![1.0, -2.0]);
    let n = [0.4, -1.2];
    assert_eq!(reparameterize(&[0.0, 0.0], &[0.0, 0.0], &n), n.to_vec());
    let z = reparameterize(&[1.0], &[4.0f64.ln()], &[0.5]);
    assert!((z[0] - 2.0).abs() < 1e-12);
}
