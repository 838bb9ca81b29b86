use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use risp::autodiff::{rel_err, Tape, Tensor};
use risp::losses::*;
use risp::net::{ConvSpec, NetConfig, Network};
use risp::render::{render_state, render_with_dpsi, state_to_geometry, RenderParams, PSI_DIM};
use risp::sim::{observe, EnvId};

struct Owned {
    image: Tensor,
    target: Vec<f64>,
    jac: Vec<Tensor>,
    state: Vec<f64>,
    psi: RenderParams,
}

impl Owned {
    fn view(&self) -> SampleView<'_> {
        SampleView {
            image: &self.image,
            target: &self.target,
            jac_psi: &self.jac,
        }
    }
}

fn quad_sample() -> Owned {
    let state = vec![0.2, -0.1, 0.4, 0.0, 0.0, 0.0];
    let psi = RenderParams {
        azimuth: 1.0,
        intensity: 0.6,
        ambient: 0.3,
        albedo: [0.7, 0.6, 0.8],
        background: [0.1, 0.2, 0.15],
    };
    let (image, jac) = render_with_dpsi(&state_to_geometry(EnvId::Quad2d, &state), &psi);
    let target = observe(EnvId::Quad2d, &state);
    Owned {
        image,
        target,
        jac,
        state,
        psi,
    }
}

fn toy_sample(rng: &mut ChaCha8Rng, input: [usize; 3], outputs: usize) -> Owned {
    let n: usize = input.iter().product();
    let rand_t = |rng: &mut ChaCha8Rng| Tensor::new(input.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let image = rand_t(rng);
    let jac = (0..3).map(|_| rand_t(rng)).collect();
    Owned {
        image,
        target: (0..outputs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        jac,
        state: vec![],
        psi: RenderParams::nominal(),
    }
}

fn toy_nets() -> Vec<NetConfig> {
    vec![
        NetConfig {
            input: [1, 3, 3],
            convs: vec![],
            hidden: vec![4],
            outputs: 2,
            normalize: false,
        },
        NetConfig {
            input: [1, 3, 3],
            convs: vec![],
            hidden: vec![5],
            outputs: 3,
            normalize: true,
        },
        NetConfig {
            input: [1, 4, 4],
            convs: vec![ConvSpec {
                out_channels: 2,
                kernel: 3,
                stride: 2,
                pad: 1,
            }],
            hidden: vec![],
            outputs: 3,
            normalize: false,
        },
    ]
}

fn predict_perturbed(net: &Network, image: &Tensor, idx: usize, h: f64) -> Vec<f64> {
    let mut x = image.clone();
    x.data_mut()[idx] += h;
    net.predict(&x)
}

#[test]
fn predict_is_deterministic() {
    let s = quad_sample();
    let net = Network::new(NetConfig::standard(4), 3);
    assert_eq!(net.predict(&s.image), net.predict(&s.image.clone()));
    assert_eq!(net.predict(&s.image).len(), 4);
}

#[test]
fn input_jacobian_rows_match_finite_differences() {
    let s = quad_sample();
    let net = Network::new(NetConfig::standard(4), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Tensor> = (0..4).map(|i| net.input_jacobian_row(&s.image, i)).collect();
    let h = 1e-5;
    for _ in 0..20 {
        let idx = rng.gen_range(0..s.image.len());
        let up = predict_perturbed(&net, &s.image, idx, h);
        let dn = predict_perturbed(&net, &s.image, idx, -h);
        for (i, row) in rows.iter().enumerate() {
            let fd = (up[i] - dn[i]) / (2.0 * h);
            let e = rel_err(row.data()[idx], fd, 1e-3);
            assert!(e < 1e-4, "output {i} pixel {idx}: {} vs {fd}", row.data()[idx]);
        }
    }
}

#[test]
fn constant_network_has_zero_input_gradient() {
    let s = quad_sample();
    let mut net = Network::zeros(NetConfig::standard(4));
    // Bias-only head.
    let last = net.params.len() - 1;
    net.params[last] = Tensor::vector(vec![0.5, -1.0, 2.0, 0.1]);
    assert_eq!(net.predict(&s.image), vec![0.5, -1.0, 2.0, 0.1]);
    for i in 0..4 {
        assert_eq!(net.input_jacobian_row(&s.image, i).max_abs(), 0.0);
    }
    let g = reg_jacobian(&net, &s.view());
    assert!(g.iter().flatten().all(|&v| v == 0.0));
    let (v, grads) = grad_l_reg_full(&net, &s.view());
    assert_eq!(v, 0.0);
    assert!(grads.iter().all(|g| g.max_abs() == 0.0));
    let lt = l_train(&net, &[s.view()], 1.0, RegVariant::Full);
    assert_eq!(lt.l_train, lt.l_error);
}

#[test]
fn linear_network_jacobian_is_its_weight_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = toy_sample(&mut rng, [1, 3, 3], 2);
    let net = Network::new(NetConfig::linear([1, 3, 3], 2), 5);
    let w = &net.params[0];
    for i in 0..2 {
        let g = net.input_jacobian_row(&s.image, i);
        assert_eq!(g.data(), &w.data()[i * 9..(i + 1) * 9]);
    }
    let g = reg_jacobian(&net, &s.view());
    for i in 0..2 {
        for j in 0..3 {
            let row = Tensor::vector(w.data()[i * 9..(i + 1) * 9].to_vec());
            let expected = row.dot(&s.jac[j].clone().reshape([9]));
            assert!((g[i][j] - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn frobenius_regularizer_example() {
    // One output, N(I) = I_0 - 2 I_1; J_0 = e_0, J_1 = e_1 gives G = [[1, -2]].
    let mut net = Network::zeros(NetConfig::linear([1, 1, 2], 1));
    net.params[0] = Tensor::new([1, 2], vec![1.0, -2.0]);
    let image = Tensor::new([1, 1, 2], vec![0.3, 0.4]);
    let jac = vec![
        Tensor::new([1, 1, 2], vec![1.0, 0.0]),
        Tensor::new([1, 1, 2], vec![0.0, 1.0]),
    ];
    let target = [0.0];
    let s = SampleView {
        image: &image,
        target: &target,
        jac_psi: &jac,
    };
    assert_eq!(reg_jacobian(&net, &s), vec![vec![1.0, -2.0]]);
    assert_eq!(l_reg_full(&net, &s), 5.0);
}

#[test]
fn double_backprop_matches_finite_differences() {
    let s = quad_sample();
    let net = Network::new(NetConfig::standard(4), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = Tensor::new(
        s.image.shape().to_vec(),
        (0..s.image.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let i = 2;
    let h_of = |net: &Network| net.input_jacobian_row(&s.image, i).dot(&v);
    let tape = Tape::new();
    let params = net.on_tape(&tape, true);
    let x = tape.leaf(s.image.clone());
    let out = net.forward(&params, x);
    let seed = tape.constant(Tensor::basis([4], i));
    let g = tape.vjp_graph(&[(out, seed)], &[x]).pop().unwrap();
    let hv = g.dot(tape.constant(v.clone()));
    let grads = tape.backward(hv, &params);
    let flat_grad: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let base = net.flat();
    for _ in 0..20 {
        let k = rng.gen_range(0..base.len());
        let eps = 1e-5;
        let mut up = net.clone();
        let mut p = base.clone();
        p[k] += eps;
        up.set_flat(&p);
        let mut dn = net.clone();
        p[k] -= 2.0 * eps;
        dn.set_flat(&p);
        let fd = (h_of(&up) - h_of(&dn)) / (2.0 * eps);
        assert!(
            rel_err(flat_grad[k], fd, 1e-4) < 1e-3,
            "param {k}: {} vs {fd}",
            flat_grad[k]
        );
    }
}

#[test]
fn reg_jacobian_matches_end_to_end_finite_differences() {
    let s = quad_sample();
    let net = Network::new(NetConfig::standard(4), 9);
    let g = reg_jacobian(&net, &s.view());
    let h = 1e-5;
    for j in 0..PSI_DIM {
        let mut up = s.psi.to_vec();
        let mut dn = s.psi.to_vec();
        up[j] += h;
        dn[j] -= h;
        let ou = net.predict(&render_state(EnvId::Quad2d, &s.state, &RenderParams::from_slice(&up)));
        let od = net.predict(&render_state(EnvId::Quad2d, &s.state, &RenderParams::from_slice(&dn)));
        for i in 0..4 {
            let fd = (ou[i] - od[i]) / (2.0 * h);
            assert!(rel_err(g[i][j], fd, 1e-3) < 1e-4, "G[{i}][{j}] = {} vs {fd}", g[i][j]);
        }
    }
    let fd_norm: f64 = g.iter().flatten().map(|v| v * v).sum();
    assert!(rel_err(l_reg_full(&net, &s.view()), fd_norm, 1e-12) < 1e-3);
}

/// Gradient of the squared Frobenius norm by plain nested differentiation: build every `G_ij` on
/// the tape and backpropagate the sum of squares.
fn naive_reg_gradient(net: &Network, s: &SampleView<'_>) -> Vec<Tensor> {
    let tape = Tape::new();
    let params = net.on_tape(&tape, true);
    let x = tape.leaf(s.image.clone());
    let out = net.forward(&params, x);
    let n = net.config.outputs;
    let mut total = tape.scalar(0.0);
    for i in 0..n {
        let seed = tape.constant(Tensor::basis([n], i));
        let g = tape.vjp_graph(&[(out, seed)], &[x]).pop().unwrap();
        for j in s.jac_psi {
            let gij = g.dot(tape.constant(j.clone()));
            total = total + gij.square();
        }
    }
    tape.backward(total, &params)
}

#[test]
fn theorem_gradient_equals_nested_autodiff_on_small_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (k, cfg) in toy_nets().into_iter().enumerate() {
        assert!(
            cfg.param_count() <= 100,
            "toy net {k} has {} parameters",
            cfg.param_count()
        );
        let net = Network::new(cfg.clone(), k as u64);
        let s = toy_sample(&mut rng, cfg.input, cfg.outputs);
        let (_, fast) = grad_l_reg_full(&net, &s.view());
        let naive = naive_reg_gradient(&net, &s.view());
        for (a, b) in fast.iter().zip(&naive) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-10, "net {k}: {x} vs {y}");
            }
        }
    }
}

fn fd_over_params(net: &Network, f: impl Fn(&Network) -> f64, k: usize, eps: f64) -> f64 {
    let base = net.flat();
    let mut p = base.clone();
    p[k] += eps;
    let mut up = net.clone();
    up.set_flat(&p);
    p[k] = base[k] - eps;
    let mut dn = net.clone();
    dn.set_flat(&p);
    (f(&up) - f(&dn)) / (2.0 * eps)
}

#[test]
fn theorem_gradient_matches_finite_differences_on_the_cnn() {
    let s = quad_sample();
    let net = Network::new(NetConfig::standard(4), 12);
    let (_, grads) = grad_l_reg_full(&net, &s.view());
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let k = rng.gen_range(0..flat.len());
        let fd = fd_over_params(&net, |n| l_reg_full(n, &s.view()), k, 1e-5);
        assert!(rel_err(flat[k], fd, 1e-4) < 1e-3, "param {k}: {} vs {fd}", flat[k]);
    }
}

#[test]
fn fast_regularizer_matches_end_to_end_finite_differences() {
    let s = quad_sample();
    let net = Network::new(NetConfig::standard(4), 14);
    let d = error_psi_gradient(&net, &s.view());
    let h = 1e-5;
    let err_at = |psi: &[f64]| {
        let img = render_state(EnvId::Quad2d, &s.state, &RenderParams::from_slice(psi));
        l_error(&net.predict(&img), &s.target)
    };
    for j in 0..PSI_DIM {
        let mut up = s.psi.to_vec();
        let mut dn = s.psi.to_vec();
        up[j] += h;
        dn[j] -= h;
        let fd = (err_at(&up) - err_at(&dn)) / (2.0 * h);
        assert!(rel_err(d[j], fd, 1e-3) < 1e-3, "d[{j}] = {} vs {fd}", d[j]);
    }
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((l_reg_fast(&net, &s.view()) - norm).abs() < 1e-12);

    let (_, grads) = grad_l_reg_fast(&net, &s.view());
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let k = rng.gen_range(0..flat.len());
        let fd = fd_over_params(&net, |n| l_reg_fast(n, &s.view()), k, 1e-5);
        assert!(rel_err(flat[k], fd, 1e-4) < 1e-3, "param {k}: {} vs {fd}", flat[k]);
    }
}

#[test]
fn fast_regularizer_vanishes_on_perfect_predictions() {
    let s = quad_sample();
    let mut net = Network::zeros(NetConfig::standard(4));
    let last = net.params.len() - 1;
    net.params[last] = Tensor::vector(s.target.clone());
    assert_eq!(l_reg_fast(&net, &s.view()), 0.0);
    let (v, g) = grad_l_reg_fast(&net, &s.view());
    assert_eq!(v, 0.0);
    assert!(g.iter().all(|t| t.is_finite()));
}

#[test]
fn training_gradient_combines_error_and_regularizer() {
    let s = quad_sample();
    let net = Network::new(NetConfig::standard(4), 16);
    let gamma = 0.7;
    for variant in [RegVariant::Full, RegVariant::Fast] {
        let (b, g) = sample_train_grad(&net, &s.view(), Some(variant), gamma);
        let (b0, g0) = sample_train_grad(&net, &s.view(), None, 0.0);
        let (_, gr) = match variant {
            RegVariant::Full => grad_l_reg_full(&net, &s.view()),
            RegVariant::Fast => grad_l_reg_fast(&net, &s.view()),
        };
        assert!((b.l_error - b0.l_error).abs() < 1e-12);
        assert!((b.l_reg - l_reg(&net, &s.view(), variant)).abs() < 1e-10);
        for ((a, e), r) in g.iter().zip(&g0).zip(&gr) {
            for ((x, y), z) in a.data().iter().zip(e.data()).zip(r.data()) {
                assert!((x - (y + gamma * z)).abs() < 1e-9);
            }
        }
        let lt = l_train(&net, &[s.view()], 0.0, variant);
        assert_eq!(lt.l_train, lt.l_error);
    }
}

#[test]
fn regularizers_are_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in 0..5 {
        let cfg = toy_nets()[1].clone();
        let net = Network::new(cfg.clone(), seed);
        let s = toy_sample(&mut rng, cfg.input, cfg.outputs);
        assert!(l_reg_full(&net, &s.view()) >= 0.0);
        assert!(l_reg_fast(&net, &s.view()) >= 0.0);
    }
}
