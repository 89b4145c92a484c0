use learnsysid::autodiff::special::erf;
use learnsysid::autodiff::{Graph, ParamSet, Tensor};
use learnsysid::dataio::{Formulation, Normalization};
use learnsysid::learn::{adapt_loss, task_loss, BasisMode, LearnConfig, LearnedModel};
use learnsysid::sindy::{sindy_predict, BasisFunction, FixedLibrary, SparseModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(formulation: Formulation, mode: BasisMode, seed: u64) -> LearnedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LearnConfig {
        mode,
        ..LearnConfig::default()
    };
    let f = formulation.input_dim();
    let i = formulation.state_dim();
    let mut m = LearnedModel::new(formulation, &cfg, Normalization::identity(f, i), &mut rng).unwrap();
    // Nonzero biases so every parameter entry matters.
    let names: Vec<String> = m.params.names().to_vec();
    for name in names {
        if name.ends_with("bias") {
            for v in m.params.get_mut(&name).unwrap().data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

fn random_x(n: usize, f: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(n, f, (0..n * f).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Scalar-loop MLP straight from the parameter tensors.
fn mlp_oracle(params: &ParamSet, prefix: &str, dims: &[usize], input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    let layers = dims.len() - 1;
    for l in 0..layers {
        let w = params.get(&format!("{prefix}layer{l}.weight")).unwrap();
        let b = params.get(&format!("{prefix}layer{l}.bias")).unwrap();
        let mut out = vec![0.0; dims[l + 1]];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = b.get(0, o);
            for (k, &hk) in h.iter().enumerate() {
                acc += hk * w.get(k, o);
            }
            *slot = if l + 1 < layers { gelu(acc) } else { acc };
        }
        h = out;
    }
    h
}

fn predict_oracle(m: &LearnedModel, x: &[f64]) -> Vec<f64> {
    let (f, p, i) = (m.input_dim(), m.num_basis, m.output_dim());
    let theta: Vec<f64> = match m.mode {
        BasisMode::Elementwise => {
            let per_feature: Vec<Vec<f64>> =
                x.iter().map(|&v| mlp_oracle(&m.params, "basis.", &m.basis_dims(), &[v])).collect();
            (0..p).flat_map(|q| (0..f).map(move |j| (q, j))).map(|(q, j)| per_feature[j][q]).collect()
        }
        BasisMode::Vector => mlp_oracle(&m.params, "basis.", &m.basis_dims(), x),
    };
    let e = mlp_oracle(&m.params, "selector.", &m.selector_dims(), x);
    let w = theta.len();
    (0..i).map(|k| (0..w).map(|c| theta[c] * e[k * w + c]).sum()).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

/// Per-tensor relative error between autodiff and central differences.
fn check_fd(m: &LearnedModel, loss: impl Fn(&ParamSet) -> f64, grads: &ParamSet) {
    let h = 1e-6;
    for (name, t) in m.params.iter() {
        let mut fd = vec![0.0; t.len()];
        for (idx, slot) in fd.iter_mut().enumerate() {
            let mut plus = m.params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = m.params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= h;
            *slot = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        let g = grads.get(name).unwrap().data();
        let err = rel_err(g, &fd);
        assert!(err < 1e-5, "{name}: relative error {err}");
    }
}

#[test]
fn theta_width_and_shared_network() {
    let m = model(Formulation::Translational, BasisMode::Elementwise, 1);
    let x = Tensor::row(&[0.7; 6]);
    let theta = m.theta_forward(&x).unwrap();
    assert_eq!(theta.shape(), (1, 12));
    for q in 0..2 {
        for j in 0..6 {
            assert_eq!(theta.get(0, q * 6 + j), theta.get(0, q * 6));
        }
    }
    let v = model(Formulation::Translational, BasisMode::Vector, 1);
    assert_eq!(v.theta_forward(&x).unwrap().shape(), (1, 2));
}

#[test]
fn zero_final_basis_layer_gives_bias() {
    let mut m = model(Formulation::Attitude, BasisMode::Elementwise, 2);
    let last = m.basis_dims().len() - 2;
    for v in m.params.get_mut(&format!("basis.layer{last}.weight")).unwrap().data_mut() {
        *v = 0.0;
    }
    let bias = m.params.get(&format!("basis.layer{last}.bias")).unwrap().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_x(4, m.input_dim(), &mut rng);
    let theta = m.theta_forward(&x).unwrap();
    let f = m.input_dim();
    for r in 0..4 {
        for q in 0..2 {
            for j in 0..f {
                assert_eq!(theta.get(r, q * f + j), bias.get(0, q));
            }
        }
    }
}

#[test]
fn selector_shapes_and_zero_weights() {
    let mut m = model(Formulation::Full, BasisMode::Elementwise, 4);
    let x = Tensor::row(&[0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 1.0, 1.1, 0.9, 1.2]);
    let e = m.selector_forward(&x).unwrap();
    assert_eq!(e.shape(), (6, 20));
    let twice = Tensor::from_rows(&[x.row_slice(0).to_vec(), x.row_slice(0).to_vec()]).unwrap();
    let g = Graph::new();
    let vars = m.params.to_constants(&g);
    let s = m.selector_var(&vars, &twice).unwrap().value();
    assert_eq!(s.row_slice(0), s.row_slice(1));
    assert_eq!(s.row_slice(0), e.data());

    let names: Vec<String> = m.params.names().iter().filter(|n| n.starts_with("selector.")).cloned().collect();
    for name in names {
        for v in m.params.get_mut(&name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    let e = m.selector_forward(&x).unwrap();
    assert!(e.data().iter().all(|&v| v == 0.0));
    let y = m.predict(&random_x(7, 10, &mut ChaCha8Rng::seed_from_u64(5))).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn width_mismatch_is_rejected() {
    let m = model(Formulation::Translational, BasisMode::Elementwise, 6);
    assert!(m.theta_forward(&Tensor::row(&[0.0; 5])).is_err());
    assert!(m.selector_forward(&Tensor::row(&[0.0; 7])).is_err());
    assert!(m.predict(&Tensor::zeros(3, 10)).is_err());
}

#[test]
fn prediction_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for formulation in Formulation::ALL {
        for mode in [BasisMode::Elementwise, BasisMode::Vector] {
            let m = model(formulation, mode, rng.random());
            let x = random_x(9, m.input_dim(), &mut rng);
            let y = m.predict(&x).unwrap();
            assert_eq!(y.shape(), (9, m.output_dim()));
            for r in 0..9 {
                let want = predict_oracle(&m, x.row_slice(r));
                for (k, w) in want.iter().enumerate() {
                    assert!((y.get(r, k) - w).abs() <= 1e-12 * w.abs().max(1.0), "{formulation} {mode:?}");
                }
            }
        }
    }
}

#[test]
fn fixed_trig_basis_reproduces_sindy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lib = FixedLibrary {
        functions: vec![BasisFunction::Sin, BasisFunction::Cos],
        include_identity: false,
    };
    for formulation in Formulation::ALL {
        let (f, i) = (formulation.input_dim(), formulation.state_dim());
        let m_cols = 2 * f;
        let coefficients = Tensor::from_vec(
            i,
            m_cols,
            (0..i * m_cols)
                .map(|_| if rng.random_bool(0.5) { rng.random_range(-2.0..2.0) } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let norm = Normalization::identity(f, i);
        let sparse = SparseModel {
            library: lib.clone(),
            threshold: 0.2,
            ridge: 1e-6,
            formulation: Some(formulation),
            norm: norm.clone(),
            coefficients: coefficients.clone(),
            warnings: vec![],
        };
        let learned =
            LearnedModel::with_fixed_basis(formulation, lib.clone(), &coefficients, &[12, 16, 24, 48], norm).unwrap();
        let x = Tensor::from_vec(1000, f, (0..1000 * f).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let a = learned.predict(&x).unwrap();
        let b = sindy_predict(&sparse, &x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10, "{formulation}");
    }
}

#[test]
fn task_loss_examples() {
    let m = model(Formulation::Translational, BasisMode::Elementwise, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_x(11, 6, &mut rng);
    let y = m.predict(&x).unwrap();
    let g = Graph::new();
    let vars = m.params.to_constants(&g);
    assert_eq!(task_loss(&m, &vars, &x, &y).unwrap().item(), 0.0);
    let shifted = y.map(|v| v - 1.0);
    let loss = task_loss(&m, &vars, &x, &shifted).unwrap().item();
    assert!((loss - 3.0).abs() < 1e-12, "{loss}");
    assert!(task_loss(&m, &vars, &Tensor::zeros(0, 6), &Tensor::zeros(0, 3)).is_err());
}

#[test]
fn task_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for mode in [BasisMode::Elementwise, BasisMode::Vector] {
        let m = model(Formulation::Translational, mode, 12);
        let x = random_x(5, 6, &mut rng);
        let y = random_x(5, 3, &mut rng);
        let g = Graph::new();
        let vars = m.params.to_vars(&g);
        let loss = task_loss(&m, &vars, &x, &y).unwrap();
        let grads = learnsysid::autodiff::backward(loss, &vars, false).unwrap().values();
        let eval = |p: &ParamSet| {
            let g = Graph::new();
            task_loss(&m, &p.to_constants(&g), &x, &y).unwrap().item()
        };
        check_fd(&m, eval, &grads);
    }
}

#[test]
fn adapt_loss_gradients_match_finite_differences() {
    let m = model(Formulation::Attitude, BasisMode::Elementwise, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_x(1, m.input_dim(), &mut rng);
    let y = random_x(1, 3, &mut rng);
    let f = m.predict(&x).unwrap();
    // Components well away from the |.| kink, total jump past L.
    let prev = f.map(|v| v - 0.9);
    let eval = |p: &ParamSet| {
        let g = Graph::new();
        adapt_loss(&m, &p.to_constants(&g), &x, &y, Some(&prev), 0.1, 1.0).unwrap().0.item()
    };
    let g = Graph::new();
    let vars = m.params.to_vars(&g);
    let (loss, _) = adapt_loss(&m, &vars, &x, &y, Some(&prev), 0.1, 1.0).unwrap();
    let grads = learnsysid::autodiff::backward(loss, &vars, false).unwrap().values();
    check_fd(&m, eval, &grads);
}

#[test]
fn adapt_loss_examples() {
    let m = model(Formulation::Translational, BasisMode::Elementwise, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random_x(1, 6, &mut rng);
    let f = m.predict(&x).unwrap();
    let y = random_x(1, 3, &mut rng);
    let g = Graph::new();
    let vars = m.params.to_constants(&g);
    let residual: f64 = f.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();

    let (loss, _) = adapt_loss(&m, &vars, &x, &y, Some(&f), 0.1, 1.0).unwrap();
    assert!((loss.item() - residual).abs() < 1e-12);

    let lambda = 0.37;
    let prev = Tensor::row(&[f.get(0, 0) + 0.5, f.get(0, 1) - 0.7, f.get(0, 2) + 0.3]);
    let (loss, _) = adapt_loss(&m, &vars, &x, &f, Some(&prev), lambda, 1.0).unwrap();
    assert!((loss.item() - 0.5 * lambda).abs() < 1e-12, "{}", loss.item());

    let (loss, _) = adapt_loss(&m, &vars, &x, &y, Some(&prev.map(|v| v * 9.0)), 0.0, 1.0).unwrap();
    assert!((loss.item() - residual).abs() < 1e-12);

    let (a, _) = adapt_loss(&m, &vars, &x, &y, Some(&prev.map(|v| v * 9.0)), 0.3, f64::INFINITY).unwrap();
    let (b, _) = adapt_loss(&m, &vars, &x, &y, Some(&prev.map(|v| v * 9.0)), 0.0, 1.0).unwrap();
    assert_eq!(a.item().to_bits(), b.item().to_bits());

    assert!(adapt_loss(&m, &vars, &x, &y, Some(&f), -0.1, 1.0).is_err());
    assert!(adapt_loss(&m, &vars, &x, &y, Some(&f), 0.1, -1.0).is_err());
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("model");
    for mode in [BasisMode::Elementwise, BasisMode::Vector] {
        let m = model(Formulation::Full, mode, 17);
        m.save(&stem, 0.1, 1.0).unwrap();
        let back = LearnedModel::load(&stem).unwrap();
        assert_eq!(back, m);
    }
    let text = std::fs::read_to_string(dir.path().join("model.model.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(manifest["lambda"], 0.1);
    assert_eq!(manifest["lipschitz"], 1.0);
    assert_eq!(manifest["num_basis"], 2);
}

#[test]
fn fixed_basis_curves_match_trig() {
    let lib = FixedLibrary {
        functions: vec![BasisFunction::Sin, BasisFunction::Cos],
        include_identity: false,
    };
    let e = Tensor::zeros(3, 12);
    let m = LearnedModel::with_fixed_basis(
        Formulation::Translational,
        lib,
        &e,
        &[12, 16, 24, 48],
        Normalization::identity(6, 3),
    )
    .unwrap();
    let grid: Vec<f64> = (0..629).map(|k| -std::f64::consts::PI + k as f64 * 0.01).collect();
    let c = m.basis_curves(&grid).unwrap();
    assert_eq!(c.shape(), (629, 2));
    for (r, &s) in grid.iter().enumerate() {
        assert!((c.get(r, 0) - s.sin()).abs() < 1e-9);
        assert!((c.get(r, 1) - s.cos()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_feature_permutation(seed in any::<u64>(), j in 0usize..6, k in 0usize..6) {
        let m = model(Formulation::Translational, BasisMode::Elementwise, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let x = random_x(3, 6, &mut rng);
        let mut xp = x.clone();
        for r in 0..3 {
            let (a, b) = (x.get(r, j), x.get(r, k));
            xp.set(r, j, b);
            xp.set(r, k, a);
        }
        let theta = m.theta_forward(&x).unwrap();
        let theta_p = m.theta_forward(&xp).unwrap();
        let swap = |c: usize| {
            let (q, f) = (c / 6, c % 6);
            q * 6 + if f == j { k } else if f == k { j } else { f }
        };
        for r in 0..3 {
            for c in 0..12 {
                prop_assert_eq!(theta_p.get(r, c), theta.get(r, swap(c)));
            }
            let e = m.selector_forward(&Tensor::row(x.row_slice(r))).unwrap();
            let want: Vec<f64> = (0..3).map(|i| (0..12).map(|c| theta.get(r, c) * e.get(i, c)).sum()).collect();
            let got: Vec<f64> = (0..3)
                .map(|i| (0..12).map(|c| theta_p.get(r, c) * e.get(i, swap(c))).sum())
                .collect();
            for (a, b) in want.iter().zip(&got) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn hinge_never_lowers_the_loss(seed in any::<u64>(), shift in -3.0f64..3.0, lipschitz in 0.0f64..2.0) {
        let m = model(Formulation::Attitude, BasisMode::Vector, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_x(1, 7, &mut rng);
        let y = random_x(1, 3, &mut rng);
        let f = m.predict(&x).unwrap();
        let prev = f.map(|v| v + shift);
        let g = Graph::new();
        let vars = m.params.to_constants(&g);
        let (with, _) = adapt_loss(&m, &vars, &x, &y, Some(&prev), 0.2, lipschitz).unwrap();
        let (without, _) = adapt_loss(&m, &vars, &x, &y, None, 0.2, lipschitz).unwrap();
        prop_assume!((3.0 * shift.abs() - lipschitz).abs() > 1e-6);
        let active = 3.0 * shift.abs() > lipschitz;
        prop_assert!(with.item() >= without.item());
        prop_assert_eq!(with.item() > without.item(), active);
    }

    #[test]
    fn prediction_is_deterministic(seed in any::<u64>()) {
        let m = model(Formulation::Full, BasisMode::Elementwise, seed);
        let x = random_x(4, 10, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}
