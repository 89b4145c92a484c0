//! Finite-difference and closed-form oracles for the autodiff engine.

use std::rc::Rc;

use learnsysid::autodiff::{
    backward, init_mlp, mlp_eval, sgd_step_differentiable, Activation, Graph, ParamSet, Tensor,
    Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            // keep clear of the kinks of abs/relu
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() < 0.05 {
                v + 0.1f64.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(r, c, data).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Scalar objective `sum(op(inputs) .* weights)` evaluated without tracking.
fn objective<F>(op: &F, inputs: &[Tensor], weights: &Tensor) -> f64
where
    F: for<'g> Fn(&[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&vars);
    out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

fn central_differences<F>(op: &F, inputs: &[Tensor], weights: &Tensor) -> Vec<Vec<f64>>
where
    F: for<'g> Fn(&[Var<'g>]) -> Var<'g>,
{
    inputs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            (0..t.len())
                .map(|i| {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[i] += H;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[i] -= H;
                    (objective(op, &plus, weights) - objective(op, &minus, weights)) / (2.0 * H)
                })
                .collect()
        })
        .collect()
}

fn analytic<F>(op: &F, inputs: &[Tensor], weights: &Tensor, create_graph: bool) -> Vec<Vec<f64>>
where
    F: for<'g> Fn(&[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&vars);
    let w = g.constant(weights.clone());
    let loss = out.mul(&w).unwrap().sum();
    g.gradients(loss, &vars, create_graph)
        .unwrap()
        .iter()
        .map(|v| v.value().data().to_vec())
        .collect()
}

/// Hessian-vector products through create-graph backward versus finite
/// differences of the first-order gradient.
fn check_second_order<F>(op: &F, inputs: &[Tensor], weights: &Tensor, dirs: &[Tensor]) -> f64
where
    F: for<'g> Fn(&[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&vars);
    let w = g.constant(weights.clone());
    let loss = out.mul(&w).unwrap().sum();
    let grads = g.gradients(loss, &vars, true).unwrap();
    let mut s = None::<Var>;
    for (gr, d) in grads.iter().zip(dirs) {
        let term = gr.mul(&g.constant(d.clone())).unwrap().sum();
        s = Some(match s {
            Some(acc) => acc.add(&term).unwrap(),
            None => term,
        });
    }
    let hv = g.gradients(s.unwrap(), &vars, false).unwrap();
    let hv: Vec<f64> = hv.iter().flat_map(|v| v.value().data().to_vec()).collect();

    let shifted = |sign: f64| -> Vec<f64> {
        let moved: Vec<Tensor> = inputs
            .iter()
            .zip(dirs)
            .map(|(t, d)| {
                let mut m = t.clone();
                for (x, dv) in m.data_mut().iter_mut().zip(d.data()) {
                    *x += sign * H * dv;
                }
                m
            })
            .collect();
        analytic(op, &moved, weights, false).concat()
    };
    let (p, m) = (shifted(1.0), shifted(-1.0));
    let fd: Vec<f64> = p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * H)).collect();
    rel_err(&hv, &fd)
}

fn run_check<F>(name: &str, shapes: &[(usize, usize)], out_shape: (usize, usize), op: F, smooth: bool)
where
    F: for<'g> Fn(&[Var<'g>]) -> Var<'g>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..100 {
        let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| random_tensor(&mut rng, r, c)).collect();
        let weights = random_tensor(&mut rng, out_shape.0, out_shape.1);
        let a = analytic(&op, &inputs, &weights, false);
        let b = analytic(&op, &inputs, &weights, true);
        assert_eq!(a, b, "{name}: create_graph changed first-order values");
        let n = central_differences(&op, &inputs, &weights);
        let err = rel_err(&a.concat(), &n.concat());
        assert!(err < 1e-5, "{name} trial {trial}: rel err {err:e}");
        if smooth && trial < 20 {
            let dirs: Vec<Tensor> = shapes.iter().map(|&(r, c)| random_tensor(&mut rng, r, c)).collect();
            let err2 = check_second_order(&op, &inputs, &weights, &dirs);
            assert!(err2 < 1e-5, "{name} trial {trial}: second-order rel err {err2:e}");
        }
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    run_check("matmul", &[(3, 4), (4, 2)], (3, 2), |v| v[0].matmul(&v[1]).unwrap(), true);
    run_check("matmul_ta", &[(4, 3), (4, 2)], (3, 2), |v| v[0].matmul_t(&v[1], true, false).unwrap(), true);
    run_check("matmul_tb", &[(3, 4), (2, 4)], (3, 2), |v| v[0].matmul_t(&v[1], false, true).unwrap(), true);
    run_check("matmul_tt", &[(4, 3), (2, 4)], (3, 2), |v| v[0].matmul_t(&v[1], true, true).unwrap(), true);
    run_check("add_row", &[(3, 4), (1, 4)], (3, 4), |v| v[0].add_row(&v[1]).unwrap(), true);
    run_check("add", &[(2, 3), (2, 3)], (2, 3), |v| v[0].add(&v[1]).unwrap(), true);
    run_check("sub", &[(2, 3), (2, 3)], (2, 3), |v| v[0].sub(&v[1]).unwrap(), true);
    run_check("mul", &[(2, 3), (2, 3)], (2, 3), |v| v[0].mul(&v[1]).unwrap(), true);
    run_check("scale", &[(2, 3)], (2, 3), |v| v[0].scale(-1.7), true);
    run_check("add_const", &[(2, 3)], (2, 3), |v| v[0].add_const(0.3).mul(&v[0]).unwrap(), true);
    run_check("sum", &[(2, 3)], (1, 1), |v| v[0].mul(&v[0]).unwrap().sum(), true);
    run_check("sum_rows", &[(4, 3)], (1, 3), |v| v[0].mul(&v[0]).unwrap().sum_rows(), true);
    run_check(
        "broadcast_rows",
        &[(1, 3)],
        (4, 3),
        |v| v[0].broadcast_rows(4).unwrap().mul(&v[0].broadcast_rows(4).unwrap()).unwrap(),
        true,
    );
    run_check("fill", &[(2, 2)], (3, 2), |v| v[0].mul(&v[0]).unwrap().sum().fill(3, 2).unwrap(), true);
    run_check("gelu", &[(3, 4)], (3, 4), |v| v[0].gelu(), true);
    run_check("abs", &[(3, 4)], (3, 4), |v| v[0].abs(), false);
    run_check("relu", &[(3, 4)], (3, 4), |v| v[0].relu(), false);
    run_check("row_bilinear", &[(3, 4), (3, 8)], (3, 2), |v| v[0].row_bilinear(&v[1]).unwrap(), true);
    run_check(
        "gather",
        &[(3, 2)],
        (2, 4),
        |v| {
            let idx: Rc<[usize]> = Rc::from(vec![5, 0, 1, 1, 4, 2, 3, 0]);
            let gathered = v[0].gather(idx, 2, 4).unwrap();
            gathered.mul(&gathered).unwrap()
        },
        true,
    );
}

#[test]
fn composed_network_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [3, 5, 4, 2];
    let params = init_mlp(&dims, &mut rng).unwrap();
    let x = random_tensor(&mut rng, 6, 3);
    let y = random_tensor(&mut rng, 6, 2);
    let loss_of = |p: &ParamSet| -> f64 {
        let pred = mlp_eval(p, &x, &dims, Activation::Gelu).unwrap();
        pred.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0
    };
    let g = Graph::new();
    let pv = params.to_vars(&g);
    let pred = learnsysid::autodiff::mlp_forward(&pv, g.constant(x.clone()), &dims, Activation::Gelu).unwrap();
    let r = pred.sub(&g.constant(y.clone())).unwrap();
    let loss = r.mul(&r).unwrap().sum().scale(1.0 / 6.0);
    let grads = backward(loss, &pv, false).unwrap().values().flatten();
    let flat = params.flatten();
    let fd: Vec<f64> = (0..flat.len())
        .map(|i| {
            let mut p = flat.clone();
            p[i] += H;
            let lp = loss_of(&params.unflatten(&p).unwrap());
            p[i] -= 2.0 * H;
            let lm = loss_of(&params.unflatten(&p).unwrap());
            (lp - lm) / (2.0 * H)
        })
        .collect();
    assert!(rel_err(&grads, &fd) < 1e-5);
}

#[test]
fn mlp_matches_dense_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = [4, 6, 3];
    let params = init_mlp(&dims, &mut rng).unwrap();
    let x = random_tensor(&mut rng, 5, 4);
    let got = mlp_eval(&params, &x, &dims, Activation::Gelu).unwrap();

    // Straight-line oracle with explicit loops and its own GELU via erf.
    let w0 = params.get("layer0.weight").unwrap();
    let b0 = params.get("layer0.bias").unwrap();
    let w1 = params.get("layer1.weight").unwrap();
    let b1 = params.get("layer1.bias").unwrap();
    let phi = |v: f64| 0.5 * v * (1.0 + learnsysid::autodiff::special::erf(v / 2f64.sqrt()));
    for n in 0..5 {
        let mut h = [0.0; 6];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = b0.get(0, j);
            for i in 0..4 {
                s += x.get(n, i) * w0.get(i, j);
            }
            *hj = phi(s);
        }
        for k in 0..3 {
            let mut s = b1.get(0, k);
            for (j, hj) in h.iter().enumerate() {
                s += hj * w1.get(j, k);
            }
            assert!((got.get(n, k) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn meta_gradient_through_one_step_matches_unrolled_formula() {
    // L(q) = q^2, q = p - lr * dL/dp = p - 2 lr p; d/dp L(q) = 2p(1 - 2lr)^2
    for &(p0, lr) in &[(1.3, 0.1), (-0.7, 0.25), (2.0, 0.01)] {
        let g = Graph::new();
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(p0)).unwrap();
        let p = ps.to_vars(&g);
        let pv = p.get("p").unwrap();
        let inner = pv.mul(&pv).unwrap().sum();
        let grads = backward(inner, &p, true).unwrap();
        let q = sgd_step_differentiable(&p, &grads, lr, true).unwrap();
        let qv = q.get("p").unwrap();
        let outer = qv.mul(&qv).unwrap().sum();
        let meta = backward(outer, &p, false).unwrap().get("p").unwrap().item();
        let expected = 2.0 * p0 * (1.0 - 2.0 * lr) * (1.0 - 2.0 * lr);
        assert!((meta - expected).abs() < 1e-10, "{meta} vs {expected}");
    }
}

/// L(p) = 0.5 p^T A p + b^T p, one inner step p' = p - a (A p + b);
/// dL(p')/dp = (I - a A)^T (A p' + b).
#[test]
fn second_order_quadratic_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let a11: f64 = rng.random_range(0.5..3.0);
        let a22: f64 = rng.random_range(0.5..3.0);
        let a12: f64 = rng.random_range(-0.4..0.4);
        let amat = [[a11, a12], [a12, a22]];
        let b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let p0 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let alpha: f64 = rng.random_range(0.01..0.2);

        let g = Graph::new();
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::row(&p0)).unwrap();
        let p = ps.to_vars(&g);
        let at = g.constant(Tensor::from_vec(2, 2, vec![a11, a12, a12, a22]).unwrap());
        let bt = g.constant(Tensor::row(&b));
        fn loss<'g>(v: Var<'g>, at: &Var<'g>, bt: &Var<'g>) -> Var<'g> {
            let ap = v.matmul(at).unwrap();
            let quad = v.mul(&ap).unwrap().sum().scale(0.5);
            quad.add(&v.mul(bt).unwrap().sum()).unwrap()
        }
        let grads = backward(loss(p.get("p").unwrap(), &at, &bt), &p, true).unwrap();
        let q = sgd_step_differentiable(&p, &grads, alpha, true).unwrap();
        let meta = backward(loss(q.get("p").unwrap(), &at, &bt), &p, false).unwrap();
        let got = meta.get("p").unwrap().value();

        let ap = |v: [f64; 2]| [amat[0][0] * v[0] + amat[0][1] * v[1], amat[1][0] * v[0] + amat[1][1] * v[1]];
        let g0 = ap(p0);
        let q0 = [p0[0] - alpha * (g0[0] + b[0]), p0[1] - alpha * (g0[1] + b[1])];
        let gq = ap(q0);
        let r = [gq[0] + b[0], gq[1] + b[1]];
        let m = [
            [1.0 - alpha * amat[0][0], -alpha * amat[0][1]],
            [-alpha * amat[1][0], 1.0 - alpha * amat[1][1]],
        ];
        let expected = [m[0][0] * r[0] + m[1][0] * r[1], m[0][1] * r[0] + m[1][1] * r[1]];
        for i in 0..2 {
            assert!((got.data()[i] - expected[i]).abs() < 1e-8);
        }
    }
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dims = [2, 8, 8, 3];
        let params = init_mlp(&dims, &mut rng).unwrap();
        let x = random_tensor(&mut rng, 16, 2);
        let g = Graph::new();
        let pv = params.to_vars(&g);
        let out = learnsysid::autodiff::mlp_forward(&pv, g.constant(x), &dims, Activation::Gelu).unwrap();
        let loss = out.mul(&out).unwrap().sum();
        backward(loss, &pv, false).unwrap().values().flatten()
    };
    let a: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn flatten_unflatten_round_trips(
        shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for (i, (r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c).map(|_| f64::from_bits(rng.random::<u64>() & 0x7fef_ffff_ffff_ffff)).collect();
            p.insert(format!("t{i}"), Tensor::from_vec(*r, *c, data).unwrap()).unwrap();
        }
        let q = p.unflatten(&p.flatten()).unwrap();
        let bits = |s: &ParamSet| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&p), bits(&q));
        prop_assert_eq!(p.names(), q.names());
    }
}
