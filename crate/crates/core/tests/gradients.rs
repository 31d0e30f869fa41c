use penn_mpc_core::nn::{Activation, Mlp};
use penn_mpc_core::penn::{l2_loss, nll_loss, VarianceBounds};
use penn_mpc_core::rng;
use rand::Rng;

const H: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn random_vec(r: &mut rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

struct Case {
    net: Mlp,
    input: Vec<f64>,
    batch: usize,
}

fn random_case(seed: u64) -> Case {
    let mut r = rng::rng(seed);
    let depth = r.random_range(1..4);
    let mut sizes = vec![r.random_range(1..6)];
    for _ in 0..depth {
        sizes.push(r.random_range(1..7));
    }
    let activation = [Activation::Tanh, Activation::Relu, Activation::Identity][seed as usize % 3];
    let net = Mlp::new(&sizes, activation, seed).unwrap();
    let batch = r.random_range(1..5);
    let input = random_vec(&mut r, batch * sizes[0], 1.5);
    Case { net, input, batch }
}

/// Max relative error of analytic vs central-difference gradients of
/// `loss(head rows)` through the network, over parameters and inputs.
fn check_chain(case: &Case, loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>)) -> f64 {
    let Case { net, input, batch } = case;
    let cache = net.forward(input, *batch).unwrap();
    let (_, head_grad) = loss(cache.output());
    let (grads, input_grad) = net.backward(&cache, &head_grad).unwrap();
    let eval = |n: &Mlp, x: &[f64]| loss(&n.predict(x, *batch).unwrap()).0;

    let mut worst: f64 = 0.0;
    let analytic: Vec<f64> = grads.iter().copied().collect();
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = net.clone();
        let mut minus = net.clone();
        *plus.params_mut().nth(i).unwrap() += H;
        *minus.params_mut().nth(i).unwrap() -= H;
        let numeric = (eval(&plus, input) - eval(&minus, input)) / (2.0 * H);
        worst = worst.max(rel_err(*a, numeric));
    }
    for (i, a) in input_grad.iter().enumerate() {
        let mut xp = input.clone();
        let mut xm = input.clone();
        xp[i] += H;
        xm[i] -= H;
        let numeric = (eval(net, &xp) - eval(net, &xm)) / (2.0 * H);
        worst = worst.max(rel_err(*a, numeric));
    }
    worst
}

#[test]
fn mlp_layers_match_finite_differences() {
    for seed in 0..30 {
        let case = random_case(seed);
        let out = case.net.output_dim();
        let mut r = rng::rng(seed + 1000);
        let coef = random_vec(&mut r, case.batch * out, 1.0);
        let linear = |y: &[f64]| -> (f64, Vec<f64>) {
            (y.iter().zip(&coef).map(|(a, b)| a * b).sum(), coef.clone())
        };
        let e = check_chain(&case, &linear);
        assert!(e < 1e-4, "seed {seed}: relative error {e}");
    }
}

#[test]
fn nll_head_matches_finite_differences() {
    let mut r = rng::rng(7);
    for i in 0..25 {
        let bounds = VarianceBounds {
            min: 10f64.powi(-(i % 4 + 2)),
            max: r.random_range(1.0..20.0),
        };
        let head = random_vec(&mut r, 6, 2.0);
        let target = random_vec(&mut r, 3, 2.0);
        let (_, g) = nll_loss(&head, &target, bounds).unwrap();
        for k in 0..6 {
            let mut p = head.clone();
            let mut m = head.clone();
            p[k] += H;
            m[k] -= H;
            let numeric =
                (nll_loss(&p, &target, bounds).unwrap().0 - nll_loss(&m, &target, bounds).unwrap().0) / (2.0 * H);
            let e = rel_err(g[k], numeric);
            assert!(e < 1e-4, "case {i}, head {k}: {} vs {numeric}", g[k]);
        }
    }
}

#[test]
fn l2_matches_finite_differences() {
    let mut r = rng::rng(8);
    for i in 0..25 {
        let pred = random_vec(&mut r, 3, 3.0);
        let target = random_vec(&mut r, 3, 3.0);
        let (_, g) = l2_loss(&pred, &target).unwrap();
        for k in 0..3 {
            let mut p = pred.clone();
            let mut m = pred.clone();
            p[k] += H;
            m[k] -= H;
            let numeric = (l2_loss(&p, &target).unwrap().0 - l2_loss(&m, &target).unwrap().0) / (2.0 * H);
            assert!(rel_err(g[k], numeric) < 1e-4, "case {i}, dim {k}");
        }
    }
}

#[test]
fn nll_through_network_matches_finite_differences() {
    let bounds = VarianceBounds::default();
    for seed in 0..20 {
        let mut r = rng::rng(seed + 50);
        let inputs = r.random_range(1..6);
        let sizes = [inputs, r.random_range(2..6), 6];
        let activation = if seed % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let net = Mlp::new(&sizes, activation, seed).unwrap();
        let batch = r.random_range(1..4);
        let input = random_vec(&mut r, batch * inputs, 1.0);
        let targets = random_vec(&mut r, batch * 3, 1.0);
        let loss = |y: &[f64]| -> (f64, Vec<f64>) {
            let mut total = 0.0;
            let mut grad = Vec::with_capacity(y.len());
            for (row, t) in y.chunks_exact(6).zip(targets.chunks_exact(3)) {
                let (l, g) = nll_loss(row, t, bounds).unwrap();
                total += l;
                grad.extend_from_slice(&g);
            }
            (total, grad)
        };
        let e = check_chain(&Case { net, input, batch }, &loss);
        assert!(e < 1e-4, "seed {seed}: relative error {e}");
    }
}

#[test]
fn l2_through_network_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng::rng(seed + 90);
        let inputs = r.random_range(1..6);
        let net = Mlp::new(&[inputs, 5, 4, 3], Activation::Tanh, seed).unwrap();
        let batch = r.random_range(1..4);
        let input = random_vec(&mut r, batch * inputs, 1.0);
        let targets = random_vec(&mut r, batch * 3, 1.0);
        let loss = |y: &[f64]| -> (f64, Vec<f64>) {
            let mut total = 0.0;
            let mut grad = Vec::with_capacity(y.len());
            for (row, t) in y.chunks_exact(3).zip(targets.chunks_exact(3)) {
                let (l, g) = l2_loss(row, t).unwrap();
                total += l;
                grad.extend_from_slice(&g);
            }
            (total, grad)
        };
        let e = check_chain(&Case { net, input, batch }, &loss);
        assert!(e < 1e-4, "seed {seed}: relative error {e}");
    }
}

#[test]
fn batch_gradients_are_sums_of_single_rows() {
    let case = random_case(4);
    let out = case.net.output_dim();
    let in_dim = case.net.input_dim();
    let ones = vec![1.0; case.batch * out];
    let cache = case.net.forward(&case.input, case.batch).unwrap();
    let (whole, _) = case.net.backward(&cache, &ones).unwrap();
    let mut summed = vec![0.0; case.net.num_params()];
    for row in case.input.chunks_exact(in_dim) {
        let c = case.net.forward(row, 1).unwrap();
        let (g, _) = case.net.backward(&c, &vec![1.0; out]).unwrap();
        for (s, v) in summed.iter_mut().zip(g.iter()) {
            *s += v;
        }
    }
    for (a, b) in whole.iter().zip(&summed) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batched_forward_equals_row_by_row() {
    for seed in 0..10 {
        let case = random_case(seed);
        let in_dim = case.net.input_dim();
        let out = case.net.predict(&case.input, case.batch).unwrap();
        let rows: Vec<f64> = case
            .input
            .chunks_exact(in_dim)
            .flat_map(|x| case.net.predict(x, 1).unwrap())
            .collect();
        assert_eq!(out, rows);
    }
}

#[test]
fn identity_network_is_linear() {
    let net = Mlp::new(&[4, 3, 2], Activation::Identity, 3).unwrap();
    let mut r = rng::rng(1);
    let a = random_vec(&mut r, 4, 1.0);
    let b = random_vec(&mut r, 4, 1.0);
    let zero = net.predict(&[0.0; 4], 1).unwrap();
    let fa = net.predict(&a, 1).unwrap();
    let fb = net.predict(&b, 1).unwrap();
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let fab = net.predict(&sum, 1).unwrap();
    for k in 0..2 {
        assert!((fab[k] - (fa[k] + fb[k] - zero[k])).abs() < 1e-12);
    }
}
