mod common;

use augsearch::autodiff::{mlp_input_gradient, Activation, Tape, Tensor, Var};
use common::RandomGraph;
use proptest::prelude::*;

#[test]
fn random_graphs_match_finite_differences() {
    for seed in 0..200 {
        let g = RandomGraph::new(seed);
        if let Err(e) = g.check() {
            panic!("graph {seed}: {e}");
        }
    }
}

fn fd_unary(f: impl Fn(&mut Tape, Var) -> Var, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let eval = |xs: &[f64]| {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(xs.to_vec()));
        let y = f(&mut t, v);
        let s = t.sum(y).unwrap();
        t.item(s)
    };
    let mut t = Tape::new();
    let v = t.param(Tensor::vector(x.to_vec()));
    let y = f(&mut t, v);
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    let h = 1e-5;
    let fd = (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            (eval(&p) - eval(&m)) / (2.0 * h)
        })
        .collect();
    (t.grad_or_zero(v), fd)
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| {
        let e = (x - y).abs();
        e <= 1e-7 || e <= 1e-4 * x.abs().max(y.abs())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_ops_match_finite_differences(x in prop::collection::vec(-2.0f64..2.0, 1..6)) {
        let ops: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            ("exp", Box::new(|t, v| t.exp(v).unwrap())),
            ("tanh", Box::new(|t, v| t.tanh(v).unwrap())),
            ("sigmoid", Box::new(|t, v| t.sigmoid(v).unwrap())),
            ("square", Box::new(|t, v| t.square(v).unwrap())),
            ("neg", Box::new(|t, v| t.neg(v).unwrap())),
            ("log", Box::new(|t, v| {
                let s = t.square(v).unwrap();
                let s = t.add_scalar(s, 0.1).unwrap();
                t.log(s).unwrap()
            })),
            ("softmax", Box::new(|t, v| {
                let s = t.softmax_last(v).unwrap();
                t.mul(s, v).unwrap()
            })),
            ("div", Box::new(|t, v| {
                let s = t.square(v).unwrap();
                let d = t.add_scalar(s, 0.5).unwrap();
                t.div(v, d).unwrap()
            })),
        ];
        for (name, f) in &ops {
            let (ad, fd) = fd_unary(f, &x);
            prop_assert!(close(&ad, &fd), "{}: {:?} vs {:?}", name, ad, fd);
        }
    }

    #[test]
    fn matmul_gradient(a in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 6)) {
        let b2 = b.clone();
        let (ad, fd) = fd_unary(move |t, v| {
            let m = t.reshape(v, &[2, 3]).unwrap();
            let w = t.constant(Tensor::matrix(3, 2, b2.clone()).unwrap());
            let y = t.matmul(m, w).unwrap();
            t.square(y).unwrap()
        }, &a);
        prop_assert!(close(&ad, &fd));
    }
}

fn surrogate_grad_sum(params: &[Tensor], z: &Tensor, act: Activation) -> f64 {
    let mut t = Tape::new();
    let p: Vec<Var> = params.iter().map(|x| t.constant(x.clone())).collect();
    let zv = t.constant(z.clone());
    let g = mlp_input_gradient(&mut t, p[0], p[1], p[2], act, zv).unwrap();
    let sq = t.square(g).unwrap();
    let s = t.sum(sq).unwrap();
    t.item(s)
}

#[test]
fn input_gradient_is_differentiable_in_its_parameters() {
    let params = vec![
        Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        Tensor::vector(vec![0.1, -0.2, 0.3, 0.05]),
        Tensor::matrix(4, 1, vec![0.5, -1.0, 0.7, 0.2]).unwrap(),
    ];
    let z = Tensor::matrix(2, 3, vec![0.3, -0.5, 0.9, 0.1, 0.4, -0.8]).unwrap();
    for act in [Activation::Tanh, Activation::Sigmoid, Activation::Identity] {
        let mut t = Tape::new();
        let p: Vec<Var> = params.iter().map(|x| t.param(x.clone())).collect();
        let zv = t.constant(z.clone());
        let g = mlp_input_gradient(&mut t, p[0], p[1], p[2], act, zv).unwrap();
        let sq = t.square(g).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        let h = 1e-5;
        for (k, x) in params.iter().enumerate() {
            let ad = t.grad_or_zero(p[k]);
            for e in 0..x.len() {
                let mut plus = params.clone();
                plus[k].data[e] += h;
                let mut minus = params.clone();
                minus[k].data[e] -= h;
                let fd = (surrogate_grad_sum(&plus, &z, act) - surrogate_grad_sum(&minus, &z, act)) / (2.0 * h);
                let err = (fd - ad[e]).abs();
                assert!(err <= 1e-3 * fd.abs().max(ad[e].abs()) || err < 1e-8, "{act:?} param {k}[{e}]: {} vs {fd}", ad[e]);
            }
        }
    }
}

#[test]
fn input_gradient_matches_finite_differences_on_z() {
    let w1 = Tensor::matrix(2, 5, (0..10).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
    let b1 = Tensor::vector(vec![0.2, -0.1, 0.0, 0.3, -0.4]);
    let w2 = Tensor::matrix(5, 1, vec![1.0, -0.5, 0.25, 0.8, -1.2]).unwrap();
    let f = |z: &[f64]| {
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(w1.clone()), t.constant(b1.clone()), t.constant(w2.clone()));
        let x = t.constant(Tensor::matrix(1, 2, z.to_vec()).unwrap());
        let h = t.affine(x, a, b).unwrap();
        let h = t.tanh(h).unwrap();
        let o = t.matmul(h, c).unwrap();
        t.sum(o).map(|s| t.item(s)).unwrap()
    };
    let z = [0.4, -0.7];
    let mut t = Tape::new();
    let (a, b, c) = (t.constant(w1.clone()), t.constant(b1.clone()), t.constant(w2.clone()));
    let zv = t.constant(Tensor::matrix(1, 2, z.to_vec()).unwrap());
    let g = mlp_input_gradient(&mut t, a, b, c, Activation::Tanh, zv).unwrap();
    let g = t.value(g).to_vec();
    for i in 0..2 {
        let (mut p, mut m) = (z, z);
        p[i] += 1e-5;
        m[i] -= 1e-5;
        let fd = (f(&p) - f(&m)) / 2e-5;
        assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
    }
}
