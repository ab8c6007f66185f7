use augsearch::augment::Image;
use augsearch::autodiff::{Tape, Tensor};
use augsearch::models::{
    conv2d, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Architecture, Classifier, InputShape,
    OptimizerState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, h: usize, w: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Image::new(h, w, 1, (0..h * w).map(|_| rng.gen()).collect()).unwrap())
        .collect()
}

fn shape(h: usize, w: usize) -> InputShape {
    InputShape {
        height: h,
        width: w,
        channels: 1,
    }
}

#[test]
fn zero_weights_give_ln2() {
    for arch in [Architecture::mlp(), Architecture::small_cnn()] {
        let mut m = Classifier::new(arch, shape(8, 8), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.zero_weights();
        let ev = m.eval_batch(&images(5, 8, 8, 1), &[0, 1, 0, 1, 1], false).unwrap();
        assert!((ev.loss - std::f64::consts::LN_2).abs() < 1e-12, "{arch:?}: {}", ev.loss);
    }
}

#[test]
fn label_out_of_range_is_an_error() {
    let m = Classifier::new(Architecture::mlp(), shape(4, 4), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(m.eval_batch(&images(2, 4, 4, 0), &[0, 2], false).is_err());
    assert!(m.eval_batch(&[], &[], false).is_err());
}

#[test]
fn overfits_a_small_batch() {
    let xs = images(16, 4, 4, 3);
    let ys: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let mut m = Classifier::new(Architecture::Mlp { hidden: 32 }, shape(4, 4), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut opt = OptimizerState::sgd(0.05, 0.9, 0.0);
    for _ in 0..2000 {
        let ev = m.eval_batch(&xs, &ys, false).unwrap();
        opt.step_tensors(&mut m.weights, &ev.weight_grads).unwrap();
    }
    let loss = m.eval_batch(&xs, &ys, false).unwrap().loss;
    assert!(loss < 0.01, "{loss}");
    assert_eq!(m.predict(&xs).unwrap(), ys);
}

fn check_weight_grads(arch: Architecture, h: usize, w: usize) {
    let xs = images(3, h, w, 5);
    let ys = [0, 2, 1];
    let m = Classifier::new(arch, shape(h, w), 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let ev = m.eval_batch(&xs, &ys, true).unwrap();
    let eps = 1e-5;
    let mean = |ws: &[Tensor]| {
        let l = m.losses_with(ws, &xs, &ys).unwrap();
        l.iter().sum::<f64>() / l.len() as f64
    };
    for (t, g) in ev.weight_grads.iter().enumerate() {
        for i in (0..g.len()).step_by((g.len() / 7).max(1)) {
            let mut wp = m.weights.clone();
            wp[t].data[i] += eps;
            let mut wm = m.weights.clone();
            wm[t].data[i] -= eps;
            let fd = (mean(&wp) - mean(&wm)) / (2.0 * eps);
            let err = (fd - g[i]).abs();
            assert!(err <= 1e-4 * fd.abs().max(g[i].abs()) || err < 1e-7, "tensor {t}[{i}]: fd {fd} vs {}", g[i]);
        }
    }
    let gx = ev.input_grads.unwrap();
    let d = h * w;
    for i in (0..gx.len()).step_by(5) {
        let (b, p) = (i / d, i % d);
        let mut xp = xs.clone();
        xp[b].pixels[p] += eps;
        let mut xm = xs.clone();
        xm[b].pixels[p] -= eps;
        let f = |x: &[Image]| m.losses(x, &ys).unwrap().iter().sum::<f64>() / 3.0;
        let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
        let err = (fd - gx[i]).abs();
        assert!(err <= 1e-4 * fd.abs().max(gx[i].abs()) || err < 1e-7, "x[{i}]: fd {fd} vs {}", gx[i]);
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    check_weight_grads(Architecture::Mlp { hidden: 6 }, 4, 4);
}

#[test]
fn cnn_gradients_match_finite_differences() {
    check_weight_grads(
        Architecture::SmallCnn {
            kernel: 3,
            channels1: 3,
            channels2: 4,
        },
        8,
        8,
    );
}

#[test]
fn one_by_one_conv_is_a_linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, h, w, c, o) = (2, 3, 4, 2, 5);
    let x: Vec<f64> = (0..b * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt: Vec<f64> = (0..c * o).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(vec![b, h * w * c], x.clone()).unwrap());
    let wv = tape.constant(Tensor::matrix(c, o, wt.clone()).unwrap());
    let bv = tape.constant(Tensor::vector(bias.clone()));
    let y = conv2d(&mut tape, xv, b, h, w, c, 1, wv, bv).unwrap();
    assert_eq!(tape.shape(y), &[b * h * w, o]);
    let out = tape.value(y);
    for px in 0..b * h * w {
        for k in 0..o {
            let want: f64 = bias[k] + (0..c).map(|ch| x[px * c + ch] * wt[ch * o + k]).sum::<f64>();
            assert!((out[px * o + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn logits_have_one_entry_per_class() {
    let m = Classifier::new(Architecture::small_cnn(), shape(8, 8), 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let w: Vec<_> = m.weights.iter().map(|t| tape.constant(t.clone())).collect();
    let x: Vec<f64> = images(3, 8, 8, 0).into_iter().flat_map(|i| i.pixels).collect();
    let x = tape.constant(Tensor::new(vec![3, 64], x).unwrap());
    let logits = m.forward(&mut tape, &w, x).unwrap();
    assert_eq!(tape.shape(logits), &[3, 4]);
}

#[test]
fn plain_gradient_descent_when_momentum_is_zero() {
    let mut opt = OptimizerState::sgd(0.1, 0.0, 0.0);
    let mut p = vec![1.0, -2.0];
    opt.step(&mut [&mut p], &[&[0.5, 1.0]]).unwrap();
    assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);
    let mut q = vec![3.0];
    let mut opt = OptimizerState::sgd(0.1, 0.9, 0.0);
    opt.step(&mut [&mut q], &[&[0.0]]).unwrap();
    assert_eq!(q, vec![3.0]);
}

#[test]
fn momentum_converges_on_a_quadratic_bowl() {
    let center = [1.5, -0.5, 2.0];
    let scale = [1.0, 3.0, 0.5];
    let mut p = vec![0.0; 3];
    let mut opt = OptimizerState::sgd(0.1, 0.9, 0.0);
    for _ in 0..500 {
        let g: Vec<f64> = (0..3).map(|i| scale[i] * (p[i] - center[i])).collect();
        opt.step(&mut [&mut p], &[&g]).unwrap();
    }
    for i in 0..3 {
        assert!((p[i] - center[i]).abs() < 1e-6, "{p:?}");
    }
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut opt = OptimizerState::adam(5e-3);
    let mut p = vec![0.0, 1.0, 2.0];
    opt.step(&mut [&mut p], &[&[3.0, -0.01, 250.0]]).unwrap();
    let moved: Vec<f64> = p.iter().zip([0.0, 1.0, 2.0]).map(|(a, b)| a - b).collect();
    for (m, s) in moved.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((m - s * 5e-3).abs() < 1e-8, "{moved:?}");
    }
}

#[test]
fn adam_three_step_trace() {
    // g = 1 each step: m_hat = v_hat = 1, so each step moves lr / (1 + eps).
    let lr = 5e-3;
    let mut opt = OptimizerState::adam(lr);
    let mut p = vec![0.25];
    let mut by_hand = 0.25;
    for t in 1..=3 {
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let m = 1.0 - 0.5f64.powi(t);
        let v = 1.0 - 0.999f64.powi(t);
        by_hand -= lr * (m / (1.0 - 0.5f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
    }
    assert!((p[0] - by_hand).abs() < 1e-15);
    assert!((p[0] - (0.25 - 3.0 * lr / (1.0 + 1e-8))).abs() < 1e-12);
}

#[test]
fn adam_ignores_a_zero_gradient_stream() {
    let mut opt = OptimizerState::adam(5e-3);
    let mut p = vec![0.7, -0.2];
    for _ in 0..10 {
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
    }
    assert_eq!(p, vec![0.7, -0.2]);
}

#[test]
fn optimizer_rejects_bad_gradients() {
    let mut opt = OptimizerState::sgd(0.1, 0.9, 5e-4);
    let mut p = vec![0.0, 0.0];
    assert!(opt.step(&mut [&mut p], &[&[1.0]]).is_err());
    assert!(opt.step(&mut [&mut p], &[&[f64::NAN, 0.0]]).is_err());
    assert_eq!(p, vec![0.0, 0.0]);
    opt.step(&mut [&mut p], &[&[1.0, 1.0]]).unwrap();
    let mut q = vec![0.0; 3];
    assert!(opt.step(&mut [&mut q], &[&[1.0, 1.0, 1.0]]).is_err());
}

#[test]
fn training_is_deterministic() {
    let xs = images(8, 4, 4, 9);
    let ys: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let run = || {
        let mut m = Classifier::new(Architecture::mlp(), shape(4, 4), 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut opt = OptimizerState::sgd(0.05, 0.9, 5e-4);
        for _ in 0..20 {
            let ev = m.eval_batch(&xs, &ys, false).unwrap();
            opt.step_tensors(&mut m.weights, &ev.weight_grads).unwrap();
        }
        m.weights
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.shape, y.shape);
        assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = Classifier::new(Architecture::small_cnn(), shape(8, 8), 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    m.save(&path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m.weights);
    let mut other = Classifier::new(Architecture::small_cnn(), shape(8, 8), 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    other.load_weights(&path).unwrap();
    assert_eq!(other.weights, m.weights);
    let mut wrong = Classifier::new(Architecture::mlp(), shape(8, 8), 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(wrong.load_weights(&path).is_err());
}

#[test]
fn checkpoint_layout() {
    let ts = vec![Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap(), Tensor::scalar(0.5)];
    let mut buf = vec![];
    write_checkpoint(&mut buf, &ts).unwrap();
    assert_eq!(&buf[..8], b"AUGSWTS\0");
    assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
    // index: (4 + 2*8 + 8) + (4 + 0 + 8), then 3 floats
    assert_eq!(buf.len(), 16 + 28 + 12 + 24);
    assert_eq!(f64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap()), 0.5);
    assert_eq!(read_checkpoint(&buf).unwrap(), ts);
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&bad).is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.bin");
    save_checkpoint(&p, &ts).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), buf);
}
