use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{numeric_partial, relative_error};
use super::layers::{AdditiveAttention, Lstm};
use super::*;

fn rand_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Projects the output of `build` onto fixed random weights and compares the
/// input gradients with central differences.
fn check_op(inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Matrix], weights: Option<&Matrix>| -> (f64, Vec<Option<Matrix>>, Matrix) {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = xs.iter().map(|m| g.variable(m.clone())).collect();
        let out = build(&mut g, &vars);
        let shape = g.value(out).shape();
        let w = weights
            .cloned()
            .unwrap_or_else(|| Matrix::filled(shape.0, shape.1, 1.0));
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv);
        let root = g.sum(prod);
        let grads = g.backward(root);
        let per_input = vars.iter().map(|&v| grads.wrt(v).cloned()).collect();
        (g.scalar(root), per_input, g.value(out).clone())
    };
    let (_, _, out) = eval(&inputs, None);
    let weights = rand_matrix(out.rows, out.cols, &mut rng);
    let (_, analytic, _) = eval(&inputs, Some(&weights));
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut xs = inputs.clone();
            let mut flat = xs[i].data.clone();
            let numeric = numeric_partial(&mut flat, k, 1e-6, &mut |x: &[f64]| {
                xs[i].data.copy_from_slice(x);
                eval(&xs, Some(&weights)).0
            });
            let a = analytic[i].as_ref().map_or(0.0, |m| m.data[k]);
            let err = relative_error(a, numeric);
            assert!(err < 1e-5, "input {i} entry {k}: analytic {a} numeric {numeric}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn grad_matmul_variants() {
    let mut r = rng();
    let a = rand_matrix(3, 4, &mut r);
    let b = rand_matrix(4, 2, &mut r);
    check_op(vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    let c = rand_matrix(5, 4, &mut r);
    check_op(vec![a, c], |g, v| g.matmul_t(v[0], v[1]));
}

#[test]
fn grad_elementwise() {
    let mut r = rng();
    let a = rand_matrix(3, 4, &mut r);
    let b = rand_matrix(3, 4, &mut r);
    let row = rand_matrix(1, 4, &mut r);
    check_op(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check_op(vec![a.clone(), row], |g, v| g.add_row(v[0], v[1]));
    check_op(vec![a.clone()], |g, v| g.scale(v[0], -2.5));
    check_op(vec![a.clone()], |g, v| g.tanh(v[0]));
    check_op(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check_op(vec![a.clone()], |g, v| g.gelu(v[0]));
    check_op(vec![a], |g, v| g.transpose(v[0]));
}

#[test]
fn grad_relu_away_from_kink() {
    let a = Matrix::from_rows(&[vec![0.5, -0.3], vec![-1.2, 2.0]]);
    check_op(vec![a], |g, v| g.relu(v[0]));
}

#[test]
fn grad_softmax_masked() {
    let mut r = rng();
    let a = rand_matrix(3, 4, &mut r);
    check_op(vec![a.clone()], |g, v| g.softmax_rows(v[0], None));
    let mask = vec![
        true, true, false, true, false, true, true, true, true, false, false, false,
    ];
    let mask = mask
        .into_iter()
        .enumerate()
        .map(|(i, m)| m || i % 4 == 0)
        .collect::<Vec<_>>();
    check_op(vec![a], move |g, v| g.softmax_rows(v[0], Some(mask.clone())));
}

#[test]
fn grad_layer_norm() {
    let mut r = rng();
    let x = rand_matrix(3, 5, &mut r);
    let gain = rand_matrix(1, 5, &mut r);
    let bias = rand_matrix(1, 5, &mut r);
    check_op(vec![x, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-12));
}

#[test]
fn grad_structural_ops() {
    let mut r = rng();
    let t = rand_matrix(6, 3, &mut r);
    check_op(vec![t.clone()], |g, v| g.gather(v[0], &[4, 1, 4, 0]));
    check_op(vec![t.clone()], |g, v| g.slice_rows(v[0], 2, 3));
    check_op(vec![t.clone()], |g, v| g.slice_cols(v[0], 1, 2));
    check_op(vec![t.clone(), rand_matrix(2, 3, &mut r)], |g, v| {
        g.concat_rows(&[v[0], v[1], v[0]])
    });
    check_op(vec![t.clone(), rand_matrix(6, 2, &mut r)], |g, v| {
        g.concat_cols(&[v[1], v[0]])
    });
    check_op(vec![t.clone()], |g, v| g.max_rows(v[0]));
    check_op(vec![t.clone()], |g, v| g.mean_rows(v[0]));
    check_op(vec![t], |g, v| g.sum(v[0]));
}

#[test]
fn grad_bce() {
    for (z, y) in [(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0)] {
        check_op(vec![Matrix::scalar(z)], move |g, v| g.bce_with_logits(v[0], y));
    }
}

#[test]
fn bce_matches_definition() {
    let mut g = Graph::standalone();
    let z = g.constant(Matrix::scalar(0.7));
    let l = g.bce_with_logits(z, 1.0);
    assert!((g.scalar(l) + sigmoid(0.7).ln()).abs() < 1e-12);
}

#[test]
fn masked_softmax_exact_zeros() {
    let mut g = Graph::standalone();
    let a = g.constant(Matrix::from_rows(&[vec![1.0, 50.0, 2.0]]));
    let s = g.softmax_rows(a, Some(vec![true, false, true]));
    let v = g.value(s);
    assert_eq!(v.data[1], 0.0);
    assert!((v.data[0] + v.data[2] - 1.0).abs() < 1e-15);
}

#[test]
fn lstm_and_attention_param_grads() {
    let mut r = rng();
    let mut ps = ParamSet::new();
    let lstm = Lstm::new(&mut ps, "lstm", 3, 2, &mut r);
    let attn = AdditiveAttention::new(&mut ps, "attn", 4, 3, &mut r);
    let x = rand_matrix(4, 3, &mut r);
    let loss = |ps: &ParamSet| -> (f64, Vec<Option<Matrix>>) {
        let mut g = Graph::new(ps);
        let xv = g.constant(x.clone());
        let fwd = lstm.forward(&mut g, xv, false);
        let bwd = lstm.forward(&mut g, xv, true);
        let h = g.concat_cols(&[fwd, bwd]);
        let (pooled, _) = attn.forward(&mut g, h);
        let s = g.sum(pooled);
        let l = g.bce_with_logits(s, 1.0);
        let grads = g.backward(l).into_param_grads();
        (g.scalar(l), grads)
    };
    let (_, analytic) = loss(&ps);
    let report = gradcheck::check_params(&mut ps, |p| loss(p).0, &analytic, 1e-6, None);
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn frozen_params_get_no_grad() {
    let mut ps = ParamSet::new();
    let a = ps.add("a", Matrix::scalar(2.0));
    let b = ps.add("b", Matrix::scalar(3.0));
    let frozen = vec![true, false];
    let mut g = Graph::with_frozen(&ps, &frozen);
    let (va, vb) = (g.param(a), g.param(b));
    let p = g.mul(va, vb);
    let grads = g.backward(p).into_param_grads();
    assert!(grads[0].is_none());
    assert_eq!(grads[1].as_ref().unwrap().data[0], 2.0);
}

#[test]
fn adam_moves_against_gradient() {
    let mut ps = ParamSet::new();
    ps.add("w", Matrix::from_rows(&[vec![1.0, -1.0]]));
    let mut opt = optim::AdamW::new(&ps, 0.1, 0.0);
    opt.step(&mut ps, &[Some(Matrix::from_rows(&[vec![0.5, -0.5]]))], 1.0);
    let w = &ps.values()[0];
    assert!((w.data[0] - 0.9).abs() < 1e-6);
    assert!((w.data[1] + 0.9).abs() < 1e-6);
}

#[test]
fn warmup_schedule() {
    let s = optim::WarmupLinear::new(100, 0.1);
    assert_eq!(s.factor(5), 0.5);
    assert_eq!(s.factor(10), 1.0);
    assert!((s.factor(55) - 0.5).abs() < 1e-12);
    assert_eq!(s.factor(100), 0.0);
}
