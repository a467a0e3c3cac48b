use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::params::ParamStore;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Max relative error between tape gradients and central differences of
/// `sum(w ⊙ f(inputs))` with fixed random weights `w`.
fn fd_max_rel_err(
    inputs: &[Tensor],
    eps: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let weighted = |tape: &mut Tape, vars: &[Var]| -> Var {
        let y = f(tape, vars);
        let shape = tape.shape(y).to_vec();
        let mut wr = ChaCha8Rng::seed_from_u64(99);
        let w = tape.constant(rand_tensor(&mut wr, &shape));
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = weighted(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = weighted(&mut t, &vs);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        for i in 0..input.numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += eps;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * eps;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity_and_selector() {
    let mut t = Tape::new();
    let i2 = t.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let y = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(y), t.value(m));

    let s = t.constant(mat(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let c = t.constant(mat(&[&[5.0], &[7.0]]));
    let y = t.matmul(s, c).unwrap();
    assert_eq!(t.value(y).data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_of_sum_is_b_transpose_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let mut t = Tape::new();
    let av = t.param(a.clone());
    let bv = t.constant(b.clone());
    let y = t.matmul(av, bv).unwrap();
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    let ga = g.get(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want = b.at(&[k, 0]) + b.at(&[k, 1]);
            assert!((ga.at(&[i, k]) - want).abs() < 1e-12);
        }
    }
    let err = fd_max_rel_err(&[a, b], 1e-5, |t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_cases() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let z = t.constant(Tensor::zeros(&[3]));
    let s = t.add(x, z).unwrap();
    assert_eq!(t.value(s), t.value(x));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    let sc = t.scale(x, 2.0);
    assert_eq!(t.value(sc).data(), &[-2.0, 0.0, 4.0]);
    let other = t.constant(Tensor::zeros(&[4]));
    assert!(matches!(t.add(x, other), Err(Error::Shape { .. })));
    assert!(t.elementwise(ElementwiseKind::Mul, x, None).is_err());
    assert!("erf".parse::<ElementwiseKind>().is_err());
    assert_eq!("scale:0.5".parse::<ElementwiseKind>().unwrap(), ElementwiseKind::Scale(0.5));
}

#[test]
fn gelu_constants_and_gradient() {
    assert!((GELU_SQRT_2_OVER_PI - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
    assert_eq!(gelu(0.0), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[16]);
    let err = fd_max_rel_err(&[x], 1e-5, |t, v| t.gelu(v[0]));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn binary_and_unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 5]);
    let b = rand_tensor(&mut rng, &[2, 5]);
    let bias = rand_tensor(&mut rng, &[5]);
    for kind in ["add", "sub", "mul"] {
        let k: ElementwiseKind = kind.parse().unwrap();
        let err = fd_max_rel_err(&[a.clone(), b.clone()], 1e-5, |t, v| {
            t.elementwise(k, v[0], Some(v[1])).unwrap()
        });
        assert!(err < 1e-6, "{kind}: {err}");
    }
    let err = fd_max_rel_err(std::slice::from_ref(&a), 1e-5, |t, v| t.tanh(v[0]));
    assert!(err < 1e-6, "{err}");
    let err = fd_max_rel_err(&[a.clone(), bias], 1e-5, |t, v| t.add_bias(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "{err}");
    let err = fd_max_rel_err(&[a], 1e-5, |t, v| {
        let tr = t.transpose(v[0]).unwrap();
        t.reshape(tr, &[10]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_cases() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3]));
    let y = t.softmax_lastdim(x).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let y = t.softmax_lastdim(x).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let xv = t.constant(x.clone());
    let y = t.softmax_lastdim(xv).unwrap();
    for r in 0..4 {
        let s: f64 = t.value(y).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let err = fd_max_rel_err(&[x], 1e-5, |t, v| t.softmax_lastdim(v[0]).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_cases() {
    let mut t = Tape::new();
    let ones = t.constant(Tensor::full(&[4], 1.0));
    let zeros = t.constant(Tensor::zeros(&[4]));
    let x = t.constant(Tensor::full(&[2, 4], 3.5));
    let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xr = t.constant(rand_tensor(&mut rng, &[3, 4]));
    let b = t.constant(Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
    let y = t.layer_norm(xr, zeros, b, 1e-5).unwrap();
    for r in 0..3 {
        assert_eq!(t.value(y).row(r), &[0.5, -1.0, 2.0, 0.0]);
    }
    let y = t.layer_norm(xr, ones, zeros, 1e-5).unwrap();
    for r in 0..3 {
        let mean: f64 = t.value(y).row(r).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
    }

    let x = rand_tensor(&mut rng, &[3, 8]);
    let g = rand_tensor(&mut rng, &[8]);
    let bb = rand_tensor(&mut rng, &[8]);
    let err = fd_max_rel_err(&[x, g, bb], 1e-5, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    assert!(err < 1e-5, "{err}");
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let (c, h, w) = (2, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[c, h, w]);
    let mut k = Tensor::zeros(&[c, c, 3, 3]);
    for o in 0..c {
        k.data_mut()[((o * c + o) * 3 + 1) * 3 + 1] = 1.0;
    }
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(k);
    let b = t.constant(Tensor::zeros(&[c]));
    let y = t.conv2d_3x3(xv, kv, b).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_impulse_response_is_clipped_block() {
    let (h, w) = (4, 5);
    for (hy, hx) in [(0, 0), (2, 3), (3, 4)] {
        let mut x = Tensor::zeros(&[1, h, w]);
        x.data_mut()[hy * w + hx] = 1.0;
        let mut t = Tape::new();
        let xv = t.constant(x);
        let k = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d_3x3(xv, k, b).unwrap();
        for yy in 0..h {
            for xx in 0..w {
                let inside = (yy as isize - hy as isize).abs() <= 1
                    && (xx as isize - hx as isize).abs() <= 1;
                assert_eq!(t.value(y).at(&[0, yy, xx]), if inside { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn conv_channel_mismatch_is_an_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 3, 3]));
    let k = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert!(matches!(t.conv2d_3x3(x, k, b), Err(Error::Shape { .. })));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    let k = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    let err = fd_max_rel_err(&[x, k, b], 1e-5, |t, v| t.conv2d_3x3(v[0], v[1], v[2]).unwrap());
    assert!(err < 1e-5, "{err}");
}

#[test]
fn backward_linear_and_quadratic() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![3], vec![0.3, -2.0, 5.0]).unwrap());
    let l = t.sum(x);
    assert_eq!(t.backward(l).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    assert_eq!(t.backward(l).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn shared_tensor_gradient_is_sum_of_branch_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let xa = rand_tensor(&mut rng, &[2, 3]);
    let xb = rand_tensor(&mut rng, &[4, 3]);
    let branch = |t: &mut Tape, w: Var, x: &Tensor| {
        let xv = t.constant(x.clone());
        let y = t.matmul(xv, w).unwrap();
        let y = t.gelu(y);
        t.sum(y)
    };
    let grad_of = |xs: &[&Tensor]| {
        let mut t = Tape::new();
        let wv = t.param(w.clone());
        let parts: Vec<Var> = xs.iter().map(|x| branch(&mut t, wv, x)).collect();
        let mut l = parts[0];
        for &p in &parts[1..] {
            l = t.add(l, p).unwrap();
        }
        t.backward(l).unwrap().get(wv).unwrap().clone()
    };
    let both = grad_of(&[&xa, &xb]);
    let a = grad_of(&[&xa]);
    let b = grad_of(&[&xb]);
    for i in 0..9 {
        assert!((both.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-12);
    }
    // and the per-branch sum agrees with finite differences of the joint loss
    let err = fd_max_rel_err(&[w, xa, xb], 1e-5, |t, v| {
        let ya = t.matmul(v[1], v[0]).unwrap();
        let yb = t.matmul(v[2], v[0]).unwrap();
        let j = t.concat_rows(&[ya, yb]).unwrap();
        t.gelu(j)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(Error::Autodiff(_))));
    let c = t.constant(Tensor::zeros(&[2]));
    let l = t.sum(c);
    assert!(matches!(t.backward(l), Err(Error::Autodiff(_))));
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let err = fd_max_rel_err(std::slice::from_ref(&x), 1e-5, |t, v| t.gather_rows(v[0], &[4, 0, 0, 2]).unwrap());
    assert!(err < 1e-6, "{err}");
    let segs = vec![vec![0, 1], vec![2], vec![3, 4, 0]];
    let err = fd_max_rel_err(std::slice::from_ref(&x), 1e-5, |t, v| t.segment_mean(v[0], &segs).unwrap());
    assert!(err < 1e-6, "{err}");
    let cells = [0usize, 5, 7, 11, 3];
    let err = fd_max_rel_err(&[x], 1e-5, |t, v| {
        let m = t.scatter_to_map(v[0], &cells, 3, 4).unwrap();
        let m = t.tanh(m);
        t.gather_from_map(m, &[7, 2, 0]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn scatter_rejects_duplicate_cells() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.scatter_to_map(x, &[1, 1], 2, 2), Err(Error::Integrity(_))));
}

#[test]
fn grouped_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = rand_tensor(&mut rng, &[5, 8]);
    let k = rand_tensor(&mut rng, &[4, 8]);
    let v = rand_tensor(&mut rng, &[4, 8]);
    let groups = vec![
        AttentionGroup { queries: vec![0, 3], keys: vec![1, 2, 3] },
        AttentionGroup { queries: vec![1, 4], keys: vec![0] },
    ];
    let err = fd_max_rel_err(&[q, k, v], 1e-5, |t, vs| {
        t.grouped_attention(vs[0], vs[1], vs[2], &groups, 2).unwrap().0
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn chamfer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pred = rand_tensor(&mut rng, &[2, 12]);
    let targets: Vec<f64> = (0..2 * 5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut t = Tape::new();
    let p = t.param(pred.clone());
    let l = t.chamfer(p, &targets, 4).unwrap();
    let g = t.backward(l).unwrap().get(p).unwrap().clone();
    let eps = 1e-6;
    for i in 0..pred.numel() {
        let f = |delta: f64| {
            let mut pp = pred.clone();
            pp.data_mut()[i] += delta;
            let mut t = Tape::new();
            let p = t.constant(pp);
            let l = t.chamfer(p, &targets, 4).unwrap();
            t.value(l).item()
        };
        let numeric = (f(eps) - f(-eps)) / (2.0 * eps);
        assert!((numeric - g.data()[i]).abs() < 1e-6, "{i}: {numeric} vs {}", g.data()[i]);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut t = Tape::new();
        let x = t.param(rand_tensor(&mut rng, &[6, 8]));
        let w = t.param(rand_tensor(&mut rng, &[8, 8]));
        let y = t.matmul(x, w).unwrap();
        let y = t.softmax_lastdim(y).unwrap();
        let l = t.sum(y);
        let l = t.scale(l, 0.5);
        let sq = t.mul(l, l).unwrap();
        let g = t.backward(sq).unwrap();
        (t.value(sq).item(), g.get(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

fn store_of(tensors: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in tensors {
        s.insert(*n, t.clone());
    }
    s
}

#[test]
fn grad_check_linear_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = store_of(&[("a", rand_tensor(&mut rng, &[3, 4])), ("b", rand_tensor(&mut rng, &[70]))]);
    let report = grad_check(
        |t, b| {
            let sa = t.sum(b.get("a")?);
            let sb = t.sum(b.get("b")?);
            t.add(sa, sb)
        },
        &s,
        &GradCheckOptions { eps: 0.37, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed);
    assert!(report.max_rel_err < 1e-9);
    assert_eq!(report.tensors[1].coords_checked, 64);
}

#[test]
fn grad_check_flags_corrupted_layer_norm_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = store_of(&[
        ("ln.gamma", rand_tensor(&mut rng, &[6])),
        ("ln.beta", rand_tensor(&mut rng, &[6])),
        ("x", rand_tensor(&mut rng, &[3, 6])),
    ]);
    let forward = |corrupt: bool| {
        move |t: &mut Tape, b: &crate::params::Bound| {
            if corrupt {
                t.corrupt_layer_norm_backward(1.5);
            }
            let y = t.layer_norm(b.get("x")?, b.get("ln.gamma")?, b.get("ln.beta")?, 1e-5)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        }
    };
    let opts = GradCheckOptions { eps: 1e-5, tol: 1e-5, ..Default::default() };
    let good = grad_check(forward(false), &s, &opts).unwrap();
    assert!(good.passed, "{good}");
    let bad = grad_check(forward(true), &s, &opts).unwrap();
    assert!(!bad.passed);
    let failing: Vec<&str> = bad.failing().map(|t| t.name.as_str()).collect();
    assert_eq!(failing, vec!["ln.gamma"]);
    assert!(bad.to_string().contains("ln.gamma"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_matmul_layer_norm_chain_matches_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 6]);
        let g = rand_tensor(&mut rng, &[6]);
        let b = rand_tensor(&mut rng, &[6]);
        let err = fd_max_rel_err(&[x, w, g, b], 1e-5, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.layer_norm(y, v[2], v[3], 1e-5).unwrap();
            t.softmax_lastdim(y).unwrap()
        });
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn prop_softmax_rows_sum_to_one(seed in 0u64..10_000, scale in 0.1f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, &[5, 7]));
        let x = t.scale(x, scale);
        let y = t.softmax_lastdim(x).unwrap();
        for r in 0..5 {
            let s: f64 = t.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
