use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.l2_norm().max(b.l2_norm()).max(1e-12);
    diff / scale
}

/// Checks d(sum(w * f(inputs)))/d(input[which]) against finite differences,
/// with a fixed random weighting `w` so every output element matters.
fn check_grad<F>(inputs: &[Tensor], which: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[Tensor], grad: bool| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| tape.leaf(v.clone(), grad)).collect();
        let out = f(&mut tape, &ids);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(random(&mut rng, &shape));
        let prod = tape.mul(out, w).unwrap();
        let s = tape.sum(prod).unwrap();
        let value = tape.value(s).item().unwrap();
        let g = grad.then(|| tape.backward(s).unwrap().get(ids[which]));
        (value, g)
    };
    let analytic = eval(inputs, true).1.unwrap();
    let numeric = finite_difference_gradient(
        |x| {
            let mut vals = inputs.to_vec();
            vals[which] = x.clone();
            eval(&vals, false).0
        },
        &inputs[which],
        1e-5,
    );
    rel_err(&analytic, &numeric)
}

#[test]
fn affine_identity_and_hand_case() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let w = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.constant(Tensor::vector(&[0.0, 0.0]));
    let y = tape.affine(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
    let w = tape.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
    let b = tape.constant(Tensor::vector(&[1.0]));
    let y = tape.affine(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);
}

#[test]
fn affine_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let err = tape.affine(x, w, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn affine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [
        random(&mut rng, &[3, 4]),
        random(&mut rng, &[4, 2]),
        random(&mut rng, &[2]),
    ];
    for which in 0..3 {
        let e = check_grad(&inputs, which, 9, |t, ids| {
            t.affine(ids[0], ids[1], ids[2]).unwrap()
        });
        assert!(e < 1e-6, "input {which}: {e}");
    }
}

#[test]
fn conv_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 5, 4]);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let mut tape = Tape::new();
    let (xi, ki, bi) = (
        tape.constant(x.clone()),
        tape.constant(k),
        tape.constant(Tensor::zeros(&[1])),
    );
    let y = tape.conv3x3_same(xi, ki, bi).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_single_cell_sees_only_padding() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap());
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv3x3_same(x, k, b).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (cin, cout, h, w) = (2, 3, 4, 5);
    let x = random(&mut rng, &[cin, h, w]);
    let k = random(&mut rng, &[cout, cin, 3, 3]);
    let b = random(&mut rng, &[cout]);
    let mut tape = Tape::new();
    let (xi, ki, bi) = (
        tape.constant(x.clone()),
        tape.constant(k.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv3x3_same(xi, ki, bi).unwrap();
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for a in 0..3 {
                        for bb in 0..3 {
                            let (si, sj) =
                                (i as isize + a as isize - 1, j as isize + bb as isize - 1);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * cin + c) * 3 + a) * 3 + bb]
                                * x.data()[(c * h + si as usize) * w + sj as usize];
                        }
                    }
                }
                let got = tape.value(y).data()[(o * h + i) * w + j];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 3]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(
        tape.conv3x3_same(x, k, b),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        random(&mut rng, &[2, 4, 4]),
        random(&mut rng, &[3, 2, 3, 3]),
        random(&mut rng, &[3]),
    ];
    for which in 0..3 {
        let e = check_grad(&inputs, which, 5, |t, ids| {
            t.conv3x3_same(ids[0], ids[1], ids[2]).unwrap()
        });
        assert!(e < 1e-6, "input {which}: {e}");
    }
}

fn bn(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    stats: &RunningStats,
    mode: BatchNormMode,
) -> Tensor {
    let xi = tape.constant(x.clone());
    let g = tape.constant(Tensor::vector(gamma));
    let b = tape.constant(Tensor::vector(beta));
    let (y, _) = tape.batchnorm2d(xi, g, b, stats, mode).unwrap();
    tape.value(y).clone()
}

#[test]
fn batchnorm_constant_input_is_zero() {
    let x = Tensor::new(
        vec![2, 2, 2],
        vec![3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0],
    )
    .unwrap();
    let stats = RunningStats::new(2);
    let y = bn(
        &mut Tape::new(),
        &x,
        &[1.0, 1.0],
        &[0.0, 0.0],
        &stats,
        BatchNormMode::Train,
    );
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batchnorm_zero_gamma_yields_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 3, 3]);
    let y = bn(
        &mut Tape::new(),
        &x,
        &[0.0],
        &[7.0],
        &RunningStats::new(1),
        BatchNormMode::Train,
    );
    assert!(y.data().iter().all(|&v| v == 7.0));
}

#[test]
fn batchnorm_eval_requires_stats() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let g = tape.constant(Tensor::vector(&[1.0]));
    let b = tape.constant(Tensor::vector(&[0.0]));
    let stats = RunningStats::new(1);
    let err = tape
        .batchnorm2d(x, g, b, &stats, BatchNormMode::Eval)
        .unwrap_err();
    assert_eq!(err.to_string(), "uninitialized running statistics");
}

#[test]
fn batchnorm_running_update() {
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut stats = RunningStats::new(1);
    let mut tape = Tape::new();
    let xi = tape.constant(x);
    let g = tape.constant(Tensor::vector(&[1.0]));
    let b = tape.constant(Tensor::vector(&[0.0]));
    let (_, batch) = tape
        .batchnorm2d(xi, g, b, &stats, BatchNormMode::Train)
        .unwrap();
    stats.update(&batch.unwrap());
    assert!(stats.initialized);
    assert!((stats.mean[0] - 0.25).abs() < 1e-15);
    // unbiased variance of 1..4 is 5/3
    assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    let y = bn(
        &mut Tape::new(),
        &Tensor::full(&[1, 1, 1], 0.25),
        &[1.0],
        &[0.0],
        &stats,
        BatchNormMode::Eval,
    );
    assert_eq!(y.data(), &[0.0]);
}

#[test]
fn batchnorm_gradients_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [
        random(&mut rng, &[2, 3, 3]),
        random(&mut rng, &[2]),
        random(&mut rng, &[2]),
    ];
    let mut stats = RunningStats::new(2);
    stats.mean = vec![0.1, -0.2];
    stats.var = vec![0.5, 2.0];
    stats.initialized = true;
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        for which in 0..3 {
            let e = check_grad(&inputs, which, 7, |t, ids| {
                t.batchnorm2d(ids[0], ids[1], ids[2], &stats, mode)
                    .unwrap()
                    .0
            });
            assert!(e < 1e-6, "{mode:?} input {which}: {e}");
        }
    }
}

#[test]
fn conv_bn_relu_pool_affine_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = [
        random(&mut rng, &[2, 4, 4]),
        random(&mut rng, &[3, 2, 3, 3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[3, 2]),
        random(&mut rng, &[2]),
    ];
    let mut stats = RunningStats::new(3);
    stats.mean = vec![0.2, -0.1, 0.0];
    stats.var = vec![0.7, 1.3, 2.0];
    stats.initialized = true;
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        for which in 0..inputs.len() {
            // Train-mode normalization removes any per-channel shift, so the
            // conv bias has an identically zero gradient there.
            if mode == BatchNormMode::Train && which == 2 {
                continue;
            }
            let e = check_grad(&inputs, which, 3, |t, ids| {
                let c = t.conv3x3_same(ids[0], ids[1], ids[2]).unwrap();
                let (b, _) = t.batchnorm2d(c, ids[3], ids[4], &stats, mode).unwrap();
                let r = t.relu(b).unwrap();
                let p = t.adaptive_max_pool_global(r).unwrap();
                // Lift the pooled vector to a 1xC row.
                let zero = t.constant(Tensor::zeros(&[1, 3]));
                let row = t.blend_rows(zero, p, 1.0).unwrap();
                t.affine(row, ids[5], ids[6]).unwrap()
            });
            assert!(e < 1e-5, "{mode:?} input {which}: {e}");
        }
    }
}

#[test]
fn relu_values_and_mask() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[-1.0, 0.0, 2.0]), true);
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).data(), &[0.0, 0.0, 1.0]);

    let neg = tape.constant(Tensor::vector(&[-3.0, -0.5]));
    let y = tape.relu(neg).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut x = random(&mut rng, &[20]);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let e = check_grad(&[x], 0, 3, |t, ids| t.relu(ids[0]).unwrap());
    assert!(e < 1e-6, "{e}");
}

#[test]
fn global_max_pool_values_and_ties() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap(),
        true,
    );
    let y = tape.adaptive_max_pool_global(x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);

    let c = tape.leaf(Tensor::full(&[1, 2, 2], 4.0), true);
    let y = tape.adaptive_max_pool_global(c).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
    let s = tape.sum(y).unwrap();
    assert_eq!(
        tape.backward(s).unwrap().get(c).data(),
        &[1.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn global_max_pool_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[3, 4, 4]);
    let e = check_grad(&[x], 0, 2, |t, ids| {
        t.adaptive_max_pool_global(ids[0]).unwrap()
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn helper_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let map = random(&mut rng, &[3, 4, 5]);
    let e = check_grad(&[map], 0, 1, |t, ids| {
        t.gather_cells(ids[0], &[(0, 0), (3, 4), (0, 0), (2, 1)])
            .unwrap()
    });
    assert!(e < 1e-6);

    let rows = random(&mut rng, &[4, 3]);
    let scene = random(&mut rng, &[3]);
    for which in 0..2 {
        let e = check_grad(&[rows.clone(), scene.clone()], which, 1, |t, ids| {
            t.blend_rows(ids[0], ids[1], 0.3).unwrap()
        });
        assert!(e < 1e-6);
    }

    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[2, 2]);
    for which in 0..2 {
        let e = check_grad(&[a.clone(), b.clone()], which, 1, |t, ids| {
            t.concat_cols(ids[0], ids[1]).unwrap()
        });
        assert!(e < 1e-6);
    }
    let c = random(&mut rng, &[1, 3]);
    for which in 0..2 {
        let e = check_grad(&[a.clone(), c.clone()], which, 1, |t, ids| {
            t.concat_rows(&[ids[0], ids[1], ids[0]]).unwrap()
        });
        assert!(e < 1e-6);
    }
}

#[test]
fn backward_square_and_nonscalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.mul(x, x).unwrap();
    assert_eq!(tape.backward(y).unwrap().get(x).data(), &[6.0]);

    let v = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
    let r = tape.relu(v).unwrap();
    assert!(matches!(tape.backward(r), Err(TensorError::NotScalar(_))));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[-1.0, 2.0]), true);
    let unused = tape.leaf(Tensor::vector(&[5.0, 5.0, 5.0]), true);
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).data(), &[0.0, 1.0]);
    assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&mut rng, &[2, 4, 4]), true);
    let k = tape.leaf(random(&mut rng, &[2, 2, 3, 3]), true);
    let b = tape.leaf(random(&mut rng, &[2]), true);
    let y = tape.conv3x3_same(x, k, b).unwrap();
    let p = tape.adaptive_max_pool_global(y).unwrap();
    let s = tape.sum(p).unwrap();
    let g1 = tape.backward(s).unwrap();
    let g2 = tape.backward(s).unwrap();
    for id in [x, k, b] {
        let (a, c) = (g1.get(id), g2.get(id));
        assert!(a
            .data()
            .iter()
            .zip(c.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn mutated_store_rejects_replay() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(&[1.0, 2.0]));
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let s = tape.sum(w).unwrap();
    assert!(tape.backward_params(s, &store).is_ok());

    store.get_mut("w").unwrap().data_mut()[0] = 9.0;
    assert!(matches!(
        tape.backward_params(s, &store),
        Err(TensorError::StaleTape { .. })
    ));
    assert!(matches!(
        tape.param(&store, "w"),
        Err(TensorError::StaleTape { .. })
    ));
}

#[test]
fn grads_from_before_a_mutation_are_stale() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(&[1.0]));
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let s = tape.sum(w).unwrap();
    let grads = tape.backward_params(s, &store).unwrap();
    assert!(grads.check_fresh(&store).is_ok());
    store.get_mut("w").unwrap();
    assert!(grads.check_fresh(&store).is_err());
    assert!(grads.check_fresh(&store.clone()).is_err());
}
