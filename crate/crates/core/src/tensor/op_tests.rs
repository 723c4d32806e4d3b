use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Contracts an arbitrary output with fixed random weights so every output
/// element contributes a distinct amount to the checked scalar.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let y = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(mat(&[&[1.0, 2.0]]));
    let b = g.constant(mat(&[&[3.0], &[4.0]]));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);

    assert!(matches!(g.matmul(a, a), Err(crate::Error::Dimension(_))));
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
    let err = finite_difference_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 7)
        },
        &inputs,
        1e-5,
        None,
    )
    .unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.parameter(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    // subgradient at exactly 0 is 0
    assert_eq!(g.grad(x), &[0.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.parameter(Tensor::new(&[4], vec![-1.0, -0.5, -2.0, -3.0]).unwrap());
    let y = g.relu(x);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[0.3, -1.2], &[2.0, 0.5], &[-0.7, 0.0]]));
    let gamma = g.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
    let beta = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let mut stats = BnStats::new(2);
    let y = g.batch_norm(x, gamma, beta, &mut stats, Mode::Eval, 0.5, 0.0).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    assert_eq!(stats, BnStats::new(2));
}

#[test]
fn batch_norm_train_normalizes_by_batch_statistics() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[1.0], &[3.0]]));
    let gamma = g.constant(Tensor::new(&[1], vec![1.0]).unwrap());
    let beta = g.constant(Tensor::new(&[1], vec![0.0]).unwrap());
    let mut stats = BnStats::new(1);
    let y = g.batch_norm(x, gamma, beta, &mut stats, Mode::Train, 0.5, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    // running ← 0.5·running + 0.5·batch
    assert_eq!(stats.mean, vec![1.0]);
    assert_eq!(stats.var, vec![1.0]);

    let single = g.constant(mat(&[&[1.0]]));
    let err = g.batch_norm(single, gamma, beta, &mut stats, Mode::Train, 0.5, 0.0);
    assert!(matches!(err, Err(crate::Error::Config(_))));
}

#[test]
fn batch_norm_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[3]),
        rand_tensor(&mut rng, &[3]),
    ];
    for mode in [Mode::Train, Mode::Eval] {
        let err = finite_difference_check(
            |g, v| {
                let mut stats = BnStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                };
                let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode, 0.9, 1e-5)?;
                weighted_sum(g, y, 3)
            },
            &inputs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err <= 1e-5, "{mode:?}: rel err {err}");
    }
}

#[test]
fn max_over_set_examples() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[1.0, 5.0], &[3.0, 2.0]]));
    let (m, arg) = g.max_over_set(x).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);
    assert_eq!(g.value(m).shape(), &[2]);
    assert_eq!(arg, vec![1, 0]);

    let x = g.constant(mat(&[&[0.0, 1.0], &[4.0, 1.0], &[4.0, 0.0], &[4.0, 1.0]]));
    let (_, arg) = g.max_over_set(x).unwrap();
    assert_eq!(arg, vec![1, 0], "ties resolve to the lowest row");

    assert!(matches!(Segments::single(0), Err(crate::Error::EmptySet(_))));
}

#[test]
fn max_routes_gradient_to_argmax_rows_only() {
    let mut g = Graph::new();
    let x = g.parameter(mat(&[&[1.0, 5.0], &[3.0, 2.0], &[3.0, -1.0]]));
    let (m, _) = g.max_over_set(x).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(&[1, 4], vec![0.3; 4]).unwrap());
    let loss = g.softmax_cross_entropy(l, &[2]).unwrap();
    assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    assert!((g.value(loss).item() - 1.3863).abs() < 1e-4);

    let l = g.constant(Tensor::new(&[1, 3], vec![0.0, 1000.0, 0.0]).unwrap());
    let loss = g.softmax_cross_entropy(l, &[1]).unwrap();
    let v = g.value(loss).item();
    assert!(v.is_finite() && v.abs() < 1e-12);

    assert!(matches!(
        g.softmax_cross_entropy(l, &[3]),
        Err(crate::Error::Label(_))
    ));
}

#[test]
fn softmax_cross_entropy_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![rand_tensor(&mut rng, &[5, 7])];
    let labels = [0, 6, 3, 3, 1];
    let err = finite_difference_check(
        |g, v| g.softmax_cross_entropy(v[0], &labels),
        &inputs,
        1e-5,
        None,
    )
    .unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[10, 10]));
    for mode in [Mode::Train, Mode::Eval] {
        let y = g.dropout(x, 1.0, mode, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }
    let y = g.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    for bad in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(
            g.dropout(x, bad, Mode::Train, &mut rng),
            Err(crate::Error::Config(_))
        ));
    }
}

#[test]
fn dropout_survivor_fraction_and_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[100_000], vec![1.0; 100_000]).unwrap());
    let y = g.dropout(x, 0.7, Mode::Train, &mut rng).unwrap();
    let out = g.value(y).data();
    let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / out.len() as f64;
    assert!((survivors - 0.7).abs() < 0.01, "survivor fraction {survivors}");
    assert!(out.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
}

#[test]
fn finite_difference_of_quadratic_is_exact() {
    let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.parameter(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v), &[2.0, 4.0]);

    let err = finite_difference_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        },
        &[x],
        1e-5,
        None,
    )
    .unwrap();
    assert!(err <= 1e-8, "rel err {err}");
}

#[test]
fn finite_difference_rejects_non_finite_values() {
    let x = Tensor::new(&[1], vec![1.0]).unwrap();
    let res = finite_difference_check(|g, v| Ok(g.scale(v[0], f64::INFINITY)), &[x], 1e-5, None);
    assert!(matches!(res, Err(crate::Error::Numeric(_))));
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let a = g.parameter(rand_tensor(&mut rng, &[3, 2]));
    let b = g.parameter(rand_tensor(&mut rng, &[2, 2]));
    let y = g.matmul(a, b).unwrap();
    let z = g.relu(y);
    let s = g.sum(z);
    g.backward(s).unwrap();
    let (ga, gy) = (g.grad(a).to_vec(), g.grad(y).to_vec());
    g.backward(s).unwrap();
    for (x, y) in g.grad(a).iter().zip(&ga) {
        assert_eq!(*x, 2.0 * y);
    }
    for (x, y) in g.grad(y).iter().zip(&gy) {
        assert_eq!(*x, 2.0 * y);
    }
    g.zero_grad();
    assert!(g.grad(a).iter().all(|&v| v == 0.0));
}

#[test]
fn set_operations_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let segs = Segments::from_lengths(&[3, 2]).unwrap();
    let x = rand_tensor(&mut rng, &[5, 4]);
    let scores = rand_tensor(&mut rng, &[5, 1]);
    let m = rand_tensor(&mut rng, &[2, 16]);
    let gfeat = rand_tensor(&mut rng, &[2, 3]);
    let inputs = vec![x, scores, m, gfeat];
    let err = finite_difference_check(
        |g, v| {
            let mean = g.segment_mean(v[0], &segs)?;
            let att = g.segment_attention(v[0], v[1], &segs)?;
            let tr = g.segment_transform(v[0], v[2], &segs)?;
            let ex = g.expand_segments(v[3], &segs)?;
            let cat = g.concat_cols(&[tr, ex])?;
            let a = weighted_sum(g, mean, 1)?;
            let b = weighted_sum(g, att, 2)?;
            let c = weighted_sum(g, cat, 3)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
        &inputs,
        1e-5,
        None,
    )
    .unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn orthogonality_and_cosine_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 9]),
        rand_tensor(&mut rng, &[6, 3]),
        rand_tensor(&mut rng, &[6, 3]),
    ];
    let err = finite_difference_check(
        |g, v| {
            let o = g.orthogonality_loss(v[0], 3)?;
            let c = g.abs_cosine_loss(v[1], v[2])?;
            g.add(o, c)
        },
        &inputs,
        1e-5,
        Some(&(0..18).map(|j| (0, j)).chain((0..18).map(|j| (1, j))).collect::<Vec<_>>()),
    )
    .unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn orthogonality_closed_forms() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    let l = g.orthogonality_loss(eye, 3).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let two = g.scale(eye, 2.0);
    let l = g.orthogonality_loss(two, 3).unwrap();
    assert_eq!(g.value(l).item(), 27.0);
    assert!(g.orthogonality_loss(eye, 2).is_err());
}

fn proptest_config() -> ProptestConfig {
    ProptestConfig::with_cases(100)
}

proptest! {
    #![proptest_config(proptest_config())]

    #[test]
    fn max_is_exactly_permutation_invariant(seed in any::<u64>(), n in 1usize..20, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, k]);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.constant(px);
        let (ma, _) = g.max_over_set(a).unwrap();
        let (mb, _) = g.max_over_set(b).unwrap();
        let bits = |v: Var| g.value(v).data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(ma), bits(mb));
    }

    #[test]
    fn dense_relu_bn_stack_passes_gradient_check(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[6, 3]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let gamma = rand_tensor(&mut rng, &[4]);
        let beta = rand_tensor(&mut rng, &[4]);
        // stay clear of the ReLU kink
        let mut probe = Graph::new();
        let (xv, wv, bv) = (probe.constant(x.clone()), probe.constant(w.clone()), probe.constant(b.clone()));
        let pre = probe.matmul(xv, wv).unwrap();
        let pre = probe.add_bias(pre, bv).unwrap();
        prop_assume!(probe.value(pre).data().iter().all(|v| v.abs() > 1e-3));
        let err = finite_difference_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.add_bias(y, v[2])?;
                let y = g.relu(y);
                let mut stats = BnStats::new(4);
                let y = g.batch_norm(y, v[3], v[4], &mut stats, Mode::Train, 0.5, 1e-5)?;
                let (m, _) = g.segment_max(y, &Segments::from_lengths(&[4, 2])?)?;
                let l = g.softmax_cross_entropy(m, &[1, 3])?;
                Ok(l)
            },
            &[x, w, b, gamma, beta],
            1e-5,
            None,
        ).unwrap();
        prop_assert!(err <= 1e-4, "rel err {}", err);
    }

    #[test]
    fn relu_gradient_away_from_kink(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 5]);
        prop_assume!(x.data().iter().all(|v| v.abs() > 1e-3));
        let err = finite_difference_check(
            |g, v| { let y = g.relu(v[0]); weighted_sum(g, y, seed) },
            &[x], 1e-5, None,
        ).unwrap();
        prop_assert!(err <= 1e-6);
    }
}
