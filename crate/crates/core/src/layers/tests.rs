use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Mode;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn ctx(layout: &ParamLayout, values: &[f64], mode: Mode, grad: bool) -> ForwardCtx {
    ForwardCtx::new(layout, values, &layout.fresh_bn_stats(), mode, grad, 0).unwrap()
}

/// Runs `body` on input `x` and reduces the output to a fixed random
/// weighting of its entries, so every output coordinate contributes.
fn scalar_of(
    layout: &ParamLayout,
    values: &[f64],
    x: &Tensor,
    grad: bool,
    body: &dyn Fn(&mut ForwardCtx, Var) -> Result<Var>,
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut f = ctx(layout, values, Mode::Train, grad);
    let xv = f.graph.leaf(x.clone().with_requires_grad(grad));
    let y = body(&mut f, xv).unwrap();
    let n = f.graph.value(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = Tensor::new(f.graph.value(y).shape(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let wv = f.graph.constant(w);
    let prod = f.graph.mul(y, wv).unwrap();
    let s = f.graph.sum(prod);
    let value = f.graph.value(s).item();
    if !grad {
        return (value, Vec::new(), Vec::new());
    }
    f.graph.backward(s).unwrap();
    (value, f.flat_grad(layout), f.graph.grad(xv).to_vec())
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every parameter and input coordinate.
fn layer_gradcheck(
    layout: &ParamLayout,
    values: &[f64],
    x: &Tensor,
    body: &dyn Fn(&mut ForwardCtx, Var) -> Result<Var>,
) -> f64 {
    let h = 1e-6;
    let (_, gp, gx) = scalar_of(layout, values, x, true, body);
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(1.0);
    let mut worst: f64 = 0.0;
    let mut v = values.to_vec();
    for i in 0..v.len() {
        let o = v[i];
        v[i] = o + h;
        let plus = scalar_of(layout, &v, x, false, body).0;
        v[i] = o - h;
        let minus = scalar_of(layout, &v, x, false, body).0;
        v[i] = o;
        worst = worst.max(rel(gp[i], (plus - minus) / (2.0 * h)));
    }
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let o = xp.data()[i];
        xp.data_mut()[i] = o + h;
        let plus = scalar_of(layout, values, &xp, false, body).0;
        xp.data_mut()[i] = o - h;
        let minus = scalar_of(layout, values, &xp, false, body).0;
        xp.data_mut()[i] = o;
        worst = worst.max(rel(gx[i], (plus - minus) / (2.0 * h)));
    }
    worst
}

#[test]
fn dense_with_identity_weights_is_identity() {
    let mut layout = ParamLayout::new();
    let d = Dense::with_init(&mut layout, "id", 3, 3, Init::FlatIdentity(3), Init::Zeros);
    let values = layout.initialize(0);
    let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 0.25, -7.0]]).unwrap();
    let mut f = ctx(&layout, &values, Mode::Eval, false);
    let xv = f.graph.constant(x.clone());
    let y = d.forward(&mut f, xv).unwrap();
    assert_eq!(f.graph.value(y).data(), x.data());
}

#[test]
fn shared_mlp_rejects_wrong_width() {
    let mut layout = ParamLayout::new();
    let mlp = SharedMlp::new(&mut layout, "m", 3, &SharedMlpSpec::relu_bn(&[4]));
    let values = layout.initialize(0);
    let mut f = ctx(&layout, &values, Mode::Eval, false);
    let x = f.graph.constant(Tensor::zeros(&[2, 5]).unwrap());
    assert!(matches!(mlp.forward(&mut f, x), Err(Error::Dimension(_))));
}

#[test]
fn shared_mlp_output_width_and_layers() {
    let mut layout = ParamLayout::new();
    let spec = SharedMlpSpec {
        layer_widths: vec![8, 5],
        use_batch_norm: true,
        final_activation: Activation::None,
    };
    let mlp = SharedMlp::new(&mut layout, "m", 3, &spec);
    assert_eq!(mlp.out_width(), 5);
    assert!(mlp.layers[0].bn.is_some() && mlp.layers[0].relu);
    assert!(mlp.layers[1].bn.is_none() && !mlp.layers[1].relu);
    // 3·8+8 + 2·8 (bn) + 8·5+5
    assert_eq!(layout.total(), 32 + 16 + 45);
}

#[test]
fn aggregator_examples() {
    let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, -1.0], vec![2.0, 2.0]]).unwrap();
    let segs = Segments::single(3).unwrap();
    let run = |kind| {
        let mut layout = ParamLayout::new();
        let agg = Aggregator::new(&mut layout, "agg", kind, 2);
        let values = layout.initialize(0);
        let mut f = ctx(&layout, &values, Mode::Eval, false);
        let xv = f.graph.constant(x.clone());
        let (y, arg) = agg.forward(&mut f, xv, &segs).unwrap();
        (f.graph.value(y).data().to_vec(), arg)
    };
    assert_eq!(run(AggregatorKind::Max), (vec![3.0, 5.0], Some(vec![1, 0])));
    assert_eq!(run(AggregatorKind::Average).0, vec![2.0, 2.0]);
    // zero-initialized scores give uniform weights
    let att = run(AggregatorKind::Attention).0;
    assert!((att[0] - 2.0).abs() < 1e-15 && (att[1] - 2.0).abs() < 1e-15);
}

#[test]
fn empty_sets_cannot_be_aggregated() {
    assert!(Tensor::zeros(&[0, 2]).is_err());
    for lengths in [&[][..], &[0], &[3, 0]] {
        if let Ok(segs) = Segments::from_lengths(lengths) {
            let mut layout = ParamLayout::new();
            let agg = Aggregator::new(&mut layout, "agg", AggregatorKind::Max, 2);
            let mut f = ctx(&layout, &[], Mode::Eval, false);
            let xv = f.graph.constant(Tensor::zeros(&[3, 2]).unwrap());
            assert!(agg.forward(&mut f, xv, &segs).is_err(), "{lengths:?}");
        }
    }
}

#[test]
fn aggregator_kind_parses() {
    for k in [AggregatorKind::Max, AggregatorKind::Average, AggregatorKind::Attention] {
        assert_eq!(k.to_string().parse::<AggregatorKind>().unwrap(), k);
    }
    assert!("median".parse::<AggregatorKind>().is_err());
}

#[test]
fn sort_canonical_examples() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 9.0], vec![0.0, -1.0]]).unwrap();
    let s = sort_canonical(&x);
    assert_eq!(s.data(), &[0.0, -1.0, 0.0, 9.0, 1.0, 0.0]);
}

#[test]
fn every_layer_type_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, 6, 3);

    let mut layout = ParamLayout::new();
    let dense = Dense::new(&mut layout, "d", 3, 4);
    let values = layout.initialize(1);
    let err = layer_gradcheck(&layout, &values, &x, &|f, x| dense.forward(f, x));
    assert!(err <= 1e-6, "dense: {err}");

    let mut layout = ParamLayout::new();
    let bn = BatchNormLayer::new(&mut layout, "bn", 3);
    let values: Vec<f64> = (0..layout.total()).map(|_| rng.gen_range(0.5..1.5)).collect();
    let err = layer_gradcheck(&layout, &values, &x, &|f, x| bn.forward(f, x));
    assert!(err <= 1e-6, "batch norm: {err}");

    let mut layout = ParamLayout::new();
    let mlp = SharedMlp::new(&mut layout, "m", 3, &SharedMlpSpec::relu_bn(&[5, 4]));
    let values = layout.initialize(2);
    let err = layer_gradcheck(&layout, &values, &x, &|f, x| mlp.forward(f, x));
    assert!(err <= 1e-4, "shared mlp: {err}");

    let segs = Segments::from_lengths(&[2, 4]).unwrap();
    for kind in [AggregatorKind::Max, AggregatorKind::Average, AggregatorKind::Attention] {
        let mut layout = ParamLayout::new();
        let agg = Aggregator::new(&mut layout, "a", kind, 3);
        let mut values = layout.initialize(4);
        // move attention off its uniform initialization
        values.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
        let err = layer_gradcheck(&layout, &values, &x, &|f, x| Ok(agg.forward(f, x, &segs)?.0));
        assert!(err <= 1e-6, "{kind} aggregator: {err}");
    }
}

fn proptest_config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(proptest_config())]

    /// Each row of a shared MLP's output depends only on the same input row.
    #[test]
    fn shared_mlp_is_row_equivariant(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layout = ParamLayout::new();
        let spec = SharedMlpSpec { layer_widths: vec![6, 4], use_batch_norm: false, final_activation: Activation::Relu };
        let mlp = SharedMlp::new(&mut layout, "m", 3, &spec);
        let values = layout.initialize(seed);
        let x = rand_tensor(&mut rng, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let eval = |t: &Tensor| {
            let mut f = ctx(&layout, &values, Mode::Eval, false);
            let v = f.graph.constant(t.clone());
            let y = mlp.forward(&mut f, v).unwrap();
            f.graph.value(y).clone()
        };
        let (y, py) = (eval(&x), eval(&px));
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(py.row(k), y.row(i));
        }
    }

    /// Appending a copy of an existing row never changes a max.
    #[test]
    fn max_ignores_duplicates(seed in any::<u64>(), n in 1usize..16, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, n, k);
        let dup = rng.gen_range(0..n);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
        rows.push(x.row(dup).to_vec());
        let xd = Tensor::from_rows(&rows).unwrap();
        let max = |t: &Tensor| {
            let mut g = crate::tensor::Graph::new();
            let v = g.constant(t.clone());
            let (m, _) = g.max_over_set(v).unwrap();
            g.value(m).data().to_vec()
        };
        prop_assert_eq!(max(&x), max(&xd));
    }

    /// Raising one entry never lowers the max of its column and leaves the
    /// other columns alone.
    #[test]
    fn max_is_monotone(seed in any::<u64>(), n in 1usize..16, k in 1usize..6, bump in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, n, k);
        let (r, c) = (rng.gen_range(0..n), rng.gen_range(0..k));
        let mut y = x.clone();
        y.data_mut()[r * k + c] += bump;
        let max = |t: &Tensor| {
            let mut g = crate::tensor::Graph::new();
            let v = g.constant(t.clone());
            let (m, _) = g.max_over_set(v).unwrap();
            g.value(m).data().to_vec()
        };
        let (a, b) = (max(&x), max(&y));
        for j in 0..k {
            if j == c { prop_assert!(b[j] >= a[j]); } else { prop_assert_eq!(a[j], b[j]); }
        }
    }

    /// Sorting makes any row order map to the same matrix.
    #[test]
    fn sort_canonical_is_permutation_invariant(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, n, 3);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
        rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng);
        let px = Tensor::from_rows(&rows).unwrap();
        prop_assert_eq!(sort_canonical(&x).data().to_vec(), sort_canonical(&px).data().to_vec());
    }
}
