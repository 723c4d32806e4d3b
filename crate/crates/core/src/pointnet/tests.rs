use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::data::PointCloud;
use crate::error::Error;
use crate::layers::AggregatorKind;
use crate::tensor::{Mode, Tensor};

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> PointCloud {
    let pts = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PointCloud::new("c", dim, pts).unwrap()
}

/// Small widths so whole-model checks stay fast.
fn tiny(spec: ModelSpec) -> ModelSpec {
    ModelSpec {
        pre_widths: vec![8, 6],
        post_widths: vec![10],
        bottleneck: 12,
        tnet_mlp_widths: vec![8, 16],
        tnet_fc_widths: vec![8],
        head: match spec.head {
            HeadSpec::Classify { num_classes, .. } => HeadSpec::Classify {
                num_classes,
                fc_widths: vec![8],
                dropout_keep: 0.7,
            },
            HeadSpec::Segment { num_parts, categories, .. } => HeadSpec::Segment {
                num_parts,
                head_widths: vec![8, 6],
                categories,
            },
            HeadSpec::Normals { .. } => HeadSpec::Normals { head_widths: vec![8] },
        },
        ..spec
    }
}

/// Initial state with every parameter nudged, so the alignment networks
/// no longer emit the identity.
fn perturbed(spec: &ModelSpec, seed: u64) -> ModelState {
    let mut s = ModelState::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let noise = Normal::new(0.0, 0.1).unwrap();
    s.params.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    s
}

fn permuted(cloud: &PointCloud, perm: &[usize]) -> PointCloud {
    cloud.select(perm)
}

#[test]
fn alignment_networks_start_at_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let state = ModelState::init(&ModelSpec::classifier(4), 5).unwrap();
    let cloud = random_cloud(&mut rng, 64, 3);
    let inf = state.infer(&[&cloud]).unwrap();
    let eye = |d: usize| (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    assert_eq!(inf.input_transform.unwrap().data(), eye(3).as_slice());
    assert_eq!(inf.feature_transform.unwrap().data(), eye(64).as_slice());
}

#[test]
fn untrained_alignment_matches_frozen_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = tiny(ModelSpec::classifier(3));
    let state = ModelState::init(&spec, 9).unwrap();
    let cloud = random_cloud(&mut rng, 20, 3);
    let batch = Batch::from_clouds(&[&cloud]).unwrap();
    let learned = state.infer_batch(&batch, Mode::Eval).unwrap();
    let frozen = state.infer_frozen(&batch, &FrozenTransforms::identity(&spec)).unwrap();
    assert_eq!(learned.output.data(), frozen.output.data());
    assert_eq!(learned.global.data(), frozen.global.data());
}

#[test]
fn apply_transform_examples() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, -2.0, 3.0]]).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(apply_transform(&x, &eye).unwrap().data(), x.data());
    // counter-clockwise quarter turn about z for row vectors: x·R
    let rot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(apply_transform(&x, &rot).unwrap().row(0), &[0.0, 1.0, 0.0]);
    assert!(apply_transform(&x, &Tensor::zeros(&[2, 2]).unwrap()).is_err());
}

#[test]
fn apply_transform_composes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rand = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let (x, a, b) = (rand(&mut rng, 10, 3), rand(&mut rng, 3, 3), rand(&mut rng, 3, 3));
    let ab = apply_transform(&a, &b).unwrap();
    let lhs = apply_transform(&apply_transform(&x, &a).unwrap(), &b).unwrap();
    let rhs = apply_transform(&x, &ab).unwrap();
    for (p, q) in lhs.data().iter().zip(rhs.data()) {
        assert!((p - q).abs() <= 1e-12);
    }
}

#[test]
fn orthogonality_loss_examples() {
    let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(orthogonality_loss(&eye).unwrap(), 0.0);
    let (s, c) = 0.7f64.sin_cos();
    let rot = Tensor::from_rows(&[vec![c, -s, 0.0], vec![s, c, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert!(orthogonality_loss(&rot).unwrap() <= 1e-12);
    let two = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
    assert_eq!(orthogonality_loss(&two).unwrap(), 27.0);
    assert!(orthogonality_loss(&Tensor::zeros(&[2, 3]).unwrap()).is_err());
}

#[test]
fn total_loss_examples() {
    let two = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(total_loss(0.8, Some(&two), 0.0).unwrap(), 0.8);
    assert_eq!(total_loss(0.8, Some(&eye), 5.0).unwrap(), 0.8);
    assert_eq!(total_loss(0.8, None, 5.0).unwrap(), 0.8);
    assert!((total_loss(1.0, Some(&two), 0.001).unwrap() - 1.027).abs() <= 1e-15);
}

#[test]
fn normal_loss_examples() {
    let gt = Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap();
    let neg = Tensor::from_rows(&[vec![0.0, 0.0, -2.0], vec![-0.5, 0.0, 0.0]]).unwrap();
    let perp = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]]).unwrap();
    // the norm product carries a 1e-12 guard, so "zero" is zero up to it
    assert!(normal_loss(&gt, &gt).unwrap().abs() <= 1e-11);
    assert!(normal_loss(&neg, &gt).unwrap().abs() <= 1e-11);
    assert!((normal_loss(&perp, &gt).unwrap() - 1.0).abs() <= 1e-12);
}

#[test]
fn parameter_counts_of_reference_models() {
    let full = count_parameters(&ModelSpec::classifier(40)).unwrap();
    let vanilla = count_parameters(&ModelSpec::classifier(40).vanilla()).unwrap();
    assert_eq!(full, 3_480_049);
    assert_eq!(vanilla, 819_624);
    assert!((3_430_000..=3_570_000).contains(&full));
    assert!((760_000..=840_000).contains(&vanilla));

    let mut layout = crate::layers::ParamLayout::new();
    crate::layers::Dense::new(&mut layout, "d", 3, 64);
    assert_eq!(layout.total(), 256);
}

#[test]
fn segmentation_head_input_width() {
    let spec = ModelSpec::segmenter(50);
    assert_eq!(spec.seg_head_input_width(), 64 + 1024);
    let net = PointNet::new(&spec).unwrap();
    match &net.head {
        HeadNet::PerPoint { mlp, .. } => assert_eq!(mlp.in_width, 1088),
        _ => panic!("segmenter has a per-point head"),
    }
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(matches!(ModelState::init(&ModelSpec::classifier(1), 0), Err(Error::Config(_))));
    assert!(ModelState::init(&ModelSpec::classifier(4).with_bottleneck(0), 0).is_err());
    let mut s = ModelSpec::classifier(4);
    s.pre_widths.clear();
    assert!(ModelState::init(&s, 0).is_err());
}

#[test]
fn wrong_input_dimension_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let state = ModelState::init(&tiny(ModelSpec::classifier(3)), 0).unwrap();
    let cloud = random_cloud(&mut rng, 10, 2);
    assert!(matches!(state.infer(&[&cloud]), Err(Error::Dimension(_))));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny(ModelSpec::segmenter(4).with_categories(2));
    let state = perturbed(&spec, 3);
    let path = dir.path().join("m.pnet");
    state.save(&path).unwrap();
    let back = ModelState::load(&path).unwrap();
    assert_eq!(back, state);
    assert_eq!(back.to_bytes(), state.to_bytes());

    let bytes = state.to_bytes();
    assert!(ModelState::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(ModelState::from_bytes(&bad), Err(Error::Format(_))));
}

#[test]
fn end_to_end_losses_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clouds: Vec<PointCloud> = (0..2).map(|i| random_cloud(&mut rng, 16, 3).with_class(i)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let batch = Batch::from_clouds(&refs).unwrap();

    let state = perturbed(&tiny(ModelSpec::classifier(3)), 1);
    let err = loss_gradient_check(&state, &batch, Targets::Classes(&[0, 2]), 1e-5, None).unwrap();
    assert!(err <= 1e-4, "classification: {err}");

    let parts: Vec<usize> = (0..32).map(|i| i % 3).collect();
    let state = perturbed(&tiny(ModelSpec::segmenter(3).with_categories(2)), 2);
    let err = loss_gradient_check(&state, &batch, Targets::Parts(&parts), 1e-5, None).unwrap();
    assert!(err <= 1e-4, "segmentation: {err}");

    let normals = Tensor::new(&[32, 3], (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let state = perturbed(&tiny(ModelSpec::normals()), 3);
    let err = loss_gradient_check(&state, &batch, Targets::Normals(&normals), 1e-5, None).unwrap();
    assert!(err <= 1e-4, "normals: {err}");
}

#[test]
fn mismatched_targets_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cloud = random_cloud(&mut rng, 8, 3);
    let batch = Batch::from_clouds(&[&cloud]).unwrap();
    let state = ModelState::init(&tiny(ModelSpec::classifier(3)), 0).unwrap();
    assert!(loss_gradient_check(&state, &batch, Targets::Parts(&[0; 8]), 1e-5, None).is_err());
}

/// Count implied by the architecture, written out independently of the
/// layer builders.
fn expected_count(spec: &ModelSpec) -> usize {
    let dense = |a: usize, b: usize| a * b + b;
    let mlp = |mut w: usize, widths: &[usize]| {
        let mut n = 0;
        for &o in widths {
            n += dense(w, o) + 2 * o;
            w = o;
        }
        (n, w)
    };
    let tnet = |d: usize| {
        let (a, w) = mlp(d, &spec.tnet_mlp_widths);
        let (b, w) = mlp(w, &spec.tnet_fc_widths);
        a + b + dense(w, d * d)
    };
    let mut n = 0;
    if spec.use_input_transform {
        n += tnet(spec.input_dim);
    }
    let (a, local) = mlp(spec.input_dim, &spec.pre_widths);
    n += a;
    if spec.use_feature_transform {
        n += tnet(local);
    }
    let mut post = spec.post_widths.clone();
    post.push(spec.bottleneck);
    n += mlp(local, &post).0;
    if spec.aggregator == AggregatorKind::Attention {
        n += dense(spec.bottleneck, 1);
    }
    n + match &spec.head {
        HeadSpec::Classify { num_classes, fc_widths, .. } => {
            let (a, w) = mlp(spec.bottleneck, fc_widths);
            a + dense(w, *num_classes)
        }
        HeadSpec::Segment { num_parts, head_widths, categories } => {
            let input = match categories {
                Some(c) => spec.pre_widths.iter().sum::<usize>() + spec.post_widths.iter().sum::<usize>() + spec.bottleneck + c,
                None => local + spec.bottleneck,
            };
            let (a, w) = mlp(input, head_widths);
            a + dense(w, *num_parts)
        }
        HeadSpec::Normals { head_widths } => {
            let (a, w) = mlp(local + spec.bottleneck, head_widths);
            a + dense(w, 3)
        }
    }
}

fn widths(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(1usize..40, 1..=max_len)
}

fn proptest_config() -> ProptestConfig {
    ProptestConfig {
        cases: 32,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(proptest_config())]

    #[test]
    fn parameter_count_matches_architecture_formula(
        pre in widths(3), post in widths(2), k in 1usize..64,
        tm in widths(3), tf in widths(2), head_w in widths(3),
        input in any::<bool>(), feature in any::<bool>(), head in 0usize..4, attention in any::<bool>(),
    ) {
        let base = match head {
            0 => ModelSpec::classifier(5),
            1 => ModelSpec::segmenter(4),
            2 => ModelSpec::segmenter(4).with_categories(3),
            _ => ModelSpec::normals(),
        };
        let mut spec = ModelSpec {
            pre_widths: pre, post_widths: post, bottleneck: k,
            tnet_mlp_widths: tm, tnet_fc_widths: tf,
            ..base.with_transforms(input, feature)
        };
        if attention {
            spec.aggregator = AggregatorKind::Attention;
        }
        match &mut spec.head {
            HeadSpec::Classify { fc_widths, .. } => *fc_widths = head_w,
            HeadSpec::Segment { head_widths, .. } | HeadSpec::Normals { head_widths } => *head_widths = head_w,
        }
        prop_assert_eq!(count_parameters(&spec).unwrap(), expected_count(&spec));
    }

    /// Eval-mode class scores do not depend on point order, bit for bit.
    #[test]
    fn classifier_is_permutation_invariant(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = perturbed(&tiny(ModelSpec::classifier(4)), seed);
        let cloud = random_cloud(&mut rng, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let a = classify_forward(&state, &cloud, Mode::Eval).unwrap();
        let b = classify_forward(&state, &permuted(&cloud, &perm), Mode::Eval).unwrap();
        prop_assert_eq!(a.logits, b.logits);
        prop_assert_eq!(a.global, b.global);
    }

    /// Per-point scores follow the points, bit for bit.
    #[test]
    fn segmenter_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..40, conditioned in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = tiny(ModelSpec::segmenter(5));
        if conditioned {
            spec = spec.with_categories(3);
        }
        let state = perturbed(&spec, seed);
        let cloud = random_cloud(&mut rng, n, 3).with_class(1);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let a = segment_forward(&state, &cloud, Mode::Eval).unwrap();
        let b = segment_forward(&state, &permuted(&cloud, &perm), Mode::Eval).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(b.row(k), a.row(i));
        }
    }

    /// The predicted alignment matrix is a function of the set.
    #[test]
    fn alignment_matrix_is_permutation_invariant(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = perturbed(&tiny(ModelSpec::classifier(3)), seed);
        let cloud = random_cloud(&mut rng, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let a = state.transforms_for(&cloud).unwrap();
        let b = state.transforms_for(&permuted(&cloud, &perm)).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        prop_assert_ne!(a.input.as_deref().unwrap(), &eye[..]);
        prop_assert_eq!(a, b);
    }
}
