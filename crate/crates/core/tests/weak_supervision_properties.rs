use lesionkit::deepem::*;
use lesionkit::detection::{Box3, Detection};
use lesionkit::rng::SplitMix64;
use lesionkit::synth::*;
use proptest::prelude::*;

fn random_case(rng: &mut SplitMix64) -> (Vec<Detection>, WeakLabel, Extents, HalfGaussianModel, LobeModel) {
    let e = Extents::cube(48);
    let n = rng.int_range(1, 8);
    let props = (0..n)
        .map(|_| {
            let b = Box3::new(
                rng.uniform(0.0, 47.0),
                rng.uniform(0.0, 47.0),
                rng.uniform(0.0, 47.0),
                rng.uniform(2.0, 10.0),
            )
            .unwrap();
            Detection::from_logit(b, rng.uniform(-3.0, 4.0))
        })
        .collect();
    let mut lobe = LobeModel::default();
    for row in lobe.theta.iter_mut() {
        for t in row.iter_mut() {
            *t = rng.uniform(-3.0, 3.0);
        }
    }
    let weak = WeakLabel::new(rng.int_range(1, 6) as u8, rng.int_range(0, 47), &e).unwrap();
    let hg = HalfGaussianModel::new(rng.uniform(3.0, 12.0), SLICE_TRUNCATION_MU).unwrap();
    (props, weak, e, hg, lobe)
}

#[test]
fn posterior_equals_normalized_product() {
    let mut rng = SplitMix64::new(3);
    for _ in 0..1000 {
        let (props, weak, e, hg, lobe) = random_case(&mut rng);
        let post = weak_posterior(&props, &weak, &e, &hg, &lobe).unwrap();
        let joint: Vec<f64> = props
            .iter()
            .map(|p| {
                let dz = (weak.z as f64 - p.bbox.z).abs();
                let delta = (dz - hg.mu).max(0.0);
                let slice = 2.0 / (2.0 * std::f64::consts::PI * hg.sigma * hg.sigma).sqrt()
                    * (-delta * delta / (2.0 * hg.sigma * hg.sigma)).exp();
                let f = [p.bbox.x / 48.0, p.bbox.y / 48.0, p.bbox.z / 48.0, 1.0];
                let logits: Vec<f64> = lobe
                    .theta
                    .iter()
                    .map(|r| r.iter().zip(&f).map(|(a, b)| a * b).sum())
                    .collect();
                let denom: f64 = logits.iter().map(|l| l.exp()).sum();
                p.score * slice * logits[weak.loc as usize - 1].exp() / denom
            })
            .collect();
        let total: f64 = joint.iter().sum();
        for (w, j) in post.weights.iter().zip(&joint) {
            assert!((w - j / total).abs() <= 1e-12);
        }
        assert!((post.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(post.weights.iter().all(|&w| w >= 0.0));
    }
}

#[test]
fn slice_likelihood_plateau_then_strictly_decreasing() {
    let hg = HalfGaussianModel::new(1.7, SLICE_TRUNCATION_MU).unwrap();
    let b = Box3::new(0.0, 0.0, 0.0, 4.0).unwrap();
    let peak = slice_likelihood(0.0, &b, &hg);
    let mut prev = peak;
    for i in 1..=400 {
        let dz = i as f64 * 0.02;
        let v = slice_likelihood(dz, &b, &hg);
        assert_eq!(v, slice_likelihood(-dz, &b, &hg));
        if dz <= hg.mu {
            assert_eq!(v, peak);
        } else {
            assert!(v < prev, "not decreasing at {dz}");
        }
        prev = v;
    }
}

#[test]
fn planted_weak_labels_sit_on_their_plateau() {
    let scenario = Scenario::default();
    let hg = HalfGaussianModel::new(1.0, SLICE_TRUNCATION_MU).unwrap();
    let mut rng = scenario.rng();
    for _ in 0..5 {
        let g = gen_volume(&scenario, &mut rng).unwrap();
        for n in &g.nodules {
            let w = derive_weak_label(n, &g.extents, &scenario.partition).unwrap();
            assert!((1..=6).contains(&w.loc));
            assert!((w.z as f64 - n.z).abs() <= hg.mu);
            assert_eq!(slice_likelihood(w.z as f64, n, &hg), hg.peak());
        }
    }
}

#[test]
fn weak_split_is_reproducible() {
    let scenario = Scenario {
        seed: 12,
        extents: Extents::cube(24),
        ..Scenario::default()
    };
    let sizes = SplitSizes {
        full: 2,
        weak: 3,
        val: 1,
    };
    assert_eq!(
        SyntheticSplit::generate(&scenario, sizes).unwrap(),
        SyntheticSplit::generate(&scenario, sizes).unwrap()
    );
}

proptest! {
    #[test]
    fn map_invariant_to_rescaling(weights in prop::collection::vec(0.0..10.0f64, 1..10), c in 1e-3..1e3f64) {
        prop_assume!(weights.iter().sum::<f64>() > 0.0);
        let boxes: Vec<Box3> = (0..weights.len()).map(|i| Box3::new(i as f64, 0.0, 0.0, 1.0).unwrap()).collect();
        let priors = vec![0.5; weights.len()];
        let a = Posterior::from_unnormalized(boxes.clone(), priors.clone(), weights.clone()).unwrap();
        let b = Posterior::from_unnormalized(boxes, priors, weights.iter().map(|w| w * c).collect()).unwrap();
        prop_assert_eq!(map_index(&a).unwrap(), map_index(&b).unwrap());
        let oracle = (0..weights.len()).fold(0, |best, i| if weights[i] > weights[best] { i } else { best });
        prop_assert_eq!(map_index(&a).unwrap(), oracle);
    }

    #[test]
    fn sampling_reproducible(seed in any::<u64>(), m in 1usize..6) {
        let boxes: Vec<Box3> = (0..4).map(|i| Box3::new(i as f64, 0.0, 0.0, 1.0).unwrap()).collect();
        let post = Posterior::from_unnormalized(boxes, vec![0.5; 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = infer_sampling(&post, m, &mut SplitMix64::new(seed)).unwrap();
        let b = infer_sampling(&post, m, &mut SplitMix64::new(seed)).unwrap();
        prop_assert_eq!(a.len(), m);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn partition_is_total(seed in 0u64..200) {
        let scenario = Scenario { seed, extents: Extents::cube(32), ..Scenario::default() };
        let g = gen_volume(&scenario, &mut scenario.rng()).unwrap();
        for n in &g.nodules {
            let locs: Vec<u8> = (1..=6u8).filter(|&l| scenario.partition.locate(n.center(), &g.extents).unwrap() == l).collect();
            prop_assert_eq!(locs.len(), 1);
        }
    }
}
