use lesionkit::metrics::*;
use lesionkit::rng::SplitMix64;
use lesionkit::Tensor;
use proptest::prelude::*;

fn random_mask(rng: &mut SplitMix64, shape: &[usize], density: f64) -> BinaryMask {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.next_f64() < density) as u8 as f64).collect();
    BinaryMask::new(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
}

/// A pixel is in the band when both a foreground and a background pixel
/// (counting the outside as background) lie within distance `w`.
fn brute_force_trimap(pred: &BinaryMask, gt: &BinaryMask, w: usize, metric: BandMetric) -> Option<f64> {
    let (h, wd) = (gt.shape()[0] as isize, gt.shape()[1] as isize);
    let at = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < wd && gt.get((r * wd + c) as usize);
    let within = |dr: isize, dc: isize| match metric {
        BandMetric::Chebyshev => dr.abs().max(dc.abs()) <= w as isize,
        BandMetric::Euclidean => dr * dr + dc * dc <= (w * w) as isize,
    };
    let (mut n, mut ok) = (0, 0);
    for r in 0..h {
        for c in 0..wd {
            let (mut fg, mut bg) = (false, false);
            let reach = w as isize;
            for rr in r - reach..=r + reach {
                for cc in c - reach..=c + reach {
                    if within(rr - r, cc - c) {
                        if at(rr, cc) {
                            fg = true;
                        } else {
                            bg = true;
                        }
                    }
                }
            }
            if fg && bg {
                n += 1;
                let i = (r * wd + c) as usize;
                ok += (pred.get(i) == gt.get(i)) as usize;
            }
        }
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

#[test]
fn trimap_matches_brute_force() {
    let mut rng = SplitMix64::new(17);
    for _ in 0..300 {
        let shape = [rng.int_range(1, 16), rng.int_range(1, 16)];
        let (dg, dp) = (rng.next_f64(), rng.next_f64());
        let gt = random_mask(&mut rng, &shape, dg);
        let pred = random_mask(&mut rng, &shape, dp);
        let w = rng.int_range(1, 4);
        for metric in [BandMetric::Chebyshev, BandMetric::Euclidean] {
            let fast = trimap_accuracy(&pred, &gt, w, metric).ok();
            assert_eq!(fast, brute_force_trimap(&pred, &gt, w, metric));
        }
    }
}

fn shift3(mask: &BinaryMask, by: [usize; 3], pad: usize) -> BinaryMask {
    let s = mask.shape();
    let out_shape = [s[0] + pad, s[1] + pad, s[2] + pad];
    let mut data = vec![0.0; out_shape.iter().product()];
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                if mask.get((z * s[1] + y) * s[2] + x) {
                    data[((z + by[0]) * out_shape[1] + y + by[1]) * out_shape[2] + x + by[2]] = 1.0;
                }
            }
        }
    }
    BinaryMask::new(Tensor::new(out_shape.to_vec(), data).unwrap()).unwrap()
}

#[test]
fn hausdorff_translation_and_scale_equivariance() {
    let mut rng = SplitMix64::new(23);
    let mut checked = 0;
    while checked < 40 {
        let a = random_mask(&mut rng, &[6, 6, 6], 0.3);
        let b = random_mask(&mut rng, &[6, 6, 6], 0.3);
        if a.count() == 0 || b.count() == 0 {
            continue;
        }
        let base = hausdorff95(&a, &b, None).unwrap();
        let by = [rng.int_range(0, 3), rng.int_range(0, 3), rng.int_range(0, 3)];
        // Padding keeps everything in view; the outside is background either way.
        let moved = hausdorff95(&shift3(&a, by, 3), &shift3(&b, by, 3), None).unwrap();
        assert!((moved - base).abs() <= 1e-9);
        let c = rng.uniform(0.1, 5.0);
        let scaled = hausdorff95(&a, &b, Some(&[c, c, c])).unwrap();
        assert!((scaled - c * base).abs() <= 1e-9);
        checked += 1;
    }
}

#[test]
fn kappa_of_independent_raters_is_near_zero() {
    let mut rng = SplitMix64::new(99);
    let a: Vec<usize> = (0..100_000).map(|_| rng.int_range(0, 3)).collect();
    let b: Vec<usize> = (0..100_000).map(|_| rng.int_range(0, 3)).collect();
    assert!(cohen_kappa(&a, &b).unwrap().abs() < 0.02);
}

#[test]
fn brute_force_cube_shift_hd95() {
    // Face-neighbor surfaces of two 4-cubes one voxel apart: every directed
    // distance is 0 or 1 and more than 5% are 1.
    let mut data = vec![0.0; 10 * 10 * 10];
    for z in 2..6 {
        for y in 2..6 {
            for x in 2..6 {
                data[(z * 10 + y) * 10 + x] = 1.0;
            }
        }
    }
    let a = BinaryMask::new(Tensor::new(vec![10, 10, 10], data).unwrap()).unwrap();
    let b = shift3(&a, [0, 0, 1], 0);
    assert_eq!(hausdorff95(&a, &b, None).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn dice_symmetric_and_reflexive(seed in 0u64..5000, h in 1usize..12, w in 1usize..12) {
        let mut rng = SplitMix64::new(seed);
        let a = random_mask(&mut rng, &[h, w], 0.4);
        let b = random_mask(&mut rng, &[h, w], 0.4);
        prop_assert_eq!(dice_coefficient(&a, &b).unwrap(), dice_coefficient(&b, &a).unwrap());
        prop_assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        let comp = BinaryMask::new(a.tensor().map(|v| 1.0 - v).unwrap()).unwrap();
        if a.count() > 0 && comp.count() > 0 {
            prop_assert_eq!(dice_coefficient(&a, &comp).unwrap(), 0.0);
        }
    }

    #[test]
    fn kappa_self_agreement(labels in prop::collection::vec(0u8..4, 2..60)) {
        let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
        prop_assume!(distinct >= 2);
        prop_assert_eq!(cohen_kappa(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn trimap_bands_grow_with_width(seed in 0u64..5000) {
        let mut rng = SplitMix64::new(seed);
        let gt = random_mask(&mut rng, &[12, 12], 0.3);
        let b1 = trimap_band(&gt, 1, BandMetric::Chebyshev).unwrap();
        let b2 = trimap_band(&gt, 2, BandMetric::Chebyshev).unwrap();
        prop_assert!(b1.iter().zip(&b2).all(|(x, y)| !x || *y));
    }
}
