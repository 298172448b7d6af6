use proptest::prelude::*;

use desk_iba::detect::{binarize, components, detect, estimate_severity};
use desk_iba::eval::{classification_metrics, localization_metrics, summarize_localization};
use desk_iba::heatmap::{upsample_bilinear, Heatmap, Method};
use desk_iba::iba::{capacity_kl, inject_noise, kl_standardized, ONE_MINUS_M_FLOOR};
use desk_iba::rng::SplitMix64;
use desk_iba::synth::{Label, Severity, PIXELS};
use desk_iba::Tensor;

/// Sparse random heatmap: `blobs` bright squares on a zero background.
fn heatmap_from(seed: u64, blobs: usize) -> Heatmap {
    let mut rng = SplitMix64::new(seed);
    let mut v = vec![0.0; PIXELS];
    for _ in 0..blobs {
        let (r, c, k) = (
            rng.below(60) as usize,
            rng.below(60) as usize,
            1 + rng.below(5) as usize,
        );
        let level = rng.uniform(0.1, 1.0);
        for y in r..(r + k).min(64) {
            for x in c..(c + k).min(64) {
                v[y * 64 + x] = level;
            }
        }
    }
    Heatmap::new(v, Method::Iba).unwrap()
}

fn mask_from(seed: u64, density: f64) -> Vec<bool> {
    let mut rng = SplitMix64::new(seed);
    (0..PIXELS).map(|_| rng.next_f64() < density).collect()
}

proptest! {
    #[test]
    fn kl_zero_at_unmasked_and_monotone(z in -20.0f64..20.0, m1 in 0.0f64..(1.0 - 1e-6), m2 in 0.0f64..(1.0 - 1e-6)) {
        prop_assert_eq!(kl_standardized(0.0, z, ONE_MINUS_M_FLOOR), 0.0);
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let a = kl_standardized(lo, z, ONE_MINUS_M_FLOOR);
        let b = kl_standardized(hi, z, ONE_MINUS_M_FLOOR);
        prop_assert!(a >= 0.0);
        prop_assert!(b >= a, "KL({lo}) = {a} > KL({hi}) = {b}");
    }

    #[test]
    fn kl_is_shift_and_scale_invariant(m in 0.0f64..0.999, x in -5.0f64..5.0, mu in -3.0f64..3.0, s in 0.01f64..10.0) {
        let direct = capacity_kl(m, x, mu, s).unwrap();
        let moved = capacity_kl(m, 2.0 * x + 1.0, 2.0 * mu + 1.0, 2.0 * s).unwrap();
        prop_assert!((direct - moved).abs() <= 1e-9 * direct.max(1.0));
    }

    #[test]
    fn noise_injection_is_a_convex_mix(vals in proptest::collection::vec((-5.0f64..5.0, 0.0f64..=1.0, -5.0f64..5.0), 1..32)) {
        let n = vals.len();
        let x = Tensor::new(vec![n], vals.iter().map(|v| v.0).collect()).unwrap();
        let m = Tensor::new(vec![n], vals.iter().map(|v| v.1).collect()).unwrap();
        let e = Tensor::new(vec![n], vals.iter().map(|v| v.2).collect()).unwrap();
        let xt = inject_noise(&x, &m, &e).unwrap();
        for (i, v) in xt.data().iter().enumerate() {
            let (a, b) = (vals[i].0.min(vals[i].2), vals[i].0.max(vals[i].2));
            prop_assert!(*v >= a - 1e-12 && *v <= b + 1e-12);
        }
    }

    #[test]
    fn upsampling_preserves_range(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let src: Vec<f64> = (0..256).map(|_| rng.uniform(0.0, 3.0)).collect();
        let (lo, hi) = src.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for v in upsample_bilinear(&src, 16) {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn detection_ignores_positive_rescaling(seed in any::<u64>(), blobs in 0usize..8, k in 0.001f64..1000.0) {
        let h = heatmap_from(seed, blobs);
        let scaled = Heatmap::new(h.values.iter().map(|v| v * k).collect(), Method::Iba).unwrap();
        let a = detect(&h, None, 0.3, 4).unwrap();
        let b = detect(&scaled, None, 0.3, 4).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.bbox, y.bbox);
            prop_assert_eq!(x.pixel_count, y.pixel_count);
        }
    }

    #[test]
    fn detections_cover_threshold_minus_small_components(seed in any::<u64>(), blobs in 0usize..10, min_area in 1usize..12) {
        let h = heatmap_from(seed, blobs);
        let bin = binarize(&h, None, 0.3).unwrap();
        let kept: usize = components(&bin).iter().filter(|c| c.len() >= min_area).map(Vec::len).sum();
        let found = detect(&h, None, 0.3, min_area).unwrap();
        prop_assert_eq!(found.iter().map(|d| d.pixel_count).sum::<usize>(), kept);
        let all: usize = components(&bin).iter().map(Vec::len).sum();
        prop_assert_eq!(all, bin.iter().filter(|&&b| b).count());
        for w in found.windows(2) {
            prop_assert!(w[0].pixel_count >= w[1].pixel_count);
        }
        for d in &found {
            prop_assert!(d.pixel_count >= min_area);
            let b = d.bbox;
            prop_assert!((b.row_max - b.row_min + 1) * (b.col_max - b.col_min + 1) >= d.pixel_count);
        }
    }

    #[test]
    fn severity_is_monotone_in_the_heatmap(seed in any::<u64>(), bump in 0.0f64..1.0) {
        let mut rng = SplitMix64::new(seed);
        let lung = mask_from(seed ^ 1, 0.6);
        let base: Vec<f64> = (0..PIXELS).map(|_| rng.uniform(0.0, 1.0)).collect();
        // A pointwise-larger map with the same maximum.
        let larger: Vec<f64> = base.iter().map(|v| (v + bump * rng.next_f64()).min(1.0)).collect();
        let mut base = base;
        base[0] = 1.0;
        let mut larger = larger;
        larger[0] = 1.0;
        let a = estimate_severity(&Heatmap::new(base, Method::Iba).unwrap(), &lung, Label::Positive, 0.3).unwrap();
        let b = estimate_severity(&Heatmap::new(larger, Method::Iba).unwrap(), &lung, Label::Positive, 0.3).unwrap();
        prop_assert!(b.severity_pred >= a.severity_pred);
        prop_assert!(a.severity_pred >= Severity::Ct1);
    }

    #[test]
    fn localization_rates_in_unit_interval(seed in any::<u64>(), blobs in 0usize..8, density in 0.001f64..0.5) {
        let h = heatmap_from(seed, blobs);
        let g = mask_from(seed ^ 7, density);
        if let Some(l) = localization_metrics(&h, &g, 0.3).unwrap() {
            prop_assert!((0.0..=1.0).contains(&l.iou));
            prop_assert!((0.0..=1.0).contains(&l.fp_area_ratio));
            prop_assert_eq!(l, localization_metrics(&h, &g, 0.3).unwrap().unwrap());
        }
    }

    #[test]
    fn confusion_counts_are_consistent(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..64)) {
        let lab = |b: bool| if b { Label::Positive } else { Label::Negative };
        let p: Vec<Label> = pairs.iter().map(|x| lab(x.0)).collect();
        let l: Vec<Label> = pairs.iter().map(|x| lab(x.1)).collect();
        let m = classification_metrics(&p, &l).unwrap();
        prop_assert_eq!(m.true_positives + m.true_negatives + m.false_positives + m.false_negatives, m.n);
        if let Some(acc) = m.accuracy {
            prop_assert_eq!(acc, (m.true_positives + m.true_negatives) as f64 / m.n as f64);
        } else {
            prop_assert_eq!(m.n, 0);
        }
    }

    #[test]
    fn aggregate_means_ignore_order(seed in any::<u64>(), n in 2usize..8, rot in 0usize..8) {
        let maps: Vec<Heatmap> = (0..n).map(|i| heatmap_from(seed.wrapping_add(i as u64), 4)).collect();
        let masks: Vec<Vec<bool>> = (0..n).map(|i| mask_from(seed ^ (i as u64 + 100), 0.05)).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let items: Vec<(&str, &Heatmap, &[bool])> =
            (0..n).map(|i| (ids[i].as_str(), &maps[i], masks[i].as_slice())).collect();
        let mut rotated = items.clone();
        rotated.rotate_left(rot % n);
        prop_assert_eq!(
            summarize_localization("iba", &items, 0.3).unwrap(),
            summarize_localization("iba", &rotated, 0.3).unwrap()
        );
    }

    #[test]
    fn rng_below_stays_in_range(seed in any::<u64>(), n in 1u64..1_000_000) {
        let mut rng = SplitMix64::new(seed);
        for _ in 0..32 {
            prop_assert!(rng.below(n) < n);
        }
    }
}
