use proptest::prelude::*;

use vlashield::action::{ActionChunk, WeightVector};
use vlashield::attribution::{gradcam_map, AttentionTensors};
use vlashield::calibrate::quantile;
use vlashield::config::Normalization;
use vlashield::image::Image;
use vlashield::intervene::onion_peel_fill;
use vlashield::mask::{Mask, RleSpec};
use vlashield::perturb::{blur_masked, noise_masked, recolor_masked};
use vlashield::sensitivity::chunk_deviation;

fn mask_strategy(max: u32) -> impl Strategy<Value = Mask> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        prop::collection::vec(prop::bool::weighted(0.3), (w * h) as usize).prop_map(move |bits| Mask::new(w, h, bits).unwrap())
    })
}

fn mask_pair(max: u32) -> impl Strategy<Value = (Mask, Mask)> {
    mask_strategy(max).prop_flat_map(|a| {
        let (w, h) = a.dims();
        let b = prop::collection::vec(prop::bool::weighted(0.2), (w * h) as usize).prop_map(move |bits| Mask::new(w, h, bits).unwrap());
        (Just(a), b)
    })
}

fn image_strategy(w: u32, h: u32) -> impl Strategy<Value = Image> {
    prop::collection::vec(any::<u8>(), (w * h * 3) as usize).prop_map(move |d| Image::new(w, h, d).unwrap())
}

fn image_and_mask(max: u32) -> impl Strategy<Value = (Image, Mask)> {
    mask_strategy(max).prop_flat_map(|m| {
        let (w, h) = m.dims();
        (image_strategy(w, h), Just(m))
    })
}

fn chunks_strategy(k: usize, len: usize) -> impl Strategy<Value = Vec<ActionChunk>> {
    let step = (prop::array::uniform6(-0.1f64..0.1), 0.0f64..=1.0).prop_map(|(p, g)| [p[0], p[1], p[2], p[3], p[4], p[5], g]);
    prop::collection::vec(prop::collection::vec(step, len), k)
        .prop_map(|cs| cs.into_iter().map(|c| ActionChunk::new(c).unwrap()).collect())
}

fn paired(k: usize, ta: usize) -> impl Strategy<Value = (Vec<ActionChunk>, Vec<ActionChunk>)> {
    (chunks_strategy(k, ta + 1), chunks_strategy(k, ta + 1))
}

fn transpose_image(img: &Image) -> Image {
    let (w, h) = img.dims();
    let mut out = Image::filled(h, w, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, img.get(x, y));
        }
    }
    out
}

fn transpose_mask(m: &Mask) -> Mask {
    Mask::from_fn(m.height(), m.width(), |x, y| m.get(y, x))
}

fn outside_unchanged(before: &Image, after: &Image, m: &Mask) -> bool {
    before.diff_indices(after).into_iter().all(|i| m.get_index(i))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rle_round_trip(m in mask_strategy(48)) {
        let rle = m.to_rle();
        prop_assert_eq!(rle.decode().unwrap(), m.clone());
        let json = serde_json::to_string(&rle).unwrap();
        let back: RleSpec = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back.decode().unwrap(), m);
    }

    #[test]
    fn dilation_is_extensive_monotone_and_composes(m in mask_strategy(32), r in 0u32..5, s in 0u32..4) {
        let d = m.dilate(r);
        prop_assert!(m.is_subset_of(&d));
        prop_assert!(d.is_subset_of(&m.dilate(r + 1)));
        prop_assert_eq!(d.dilate(s), m.dilate(r + s));
        prop_assert_eq!(m.dilate(0), m.clone());
        let sub = Mask::from_fn(m.width(), m.height(), |x, y| m.get(x, y) && x % 3 != 0);
        prop_assert!(sub.dilate(r).is_subset_of(&d));
    }

    #[test]
    fn dilation_distributes_over_union((a, b) in mask_pair(24), r in 0u32..4) {
        prop_assert_eq!(a.union(&b).dilate(r), a.dilate(r).union(&b.dilate(r)));
    }

    #[test]
    fn deviation_is_symmetric_and_zero_on_itself((a, b) in paired(3, 3)) {
        let w = WeightVector::translational();
        let ab = chunk_deviation(&a, &b, &w, 3, Normalization::Literal).unwrap();
        let ba = chunk_deviation(&b, &a, &w, 3, Normalization::Literal).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(chunk_deviation(&a, &a, &w, 3, Normalization::Literal).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn deviation_scales_with_root_of_weights((a, b) in paired(2, 2), c in 0.01f64..100.0) {
        let w = [1.0, 0.5, 2.0, 0.1, 0.1, 0.1, 0.0];
        let base = chunk_deviation(&a, &b, &WeightVector::new(w).unwrap(), 2, Normalization::Literal).unwrap();
        let scaled = chunk_deviation(&a, &b, &WeightVector::new(w.map(|v| v * c)).unwrap(), 2, Normalization::Literal).unwrap();
        prop_assert!((scaled - c.sqrt() * base).abs() <= 1e-12 * scaled.max(1e-300));
    }

    #[test]
    fn per_step_normalization_differs_by_constant((a, b) in paired(4, 3)) {
        let w = WeightVector::new([1.0; 7]).unwrap();
        let lit = chunk_deviation(&a, &b, &w, 3, Normalization::Literal).unwrap();
        let per = chunk_deviation(&a, &b, &w, 3, Normalization::PerStep).unwrap();
        prop_assert!((lit * 3.0 - per * 4.0).abs() <= 1e-12 * lit.max(1e-300));
    }

    #[test]
    fn quantile_matches_sorted_rank(values in prop::collection::vec(-1.0f64..1.0, 1..40), q in 0.0f64..=1.0) {
        let mut v = values.clone();
        v.sort_by(f64::total_cmp);
        let rank = (v.len() - 1) as f64 * q;
        let lo = rank.floor() as usize;
        let frac = rank - lo as f64;
        let want = if frac == 0.0 { v[lo] } else { v[lo] * (1.0 - frac) + v[lo + 1] * frac };
        let got = quantile(&values, q).unwrap();
        prop_assert!((got - want).abs() <= 1e-12);
        prop_assert!(got >= v[0] && got <= v[v.len() - 1]);
    }

    #[test]
    fn quantile_of_long_lists(values in prop::collection::vec(-1.0f64..1.0, 1..10_000), q in 0.0f64..=1.0) {
        let mut v = values.clone();
        v.sort_by(f64::total_cmp);
        let rank = (v.len() - 1) as f64 * q;
        let lo = rank.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        let want = v[lo] + (rank - lo as f64) * (v[hi] - v[lo]);
        prop_assert!((quantile(&values, q).unwrap() - want).abs() <= 1e-15);
    }

    #[test]
    fn gradcam_is_linear_in_the_gradient(
        a in prop::collection::vec(0.0f64..1.0, 3 * 16),
        d1 in prop::collection::vec(-1.0f64..1.0, 3 * 16),
        d2 in prop::collection::vec(-1.0f64..1.0, 3 * 16),
        alpha in -3.0f64..3.0,
    ) {
        let t = |da: Vec<f64>| AttentionTensors { h: 3, j: 16, layer: 6, a: a.clone(), da };
        let m1 = gradcam_map(&t(d1.clone())).unwrap();
        let m2 = gradcam_map(&t(d2.clone())).unwrap();
        let mix: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| alpha * x + y).collect();
        let m = gradcam_map(&t(mix)).unwrap();
        for i in 0..16 {
            prop_assert!((m.values[i] - (alpha * m1.values[i] + m2.values[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradcam_ignores_head_order(
        a in prop::collection::vec(0.0f64..1.0, 4 * 16),
        da in prop::collection::vec(-1.0f64..1.0, 4 * 16),
    ) {
        let rev = |v: &[f64]| -> Vec<f64> { v.chunks(16).rev().flatten().copied().collect() };
        let m = gradcam_map(&AttentionTensors { h: 4, j: 16, layer: 6, a: a.clone(), da: da.clone() }).unwrap();
        let r = gradcam_map(&AttentionTensors { h: 4, j: 16, layer: 6, a: rev(&a), da: rev(&da) }).unwrap();
        for i in 0..16 {
            prop_assert!((m.values[i] - r.values[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn onion_peel_touches_only_the_mask((img, m) in image_and_mask(20)) {
        let out = onion_peel_fill(&img, &m).unwrap();
        prop_assert!(outside_unchanged(&img, &out, &m));
    }

    #[test]
    fn onion_peel_commutes_with_transpose((img, m) in image_and_mask(20)) {
        let a = transpose_image(&onion_peel_fill(&img, &m).unwrap());
        let b = onion_peel_fill(&transpose_image(&img), &transpose_mask(&m)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn onion_peel_of_constant_surround_is_constant(m in mask_strategy(20), c in prop::array::uniform3(any::<u8>())) {
        prop_assume!(m.count() < (m.width() * m.height()) as usize);
        let flat = Image::filled(m.width(), m.height(), c);
        let marked = recolor_masked(&flat, &m, c.map(|v| 255 - v)).unwrap();
        prop_assert_eq!(onion_peel_fill(&marked, &m).unwrap(), flat);
    }

    #[test]
    fn perturbations_stay_inside_the_mask((img, m) in image_and_mask(24), seed in any::<u64>()) {
        prop_assert!(outside_unchanged(&img, &blur_masked(&img, &m, 5).unwrap(), &m));
        prop_assert!(outside_unchanged(&img, &noise_masked(&img, &m, 0.3, seed).unwrap(), &m));
        prop_assert!(outside_unchanged(&img, &recolor_masked(&img, &m, [1, 2, 3]).unwrap(), &m));
        prop_assert_eq!(noise_masked(&img, &m, 0.3, seed).unwrap(), noise_masked(&img, &m, 0.3, seed).unwrap());
    }
}
