use hddnet::eval::{match_features, mma, repeatability};
use hddnet::geometry::{homography_from_parts, Homography};
use hddnet::io::{Feature, FeatureSet};
use proptest::prelude::*;

fn feature_set(points: Vec<(f32, f32, Vec<f32>)>) -> FeatureSet {
    let dim = points.first().map_or(3, |p| p.2.len());
    FeatureSet {
        dim,
        features: points.into_iter().map(|(x, y, desc)| Feature { x, y, score: 1.0, desc }).collect(),
        requested: None,
    }
}

fn sets() -> impl Strategy<Value = (FeatureSet, FeatureSet)> {
    let one = || prop::collection::vec((0f32..64.0, 0f32..64.0, prop::collection::vec(-1f32..1.0, 3)), 1..20);
    (one(), one()).prop_map(|(a, b)| (feature_set(a), feature_set(b)))
}

proptest! {
    #[test]
    fn matching_is_symmetric((a, b) in sets()) {
        let ab: Vec<(usize, usize)> = match_features(&a, &b).unwrap().iter().map(|m| (m.a, m.b)).collect();
        let mut ba: Vec<(usize, usize)> = match_features(&b, &a).unwrap().iter().map(|m| (m.b, m.a)).collect();
        ba.sort();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn matches_are_one_to_one((a, b) in sets()) {
        let m = match_features(&a, &b).unwrap();
        let mut bs: Vec<usize> = m.iter().map(|m| m.b).collect();
        bs.sort();
        bs.dedup();
        prop_assert_eq!(bs.len(), m.len());
    }

    #[test]
    fn mma_grows_with_threshold((a, b) in sets(), t in 0.0f64..20.0, dt in 0.0f64..20.0) {
        let h = Homography::translation(1.5, -2.0);
        let m = match_features(&a, &b).unwrap();
        let (lo, hi) = (mma(&a, &b, &m, &h, t), mma(&a, &b, &m, &h, t + dt));
        prop_assert!(lo <= hi);
        prop_assert!((0.0..=1.0).contains(&hi));
    }

    #[test]
    fn warped_copies_are_fully_repeatable(
        pts in prop::collection::vec((0f64..64.0, 0f64..64.0), 1..30),
        theta in -40f64..40.0,
        scale in 0.7f64..1.4,
    ) {
        let h = homography_from_parts(theta, scale, 0.0, 0.0, (32.0, 32.0));
        let warped: Vec<(f64, f64)> = pts.iter().map(|&p| h.apply(p).unwrap()).collect();
        prop_assert!((repeatability(&pts, &warped, &h, 3.0) - 1.0).abs() < 1e-12);
        prop_assert_eq!(repeatability(&pts, &[], &h, 3.0), 0.0);
    }

    #[test]
    fn feature_files_round_trip((a, _) in sets(), requested in proptest::option::of(1usize..100)) {
        let set = FeatureSet { requested, ..a };
        let mut buf = Vec::new();
        set.write(&mut buf).unwrap();
        let back = FeatureSet::read(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back.features, &set.features);
        prop_assert_eq!(back.requested, None);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn homography_inverse_composes_to_identity(
        theta in -60f64..60.0, scale in 0.5f64..2.0, kx in -0.2f64..0.2, ky in -0.2f64..0.2,
        x in 0f64..100.0, y in 0f64..100.0,
    ) {
        let h = homography_from_parts(theta, scale, kx, ky, (48.0, 48.0));
        let p = h.apply((x, y)).unwrap();
        let q = h.inverse().apply(p).unwrap();
        prop_assert!((q.0 - x).abs() < 1e-9 && (q.1 - y).abs() < 1e-9);
        let text = Homography::parse(&h.to_text()).unwrap();
        prop_assert_eq!(text.matrix(), h.matrix());
    }
}
