use jepagrasp_core::datasets::{DatasetManifest, Family, GeneratorConfig, ObjectEntry, ObjectShape};
use jepagrasp_core::grasphead::{HypothesisSet, JointVector, NUM_JOINTS};
use jepagrasp_core::metrics::{is_covered, CoverageNorm};
use jepagrasp_core::pointops::{dist2, fps, group_knn, Point};
use jepagrasp_core::rng;
use jepagrasp_core::sequencing::{sample_mask, sequence_centers, MaskConfig};
use jepagrasp_core::splits::{budget_quota, holdout_sizes, make_pack, verify_pack, BUDGETS};
use proptest::prelude::*;

fn cloud() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..40)
}

fn manifest(sizes: &[usize]) -> DatasetManifest {
    let mut categories = Vec::new();
    let mut objects = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        let cat = format!("c{c}");
        categories.push((cat.clone(), n));
        for i in 0..n {
            let object_id = format!("{cat}_{i:03}");
            objects.push(ObjectEntry {
                cloud_file: format!("clouds/{object_id}.bin"),
                object_id,
                category_id: cat.clone(),
                shape: ObjectShape { family: Family::Cone, dims: [1.0; 3], center: [0.0; 3], scale: 1.0 },
            });
        }
    }
    DatasetManifest {
        format_version: 1,
        generator: GeneratorConfig::default(),
        categories,
        objects,
        samples_per_object: 1,
        seed: 0,
    }
}

proptest! {
    #[test]
    fn fps_is_distinct_and_prefix_stable(pts in cloud(), frac in 0.0f64..1.0) {
        let n = pts.len();
        let k = 1 + ((n - 1) as f64 * frac) as usize;
        let all = fps(&pts, n).unwrap();
        let some = fps(&pts, k).unwrap();
        prop_assert_eq!(&all[..k], &some[..]);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn knn_members_are_within_radius(pts in cloud(), s in 1usize..10, radius in 0.0f64..2.0) {
        let centers = fps(&pts, pts.len().min(5)).unwrap();
        let groups = group_knn(&pts, &centers, s, radius);
        prop_assert_eq!(groups.len(), centers.len() * s);
        for (gi, &c) in centers.iter().enumerate() {
            for &m in &groups[gi * s..(gi + 1) * s] {
                prop_assert!(m == c || dist2(pts[m], pts[c]) <= radius * radius);
            }
        }
    }

    #[test]
    fn sequence_is_a_permutation(pts in cloud()) {
        let mut order = sequence_centers(&pts);
        order.sort_unstable();
        prop_assert_eq!(order, (0..pts.len()).collect::<Vec<_>>());
    }

    #[test]
    fn masks_are_valid(g in 8usize..128, targets in 1usize..6, seed in any::<u64>()) {
        let cfg = MaskConfig { num_targets: targets, ..Default::default() };
        prop_assume!(g >= cfg.min_tokens());
        let plan = sample_mask(g, &cfg, &mut rng::stream(seed, &[])).unwrap();
        prop_assert!(plan.check(g).is_ok());
        prop_assert_eq!(plan.target_blocks.len(), targets);
        prop_assert!(!plan.context_indices.is_empty());
    }

    #[test]
    fn coverage_grows_with_threshold_and_hypotheses(
        joints in prop::collection::vec(prop::array::uniform12(-1.5f64..1.5), 1..6),
        truth in prop::array::uniform12(-1.5f64..1.5),
        t1 in 0.0f64..2.0, t2 in 0.0f64..2.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let truth: JointVector = truth;
        for norm in [CoverageNorm::MaxAbs, CoverageNorm::Rmse] {
            let full = HypothesisSet { logits: vec![0.0; joints.len()], joints: joints.clone() };
            let first = HypothesisSet { joints: vec![joints[0]], logits: vec![0.0] };
            prop_assert!(!is_covered(&full, &truth, lo, norm) || is_covered(&full, &truth, hi, norm));
            prop_assert!(!is_covered(&first, &truth, lo, norm) || is_covered(&full, &truth, lo, norm));
            prop_assert!(is_covered(&full, &truth, f64::INFINITY, norm));
        }
        prop_assert_eq!(truth.len(), NUM_JOINTS);
    }

    #[test]
    fn budget_quotas_are_monotone(train in 1usize..500) {
        let q: Vec<usize> = BUDGETS.iter().map(|&p| budget_quota(p, train)).collect();
        prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(q[0] >= 1);
        prop_assert_eq!(*q.last().unwrap(), train);
    }

    #[test]
    fn holdouts_hit_the_global_target(sizes in prop::collection::vec(3usize..60, 1..8)) {
        let total: usize = sizes.iter().sum();
        let h = holdout_sizes(&sizes);
        prop_assert_eq!(h.iter().sum::<usize>(), (total * 10 + 50) / 100);
        prop_assert!(h.iter().zip(&sizes).all(|(a, b)| 2 * a < *b));
    }

    #[test]
    fn packs_verify_and_regenerate(sizes in prop::collection::vec(3usize..30, 1..6), seed in any::<u64>()) {
        let m = manifest(&sizes);
        let pack = make_pack(&m, "P", seed).unwrap();
        prop_assert!(verify_pack(&pack, &m, None).is_ok());
        prop_assert_eq!(make_pack(&m, "P", seed).unwrap().to_json(), pack.to_json());
    }
}
