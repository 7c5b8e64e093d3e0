use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vqknet::data_io::features::{decode_features, encode_features};
use vqknet::eval::{average_precision, default_thresholds, evaluate, tiou, Detection, GroundTruthSegment};
use vqknet::inference::{
    extract_segments, localize, oic_score, soft_nms, video_class_probs, ActionProposal, InferenceConfig,
    SegmentTiming,
};
use vqknet::model::ModelOutputs;
use vqknet::tensor::Tensor;
use vqknet::trainer::sample_segment_indices;

fn proposal() -> impl Strategy<Value = ActionProposal> {
    (0.0..20.0f64, 0.1..8.0f64, 0..3usize, 0.0..1.0f64).prop_map(|(s, len, c, score)| ActionProposal {
        t_start: s,
        t_end: s + len,
        class_id: c,
        score,
    })
}

fn detection() -> impl Strategy<Value = Detection> {
    (0..3usize, 0..10u32, 1..6u32, 0..4u32).prop_map(|(v, s, len, score)| Detection {
        video: format!("v{v}"),
        class: "a".into(),
        t_start: f64::from(s),
        t_end: f64::from(s + len),
        score: f64::from(score) / 4.0,
    })
}

fn ground_truth() -> impl Strategy<Value = GroundTruthSegment> {
    (0..3usize, 0..10u32, 1..6u32).prop_map(|(v, s, len)| GroundTruthSegment {
        video: format!("v{v}"),
        class: "a".into(),
        t_start: f64::from(s),
        t_end: f64::from(s + len),
    })
}

proptest! {
    #[test]
    fn extracted_runs_partition_the_thresholded_set(
        s in prop::collection::vec(0.0..1.0f64, 0..30),
        thr in 0.0..1.0f64,
    ) {
        let runs = extract_segments(&s, thr);
        let mut covered = vec![false; s.len()];
        let mut last_end: Option<usize> = None;
        for &(a, b) in &runs {
            prop_assert!(a <= b);
            if let Some(e) = last_end {
                // Sorted, disjoint and maximal: a gap of at least one index.
                prop_assert!(a > e + 1);
            }
            last_end = Some(b);
            for c in &mut covered[a..=b] {
                *c = true;
            }
        }
        for (t, &v) in s.iter().enumerate() {
            prop_assert_eq!(covered[t], v >= thr);
        }
    }

    #[test]
    fn soft_nms_only_shrinks(
        props in prop::collection::vec(proposal(), 0..12),
        thr in 0.0..1.0f64,
    ) {
        let out = soft_nms(&props, thr, 0.0);
        prop_assert!(out.len() <= props.len());
        for p in &out {
            let original = props
                .iter()
                .filter(|q| q.class_id == p.class_id && q.t_start == p.t_start && q.t_end == p.t_end)
                .map(|q| q.score)
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.score <= original + 1e-15);
        }
    }

    #[test]
    fn oic_ignores_a_constant_shift(
        row in prop::collection::vec(-2.0..2.0f64, 2..20),
        a in 0usize..20,
        b in 0usize..20,
        shift in -5.0..5.0f64,
    ) {
        let n = row.len();
        let (start, end) = (a.min(b) % n, a.max(b) % n);
        let (start, end) = (start.min(end), start.max(end));
        // The collar is nonempty unless the proposal spans the whole row.
        prop_assume!(start > 0 || end + 1 < n);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let d = oic_score(&row, start, end, 0.25) - oic_score(&shifted, start, end, 0.25);
        prop_assert!(d.abs() < 1e-9);
    }

    #[test]
    fn ap_is_monotone_in_threshold(
        dets in prop::collection::vec(detection(), 0..8),
        gts in prop::collection::vec(ground_truth(), 1..5),
    ) {
        let mut previous = f64::INFINITY;
        for t in default_thresholds() {
            let ap = average_precision(&dets, &gts, t);
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(ap <= previous + 1e-12);
            previous = ap;
        }
    }

    #[test]
    fn tiou_is_symmetric_and_bounded(
        a in 0.0..10.0f64, la in 0.01..5.0f64,
        b in 0.0..10.0f64, lb in 0.01..5.0f64,
    ) {
        let x = tiou((a, a + la), (b, b + lb)).unwrap();
        let y = tiou((b, b + lb), (a, a + la)).unwrap();
        prop_assert!((x - y).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn report_values_and_bands_are_consistent(
        dets in prop::collection::vec(detection(), 0..10),
        gts in prop::collection::vec(ground_truth(), 1..5),
    ) {
        let vocab = vec!["a".to_string(), "b".to_string()];
        let report = evaluate(&dets, &gts, &vocab, &default_thresholds()).unwrap();
        prop_assert_eq!(report.classes.clone(), vec!["a".to_string()]);
        for v in report.map.iter().chain(report.ap.iter().flatten()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        for band in &report.bands {
            let members: Vec<f64> = band.thresholds.iter().map(|&t| report.map_at(t).unwrap()).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            prop_assert!((band.value - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn localized_proposals_are_well_formed(
        seed in 0u64..1000,
        t_len in 1usize..25,
        classes in 1usize..4,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tcam: Vec<f64> = (0..(classes + 1) * t_len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tcam = Tensor::new(&[classes + 1, t_len], tcam).unwrap();
        let mut suppressed = tcam.clone();
        for c in 0..=classes {
            for t in 0..t_len {
                suppressed.data_mut()[c * t_len + t] *= s[t];
            }
        }
        let dummy = Tensor::zeros(&[t_len]);
        let outputs = ModelOutputs {
            s_rgb: dummy.clone(),
            s_flow: dummy.clone(),
            s: Tensor::vector(s).unwrap(),
            x_hat: Tensor::zeros(&[t_len, 2]),
            q_hat: Tensor::zeros(&[classes + 1, 2]),
            k_hat: Tensor::zeros(&[t_len, 2]),
            tcam,
            tcam_suppressed: suppressed.clone(),
        };
        let config = InferenceConfig::default();
        let probs = video_class_probs(&suppressed, config.m);
        for p in localize(&outputs, SegmentTiming::default(), &config) {
            prop_assert!(p.t_start < p.t_end);
            prop_assert!(p.class_id < classes);
            prop_assert!(probs[p.class_id] >= config.class_threshold);
        }
    }

    #[test]
    fn feature_files_round_trip_at_single_precision(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| f64::from(rng.gen::<f32>() * 10.0 - 5.0)).collect();
        let t = Tensor::new(&[rows, cols], data).unwrap();
        let back = decode_features(&encode_features(&t)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn sampled_indices_stay_sorted_and_in_range(len in 1usize..200, target in 1usize..100, seed in 0u64..100) {
        let idx = sample_segment_indices(len, target, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(idx.len(), target);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < len));
    }
}

/// Every index of a stratified draw lands in its bin uniformly, so index j
/// in a bin of width w is drawn with frequency 1/w per draw of that bin.
#[test]
fn stratified_sampling_histogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (len, target) in [(10usize, 4usize), (37, 5), (500, 60)] {
        let draws = 40_000;
        let mut counts = vec![0usize; len];
        for _ in 0..draws {
            for i in sample_segment_indices(len, target, &mut rng) {
                counts[i] += 1;
            }
        }
        let mut expected = vec![0.0; len];
        for i in 0..target {
            let lo = i * len / target;
            let hi = ((i + 1) * len / target).max(lo + 1);
            for e in &mut expected[lo..hi] {
                *e += draws as f64 / (hi - lo) as f64;
            }
        }
        for j in 0..len {
            let rel = (counts[j] as f64 - expected[j]).abs() / expected[j];
            assert!(rel < 0.05, "len {len} target {target} index {j}: {} vs {}", counts[j], expected[j]);
        }
    }
}
