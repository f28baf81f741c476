use proptest::prelude::*;
use tempodet_core::clipper::Window;
use tempodet_core::postproc::{
    detect_video, refine_clip, temporal_iou, temporal_nms, video_weights, ClipScores, Detection,
    PostprocConfig,
};

fn det(label: usize, s: usize, len: usize, score: f64) -> Detection {
    Detection {
        video_id: "v".into(),
        label,
        start_frame: s,
        end_frame: s + len,
        score,
    }
}

/// Repeated linear scans: take the best remaining candidate, drop everything
/// overlapping it by more than `delta`.
fn nms_reference(cands: &[Detection], delta: f64) -> Vec<(usize, usize, u64)> {
    let mut left: Vec<&Detection> = cands.iter().collect();
    let mut kept = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (left[i], left[best]);
            let better = a.score > b.score
                || (a.score == b.score && a.start_frame < b.start_frame)
                || (a.score == b.score && a.start_frame == b.start_frame && a.end_frame > b.end_frame);
            if better {
                best = i;
            }
        }
        let top = left.remove(best);
        kept.push((top.start_frame, top.end_frame, top.score.to_bits()));
        left.retain(|d| {
            let inter = d.end_frame.min(top.end_frame) as f64 - d.start_frame.max(top.start_frame) as f64;
            let inter = inter.max(0.0);
            let union = (d.end_frame - d.start_frame + top.end_frame - top.start_frame) as f64 - inter;
            inter / union <= delta
        });
    }
    kept
}

fn candidates() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0usize..200, 1usize..60, 0u8..10), 0..30).prop_map(|v| {
        v.into_iter()
            .map(|(s, l, q)| det(0, s, l, q as f64 / 10.0))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn nms_matches_reference(cands in candidates()) {
        for delta in [0.0, 0.3, 0.5, 0.7] {
            let got: Vec<_> = temporal_nms(cands.clone(), delta)
                .iter()
                .map(|d| (d.start_frame, d.end_frame, d.score.to_bits()))
                .collect();
            prop_assert_eq!(got, nms_reference(&cands, delta));
        }
    }

    #[test]
    fn nms_output_is_sparse_subset(cands in candidates(), delta in 0.0f64..0.95) {
        let kept = temporal_nms(cands.clone(), delta);
        for k in &kept {
            prop_assert!(cands.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                let iou = temporal_iou((a.start_frame, a.end_frame), (b.start_frame, b.end_frame));
                prop_assert!(iou <= delta);
            }
        }
    }

    #[test]
    fn weights_sum_to_one_and_fall_with_pb(
        p_b in prop::collection::vec(0.0f64..1.0, 1..40),
        alpha in 0.0f64..5.0,
        idx in any::<prop::sample::Index>(),
        drop in 0.01f64..0.5,
    ) {
        let w = video_weights(&p_b, alpha).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let m = idx.index(p_b.len());
        let mut raised = p_b.clone();
        raised[m] += 0.3;
        let w2 = video_weights(&raised, alpha).unwrap();
        prop_assert!(w2[m] <= w[m] + 1e-15);
        if alpha > 0.0 && p_b.len() > 1 && p_b[m] >= drop {
            let mut lowered = p_b.clone();
            lowered[m] -= drop;
            let w3 = video_weights(&lowered, alpha).unwrap();
            prop_assert!(w3[m] > w[m]);
        }
    }

    #[test]
    fn uniform_weights_when_alpha_zero_or_equal_pb(n in 1usize..30, p in 0.0f64..1.0, alpha in 0.0f64..3.0) {
        let equal = video_weights(&vec![p; n], alpha).unwrap();
        let zero = video_weights(&(0..n).map(|i| i as f64 / n as f64).collect::<Vec<_>>(), 0.0).unwrap();
        for w in equal.iter().chain(&zero) {
            prop_assert!((w - 1.0 / n as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn refine_keeps_argmax(p_l in prop::collection::vec(0.01f64..1.0, 2..8), p_a in 0.001f64..1.0) {
        let c = ClipScores {
            window: Window { video_id: "v".into(), start: 0, length: 16 },
            p_b: 0.5,
            p_l: p_l.clone(),
            p_a,
        };
        let r = refine_clip(&c);
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(argmax(&r), argmax(&p_l));
    }

    #[test]
    fn background_clips_are_kept_without_discard(p_b in prop::collection::vec(0.9f64..1.0, 1..6)) {
        let clips: Vec<ClipScores> = p_b
            .iter()
            .enumerate()
            .map(|(i, &p)| ClipScores {
                window: Window { video_id: "v".into(), start: 100 * i, length: 32 },
                p_b: p,
                p_l: vec![0.2, 0.2, 0.6],
                p_a: 0.1,
            })
            .collect();
        let dets = detect_video(&clips, 2, &PostprocConfig::default(), None);
        prop_assert_eq!(dets.len(), 2 * clips.len());
    }
}
