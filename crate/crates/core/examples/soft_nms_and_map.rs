//! Gaussian Soft-NMS on overlapping detections, then AP at several tIoU
//! thresholds against a small ground truth.

use sada::evaluation::{average_precision, tiou};
use sada::inference::{soft_nms, NmsConfig, ScoredSegment};

fn seg(begin_s: f64, end_s: f64, score: f64) -> ScoredSegment {
    ScoredSegment {
        begin_s,
        end_s,
        class_id: 1,
        score,
        level: 0,
        anchor: 0,
    }
}

fn main() {
    let raw = vec![
        seg(0.0, 10.0, 0.9),
        seg(1.0, 9.0, 0.8),
        seg(0.5, 11.0, 0.7),
        seg(20.0, 26.0, 0.6),
        seg(21.0, 25.0, 0.5),
        seg(40.0, 44.0, 0.3),
    ];
    let kept = soft_nms(&raw, &NmsConfig::default());
    println!("after soft-NMS:");
    for s in &kept {
        println!("  [{:5.1}, {:5.1}] {:.4}", s.begin_s, s.end_s, s.score);
    }
    println!("tIoU([0,10], [1,9]) = {:.2}", tiou((0.0, 10.0), (1.0, 9.0)));

    let gt = [(0.0, 10.0), (20.0, 25.0)];
    let preds: Vec<_> = kept.iter().map(|s| (s.begin_s, s.end_s, s.score)).collect();
    for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let ap = average_precision(&preds, &gt, tau).unwrap_or(0.0);
        println!("AP@{tau:.1} = {ap:.4}");
    }
}
