//! Pseudo-labelling of target anchors and the per-class anchor groups the
//! semantic alignment losses are computed over.

use ndarray::array;
use sada::alignment::{group_anchors, pseudo_labels};

fn main() {
    let probs = array![
        [0.92, 0.03, 0.10],
        [0.20, 0.25, 0.22],
        [0.05, 0.71, 0.40],
        [0.10, 0.30, 0.65],
        [0.55, 0.58, 0.02],
    ];
    for alpha in [0.3, 0.6] {
        let labels = pseudo_labels(&probs, alpha);
        println!("α={alpha}: pseudo-labels {labels:?}");
    }

    let source_labels = vec![vec![1, 0, 0, 2, 3, 0]];
    let source_valid = vec![vec![true, true, true, true, true, false]];
    let target_labels = vec![pseudo_labels(&probs, 0.6)];
    let target_valid = vec![vec![true; 5]];
    let groups = group_anchors(&source_labels, &source_valid, &target_labels, &target_valid, 3);
    for (c, (s, t)) in groups.levels[0].source.iter().zip(&groups.levels[0].target).enumerate() {
        let name = if c == 0 { "background".to_string() } else { format!("class {c}") };
        println!("{name:>10}: source rows {s:?}, target rows {t:?}");
    }
}
