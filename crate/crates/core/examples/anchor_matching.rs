//! Build the anchor pyramid for a short clip and show which anchors each
//! segment claims, with their stride-normalised boundary offsets.

use sada::anchors::{build_grids, decode_offsets, match_anchors, MatchConfig};
use sada::data::SegmentAnnotation;

fn main() -> sada::Result<()> {
    let stride = 0.5;
    let grids = build_grids(32, 3, stride)?;
    let segments = [SegmentAnnotation::new(1.0, 3.0, 1), SegmentAnnotation::new(5.0, 13.0, 2)];
    let m = match_anchors(&grids, &segments, stride, &MatchConfig::default());
    for (grid, level) in grids.iter().zip(&m.levels) {
        println!("level {} (stride {:.1}s, {} anchors)", grid.level, grid.stride_s, grid.len());
        for i in (0..grid.len()).filter(|&i| level.positive_mask[i]) {
            let t = grid.anchor_times[i];
            let (db, de) = (level.offset_target[[i, 0]], level.offset_target[[i, 1]]);
            let (b, e) = decode_offsets(t, (db, de), grid.stride_s)?;
            println!("  anchor {i:>2} t={t:5.2}s class {} offsets ({db:.2}, {de:.2}) -> [{b:.2}, {e:.2}]", level.class_target[i]);
        }
    }
    Ok(())
}
