//! Run a reduced ablation grid (few epochs, two seeds) and render the result
//! table with a pairwise row comparison.
//!
//! cargo run --release --example ablation_grid -- [grid]

use sada::ablate::{build_grid, compare_rows, run_grid, CellCache, GridData, GridName};
use sada::config::RunConfig;
use sada::synthbench::{generate_splits, BenchSpec, ShiftSpec};

fn main() -> sada::Result<()> {
    let name: GridName = std::env::args().nth(1).as_deref().unwrap_or("baselines").parse()?;
    let bench = generate_splits(&BenchSpec::default(), &ShiftSpec::default())?;
    let mut base = RunConfig::desk();
    base.train.epochs = 8;
    let grid = build_grid(name, &base, &[0, 1]);
    let data = GridData {
        source_train: &bench.source_train,
        target_train: &bench.target_train,
        source_val: &bench.source_val,
        target_val: &bench.target_val,
    };
    let mut cache = CellCache::new();
    let results = run_grid(&grid, &data, &mut cache, |c| {
        println!("  {} seed {}: avg mAP {:.4}", c.label, c.seed, c.avg_map);
    })?;
    println!("{}", results.render());
    println!("{} models trained for {} cells", cache.len(), results.cells.len());
    let labels = results.labels();
    if labels.len() >= 2 {
        let (a, b) = (&labels[labels.len() - 1], &labels[0]);
        let c = compare_rows(&results, a, b)?;
        println!("{a} vs {b}: {:+.2} points, wins {}-{} ({} ties)", 100.0 * c.mean_gap, c.wins_a, c.wins_b, c.ties);
    }
    Ok(())
}
