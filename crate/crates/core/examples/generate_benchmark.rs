//! Generate a shifted source/target benchmark, print per-split summaries and
//! write it to disk in the feature/annotation format.
//!
//! cargo run --release --example generate_benchmark -- [out_dir]

use sada::data::{Domain, Split};
use sada::synthbench::{class_means, generate_splits, summarize, write_benchmark, BenchSpec, ShiftSpec};

fn main() -> sada::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("sada_bench"));
    let spec = BenchSpec::default();
    let shift = ShiftSpec::default();
    let bench = generate_splits(&spec, &shift)?;
    for domain in [Domain::Source, Domain::Target] {
        for split in [Split::Train, Split::Val] {
            println!("{domain}/{split}\n{}", summarize(bench.split(domain, split)));
        }
    }

    // Distance between source and target class means shows the size of the shift.
    let s = class_means(&bench.source_train);
    let t = class_means(&bench.target_train);
    for (c, (ms, _)) in &s {
        if let Some((mt, _)) = t.get(c) {
            let d = (ms - mt).mapv(|x| x * x).sum().sqrt();
            println!("class {c}: |mean_S - mean_T| = {d:.3}");
        }
    }

    write_benchmark(&bench, &spec, &shift, &out)?;
    println!("written to {}", out.display());
    Ok(())
}
