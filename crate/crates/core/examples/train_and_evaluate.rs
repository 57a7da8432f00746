//! Train a source-only detector and a semantically aligned one on the same
//! shifted benchmark, then compare their target-validation mAP tables.
//!
//! cargo run --release --example train_and_evaluate -- [epochs]

use sada::config::RunConfig;
use sada::evaluation::map_report;
use sada::inference::predict_dataset;
use sada::synthbench::{generate_splits, BenchSpec, ShiftSpec};
use sada::training::{fit, FitData, LossFlags, TrainConfig};

fn main() -> sada::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let bench = generate_splits(&BenchSpec::default(), &ShiftSpec::default())?;
    let run = RunConfig::desk();
    let data = FitData {
        source_train: Some(&bench.source_train),
        target_train: Some(&bench.target_train),
        source_val: Some(&bench.source_val),
        target_val: None,
    };
    for (name, flags, lambda) in [("source-only", LossFlags::NONE, 0.0), ("sada", LossFlags::SADA, run.train.lambda_sada)] {
        let cfg = TrainConfig {
            epochs,
            loss_flags: flags,
            lambda_sada: lambda,
            ..run.train.clone()
        };
        let out = fit(&run.model, &cfg, &data)?;
        let last = out.log.last().expect("at least one epoch");
        println!(
            "{name}: {} epochs, task loss {:.4}, alignment loss {:.4}",
            out.log.len(),
            last.task_loss,
            last.sada_loss
        );
        for (label, ds) in [("source val", &bench.source_val), ("target val", &bench.target_val)] {
            let preds = predict_dataset(&out.state.model, &out.state.ema, ds, &run.predict, &run.nms)?;
            let report = map_report(&preds, ds, &run.eval)?;
            println!("{label}\n{report}");
        }
    }
    Ok(())
}
