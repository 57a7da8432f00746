//! Save and reload a checkpoint, check the reloaded EMA weights predict the
//! same mAP, and dump per-anchor embeddings for offline projection.
//!
//! cargo run --release --example checkpoint_and_embeddings -- [out_dir]

use sada::config::RunConfig;
use sada::synthbench::{generate_splits, BenchSpec, ShiftSpec};
use sada::training::{dump_embeddings, ema_map, fit, load_checkpoint, save_checkpoint, FitData, TrainConfig};

fn main() -> sada::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("sada_ckpt"));
    std::fs::create_dir_all(&out).expect("output directory is writable");
    let spec = BenchSpec {
        videos_per_domain: 12,
        val_videos_per_domain: 4,
        ..BenchSpec::default()
    };
    let bench = generate_splits(&spec, &ShiftSpec::default())?;
    let run = RunConfig::desk();
    let cfg = TrainConfig {
        epochs: 5,
        ..run.train.clone()
    };
    let trained = fit(
        &run.model,
        &cfg,
        &FitData {
            source_train: Some(&bench.source_train),
            target_train: Some(&bench.target_train),
            source_val: Some(&bench.source_val),
            target_val: None,
        },
    )?
    .state;

    let ckpt = out.join("checkpoint.sadc");
    save_checkpoint(&trained, Some(&cfg), &ckpt)?;
    let (restored, stored_cfg) = load_checkpoint(&ckpt)?;
    println!("checkpoint at step {}, config stored: {}", restored.step, stored_cfg.is_some());
    println!(
        "target-val mAP before {:.4}, after reload {:.4}",
        ema_map(&trained, &bench.target_val)?,
        ema_map(&restored, &bench.target_val)?
    );

    let csv = out.join("embeddings.csv");
    dump_embeddings(&restored, &[&bench.source_val, &bench.target_val], cfg.alpha, &csv)?;
    println!("embeddings written to {}", csv.display());
    Ok(())
}
