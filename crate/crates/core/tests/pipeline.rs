use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use sada::cli;
use sada::config::RunConfig;
use sada::data::{interleave_schedule, pad_or_crop, windows};
use sada::inference::predict_dataset;
use sada::synthbench::{generate_splits, BenchSpec, ShiftSpec};
use sada::training::{load_checkpoint, save_checkpoint, train_step, ModelState, TrainConfig};

fn run_cli(args: &[&str]) -> i32 {
    cli::main_with_args(std::iter::once("sada").chain(args.iter().copied()))
}

#[test]
fn checkpoint_roundtrip_resumes_identically() {
    let bench = generate_splits(
        &BenchSpec {
            videos_per_domain: 4,
            val_videos_per_domain: 2,
            ..BenchSpec::default()
        },
        &ShiftSpec::default(),
    )
    .unwrap();
    let run = RunConfig::desk();
    let cfg = TrainConfig {
        lambda_sada: 0.5,
        ..run.train.clone()
    };
    let mut state = ModelState::new(&run.model, 3, 1, cfg.mstn_decay).unwrap();
    let s: Vec<_> = bench.source_train.records.iter().take(2).collect();
    let t: Vec<_> = bench.target_train.records.iter().take(2).collect();
    train_step(&mut state, &s, &t, &cfg, 1e-3).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.sadc");
    save_checkpoint(&state, Some(&cfg), &path).unwrap();
    let (mut back, stored) = load_checkpoint(&path).unwrap();
    assert_eq!(stored.as_ref(), Some(&cfg));
    assert_eq!(back.step, state.step);
    assert_eq!(back.params.checksum(), state.params.checksum());
    assert_eq!(back.ema.checksum(), state.ema.checksum());

    let a = predict_dataset(&state.model, &state.ema, &bench.target_val, &run.predict, &run.nms).unwrap();
    let b = predict_dataset(&back.model, &back.ema, &bench.target_val, &run.predict, &run.nms).unwrap();
    assert_eq!(a, b);

    // Optimizer moments and centroids survive too, so the next step matches.
    let ma = train_step(&mut state, &s, &t, &cfg, 1e-3).unwrap();
    let mb = train_step(&mut back, &s, &t, &cfg, 1e-3).unwrap();
    assert_eq!(ma.task_loss.to_bits(), mb.task_loss.to_bits());
    assert_eq!(state.params.checksum(), back.params.checksum());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("out");
    assert_eq!(run_cli(&["train", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
    assert_eq!(run_cli(&["ablate", "--grid", "bogus", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
    assert_eq!(run_cli(&["frobnicate"]), 1);
    assert_eq!(run_cli(&["--help"]), 0);

    let bench = dir.path().join("bench");
    let b = bench.to_str().unwrap();
    assert_eq!(run_cli(&["gen-bench", "--videos", "3", "--val-videos", "2", "--dim", "8", "--out", b]), 0);
    // Feature width 8 does not match the preset's input width.
    assert_eq!(run_cli(&["train", "--data", b, "--out", out.to_str().unwrap(), "--epochs", "1"]), 1);
}

fn collect_files(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(std::path::PathBuf, Vec<u8>)>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            out.push((p.strip_prefix(root).unwrap().to_owned(), std::fs::read(&p).unwrap()));
        }
    }
}

#[test]
fn gen_bench_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut listings = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        assert_eq!(run_cli(&["gen-bench", "--videos", "3", "--val-videos", "2", "--seed", "4", "--out", out.to_str().unwrap()]), 0);
        let mut files = Vec::new();
        collect_files(&out, &out, &mut files);
        files.sort();
        listings.push(files);
    }
    assert!(!listings[0].is_empty());
    assert_eq!(listings[0], listings[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pad_or_crop_keeps_a_contiguous_prefix(t in 1usize..200, t_max in 1usize..96, training: bool, seed: u64) {
        let f = 3;
        let x = Array2::from_shape_fn((t, f), |(i, j)| (i * f + j) as f32);
        let p = pad_or_crop(&x, t_max, training, seed);
        let keep = t.min(t_max);
        prop_assert_eq!(p.features.dim(), (t_max, f));
        prop_assert_eq!(p.valid_mask.iter().filter(|m| **m).count(), keep);
        prop_assert!(p.valid_mask[..keep].iter().all(|m| *m));
        prop_assert!(p.crop_start + keep <= t);
        if !training {
            prop_assert_eq!(p.crop_start, 0);
        }
        for i in 0..t_max {
            for j in 0..f {
                let want = if i < keep { x[[p.crop_start + i, j]] as f64 } else { 0.0 };
                prop_assert_eq!(p.features[[i, j]], want);
            }
        }
    }

    #[test]
    fn evaluation_windows_tile_the_sequence(t in 1usize..500, t_max in 1usize..128) {
        let w = windows(t, t_max);
        prop_assert_eq!(w[0], 0);
        prop_assert!(w.windows(2).all(|p| p[1] - p[0] == t_max));
        prop_assert!(*w.last().unwrap() < t && w.last().unwrap() + t_max >= t);
    }

    #[test]
    fn interleaving_visits_the_larger_domain_once(ns in 1usize..30, nt in 1usize..30, batch in 1usize..5, seed: u64) {
        let plan = interleave_schedule(ns, nt, batch, seed).unwrap();
        let (large, small) = (ns.max(nt), ns.min(nt));
        let pick = |b: &sada::data::DomainBatch| if ns >= nt { b.source.clone() } else { b.target.clone() };
        let other = |b: &sada::data::DomainBatch| if ns >= nt { b.target.clone() } else { b.source.clone() };
        let mut seen: Vec<usize> = plan.iter().flat_map(pick).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..large).collect::<Vec<_>>());
        prop_assert!(plan.iter().all(|b| b.source.len() == b.target.len() && !b.source.is_empty()));
        let covered: BTreeSet<usize> = plan.iter().flat_map(other).collect();
        prop_assert!(covered.iter().all(|i| *i < small));
        prop_assert_eq!(covered.len(), small.min(large));
    }
}
