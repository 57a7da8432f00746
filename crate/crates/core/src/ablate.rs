//! Multi-seed ablation grids over loss components, level weights, class
//! conditioning, background masking and baseline methods.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::ConditioningMode;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::map_report;
use crate::inference::predict_dataset;
use crate::training::{fit, FitData, LossFlags, ModelState, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridName {
    Table4,
    LambdaLevels,
    ClassEmb,
    MaskBkg,
    Baselines,
}

impl GridName {
    pub const ALL: [GridName; 5] = [
        GridName::Table4,
        GridName::LambdaLevels,
        GridName::ClassEmb,
        GridName::MaskBkg,
        GridName::Baselines,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GridName::Table4 => "table4",
            GridName::LambdaLevels => "lambda-levels",
            GridName::ClassEmb => "class-emb",
            GridName::MaskBkg => "mask-bkg",
            GridName::Baselines => "baselines",
        }
    }
}

impl std::fmt::Display for GridName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GridName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GridName::ALL.into_iter().find(|g| g.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = GridName::ALL.iter().map(|g| g.as_str()).collect();
            Error::Validation(format!("unknown grid {s:?}; valid grids: {}", names.join(", ")))
        })
    }
}

pub const MASK_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub name: String,
    pub rows: Vec<GridRow>,
    pub seeds: Vec<u64>,
}

fn row(label: impl Into<String>, base: &RunConfig, edit: impl FnOnce(&mut RunConfig)) -> GridRow {
    let mut config = base.clone();
    edit(&mut config);
    GridRow {
        label: label.into(),
        config,
    }
}

/// Label for a loss-flag combination, e.g. `local+bkg`.
pub fn flags_label(f: LossFlags) -> String {
    let parts: Vec<&str> = [(f.local, "local"), (f.global, "global"), (f.bkg, "bkg"), (f.mstn, "mstn")]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n)
        .collect();
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join("+")
    }
}

/// The seven loss-component combinations, in table order.
pub const TABLE4_FLAGS: [LossFlags; 7] = [
    LossFlags::NONE,
    LossFlags {
        global: true,
        ..LossFlags::NONE
    },
    LossFlags {
        bkg: true,
        ..LossFlags::NONE
    },
    LossFlags {
        global: true,
        bkg: true,
        ..LossFlags::NONE
    },
    LossFlags {
        local: true,
        ..LossFlags::NONE
    },
    LossFlags {
        local: true,
        global: true,
        ..LossFlags::NONE
    },
    LossFlags::SADA,
];

/// Expands a named grid around `base`.
pub fn build_grid(name: GridName, base: &RunConfig, seeds: &[u64]) -> AblationGrid {
    let levels = base.model.levels;
    let rows = match name {
        GridName::Table4 => TABLE4_FLAGS
            .iter()
            .map(|f| row(flags_label(*f), base, |c| c.train.loss_flags = *f))
            .collect(),
        GridName::LambdaLevels => {
            let half = levels.div_ceil(2);
            let first: Vec<f64> = (0..levels).map(|l| if l < half { 1.0 } else { 0.0 }).collect();
            let last: Vec<f64> = (0..levels).map(|l| if l >= levels - half { 1.0 } else { 0.0 }).collect();
            vec![
                row("configured", base, |_| {}),
                row("all levels 1", base, |c| c.train.level_weights = vec![1.0; levels]),
                row(format!("first {half} levels 1"), base, |c| c.train.level_weights = first),
                row(format!("last {half} levels 1"), base, |c| c.train.level_weights = last),
            ]
        }
        GridName::ClassEmb => [
            ConditioningMode::Learnable,
            ConditioningMode::OneHot,
            ConditioningMode::RandomFixed,
            ConditioningMode::Sinusoidal,
        ]
        .into_iter()
        .map(|m| {
            let label = serde_json::to_value(m).unwrap().as_str().unwrap().to_string();
            row(label, base, |c| c.model.conditioning = m)
        })
        .collect(),
        GridName::MaskBkg => MASK_FRACTIONS
            .iter()
            .map(|p| {
                row(format!("{}%", (p * 100.0).round()), base, |c| {
                    c.train.loss_flags = LossFlags::SADA;
                    c.predict.mask_background = *p;
                })
            })
            .collect(),
        GridName::Baselines => vec![
            row("source-only", base, |c| {
                c.train.loss_flags = LossFlags::NONE;
                c.train.lambda_sada = 0.0;
            }),
            row("dann", base, |c| c.train.loss_flags = LossFlags::DANN),
            row("mstn", base, |c| c.train.loss_flags = LossFlags::MSTN),
            row("sada", base, |c| c.train.loss_flags = LossFlags::SADA),
        ],
    };
    AblationGrid {
        name: name.to_string(),
        rows,
        seeds: seeds.to_vec(),
    }
}

/// The datasets a grid trains and evaluates on.
#[derive(Debug, Clone, Copy)]
pub struct GridData<'a> {
    pub source_train: &'a Dataset,
    pub target_train: &'a Dataset,
    pub source_val: &'a Dataset,
    pub target_val: &'a Dataset,
}

/// Trained states keyed by the training-relevant part of a cell's config.
/// Rows that differ only in evaluation settings share one training run.
#[derive(Debug, Default)]
pub struct CellCache {
    states: HashMap<String, ModelState>,
}

impl CellCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn key(config: &RunConfig, seed: u64) -> String {
        let mut train = config.train.clone();
        train.seed = seed;
        // Runs without alignment train identically whatever the adversarial settings.
        if !train.alignment_active() {
            let d = TrainConfig::default();
            train.lambda_sada = 0.0;
            train.loss_flags = LossFlags::NONE;
            train.alpha = d.alpha;
            train.mstn_decay = d.mstn_decay;
        }
        serde_json::to_string(&(&config.model, &train)).expect("config serializes")
    }

    /// Trains the cell, or returns the cached state.
    pub fn get_or_train(&mut self, config: &RunConfig, seed: u64, data: &GridData) -> Result<&ModelState> {
        let key = Self::key(config, seed);
        if !self.states.contains_key(&key) {
            let mut train = config.train.clone();
            train.seed = seed;
            let out = fit(
                &config.model,
                &train,
                &FitData {
                    source_train: Some(data.source_train),
                    target_train: Some(data.target_train),
                    source_val: Some(data.source_val),
                    target_val: None,
                },
            )?;
            self.states.insert(key.clone(), out.state);
        }
        Ok(&self.states[&key])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: usize,
    pub label: String,
    pub seed: u64,
    /// Target-val mAP per threshold.
    pub map: Vec<f64>,
    pub avg_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub label: String,
    pub mean_map: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResults {
    pub grid: String,
    pub thresholds: Vec<f64>,
    pub cells: Vec<CellResult>,
}

/// Trains and evaluates every `(row, seed)` cell on the target validation set.
pub fn run_grid(
    grid: &AblationGrid,
    data: &GridData,
    cache: &mut CellCache,
    mut on_cell: impl FnMut(&CellResult),
) -> Result<GridResults> {
    let thresholds = grid
        .rows
        .first()
        .map(|r| r.config.eval.tiou_thresholds.clone())
        .unwrap_or_default();
    let mut cells = Vec::with_capacity(grid.rows.len() * grid.seeds.len());
    for (i, r) in grid.rows.iter().enumerate() {
        r.config.validate()?;
        for &seed in &grid.seeds {
            let state = cache.get_or_train(&r.config, seed, data)?;
            let mut predict = r.config.predict;
            predict.mask_seed = seed;
            let preds = predict_dataset(&state.model, &state.ema, data.target_val, &predict, &r.config.nms)?;
            let report = map_report(&preds, data.target_val, &r.config.eval)?;
            let cell = CellResult {
                row: i,
                label: r.label.clone(),
                seed,
                map: report.map,
                avg_map: report.average,
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok(GridResults {
        grid: grid.name.clone(),
        thresholds,
        cells,
    })
}

impl GridResults {
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.label) {
                out.push(c.label.clone());
            }
        }
        out
    }

    pub fn row_cells(&self, label: &str) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.label == label).collect()
    }

    pub fn summary(&self) -> Vec<RowSummary> {
        self.labels()
            .into_iter()
            .map(|label| {
                let cells = self.row_cells(&label);
                let n = cells.len() as f64;
                let mean = cells.iter().map(|c| c.avg_map).sum::<f64>() / n;
                let var = cells.iter().map(|c| (c.avg_map - mean).powi(2)).sum::<f64>() / n;
                let mean_map = (0..self.thresholds.len())
                    .map(|k| cells.iter().map(|c| c.map[k]).sum::<f64>() / n)
                    .collect();
                RowSummary {
                    label,
                    mean_map,
                    mean,
                    std: var.sqrt(),
                    seeds: cells.len(),
                }
            })
            .collect()
    }

    /// One line per cell: `grid,row,label,seed,avg_map,map@τ...`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["grid".to_string(), "row".into(), "label".into(), "seed".into(), "avg_map".into()];
        header.extend(self.thresholds.iter().map(|t| format!("map@{t}")));
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![
                self.grid.clone(),
                c.row.to_string(),
                c.label.clone(),
                c.seed.to_string(),
                c.avg_map.to_string(),
            ];
            rec.extend(c.map.iter().map(|m| m.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let thresholds: Vec<f64> = headers
            .iter()
            .skip(5)
            .map(|h| h.trim_start_matches("map@").parse().map_err(|_| fmt_err(path, h)))
            .collect::<Result<_>>()?;
        let mut grid = String::new();
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| fmt_err(path, "short row"));
            grid = field(0)?.to_string();
            let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| fmt_err(path, "bad number")) };
            cells.push(CellResult {
                row: num(1)? as usize,
                label: field(2)?.to_string(),
                seed: num(3)? as u64,
                avg_map: num(4)?,
                map: (0..thresholds.len()).map(|k| num(5 + k)).collect::<Result<_>>()?,
            });
        }
        Ok(Self {
            grid,
            thresholds,
            cells,
        })
    }

    /// Text table of per-row means (in mAP points) with the standard deviation
    /// of the average across seeds.
    pub fn render(&self) -> String {
        let summary = self.summary();
        let width = summary.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = write!(s, "{:<width$}", "row");
        for t in &self.thresholds {
            let _ = write!(s, " {:>7}", format!("@{t}"));
        }
        let _ = writeln!(s, " {:>7} {:>6} {:>5}", "Avg", "std", "seeds");
        for r in &summary {
            let _ = write!(s, "{:<width$}", r.label);
            for m in &r.mean_map {
                let _ = write!(s, " {:>7.2}", 100.0 * m);
            }
            let _ = writeln!(s, " {:>7.2} {:>6.2} {:>5}", 100.0 * r.mean, 100.0 * r.std, r.seeds);
        }
        s
    }
}

fn fmt_err(path: &Path, what: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: format!("malformed results file ({what})"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowComparison {
    /// `mean(a) − mean(b)` of the average mAP.
    pub mean_gap: f64,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
}

/// Mean gap and per-seed win counts of row `a` against row `b`.
pub fn compare_rows(results: &GridResults, a: &str, b: &str) -> Result<RowComparison> {
    let ca = results.row_cells(a);
    let cb = results.row_cells(b);
    if ca.is_empty() || cb.is_empty() {
        let missing = if ca.is_empty() { a } else { b };
        return Err(Error::Validation(format!("row {missing:?} not found in grid {}", results.grid)));
    }
    let mean = |cs: &[&CellResult]| cs.iter().map(|c| c.avg_map).sum::<f64>() / cs.len() as f64;
    let mut cmp = RowComparison {
        mean_gap: mean(&ca) - mean(&cb),
        wins_a: 0,
        wins_b: 0,
        ties: 0,
    };
    for x in &ca {
        if let Some(y) = cb.iter().find(|y| y.seed == x.seed) {
            match x.avg_map.partial_cmp(&y.avg_map) {
                Some(std::cmp::Ordering::Greater) => cmp.wins_a += 1,
                Some(std::cmp::Ordering::Less) => cmp.wins_b += 1,
                _ => cmp.ties += 1,
            }
        }
    }
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn results(rows: &[(&str, &[f64])]) -> GridResults {
        let mut cells = Vec::new();
        for (i, (label, vals)) in rows.iter().enumerate() {
            for (s, v) in vals.iter().enumerate() {
                cells.push(CellResult {
                    row: i,
                    label: label.to_string(),
                    seed: s as u64,
                    map: vec![*v],
                    avg_map: *v,
                });
            }
        }
        GridResults {
            grid: "t".into(),
            thresholds: vec![0.5],
            cells,
        }
    }

    #[test]
    fn unaligned_rows_share_a_cache_key() {
        let base = RunConfig::desk();
        let t4 = build_grid(GridName::Table4, &base, &[0]);
        let bl = build_grid(GridName::Baselines, &base, &[0]);
        assert_eq!(CellCache::key(&t4.rows[0].config, 3), CellCache::key(&bl.rows[0].config, 3));
        assert_ne!(CellCache::key(&t4.rows[0].config, 3), CellCache::key(&t4.rows[6].config, 3));
        assert_ne!(CellCache::key(&t4.rows[0].config, 3), CellCache::key(&t4.rows[0].config, 4));
    }

    #[test]
    fn grid_shapes() {
        let base = RunConfig::desk();
        let t4 = build_grid(GridName::Table4, &base, &DEFAULT_SEEDS);
        assert_eq!(t4.rows.len(), 7);
        assert_eq!(t4.rows[0].label, "none");
        assert_eq!(t4.rows[6].label, "local+bkg");
        assert_eq!(build_grid(GridName::LambdaLevels, &base, &[0]).rows.len(), 4);
        let m = build_grid(GridName::MaskBkg, &base, &[0]);
        let fr: Vec<f64> = m.rows.iter().map(|r| r.config.predict.mask_background).collect();
        assert_eq!(fr, MASK_FRACTIONS.to_vec());
        assert!("nope".parse::<GridName>().unwrap_err().to_string().contains("table4"));
    }

    #[test]
    fn mask_rows_share_training() {
        let base = RunConfig::desk();
        let m = build_grid(GridName::MaskBkg, &base, &[0]);
        let k0 = CellCache::key(&m.rows[0].config, 3);
        assert!(m.rows.iter().all(|r| CellCache::key(&r.config, 3) == k0));
        assert_ne!(k0, CellCache::key(&m.rows[0].config, 4));
    }

    #[test]
    fn comparison_examples() {
        let r = results(&[("a", &[0.5, 0.6, 0.7]), ("b", &[0.4, 0.6, 0.8])]);
        let c = compare_rows(&r, "a", "a").unwrap();
        assert_eq!((c.mean_gap, c.wins_a, c.wins_b, c.ties), (0.0, 0, 0, 3));
        let c = compare_rows(&r, "a", "b").unwrap();
        assert!(c.mean_gap.abs() < 1e-12);
        assert_eq!((c.wins_a, c.wins_b, c.ties), (1, 1, 1));
        assert!(compare_rows(&r, "a", "z").is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let r = results(&[("sada", &[0.25, 0.5]), ("none", &[0.125, 0.375])]);
        r.write_csv(&p).unwrap();
        let back = GridResults::read_csv(&p).unwrap();
        assert_eq!(back, r);
        let text = back.render();
        assert!(text.contains("sada") && text.contains("37.50"));
    }
}
