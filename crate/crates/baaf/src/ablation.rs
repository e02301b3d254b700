//! Ablation ladder: the four variants trained on the same data with
//! shared folds and seeds, compared on held-out Dice/Jaccard/HD with
//! significance against the full attention variant.

use crate::datagen::{generate_synthetic, SegSample, SynthConfig};
use crate::error::Result;
use crate::metrics::{self, MetricReport};
use crate::network::{build, NetworkSpec, Variant};
use crate::seeds::derive_seed;
use crate::training::{fit, kfold_split, TrainConfig};
use crate::tensor::Elem;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub synth: SynthConfig,
    pub divisor: usize,
    /// Training settings shared by every run; the per-run seed comes from
    /// `seeds` below.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// The held-out fold: fold 0 of a K-way plan over the dataset.
    pub test_folds: usize,
    pub threads: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            synth: SynthConfig {
                count: 30,
                size: 128,
                seed: 424242,
                ..SynthConfig::default()
            },
            divisor: 8,
            train: TrainConfig {
                epochs: 12,
                patience: 4,
                batch_size: 4,
                ..TrainConfig::desk()
            },
            seeds: vec![1, 2, 3],
            test_folds: 3,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub report: MetricReport,
    pub best_val_dice: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone)]
pub struct VariantRow {
    pub variant: Variant,
    /// metric → (mean, std) over seeds.
    pub metrics: BTreeMap<String, (f64, f64)>,
    /// Two-sided Welch p-value of per-seed Dice against deep15_baaf.
    pub p_dice_vs_baaf: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<VariantRow>,
    pub runs: Vec<RunOutcome>,
}

impl AblationTable {
    pub fn mean_dice(&self, variant: Variant) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .and_then(|r| r.metrics.get("dice"))
            .map(|(m, _)| *m)
    }
}

fn run_one<T: Elem>(
    variant: Variant,
    seed: u64,
    divisor: usize,
    size: usize,
    train_pool: &[SegSample<T>],
    test: &[SegSample<T>],
    train_cfg: &TrainConfig,
) -> Result<RunOutcome> {
    let spec = NetworkSpec::new(variant, divisor, (size, size));
    let cfg = TrainConfig {
        seed: derive_seed(seed, 0xB100D),
        ..train_cfg.clone()
    };
    let model = build::<T>(&spec, cfg.seed)?;
    let fitted = fit(model, train_pool, &cfg)?;
    let mut model = fitted.model;
    let report = metrics::evaluate(
        &mut model,
        test,
        0.5,
        cfg.batch_size,
        &format!("{}-seed{}", variant.name(), seed),
    )?;
    Ok(RunOutcome {
        variant,
        seed,
        report,
        best_val_dice: fitted.best_val_dice,
        epochs_run: fitted.history.len(),
    })
}

/// Train every variant across the configured seeds with a shared
/// train/test split and aggregate mean ± std per metric. Each run is
/// self-contained and deterministically seeded, so the outcome does not
/// depend on the thread count.
pub fn run_ladder<T: Elem>(cfg: &AblationConfig) -> Result<AblationTable> {
    let samples: Vec<SegSample<T>> = generate_synthetic(&cfg.synth)?;
    let plan = kfold_split(samples.len(), cfg.test_folds, cfg.synth.seed)?;
    let holdout: std::collections::BTreeSet<usize> = plan.folds[0].iter().copied().collect();
    let test: Vec<SegSample<T>> = plan.folds[0].iter().map(|&i| samples[i].clone()).collect();
    let train_pool: Vec<SegSample<T>> = samples
        .iter()
        .enumerate()
        .filter(|(i, _)| !holdout.contains(i))
        .map(|(_, s)| s.clone())
        .collect();

    let jobs: Vec<(Variant, u64)> = Variant::all()
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| crate::error::Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<RunOutcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(variant, seed)| {
                run_one(
                    variant,
                    seed,
                    cfg.divisor,
                    cfg.synth.size,
                    &train_pool,
                    &test,
                    &cfg.train,
                )
            })
            .collect()
    });
    let mut runs = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        runs.push(o?);
    }

    let seed_metric = |variant: Variant, key: &str| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.report.summary.get(key).map(|(m, _)| *m))
            .collect()
    };
    let baaf_dice = seed_metric(Variant::Deep15Baaf, "dice");

    let mut rows = Vec::new();
    for variant in Variant::all() {
        let mut m = BTreeMap::new();
        for key in ["dice", "jaccard", "hd"] {
            let values = seed_metric(variant, key);
            if !values.is_empty() {
                m.insert(key.to_string(), metrics::mean_std(&values));
            }
        }
        let p = if variant == Variant::Deep15Baaf {
            None
        } else {
            let own = seed_metric(variant, "dice");
            metrics::welch_ttest(&baaf_dice, &own).ok().map(|r| r.p)
        };
        rows.push(VariantRow {
            variant,
            metrics: m,
            p_dice_vs_baaf: p,
        });
    }
    Ok(AblationTable { rows, runs })
}

/// Plain-text table mirroring the reported layout: one variant per row,
/// mean ± std per metric, p-value against the full variant.
pub fn format_table(table: &AblationTable) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>16} {:>16} {:>16} {:>12}\n",
        "variant", "dice", "jaccard", "hd", "p(dice)"
    ));
    for row in &table.rows {
        let cell = |key: &str| -> String {
            row.metrics
                .get(key)
                .map(|(m, s)| format!("{m:.4}±{s:.4}"))
                .unwrap_or_else(|| "—".to_string())
        };
        let p = row
            .p_dice_vs_baaf
            .map(|p| format!("{p:.3e}"))
            .unwrap_or_else(|| "—".to_string());
        out.push_str(&format!(
            "{:<14} {:>16} {:>16} {:>16} {:>12}\n",
            row.variant.name(),
            cell("dice"),
            cell("jaccard"),
            cell("hd"),
            p
        ));
    }
    out
}

pub fn write_table_csv(table: &AblationTable, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "variant,dice_mean,dice_std,jaccard_mean,jaccard_std,hd_mean,hd_std,p_dice_vs_baaf"
    )?;
    for row in &table.rows {
        let get = |k: &str, i: usize| {
            row.metrics
                .get(k)
                .map(|ms| format!("{:.6}", if i == 0 { ms.0 } else { ms.1 }))
                .unwrap_or_default()
        };
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            row.variant.name(),
            get("dice", 0),
            get("dice", 1),
            get("jaccard", 0),
            get("jaccard", 1),
            get("hd", 0),
            get("hd", 1),
            row.p_dice_vs_baaf
                .map(|p| format!("{p:.6e}"))
                .unwrap_or_default()
        )?;
    }
    Ok(())
}
