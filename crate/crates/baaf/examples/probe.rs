use baaf::ablation::{format_table, run_ladder, AblationConfig};
use baaf::datagen::SynthConfig;
use baaf::training::TrainConfig;
use std::time::Instant;

fn main() {
    let cfg = AblationConfig {
        synth: SynthConfig {
            count: 36,
            size: 128,
            seed: 424242,
            speckle: 0.5,
            blur_sigma: 1.5,
            background_mean: 0.60,
            lesion_mean: 0.32,
            radius_frac: (0.10, 0.28),
            ..SynthConfig::default()
        },
        divisor: 8,
        train: TrainConfig {
            learning_rate: 2e-3,
            epochs: 24,
            patience: 8,
            batch_size: 4,
            ..TrainConfig::desk()
        },
        seeds: vec![1, 2, 3],
        test_folds: 3,
        threads: 2,
    };
    let t0 = Instant::now();
    let table = run_ladder::<f32>(&cfg).unwrap();
    println!("{}", format_table(&table));
    println!("elapsed: {:?}", t0.elapsed());
    for r in &table.runs {
        println!("{} seed {}: test dice {:.4}, best val {:.4}, epochs {}",
            r.variant.name(), r.seed,
            r.report.summary.get("dice").map(|m| m.0).unwrap_or(f64::NAN),
            r.best_val_dice, r.epochs_run);
    }
}
