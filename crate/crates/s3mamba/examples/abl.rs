//! Scratch ablation pilot (not part of the library surface): efficacy
//! margins for extra seeds, and seed-0 orderings for the decoder/module
//! grids under the restricted-scale recipe.

use s3mamba::data::corpus::generate_image;
use s3mamba::data::sample::DatasetConfig;
use s3mamba::model::ModelConfig;
use s3mamba::train::ablation::{decoder_grid, format_table, module_grid, run_ablation};
use s3mamba::train::eval::eval_set;
use s3mamba::train::{TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).cloned().unwrap_or_else(|| "c6".into());
    let seeds: Vec<u64> = args[2..].iter().filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };

    let imgs: Vec<_> = (0..32).map(|i| generate_image(20260816, i, 96).0).collect();
    let (train_imgs, val_imgs) = imgs.split_at(24);
    let base = ModelConfig { residual_over_bicubic: true, ..ModelConfig::default() };

    match mode.as_str() {
        // Efficacy recipe: full scale range, report x2/x3 margins per seed.
        "c5" => {
            for &seed in &seeds {
                let data = DatasetConfig { seed, ..DatasetConfig::default() };
                let cfg = TrainConfig { seed, val_images: 0, ..TrainConfig::default() };
                let t = Instant::now();
                let mut trainer = Trainer::new(base.clone(), data, cfg).unwrap();
                trainer.run(train_imgs, &[], None).unwrap();
                let (m2, b2) = eval_set(&trainer.model, &trainer.ps, val_imgs, 2.0).unwrap();
                let (m3, b3) = eval_set(&trainer.model, &trainer.ps, val_imgs, 3.0).unwrap();
                println!(
                    "c5 seed {seed}: x2 {m2:.3}/{b2:.3} margin {:+.3} | x3 {m3:.3}/{b3:.3} margin {:+.3} | {:.0?}",
                    m2 - b2,
                    m3 - b3,
                    t.elapsed()
                );
            }
        }
        // Restricted-scale recipe: train U(1, 2.5), evaluate at held-out x3.
        "c6" | "c7" => {
            let data = DatasetConfig { scale_range: [1.0, 2.5], ..DatasetConfig::default() };
            let train = TrainConfig::default();
            let grid = if mode == "c6" {
                decoder_grid(&base)
            } else {
                // Drop "both": identical config to the decoder grid's sssm row.
                module_grid(&base).into_iter().filter(|(n, _)| n != "both").collect()
            };
            let t = Instant::now();
            let rows =
                run_ablation(&grid, &data, &train, &seeds, train_imgs, val_imgs, 2.0, 3.0)
                    .unwrap();
            println!("{}", format_table(&rows));
            for r in &rows {
                println!("{}: per-seed held-out {:?}", r.variant, r.per_seed);
            }
            println!("{mode} total {:.0?}", t.elapsed());
        }
        other => {
            eprintln!("unknown mode {other}");
            std::process::exit(2);
        }
    }
}
