//! Scratch timing probe (not part of the library surface).

use s3mamba::data::corpus::generate_image;
use s3mamba::data::sample::{make_sample, sample_rng, DatasetConfig};
use s3mamba::model::ModelConfig;
use s3mamba::train::{TrainConfig, Trainer};
use s3mamba::Graph;
use std::time::Instant;

fn best<F: FnMut() -> u128>(reps: usize, mut f: F) -> f64 {
    let mut b = u128::MAX;
    for _ in 0..reps {
        b = b.min(f());
    }
    b as f64 / 1000.0
}

fn main() {
    let model = ModelConfig::default();
    let data = DatasetConfig { seed: 1, ..DatasetConfig::default() };
    let cfg = TrainConfig { epochs: 2, val_images: 2, ..TrainConfig::default() };
    let img = generate_image(40, 0, 96).0;
    let mut trainer = Trainer::new(model, data, cfg).unwrap();
    let pair = make_sample(&img, &trainer.data_cfg, &mut sample_rng(1, 0, 0)).unwrap();

    let fusion_fwd = best(5, || {
        let t = Instant::now();
        let mut g = Graph::new();
        let p = trainer.ps.bind(&mut g);
        let lr_var = g.constant(pair.lr.clone());
        let _ = trainer.model.fusion_features(&mut g, &p, lr_var, pair.scale);
        t.elapsed().as_micros()
    });
    let full_fwd = best(5, || {
        let t = Instant::now();
        let mut g = Graph::new();
        let p = trainer.ps.bind(&mut g);
        let pred = trainer.model.forward(&mut g, &p, &pair.lr, &pair.coords, pair.scale);
        let tgt = g.constant(pair.targets.clone());
        let _ = g.l1_loss(pred, tgt);
        t.elapsed().as_micros()
    });
    let fwd_bwd = best(5, || {
        let t = Instant::now();
        let mut g = Graph::new();
        let p = trainer.ps.bind(&mut g);
        let pred = trainer.model.forward(&mut g, &p, &pair.lr, &pair.coords, pair.scale);
        let tgt = g.constant(pair.targets.clone());
        let loss = g.l1_loss(pred, tgt);
        let _ = g.backward(loss);
        t.elapsed().as_micros()
    });
    println!(
        "fusion fwd {fusion_fwd:.1} ms | full fwd {full_fwd:.1} ms (decoder {:.1}) | fwd+bwd {fwd_bwd:.1} ms (bwd {:.1})",
        full_fwd - fusion_fwd,
        fwd_bwd - full_fwd
    );

    // Whole training step, batch of 8 (the criterion-5 unit of work).
    let imgs: Vec<_> = (0..8).map(|i| generate_image(40, i, 96).0).collect();
    let batch: Vec<_> = (0..8)
        .map(|k| make_sample(&imgs[k], &trainer.data_cfg, &mut sample_rng(1, 0, k as u64)).unwrap())
        .collect();
    let step = best(3, || {
        let t = Instant::now();
        trainer.train_step(&batch, 1e-4, 0, 0).unwrap();
        t.elapsed().as_micros()
    });
    println!("train_step(8): {step:.1} ms  → epoch(3 batches) ≈ {:.2} s → 100 epochs ≈ {:.1} min", 3.0 * step / 1000.0, 3.0 * step / 1000.0 * 100.0 / 60.0);
}
