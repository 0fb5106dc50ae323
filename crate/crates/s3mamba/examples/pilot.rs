//! Scratch pilot run (not part of the library surface): one seed of the
//! toy-profile training recipe, reporting model-vs-bicubic margins.

use s3mamba::data::corpus::generate_image;
use s3mamba::data::sample::DatasetConfig;
use s3mamba::model::ModelConfig;
use s3mamba::train::eval::{eval_image, eval_set};
use s3mamba::train::{TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let imgs: Vec<_> = (0..32).map(|i| generate_image(20260816, i, 96).0).collect();
    let (train_imgs, val_imgs) = imgs.split_at(24);

    let residual = args.get(3).map(|s| s == "res").unwrap_or(false);
    let model = ModelConfig { residual_over_bicubic: residual, ..ModelConfig::default() };
    let data = DatasetConfig { seed, ..DatasetConfig::default() };
    let cfg = TrainConfig { epochs, seed, val_images: 2, ..TrainConfig::default() };

    let t = Instant::now();
    let mut trainer = Trainer::new(model, data, cfg).unwrap();
    let run = trainer.run(train_imgs, val_imgs, None).unwrap();
    println!("trained {} epochs in {:.1?}", epochs, t.elapsed());
    if let Some(log) = run.logs.last() {
        println!("last epoch: loss {:.6} val2 {:.3} val3 {:.3}", log.loss, log.psnr_x2, log.psnr_x3);
    }

    for scale in [2.0, 3.0] {
        for (k, img) in val_imgs.iter().enumerate() {
            let (_, entry) = generate_image(20260816, 24 + k, 96);
            let r = eval_image(&trainer.model, &trainer.ps, img, scale).unwrap();
            println!(
                "  x{scale} val{k} {:9} model {:6.2}  bicubic {:6.2}  margin {:+5.2}",
                entry.kind, r.model.psnr_rgb, r.bicubic.psnr_rgb,
                r.model.psnr_rgb - r.bicubic.psnr_rgb
            );
        }
        let (m, b) = eval_set(&trainer.model, &trainer.ps, val_imgs, scale).unwrap();
        println!(
            "x{scale}: model {m:.3} dB  bicubic {b:.3} dB  margin {:+.3} dB",
            m - b
        );
    }
}
