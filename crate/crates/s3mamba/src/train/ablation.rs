//! Ablation harness: train architecture variants under identical data
//! streams and seeds, then compare held-out PSNR. Variants differ only in
//! the switched component.

use super::{eval::eval_set, TrainConfig, Trainer};
use crate::data::sample::DatasetConfig;
use crate::model::ModelConfig;
use crate::tensor::Tensor;
use crate::Result;

/// One comparison row: medians over the seed set.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub param_count: usize,
    /// Median PSNR(RGB) at the in-range scale.
    pub psnr_in: f64,
    /// Median PSNR(RGB) at the held-out scale.
    pub psnr_held_out: f64,
    /// Per-seed held-out PSNR, in seed order.
    pub per_seed: Vec<f64>,
}

/// The decoder comparison: same trunk, decoder ∈ {mlp, ssm, sssm}.
pub fn decoder_grid(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    ["mlp", "ssm", "sssm"]
        .iter()
        .map(|k| (k.to_string(), ModelConfig { decoder: k.to_string(), ..base.clone() }))
        .collect()
}

/// The module comparison: global branch and attention branch on/off.
pub fn module_grid(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    [
        ("none", false, false),
        ("sfatt", false, true),
        ("gfe", true, false),
        ("both", true, true),
    ]
    .iter()
    .map(|(name, gfe, sfatt)| {
        (
            name.to_string(),
            ModelConfig { use_gfe: *gfe, use_sfatt: *sfatt, ..base.clone() },
        )
    })
    .collect()
}

/// Median of a non-empty slice.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Train every variant for every seed with identical data streams, then
/// report per-variant medians at `in_scale` and `held_out_scale`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    variants: &[(String, ModelConfig)],
    data: &DatasetConfig,
    train: &TrainConfig,
    seeds: &[u64],
    train_imgs: &[Tensor],
    val_imgs: &[Tensor],
    in_scale: f64,
    held_out_scale: f64,
) -> Result<Vec<AblationRow>> {
    assert!(!seeds.is_empty(), "need at least one seed");
    let mut rows = Vec::with_capacity(variants.len());
    for (name, model_cfg) in variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut per_seed_in = Vec::with_capacity(seeds.len());
        let mut param_count = 0;
        for &seed in seeds {
            // Same seed drives both init and the sample stream so every
            // variant sees exactly the same batches.
            let d = DatasetConfig { seed, ..data.clone() };
            let t = TrainConfig { seed, val_images: 0, ..train.clone() };
            let mut trainer = Trainer::new(model_cfg.clone(), d, t)?;
            param_count = trainer.ps.numel();
            trainer.run(train_imgs, &[], None)?;
            let (held, _) = eval_set(&trainer.model, &trainer.ps, val_imgs, held_out_scale)?;
            let (inr, _) = eval_set(&trainer.model, &trainer.ps, val_imgs, in_scale)?;
            per_seed.push(held);
            per_seed_in.push(inr);
        }
        rows.push(AblationRow {
            variant: name.clone(),
            param_count,
            psnr_in: median(&per_seed_in),
            psnr_held_out: median(&per_seed),
            per_seed,
        });
    }
    Ok(rows)
}

/// Render rows as an aligned text table (used by logs and the CLI).
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant      params  psnr_in  psnr_held_out\n");
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:>6}  {:>7.3}  {:>13.3}\n",
            r.variant, r.param_count, r.psnr_in, r.psnr_held_out
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::generate_image;

    #[test]
    fn grids_flip_exactly_the_intended_switches() {
        let base = ModelConfig::default();
        let dec = decoder_grid(&base);
        assert_eq!(dec.len(), 3);
        for (name, cfg) in &dec {
            assert_eq!(&cfg.decoder, name);
            let mut reset = cfg.clone();
            reset.decoder = base.decoder.clone();
            assert_eq!(reset, base, "decoder grid must only change the decoder");
        }
        let modules = module_grid(&base);
        assert_eq!(modules.len(), 4);
        assert_eq!(modules[0].1.use_gfe, false);
        assert_eq!(modules[0].1.use_sfatt, false);
        assert_eq!(modules[3].1.use_gfe, true);
        assert_eq!(modules[3].1.use_sfatt, true);
        for (_, cfg) in &modules {
            let mut reset = cfg.clone();
            reset.use_gfe = base.use_gfe;
            reset.use_sfatt = base.use_sfatt;
            assert_eq!(reset, base, "module grid must only change the two switches");
        }
    }

    #[test]
    fn median_handles_odd_and_even_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[5.0]), 5.0);
    }

    #[test]
    fn micro_ablation_is_deterministic_and_finite() {
        let base = ModelConfig {
            d_model: 8,
            n_state: 4,
            res_blocks: 1,
            gfe_blocks: 1,
            ..ModelConfig::default()
        };
        let data = DatasetConfig {
            lr_patch: 8,
            scale_range: [1.0, 2.0],
            queries_per_patch: 8,
            ..DatasetConfig::default()
        };
        let train = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
        let imgs: Vec<Tensor> = (0..3).map(|i| generate_image(31, i, 24).0).collect();
        let variants = decoder_grid(&base);
        let run = || {
            run_ablation(&variants, &data, &train, &[1], &imgs[..2], &imgs[2..], 2.0, 3.0)
                .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.psnr_held_out, y.psnr_held_out, "identical seeds → identical tables");
            assert!(x.psnr_held_out.is_finite() && x.psnr_in.is_finite());
            assert!(x.param_count > 0);
        }
        let table = format_table(&a);
        assert!(table.contains("sssm") && table.contains("psnr_held_out"));
    }
}
