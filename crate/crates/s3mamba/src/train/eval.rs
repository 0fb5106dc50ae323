//! Shared evaluation protocol: downsample a ground-truth image, reconstruct
//! with the model and with plain bicubic, and score both at the same shave.

use crate::data::resample::bicubic_resample;
use crate::metrics::{report, shave_for_scale, MetricReport};
use crate::model::S3Model;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Streaming chunk size for full-grid decodes.
pub const EVAL_CHUNK: usize = 1024;

/// Reconstructions for one (image, scale) pair, before scoring.
pub struct Recon {
    /// LR input fed to both methods.
    pub lr: Tensor,
    /// Model reconstruction.
    pub sr: Tensor,
    /// Matching top-left GT crop.
    pub gt_crop: Tensor,
    /// Bicubic reconstruction of the same LR at the same size.
    pub bicubic: Tensor,
}

/// Scores for one (image, scale) pair.
pub struct EvalResult {
    pub model: MetricReport,
    pub bicubic: MetricReport,
    /// LR input actually fed to both methods.
    pub lr: Tensor,
    /// Model reconstruction (kept for optional dumping).
    pub sr: Tensor,
}

/// Downsample `gt` by `scale` (LR dims ⌊h/s⌋×⌊w/s⌋), reconstruct with the
/// model at (⌊lr_h·s⌋, ⌊lr_w·s⌋) and with bicubic, and crop GT to match.
pub fn reconstruct(model: &S3Model, ps: &ParamStore, gt: &Tensor, scale: f64) -> Result<Recon> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArg(format!("scale must be positive, got {scale}")));
    }
    let (h, w) = (gt.shape[2], gt.shape[3]);
    let lr_h = (h as f64 / scale).floor() as usize;
    let lr_w = (w as f64 / scale).floor() as usize;
    if lr_h < 4 || lr_w < 4 {
        return Err(Error::InvalidArg(format!(
            "image {h}x{w} too small to downsample by {scale}"
        )));
    }
    let lr = bicubic_resample(gt, lr_h, lr_w);
    let sr = model.upscale(ps, &lr, scale, EVAL_CHUNK);
    let (out_h, out_w) = (sr.shape[2], sr.shape[3]);
    let gt_crop = super::crop_top_left(gt, out_h, out_w);
    let bicubic = bicubic_resample(&lr, out_h, out_w);
    Ok(Recon { lr, sr, gt_crop, bicubic })
}

/// Full scoring (both PSNR modes + SSIM) with a ⌈s⌉-pixel border shave.
pub fn eval_image(model: &S3Model, ps: &ParamStore, gt: &Tensor, scale: f64) -> Result<EvalResult> {
    let r = reconstruct(model, ps, gt, scale)?;
    let shave = shave_for_scale(scale);
    Ok(EvalResult {
        model: report(&r.sr, &r.gt_crop, shave)?,
        bicubic: report(&r.bicubic, &r.gt_crop, shave)?,
        lr: r.lr,
        sr: r.sr,
    })
}

/// Mean model / bicubic PSNR(RGB) over a set of images at one scale.
pub fn eval_set(
    model: &S3Model,
    ps: &ParamStore,
    imgs: &[Tensor],
    scale: f64,
) -> Result<(f64, f64)> {
    assert!(!imgs.is_empty(), "empty evaluation set");
    let mut m = 0.0;
    let mut b = 0.0;
    for img in imgs {
        let r = eval_image(model, ps, img, scale)?;
        m += r.model.psnr_rgb;
        b += r.bicubic.psnr_rgb;
    }
    Ok((m / imgs.len() as f64, b / imgs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::generate_image;
    use crate::data::rng::SplitMix64;
    use crate::model::ModelConfig;

    fn tiny() -> (ParamStore, S3Model) {
        let cfg = ModelConfig {
            d_model: 8,
            n_state: 4,
            res_blocks: 1,
            gfe_blocks: 1,
            ..ModelConfig::default()
        };
        let mut ps = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let model = S3Model::new(&mut ps, &cfg, &mut rng).unwrap();
        (ps, model)
    }

    #[test]
    fn eval_shapes_follow_the_floor_rule() {
        let (ps, model) = tiny();
        let (img, _) = generate_image(4, 0, 33);
        let r = eval_image(&model, &ps, &img, 2.5).unwrap();
        // 33/2.5 → 13 LR, 13·2.5 → 32 output, GT cropped to 32.
        assert_eq!(r.lr.shape, vec![1, 3, 13, 13]);
        assert_eq!(r.sr.shape, vec![1, 3, 32, 32]);
        assert_eq!(r.model.shave, 3);
        assert!(r.model.psnr_rgb.is_finite() && r.bicubic.psnr_rgb.is_finite());
    }

    #[test]
    fn fresh_model_loses_to_bicubic_but_everything_is_finite() {
        // An untrained model outputs constant 0.5 everywhere, so bicubic must
        // win on any structured image; this pins the baseline wiring.
        let (ps, model) = tiny();
        let (img, _) = generate_image(5, 0, 32);
        let r = eval_image(&model, &ps, &img, 2.0).unwrap();
        assert!(r.bicubic.psnr_rgb > r.model.psnr_rgb, "bicubic must beat a constant image");
        assert!(r.model.ssim.abs() <= 1.0);
    }

    #[test]
    fn invalid_scales_are_rejected() {
        let (ps, model) = tiny();
        let (img, _) = generate_image(4, 0, 32);
        assert!(eval_image(&model, &ps, &img, 0.0).is_err());
        assert!(eval_image(&model, &ps, &img, -1.0).is_err());
        assert!(eval_image(&model, &ps, &img, 10.0).is_err(), "LR would be below 4 px");
    }
}
