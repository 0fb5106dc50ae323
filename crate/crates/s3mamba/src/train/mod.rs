//! Training loop: L1 loss over sampled query batches, Adam with stepwise
//! learning-rate halving, per-epoch CSV logging, deterministic sample
//! streams, and bit-exact checkpoint/resume.

pub mod ablation;
pub mod checkpoint;
pub mod eval;

use crate::adam::AdamState;
use crate::data::sample::{make_sample, sample_rng, DatasetConfig, SamplePair};
use crate::data::rng::SplitMix64;
use crate::model::{ModelConfig, S3Model};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Graph, Result};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Optimization schedule knobs. `Default` is the desk-scale profile.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Learning rate halves every this many epochs.
    pub decay_epochs: usize,
    /// Checkpoint every this many epochs (the final epoch always saves).
    pub save_every: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
    /// How many validation images to score per epoch (0 = skip).
    pub val_images: usize,
    /// Validation images are cropped to this size first to bound cost.
    pub val_crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr0: 1e-4,
            decay_epochs: 20,
            save_every: 25,
            seed: 0,
            val_images: 2,
            val_crop: 48,
        }
    }
}

impl TrainConfig {
    /// Validate schedule invariants (a zero-epoch run is allowed: it leaves
    /// the model untouched, which some determinism checks rely on).
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.decay_epochs == 0 {
            return Err(Error::Config("decay_epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Step-decay schedule: lr0 · 0.5^⌊epoch/decay_epochs⌋ (0-based epoch).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.decay_epochs) as i32)
    }
}

/// One CSV row of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub psnr_x2: f64,
    pub psnr_x3: f64,
    pub lr: f64,
}

/// Result of a training run.
pub struct TrainRun {
    pub logs: Vec<EpochLog>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Model + optimizer + configs, stepped one batch at a time.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub data_cfg: DatasetConfig,
    pub cfg: TrainConfig,
    pub ps: ParamStore,
    pub model: S3Model,
    pub adam: AdamState,
    /// Next epoch to run (0-based); advanced by [`Trainer::run`].
    pub epoch: usize,
}

impl Trainer {
    /// Fresh trainer with parameters drawn from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, data_cfg: DatasetConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        data_cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = SplitMix64::new(cfg.seed);
        let model = S3Model::new(&mut ps, &model_cfg, &mut rng)?;
        let adam = AdamState::new(&ps);
        Ok(Trainer { model_cfg, data_cfg, cfg, ps, model, adam, epoch: 0 })
    }

    /// Mean L1 over one batch, then a single Adam update at `lr`.
    /// `epoch`/`step` only label the divergence diagnostic.
    pub fn train_step(
        &mut self,
        batch: &[SamplePair],
        lr: f64,
        epoch: usize,
        step: usize,
    ) -> Result<f64> {
        assert!(!batch.is_empty(), "empty batch");
        let mut g = Graph::new();
        let p = self.ps.bind(&mut g);
        let mut total: Option<crate::Var> = None;
        for pair in batch {
            let pred = self.model.forward(&mut g, &p, &pair.lr, &pair.coords, pair.scale);
            let tgt = g.constant(pair.targets.clone());
            let loss = g.l1_loss(pred, tgt);
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss),
            });
        }
        let total = g.mul_scalar(total.unwrap(), 1.0 / batch.len() as f64);
        let loss_value = g.data(total)[0];
        if !loss_value.is_finite() {
            return Err(Error::Divergence { epoch, step, batch_seed: self.data_cfg.seed });
        }
        let grads = g.backward(total);
        let collected = self.ps.collect_grads(&p, &grads);
        if collected.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch, step, batch_seed: self.data_cfg.seed });
        }
        self.adam.step(&mut self.ps, &collected, lr);
        Ok(loss_value)
    }

    /// The deterministic batch stream for one epoch over `train_imgs`:
    /// every sample is a pure function of (data seed, epoch, sample index).
    pub fn epoch_batches(
        &self,
        train_imgs: &[Tensor],
        epoch: usize,
    ) -> Result<Vec<Vec<SamplePair>>> {
        assert!(!train_imgs.is_empty(), "no training images");
        let n = train_imgs.len();
        let n_batches = n.div_ceil(self.cfg.batch_size);
        let mut batches = Vec::with_capacity(n_batches);
        let mut k = 0u64;
        for _ in 0..n_batches {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            for _ in 0..self.cfg.batch_size {
                let mut rng = sample_rng(self.data_cfg.seed, epoch as u64, k);
                let idx = rng.below(n);
                batch.push(make_sample(&train_imgs[idx], &self.data_cfg, &mut rng)?);
                k += 1;
            }
            batches.push(batch);
        }
        Ok(batches)
    }

    /// Mean PSNR(RGB) over the first `cfg.val_images` validation images at
    /// `scale`, on `val_crop`² top-left crops. NaN when validation is off.
    pub fn validate_psnr(&self, val_imgs: &[Tensor], scale: f64) -> Result<f64> {
        let n = self.cfg.val_images.min(val_imgs.len());
        if n == 0 {
            return Ok(f64::NAN);
        }
        let mut acc = 0.0;
        for img in &val_imgs[..n] {
            let c = self.cfg.val_crop.min(img.shape[2]).min(img.shape[3]);
            let gt = crop_top_left(img, c, c);
            // PSNR only: validation crops can be smaller than the SSIM window.
            let r = eval::reconstruct(&self.model, &self.ps, &gt, scale)?;
            let shave = crate::metrics::shave_for_scale(scale);
            acc += crate::metrics::psnr(&r.sr, &r.gt_crop, crate::metrics::PsnrMode::Rgb, shave)?;
        }
        Ok(acc / n as f64)
    }

    /// Run epochs `self.epoch..cfg.epochs`. Appends one CSV row per epoch to
    /// `out_dir/train_log.csv` when `out_dir` is given, and checkpoints every
    /// `save_every` epochs plus at the end.
    pub fn run(
        &mut self,
        train_imgs: &[Tensor],
        val_imgs: &[Tensor],
        out_dir: Option<&Path>,
    ) -> Result<TrainRun> {
        let mut logs = Vec::new();
        let mut last_ckpt = None;
        let mut csv = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.csv");
                let fresh = self.epoch == 0 || !path.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "epoch,loss,psnr_x2,psnr_x3,lr").map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        while self.epoch < self.cfg.epochs {
            let e = self.epoch;
            let lr = self.cfg.lr_at(e);
            let batches = self.epoch_batches(train_imgs, e)?;
            let mut loss_sum = 0.0;
            for (step, batch) in batches.iter().enumerate() {
                loss_sum += self.train_step(batch, lr, e, step)?;
            }
            let loss = loss_sum / batches.len() as f64;
            let psnr_x2 = self.validate_psnr(val_imgs, 2.0)?;
            let psnr_x3 = self.validate_psnr(val_imgs, 3.0)?;
            self.epoch = e + 1;
            let row = EpochLog { epoch: e + 1, loss, psnr_x2, psnr_x3, lr };
            if let Some((f, path)) = &mut csv {
                writeln!(
                    f,
                    "{},{:.8},{:.4},{:.4},{:.8e}",
                    row.epoch, row.loss, row.psnr_x2, row.psnr_x3, row.lr
                )
                .map_err(|e| Error::io(path.as_path(), e))?;
            }
            logs.push(row);
            let done = self.epoch == self.cfg.epochs;
            if let Some(dir) = out_dir {
                if done || (self.cfg.save_every > 0 && self.epoch % self.cfg.save_every == 0) {
                    let path = dir.join(format!("ckpt_{:04}.s3mb", self.epoch));
                    self.save(&path)?;
                    last_ckpt = Some(path);
                }
            }
        }
        // A zero-epoch run still produces a checkpoint so downstream commands
        // have something to load.
        if self.cfg.epochs == 0 {
            if let Some(dir) = out_dir {
                let path = dir.join("ckpt_0000.s3mb");
                self.save(&path)?;
                last_ckpt = Some(path);
            }
        }
        Ok(TrainRun { logs, last_checkpoint: last_ckpt })
    }

    /// Serialize parameters, Adam state, and configs to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, self)
    }

    /// Rebuild a trainer from a checkpoint, bit-exactly.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        checkpoint::load_checkpoint(path)
    }
}

/// Top-left `h×w` crop of an `[1,3,H,W]` image.
pub fn crop_top_left(img: &Tensor, h: usize, w: usize) -> Tensor {
    let (ih, iw) = (img.shape[2], img.shape[3]);
    assert!(h <= ih && w <= iw, "crop larger than image");
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for i in 0..h {
            let src = c * ih * iw + i * iw;
            data[c * h * w + i * w..c * h * w + (i + 1) * w]
                .copy_from_slice(&img.data[src..src + w]);
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::generate_image;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_state: 4,
            res_blocks: 1,
            gfe_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn tiny_data(p: usize, q: usize) -> DatasetConfig {
        DatasetConfig {
            lr_patch: p,
            scale_range: [1.0, 2.0],
            queries_per_patch: q,
            seed: 3,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn l1_loss_matches_its_analytic_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![4, 3], vec![0.25; 12]));
        let b = g.constant(Tensor::new(vec![4, 3], vec![0.25; 12]));
        let z = g.l1_loss(a, b);
        assert_eq!(g.data(z)[0], 0.0);
        let c = g.constant(Tensor::new(vec![4, 3], vec![0.35; 12]));
        let z2 = g.l1_loss(a, c);
        assert!((g.data(z2)[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_halves_every_decay_interval() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(19), 1e-4);
        assert_eq!(cfg.lr_at(20), 5e-5);
        assert_eq!(cfg.lr_at(2 * 20), 2.5e-5, "two halvings after 2*decay_epochs");
        for e in 0..100 {
            let want = 1e-4 * 0.5f64.powi((e / 20) as i32);
            assert_eq!(cfg.lr_at(e), want, "schedule must follow the closed form at {e}");
        }
    }

    #[test]
    fn zero_epoch_run_leaves_parameters_unchanged() {
        let cfg = TrainConfig { epochs: 0, val_images: 0, ..TrainConfig::default() };
        let mut t = Trainer::new(tiny_model(), tiny_data(8, 4), cfg).unwrap();
        let before: Vec<Vec<f64>> = t.ps.iter().map(|(_, v)| v.data.clone()).collect();
        let (img, _) = generate_image(1, 0, 32);
        let run = t.run(&[img.clone()], &[img], None).unwrap();
        assert!(run.logs.is_empty());
        let after: Vec<Vec<f64>> = t.ps.iter().map(|(_, v)| v.data.clone()).collect();
        assert_eq!(before, after, "zero epochs must not touch parameters");
    }

    #[test]
    fn single_sample_overfit_decreases_monotonically() {
        let mut t = Trainer::new(
            tiny_model(),
            tiny_data(8, 8),
            TrainConfig { seed: 5, ..TrainConfig::default() },
        )
        .unwrap();
        let (img, _) = generate_image(2, 0, 24);
        let pair = make_sample(&img, &t.data_cfg, &mut sample_rng(3, 0, 0)).unwrap();
        let mut losses = Vec::new();
        for step in 0..20 {
            losses.push(t.train_step(std::slice::from_ref(&pair), 1e-3, 0, step).unwrap());
        }
        for w in losses.windows(2) {
            assert!(
                w[1] < w[0],
                "overfit loss must decrease monotonically: {losses:?}"
            );
        }
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let mk = || {
            Trainer::new(
                tiny_model(),
                tiny_data(8, 4),
                TrainConfig { epochs: 2, batch_size: 2, val_images: 0, ..TrainConfig::default() },
            )
            .unwrap()
        };
        let imgs: Vec<Tensor> = (0..3).map(|i| generate_image(7, i, 24).0).collect();
        let mut a = mk();
        let mut b = mk();
        let ra = a.run(&imgs, &[], None).unwrap();
        let rb = b.run(&imgs, &[], None).unwrap();
        for (x, y) in ra.logs.iter().zip(&rb.logs) {
            assert_eq!(x.loss, y.loss);
        }
        for ((_, ta), (_, tb)) in a.ps.iter().zip(b.ps.iter()) {
            assert_eq!(ta.data, tb.data, "parameters must match bit-exactly");
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut t = Trainer::new(tiny_model(), tiny_data(8, 4), TrainConfig::default()).unwrap();
        // Push a Δ-modulation bias past exp's overflow point: Δ′ becomes +inf
        // and b̄ = Δ′·B·φ₁(Δ′a) multiplies inf by φ₁(−inf) = 0 — a guaranteed
        // NaN, the way a genuinely diverging run first surfaces.
        let names: Vec<String> = t.ps.iter().map(|(n, _)| n.to_string()).collect();
        let name = names
            .iter()
            .find(|n| n.contains("sigma_dt.fc2.b"))
            .expect("a Δ-modulation head exists");
        let id = t.ps.find(name).unwrap();
        t.ps.get_mut(id).data.fill(710.0);
        let (img, _) = generate_image(1, 1, 24);
        let pair = make_sample(&img, &t.data_cfg, &mut sample_rng(3, 0, 0)).unwrap();
        let err = t.train_step(&[pair], 1e-4, 7, 2).unwrap_err();
        match err {
            Error::Divergence { epoch, step, batch_seed } => {
                assert_eq!((epoch, step, batch_seed), (7, 2, 3));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_log_has_the_exact_header_and_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            val_images: 1,
            val_crop: 16,
            save_every: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_model(), tiny_data(8, 4), cfg).unwrap();
        let imgs: Vec<Tensor> = (0..2).map(|i| generate_image(9, i, 32).0).collect();
        let run = t.run(&imgs[..1], &imgs[1..], Some(dir.path())).unwrap();
        let text = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss,psnr_x2,psnr_x3,lr");
        assert_eq!(lines.len(), 3, "header + 2 epochs");
        assert!(lines[1].starts_with("1,"));
        assert!(dir.path().join("ckpt_0001.s3mb").exists());
        assert!(dir.path().join("ckpt_0002.s3mb").exists());
        assert_eq!(run.last_checkpoint.unwrap(), dir.path().join("ckpt_0002.s3mb"));
    }
}
