//! Decoder training: heatmap and in/out losses, learning-rate schedule and
//! the epoch loop.
//!
//! Per sample the loss is `[in-frame] * BCE(heatmap) + lambda * BCE(in/out)`,
//! the second term only while fine-tuning. Out-of-frame samples never put the
//! heatmap term on the tape, so the heatmap head receives exactly zero
//! gradient from them. Batch losses are means over the batch size.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, build_gt_heatmap, AnnotatedSample, AugmentConfig, SampleLabel, GT_SIGMA_CELLS,
};
use crate::error::{Error, Result};
use crate::frame::FrameImage;
use crate::gazenet::GazeModel;
use crate::nn::{AdamW, Grads, Mat, Tape, Var};
use crate::types::{HeadBox, HeatmapGrid, HEATMAP_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Heatmap-only training on in-frame targets.
    Pretrain,
    /// Heatmap plus in/out classification.
    Finetune,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "PRETRAIN",
            Stage::Finetune => "FINETUNE",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::InvalidValue(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Learning rate during warm-up epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupMode {
    /// Base rate throughout warm-up.
    #[default]
    Constant,
    /// Linear ramp from `lr / warmup_steps` up to `lr`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Epochs after warm-up.
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_mode: WarmupMode,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub lambda: f64,
    pub weight_decay: f64,
    /// Photometric augmentation; when off, encoder features are computed
    /// once and reused every epoch.
    pub augment: bool,
    /// Ground-truth heatmap spread in grid cells.
    pub gt_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 15,
            warmup_epochs: 0,
            warmup_mode: WarmupMode::Constant,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 32,
            lambda: 1.0,
            weight_decay: 0.01,
            augment: true,
            gt_sigma: GT_SIGMA_CELLS,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            epochs: 10,
            warmup_epochs: 5,
            lr: 1e-5,
            ..Self::pretrain()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidValue("batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidValue("weight_decay must be >= 0".into()));
        }
        if self.gt_sigma.is_nan() || self.gt_sigma <= 0.0 {
            return Err(Error::InvalidValue("gt_sigma must be positive".into()));
        }
        Ok(())
    }
}

const PROB_EPS: f64 = 1e-12;

fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Mean per-cell binary cross-entropy, or exactly 0 for out-of-frame samples.
pub fn heatmap_loss(pred: &HeatmapGrid, gt: &HeatmapGrid, is_ift: bool) -> f64 {
    if !is_ift {
        return 0.0;
    }
    let n = (HEATMAP_SIZE * HEATMAP_SIZE) as f64;
    pred.values()
        .iter()
        .zip(gt.values().iter())
        .map(|(&p, &t)| bce(p, t))
        .sum::<f64>()
        / n
}

pub fn inout_loss(p_ift: f64, label_in: bool) -> f64 {
    bce(p_ift, if label_in { 1.0 } else { 0.0 })
}

pub fn total_loss(hm: f64, io: f64, cfg: &TrainConfig) -> f64 {
    match cfg.stage {
        Stage::Pretrain => hm,
        Stage::Finetune => hm + cfg.lambda * io,
    }
}

/// Learning rate for optimizer step `step` of `total_steps`. Warm-up covers
/// the first `warmup_epochs / total_epochs` of the steps; the cosine phase
/// reaches zero at `step == total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let total_epochs = cfg.total_epochs().max(1);
    let warm = total_steps * cfg.warmup_epochs / total_epochs;
    if step < warm {
        return match cfg.warmup_mode {
            WarmupMode::Constant => cfg.lr,
            WarmupMode::Linear => cfg.lr * (step + 1) as f64 / warm as f64,
        };
    }
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => {
            let span = total_steps.saturating_sub(warm);
            if span == 0 {
                return cfg.lr;
            }
            let t = ((step - warm) as f64 / span as f64).min(1.0);
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// One sample ready for the decoder: encoder features plus labels.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub features: Mat,
    pub head: HeadBox,
    pub in_frame: bool,
    /// Ground-truth heatmap as a `(4096, 1)` column, present for in-frame samples.
    pub gt: Option<Arc<Mat>>,
}

impl TrainExample {
    pub fn new(
        features: Mat,
        head: HeadBox,
        target: Option<(f64, f64)>,
        sigma: f64,
    ) -> Result<Self> {
        let gt = match target {
            Some(t) => {
                let g = build_gt_heatmap(t, sigma)?.into_values();
                let n = HEATMAP_SIZE * HEATMAP_SIZE;
                Some(Arc::new(
                    g.into_shape_with_order((n, 1)).expect("64x64 grid"),
                ))
            }
            None => None,
        };
        Ok(TrainExample {
            features,
            head,
            in_frame: target.is_some(),
            gt,
        })
    }
}

/// Mean loss terms over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub hm: f64,
    pub io: f64,
    pub total: f64,
}

fn sample_loss(
    model: &GazeModel,
    tape: &mut Tape,
    ex: &TrainExample,
    cfg: &TrainConfig,
) -> Result<(Option<Var>, f64, f64)> {
    let feats = tape.constant(ex.features.clone());
    let out = model
        .decoder
        .forward(tape, &model.params, feats, &ex.head)?;
    let mut terms = Vec::new();
    let mut hm = 0.0;
    let mut io = 0.0;
    if let (true, Some(gt)) = (ex.in_frame, &ex.gt) {
        let l = tape.bce_with_logits(out.heatmap_logits, gt.clone());
        hm = tape.scalar(l);
        terms.push(l);
    }
    if cfg.stage == Stage::Finetune {
        let t = Arc::new(Mat::from_elem((1, 1), if ex.in_frame { 1.0 } else { 0.0 }));
        let l = tape.bce_with_logits(out.inout_logit, t);
        io = tape.scalar(l);
        terms.push(tape.scale(l, cfg.lambda));
    }
    let total = match terms.as_slice() {
        [] => None,
        [a] => Some(*a),
        [a, b] => Some(tape.add(*a, *b)),
        _ => unreachable!("at most two loss terms"),
    };
    Ok((total, hm, io))
}

fn accumulate_batch(
    model: &GazeModel,
    batch: &[&TrainExample],
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(Grads, BatchLoss)> {
    let n_params = model.params.len();
    let mut grads = Grads::empty(n_params);
    let mut loss = BatchLoss::default();
    let k = 1.0 / batch.len().max(1) as f64;
    for ex in batch {
        let mut tape = Tape::new();
        let (total, hm, io) = sample_loss(model, &mut tape, ex, cfg)?;
        loss.hm += k * hm;
        loss.io += k * io;
        if let Some(t) = total {
            loss.total += k * tape.scalar(t);
            if with_grads {
                grads.accumulate(&tape.backward(t, n_params), k);
            }
        }
    }
    Ok((grads, loss))
}

/// Batch-mean loss and its gradient with respect to every decoder parameter.
pub fn batch_gradients(
    model: &GazeModel,
    batch: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<(Grads, BatchLoss)> {
    let refs: Vec<&TrainExample> = batch.iter().collect();
    accumulate_batch(model, &refs, cfg, true)
}

/// Batch-mean loss without gradients.
pub fn batch_loss(
    model: &GazeModel,
    batch: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let refs: Vec<&TrainExample> = batch.iter().collect();
    Ok(accumulate_batch(model, &refs, cfg, false)?.1)
}

/// Where a training image comes from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Memory(FrameImage),
    File(PathBuf),
}

impl ImageSource {
    fn load(&self) -> Result<FrameImage> {
        match self {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::File(p) => FrameImage::open(p),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: ImageSource,
    pub sample: AnnotatedSample,
}

fn check_stage(items: &[TrainItem], stage: Stage) -> Result<()> {
    if items.is_empty() {
        return Err(Error::StageMismatch {
            stage: stage.as_str().into(),
            reason: "no training samples".into(),
        });
    }
    let bad: Vec<String> = items
        .iter()
        .enumerate()
        .filter(|(_, it)| match stage {
            Stage::Pretrain => it.sample.label != SampleLabel::IFT || it.sample.target.is_none(),
            Stage::Finetune => it.sample.label == SampleLabel::UNKNOWN,
        })
        .take(5)
        .map(|(i, it)| format!("#{i} {} ({:?})", it.sample.image_ref, it.sample.label))
        .collect();
    if bad.is_empty() {
        return Ok(());
    }
    let need = match stage {
        Stage::Pretrain => "in-frame targets",
        Stage::Finetune => "in/out labels",
    };
    Err(Error::StageMismatch {
        stage: stage.as_str().into(),
        reason: format!("samples lack {need}: {}", bad.join(", ")),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_hm: f64,
    pub loss_io: f64,
    pub loss_total: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

/// Writes `epoch,split,loss_hm,loss_io,lr` rows.
pub fn write_metrics_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,split,loss_hm,loss_io,lr\n");
    for l in logs {
        out.push_str(&format!(
            "{},train,{},{},{}\n",
            l.epoch, l.loss_hm, l.loss_io, l.lr
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn mix_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut x = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 31;
    x.wrapping_mul(0x94D0_49BB_1331_11EB)
}

fn example_for(
    model: &GazeModel,
    item: &TrainItem,
    cfg: &TrainConfig,
    aug: Option<(&AugmentConfig, u64)>,
) -> Result<TrainExample> {
    let img = item.image.load()?;
    let s = &item.sample;
    let target = if s.label == SampleLabel::IFT {
        s.target
    } else {
        None
    };
    let features = match aug {
        Some((acfg, seed)) => {
            let a = augment(&img, s.head, target, acfg, seed);
            model.encoder.encode(&a.image)?
        }
        None => model.encode_frame(&img)?,
    };
    TrainExample::new(features, s.head, target, cfg.gt_sigma)
}

/// Trains the decoder for one stage. The encoder is never updated. When
/// `out` is given the checkpoint and `metrics.csv` are written there.
pub fn run_stage(
    model: &mut GazeModel,
    items: &[TrainItem],
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<StageReport> {
    cfg.validate()?;
    check_stage(items, cfg.stage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acfg = AugmentConfig {
        output_size: (
            model.config.input_size as u32,
            model.config.input_size as u32,
        ),
        ..Default::default()
    };
    let cached: Option<Vec<TrainExample>> = if cfg.augment {
        None
    } else {
        Some(
            items
                .iter()
                .map(|it| example_for(model, it, cfg, None))
                .collect::<Result<_>>()?,
        )
    };

    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.total_epochs();
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut logs = Vec::with_capacity(cfg.total_epochs());
    let mut step = 0;
    for epoch in 0..cfg.total_epochs() {
        order.shuffle(&mut rng);
        let epoch_lr = lr_at(step, total_steps, cfg);
        let mut sum = BatchLoss::default();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let fresh: Vec<TrainExample>;
            let batch: Vec<&TrainExample> = match &cached {
                Some(c) => idx.iter().map(|&i| &c[i]).collect(),
                None => {
                    fresh = idx
                        .iter()
                        .map(|&i| {
                            example_for(
                                model,
                                &items[i],
                                cfg,
                                Some((&acfg, mix_seed(seed, epoch, i))),
                            )
                        })
                        .collect::<Result<_>>()?;
                    fresh.iter().collect()
                }
            };
            let (grads, loss) = accumulate_batch(model, &batch, cfg, true)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss_hm: loss.hm,
                    loss_io: loss.io,
                });
            }
            opt.step(&mut model.params, &grads, lr_at(step, total_steps, cfg));
            step += 1;
            let w = idx.len() as f64 / items.len() as f64;
            sum.hm += w * loss.hm;
            sum.io += w * loss.io;
            sum.total += w * loss.total;
        }
        log::info!(
            "{} epoch {epoch}: loss {:.5} (hm {:.5}, io {:.5}) lr {epoch_lr:.3e}",
            cfg.stage.as_str(),
            sum.total,
            sum.hm,
            sum.io
        );
        logs.push(EpochLog {
            epoch,
            loss_hm: sum.hm,
            loss_io: sum.io,
            loss_total: sum.total,
            lr: epoch_lr,
        });
    }
    let report = StageReport {
        stage: cfg.stage,
        epochs: logs,
        steps: step,
    };
    if let Some(dir) = out {
        model.save(dir, cfg.stage.as_str())?;
        write_metrics_csv(&dir.join("metrics.csv"), &report.epochs)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gazenet::GazeNetConfig;
    use rand::Rng;

    #[test]
    fn heatmap_loss_examples() {
        let half = HeatmapGrid::from_fn(|_, _| 0.5).unwrap();
        assert!((heatmap_loss(&half, &half, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(heatmap_loss(&half, &half, false), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = HeatmapGrid::from_fn(|_, _| rng.random_range(0.01..0.99)).unwrap();
        let g = HeatmapGrid::from_fn(|_, _| rng.random_range(0.0..1.0)).unwrap();
        let mut acc = 0.0;
        for r in 0..64 {
            for c in 0..64 {
                let (pv, gv) = (p.get(r, c), g.get(r, c));
                acc += -(gv * pv.ln() + (1.0 - gv) * (1.0 - pv).ln());
            }
        }
        assert!((heatmap_loss(&p, &g, true) - acc / 4096.0).abs() < 1e-6);
    }

    #[test]
    fn inout_loss_examples() {
        assert!((inout_loss(0.5, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((inout_loss(0.5, false) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((inout_loss(0.9, true) - 0.105_360_515_657_826_3).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let l = inout_loss(i as f64 / 100.0, true);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn total_loss_examples() {
        let ft = TrainConfig::finetune();
        assert!((total_loss(0.7, 0.3, &ft) - 1.0).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 123.0, &TrainConfig::pretrain()), 0.7);
        let zero = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::finetune()
        };
        assert_eq!(total_loss(0.7, 5.0, &zero), 0.7);
    }

    #[test]
    fn cosine_schedule_points() {
        let cfg = TrainConfig {
            warmup_epochs: 0,
            epochs: 10,
            lr: 2.0,
            ..TrainConfig::pretrain()
        };
        assert_eq!(lr_at(0, 100, &cfg), 2.0);
        assert!((lr_at(50, 100, &cfg) - 1.0).abs() < 1e-12);
        assert!(lr_at(100, 100, &cfg).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let l = lr_at(s, 100, &cfg);
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn warmup_then_decay() {
        let cfg = TrainConfig::finetune();
        // 15 epochs x 10 steps: first 50 steps are warm-up at the base rate
        for s in 0..50 {
            assert_eq!(lr_at(s, 150, &cfg), 1e-5);
        }
        assert_eq!(lr_at(50, 150, &cfg), 1e-5);
        assert!((lr_at(100, 150, &cfg) - 0.5e-5).abs() < 1e-18);
        let lin = TrainConfig {
            warmup_mode: WarmupMode::Linear,
            ..cfg
        };
        assert!((lr_at(0, 150, &lin) - 1e-5 / 50.0).abs() < 1e-20);
        assert_eq!(lr_at(49, 150, &lin), 1e-5);
    }

    fn tiny_examples(n: usize, seed: u64, in_frame: bool) -> (GazeModel, Vec<TrainExample>) {
        let model = GazeModel::new(GazeNetConfig::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = model.config.grid();
        let ex = (0..n)
            .map(|_| {
                let f = Mat::from_shape_fn((g * g, model.config.embed_dim), |_| {
                    rng.random_range(-1.0..1.0)
                });
                let head = HeadBox::from_corners([0.1, 0.2, 0.4, 0.5]).unwrap();
                let t = in_frame.then(|| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)));
                TrainExample::new(f, head, t, 3.0).unwrap()
            })
            .collect();
        (model, ex)
    }

    #[test]
    fn oft_batch_leaves_heatmap_head_untouched() {
        let (model, ex) = tiny_examples(4, 2, false);
        let (grads, _) = batch_gradients(&model, &ex, &TrainConfig::finetune()).unwrap();
        for id in model.decoder.heatmap_params() {
            assert!(grads.dense(id, &model.params).iter().all(|&g| g == 0.0));
        }
        assert!(model
            .decoder
            .inout_params()
            .iter()
            .any(|&id| grads.dense(id, &model.params).iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn pretrain_rejects_out_of_frame_samples() {
        let img = FrameImage::from_fn(8, 8, |_, _| image::Rgb([0, 0, 0])).unwrap();
        let head = HeadBox::from_corners([0.1, 0.1, 0.5, 0.5]).unwrap();
        let items = vec![TrainItem {
            image: ImageSource::Memory(img),
            sample: AnnotatedSample::new("x", head, SampleLabel::OFT, None, "t").unwrap(),
        }];
        let mut model = GazeModel::new(GazeNetConfig::tiny(), 0).unwrap();
        let err = run_stage(&mut model, &items, &TrainConfig::pretrain(), 0, None).unwrap_err();
        assert!(matches!(err, Error::StageMismatch { .. }));
    }

    #[test]
    fn stage_names_parse() {
        assert_eq!("pretrain".parse::<Stage>().unwrap(), Stage::Pretrain);
        assert_eq!("FINETUNE".parse::<Stage>().unwrap(), Stage::Finetune);
        assert!("joint".parse::<Stage>().is_err());
    }
}
