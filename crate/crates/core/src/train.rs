//! Patch-level detector training.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use yolco_autograd::{accumulate, cosine_lr, Adam, AdamConfig, Tape, Tensor};

use crate::error::{invalid, Result};
use crate::geometry::{decode_predictions, encode_targets, nms, Annotation, Assignment, BBox};
use crate::metrics::{average_precision, GroundTruth, ScoredBox};
use crate::model::{total_loss, LossConfig, Yolco};
use crate::wsi::tile_tensor;
use crate::wsi::TileRecord;

/// A square training crop and the lesions whose centers fall inside it.
#[derive(Clone, Debug)]
pub struct Patch {
    pub image: Tensor<f32>,
    pub annotations: Vec<Annotation>,
}

/// A slide as detector training material.
#[derive(Clone, Copy, Debug)]
pub struct SlideSource<'a> {
    pub image: &'a RgbImage,
    pub annotations: &'a [Annotation],
    pub background: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub crop: usize,
    /// Lesion-free crops drawn per lesion crop each epoch.
    pub background_ratio: f64,
    pub augment: bool,
    pub loss: LossConfig,
    /// Probability floor for validation detections.
    pub val_tau: f64,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr0: 1e-3,
            batch_size: 8,
            crop: 1024,
            background_ratio: 0.5,
            augment: true,
            loss: LossConfig::default(),
            val_tau: 0.05,
            nms_iou: 0.5,
        }
    }
}

fn annotations_in(anns: &[Annotation], x: usize, y: usize, side: usize) -> Vec<Annotation> {
    let s = side as f64;
    anns.iter()
        .filter_map(|a| {
            let b = a.bbox.translate(-(x as f64), -(y as f64));
            (b.cx >= 0.0 && b.cy >= 0.0 && b.cx < s && b.cy < s).then_some(Annotation { bbox: b, ..*a })
        })
        .collect()
}

fn crop_patch(src: &SlideSource, x: usize, y: usize, side: usize) -> Patch {
    let tile = TileRecord { x, y, side };
    Patch { image: tile_tensor(src.image, &tile, src.background), annotations: annotations_in(src.annotations, x, y, side) }
}

/// A crop containing `ann` at a random position (clamped to the slide).
pub fn lesion_crop<R: Rng + ?Sized>(src: &SlideSource, ann: &Annotation, side: usize, rng: &mut R) -> Patch {
    let b = &ann.bbox;
    let max_x = (src.image.width() as usize).saturating_sub(side);
    let max_y = (src.image.height() as usize).saturating_sub(side);
    let pick = |lo: f64, hi: f64, max: usize, rng: &mut R| -> usize {
        let (lo, hi) = (lo.max(0.0), hi.max(0.0));
        let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        (v.round() as usize).min(max)
    };
    let s = side as f64;
    let (x, y) = if b.w < s && b.h < s {
        (pick(b.x1() - s, b.x0(), max_x, rng), pick(b.y1() - s, b.y0(), max_y, rng))
    } else {
        (pick(b.cx - s * 0.75, b.cx - s * 0.25, max_x, rng), pick(b.cy - s * 0.75, b.cy - s * 0.25, max_y, rng))
    };
    crop_patch(src, x, y, side)
}

/// A crop at a uniformly random position.
pub fn random_crop<R: Rng + ?Sized>(src: &SlideSource, side: usize, rng: &mut R) -> Patch {
    let max_x = (src.image.width() as usize).saturating_sub(side);
    let max_y = (src.image.height() as usize).saturating_sub(side);
    let x = rng.random_range(0..=max_x);
    let y = rng.random_range(0..=max_y);
    crop_patch(src, x, y, side)
}

/// With probability 0.5 each: a shift of up to ±10% of the side and a rescale by a
/// factor in `[0.75, 1.25]` about the center. Nearest-neighbour resampling; exposed
/// area takes `fill`; lesions whose centers leave the patch are dropped.
pub fn augment<R: Rng + ?Sized>(patch: &Patch, fill: [u8; 3], rng: &mut R) -> Patch {
    let side = patch.image.shape()[1];
    let s = side as f64;
    let (mut dx, mut dy, mut scale) = (0.0, 0.0, 1.0);
    if rng.random_bool(0.5) {
        dx = rng.random_range(-0.1..=0.1) * s;
        dy = rng.random_range(-0.1..=0.1) * s;
    }
    if rng.random_bool(0.5) {
        scale = rng.random_range(0.75..=1.25);
    }
    if dx == 0.0 && dy == 0.0 && scale == 1.0 {
        return patch.clone();
    }
    let c = s / 2.0;
    let src = patch.image.data();
    let mut out = vec![0f32; 3 * side * side];
    for y in 0..side {
        let sy = ((y as f64 + 0.5 - dy - c) / scale + c).floor();
        for x in 0..side {
            let sx = ((x as f64 + 0.5 - dx - c) / scale + c).floor();
            let inside = sx >= 0.0 && sy >= 0.0 && sx < s && sy < s;
            for ch in 0..3 {
                out[(ch * side + y) * side + x] = if inside {
                    src[(ch * side + sy as usize) * side + sx as usize]
                } else {
                    fill[ch] as f32 / 255.0
                };
            }
        }
    }
    let annotations = patch
        .annotations
        .iter()
        .filter_map(|a| {
            let b = &a.bbox;
            let nb = BBox { cx: (b.cx - c) * scale + c + dx, cy: (b.cy - c) * scale + c + dy, w: b.w * scale, h: b.h * scale };
            (nb.cx >= 0.0 && nb.cy >= 0.0 && nb.cx < s && nb.cy < s).then_some(Annotation { bbox: nb, ..*a })
        })
        .collect();
    Patch { image: Tensor::from_vec(&[3, side, side], out).expect("same shape"), annotations }
}

/// One epoch's patches: a crop per annotation (every annotation used once) plus
/// background crops, shuffled.
pub fn epoch_patches<R: Rng + ?Sized>(sources: &[SlideSource], cfg: &TrainConfig, rng: &mut R) -> Vec<Patch> {
    let mut patches = Vec::new();
    for src in sources {
        for ann in src.annotations {
            patches.push(lesion_crop(src, ann, cfg.crop, rng));
        }
    }
    let n_bg = ((patches.len().max(1)) as f64 * cfg.background_ratio).round() as usize;
    for _ in 0..n_bg {
        let src = &sources[rng.random_range(0..sources.len())];
        patches.push(random_crop(src, cfg.crop, rng));
    }
    patches.shuffle(rng);
    patches
}

/// Loss values and parameter gradients for one patch.
pub struct SampleGrads {
    pub total: f64,
    pub boxes: f64,
    pub obj: f64,
    pub noobj: f64,
    pub grads: Vec<Tensor<f32>>,
}

pub fn assignments_for(model: &Yolco, side: usize, annotations: &[Annotation]) -> Result<[Assignment; 2]> {
    let grids = crate::model::STRIDES.map(|s| crate::geometry::GridSpec::for_image(side, side, s));
    Ok([
        encode_targets(annotations, &grids[0], &model.config.anchors)?,
        encode_targets(annotations, &grids[1], &model.config.anchors)?,
    ])
}

pub fn sample_grads(model: &Yolco, patch: &Patch, loss: &LossConfig) -> Result<SampleGrads> {
    let side = patch.image.shape()[1];
    let asg = assignments_for(model, side, &patch.annotations)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let x = tape.constant(patch.image.clone());
    let out = model.forward_on(&mut tape, &p, x)?;
    let parts = total_loss(&mut tape, &out, &asg, loss, model.config.loss_mode)?;
    let g = tape.backward(parts.total)?;
    Ok(SampleGrads {
        total: tape.value(parts.total).item() as f64,
        boxes: parts.boxes,
        obj: parts.obj,
        noobj: parts.noobj,
        grads: model.params.collect_grads(&g, &p),
    })
}

/// Mean loss terms of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub boxes: f64,
    pub obj: f64,
    pub noobj: f64,
}

/// Averages gradients over `batch` and applies one Adam update at `lr`.
pub fn train_step(model: &mut Yolco, adam: &mut Adam<f32>, batch: &[Patch], loss: &LossConfig, lr: f64) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(invalid("train_step", "empty batch"));
    }
    let results: Vec<SampleGrads> = batch.par_iter().map(|p| sample_grads(model, p, loss)).collect::<Result<_>>()?;
    let mut acc = model.params.zero_grads();
    let mut sl = StepLoss::default();
    for r in &results {
        accumulate(&mut acc, &r.grads);
        sl.total += r.total;
        sl.boxes += r.boxes;
        sl.obj += r.obj;
        sl.noobj += r.noobj;
    }
    let k = batch.len() as f64;
    for g in &mut acc {
        g.scale((1.0 / k) as f32);
    }
    adam.step(&mut model.params, &acc, lr);
    Ok(StepLoss { total: sl.total / k, boxes: sl.boxes / k, obj: sl.obj / k, noobj: sl.noobj / k })
}

/// Post-suppression detections of one image, most probable first.
pub fn detect(model: &Yolco, image: &Tensor<f32>, tau: f64, iou: f64) -> Result<Vec<(BBox, f64)>> {
    let out = model.infer(image)?;
    let mut dets = Vec::new();
    for so in &out {
        dets.extend(decode_predictions(&so.boxes, &so.cls, &so.grid, &model.config.anchors, tau)?);
    }
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let probs: Vec<f64> = dets.iter().map(|d| d.prob).collect();
    Ok(nms(&boxes, &probs, iou).into_iter().map(|i| (boxes[i], probs[i])).collect())
}

/// mAP@.5 over a patch set; `None` when the set has no lesions.
pub fn patch_map50(model: &Yolco, patches: &[Patch], tau: f64, iou: f64) -> Result<Option<f64>> {
    let per: Vec<Vec<(BBox, f64)>> = patches.par_iter().map(|p| detect(model, &p.image, tau, iou)).collect::<Result<_>>()?;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, (p, d)) in patches.iter().zip(per).enumerate() {
        dets.extend(d.into_iter().map(|(bbox, score)| ScoredBox { image: i, bbox, score }));
        gts.extend(p.annotations.iter().map(|a| GroundTruth { image: i, bbox: a.bbox }));
    }
    if gts.is_empty() {
        return Ok(None);
    }
    average_precision(&dets, &gts, 0.5).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: StepLoss,
    pub val_map50: Option<f64>,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,lr,loss_total,loss_box,loss_obj,loss_noobj,val_map50";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let m = self.val_map50.map_or(String::new(), |m| format!("{m:.6}"));
        format!(
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},{m}",
            self.epoch, self.lr, self.loss.total, self.loss.boxes, self.loss.obj, self.loss.noobj
        )
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation mAP (the last epoch when
    /// validation has no lesions).
    pub model: Yolco,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Adam with a cosine schedule over `cfg.epochs`; validation mAP@.5 after every epoch.
pub fn train_patch_level(
    mut model: Yolco,
    train: &[SlideSource],
    val: &[Patch],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() || train.iter().all(|s| s.annotations.is_empty()) {
        return Err(invalid("train_patch_level", "training set has no annotated lesions"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(invalid("train_patch_level", "epochs and batch size must be positive"));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed);
    aug_rng.set_stream(1);
    let mut adam = Adam::new(&model.params, cfg.lr0, AdamConfig::default());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Yolco)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, 0.0);
        let mut patches = epoch_patches(train, cfg, &mut data_rng);
        if cfg.augment {
            let fills: Vec<[u8; 3]> = (0..patches.len()).map(|_| train[0].background).collect();
            patches = patches.iter().zip(fills).map(|(p, f)| augment(p, f, &mut aug_rng)).collect();
        }
        let mut sum = StepLoss::default();
        let mut steps = 0usize;
        for batch in patches.chunks(cfg.batch_size) {
            let l = train_step(&mut model, &mut adam, batch, &cfg.loss, lr)?;
            sum.total += l.total;
            sum.boxes += l.boxes;
            sum.obj += l.obj;
            sum.noobj += l.noobj;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let loss = StepLoss { total: sum.total / k, boxes: sum.boxes / k, obj: sum.obj / k, noobj: sum.noobj / k };
        let val_map50 = if val.is_empty() { None } else { patch_map50(&model, val, cfg.val_tau, cfg.nms_iou)? };
        log.push(EpochLog { epoch, lr, loss, val_map50 });
        let score = val_map50.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score >= *b) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, log, best_epoch })
}
