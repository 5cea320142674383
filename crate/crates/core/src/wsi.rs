//! Slide foreground, zero-overlap tiling, tile encoding and feature collection.

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use yolco_autograd::Tensor;

use crate::error::{invalid, Error, Result};
use crate::features::{FeatureRow, FeatureSequence};
use crate::geometry::{decode_predictions, nms, Annotation, BBox, GridSpec};
use crate::model::Yolco;
use crate::synth::{Diagnosis, SyntheticSlide};

/// Nominal thumbnail level: one thumbnail pixel per `2^8` slide pixels per side.
pub const THUMBNAIL_LEVEL: u32 = 8;

/// Smallest thumbnail side the level is reduced to keep.
pub const MIN_THUMBNAIL_SIDE: usize = 8;

pub fn gray(px: [u8; 3]) -> u8 {
    ((px[0] as u32 * 299 + px[1] as u32 * 587 + px[2] as u32 * 114 + 500) / 1000) as u8
}

/// Level actually used for a slide: [`THUMBNAIL_LEVEL`], lowered until the
/// thumbnail's shorter side is at least [`MIN_THUMBNAIL_SIDE`].
pub fn thumbnail_level(width: usize, height: usize) -> u32 {
    let mut level = THUMBNAIL_LEVEL;
    while level > 0 && width.min(height) >> level < MIN_THUMBNAIL_SIDE {
        level -= 1;
    }
    level
}

/// Box-averaged downsample by `2^level`; partial edge blocks average what they cover.
pub fn thumbnail(img: &RgbImage, level: u32) -> RgbImage {
    let f = 1usize << level;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (tw, th) = (w.div_ceil(f), h.div_ceil(f));
    let mut acc = vec![[0u64; 4]; tw * th];
    for (x, y, p) in img.enumerate_pixels() {
        let a = &mut acc[(y as usize / f) * tw + x as usize / f];
        a[0] += p[0] as u64;
        a[1] += p[1] as u64;
        a[2] += p[2] as u64;
        a[3] += 1;
    }
    RgbImage::from_fn(tw as u32, th as u32, |x, y| {
        let a = acc[y as usize * tw + x as usize];
        image::Rgb([0, 1, 2].map(|c| ((a[c] + a[3] / 2) / a[3]) as u8))
    })
}

pub fn gray_histogram(img: &RgbImage) -> [u64; 256] {
    let mut h = [0u64; 256];
    for p in img.pixels() {
        h[gray(p.0) as usize] += 1;
    }
    h
}

/// Split `t` maximizing between-class variance, where the lower class is `v < t`.
/// Ties resolve to the lowest `t`; a single-valued histogram returns that value.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(invalid("otsu_threshold", "empty histogram"));
    }
    let nonzero: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if nonzero.len() == 1 {
        return Ok(nonzero[0] as u8);
    }
    let total_f = total as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (0u8, -1.0);
    for t in 0..256usize {
        if t > 0 {
            w0 += hist[t - 1] as f64;
            sum0 += (t - 1) as f64 * hist[t - 1] as f64;
        }
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best.1 {
            best = (t as u8, var);
        }
    }
    Ok(best.0)
}

/// Foreground pixels of a slide: gray level below the thumbnail's threshold.
#[derive(Clone, Debug)]
pub struct ForegroundMask {
    pub width: usize,
    pub height: usize,
    pub threshold: u8,
    bits: Vec<bool>,
}

impl ForegroundMask {
    pub fn from_image(img: &RgbImage, threshold: u8) -> Self {
        let bits = img.pixels().map(|p| gray(p.0) < threshold).collect();
        Self { width: img.width() as usize, height: img.height() as usize, threshold, bits }
    }

    /// Threshold taken from the thumbnail at [`thumbnail_level`].
    pub fn detect(img: &RgbImage) -> Result<Self> {
        let level = thumbnail_level(img.width() as usize, img.height() as usize);
        let t = otsu_threshold(&gray_histogram(&thumbnail(img, level)))?;
        Ok(Self::from_image(img, t))
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mean foreground position, or `None` when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    fn any_in(&self, x0: usize, y0: usize, side: usize) -> bool {
        let (x1, y1) = ((x0 + side).min(self.width), (y0 + side).min(self.height));
        (y0..y1).any(|y| self.bits[y * self.width + x0..y * self.width + x1].iter().any(|&b| b))
    }
}

/// Square tile origin and side in slide pixels; may extend past the slide edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

/// Grid tiles (step `tile_side - overlap`, starting at the origin) containing any
/// foreground pixel, ordered by distance of the tile center from the foreground
/// centroid; ties by row, then column.
pub fn tile_slide(mask: &ForegroundMask, tile_side: usize, overlap: usize) -> Result<Vec<TileRecord>> {
    if tile_side == 0 || tile_side % 32 != 0 {
        return Err(invalid("tile_slide", format!("tile side {tile_side} is not a positive multiple of 32")));
    }
    if tile_side > mask.width || tile_side > mask.height {
        return Err(invalid(
            "tile_slide",
            format!("tile side {tile_side} exceeds the {}x{} slide", mask.width, mask.height),
        ));
    }
    if overlap >= tile_side {
        return Err(invalid("tile_slide", "overlap must be smaller than the tile side"));
    }
    let Some((cx, cy)) = mask.centroid() else { return Ok(Vec::new()) };
    let step = tile_side - overlap;
    let count = |extent: usize| 1 + (extent.saturating_sub(tile_side)).div_ceil(step);
    let (cols, rows) = (count(mask.width), count(mask.height));
    let mut tiles = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c * step, r * step);
            if mask.any_in(x, y, tile_side) {
                let half = tile_side as f64 / 2.0;
                let d = (x as f64 + half - cx).hypot(y as f64 + half - cy);
                tiles.push((d, r, c, TileRecord { x, y, side: tile_side }));
            }
        }
    }
    tiles.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(tiles.into_iter().map(|t| t.3).collect())
}

/// Everything recorded about one slide besides its pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    /// Pixel file, relative to the manifest's directory.
    pub image: String,
    pub thumbnail: String,
    pub width: usize,
    pub height: usize,
    pub thumbnail_level: u32,
    pub otsu_threshold: u8,
    pub label: Diagnosis,
    pub annotations: Vec<Annotation>,
    pub tile_side: usize,
    pub tiles: Vec<TileRecord>,
}

impl SlideManifest {
    /// Computes thumbnail, foreground threshold and tiling for a generated slide.
    pub fn describe(slide_id: &str, slide: &SyntheticSlide, tile_side: usize) -> Result<(Self, RgbImage)> {
        let (w, h) = (slide.image.width() as usize, slide.image.height() as usize);
        let level = thumbnail_level(w, h);
        let thumb = thumbnail(&slide.image, level);
        let threshold = otsu_threshold(&gray_histogram(&thumb))?;
        let mask = ForegroundMask::from_image(&slide.image, threshold);
        let tiles = tile_slide(&mask, tile_side, 0)?;
        let manifest = Self {
            slide_id: slide_id.to_string(),
            image: format!("{slide_id}.png"),
            thumbnail: format!("{slide_id}_thumb.png"),
            width: w,
            height: h,
            thumbnail_level: level,
            otsu_threshold: threshold,
            label: slide.label,
            annotations: slide.annotations.clone(),
            tile_side,
            tiles,
        };
        Ok((manifest, thumb))
    }
}

/// Tile pixels as a `[3, side, side]` tensor scaled to `[0, 1]`; area beyond the slide
/// is filled with `pad`.
pub fn tile_tensor(img: &RgbImage, tile: &TileRecord, pad: [u8; 3]) -> Tensor<f32> {
    let s = tile.side;
    let mut data = vec![0f32; 3 * s * s];
    let (w, h) = (img.width() as usize, img.height() as usize);
    for ty in 0..s {
        for tx in 0..s {
            let (x, y) = (tile.x + tx, tile.y + ty);
            let px = if x < w && y < h { img.get_pixel(x as u32, y as u32).0 } else { pad };
            for c in 0..3 {
                data[(c * s + ty) * s + tx] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, s, s], data).expect("tile shape")
}

/// One `(scale, cell, anchor)` prediction of one tile, in slide coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub prob: f64,
    /// Grid point of the predicting cell.
    pub x: f64,
    pub y: f64,
    pub bbox: BBox,
    pub tile: usize,
    /// 0 for stride 32, 1 for stride 16.
    pub scale: usize,
    pub cell: usize,
    pub anchor: usize,
}

/// Fused feature maps of one tile at both scales.
#[derive(Clone, Debug)]
pub struct TileMaps {
    pub fused: [Tensor<f32>; 2],
    pub grids: [GridSpec; 2],
}

/// All pre-suppression candidates of a slide plus the maps their vectors come from.
#[derive(Clone, Debug, Default)]
pub struct EncodedSlide {
    pub candidates: Vec<Candidate>,
    pub maps: Vec<TileMaps>,
}

impl EncodedSlide {
    /// Stride-32 and stride-16 cells `(row, col)` sampled for a candidate. A stride-16
    /// cell `(r, c)` reads stride-32 cell `(r/2, c/2)`; a stride-32 cell `(r, c)` reads
    /// the stride-16 cell under its grid point, `(2r+1, 2c+1)`.
    pub fn feature_cells(&self, c: &Candidate) -> [(usize, usize); 2] {
        let g = &self.maps[c.tile].grids[c.scale];
        let (r, col) = (c.cell / g.width, c.cell % g.width);
        let g4 = &self.maps[c.tile].grids[1];
        if c.scale == 0 {
            [(r, col), ((2 * r + 1).min(g4.height - 1), (2 * col + 1).min(g4.width - 1))]
        } else {
            [(r / 2, col / 2), (r, col)]
        }
    }

    /// Concatenated stride-32 and stride-16 fused vectors at the candidate's location.
    pub fn feature(&self, c: &Candidate) -> Vec<f32> {
        let cells = self.feature_cells(c);
        let maps = &self.maps[c.tile];
        let mut out = Vec::with_capacity(maps.fused[0].shape()[0] + maps.fused[1].shape()[0]);
        for s in 0..2 {
            let (ch, h, w) = (maps.fused[s].shape()[0], maps.fused[s].shape()[1], maps.fused[s].shape()[2]);
            let (r, col) = cells[s];
            let d = maps.fused[s].data();
            out.extend((0..ch).map(|k| d[(k * h + r) * w + col]));
        }
        out
    }

    pub fn feature_dim(&self) -> usize {
        self.maps.first().map_or(0, |m| m.fused[0].shape()[0] + m.fused[1].shape()[0])
    }
}

/// Runs the detector over every tile and decodes all slots at both scales with no
/// probability threshold. Tiles are processed in parallel; output order follows
/// the tile list.
pub fn encode_tiles(model: &Yolco, img: &RgbImage, tiles: &[TileRecord], pad: [u8; 3]) -> Result<EncodedSlide> {
    let per_tile: Vec<Result<(Vec<Candidate>, TileMaps)>> = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, tile)| {
            let out = model.infer(&tile_tensor(img, tile, pad))?;
            let mut cands = Vec::new();
            for (s, so) in out.iter().enumerate() {
                for d in decode_predictions(&so.boxes, &so.cls, &so.grid, &model.config.anchors, 0.0)? {
                    let (gx, gy) = so.grid.point(d.cell);
                    cands.push(Candidate {
                        prob: d.prob,
                        x: gx + tile.x as f64,
                        y: gy + tile.y as f64,
                        bbox: d.bbox.translate(tile.x as f64, tile.y as f64),
                        tile: ti,
                        scale: s,
                        cell: d.cell,
                        anchor: d.anchor,
                    });
                }
            }
            let [o5, o4] = out;
            Ok((cands, TileMaps { fused: [o5.fused, o4.fused], grids: [o5.grid, o4.grid] }))
        })
        .collect();
    let mut enc = EncodedSlide::default();
    for r in per_tile {
        let (c, m) = r?;
        enc.candidates.extend(c);
        enc.maps.push(m);
    }
    Ok(enc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectMode {
    /// Highest probabilities, spaced at least `D` apart.
    Topn,
    /// Up to ten in-box candidates for each of the top-`N` boxes.
    Bbox,
}

impl std::str::FromStr for CollectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topn" => Ok(Self::Topn),
            "bbox" => Ok(Self::Bbox),
            _ => Err(invalid("collect mode", format!("unknown mode {s:?}, expected topn|bbox"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionConfig {
    pub n: usize,
    pub d: f64,
    pub mode: CollectMode,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self { n: 100, d: 0.0, mode: CollectMode::Topn }
    }
}

/// Vectors gathered per seed box in bbox mode.
pub const BBOX_VECTORS: usize = 10;

/// Candidate indices by descending probability, ties by index.
pub fn rank_by_prob(cands: &[Candidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].prob.total_cmp(&cands[a].prob).then(a.cmp(&b)));
    order
}

/// Greedy top-`N` selection with minimum pairwise grid-point distance `D`.
pub fn select_topn(cands: &[Candidate], n: usize, d: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_by_prob(cands) {
        if kept.len() == n {
            break;
        }
        let c = &cands[i];
        if d <= 0.0 || kept.iter().all(|&k| (cands[k].x - c.x).hypot(cands[k].y - c.y) >= d) {
            kept.push(i);
        }
    }
    kept
}

/// For each of the top-`N` candidates: the seed itself, then the most probable other
/// candidates whose grid point lies inside the seed's decoded box, up to
/// [`BBOX_VECTORS`] in all. The union is ordered by descending probability.
pub fn select_bbox(cands: &[Candidate], n: usize) -> Vec<usize> {
    let order = rank_by_prob(cands);
    let mut picked = Vec::new();
    for &seed in order.iter().take(n) {
        let b = &cands[seed].bbox;
        picked.push(seed);
        picked.extend(
            order.iter().copied().filter(|&i| i != seed && b.contains(cands[i].x, cands[i].y)).take(BBOX_VECTORS - 1),
        );
    }
    picked.sort_by(|&a, &b| cands[b].prob.total_cmp(&cands[a].prob).then(a.cmp(&b)));
    picked
}

/// Builds the slide's feature sequence under `cfg`.
pub fn collect(enc: &EncodedSlide, cfg: &CollectionConfig, slide_id: &str, label: Option<bool>) -> Result<FeatureSequence> {
    if enc.candidates.is_empty() {
        return Err(invalid("collect", format!("slide {slide_id} has no encoded candidates")));
    }
    if cfg.n == 0 {
        return Err(invalid("collect", "N must be at least 1"));
    }
    let idx = match cfg.mode {
        CollectMode::Topn => select_topn(&enc.candidates, cfg.n, cfg.d),
        CollectMode::Bbox => select_bbox(&enc.candidates, cfg.n),
    };
    let rows = idx
        .into_iter()
        .map(|i| {
            let c = &enc.candidates[i];
            FeatureRow {
                prob: c.prob as f32,
                x: c.bbox.cx as f32,
                y: c.bbox.cy as f32,
                w: c.bbox.w as f32,
                h: c.bbox.h as f32,
                features: enc.feature(c),
            }
        })
        .collect();
    Ok(FeatureSequence { slide_id: slide_id.to_string(), label, dim: enc.feature_dim(), rows })
}

/// Suppressed slide-level detections from a collected sequence, most probable first.
pub fn wsi_detections(seq: &FeatureSequence, iou_thresh: f64) -> Result<Vec<(BBox, f64)>> {
    if seq.rows.is_empty() {
        return Err(invalid("wsi_detections", "empty sequence"));
    }
    let boxes: Vec<BBox> = seq.rows.iter().map(FeatureRow::bbox).collect::<Result<_>>()?;
    let probs: Vec<f64> = seq.rows.iter().map(|r| r.prob as f64).collect();
    Ok(nms(&boxes, &probs, iou_thresh).into_iter().map(|i| (boxes[i], probs[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thumbnail_level_clamps() {
        assert_eq!(thumbnail_level(4096, 4096), 8);
        assert_eq!(thumbnail_level(2048, 2048), 8);
        assert_eq!(thumbnail_level(256, 256), 5);
    }

    #[test]
    fn single_spike_histogram() {
        let mut h = [0u64; 256];
        h[77] = 5;
        assert_eq!(otsu_threshold(&h).unwrap(), 77);
    }
}
