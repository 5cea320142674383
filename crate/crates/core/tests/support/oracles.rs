//! Brute-force reference implementations and randomized equivalence runners.
//! Every runner returns the number of instances checked, or the first mismatch.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yolco_autograd::Tensor;
use yolco_core::geometry::{
    decode_predictions, encode_targets, nms, AnchorSet, Annotation, BBox, GridSpec,
};
use yolco_core::metrics::{average_precision, roc_auc, GroundTruth, ScoredBox};
use yolco_core::synth::{generate_synthetic_slide, SlideParams};
use yolco_core::wsi::{gray_histogram, otsu_threshold, select_bbox, select_topn, tile_slide, Candidate, ForegroundMask, BBOX_VECTORS};

pub type Outcome = Result<usize, String>;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Overlap area of two boxes from their corner intervals.
pub fn overlap_area(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0);
    let iy = (a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0);
    ix.max(0.0) * iy.max(0.0)
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let i = overlap_area(a, b);
    if i <= 0.0 {
        0.0
    } else {
        i / (a.w * a.h + b.w * b.h - i)
    }
}

/// Repeatedly keeps the most probable remaining box (lowest index on ties) and
/// discards everything overlapping it by more than `thr`.
pub fn nms_ref(boxes: &[BBox], probs: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if probs[i] > probs[best] || (probs[i] == probs[best] && i < best) {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && iou_ref(&boxes[i], &boxes[best]) <= thr);
    }
    kept
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    // Coarse coordinates make exact overlaps and equal IoUs reachable.
    let q = |v: f64| (v * 2.0).round() / 2.0;
    BBox::new(q(rng.random_range(0.0..extent)), q(rng.random_range(0.0..extent)), q(rng.random_range(1.0..extent / 2.0)), q(rng.random_range(1.0..extent / 2.0)))
        .unwrap()
}

pub fn check_nms(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_for(seed);
    for case in 0..instances {
        let n = rng.random_range(0..40);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 40.0)).collect();
        let probs: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        let thr = [0.0, 0.3, 0.5, 0.7, rng.random()][rng.random_range(0..5)];
        let (got, want) = (nms(&boxes, &probs, thr), nms_ref(&boxes, &probs, thr));
        if got != want {
            return Err(format!("nms case {case}: {got:?} != {want:?}"));
        }
    }
    Ok(instances)
}

/// Per annotation: nearest grid point by exhaustive scan and best anchor by
/// exhaustive shape-IoU scan; colliding slots go to the larger box, then the earlier one.
pub fn assign_ref(anns: &[Annotation], grid: &GridSpec, anchors: &AnchorSet) -> Vec<(usize, usize, usize)> {
    let s = grid.stride as f64;
    let mut slots: Vec<(usize, usize, usize)> = Vec::new();
    for (m, a) in anns.iter().enumerate() {
        let mut cell = 0;
        let mut best_d = f64::INFINITY;
        for r in 0..grid.height {
            for c in 0..grid.width {
                let (px, py) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                let d = (a.bbox.cx - px).powi(2) + (a.bbox.cy - py).powi(2);
                if d < best_d {
                    best_d = d;
                    cell = r * grid.width + c;
                }
            }
        }
        let mut anchor = 0;
        let mut best_iou = -1.0;
        for (k, &(aw, ah)) in anchors.sizes.iter().enumerate() {
            let inter = a.bbox.w.min(aw) * a.bbox.h.min(ah);
            let iou = inter / (a.bbox.w * a.bbox.h + aw * ah - inter);
            if iou > best_iou {
                best_iou = iou;
                anchor = k;
            }
        }
        match slots.iter_mut().find(|t| t.1 == cell && t.2 == anchor) {
            Some(t) => {
                if a.bbox.w * a.bbox.h > anns[t.0].bbox.w * anns[t.0].bbox.h {
                    t.0 = m;
                }
            }
            None => slots.push((m, cell, anchor)),
        }
    }
    slots.sort();
    slots
}

pub fn random_anchors(rng: &mut ChaCha8Rng) -> AnchorSet {
    let na = rng.random_range(1..=5);
    AnchorSet::new((0..na).map(|_| ((rng.random_range(2..40) * 2) as f64, (rng.random_range(2..40) * 2) as f64)).collect()).unwrap()
}

pub fn check_assignment(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_for(seed);
    for case in 0..instances {
        let stride = [8, 16, 32][rng.random_range(0..3)];
        let grid = GridSpec::new(rng.random_range(1..=8), rng.random_range(1..=8), stride);
        let anchors = random_anchors(&mut rng);
        let n = if case == 0 { 200 } else { rng.random_range(1..=40) };
        let (wmax, hmax) = ((grid.width * stride) as f64, (grid.height * stride) as f64);
        let anns: Vec<Annotation> = (0..n)
            .map(|_| {
                // Half-stride multiples land exactly between grid points.
                let snap = rng.random_bool(0.3);
                let pick = |rng: &mut ChaCha8Rng, max: f64| {
                    if snap {
                        (rng.random_range(0..=(2.0 * max / stride as f64) as usize) as f64) * stride as f64 / 2.0
                    } else {
                        rng.random_range(0.0..=max)
                    }
                };
                let (cx, cy) = (pick(&mut rng, wmax), pick(&mut rng, hmax));
                let w = (rng.random_range(2..60) * 2) as f64;
                let h = if rng.random_bool(0.2) { w } else { (rng.random_range(2..60) * 2) as f64 };
                Annotation::lesion(BBox::new(cx, cy, w, h).unwrap())
            })
            .collect();
        let got = encode_targets(&anns, &grid, &anchors).map_err(|e| format!("assignment case {case}: {e}"))?;
        let mut got: Vec<(usize, usize, usize)> = got.targets.iter().map(|t| (t.annotation, t.cell, t.anchor)).collect();
        got.sort();
        let want = assign_ref(&anns, &grid, &anchors);
        if got != want {
            return Err(format!("assignment case {case}: {got:?} != {want:?}"));
        }
    }
    Ok(instances)
}

fn random_candidates(rng: &mut ChaCha8Rng, n: usize) -> Vec<Candidate> {
    (0..n)
        .map(|i| {
            let (x, y) = ((rng.random_range(0..20) * 4) as f64, (rng.random_range(0..20) * 4) as f64);
            let bbox = BBox::new(x + rng.random_range(-6.0..6.0), y + rng.random_range(-6.0..6.0), rng.random_range(2.0..40.0), rng.random_range(2.0..40.0)).unwrap();
            Candidate { prob: rng.random_range(0..10) as f64 / 10.0, x, y, bbox, tile: 0, scale: i % 2, cell: i, anchor: 0 }
        })
        .collect()
}

fn rank(cands: &[Candidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    // insertion sort: stable on index, descending probability
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && cands[order[j]].prob > cands[order[j - 1]].prob {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    order
}

/// Checks the defining properties of greedy spaced selection: output in rank order,
/// pairwise spacing at least `d`, and every skipped candidate ranked above the last
/// accepted one (or any skipped candidate, when fewer than `n` were accepted) lies
/// closer than `d` to an accepted candidate of higher rank.
pub fn topn_ref(cands: &[Candidate], n: usize, d: f64) -> Vec<usize> {
    let order = rank(cands);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() == n {
            break;
        }
        let far = kept.iter().all(|&k| {
            let dist = ((cands[k].x - cands[i].x).powi(2) + (cands[k].y - cands[i].y).powi(2)).sqrt();
            dist >= d
        });
        if d <= 0.0 || far {
            kept.push(i);
        }
    }
    kept
}

fn topn_properties(cands: &[Candidate], kept: &[usize], n: usize, d: f64) -> Result<(), String> {
    let order = rank(cands);
    let pos = |i: usize| order.iter().position(|&o| o == i).unwrap();
    let dist = |a: usize, b: usize| (cands[a].x - cands[b].x).hypot(cands[a].y - cands[b].y);
    if kept.len() > n || kept.windows(2).any(|w| pos(w[0]) >= pos(w[1])) {
        return Err("not in rank order or too long".into());
    }
    for (a, &i) in kept.iter().enumerate() {
        for &j in &kept[a + 1..] {
            if d > 0.0 && dist(i, j) < d {
                return Err(format!("accepted {i} and {j} closer than {d}"));
            }
        }
    }
    let horizon = if kept.len() == n { kept.last().map_or(0, |&l| pos(l)) } else { order.len() };
    for (p, &i) in order.iter().enumerate().take(horizon) {
        if kept.contains(&i) {
            continue;
        }
        if !kept.iter().any(|&k| pos(k) < p && dist(k, i) < d) {
            return Err(format!("candidate {i} was skipped without a blocking neighbour"));
        }
    }
    Ok(())
}

pub fn check_topn(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_for(seed);
    for case in 0..instances {
        let count = rng.random_range(1..60);
        let cands = random_candidates(&mut rng, count);
        let n = rng.random_range(1..30);
        let d = [0.0, 4.0, 8.0, rng.random_range(0.0..20.0)][rng.random_range(0..4)];
        let got = select_topn(&cands, n, d);
        let want = topn_ref(&cands, n, d);
        if got != want {
            return Err(format!("topn case {case}: {got:?} != {want:?}"));
        }
        topn_properties(&cands, &got, n, d).map_err(|e| format!("topn case {case}: {e}"))?;
    }
    Ok(instances)
}

/// Seeds are the `n` best-ranked candidates; each contributes itself and its
/// best-ranked others whose point is inside its box (closed), up to the cap; the
/// concatenation is then ordered by rank.
pub fn bbox_ref(cands: &[Candidate], n: usize) -> Vec<usize> {
    let order = rank(cands);
    let mut out = Vec::new();
    for &s in order.iter().take(n) {
        let b = &cands[s].bbox;
        out.push(s);
        let (x0, x1, y0, y1) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
        let inside: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| i != s && cands[i].x >= x0 && cands[i].x <= x1 && cands[i].y >= y0 && cands[i].y <= y1)
            .collect();
        out.extend(inside.into_iter().take(BBOX_VECTORS - 1));
    }
    let pos: Vec<usize> = {
        let mut p = vec![0; cands.len()];
        for (k, &i) in order.iter().enumerate() {
            p[i] = k;
        }
        p
    };
    out.sort_by_key(|&i| pos[i]);
    out
}

pub fn check_bbox(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_for(seed);
    for case in 0..instances {
        let count = rng.random_range(1..60);
        let cands = random_candidates(&mut rng, count);
        let n = rng.random_range(1..12);
        let got = select_bbox(&cands, n);
        let want = bbox_ref(&cands, n);
        if got != want {
            return Err(format!("bbox case {case}: {got:?} != {want:?}"));
        }
        if got.len() > BBOX_VECTORS * n {
            return Err(format!("bbox case {case}: {} vectors for {n} seeds", got.len()));
        }
    }
    Ok(instances)
}

/// Exhaustive Otsu: every split `t` (lower class `v < t`) scored from sums taken
/// afresh; the first maximum wins; a single occupied level is returned as is.
pub fn otsu_ref(hist: &[u64; 256]) -> u8 {
    let occupied: Vec<usize> = (0..256).filter(|&v| hist[v] > 0).collect();
    if occupied.len() == 1 {
        return occupied[0] as u8;
    }
    let mut best = (0usize, -1.0f64);
    for t in 0..256 {
        let (w0, s0): (f64, f64) = (0..t).fold((0.0, 0.0), |(w, s), v| (w + hist[v] as f64, s + (v as f64) * hist[v] as f64));
        let (w1, s1): (f64, f64) = (t..256).fold((0.0, 0.0), |(w, s), v| (w + hist[v] as f64, s + (v as f64) * hist[v] as f64));
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let var = w0 * w1 * (s0 / w0 - s1 / w1).powi(2);
        if var > best.1 {
            best = (t, var);
        }
    }
    best.0 as u8
}

pub fn check_otsu(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_for(seed);
    for case in 0..instances {
        let mut hist = [0u64; 256];
        match rng.random_range(0..3) {
            0 => hist[rng.random_range(0..256)] = rng.random_range(1..100),
            1 => {
                for _ in 0..rng.random_range(1..6) {
                    let (c, spread) = (rng.random_range(0..256i32), rng.random_range(0..20i32));
                    for _ in 0..rng.random_range(1..200) {
                        let v = (c + rng.random_range(-spread..=spread)).clamp(0, 255);
                        hist[v as usize] += 1;
                    }
                }
            }
            _ => {
                for h in hist.iter_mut() {
                    if rng.random_bool(0.1) {
                        *h = rng.random_range(1..5);
                    }
                }
                if hist.iter().all(|&h| h == 0) {
                    hist[7] = 1;
                }
            }
        }
        let got = otsu_threshold(&hist).map_err(|e| format!("otsu case {case}: {e}"))?;
        let want = otsu_ref(&hist);
        if got != want {
            return Err(format!("otsu case {case}: {got} != {want}"));
        }
    }
    Ok(instances)
}

/// Greedy matching by descending score (input order on ties), each detection taking
/// the unmatched same-image truth of highest IoU (lowest index on ties); then the
/// 101-point interpolated precision with exact integer recall comparisons.
pub fn ap_ref(dets: &[ScoredBox], gts: &[GroundTruth], thr: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut prefix = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let mut best: Option<usize> = None;
        for j in 0..gts.len() {
            if used[j] || gts[j].image != dets[i].image {
                continue;
            }
            let iou = iou_ref(&dets[i].bbox, &gts[j].bbox);
            if iou >= thr && best.is_none_or(|b| iou > iou_ref(&dets[i].bbox, &gts[b].bbox)) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            used[j] = true;
            tp += 1;
        }
        prefix.push((tp, k + 1));
    }
    let g = gts.len();
    let mut sum = 0.0;
    for level in 0..=100usize {
        let p = prefix
            .iter()
            .filter(|&&(tp, _)| 100 * tp >= level * g)
            .map(|&(tp, k)| tp as f64 / k as f64)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

pub fn check_ap(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_for(seed);
    for case in 0..instances {
        let images = rng.random_range(1..4);
        let gts: Vec<GroundTruth> = (0..rng.random_range(1..8))
            .map(|_| GroundTruth { image: rng.random_range(0..images), bbox: random_box(&mut rng, 40.0) })
            .collect();
        let mut dets: Vec<ScoredBox> = Vec::new();
        for _ in 0..rng.random_range(0..16) {
            let bbox = if rng.random_bool(0.6) && !gts.is_empty() {
                let g = gts[rng.random_range(0..gts.len())];
                BBox::new(g.bbox.cx + rng.random_range(-3.0..3.0), g.bbox.cy + rng.random_range(-3.0..3.0), g.bbox.w * rng.random_range(0.7..1.3), g.bbox.h * rng.random_range(0.7..1.3)).unwrap()
            } else {
                random_box(&mut rng, 40.0)
            };
            dets.push(ScoredBox { image: rng.random_range(0..images), bbox, score: rng.random_range(0..6) as f64 / 6.0 });
        }
        let thr = [0.5, 0.75, rng.random_range(0.05..0.95)][rng.random_range(0..3)];
        let got = average_precision(&dets, &gts, thr).map_err(|e| format!("ap case {case}: {e}"))?;
        let want = ap_ref(&dets, &gts, thr);
        if (got - want).abs() > 1e-9 {
            return Err(format!("ap case {case}: {got} != {want}"));
        }
    }
    Ok(instances)
}

/// Probability that a random positive outscores a random negative, ties counting half.
pub fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

pub fn check_auc(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng_for(seed);
    for case in 0..instances {
        let n = rng.random_range(2..50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let levels = rng.random_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let got = roc_auc(&scores, &labels).map_err(|e| format!("auc case {case}: {e}"))?;
        let want = mann_whitney(&scores, &labels);
        if (got - want).abs() > 1e-9 {
            return Err(format!("auc case {case}: {got} != {want}"));
        }
    }
    Ok(instances)
}

/// Writes a unit-confidence head holding each target's offsets, decodes it and
/// compares every recovered box with its annotation (relative tolerance `tol`).
pub fn check_round_trip(instances: usize, seed: u64, tol: f64) -> Outcome {
    let mut rng = rng_for(seed);
    let mut boxes_checked = 0;
    for case in 0..instances {
        let stride = [8, 16, 32][rng.random_range(0..3)];
        let grid = GridSpec::new(rng.random_range(1..=12), rng.random_range(1..=12), stride);
        let anchors = random_anchors(&mut rng);
        let na = anchors.len();
        let (wmax, hmax) = ((grid.width * stride) as f64, (grid.height * stride) as f64);
        let anns: Vec<Annotation> = (0..rng.random_range(1..=10))
            .map(|_| {
                let b = BBox::new(rng.random_range(0.0..=wmax), rng.random_range(0.0..=hmax), rng.random_range(1.0..120.0), rng.random_range(1.0..120.0));
                Annotation::lesion(b.unwrap())
            })
            .collect();
        let asg = encode_targets(&anns, &grid, &anchors).map_err(|e| format!("round trip case {case}: {e}"))?;
        let cells = grid.cells();
        let mut yb = vec![0f32; 4 * na * cells];
        let mut yc = vec![-30f32; na * cells];
        for t in &asg.targets {
            for (k, v) in [t.q.0, t.q.1, t.v.0, t.v.1].into_iter().enumerate() {
                yb[(4 * t.anchor + k) * cells + t.cell] = v as f32;
            }
            yc[t.anchor * cells + t.cell] = 30.0;
        }
        let yb = Tensor::from_vec(&[4 * na, grid.height, grid.width], yb).unwrap();
        let yc = Tensor::from_vec(&[na, grid.height, grid.width], yc).unwrap();
        let dets = decode_predictions(&yb, &yc, &grid, &anchors, 0.5).map_err(|e| e.to_string())?;
        if dets.len() != asg.len() {
            return Err(format!("round trip case {case}: {} detections for {} targets", dets.len(), asg.len()));
        }
        for t in &asg.targets {
            let d = dets.iter().find(|d| d.cell == t.cell && d.anchor == t.anchor).ok_or("target slot not decoded")?;
            let a = &anns[t.annotation].bbox;
            let scale = a.w.max(a.h).max(1.0);
            let rel = |got: f64, want: f64, s: f64| (got - want).abs() / s;
            let errs = [rel(d.bbox.cx, a.cx, scale.max(a.cx.abs())), rel(d.bbox.cy, a.cy, scale.max(a.cy.abs())), rel(d.bbox.w, a.w, a.w), rel(d.bbox.h, a.h, a.h)];
            if errs.iter().any(|&e| !(e <= tol)) {
                return Err(format!("round trip case {case}: {:?} vs {:?} (errors {errs:?})", d.bbox, a));
            }
            boxes_checked += 1;
        }
    }
    Ok(boxes_checked)
}

/// Draws slides of random size and density, tiles them without overlap and counts,
/// for every foreground pixel, the tiles covering it (must be exactly one). Also
/// checks pairwise tile disjointness and that every tile holds foreground.
pub fn check_tiling_partition(slides: usize, seed: u64) -> Outcome {
    let mut rng = rng_for(seed);
    for case in 0..slides {
        let side = rng.random_range(4..=12) * 32;
        let params = SlideParams {
            side,
            cell_density: rng.random_range(0.5..2.5),
            lesion_count: rng.random_range(0..3),
            ..SlideParams::default()
        };
        let slide = generate_synthetic_slide(rng.random(), &params).map_err(|e| e.to_string())?;
        let thumb_level = yolco_core::wsi::thumbnail_level(side, side);
        let t = otsu_threshold(&gray_histogram(&yolco_core::wsi::thumbnail(&slide.image, thumb_level))).map_err(|e| e.to_string())?;
        let mask = ForegroundMask::from_image(&slide.image, t);
        let tile = rng.random_range(1..=side / 32) * 32;
        let tiles = tile_slide(&mask, tile, 0).map_err(|e| format!("tiling case {case}: {e}"))?;
        let mut cover = vec![0u8; side * side];
        for tr in &tiles {
            let mut any = false;
            for y in tr.y..(tr.y + tr.side).min(side) {
                for x in tr.x..(tr.x + tr.side).min(side) {
                    cover[y * side + x] += 1;
                    any |= mask.get(x, y);
                }
            }
            if !any {
                return Err(format!("tiling case {case}: tile {tr:?} has no foreground"));
            }
        }
        for y in 0..side {
            for x in 0..side {
                let c = cover[y * side + x];
                if c > 1 {
                    return Err(format!("tiling case {case}: pixel ({x}, {y}) covered {c} times"));
                }
                if mask.get(x, y) && c != 1 {
                    return Err(format!("tiling case {case}: foreground pixel ({x}, {y}) uncovered"));
                }
            }
        }
        for (i, a) in tiles.iter().enumerate() {
            for b in &tiles[i + 1..] {
                let ox = (a.x + a.side).min(b.x + b.side) as i64 - a.x.max(b.x) as i64;
                let oy = (a.y + a.side).min(b.y + b.side) as i64 - a.y.max(b.y) as i64;
                if ox > 0 && oy > 0 {
                    return Err(format!("tiling case {case}: tiles {a:?} and {b:?} overlap"));
                }
            }
        }
    }
    Ok(slides)
}
