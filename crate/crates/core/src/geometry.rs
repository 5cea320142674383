//! Boxes, anchors, grid assignment and suppression.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use yolco_autograd::Tensor;

use crate::error::{invalid, Result};

/// Axis-aligned box given by center and size, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(invalid("BBox::new", format!("size must be positive, got {w}x{h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Closed-interval membership test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self { cx: self.cx + dx, cy: self.cy + dy, ..*self }
    }
}

/// A ground-truth lesion box; `label` is 1 for every annotated lesion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(flatten)]
    pub bbox: BBox,
    pub label: u8,
}

impl Annotation {
    pub fn lesion(bbox: BBox) -> Self {
        Self { bbox, label: 1 }
    }
}

/// Parses one annotation per line; blank lines are skipped.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let a: Annotation = serde_json::from_str(line)?;
        BBox::new(a.bbox.cx, a.bbox.cy, a.bbox.w, a.bbox.h)?;
        out.push(a);
    }
    Ok(out)
}

pub fn format_annotations(annotations: &[Annotation]) -> String {
    let mut s = String::new();
    for a in annotations {
        s.push_str(&serde_json::to_string(a).expect("annotation serializes"));
        s.push('\n');
    }
    s
}

/// Prior box sizes `(w, h)` shared by every grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorSet {
    pub sizes: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(sizes: Vec<(f64, f64)>) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(invalid("AnchorSet::new", "anchors must be non-empty with positive sizes"));
        }
        Ok(Self { sizes })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Index of the anchor with the highest shape IoU; ties go to the lower index.
    pub fn best_match(&self, w: f64, h: f64) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &(aw, ah)) in self.sizes.iter().enumerate() {
            let iou = shape_iou_unchecked((w, h), (aw, ah));
            if iou > best.1 {
                best = (i, iou);
            }
        }
        best.0
    }
}

/// Cell layout of one output scale. Grid point `c = row * width + col` sits at the
/// center of its cell, `((col + 0.5) * stride, (row + 0.5) * stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, stride: usize) -> Self {
        Self { width, height, stride }
    }

    /// Grid covering an image of the given side at `stride`.
    pub fn for_image(side_w: usize, side_h: usize, stride: usize) -> Self {
        Self { width: side_w / stride, height: side_h / stride, stride }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn point(&self, cell: usize) -> (f64, f64) {
        let (row, col) = (cell / self.width, cell % self.width);
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// Index of the grid point nearest to `(x, y)`; ties go to the lower index.
    pub fn nearest(&self, x: f64, y: f64) -> usize {
        let col = nearest_axis(x, self.width, self.stride as f64);
        let row = nearest_axis(y, self.height, self.stride as f64);
        row * self.width + col
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let s = self.stride as f64;
        x >= 0.0 && y >= 0.0 && x <= self.width as f64 * s && y <= self.height as f64 * s
    }
}

fn nearest_axis(x: f64, n: usize, stride: f64) -> usize {
    let dist = |i: usize| (x - (i as f64 + 0.5) * stride).powi(2);
    let mut i = ((x / stride).floor().max(0.0) as usize).min(n - 1);
    while i > 0 && dist(i - 1) <= dist(i) {
        i -= 1;
    }
    while i + 1 < n && dist(i + 1) < dist(i) {
        i += 1;
    }
    i
}

/// One annotation's supervision at one scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub annotation: usize,
    pub cell: usize,
    pub anchor: usize,
    /// Center offset from the grid point, in cells.
    pub q: (f64, f64),
    /// Log size ratio to the anchor.
    pub v: (f64, f64),
}

/// Offsets and responsible `(cell, anchor)` pairs for one scale, in annotation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    pub targets: Vec<Target>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Flat `anchor * cells + cell` index of each responsible slot.
    pub fn slots(&self, grid: &GridSpec) -> Vec<usize> {
        self.targets.iter().map(|t| t.anchor * grid.cells() + t.cell).collect()
    }
}

pub fn shape_iou(s1: (f64, f64), s2: (f64, f64)) -> Result<f64> {
    if !(s1.0 > 0.0 && s1.1 > 0.0 && s2.0 > 0.0 && s2.1 > 0.0) {
        return Err(invalid("shape_iou", format!("sizes must be positive, got {s1:?} and {s2:?}")));
    }
    Ok(shape_iou_unchecked(s1, s2))
}

fn shape_iou_unchecked(s1: (f64, f64), s2: (f64, f64)) -> f64 {
    let inter = s1.0.min(s2.0) * s1.1.min(s2.1);
    inter / (s1.0 * s1.1 + s2.0 * s2.1 - inter)
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Lloyd's k-means on box sizes with distance `1 - shape_iou`.
///
/// Sizes are sorted before seeding, so the result does not depend on input order.
/// An emptied cluster is re-seeded at the point farthest from its centroid.
/// Returned anchors are sorted by area.
pub fn kmeans_anchors(sizes: &[(f64, f64)], k: usize, max_iters: usize, seed: u64) -> Result<AnchorSet> {
    if k == 0 || sizes.len() < k {
        return Err(invalid("kmeans_anchors", format!("need at least k={k} sizes, got {}", sizes.len())));
    }
    if sizes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
        return Err(invalid("kmeans_anchors", "sizes must be positive"));
    }
    let mut pts = sizes.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let dist = |a: (f64, f64), b: (f64, f64)| 1.0 - shape_iou_unchecked(a, b);

    // k-means++ seeding
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![pts[rng.random_range(0..pts.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = pts
            .iter()
            .map(|&p| centers.iter().map(|&c| dist(p, c)).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = pts.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..pts.len())
        };
        centers.push(pts[pick]);
    }

    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, &p) in pts.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (j, &c) in centers.iter().enumerate() {
                let d = dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&p, &a) in pts.iter().zip(&assign) {
            sums[a].0 += p.0;
            sums[a].1 += p.1;
            sums[a].2 += 1;
        }
        for j in 0..k {
            if sums[j].2 > 0 {
                centers[j] = (sums[j].0 / sums[j].2 as f64, sums[j].1 / sums[j].2 as f64);
            }
        }
        for j in 0..k {
            if sums[j].2 == 0 {
                let far = (0..pts.len())
                    .max_by(|&a, &b| dist(pts[a], centers[assign[a]]).total_cmp(&dist(pts[b], centers[assign[b]])))
                    .expect("non-empty");
                centers[j] = pts[far];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    AnchorSet::new(centers)
}

/// Assigns every annotation to its nearest grid point and best-shaped anchor.
///
/// When two annotations claim the same `(cell, anchor)` slot the larger box keeps it.
pub fn encode_targets(annotations: &[Annotation], grid: &GridSpec, anchors: &AnchorSet) -> Result<Assignment> {
    let mut targets: Vec<Target> = Vec::with_capacity(annotations.len());
    let stride = grid.stride as f64;
    for (m, ann) in annotations.iter().enumerate() {
        let b = &ann.bbox;
        if !grid.covers(b.cx, b.cy) {
            return Err(invalid(
                "encode_targets",
                format!("center ({}, {}) lies outside the {}x{} grid", b.cx, b.cy, grid.width, grid.height),
            ));
        }
        let cell = grid.nearest(b.cx, b.cy);
        let (gx, gy) = grid.point(cell);
        let anchor = anchors.best_match(b.w, b.h);
        let (aw, ah) = anchors.sizes[anchor];
        let t = Target {
            annotation: m,
            cell,
            anchor,
            q: ((b.cx - gx) / stride, (b.cy - gy) / stride),
            v: ((b.w / aw).ln(), (b.h / ah).ln()),
        };
        match targets.iter().position(|o| o.cell == cell && o.anchor == anchor) {
            Some(i) => {
                if b.area() > annotations[targets[i].annotation].bbox.area() {
                    targets[i] = t;
                }
            }
            None => targets.push(t),
        }
    }
    targets.sort_by_key(|t| t.annotation);
    Ok(Assignment { targets })
}

/// A decoded prediction at one `(cell, anchor)` slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub prob: f64,
    pub cell: usize,
    pub anchor: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverts [`encode_targets`] on raw head outputs.
///
/// `y_box` is `[4 * n_a, h, w]` with channels `(qx, qy, vx, vy)` per anchor and
/// `y_cls` is `[n_a, h, w]` of logits. Slots are visited anchor-major, then row-major
/// over cells; those with probability `>= tau` are returned.
pub fn decode_predictions(
    y_box: &Tensor<f32>,
    y_cls: &Tensor<f32>,
    grid: &GridSpec,
    anchors: &AnchorSet,
    tau: f64,
) -> Result<Vec<Detection>> {
    let na = anchors.len();
    let (h, w) = (grid.height, grid.width);
    if y_box.shape() != [4 * na, h, w] || y_cls.shape() != [na, h, w] {
        return Err(invalid(
            "decode_predictions",
            format!("head shapes {:?}/{:?} do not match {na} anchors on {h}x{w}", y_box.shape(), y_cls.shape()),
        ));
    }
    let cells = grid.cells();
    let (bx, cl) = (y_box.data(), y_cls.data());
    let s = grid.stride as f64;
    let mut out = Vec::new();
    for a in 0..na {
        let (aw, ah) = anchors.sizes[a];
        for cell in 0..cells {
            let prob = sigmoid(cl[a * cells + cell] as f64);
            if prob < tau {
                continue;
            }
            let at = |k: usize| bx[(4 * a + k) * cells + cell] as f64;
            let (gx, gy) = grid.point(cell);
            let bbox = BBox { cx: gx + at(0) * s, cy: gy + at(1) * s, w: aw * at(2).exp(), h: ah * at(3).exp() };
            out.push(Detection { bbox, prob, cell, anchor: a });
        }
    }
    Ok(out)
}

/// Greedy suppression by descending probability; equal probabilities keep input order.
/// Returns indices into the input in kept order.
pub fn nms(boxes: &[BBox], probs: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| box_iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}
