//! Seeded synthetic smear slides: a stained disc of benign cells on a bright
//! background, with high nucleus-to-cytoplasm lesion cells on positive slides.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Annotation, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StainPalette {
    pub background: [u8; 3],
    pub smear: [u8; 3],
    pub cytoplasm: [u8; 3],
    pub nucleus: [u8; 3],
    pub lesion_cytoplasm: [u8; 3],
    pub lesion_nucleus: [u8; 3],
}

impl Default for StainPalette {
    fn default() -> Self {
        Self {
            background: [238, 235, 240],
            smear: [222, 200, 216],
            cytoplasm: [200, 168, 198],
            nucleus: [120, 84, 150],
            lesion_cytoplasm: [190, 150, 190],
            lesion_nucleus: [70, 40, 105],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlideParams {
    pub side: usize,
    /// Benign cells per 10,000 px² of smear.
    pub cell_density: f64,
    pub lesion_count: usize,
    /// Range of lesion half-axes in pixels.
    pub lesion_radius: (f64, f64),
    /// Range of benign cell half-axes in pixels.
    pub cell_radius: (f64, f64),
    pub palette: StainPalette,
}

impl Default for SlideParams {
    fn default() -> Self {
        Self {
            side: 2048,
            cell_density: 1.5,
            lesion_count: 0,
            lesion_radius: (12.0, 24.0),
            cell_radius: (9.0, 22.0),
            palette: StainPalette::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Negative,
    Positive,
}

impl Diagnosis {
    pub fn is_positive(self) -> bool {
        self == Self::Positive
    }
}

/// The drawn smear disc, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Disc {
    pub fn contains_box(&self, b: &BBox) -> bool {
        [(b.x0(), b.y0()), (b.x1(), b.y0()), (b.x0(), b.y1()), (b.x1(), b.y1())]
            .iter()
            .all(|&(x, y)| (x - self.cx).hypot(y - self.cy) <= self.radius)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSlide {
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
    pub label: Diagnosis,
    pub disc: Disc,
}

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3], amount: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn fill_ellipse(img: &mut RgbImage, cx: f64, cy: f64, rx: f64, ry: f64, color: [u8; 3], rng: &mut ChaCha8Rng, noise: i32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = ((cx - rx).floor() as i64).max(0);
    let x1 = ((cx + rx).ceil() as i64).min(w - 1);
    let y0 = ((cy - ry).floor() as i64).max(0);
    let y1 = ((cy + ry).ceil() as i64).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.put_pixel(x as u32, y as u32, Rgb(jitter(rng, color, noise)));
            }
        }
    }
}

/// Draws one slide; the same seed and parameters give identical pixels.
pub fn generate_synthetic_slide(seed: u64, params: &SlideParams) -> Result<SyntheticSlide> {
    let side = params.side;
    if side < 64 {
        return Err(invalid("generate_synthetic_slide", format!("side {side} is too small")));
    }
    let (lr0, lr1) = params.lesion_radius;
    let (cr0, cr1) = params.cell_radius;
    if !(0.0 < lr0 && lr0 <= lr1 && 0.0 < cr0 && cr0 <= cr1) {
        return Err(invalid("generate_synthetic_slide", "radius ranges must be positive and ordered"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = &params.palette;
    // slide-level stain variation
    let shift: i32 = rng.random_range(-6..=6);
    let tint = |c: [u8; 3]| c.map(|v| (v as i32 + shift).clamp(0, 255) as u8);

    let s = side as f64;
    let disc = Disc {
        cx: s / 2.0 + rng.random_range(-0.02..0.02) * s,
        cy: s / 2.0 + rng.random_range(-0.02..0.02) * s,
        radius: rng.random_range(0.42..0.46) * s,
    };
    let (bg, smear) = (pal.background, tint(pal.smear));
    let mut img = RgbImage::new(side as u32, side as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let inside = (x as f64 + 0.5 - disc.cx).hypot(y as f64 + 0.5 - disc.cy) <= disc.radius;
        *px = Rgb(if inside { jitter(&mut rng, smear, 6) } else { jitter(&mut rng, bg, 3) });
    }

    let area = std::f64::consts::PI * disc.radius * disc.radius;
    let n_cells = (params.cell_density * area / 1e4).round() as usize;
    let point_in_disc = |rng: &mut ChaCha8Rng, margin: f64| {
        let r = (disc.radius - margin).max(0.0) * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        (disc.cx + r * a.cos(), disc.cy + r * a.sin())
    };
    for _ in 0..n_cells {
        let rx = rng.random_range(cr0..=cr1);
        let ry = (rx * rng.random_range(0.7..1.3)).clamp(cr0 * 0.7, cr1 * 1.3);
        let (cx, cy) = point_in_disc(&mut rng, rx.max(ry));
        let cyto = jitter(&mut rng, tint(pal.cytoplasm), 10);
        fill_ellipse(&mut img, cx, cy, rx, ry, cyto, &mut rng, 5);
        let nr = rng.random_range(0.18..0.3);
        let nuc = jitter(&mut rng, tint(pal.nucleus), 12);
        fill_ellipse(&mut img, cx, cy, (rx * nr).max(2.0), (ry * nr).max(2.0), nuc, &mut rng, 8);
    }

    let mut annotations: Vec<Annotation> = Vec::new();
    let mut attempts = 0;
    while annotations.len() < params.lesion_count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(invalid("generate_synthetic_slide", "could not place the requested lesions"));
        }
        let rx = rng.random_range(lr0..=lr1);
        let ry = rng.random_range(lr0..=lr1);
        let (cx, cy) = point_in_disc(&mut rng, rx.hypot(ry) + 2.0);
        let bbox = BBox::new(cx, cy, 2.0 * rx, 2.0 * ry)?;
        if !disc.contains_box(&bbox) {
            continue;
        }
        let clear = annotations.iter().all(|a| {
            let o = &a.bbox;
            (o.cx - cx).abs() > (o.w + bbox.w) / 2.0 + 4.0 || (o.cy - cy).abs() > (o.h + bbox.h) / 2.0 + 4.0
        });
        if !clear {
            continue;
        }
        let cyto = jitter(&mut rng, tint(pal.lesion_cytoplasm), 10);
        fill_ellipse(&mut img, cx, cy, rx, ry, cyto, &mut rng, 5);
        let nr = rng.random_range(0.55..0.7);
        let nuc = jitter(&mut rng, tint(pal.lesion_nucleus), 10);
        fill_ellipse(&mut img, cx, cy, rx * nr, ry * nr, nuc, &mut rng, 8);
        annotations.push(Annotation::lesion(bbox));
    }
    let label = if annotations.is_empty() { Diagnosis::Negative } else { Diagnosis::Positive };
    Ok(SyntheticSlide { image: img, annotations, label, disc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_slides_have_no_annotations() {
        let p = SlideParams { side: 256, ..Default::default() };
        let s = generate_synthetic_slide(3, &p).unwrap();
        assert_eq!(s.label, Diagnosis::Negative);
        assert!(s.annotations.is_empty());
    }
}
