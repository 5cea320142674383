//! On-disk dataset layout: `dataset.json` index, and per slide a PNG, a thumbnail,
//! a JSON manifest and JSON-lines annotations.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use yolco_core::synth::Diagnosis;
use yolco_core::wsi::SlideManifest;

use crate::error::{CliError, Result};
use crate::io::{read_json, require};

pub const INDEX_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub id: String,
    pub label: Diagnosis,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(CliError::Config(format!("unknown split {name:?}, expected train|val|test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub slides: Vec<SlideEntry>,
    pub split: Split,
}

/// Validation and test sizes for `count` slides: `count / 14` each, rounded, and at
/// least one while three or more slides exist.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let held = if count >= 3 { ((count as f64 / 14.0).round() as usize).max(1) } else { 0 };
    (count - 2 * held, held, held)
}

/// Stratified split: positives and negatives are shuffled separately and
/// interleaved, then test takes the head, validation the next block, training the rest.
pub fn make_split(slides: &[SlideEntry], seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<&str> = slides.iter().filter(|s| s.label.is_positive()).map(|s| s.id.as_str()).collect();
    let mut neg: Vec<&str> = slides.iter().filter(|s| !s.label.is_positive()).map(|s| s.id.as_str()).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut order = Vec::with_capacity(slides.len());
    let (mut p, mut n) = (pos.into_iter(), neg.into_iter());
    loop {
        match (p.next(), n.next()) {
            (None, None) => break,
            (a, b) => order.extend(a.into_iter().chain(b)),
        }
    }
    let (_, n_val, n_test) = split_sizes(order.len());
    let ids: Vec<String> = order.into_iter().map(String::from).collect();
    Split {
        test: ids[..n_test].to_vec(),
        val: ids[n_test..n_test + n_val].to_vec(),
        train: ids[n_test + n_val..].to_vec(),
    }
}

pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        require(&path, "gen-data")?;
        Ok(Self { root: root.to_path_buf(), index: read_json(&path)? })
    }

    pub fn manifest(&self, id: &str) -> Result<SlideManifest> {
        let path = self.root.join(format!("{id}.json"));
        require(&path, "gen-data")?;
        read_json(&path)
    }

    pub fn image(&self, manifest: &SlideManifest) -> Result<RgbImage> {
        let path = self.root.join(&manifest.image);
        require(&path, "gen-data")?;
        Ok(image::open(&path).map_err(|source| CliError::Image { path: path.clone(), source })?.to_rgb8())
    }

    pub fn label(&self, id: &str) -> Result<bool> {
        self.index
            .slides
            .iter()
            .find(|s| s.id == id)
            .map(|s| s.label.is_positive())
            .ok_or_else(|| CliError::Config(format!("slide {id} is not in the dataset index")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.index.slides.iter().map(|s| s.id.clone()).collect()
    }
}

pub fn slide_id(i: usize) -> String {
    format!("slide_{i:04}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(n: usize, pos: usize) -> Vec<SlideEntry> {
        (0..n)
            .map(|i| SlideEntry {
                id: slide_id(i),
                label: if i < pos { Diagnosis::Positive } else { Diagnosis::Negative },
                seed: i as u64,
            })
            .collect()
    }

    #[test]
    fn fourteen_slides_split_twelve_one_one() {
        assert_eq!(split_sizes(14), (12, 1, 1));
        let s = make_split(&entries(14, 7), 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (12, 1, 1));
    }

    #[test]
    fn sixty_slides_hold_out_balanced_classes() {
        let e = entries(60, 30);
        let s = make_split(&e, 9);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (52, 4, 4));
        let pos = |ids: &[String]| ids.iter().filter(|id| e.iter().any(|x| &x.id == *id && x.label.is_positive())).count();
        assert_eq!(pos(&s.test), 2);
        assert_eq!(pos(&s.val), 2);
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 60);
    }
}
