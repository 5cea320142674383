//! Run configuration and seed derivation.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use yolco_core::classifier::ClassifierConfig;
use yolco_core::incnet::ConnectionMode;
use yolco_core::metrics::AccuracyRule;
use yolco_core::model::{LossMode, YolcoConfig};
use yolco_core::synth::SlideParams;
use yolco_core::train::TrainConfig;
use yolco_core::wsi::CollectionConfig;

use crate::error::{config, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub pos_fraction: f64,
    /// Inclusive range of lesions drawn on a positive slide.
    pub lesions: (usize, usize),
    pub slide: SlideParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { count: 14, pos_fraction: 0.5, lesions: (2, 6), slide: SlideParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub accuracy_rule: AccuracyRule,
    pub bootstrap: usize,
    pub ci_level: f64,
    /// IoU for suppressing slide-level detections.
    pub nms_iou: f64,
    /// Also write every collected vector as CSV next to the binary sequences.
    pub export_feature_csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            accuracy_rule: AccuracyRule::Balanced,
            bootstrap: 1000,
            ci_level: 0.95,
            nms_iou: 0.5,
            export_feature_csv: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub connection_modes: Vec<ConnectionMode>,
    pub loss_modes: Vec<LossMode>,
    pub collect_n: Vec<usize>,
    pub collect_d: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            connection_modes: vec![ConnectionMode::Inc],
            loss_modes: vec![LossMode::Dual, LossMode::ClsOnly],
            collect_n: vec![10, 100],
            collect_d: vec![0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: PathBuf,
    pub work_dir: PathBuf,
    pub repeats: usize,
    pub data: DataConfig,
    pub model: YolcoConfig,
    pub train: TrainConfig,
    pub tile_side: usize,
    pub collection: CollectionConfig,
    pub classifier: ClassifierConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: PathBuf::from("data"),
            work_dir: PathBuf::from("runs"),
            repeats: 1,
            data: DataConfig::default(),
            model: YolcoConfig::default(),
            train: TrainConfig::default(),
            tile_side: 1024,
            collection: CollectionConfig::default(),
            classifier: ClassifierConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.count == 0 {
            return Err(config("data.count must be positive"));
        }
        if !(0.0..=1.0).contains(&d.pos_fraction) {
            return Err(config("data.pos_fraction must lie in [0, 1]"));
        }
        if d.lesions.0 == 0 || d.lesions.0 > d.lesions.1 {
            return Err(config("data.lesions must be an ordered range starting at 1 or more"));
        }
        if self.repeats == 0 {
            return Err(config("repeats must be positive"));
        }
        if self.tile_side == 0 || self.tile_side % 32 != 0 || self.tile_side > d.slide.side {
            return Err(config(format!(
                "tile_side {} must be a positive multiple of 32 no larger than the slide side {}",
                self.tile_side, d.slide.side
            )));
        }
        if self.collection.n == 0 || self.collection.d < 0.0 {
            return Err(config("collection needs n >= 1 and d >= 0"));
        }
        if !(0.0..1.0).contains(&self.eval.ci_level) || self.eval.bootstrap == 0 {
            return Err(config("eval needs 0 <= ci_level < 1 and bootstrap >= 1"));
        }
        let wrap = |e: yolco_core::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.classifier.validate().map_err(wrap)?;
        if self.classifier.max_len < self.collection.n {
            return Err(config("classifier.max_len is shorter than collection.n"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Seed of the named stream `name` (with index) under `master`. Distinct names or
/// indices give unrelated seeds; the derivation is fixed across platforms.
pub fn substream(master: u64, name: &str, index: u64) -> u64 {
    // FNV-1a of the name selects the ChaCha stream.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(h);
    rng.set_word_pos(index as u128 * 16);
    rng.next_u64()
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
    pub tile_side: Option<usize>,
    pub collect_n: Option<usize>,
    pub collect_d: Option<f64>,
    pub collect_mode: Option<String>,
    pub classifier: Option<String>,
    pub connection_mode: Option<String>,
    pub loss_mode: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let parse_err = |e: yolco_core::Error| CliError::Config(e.to_string());
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        if let Some(t) = self.tile_side {
            cfg.tile_side = t;
        }
        if let Some(n) = self.collect_n {
            cfg.collection.n = n;
        }
        if let Some(d) = self.collect_d {
            cfg.collection.d = d;
        }
        if let Some(m) = &self.collect_mode {
            cfg.collection.mode = m.parse().map_err(parse_err)?;
        }
        if let Some(k) = &self.classifier {
            cfg.classifier.kind = k.parse().map_err(parse_err)?;
        }
        if let Some(m) = &self.connection_mode {
            cfg.model.connection_mode = m.parse().map_err(parse_err)?;
        }
        if let Some(m) = &self.loss_mode {
            cfg.model.loss_mode = m.parse().map_err(parse_err)?;
        }
        Ok(())
    }
}
