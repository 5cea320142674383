//! Pipeline stages. Each reads upstream artifacts, writes its own directory and a
//! `config.json` snapshot, and is deterministic given the config.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yolco_autograd::{load_checkpoint, save_checkpoint};
use yolco_core::classifier::{train_classifier, ClassifierConfig, SequenceClassifier};
use yolco_core::features::FeatureSequence;
use yolco_core::geometry::kmeans_anchors;
use yolco_core::metrics::{map_range, roc_csv, roc_curve, GroundTruth, ScoredBox, SlideMetrics, METRICS_CSV_HEADER};
use yolco_core::model::{Yolco, YolcoConfig};
use yolco_core::synth::{generate_synthetic_slide, Diagnosis};
use yolco_core::train::{detect, lesion_crop, random_crop, train_patch_level, Patch, SlideSource, EPOCH_CSV_HEADER};
use yolco_core::wsi::{collect, encode_tiles, tile_slide, wsi_detections, CollectionConfig, ForegroundMask, SlideManifest};

use crate::config::{substream, RunConfig};
use crate::dataset::{make_split, slide_id, Dataset, DatasetIndex, SlideEntry, Split, INDEX_FILE};
use crate::error::{config, CliError, Result};
use crate::io::{ensure_dir, read_text, require, stage_dir, write_json, write_text};

pub const DETECTOR_DIR: &str = "detector";
pub const PATCH_EVAL_DIR: &str = "patch_eval";
pub const FEATURES_DIR: &str = "features";
pub const CLASSIFIER_DIR: &str = "classifier";
pub const EVAL_DIR: &str = "eval";
pub const PLOTS_DIR: &str = "plots";
pub const ABLATION_DIR: &str = "ablation";

/// One train-val-test loop: its output directory and derived seeds.
#[derive(Clone, Debug)]
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub dir: PathBuf,
    pub repeat: usize,
}

impl<'a> Run<'a> {
    /// Repeat `r` of a multi-repeat config writes under `work_dir/repeat_{r}`; a
    /// single-repeat config writes straight into `work_dir`.
    pub fn new(cfg: &'a RunConfig, repeat: usize) -> Self {
        let dir = if cfg.repeats > 1 { cfg.work_dir.join(format!("repeat_{repeat}")) } else { cfg.work_dir.clone() };
        Self { cfg, dir, repeat }
    }

    pub fn seed(&self, name: &str) -> u64 {
        substream(self.cfg.seed, name, self.repeat as u64)
    }

    /// The stored split for the first loop, a reshuffled one for later loops.
    pub fn split(&self, ds: &Dataset) -> Split {
        if self.repeat == 0 {
            ds.index.split.clone()
        } else {
            make_split(&ds.index.slides, self.seed("split"))
        }
    }

    fn stage(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn owned_by_gen_data(name: &str) -> bool {
    name.starts_with("slide_") || name == INDEX_FILE || name == "config.json"
}

/// Draws `data.count` slides into `data_root`. Refuses a non-empty target unless
/// `force`, in which case previously generated files are replaced.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<DatasetIndex> {
    cfg.validate()?;
    let root = &cfg.data_root;
    if root.exists() {
        let entries: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| CliError::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        if !entries.is_empty() {
            if !force {
                return Err(config(format!("{} is not empty; pass --force to overwrite", root.display())));
            }
            for p in entries {
                if p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(owned_by_gen_data) {
                    std::fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
                }
            }
        }
    }
    ensure_dir(root)?;
    let d = &cfg.data;
    let n_pos = (d.count as f64 * d.pos_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..d.count).map(|i| i < n_pos).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(substream(cfg.seed, "labels", 0)));
    let mut slides = Vec::with_capacity(d.count);
    for (i, &positive) in labels.iter().enumerate() {
        let id = slide_id(i);
        let seed = substream(cfg.seed, "slide", i as u64);
        let mut params = d.slide.clone();
        params.lesion_count = if positive {
            ChaCha8Rng::seed_from_u64(substream(cfg.seed, "lesions", i as u64)).random_range(d.lesions.0..=d.lesions.1)
        } else {
            0
        };
        let slide = generate_synthetic_slide(seed, &params)?;
        let (manifest, thumb) = SlideManifest::describe(&id, &slide, cfg.tile_side)?;
        let save = |img: &image::RgbImage, name: &str| {
            let p = root.join(name);
            img.save(&p).map_err(|source| CliError::Image { path: p, source })
        };
        save(&slide.image, &manifest.image)?;
        save(&thumb, &manifest.thumbnail)?;
        write_json(&root.join(format!("{id}.json")), &manifest)?;
        write_text(&root.join(format!("{id}.jsonl")), &yolco_core::geometry::format_annotations(&slide.annotations))?;
        slides.push(SlideEntry { id, label: slide.label, seed });
    }
    let split = make_split(&slides, substream(cfg.seed, "split", 0));
    let index = DatasetIndex { slides, split };
    write_json(&root.join(INDEX_FILE), &index)?;
    write_text(&root.join("config.json"), &cfg.to_json())?;
    Ok(index)
}

struct LoadedSlide {
    manifest: SlideManifest,
    image: image::RgbImage,
}

fn load_slides(ds: &Dataset, ids: &[String]) -> Result<Vec<LoadedSlide>> {
    ids.iter()
        .map(|id| {
            let manifest = ds.manifest(id)?;
            let image = ds.image(&manifest)?;
            Ok(LoadedSlide { manifest, image })
        })
        .collect()
}

fn sources<'s>(slides: &'s [LoadedSlide], background: [u8; 3]) -> Vec<SlideSource<'s>> {
    slides
        .iter()
        .map(|s| SlideSource { image: &s.image, annotations: &s.manifest.annotations, background })
        .collect()
}

/// Fixed evaluation patches: one crop per lesion plus `max(1, lesions · ratio)`
/// background crops per slide.
fn fixed_patches(slides: &[LoadedSlide], cfg: &RunConfig, seed: u64) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for src in sources(slides, cfg.data.slide.palette.background) {
        for a in src.annotations {
            out.push(lesion_crop(&src, a, cfg.train.crop, &mut rng));
        }
        let n_bg = ((src.annotations.len() as f64 * cfg.train.background_ratio).round() as usize).max(1);
        for _ in 0..n_bg {
            out.push(random_crop(&src, cfg.train.crop, &mut rng));
        }
    }
    out
}

pub fn train_detector(run: &Run) -> Result<Yolco> {
    let cfg = run.cfg;
    cfg.validate()?;
    let ds = Dataset::open(&cfg.data_root)?;
    let split = run.split(&ds);
    let train = load_slides(&ds, &split.train)?;
    let sizes: Vec<(f64, f64)> =
        train.iter().flat_map(|s| s.manifest.annotations.iter().map(|a| (a.bbox.w, a.bbox.h))).collect();
    let k = cfg.model.anchors.len();
    if sizes.len() < k {
        return Err(config(format!("training split has {} lesions, fewer than the {k} anchors", sizes.len())));
    }
    let mut model_cfg: YolcoConfig = cfg.model.clone();
    model_cfg.anchors = kmeans_anchors(&sizes, k, 100, run.seed("anchors"))?;
    model_cfg.input_side = cfg.train.crop;
    let val = fixed_patches(&load_slides(&ds, &split.val)?, cfg, run.seed("val_patches"));
    let model = Yolco::build(model_cfg, run.seed("detector_init"))?;
    let src = sources(&train, cfg.data.slide.palette.background);
    let outcome = train_patch_level(model, &src, &val, &cfg.train, run.seed("detector_train"))?;

    let dir = run.stage(DETECTOR_DIR);
    stage_dir(&dir, cfg)?;
    let model_json = serde_json::to_value(&outcome.model.config).expect("config serializes");
    save_checkpoint(dir.join("detector.ckpt"), &model_json, &outcome.model.params)?;
    write_json(&dir.join("anchors.json"), &outcome.model.config.anchors)?;
    let mut log = format!("{EPOCH_CSV_HEADER}\n");
    for e in &outcome.log {
        log.push_str(&e.csv_row());
        log.push('\n');
    }
    write_text(&dir.join("train_log.csv"), &log)?;
    write_text(&dir.join("best_epoch.txt"), &format!("{}\n", outcome.best_epoch))?;
    Ok(outcome.model)
}

pub fn load_detector(run: &Run) -> Result<Yolco> {
    let path = run.stage(DETECTOR_DIR).join("detector.ckpt");
    require(&path, "train-detector")?;
    let ckpt = load_checkpoint(&path)?;
    let config: YolcoConfig = serde_json::from_value(ckpt.model_config)
        .map_err(|source| CliError::Json { path: path.clone(), source })?;
    Ok(Yolco::from_tensors(config, &ckpt.tensors)?)
}

pub const PATCH_EVAL_HEADER: &str = "split,patches,lesions,map50,map50_95";

/// Detector mAP@.5 and mAP@.5:.95 on fixed crops of a split.
pub fn eval_patch(run: &Run, split_name: &str) -> Result<String> {
    let cfg = run.cfg;
    let model = load_detector(run)?;
    let ds = Dataset::open(&cfg.data_root)?;
    let ids = run.split(&ds).get(split_name)?.to_vec();
    let patches = fixed_patches(&load_slides(&ds, &ids)?, cfg, run.seed("eval_patches"));
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, p) in patches.iter().enumerate() {
        for (bbox, score) in detect(&model, &p.image, cfg.train.val_tau, cfg.train.nms_iou)? {
            dets.push(ScoredBox { image: i, bbox, score });
        }
        gts.extend(p.annotations.iter().map(|a| GroundTruth { image: i, bbox: a.bbox }));
    }
    let maps = if gts.is_empty() { (String::new(), String::new()) } else {
        let (a, b) = map_range(&dets, &gts)?;
        (format!("{a:.6}"), format!("{b:.6}"))
    };
    let row = format!("{split_name},{},{},{},{}", patches.len(), gts.len(), maps.0, maps.1);
    let dir = run.stage(PATCH_EVAL_DIR);
    stage_dir(&dir, cfg)?;
    write_text(&dir.join("patch_eval.csv"), &format!("{PATCH_EVAL_HEADER}\n{row}\n"))?;
    Ok(row)
}

/// Encodes one slide with the detector and collects a sequence for every config.
pub fn encode_slide(
    model: &Yolco,
    ds: &Dataset,
    id: &str,
    tile_side: usize,
    collections: &[CollectionConfig],
) -> Result<Vec<FeatureSequence>> {
    let manifest = ds.manifest(id)?;
    let image = ds.image(&manifest)?;
    let tiles = if manifest.tile_side == tile_side {
        manifest.tiles.clone()
    } else {
        tile_slide(&ForegroundMask::from_image(&image, manifest.otsu_threshold), tile_side, 0)?
    };
    let background = pad_color(&image);
    let enc = encode_tiles(model, &image, &tiles, background)?;
    let label = Some(manifest.label == Diagnosis::Positive);
    collections.iter().map(|c| Ok(collect(&enc, c, id, label)?)).collect()
}

/// Padding color for tiles crossing the slide edge: the top-left pixel, which is
/// always outside the smear disc.
fn pad_color(image: &image::RgbImage) -> [u8; 3] {
    image.get_pixel(0, 0).0
}

pub fn encode_wsi(run: &Run) -> Result<()> {
    let cfg = run.cfg;
    let model = load_detector(run)?;
    let ds = Dataset::open(&cfg.data_root)?;
    let dir = run.stage(FEATURES_DIR);
    stage_dir(&dir, cfg)?;
    let mut csv = String::new();
    for id in ds.ids() {
        let seq = encode_slide(&model, &ds, &id, cfg.tile_side, &[cfg.collection])?.remove(0);
        seq.save(dir.join(format!("{id}.feat")))?;
        if cfg.eval.export_feature_csv {
            if csv.is_empty() {
                csv = FeatureSequence::csv_header(seq.dim) + "\n";
            }
            csv.push_str(&seq.csv_rows());
        }
    }
    if cfg.eval.export_feature_csv {
        write_text(&dir.join("features.csv"), &csv)?;
    }
    Ok(())
}

fn load_sequences(run: &Run, ids: &[String]) -> Result<Vec<FeatureSequence>> {
    let dir = run.stage(FEATURES_DIR);
    ids.iter()
        .map(|id| {
            let p = dir.join(format!("{id}.feat"));
            require(&p, "encode-wsi")?;
            Ok(FeatureSequence::load(&p)?)
        })
        .collect()
}

pub const LOSS_CSV_HEADER: &str = "epoch,loss";

fn loss_csv(losses: &[f64]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:.8}");
    }
    s
}

pub fn train_classifier_stage(run: &Run) -> Result<SequenceClassifier> {
    let cfg = run.cfg;
    cfg.validate()?;
    let ds = Dataset::open(&cfg.data_root)?;
    let seqs = load_sequences(run, &run.split(&ds).train)?;
    let outcome = train_classifier(&seqs, &cfg.classifier, run.seed("classifier"))?;
    let dir = run.stage(CLASSIFIER_DIR);
    stage_dir(&dir, cfg)?;
    let meta = serde_json::json!({ "classifier": outcome.model.config, "input_dim": outcome.model.input_dim });
    save_checkpoint(dir.join("classifier.ckpt"), &meta, &outcome.model.params)?;
    write_text(&dir.join("loss.csv"), &loss_csv(&outcome.losses))?;
    Ok(outcome.model)
}

pub fn load_classifier(run: &Run) -> Result<SequenceClassifier> {
    let path = run.stage(CLASSIFIER_DIR).join("classifier.ckpt");
    require(&path, "train-classifier")?;
    let ckpt = load_checkpoint(&path)?;
    let bad = |what: &str| CliError::Config(format!("{}: checkpoint lacks {what}", path.display()));
    let config: ClassifierConfig = serde_json::from_value(ckpt.model_config["classifier"].clone())
        .map_err(|source| CliError::Json { path: path.clone(), source })?;
    let dim = ckpt.model_config["input_dim"].as_u64().ok_or_else(|| bad("input_dim"))? as usize;
    Ok(SequenceClassifier::from_tensors(config, dim, &ckpt.tensors)?)
}

/// Slide-level outputs of one evaluation.
#[derive(Clone, Debug)]
pub struct WsiEval {
    pub metrics: SlideMetrics,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Classifies held-out sequences and computes the metrics row.
pub fn evaluate_sequences(model: &SequenceClassifier, seqs: &[FeatureSequence], cfg: &RunConfig, seed: u64) -> Result<(WsiEval, Vec<yolco_core::classifier::WsiPrediction>)> {
    let preds: Vec<_> = seqs.iter().map(|s| model.classify(s)).collect::<yolco_core::Result<_>>()?;
    let scores: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let labels: Vec<bool> = seqs
        .iter()
        .map(|s| s.label.ok_or_else(|| config(format!("slide {} has no label", s.slide_id))))
        .collect::<Result<_>>()?;
    let e = &cfg.eval;
    let metrics = SlideMetrics::compute(&scores, &labels, e.threshold, e.accuracy_rule, e.bootstrap, e.ci_level, seed)?;
    Ok((WsiEval { metrics, scores, labels }, preds))
}

pub const PREDICTIONS_HEADER: &str = "slide_id,label,prob";
pub const PER_VECTOR_HEADER: &str = "slide_id,label,rank,prob";
pub const DETECTIONS_HEADER: &str = "slide_id,cx,cy,w,h,prob";

/// Writes `metrics.csv`, `roc.csv`, `predictions.csv`, `per_vector.csv`,
/// `embeddings.csv` and `detections.csv` for a split.
pub fn eval_wsi(run: &Run, split_name: &str) -> Result<WsiEval> {
    let cfg = run.cfg;
    let model = load_classifier(run)?;
    let ds = Dataset::open(&cfg.data_root)?;
    let ids = run.split(&ds).get(split_name)?.to_vec();
    let seqs = load_sequences(run, &ids)?;
    let (ev, preds) = evaluate_sequences(&model, &seqs, cfg, run.seed("bootstrap"))?;

    let dir = run.stage(EVAL_DIR);
    stage_dir(&dir, cfg)?;
    write_text(&dir.join("metrics.csv"), &format!("{METRICS_CSV_HEADER}\n{}\n", ev.metrics.csv_row()))?;
    write_text(&dir.join("roc.csv"), &roc_csv(&roc_curve(&ev.scores, &ev.labels)?))?;
    let (mut pred_csv, mut vec_csv) = (format!("{PREDICTIONS_HEADER}\n"), format!("{PER_VECTOR_HEADER}\n"));
    let mut emb_csv = String::new();
    let mut det_csv = format!("{DETECTIONS_HEADER}\n");
    for ((seq, p), &label) in seqs.iter().zip(&preds).zip(&ev.labels) {
        let l = u8::from(label);
        let _ = writeln!(pred_csv, "{},{l},{:.6}", seq.slide_id, p.prob);
        for (r, v) in p.per_vector.iter().enumerate() {
            let _ = writeln!(vec_csv, "{},{l},{r},{v:.6}", seq.slide_id);
        }
        if emb_csv.is_empty() {
            emb_csv = "slide_id,label".to_string();
            for k in 0..p.embedding.len() {
                let _ = write!(emb_csv, ",e{k}");
            }
            emb_csv.push('\n');
        }
        let _ = write!(emb_csv, "{},{l}", seq.slide_id);
        for v in &p.embedding {
            let _ = write!(emb_csv, ",{v:.6}");
        }
        emb_csv.push('\n');
        for (b, prob) in wsi_detections(seq, cfg.eval.nms_iou)? {
            let _ = writeln!(det_csv, "{},{:.2},{:.2},{:.2},{:.2},{prob:.6}", seq.slide_id, b.cx, b.cy, b.w, b.h);
        }
    }
    write_text(&dir.join("predictions.csv"), &pred_csv)?;
    write_text(&dir.join("per_vector.csv"), &vec_csv)?;
    write_text(&dir.join("embeddings.csv"), &emb_csv)?;
    write_text(&dir.join("detections.csv"), &det_csv)?;
    Ok(ev)
}

/// Gathers plot-ready tables of a finished loop into `plots/`: `roc.csv` (fpr,tpr),
/// `fluctuation.csv` (slide_id,label,rank,prob), `detector_loss.csv` (the detector
/// epoch log) and `classifier_loss.csv` (epoch,loss).
pub fn plot_data(run: &Run) -> Result<()> {
    let copies = [
        (EVAL_DIR, "roc.csv", "roc.csv", "eval-wsi"),
        (EVAL_DIR, "per_vector.csv", "fluctuation.csv", "eval-wsi"),
        (EVAL_DIR, "embeddings.csv", "embeddings.csv", "eval-wsi"),
        (DETECTOR_DIR, "train_log.csv", "detector_loss.csv", "train-detector"),
        (CLASSIFIER_DIR, "loss.csv", "classifier_loss.csv", "train-classifier"),
    ];
    let texts: Vec<(&str, String)> = copies
        .iter()
        .map(|&(stage, src, dst, producer)| Ok((dst, read_text(&run.stage(stage).join(src), producer)?)))
        .collect::<Result<_>>()?;
    let dir = run.stage(PLOTS_DIR);
    stage_dir(&dir, run.cfg)?;
    for (dst, text) in texts {
        write_text(&dir.join(dst), &text)?;
    }
    Ok(())
}

/// Every stage after data generation, for one loop.
pub fn run_loop(run: &Run) -> Result<WsiEval> {
    train_detector(run)?;
    eval_patch(run, "test")?;
    encode_wsi(run)?;
    train_classifier_stage(run)?;
    let ev = eval_wsi(run, "test")?;
    plot_data(run)?;
    Ok(ev)
}

pub const SUMMARY_HEADER: &str = "repeat,acc,sens,spec,auc,ci_lo,ci_hi";

/// All loops of the config; with more than one, `summary.csv` lists each loop and
/// the mean.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<WsiEval>> {
    cfg.validate()?;
    let evals: Vec<WsiEval> = (0..cfg.repeats).map(|r| run_loop(&Run::new(cfg, r))).collect::<Result<_>>()?;
    if cfg.repeats > 1 {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for (r, e) in evals.iter().enumerate() {
            let _ = writeln!(s, "{r},{}", e.metrics.csv_row());
        }
        let k = evals.len() as f64;
        let mean = |f: fn(&SlideMetrics) -> f64| evals.iter().map(|e| f(&e.metrics)).sum::<f64>() / k;
        let m = SlideMetrics {
            acc: mean(|m| m.acc),
            sens: mean(|m| m.sens),
            spec: mean(|m| m.spec),
            auc: mean(|m| m.auc),
            ci_lo: mean(|m| m.ci_lo),
            ci_hi: mean(|m| m.ci_hi),
        };
        let _ = writeln!(s, "mean,{}", m.csv_row());
        stage_dir(&cfg.work_dir, cfg)?;
        write_text(&cfg.work_dir.join("summary.csv"), &s)?;
    }
    Ok(evals)
}

pub const ABLATION_HEADER: &str = "repeat,connection_mode,loss_mode,collect_n,collect_d,acc,sens,spec,auc,ci_lo,ci_hi";

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub repeat: usize,
    pub connection_mode: yolco_core::incnet::ConnectionMode,
    pub loss_mode: yolco_core::model::LossMode,
    pub collection: CollectionConfig,
    pub metrics: SlideMetrics,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.repeat,
            self.connection_mode,
            self.loss_mode,
            self.collection.n,
            self.collection.d,
            self.metrics.csv_row()
        )
    }
}

/// Sweeps connection mode × loss mode × (N, D) for every repeat. Each detector is
/// trained once per (repeat, connection, loss) and each slide encoded once; every
/// collection setting then gets its own classifier. Writes `ablation/ablation.csv`.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let a = &cfg.ablate;
    if a.connection_modes.is_empty() || a.loss_modes.is_empty() || a.collect_n.is_empty() || a.collect_d.is_empty() {
        return Err(config("every ablation axis needs at least one value"));
    }
    let collections: Vec<CollectionConfig> = a
        .collect_n
        .iter()
        .flat_map(|&n| a.collect_d.iter().map(move |&d| CollectionConfig { n, d, mode: cfg.collection.mode }))
        .collect();
    let out_dir = cfg.work_dir.join(ABLATION_DIR);
    stage_dir(&out_dir, cfg)?;
    let ds = Dataset::open(&cfg.data_root)?;
    let mut rows = Vec::new();
    let mut csv = format!("{ABLATION_HEADER}\n");
    for repeat in 0..cfg.repeats {
        for &cm in &a.connection_modes {
            for &lm in &a.loss_modes {
                let mut variant = cfg.clone();
                variant.model.connection_mode = cm;
                variant.model.loss_mode = lm;
                variant.repeats = 1;
                variant.work_dir = out_dir.join(format!("{cm}_{lm}_r{repeat}"));
                // Seeds follow the repeat, not the variant, so every variant of a
                // repeat sees the same split, crops and initial draws.
                let run = Run { cfg: &variant, dir: variant.work_dir.clone(), repeat };
                let model = train_detector(&run)?;
                let split = run.split(&ds);
                let mut per_collection: Vec<Vec<FeatureSequence>> = vec![Vec::new(); collections.len()];
                let mut order = split.train.clone();
                order.extend(split.test.iter().cloned());
                for id in &order {
                    for (k, seq) in encode_slide(&model, &ds, id, cfg.tile_side, &collections)?.into_iter().enumerate() {
                        per_collection[k].push(seq);
                    }
                }
                let n_train = split.train.len();
                for (c, seqs) in collections.iter().zip(per_collection) {
                    let outcome = train_classifier(&seqs[..n_train], &cfg.classifier, run.seed("classifier"))?;
                    let (ev, _) = evaluate_sequences(&outcome.model, &seqs[n_train..], cfg, run.seed("bootstrap"))?;
                    let row = AblationRow { repeat, connection_mode: cm, loss_mode: lm, collection: *c, metrics: ev.metrics };
                    csv.push_str(&row.csv_row());
                    csv.push('\n');
                    rows.push(row);
                }
                write_text(&out_dir.join("ablation.csv"), &csv)?;
            }
        }
    }
    Ok(rows)
}
