//! Slide-level classifiers over collected feature sequences.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use yolco_autograd::{accumulate, cosine_lr, Adam, AdamConfig, Bound, Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::features::FeatureSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Svm,
    Rnn,
    Lstm,
    Transformer,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Svm => "svm",
            Self::Rnn => "rnn",
            Self::Lstm => "lstm",
            Self::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Svm, Self::Rnn, Self::Lstm, Self::Transformer]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid("classifier kind", format!("unknown kind {s:?}, expected svm|rnn|lstm|transformer")))
    }
}

/// How per-position outputs become one slide probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    /// Recurrent state width.
    pub hidden: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Width of the transformer feed-forward layers.
    pub ffn: usize,
    /// Width of the per-position output representation.
    pub d_ff: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    /// Longest sequence the positional table supports.
    pub max_len: usize,
    pub pooling: Pooling,
    /// L2 weight of the linear margin baseline.
    pub svm_lambda: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Transformer,
            hidden: 2048,
            depth: 10,
            d_model: 768,
            heads: 8,
            ffn: 2048,
            d_ff: 2048,
            dropout: 0.5,
            epochs: 300,
            lr0: 5e-6,
            batch_size: 1,
            max_len: 1000,
            pooling: Pooling::Mean,
            svm_lambda: 1e-3,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(invalid("ClassifierConfig", r.to_string()));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.kind == ClassifierKind::Transformer && (self.heads == 0 || self.d_model % self.heads != 0) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_len == 0 {
            return bad("epochs, batch size and max_len must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    ln1: Norm,
    qkv: Lin,
    out: Lin,
    ln2: Norm,
    ff1: Lin,
    ff2: Lin,
}

#[derive(Clone, Debug)]
enum Body {
    Transformer { input: Lin, pos: ParamId, layers: Vec<Layer>, ln_f: Norm, proj: Lin },
    Rnn { wx: Lin, wh: ParamId },
    Lstm { wx: Lin, wh: ParamId },
    Svm { w: ParamId, b: ParamId },
}

/// A classifier's architecture and parameters.
#[derive(Clone, Debug)]
pub struct SequenceClassifier {
    pub config: ClassifierConfig,
    pub input_dim: usize,
    pub params: ParamStore<f32>,
    body: Body,
    head: Option<Lin>,
}

fn add_linear(store: &mut ParamStore<f32>, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Result<Lin> {
    let b = (1.0 / inp as f64).sqrt();
    Ok(Lin {
        w: store.add(format!("{name}.w"), Tensor::uniform(&[out, inp], -b, b, rng))?,
        b: store.add(format!("{name}.b"), Tensor::zeros(&[out]))?,
    })
}

fn add_norm(store: &mut ParamStore<f32>, name: &str, d: usize) -> Result<Norm> {
    Ok(Norm { g: store.add(format!("{name}.g"), Tensor::ones(&[d]))?, b: store.add(format!("{name}.b"), Tensor::zeros(&[d]))? })
}

/// Forward-pass options.
pub struct Mode<'a> {
    pub training: bool,
    pub rng: &'a mut ChaCha8Rng,
}

impl SequenceClassifier {
    pub fn build(config: ClassifierConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let (body, head) = match c.kind {
            ClassifierKind::Transformer => {
                let input = add_linear(&mut p, "input", input_dim, c.d_model, &mut rng)?;
                let pos = p.add("pos", Tensor::uniform(&[c.max_len, c.d_model], -0.02, 0.02, &mut rng))?;
                let mut layers = Vec::with_capacity(c.depth);
                for l in 0..c.depth {
                    layers.push(Layer {
                        ln1: add_norm(&mut p, &format!("layer{l}.ln1"), c.d_model)?,
                        qkv: add_linear(&mut p, &format!("layer{l}.qkv"), c.d_model, 3 * c.d_model, &mut rng)?,
                        out: add_linear(&mut p, &format!("layer{l}.out"), c.d_model, c.d_model, &mut rng)?,
                        ln2: add_norm(&mut p, &format!("layer{l}.ln2"), c.d_model)?,
                        ff1: add_linear(&mut p, &format!("layer{l}.ff1"), c.d_model, c.ffn, &mut rng)?,
                        ff2: add_linear(&mut p, &format!("layer{l}.ff2"), c.ffn, c.d_model, &mut rng)?,
                    });
                }
                let ln_f = add_norm(&mut p, "ln_f", c.d_model)?;
                let proj = add_linear(&mut p, "proj", c.d_model, c.d_ff, &mut rng)?;
                let head = add_linear(&mut p, "mlp", c.d_ff, 2, &mut rng)?;
                (Body::Transformer { input, pos, layers, ln_f, proj }, Some(head))
            }
            ClassifierKind::Rnn | ClassifierKind::Lstm => {
                let gates = if c.kind == ClassifierKind::Lstm { 4 } else { 1 };
                let wx = add_linear(&mut p, "rnn.wx", input_dim, gates * c.hidden, &mut rng)?;
                let b = (1.0 / c.hidden as f64).sqrt();
                let wh = p.add("rnn.wh", Tensor::uniform(&[gates * c.hidden, c.hidden], -b, b, &mut rng))?;
                let head = add_linear(&mut p, "mlp", c.hidden, 2, &mut rng)?;
                let body = if gates == 4 { Body::Lstm { wx, wh } } else { Body::Rnn { wx, wh } };
                (body, Some(head))
            }
            ClassifierKind::Svm => {
                let w = p.add("svm.w", Tensor::zeros(&[c.max_len * input_dim]))?;
                let b = p.add("svm.b", Tensor::zeros(&[1]))?;
                (Body::Svm { w, b }, None)
            }
        };
        Ok(Self { config, input_dim, params: p, body, head })
    }

    pub fn from_tensors(config: ClassifierConfig, input_dim: usize, tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut m = Self::build(config, input_dim, 0)?;
        m.params.load_named(tensors)?;
        Ok(m)
    }

    fn check_input<T: Element>(&self, tape: &Tape<T>, x: Var) -> Result<usize> {
        match *tape.shape(x) {
            [n, d] if n >= 1 && d == self.input_dim => Ok(n),
            _ => Err(invalid(
                "classifier",
                format!("expected a non-empty [N, {}] sequence, got {:?}", self.input_dim, tape.shape(x)),
            )),
        }
    }

    /// Per-position representation: `[N, d_ff]` for the transformer, `[N, hidden]`
    /// hidden states for the recurrent kinds.
    pub fn encode_on<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, mode: &mut Mode) -> Result<Var> {
        let n = self.check_input(tape, x)?;
        self.encode_at(tape, p, x, &(0..n).collect::<Vec<_>>(), mode)
    }

    /// As [`Self::encode_on`] with explicit positional indices for the transformer.
    pub fn encode_at<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, positions: &[usize], mode: &mut Mode) -> Result<Var> {
        let n = self.check_input(tape, x)?;
        let c = &self.config;
        let lin = |tape: &mut Tape<T>, l: &Lin, v: Var| tape.linear(v, p[l.w], Some(p[l.b]));
        let drop = |tape: &mut Tape<T>, v: Var, mode: &mut Mode| -> Result<Var> { Ok(tape.dropout(v, c.dropout, mode.training, mode.rng)?) };
        match &self.body {
            Body::Transformer { input, pos, layers, ln_f, proj } => {
                if positions.len() != n || positions.iter().any(|&i| i >= c.max_len) {
                    return Err(invalid("transformer", format!("{n} positions must lie below max_len {}", c.max_len)));
                }
                let mut h = lin(tape, input, x)?;
                h = drop(tape, h, mode)?;
                let idx: Vec<usize> = positions.iter().flat_map(|&i| (0..c.d_model).map(move |k| i * c.d_model + k)).collect();
                let pe = tape.gather(p[*pos], &idx)?;
                let pe = tape.reshape(pe, &[n, c.d_model])?;
                h = tape.add(h, pe)?;
                for layer in layers {
                    h = self.attention_block(tape, p, layer, h)?;
                    let z = tape.layer_norm(h, p[layer.ln2.g], p[layer.ln2.b], 1e-5)?;
                    let z = lin(tape, &layer.ff1, z)?;
                    let z = tape.gelu(z);
                    let z = drop(tape, z, mode)?;
                    let z = lin(tape, &layer.ff2, z)?;
                    h = tape.add(h, z)?;
                }
                let h = tape.layer_norm(h, p[ln_f.g], p[ln_f.b], 1e-5)?;
                let h = lin(tape, proj, h)?;
                drop(tape, h, mode)
            }
            Body::Rnn { wx, wh } => {
                let xs = lin(tape, wx, x)?;
                let mut h = tape.constant(Tensor::zeros(&[1, c.hidden]));
                let mut states = Vec::with_capacity(n);
                for t in 0..n {
                    let xt = tape.slice(xs, 0, t, 1)?;
                    let rec = tape.linear(h, p[*wh], None)?;
                    let pre = tape.add(xt, rec)?;
                    h = tape.tanh(pre);
                    states.push(h);
                }
                let hs = tape.concat(&states, 0)?;
                drop(tape, hs, mode)
            }
            Body::Lstm { wx, wh } => {
                let hs = self.lstm_states(tape, p, x, wx, *wh, None)?;
                drop(tape, hs, mode)
            }
            Body::Svm { .. } => Err(invalid("classifier", "the margin baseline has no sequence encoder")),
        }
    }

    /// Pre-norm multi-head self-attention with residual: `h + Attn(LN(h))`.
    fn attention_block<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, layer: &Layer, h: Var) -> Result<Var> {
        let (d, heads) = (self.config.d_model, self.config.heads);
        let dh = d / heads;
        let z = tape.layer_norm(h, p[layer.ln1.g], p[layer.ln1.b], 1e-5)?;
        let qkv = tape.linear(z, p[layer.qkv.w], Some(p[layer.qkv.b]))?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = tape.slice(qkv, 1, hd * dh, dh)?;
            let k = tape.slice(qkv, 1, d + hd * dh, dh)?;
            let v = tape.slice(qkv, 1, 2 * d + hd * dh, dh)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax(s)?;
            outs.push(tape.matmul(a, v)?);
        }
        let cat = tape.concat(&outs, 1)?;
        let o = tape.linear(cat, p[layer.out.w], Some(p[layer.out.b]))?;
        Ok(tape.add(h, o)?)
    }

    /// Attention weights `[heads][N, N]` of transformer layer `layer` for input `x`
    /// (evaluation mode).
    pub fn attention_weights(&self, x: &Tensor<f32>, layer: usize) -> Result<Vec<Tensor<f32>>> {
        let Body::Transformer { input, pos, layers, .. } = &self.body else {
            return Err(invalid("attention_weights", "not a transformer"));
        };
        let lay = layers.get(layer).ok_or_else(|| invalid("attention_weights", "layer out of range"))?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let n = self.check_input(&tape, xv)?;
        let (d, heads) = (self.config.d_model, self.config.heads);
        let mut h = tape.linear(xv, p[input.w], Some(p[input.b]))?;
        let idx: Vec<usize> = (0..n * d).collect();
        let pe = tape.gather(p[*pos], &idx)?;
        let pe = tape.reshape(pe, &[n, d])?;
        h = tape.add(h, pe)?;
        for l in &layers[..layer] {
            h = self.attention_block(&mut tape, &p, l, h)?;
            let z = tape.layer_norm(h, p[l.ln2.g], p[l.ln2.b], 1e-5)?;
            let z = tape.linear(z, p[l.ff1.w], Some(p[l.ff1.b]))?;
            let z = tape.gelu(z);
            let z = tape.linear(z, p[l.ff2.w], Some(p[l.ff2.b]))?;
            h = tape.add(h, z)?;
        }
        let dh = d / heads;
        let z = tape.layer_norm(h, p[lay.ln1.g], p[lay.ln1.b], 1e-5)?;
        let qkv = tape.linear(z, p[lay.qkv.w], Some(p[lay.qkv.b]))?;
        let mut out = Vec::new();
        for hd in 0..heads {
            let q = tape.slice(qkv, 1, hd * dh, dh)?;
            let k = tape.slice(qkv, 1, d + hd * dh, dh)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax(s)?;
            out.push(tape.value(a).clone());
        }
        Ok(out)
    }

    /// LSTM hidden states `[N, hidden]`, gate order input, forget, cell, output.
    fn lstm_states<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        wx: &Lin,
        wh: ParamId,
        init: Option<(Var, Var)>,
    ) -> Result<Var> {
        let n = tape.shape(x)[0];
        let hd = self.config.hidden;
        let xs = tape.linear(x, p[wx.w], Some(p[wx.b]))?;
        let (mut h, mut c) = match init {
            Some(s) => s,
            None => (tape.constant(Tensor::zeros(&[1, hd])), tape.constant(Tensor::zeros(&[1, hd]))),
        };
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let xt = tape.slice(xs, 0, t, 1)?;
            let rec = tape.linear(h, p[wh], None)?;
            let g = tape.add(xt, rec)?;
            let gi = tape.slice(g, 1, 0, hd)?;
            let gf = tape.slice(g, 1, hd, hd)?;
            let gg = tape.slice(g, 1, 2 * hd, hd)?;
            let go = tape.slice(g, 1, 3 * hd, hd)?;
            let i = tape.sigmoid(gi);
            let f = tape.sigmoid(gf);
            let gc = tape.tanh(gg);
            let o = tape.sigmoid(go);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, gc)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            states.push(h);
        }
        Ok(tape.concat(&states, 0)?)
    }

    /// LSTM states from an explicit initial `(h0, c0)`, each `[1, hidden]`.
    pub fn lstm_from<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h0: Var, c0: Var) -> Result<Var> {
        let Body::Lstm { wx, wh } = &self.body else {
            return Err(invalid("lstm_from", "not an LSTM"));
        };
        self.check_input(tape, x)?;
        self.lstm_states(tape, p, x, wx, *wh, Some((h0, c0)))
    }

    /// Per-position sigmoid outputs `[N, 2]`; column 1 is the positive class.
    pub fn outputs_on<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, mode: &mut Mode) -> Result<Var> {
        let head = self.head.ok_or_else(|| invalid("classifier", "the margin baseline has no per-position outputs"))?;
        let z = self.encode_on(tape, p, x, mode)?;
        let logits = tape.linear(z, p[head.w], Some(p[head.b]))?;
        Ok(tape.sigmoid(logits))
    }

    fn slide_tensor(&self, seq: &FeatureSequence) -> Result<Tensor<f32>> {
        if seq.is_empty() {
            return Err(invalid("classifier", format!("slide {} has an empty sequence", seq.slide_id)));
        }
        if seq.dim != self.input_dim {
            return Err(invalid("classifier", format!("sequence dim {} != classifier input {}", seq.dim, self.input_dim)));
        }
        let data: Vec<f32> = seq.rows.iter().flat_map(|r| r.features.iter().copied()).collect();
        Ok(Tensor::from_vec(&[seq.len(), self.input_dim], data)?)
    }

    fn svm_vector(&self, seq: &FeatureSequence) -> Result<Vec<f32>> {
        if seq.dim != self.input_dim {
            return Err(invalid("svm", format!("sequence dim {} != classifier input {}", seq.dim, self.input_dim)));
        }
        let mut v = vec![0f32; self.config.max_len * self.input_dim];
        for (i, r) in seq.rows.iter().take(self.config.max_len).enumerate() {
            v[i * self.input_dim..(i + 1) * self.input_dim].copy_from_slice(&r.features);
        }
        Ok(v)
    }

    fn svm_decision(&self, v: &[f32]) -> f64 {
        let Body::Svm { w, b } = &self.body else { unreachable!("svm body") };
        let w = self.params.get(*w).data();
        v.iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() + self.params.get(*b).data()[0] as f64
    }

    /// Evaluation-mode slide probability and per-position positive outputs.
    pub fn classify(&self, seq: &FeatureSequence) -> Result<WsiPrediction> {
        if self.config.kind == ClassifierKind::Svm {
            let d = self.svm_decision(&self.svm_vector(seq)?);
            let p = crate::geometry::sigmoid(d);
            return Ok(WsiPrediction { prob: p, per_vector: vec![p; seq.len().max(1)], embedding: vec![d as f32] });
        }
        let x = self.slide_tensor(seq)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mode = Mode { training: false, rng: &mut rng };
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let z = self.encode_on(&mut tape, &p, xv, &mut mode)?;
        let head = self.head.expect("neural kinds have a head");
        let logits = tape.linear(z, p[head.w], Some(p[head.b]))?;
        let out = tape.sigmoid(logits);
        let per_vector: Vec<f64> = tape.value(out).data().chunks(2).map(|r| r[1] as f64).collect();
        let zv = tape.value(z);
        let (n, d) = (zv.shape()[0], zv.shape()[1]);
        let embedding = if self.config.kind == ClassifierKind::Transformer {
            (0..d).map(|k| (0..n).map(|i| zv.data()[i * d + k]).sum::<f32>() / n as f32).collect()
        } else {
            zv.data()[(n - 1) * d..].to_vec()
        };
        Ok(WsiPrediction { prob: pool(&per_vector, self.config.pooling), per_vector, embedding })
    }

    /// Training loss of one slide: binary cross-entropy of the two pooled outputs
    /// against the one-hot label, averaged over the two outputs.
    pub fn slide_loss<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, label: bool, mode: &mut Mode) -> Result<Var> {
        let out = self.outputs_on(tape, p, x, mode)?;
        let n = tape.shape(out)[0];
        let pooled = match self.config.pooling {
            Pooling::Mean => {
                let ones = tape.constant(Tensor::full(&[1, n], T::one() / T::from_f64_lossy(n as f64)));
                tape.matmul(ones, out)?
            }
            Pooling::Max => {
                let v = tape.value(out).data();
                let best = (0..n).max_by(|&a, &b| v[a * 2 + 1].partial_cmp(&v[b * 2 + 1]).expect("finite")).unwrap_or(0);
                tape.slice(out, 0, best, 1)?
            }
        };
        let pooled = tape.reshape(pooled, &[2])?;
        let t = if label { [0.0, 1.0] } else { [1.0, 0.0] };
        bce(tape, pooled, &t)
    }
}

/// Mean binary cross-entropy of probabilities `p` against targets, with `1e-7` floor.
pub fn bce<T: Element>(tape: &mut Tape<T>, p: Var, targets: &[f64]) -> Result<Var> {
    let n = targets.len();
    let eps = 1e-7;
    let lp = tape.affine(p, 1.0, eps);
    let lp = tape.ln(lp);
    let q = tape.affine(p, -1.0, 1.0);
    let lq = tape.affine(q, 1.0, eps);
    let lq = tape.ln(lq);
    let tp = tape.constant(Tensor::from_vec(&[n], targets.iter().map(|&t| T::from_f64_lossy(t)).collect())?);
    let tq = tape.constant(Tensor::from_vec(&[n], targets.iter().map(|&t| T::from_f64_lossy(1.0 - t)).collect())?);
    let a = tape.mul(lp, tp)?;
    let b = tape.mul(lq, tq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

pub fn pool(per_vector: &[f64], pooling: Pooling) -> f64 {
    match pooling {
        Pooling::Mean => per_vector.iter().sum::<f64>() / per_vector.len() as f64,
        Pooling::Max => per_vector.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Slide-level output of a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct WsiPrediction {
    pub prob: f64,
    /// Positive-class output of every sequence position, in rank order.
    pub per_vector: Vec<f64>,
    /// Slide representation for embedding plots: mean output representation for the
    /// transformer, final hidden state for recurrent kinds, decision value for the
    /// margin baseline.
    pub embedding: Vec<f32>,
}

pub struct ClassifierOutcome {
    pub model: SequenceClassifier,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

fn check_labels(seqs: &[FeatureSequence]) -> Result<Vec<bool>> {
    let labels: Vec<bool> = seqs
        .iter()
        .map(|s| s.label.ok_or_else(|| invalid("train_classifier", format!("slide {} has no label", s.slide_id))))
        .collect::<Result<_>>()?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos < 2 || labels.len() - pos < 2 {
        return Err(invalid("train_classifier", format!("need two slides per class, got {pos} positive of {}", labels.len())));
    }
    Ok(labels)
}

/// Trains the configured kind on labelled sequences.
pub fn train_classifier(seqs: &[FeatureSequence], cfg: &ClassifierConfig, seed: u64) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let labels = check_labels(seqs)?;
    let dim = seqs[0].dim;
    let mut model = SequenceClassifier::build(cfg.clone(), dim, seed)?;
    if cfg.kind == ClassifierKind::Svm {
        let losses = svm_fit(&mut model, seqs, &labels, seed)?;
        return Ok(ClassifierOutcome { model, losses });
    }
    let xs: Vec<Tensor<f32>> = seqs.iter().map(|s| model.slide_tensor(s)).collect::<Result<_>>()?;
    let mut adam = Adam::new(&model.params, cfg.lr0, AdamConfig::default());
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, 0.0);
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let results: Vec<(f64, Vec<Tensor<f32>>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    rng.set_stream(i as u64 + 2);
                    let mut mode = Mode { training: true, rng: &mut rng };
                    let mut tape = Tape::new();
                    let p = model.params.bind(&mut tape, true);
                    let x = tape.constant(xs[i].clone());
                    let l = model.slide_loss(&mut tape, &p, x, labels[i], &mut mode)?;
                    let g = tape.backward(l)?;
                    Ok((tape.value(l).item() as f64, model.params.collect_grads(&g, &p)))
                })
                .collect::<Result<_>>()?;
            let mut acc = model.params.zero_grads();
            for (l, g) in &results {
                total += l;
                accumulate(&mut acc, g);
            }
            for g in &mut acc {
                g.scale(1.0 / batch.len() as f32);
            }
            adam.step(&mut model.params, &acc, lr);
        }
        losses.push(total / seqs.len() as f64);
    }
    Ok(ClassifierOutcome { model, losses })
}

/// Soft-margin linear classifier on flattened, zero-padded sequences, trained by
/// stochastic subgradient descent on `λ/2 ‖w‖² + hinge` with step `1/(λ t)`.
/// Returns the mean hinge loss per epoch.
fn svm_fit(model: &mut SequenceClassifier, seqs: &[FeatureSequence], labels: &[bool], seed: u64) -> Result<Vec<f64>> {
    let lambda = model.config.svm_lambda;
    if lambda <= 0.0 {
        return Err(invalid("svm", "lambda must be positive"));
    }
    let xs: Vec<Vec<f32>> = seqs.iter().map(|s| model.svm_vector(s)).collect::<Result<_>>()?;
    let Body::Svm { w: wid, b: bid } = model.body else { unreachable!("svm body") };
    let mut w = vec![0f64; xs[0].len()];
    let mut b = 0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut t = 0usize;
    let mut losses = Vec::new();
    for _ in 0..model.config.epochs {
        order.shuffle(&mut rng);
        let mut hinge = 0.0;
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let y = if labels[i] { 1.0 } else { -1.0 };
            let margin = y * (xs[i].iter().zip(&w).map(|(&a, &b)| a as f64 * b).sum::<f64>() + b);
            hinge += (1.0 - margin).max(0.0);
            for v in w.iter_mut() {
                *v *= 1.0 - eta * lambda;
            }
            if margin < 1.0 {
                for (v, &a) in w.iter_mut().zip(&xs[i]) {
                    *v += eta * y * a as f64;
                }
                b += eta * y;
            }
        }
        losses.push(hinge / xs.len() as f64);
    }
    *model.params.get_mut(wid) = Tensor::from_vec(&[w.len()], w.iter().map(|&v| v as f32).collect())?;
    model.params.get_mut(bid).data_mut()[0] = b as f32;
    Ok(losses)
}

/// Predicted labels (`decision >= 0`) of the margin baseline.
pub fn svm_predict(model: &SequenceClassifier, seqs: &[FeatureSequence]) -> Result<Vec<bool>> {
    if model.config.kind != ClassifierKind::Svm {
        return Err(invalid("svm_predict", "not a margin baseline"));
    }
    seqs.iter().map(|s| Ok(model.svm_decision(&model.svm_vector(s)?) >= 0.0)).collect()
}
