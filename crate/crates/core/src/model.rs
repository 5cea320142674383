//! The two-scale detector, its losses and size accounting.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use yolco_autograd::{Bound, Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::geometry::{AnchorSet, Assignment, GridSpec};
use crate::incnet::{he_bound, incnet_forward, init_incnet, ConnectionMode, InCNetConfig, InCNetParams, LEAKY_SLOPE};

/// Initial bias of the probability channels; sigmoid(-4) ≈ 0.018.
pub const CLS_BIAS_INIT: f32 = -4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Inline-connection blocks (the lightweight model).
    Incnet,
    /// Dense 3×3 convolutions in the same positions (the full-size counterpart).
    FullConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Box regression plus classification.
    Dual,
    /// Classification only; box outputs receive no supervision.
    ClsOnly,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dual => "dual",
            Self::ClsOnly => "cls_only",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Self::Dual),
            "cls_only" => Ok(Self::ClsOnly),
            _ => Err(invalid("loss mode", format!("unknown mode {s:?}, expected dual|cls_only"))),
        }
    }
}

/// Network shape. `channels` has seven entries: the stem width, the widths of the
/// five stride-doubling stages, and the widest deep block. The stride-32 head reads
/// `channels[5]` features and the stride-16 head reads `channels[4]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct YolcoConfig {
    pub channels: Vec<usize>,
    pub block: BlockKind,
    pub groups: usize,
    pub connection_mode: ConnectionMode,
    pub loss_mode: LossMode,
    pub input_side: usize,
    pub anchors: AnchorSet,
}

impl Default for YolcoConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128, 256, 512, 1024],
            block: BlockKind::Incnet,
            groups: 8,
            connection_mode: ConnectionMode::Inc,
            loss_mode: LossMode::Dual,
            input_side: 1024,
            anchors: AnchorSet { sizes: vec![(24.0, 24.0), (40.0, 40.0), (64.0, 64.0)] },
        }
    }
}

pub const STRIDES: [usize; 2] = [32, 16];

/// One convolution stage of the network as an explicit layer list.
#[derive(Clone, Debug, PartialEq)]
enum LayerSpec {
    Conv { name: String, cin: usize, cout: usize, k: usize },
    Block { name: String, cfg: InCNetConfig, kind: BlockKind },
}

impl LayerSpec {
    fn params(&self) -> usize {
        match self {
            Self::Conv { cin, cout, k, .. } => cin * cout * k * k + cout,
            Self::Block { cfg, kind: BlockKind::Incnet, .. } => cfg.param_count(),
            Self::Block { cfg, kind: BlockKind::FullConv, .. } => {
                cfg.in_channels * cfg.out_channels * cfg.kernel * cfg.kernel + cfg.out_channels
            }
        }
    }

    fn macs(&self, hw: usize) -> usize {
        match self {
            Self::Conv { cin, cout, k, .. } => cin * cout * k * k * hw,
            Self::Block { cfg, kind: BlockKind::Incnet, .. } => cfg.macs(1, 1) * hw,
            Self::Block { cfg, kind: BlockKind::FullConv, .. } => {
                cfg.in_channels * cfg.out_channels * cfg.kernel * cfg.kernel * hw
            }
        }
    }
}

impl YolcoConfig {
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn head_channels(&self) -> usize {
        5 * self.num_anchors()
    }

    /// Length of a collected feature vector: both heads' input widths.
    pub fn feature_dim(&self) -> usize {
        self.channels[5] + self.channels[4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 7 || self.channels.contains(&0) {
            return Err(invalid("YolcoConfig", "channels needs seven positive widths"));
        }
        if self.input_side % 32 != 0 || self.input_side == 0 {
            return Err(invalid("YolcoConfig", format!("input side {} is not a multiple of 32", self.input_side)));
        }
        if self.anchors.is_empty() {
            return Err(invalid("YolcoConfig", "no anchors"));
        }
        for layer in self.layers() {
            if let LayerSpec::Block { cfg, kind: BlockKind::Incnet, .. } = layer {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    fn block_cfg(&self, cin: usize, cout: usize) -> InCNetConfig {
        let mode = match self.connection_mode {
            ConnectionMode::Skip if cin != cout => ConnectionMode::None,
            m => m,
        };
        InCNetConfig::new(cin, cout, self.groups, mode)
    }

    /// Layers in execution order with the spatial downsampling factor at which each runs.
    fn layers_with_scale(&self) -> Vec<(LayerSpec, usize)> {
        let c = &self.channels;
        let block = |i: usize, cin, cout| LayerSpec::Block {
            name: format!("block{i}"),
            cfg: self.block_cfg(cin, cout),
            kind: self.block,
        };
        let conv = |name: &str, cin, cout, k| LayerSpec::Conv { name: name.into(), cin, cout, k };
        let head = self.head_channels();
        vec![
            (conv("stem", 3, c[0], 3), 1),
            (block(1, c[0], c[1]), 2),
            (block(2, c[1], c[2]), 4),
            (block(3, c[2], c[3]), 8),
            (block(4, c[3], c[4]), 16),
            (block(5, c[4], c[5]), 32),
            (block(6, c[5], c[6]), 32),
            (conv("neck", c[6], c[5], 1), 32),
            (block(7, c[5], c[5]), 32),
            (conv("head5", c[5], head, 1), 32),
            (conv("merge", c[5] + c[4], c[4], 1), 16),
            (conv("head4", c[4], head, 1), 16),
        ]
    }

    fn layers(&self) -> Vec<LayerSpec> {
        self.layers_with_scale().into_iter().map(|(l, _)| l).collect()
    }

    /// Exact trainable scalar count implied by the configuration.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::params).sum()
    }

    /// Multiply-accumulates of every convolution for one `side × side × 3` input.
    pub fn mac_count(&self, side: usize) -> usize {
        self.layers_with_scale()
            .iter()
            .map(|(l, f)| {
                let s = side / f;
                l.macs(s * s)
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum LayerParams {
    Conv { w: ParamId, b: ParamId },
    Inc(InCNetParams),
}

/// A built detector: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Yolco {
    pub config: YolcoConfig,
    pub params: ParamStore<f32>,
    layers: Vec<(LayerSpec, LayerParams)>,
}

/// Symbolic outputs of one scale on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ScaleVars {
    /// `[4 * n_a, h, w]` raw offsets.
    pub boxes: Var,
    /// `[n_a, h, w]` logits.
    pub cls: Var,
    /// Input of the output layer.
    pub fused: Var,
    pub grid: GridSpec,
}

/// Index 0 is the stride-32 scale, index 1 the stride-16 scale.
pub type NetworkVars = [ScaleVars; 2];

/// Concrete outputs of one scale.
#[derive(Clone, Debug)]
pub struct ScaleOutput {
    pub boxes: Tensor<f32>,
    pub cls: Tensor<f32>,
    pub fused: Tensor<f32>,
    pub grid: GridSpec,
}

pub type NetworkOutput = [ScaleOutput; 2];

fn lecun_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let b = (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

/// Input of layer `i` from the image and the outputs of the layers before it:
/// max-pooled through the backbone, then the upsampled stride-32 trunk joined with
/// block 4 for the stride-16 branch.
fn layer_input<T: Element>(tape: &mut Tape<T>, i: usize, x: Var, outs: &[Var]) -> Result<Var> {
    Ok(match i {
        0 => x,
        1..=5 => tape.maxpool2d(outs[i - 1], 2, 2)?,
        6..=9 => outs[8.min(i - 1)],
        10 => {
            let up = tape.upsample_nearest(outs[8], 2)?;
            tape.concat_channels(up, outs[4])?
        }
        _ => outs[10],
    })
}

impl Yolco {
    /// Deterministic He-uniform initialization from `seed`.
    pub fn build(config: YolcoConfig, seed: u64) -> Result<Self> {
        let mut model = Self::build_uncalibrated(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        model.calibrate(&mut rng)?;
        Ok(model)
    }

    fn build_uncalibrated(config: YolcoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let na = config.num_anchors();
        for spec in config.layers() {
            let lp = match &spec {
                LayerSpec::Conv { name, cin, cout, k } => {
                    let fan = cin * k * k;
                    let is_head = name.starts_with("head");
                    let w = if is_head {
                        lecun_uniform(&[*cout, *cin, *k, *k], fan, &mut rng)
                    } else {
                        let b = he_bound(fan as f64);
                        Tensor::uniform(&[*cout, *cin, *k, *k], -b, b, &mut rng)
                    };
                    let mut bias = Tensor::zeros(&[*cout]);
                    if is_head {
                        bias.data_mut()[4 * na..].fill(CLS_BIAS_INIT);
                    }
                    LayerParams::Conv {
                        w: params.add(format!("{name}.w"), w)?,
                        b: params.add(format!("{name}.b"), bias)?,
                    }
                }
                LayerSpec::Block { name, cfg, kind: BlockKind::Incnet } => {
                    LayerParams::Inc(init_incnet(&mut params, name, cfg, &mut rng)?)
                }
                LayerSpec::Block { name, cfg, kind: BlockKind::FullConv } => {
                    let (ci, co, k) = (cfg.in_channels, cfg.out_channels, cfg.kernel);
                    let b = he_bound((ci * k * k) as f64);
                    LayerParams::Conv {
                        w: params.add(format!("{name}.w"), Tensor::uniform(&[co, ci, k, k], -b, b, &mut rng))?,
                        b: params.add(format!("{name}.b"), Tensor::zeros(&[co]))?,
                    }
                }
            };
            layers.push((spec, lp));
        }
        Ok(Self { config, params, layers })
    }

    /// Rebuilds the architecture from `config` and loads named tensors into it.
    pub fn from_tensors(config: YolcoConfig, tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut model = Self::build_uncalibrated(config, 0)?;
        model.params.load_named(tensors)?;
        Ok(model)
    }

    pub fn count_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn count_macs(&self, input_side: usize) -> usize {
        self.config.mac_count(input_side)
    }

    /// Records the forward pass of `x[3, H, W]` on `tape` using parameters bound as `p`.
    pub fn forward_on<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<NetworkVars> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(invalid("forward", format!("expected a [3, H, W] image, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(invalid("forward", format!("image {h}x{w} is not a multiple of 32")));
        }
        let mut outs = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let input = layer_input(tape, i, x, &outs)?;
            outs.push(self.layer_on(tape, p, i, input)?);
        }
        let na = self.config.num_anchors();
        let split = |tape: &mut Tape<T>, head: Var, fused: Var, stride: usize| -> Result<ScaleVars> {
            Ok(ScaleVars {
                boxes: tape.slice(head, 0, 0, 4 * na)?,
                cls: tape.slice(head, 0, 4 * na, na)?,
                fused,
                grid: GridSpec::for_image(w, h, stride),
            })
        };
        Ok([split(tape, outs[9], outs[8], STRIDES[0])?, split(tape, outs[11], outs[10], STRIDES[1])?])
    }

    fn layer_on<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        match &self.layers[i] {
            (LayerSpec::Conv { name, k, .. }, LayerParams::Conv { w, b }) => {
                let y = tape.conv2d(x, p[*w], Some(p[*b]), 1, k / 2)?;
                Ok(if name.starts_with("head") { y } else { tape.leaky_relu(y, LEAKY_SLOPE) })
            }
            (LayerSpec::Block { .. }, LayerParams::Conv { w, b }) => {
                let y = tape.conv2d(x, p[*w], Some(p[*b]), 1, 1)?;
                Ok(tape.leaky_relu(y, LEAKY_SLOPE))
            }
            (LayerSpec::Block { cfg, .. }, LayerParams::Inc(ip)) => incnet_forward(tape, x, p[ip.dw], p[ip.pw], p[ip.pw_bias], cfg),
            _ => unreachable!("layer and parameter kinds are built together"),
        }
    }

    /// Output of layer `i` alone on `image`, given the outputs of every earlier layer.
    fn eval_layer(&self, i: usize, image: &Tensor<f32>, earlier: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let outs: Vec<Var> = earlier.iter().map(|t| tape.constant(t.clone())).collect();
        let input = layer_input(&mut tape, i, x, &outs)?;
        // only this layer's parameters are read, the rest stay unbound
        let unbound = tape.constant(Tensor::zeros(&[1]));
        let mut vars = vec![unbound; self.params.len()];
        let ids = match self.layers[i].1 {
            LayerParams::Conv { w, b } => vec![w, b],
            LayerParams::Inc(ip) => vec![ip.dw, ip.pw, ip.pw_bias],
        };
        for id in ids {
            vars[id.index()] = tape.constant(self.params.get(id).clone());
        }
        let y = self.layer_on(&mut tape, &Bound::from_vars(vars), i, input)?;
        Ok(tape.value(y).clone())
    }

    /// Rescales each hidden layer so its output RMS on a seeded noise image is 1.
    /// Without normalization layers the inline sums otherwise inflate activations
    /// block after block. Layers are settled in execution order, so every layer is
    /// calibrated on the final outputs of the layers feeding it.
    fn calibrate(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let image = Tensor::<f32>::uniform(&[3, 64, 64], 0.0, 1.0, rng);
        let mut outs: Vec<Tensor<f32>> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let mut y = self.eval_layer(i, &image, &outs)?;
            let head = matches!(&self.layers[i].0, LayerSpec::Conv { name, .. } if name.starts_with("head"));
            if !head {
                for _ in 0..2 {
                    let rms = (y.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / y.numel() as f64).sqrt();
                    if rms <= 0.0 || !rms.is_finite() {
                        break;
                    }
                    let id = match self.layers[i].1 {
                        LayerParams::Conv { w, .. } => w,
                        LayerParams::Inc(ip) => ip.pw,
                    };
                    self.params.get_mut(id).scale((1.0 / rms) as f32);
                    y = self.eval_layer(i, &image, &outs)?;
                }
            }
            outs.push(y);
        }
        Ok(())
    }

    /// Gradient-free forward pass of a `[3, H, W]` image.
    pub fn infer(&self, image: &Tensor<f32>) -> Result<NetworkOutput> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let vars = self.forward_on(&mut tape, &p, x)?;
        let take = |s: &ScaleVars| ScaleOutput {
            boxes: tape.value(s.boxes).clone(),
            cls: tape.value(s.cls).clone(),
            fused: tape.value(s.fused).clone(),
            grid: s.grid,
        };
        Ok([take(&vars[0]), take(&vars[1])])
    }
}

/// Weights of the mixed objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub theta: f64,
    pub gamma: f64,
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { theta: 0.95, gamma: 1.0, eps: 1e-9, alpha: 1.0, beta: 100.0 }
    }
}

/// Mean focal loss of `logits` against 0/1 `targets` (same element count).
pub fn focal_cls_loss<T: Element>(tape: &mut Tape<T>, logits: Var, targets: &[f64], cfg: &LossConfig) -> Result<Var> {
    let n = tape.value(logits).numel();
    if targets.len() != n || n == 0 {
        return Err(invalid("focal_cls_loss", format!("{} targets for {n} logits", targets.len())));
    }
    let flat = tape.reshape(logits, &[n])?;
    let p = tape.sigmoid(flat);
    let mut terms = Vec::new();
    if targets.iter().any(|&t| t > 0.0) {
        // -theta (1-p)^gamma log(p + eps)
        let one_minus = tape.affine(p, -1.0, 1.0);
        let w = tape.powf(one_minus, cfg.gamma);
        let shifted = tape.affine(p, 1.0, cfg.eps);
        let lg = tape.ln(shifted);
        let t = tape.mul(w, lg)?;
        let mask = tape.constant(Tensor::from_vec(&[n], targets.iter().map(|&v| T::from_f64_lossy(v)).collect())?);
        let t = tape.mul(t, mask)?;
        terms.push(tape.scale(t, -cfg.theta));
    }
    if targets.iter().any(|&t| t < 1.0) {
        // -(1-theta) p^gamma log(1 - p + eps)
        let w = tape.powf(p, cfg.gamma);
        let one_minus = tape.affine(p, -1.0, 1.0);
        let shifted = tape.affine(one_minus, 1.0, cfg.eps);
        let lg = tape.ln(shifted);
        let t = tape.mul(w, lg)?;
        let mask =
            tape.constant(Tensor::from_vec(&[n], targets.iter().map(|&v| T::from_f64_lossy(1.0 - v)).collect())?);
        let t = tape.mul(t, mask)?;
        terms.push(tape.scale(t, -(1.0 - cfg.theta)));
    }
    let total = match terms[..] {
        [a] => a,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!("targets are non-empty"),
    };
    Ok(tape.mean(total))
}

/// Mean over responsible slots of squared offset error, `(1/K) Σ ‖q−q̂‖² + ‖v−v̂‖²`.
/// An empty assignment contributes `None`.
pub fn box_loss<T: Element>(tape: &mut Tape<T>, boxes: Var, assignment: &Assignment, grid: &GridSpec) -> Result<Option<Var>> {
    if assignment.is_empty() {
        return Ok(None);
    }
    let cells = grid.cells();
    let mut idx = Vec::with_capacity(4 * assignment.len());
    let mut target = Vec::with_capacity(4 * assignment.len());
    for t in &assignment.targets {
        let vals = [t.q.0, t.q.1, t.v.0, t.v.1];
        for (k, v) in vals.into_iter().enumerate() {
            idx.push((4 * t.anchor + k) * cells + t.cell);
            target.push(T::from_f64_lossy(v));
        }
    }
    let pred = tape.gather(boxes, &idx)?;
    let target = tape.constant(Tensor::from_vec(&[idx.len()], target)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(Some(tape.scale(s, 1.0 / assignment.len() as f64)))
}

/// Loss terms of one forward pass; `total` is the differentiable sum.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub boxes: f64,
    pub obj: f64,
    pub noobj: f64,
}

/// `L_box + α L_obj + β L_noobj` summed over both scales; `ClsOnly` omits `L_box`.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    outputs: &NetworkVars,
    assignments: &[Assignment; 2],
    cfg: &LossConfig,
    mode: LossMode,
) -> Result<LossParts> {
    let mut terms = Vec::new();
    let (mut lb, mut lo, mut ln) = (0.0, 0.0, 0.0);
    for (out, asg) in outputs.iter().zip(assignments) {
        let slots = asg.slots(&out.grid);
        let total = tape.value(out.cls).numel();
        let mut is_obj = vec![false; total];
        for &s in &slots {
            is_obj[s] = true;
        }
        if mode == LossMode::Dual {
            if let Some(b) = box_loss(tape, out.boxes, asg, &out.grid)? {
                lb += tape.value(b).item().as_f64();
                terms.push(b);
            }
        }
        if !slots.is_empty() {
            let obj = tape.gather(out.cls, &slots)?;
            let l = focal_cls_loss(tape, obj, &vec![1.0; slots.len()], cfg)?;
            lo += tape.value(l).item().as_f64();
            terms.push(tape.scale(l, cfg.alpha));
        }
        let neg: Vec<usize> = (0..total).filter(|&i| !is_obj[i]).collect();
        if !neg.is_empty() {
            let noobj = tape.gather(out.cls, &neg)?;
            let l = focal_cls_loss(tape, noobj, &vec![0.0; neg.len()], cfg)?;
            ln += tape.value(l).item().as_f64();
            terms.push(tape.scale(l, cfg.beta));
        }
    }
    let mut total = *terms.first().ok_or_else(|| invalid("total_loss", "no loss terms"))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(LossParts { total, boxes: lb, obj: lo, noobj: ln })
}
