//! Inline-connection block: grouped depthwise filtering where every group also
//! receives the sum of the other groups' inputs, then a pointwise projection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use yolco_autograd::{Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionMode {
    /// Groups are filtered independently.
    None,
    /// Residual `x` added to the block output instead of inline sums.
    Skip,
    /// Inline sums only into the first half of the groups.
    HalfInc,
    /// Inline sums into every group.
    Inc,
}

impl ConnectionMode {
    pub const ALL: [ConnectionMode; 4] = [Self::None, Self::Skip, Self::HalfInc, Self::Inc];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Skip => "skip",
            Self::HalfInc => "half_inc",
            Self::Inc => "inc",
        }
    }
}

impl fmt::Display for ConnectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConnectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid("connection mode", format!("unknown mode {s:?}, expected none|skip|half_inc|inc")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InCNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub mode: ConnectionMode,
}

impl InCNetConfig {
    pub fn new(in_channels: usize, out_channels: usize, groups: usize, mode: ConnectionMode) -> Self {
        Self { in_channels, out_channels, groups, kernel: 3, mode }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(invalid("InCNetConfig", reason));
        if self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return fail("channels and groups must be positive".into());
        }
        if self.in_channels % self.groups != 0 {
            return fail(format!("{} channels do not split into {} groups", self.in_channels, self.groups));
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel {} must be odd", self.kernel));
        }
        if self.mode == ConnectionMode::HalfInc && self.groups % 2 != 0 {
            return fail(format!("half_inc needs an even group count, got {}", self.groups));
        }
        if self.mode == ConnectionMode::Skip && self.in_channels != self.out_channels {
            return fail(format!("skip needs equal channels, got {} -> {}", self.in_channels, self.out_channels));
        }
        Ok(())
    }

    /// Which groups receive the inline sum, or `None` when the mode has no inline sums.
    pub fn connected(&self) -> Option<Vec<bool>> {
        match self.mode {
            ConnectionMode::Inc => Some(vec![true; self.groups]),
            ConnectionMode::HalfInc => Some((0..self.groups).map(|g| g < self.groups / 2).collect()),
            ConnectionMode::None | ConnectionMode::Skip => None,
        }
    }

    pub fn param_count(&self) -> usize {
        let (c, o, k) = (self.in_channels, self.out_channels, self.kernel);
        c * k * k + c * o + o
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        let (c, o, k) = (self.in_channels, self.out_channels, self.kernel);
        (c * k * k + c * o) * h * w
    }

    /// Variance multiplier of the pre-projection sum relative to one group input,
    /// averaged over groups, used to scale the projection's initial fan-in.
    fn fan_gain(&self) -> f64 {
        match self.connected() {
            Some(mask) => {
                let others = (self.groups - 1) as f64;
                let connected = mask.iter().filter(|&&c| c).count() as f64;
                1.0 + others * connected / self.groups as f64
            }
            None => 1.0,
        }
    }
}

/// Parameter handles of one block.
#[derive(Clone, Copy, Debug)]
pub struct InCNetParams {
    pub dw: ParamId,
    pub pw: ParamId,
    pub pw_bias: ParamId,
}

/// He-uniform bound for a given fan-in under LeakyReLU.
pub fn he_bound(fan_in: f64) -> f64 {
    (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt()
}

/// Registers `{prefix}.dw`, `{prefix}.pw` and `{prefix}.pw_bias`.
pub fn init_incnet<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &InCNetConfig,
    rng: &mut R,
) -> Result<InCNetParams> {
    cfg.validate()?;
    let (c, o, k) = (cfg.in_channels, cfg.out_channels, cfg.kernel);
    let b_dw = he_bound((k * k) as f64);
    let b_pw = he_bound(c as f64 * cfg.fan_gain());
    Ok(InCNetParams {
        dw: store.add(format!("{prefix}.dw"), Tensor::uniform(&[c, 1, k, k], -b_dw, b_dw, rng))?,
        pw: store.add(format!("{prefix}.pw"), Tensor::uniform(&[o, c, 1, 1], -b_pw, b_pw, rng))?,
        pw_bias: store.add(format!("{prefix}.pw_bias"), Tensor::zeros(&[o]))?,
    })
}

/// `LeakyReLU(P(concat_i[D(x_i) + sum_{j != i} x_j]))`, with the mode deciding which
/// groups receive the sum (or, for `Skip`, adding `x` after the activation).
pub fn incnet_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    dw: Var,
    pw: Var,
    pw_bias: Var,
    cfg: &InCNetConfig,
) -> Result<Var> {
    cfg.validate()?;
    let pad = cfg.kernel / 2;
    let mut pre = tape.depthwise_conv2d(x, dw, 1, pad)?;
    if let Some(mask) = cfg.connected() {
        if cfg.groups > 1 {
            let sums = tape.cross_group_sum(x, cfg.groups, &mask)?;
            pre = tape.add(pre, sums)?;
        }
    }
    let y = tape.pointwise_conv2d(pre, pw, Some(pw_bias))?;
    let y = tape.leaky_relu(y, LEAKY_SLOPE);
    if cfg.mode == ConnectionMode::Skip {
        return Ok(tape.add(y, x)?);
    }
    Ok(y)
}
