//! Uniform attribute quantization with per-image, global and adaptive ranges.

pub mod bitstream;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{canonicalize_theta, GaussianSet};
use crate::image::ImageBuffer;
use crate::metrics::{loss_render, loss_render_with_grad, LossBreakdown};
use crate::render::{render, render_backward, GaussianGrads, RenderConfig};

pub use bitstream::{decode_bitstream, encode_bitstream, header_len, StreamMeta, FORMAT_VERSION, MAGIC};

/// Quantized attribute groups, in bitstream order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    MuX,
    MuY,
    LogScale,
    Theta,
    Color,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [Attribute::MuX, Attribute::MuY, Attribute::LogScale, Attribute::Theta, Attribute::Color];

    /// Scalars per primitive.
    pub fn arity(self) -> usize {
        match self {
            Attribute::LogScale => 2,
            Attribute::Color => 3,
            _ => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::MuX => "mu_x",
            Attribute::MuY => "mu_y",
            Attribute::LogScale => "log_scale",
            Attribute::Theta => "theta",
            Attribute::Color => "color",
        }
    }
}

/// Bit width and range `[β, β + α]` of one attribute. `α` and `β` are kept
/// in single precision because that is what the bitstream stores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttrRange {
    pub bits: u8,
    pub alpha: f32,
    pub beta: f32,
}

impl AttrRange {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            return Err(Error::InvalidParameter(format!("bit width {} outside [1, 16]", self.bits)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!("range needs finite alpha > 0 and finite beta (alpha {}, beta {})", self.alpha, self.beta)));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Width of one quantization step.
    pub fn step(&self) -> f64 {
        self.alpha as f64 / self.levels() as f64
    }

    pub fn lo(&self) -> f64 {
        self.beta as f64
    }

    pub fn hi(&self) -> f64 {
        self.beta as f64 + self.alpha as f64
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo() && x <= self.hi()
    }

    pub fn quantize(&self, x: f64) -> u16 {
        let t = (x.clamp(self.lo(), self.hi()) - self.lo()) / self.alpha as f64;
        (t * self.levels() as f64).round().clamp(0.0, self.levels() as f64) as u16
    }

    pub fn dequantize(&self, s: u16) -> f64 {
        let levels = self.levels();
        if s as u32 >= levels {
            return self.hi();
        }
        self.lo() + s as f64 / levels as f64 * self.alpha as f64
    }
}

/// Per-attribute quantization parameters, indexed by [`Attribute::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub attrs: [AttrRange; 5],
}

/// Default widths: μ 16 per axis, log-scale 12, θ 8, color 8 per channel.
pub const DEFAULT_BITS: [u8; 5] = [16, 16, 12, 8, 8];

impl QuantSpec {
    pub fn get(&self, a: Attribute) -> &AttrRange {
        &self.attrs[a.index()]
    }

    pub fn validate(&self) -> Result<()> {
        self.attrs.iter().try_for_each(AttrRange::validate)
    }

    /// Bits used by one primitive.
    pub fn bits_per_primitive(&self) -> usize {
        Attribute::ALL.iter().map(|a| a.arity() * self.get(*a).bits as usize).sum()
    }

    pub fn with_bits(mut self, bits: [u8; 5]) -> Self {
        for (r, b) in self.attrs.iter_mut().zip(bits) {
            r.bits = b;
        }
        self
    }

    pub fn with_uniform_bits(self, bits: u8) -> Self {
        self.with_bits([bits; 5])
    }

    /// Fixed global base used when no calibration corpus is supplied.
    /// Calibrated on held-out procedural crops with the heuristic pipeline
    /// at the default operating point, then widened to round numbers.
    pub fn default_global_base() -> Self {
        let r = |bits, lo: f32, hi: f32| AttrRange { bits, alpha: hi - lo, beta: lo };
        Self {
            attrs: [
                r(DEFAULT_BITS[0], 0.0, 1.0),
                r(DEFAULT_BITS[1], 0.0, 1.0),
                r(DEFAULT_BITS[2], -1.25, 3.0),
                r(DEFAULT_BITS[3], 0.0, PI as f32),
                r(DEFAULT_BITS[4], -0.5, 1.0),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeStrategy {
    PerImage,
    Global,
    Adaptive,
}

impl RangeStrategy {
    pub fn tag(self) -> u8 {
        match self {
            RangeStrategy::PerImage => 0,
            RangeStrategy::Global => 1,
            RangeStrategy::Adaptive => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(RangeStrategy::PerImage),
            1 => Some(RangeStrategy::Global),
            2 => Some(RangeStrategy::Adaptive),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RangeStrategy::PerImage => "per_image",
            RangeStrategy::Global => "global",
            RangeStrategy::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for RangeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "per_image" => Ok(RangeStrategy::PerImage),
            "global" => Ok(RangeStrategy::Global),
            "adaptive" => Ok(RangeStrategy::Adaptive),
            _ => Err(Error::InvalidParameter(format!("unknown range strategy '{s}'"))),
        }
    }
}

/// Lower percentile used by the adaptive strategy and by calibration.
pub const ROBUST_LO_PCT: f64 = 0.5;
pub const ROBUST_HI_PCT: f64 = 99.5;
/// Offset bound as a fraction of the base width.
pub const OFFSET_BOUND: f64 = 0.5;

/// Raw values of one attribute, in quantization order (primitive-major,
/// components inner). μ is normalized by the canvas.
pub fn attribute_values(set: &GaussianSet, a: Attribute, width: usize, height: usize) -> Vec<f64> {
    let n = set.len();
    match a {
        Attribute::MuX => set.mu.iter().map(|m| m[0] / width as f64).collect(),
        Attribute::MuY => set.mu.iter().map(|m| m[1] / height as f64).collect(),
        Attribute::LogScale => (0..n).flat_map(|i| set.log_scale[i]).collect(),
        Attribute::Theta => set.theta.clone(),
        Attribute::Color => (0..n).flat_map(|i| set.color[i]).collect(),
    }
}

/// Linear-interpolated percentile of sorted data, `pct` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let t = pos - i as f64;
    sorted[i] + (sorted[j] - sorted[i]) * t
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

fn next_down(x: f32) -> f32 {
    if x == 0.0 {
        return -f32::from_bits(1);
    }
    let b = x.to_bits();
    f32::from_bits(if x > 0.0 { b - 1 } else { b + 1 })
}

fn next_up(x: f32) -> f32 {
    -next_down(-x)
}

/// Smallest single-precision range `[β, β + α]` that contains `[lo, hi]`.
pub fn covering_range(bits: u8, lo: f64, hi: f64) -> AttrRange {
    let hi = if hi - lo < 1e-6 { lo + 1e-6 } else { hi };
    let mut beta = lo as f32;
    while beta as f64 > lo {
        beta = next_down(beta);
    }
    let mut alpha = (hi - beta as f64) as f32;
    while (beta as f64 + alpha as f64) < hi {
        alpha = next_up(alpha);
    }
    AttrRange { bits, alpha, beta }
}

/// `(Δα, Δβ)` for one attribute: the robust percentile range relative to the
/// base, each offset clamped to `±OFFSET_BOUND · ᾱ`.
pub fn adaptive_offsets(values: &[f64], base: &AttrRange) -> (f64, f64) {
    let s = sorted(values.to_vec());
    let lo = percentile_sorted(&s, ROBUST_LO_PCT);
    let hi = percentile_sorted(&s, ROBUST_HI_PCT);
    let bound = OFFSET_BOUND * base.alpha as f64;
    let d_beta = (lo - base.beta as f64).clamp(-bound, bound);
    let d_alpha = ((hi - lo) - base.alpha as f64).clamp(-bound, bound);
    (d_alpha, d_beta)
}

/// Ranges for `set` under `strategy`. Bit widths always come from `base`.
pub fn derive_ranges(set: &GaussianSet, width: usize, height: usize, strategy: RangeStrategy, base: &QuantSpec) -> Result<QuantSpec> {
    base.validate()?;
    if strategy == RangeStrategy::Global {
        return Ok(*base);
    }
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut out = *base;
    for a in Attribute::ALL {
        let b = base.get(a);
        let v = attribute_values(set, a, width, height);
        out.attrs[a.index()] = match strategy {
            RangeStrategy::PerImage => {
                let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
                covering_range(b.bits, lo, hi)
            }
            _ => {
                let (da, db) = adaptive_offsets(&v, b);
                AttrRange { bits: b.bits, alpha: (b.alpha as f64 + da) as f32, beta: (b.beta as f64 + db) as f32 }
            }
        };
    }
    out.validate()?;
    Ok(out)
}

/// Global base from pooled robust percentiles over a calibration corpus of
/// `(set, width, height)` triples.
pub fn calibrate_global_base(sets: &[(GaussianSet, usize, usize)], bits: [u8; 5]) -> Result<QuantSpec> {
    let mut attrs = [AttrRange { bits: 8, alpha: 1.0, beta: 0.0 }; 5];
    for a in Attribute::ALL {
        let pooled: Vec<f64> = sets.iter().flat_map(|(s, w, h)| attribute_values(s, a, *w, *h)).collect();
        if pooled.is_empty() {
            return Err(Error::EmptySet);
        }
        let s = sorted(pooled);
        attrs[a.index()] = covering_range(bits[a.index()], percentile_sorted(&s, ROBUST_LO_PCT), percentile_sorted(&s, ROBUST_HI_PCT));
    }
    Ok(QuantSpec { attrs })
}

/// Symbol arrays per attribute, laid out as [`attribute_values`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantSymbols {
    pub count: usize,
    pub symbols: [Vec<u16>; 5],
}

pub fn quantize(set: &GaussianSet, spec: &QuantSpec, width: usize, height: usize) -> Result<QuantSymbols> {
    spec.validate()?;
    let symbols = Attribute::ALL.map(|a| {
        let r = spec.get(a);
        attribute_values(set, a, width, height).into_iter().map(|x| r.quantize(x)).collect()
    });
    Ok(QuantSymbols { count: set.len(), symbols })
}

/// Inverts [`quantize`]. Stage tags are not part of the symbols; every
/// primitive is tagged `stage`.
pub fn dequantize(q: &QuantSymbols, spec: &QuantSpec, width: usize, height: usize, stage: u16) -> Result<GaussianSet> {
    spec.validate()?;
    for a in Attribute::ALL {
        if q.symbols[a.index()].len() != q.count * a.arity() {
            return Err(Error::ShapeMismatch(format!("{} has {} symbols for {} primitives", a.name(), q.symbols[a.index()].len(), q.count)));
        }
    }
    let deq = |a: Attribute, i: usize| spec.get(a).dequantize(q.symbols[a.index()][i]);
    let mut set = GaussianSet::with_capacity(q.count);
    for i in 0..q.count {
        set.mu.push([deq(Attribute::MuX, i) * width as f64, deq(Attribute::MuY, i) * height as f64]);
        set.log_scale.push([deq(Attribute::LogScale, 2 * i), deq(Attribute::LogScale, 2 * i + 1)]);
        set.theta.push(canonicalize_theta(deq(Attribute::Theta, i)));
        set.color.push([deq(Attribute::Color, 3 * i), deq(Attribute::Color, 3 * i + 1), deq(Attribute::Color, 3 * i + 2)]);
        set.stage.push(stage);
    }
    Ok(set)
}

/// `dequantize(quantize(set))` with the input's stage tags kept.
pub fn roundtrip(set: &GaussianSet, spec: &QuantSpec, width: usize, height: usize) -> Result<GaussianSet> {
    let mut out = dequantize(&quantize(set, spec, width, height)?, spec, width, height, 1)?;
    out.stage.clone_from(&set.stage);
    Ok(out)
}

/// Straight-through multipliers per primitive in gradient layout
/// `[mu_x, mu_y, log_s1, log_s2, theta, r, g, b]`: 1 in range, 0 if clamped.
pub type SteMask = Vec<[f64; 8]>;

/// Forward pass of the straight-through quantizer and its gradient mask.
pub fn ste_quantize(set: &GaussianSet, spec: &QuantSpec, width: usize, height: usize) -> Result<(GaussianSet, SteMask)> {
    let out = roundtrip(set, spec, width, height)?;
    let m = |a: Attribute, x: f64| if spec.get(a).contains(x) { 1.0 } else { 0.0 };
    let mask = (0..set.len())
        .map(|i| {
            let (mu, ls, c) = (set.mu[i], set.log_scale[i], set.color[i]);
            [
                m(Attribute::MuX, mu[0] / width as f64),
                m(Attribute::MuY, mu[1] / height as f64),
                m(Attribute::LogScale, ls[0]),
                m(Attribute::LogScale, ls[1]),
                m(Attribute::Theta, set.theta[i]),
                m(Attribute::Color, c[0]),
                m(Attribute::Color, c[1]),
                m(Attribute::Color, c[2]),
            ]
        })
        .collect();
    Ok((out, mask))
}

/// Applies the straight-through rule to gradients taken at the quantized set.
pub fn ste_backward(grads: &GaussianGrads, mask: &SteMask) -> Result<GaussianGrads> {
    if grads.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!("{} gradients for {} mask rows", grads.len(), mask.len())));
    }
    let mut out = grads.clone();
    for (i, m) in mask.iter().enumerate() {
        out.d_mu[i] = [out.d_mu[i][0] * m[0], out.d_mu[i][1] * m[1]];
        out.d_log_scale[i] = [out.d_log_scale[i][0] * m[2], out.d_log_scale[i][1] * m[3]];
        out.d_theta[i] *= m[4];
        for k in 0..3 {
            out.d_color[i][k] *= m[5 + k];
        }
    }
    Ok(out)
}

pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossQ {
    pub render: LossBreakdown,
    /// Mean squared quantization error in units of each attribute's `α`.
    pub err: f64,
    pub total: f64,
}

fn quant_error(set: &GaussianSet, q: &GaussianSet, spec: &QuantSpec, width: usize, height: usize) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for a in Attribute::ALL {
        let alpha = spec.get(a).alpha as f64;
        let x = attribute_values(set, a, width, height);
        let y = attribute_values(q, a, width, height);
        for (u, v) in x.iter().zip(&y) {
            let mut d = u - v;
            if a == Attribute::Theta {
                d = d.rem_euclid(PI);
                d = d.min(PI - d);
            }
            sum += (d / alpha).powi(2);
            n += 1;
        }
    }
    (sum, n)
}

/// `L_render(R(Q(G)), I_gt) + γ · L_err`.
pub fn loss_q(set: &GaussianSet, spec: &QuantSpec, target: &ImageBuffer, gamma: f64, rcfg: &RenderConfig) -> Result<LossQ> {
    let (w, h) = (target.width(), target.height());
    let q = roundtrip(set, spec, w, h)?;
    let render_loss = loss_render(&render(&q, w, h, rcfg), target)?;
    let (sum, n) = quant_error(set, &q, spec, w, h);
    let err = if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(LossQ { render: render_loss, err, total: render_loss.total + gamma * err })
}

/// [`loss_q`] and its straight-through gradient w.r.t. `set`. The
/// quantized values in `L_err` are treated as constants.
pub fn loss_q_with_grad(set: &GaussianSet, spec: &QuantSpec, target: &ImageBuffer, gamma: f64, rcfg: &RenderConfig) -> Result<(LossQ, GaussianGrads)> {
    let (w, h) = (target.width(), target.height());
    let (q, mask) = ste_quantize(set, spec, w, h)?;
    let (render_loss, d_img) = loss_render_with_grad(&render(&q, w, h, rcfg), target)?;
    let mut grads = ste_backward(&render_backward(&q, &d_img, rcfg), &mask)?;
    let (sum, n) = quant_error(set, &q, spec, w, h);
    let err = if n == 0 { 0.0 } else { sum / n as f64 };
    if n > 0 && gamma != 0.0 {
        let k = 2.0 * gamma / n as f64;
        let coef = |a: Attribute| k / (spec.get(a).alpha as f64).powi(2);
        for i in 0..set.len() {
            grads.d_mu[i][0] += coef(Attribute::MuX) * (set.mu[i][0] / w as f64 - q.mu[i][0] / w as f64) / w as f64;
            grads.d_mu[i][1] += coef(Attribute::MuY) * (set.mu[i][1] / h as f64 - q.mu[i][1] / h as f64) / h as f64;
            for j in 0..2 {
                grads.d_log_scale[i][j] += coef(Attribute::LogScale) * (set.log_scale[i][j] - q.log_scale[i][j]);
            }
            let mut d = (set.theta[i] - q.theta[i]).rem_euclid(PI);
            if d > PI / 2.0 {
                d -= PI;
            }
            grads.d_theta[i] += coef(Attribute::Theta) * d;
            for k in 0..3 {
                grads.d_color[i][k] += coef(Attribute::Color) * (set.color[i][k] - q.color[i][k]);
            }
        }
    }
    Ok((LossQ { render: render_loss, err, total: render_loss.total + gamma * err }, grads))
}
