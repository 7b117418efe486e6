//! Seeded image augmentation: MaskOut, uniform noise and a small policy stack
//! standing in for AugMix / RandAugment / TrivialAugment.
//!
//! Images are `[channels, H, W]` tensors. Every stochastic step takes an
//! explicit rng, and each gate consumes one draw even when closed, so the
//! stream position after a call does not depend on which gates fired.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `p|k`: with probability `p`, zero `k` squares.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskOutSpec {
    pub p: f64,
    pub k: usize,
}

impl fmt::Display for MaskOutSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.p, self.k)
    }
}

impl FromStr for MaskOutSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("maskout must look like \"p|k\" with k >= 0, got {s:?}"));
        let (p, k) = s.split_once('|').ok_or_else(bad)?;
        let p: f64 = p.trim().parse().map_err(|_| bad())?;
        let k: i64 = k.trim().parse().map_err(|_| bad())?;
        if k < 0 {
            return Err(Error::Config(format!("maskout square count {k} is negative")));
        }
        Ok(MaskOutSpec { p, k: k as usize })
    }
}

impl Serialize for MaskOutSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskOutSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub p: f64,
    pub amplitude: f64,
}

/// Gate probabilities and strengths of the training-time augmentation stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub augmix: f64,
    pub rand: f64,
    pub trivial: f64,
    pub maskout: MaskOutSpec,
    /// MaskOut square side as a fraction of `min(H, W)`.
    pub maskout_side: f64,
    pub noise: NoiseSpec,
    /// Scales every policy op; 0 turns them into the identity.
    pub magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            augmix: 0.0,
            rand: 0.0,
            trivial: 0.0,
            maskout: MaskOutSpec { p: 0.0, k: 0 },
            maskout_side: 0.125,
            noise: NoiseSpec {
                p: 0.0,
                amplitude: 0.0,
            },
            magnitude: 1.0,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} probability {p} outside [0, 1]")))
    }
}

impl AugmentConfig {
    /// Every gate set to `p`, MaskOut with `k` squares, noise amplitude 0.1.
    pub fn uniform(p: f64, k: usize) -> Self {
        AugmentConfig {
            augmix: p,
            rand: p,
            trivial: p,
            maskout: MaskOutSpec { p, k },
            noise: NoiseSpec { p, amplitude: 0.1 },
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_prob("augmix", self.augmix)?;
        check_prob("rand", self.rand)?;
        check_prob("trivial", self.trivial)?;
        check_prob("maskout", self.maskout.p)?;
        check_prob("noise", self.noise.p)?;
        if self.noise.amplitude < 0.0 || !self.noise.amplitude.is_finite() {
            return Err(Error::Config(format!("noise amplitude {} must be >= 0", self.noise.amplitude)));
        }
        if !(self.maskout_side > 0.0 && self.maskout_side <= 1.0) {
            return Err(Error::Config(format!("maskout_side {} outside (0, 1]", self.maskout_side)));
        }
        if self.magnitude < 0.0 || !self.magnitude.is_finite() {
            return Err(Error::Config(format!("magnitude {} must be >= 0", self.magnitude)));
        }
        Ok(())
    }

    /// True when no gate can ever open.
    pub fn is_identity(&self) -> bool {
        self.augmix == 0.0 && self.rand == 0.0 && self.trivial == 0.0 && self.maskout.p == 0.0 && self.noise.p == 0.0
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Dimension(format!("expected a [C,H,W] image, got {:?}", image.shape()))),
    }
}

fn gate<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.gen::<f64>() < p
}

/// MaskOut square side for an `h × w` image.
pub fn maskout_side(h: usize, w: usize, fraction: f64) -> usize {
    ((h.min(w) as f64 * fraction).floor() as usize).max(1)
}

/// Draws the MaskOut decision: `None` when the gate stays closed, otherwise
/// the top-left corners of `k` squares, each lying fully inside the image.
pub fn draw_maskout<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    p: f64,
    k: usize,
    side: usize,
    rng: &mut R,
) -> Option<Vec<(usize, usize)>> {
    if !gate(p, rng) {
        return None;
    }
    let side = side.min(h).min(w);
    Some(
        (0..k)
            .map(|_| (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side)))
            .collect(),
    )
}

/// Zeroes `side × side` squares at the given corners in every channel.
pub fn apply_squares(image: &Tensor, corners: &[(usize, usize)], side: usize) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    let mut out = image.clone();
    let data = out.data_mut();
    for &(y0, x0) in corners {
        for ch in 0..c {
            for y in y0..(y0 + side).min(h) {
                let row = (ch * h + y) * w;
                data[row + x0..row + (x0 + side).min(w)].fill(0.0);
            }
        }
    }
    Ok(out)
}

/// With probability `p`, zero `k` squares of side `⌊min(H,W)/8⌋`.
pub fn maskout<R: Rng + ?Sized>(image: &Tensor, p: f64, k: usize, rng: &mut R) -> Result<Tensor> {
    maskout_with_side(image, p, k, 0.125, rng)
}

pub fn maskout_with_side<R: Rng + ?Sized>(
    image: &Tensor,
    p: f64,
    k: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<Tensor> {
    check_prob("maskout", p)?;
    let (_, h, w) = dims(image)?;
    let side = maskout_side(h, w, fraction);
    match draw_maskout(h, w, p, k, side, rng) {
        Some(corners) => apply_squares(image, &corners, side),
        None => Ok(image.clone()),
    }
}

/// With probability `p`, add i.i.d. `Uniform(-amplitude, amplitude)` noise.
pub fn uniform_noise<R: Rng + ?Sized>(image: &Tensor, p: f64, amplitude: f64, rng: &mut R) -> Result<Tensor> {
    check_prob("noise", p)?;
    if amplitude < 0.0 || !amplitude.is_finite() {
        return Err(Error::Config(format!("noise amplitude {amplitude} must be >= 0")));
    }
    if !gate(p, rng) || amplitude == 0.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for v in out.data_mut() {
        *v += rng.gen_range(-amplitude..=amplitude);
    }
    Ok(out)
}

/// The shared op set of the policy stand-ins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    HShift,
    VShift,
    Contrast,
    Brightness,
    Rotate,
}

pub const OPS: [Op; 5] = [Op::HShift, Op::VShift, Op::Contrast, Op::Brightness, Op::Rotate];

const MAX_SHIFT_FRACTION: f64 = 0.125;
const MAX_CONTRAST: f64 = 0.5;
const MAX_BRIGHTNESS: f64 = 0.2;
const MAX_DEGREES: f64 = 15.0;

fn shift(image: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if dy == 0 && dx == 0 {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let sx = x as i64 - dx;
                if sx >= 0 && sx < w as i64 {
                    out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(image.shape(), out)
}

fn rotate(image: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if degrees == 0.0 {
        return Ok(image.clone());
    }
    let (s, co) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (ry, rx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation to find the source pixel
            let sx = (co * rx + s * ry + cx).round();
            let sy = (-s * rx + co * ry + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Applies `op` with a random signed strength scaled by `magnitude`.
pub fn apply_op<R: Rng + ?Sized>(image: &Tensor, op: Op, magnitude: f64, rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    let u: f64 = rng.gen_range(-1.0..=1.0) * magnitude;
    match op {
        Op::HShift => shift(image, 0, (u * MAX_SHIFT_FRACTION * w as f64).round() as i64),
        Op::VShift => shift(image, (u * MAX_SHIFT_FRACTION * h as f64).round() as i64, 0),
        Op::Contrast => {
            let f = 1.0 + u * MAX_CONTRAST;
            let mut out = image.clone();
            let plane = h * w;
            for ch in 0..c {
                let px = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
                let mean = px.iter().sum::<f64>() / plane as f64;
                for v in px {
                    *v = *v * f + (1.0 - f) * mean;
                }
            }
            Ok(out)
        }
        Op::Brightness => {
            let b = u * MAX_BRIGHTNESS;
            let mut out = image.clone();
            out.data_mut().iter_mut().for_each(|v| *v += b);
            Ok(out)
        }
        Op::Rotate => rotate(image, u * MAX_DEGREES),
    }
}

fn random_op<R: Rng + ?Sized>(rng: &mut R) -> Op {
    OPS[rng.gen_range(0..OPS.len())]
}

/// Two random ops at full magnitude.
pub fn rand_policy<R: Rng + ?Sized>(image: &Tensor, magnitude: f64, rng: &mut R) -> Result<Tensor> {
    let mut x = image.clone();
    for _ in 0..2 {
        let op = random_op(rng);
        x = apply_op(&x, op, magnitude, rng)?;
    }
    Ok(x)
}

/// One random op at a magnitude drawn uniformly from `[0, magnitude]`.
pub fn trivial_policy<R: Rng + ?Sized>(image: &Tensor, magnitude: f64, rng: &mut R) -> Result<Tensor> {
    let op = random_op(rng);
    let m = rng.gen::<f64>() * magnitude;
    apply_op(image, op, m, rng)
}

/// Three chains of one to three ops mixed back into the input:
/// `x + λ Σ wᵢ (chainᵢ(x) − x)` with Dirichlet(1) weights and `λ ~ U(0,1)`.
pub fn augmix_policy<R: Rng + ?Sized>(image: &Tensor, magnitude: f64, rng: &mut R) -> Result<Tensor> {
    const WIDTH: usize = 3;
    let raw: Vec<f64> = (0..WIDTH).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    let lambda: f64 = rng.gen();
    let mut out = image.clone();
    for wi in raw {
        let depth = rng.gen_range(1..=3);
        let mut x = image.clone();
        for _ in 0..depth {
            let op = random_op(rng);
            x = apply_op(&x, op, magnitude, rng)?;
        }
        let coef = lambda * wi / total;
        for ((o, &a), &b) in out.data_mut().iter_mut().zip(x.data()).zip(image.data()) {
            *o += coef * (a - b);
        }
    }
    Ok(out)
}

/// Applies augmix → rand → trivial → maskout → noise, each behind its gate.
pub fn policy_stack<R: Rng + ?Sized>(image: &Tensor, config: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    config.validate()?;
    let m = config.magnitude;
    let mut x = image.clone();
    if gate(config.augmix, rng) {
        x = augmix_policy(&x, m, rng)?;
    }
    if gate(config.rand, rng) {
        x = rand_policy(&x, m, rng)?;
    }
    if gate(config.trivial, rng) {
        x = trivial_policy(&x, m, rng)?;
    }
    x = maskout_with_side(&x, config.maskout.p, config.maskout.k, config.maskout_side, rng)?;
    uniform_noise(&x, config.noise.p, config.noise.amplitude, rng)
}
