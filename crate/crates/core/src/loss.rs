//! Cross-entropy masking and the baseline imbalance losses.
//!
//! Probability-space functions clamp into `[eps, 1 - eps]` before taking
//! logarithms. The logits entry point ([`LossConfig::evaluate_logits`]) uses
//! softplus forms instead and is what training differentiates through.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array, ArrayView, Dimension, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lit, sigmoid, Real};

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DICE_SMOOTHING: f64 = 1.0;

static CEM_FALLBACKS: AtomicU64 = AtomicU64::new(0);

/// Number of times a fully dropped mask fell back to the unmasked mean BCE.
pub fn cem_fallback_count() -> u64 {
    CEM_FALLBACKS.load(Ordering::Relaxed)
}

/// Masking parameters: background pixels are dropped with probability `delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CemConfig {
    pub delta: f64,
    pub epsilon: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            delta: 0.3,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl CemConfig {
    pub fn new(delta: f64) -> Result<Self> {
        let cfg = Self {
            delta,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::config(format!("loss.delta must be in [0, 1), got {}", self.delta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::config(format!("epsilon must be in (0, 0.5), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-pixel keep (1) / drop (0) matrix. Change pixels are always kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask<D: Dimension> {
    keep: Array<u8, D>,
}

impl<D: Dimension> LossMask<D> {
    /// Wrap an explicit keep matrix, checking it never drops a change pixel.
    pub fn from_keep(keep: Array<u8, D>, gt: ArrayView<u8, D>) -> Result<Self> {
        check_shape(keep.shape(), gt.shape())?;
        if keep.iter().any(|&k| k > 1) {
            return Err(Error::shape("mask values must be 0 or 1"));
        }
        if Zip::from(&keep).and(&gt).fold(false, |bad, &k, &y| bad || (y == 1 && k == 0)) {
            return Err(Error::config("a loss mask may not drop change pixels"));
        }
        Ok(Self { keep })
    }

    pub fn ones(shape: D) -> Self {
        Self {
            keep: Array::from_elem(shape, 1u8),
        }
    }

    pub fn keep(&self) -> ArrayView<'_, u8, D> {
        self.keep.view()
    }

    pub fn into_inner(self) -> Array<u8, D> {
        self.keep
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 1).count()
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

fn check_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("shape mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

#[inline]
fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

#[inline]
fn bce_scalar(p: f64, y: u8, eps: f64) -> f64 {
    let p = clamp(p, eps);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Element-wise `-[y ln p + (1 - y) ln(1 - p)]`.
pub fn bce_map<T: Real, D: Dimension>(
    probs: ArrayView<T, D>,
    gt: ArrayView<u8, D>,
    eps: f64,
) -> Result<Array<T, D>> {
    check_shape(probs.shape(), gt.shape())?;
    let mut out = Array::zeros(probs.raw_dim());
    Zip::from(&mut out)
        .and(&probs)
        .and(&gt)
        .for_each(|o, &p, &y| *o = lit(bce_scalar(p.as_f64(), y, eps)));
    Ok(out)
}

/// Draw a fresh mask: change pixels are kept, background pixels are
/// dropped iff `R < delta` with `R ~ U[0, 1)`. One draw per pixel in logical
/// order regardless of the label.
pub fn cem_mask<D: Dimension, R: Rng + ?Sized>(
    gt: ArrayView<u8, D>,
    cfg: &CemConfig,
    rng: &mut R,
) -> LossMask<D> {
    let keep = gt.mapv(|y| {
        let r: f64 = rng.gen();
        u8::from(y == 1 || r >= cfg.delta)
    });
    LossMask { keep }
}

/// `Σ bce·M / Σ M`; falls back to the unmasked mean when nothing is kept.
/// The flag reports whether the fallback was taken.
pub fn masked_bce<T: Real, D: Dimension>(
    probs: ArrayView<T, D>,
    gt: ArrayView<u8, D>,
    mask: &LossMask<D>,
    eps: f64,
) -> Result<(f64, bool)> {
    check_shape(probs.shape(), gt.shape())?;
    check_shape(probs.shape(), mask.keep.shape())?;
    let mut num = 0.0;
    let mut den = 0usize;
    let mut total = 0.0;
    Zip::from(&probs)
        .and(&gt)
        .and(&mask.keep)
        .for_each(|&p, &y, &m| {
            let l = bce_scalar(p.as_f64(), y, eps);
            total += l;
            if m == 1 {
                num += l;
                den += 1;
            }
        });
    if den == 0 {
        CEM_FALLBACKS.fetch_add(1, Ordering::Relaxed);
        log::warn!("loss mask dropped every pixel; using unmasked mean BCE");
        return Ok((total / probs.len().max(1) as f64, true));
    }
    Ok((num / den as f64, false))
}

/// Gradient of [`masked_bce`] with respect to the probabilities, mask frozen.
pub fn masked_bce_grad<T: Real, D: Dimension>(
    probs: ArrayView<T, D>,
    gt: ArrayView<u8, D>,
    mask: &LossMask<D>,
    eps: f64,
) -> Result<Array<T, D>> {
    check_shape(probs.shape(), gt.shape())?;
    check_shape(probs.shape(), mask.keep.shape())?;
    let kept = mask.kept();
    let (den, use_mask) = if kept == 0 {
        (probs.len().max(1) as f64, false)
    } else {
        (kept as f64, true)
    };
    let mut out = Array::zeros(probs.raw_dim());
    Zip::from(&mut out)
        .and(&probs)
        .and(&gt)
        .and(&mask.keep)
        .for_each(|o, &p, &y, &m| {
            let p = p.as_f64();
            if (use_mask && m == 0) || p < eps || p > 1.0 - eps {
                return;
            }
            let d = if y == 1 { -1.0 / p } else { 1.0 / (1.0 - p) };
            *o = lit(d / den);
        });
    Ok(out)
}

/// Cross-entropy masking loss for one call: samples a fresh mask from `rng`.
pub fn cem_loss<T: Real, D: Dimension, R: Rng + ?Sized>(
    probs: ArrayView<T, D>,
    gt: ArrayView<u8, D>,
    cfg: &CemConfig,
    rng: &mut R,
) -> Result<f64> {
    check_shape(probs.shape(), gt.shape())?;
    let mask = cem_mask(gt.view(), cfg, rng);
    masked_bce(probs, gt, &mask, cfg.epsilon).map(|(v, _)| v)
}

pub fn mean_bce<T: Real, D: Dimension>(
    probs: ArrayView<T, D>,
    gt: ArrayView<u8, D>,
    eps: f64,
) -> Result<f64> {
    weighted_bce(probs, gt, 1.0, 1.0, eps)
}

/// Mean over pixels of `-α_t (1 - p_t)^γ ln p_t`.
pub fn focal_loss<T: Real, D: Dimension>(
    probs: ArrayView<T, D>,
    gt: ArrayView<u8, D>,
    alpha: f64,
    gamma: f64,
    eps: f64,
) -> Result<f64> {
    check_shape(probs.shape(), gt.shape())?;
    if !(alpha > 0.0 && alpha < 1.0) || gamma < 0.0 {
        return Err(Error::config(format!(
            "focal loss needs alpha in (0,1) and gamma >= 0, got alpha={alpha} gamma={gamma}"
        )));
    }
    let mut sum = 0.0;
    Zip::from(&probs).and(&gt).for_each(|&p, &y| {
        let p = clamp(p.as_f64(), eps);
        let (pt, at) = if y == 1 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        sum += -at * (1.0 - pt).powf(gamma) * pt.ln();
    });
    Ok(sum / probs.len().max(1) as f64)
}

/// Mean BCE with weight `w1` on change pixels and `w0` on background.
pub fn weighted_bce<T: Real, D: Dimension>(
    probs: ArrayView<T, D>,
    gt: ArrayView<u8, D>,
    w0: f64,
    w1: f64,
    eps: f64,
) -> Result<f64> {
    check_shape(probs.shape(), gt.shape())?;
    let mut sum = 0.0;
    Zip::from(&probs).and(&gt).for_each(|&p, &y| {
        let w = if y == 1 { w1 } else { w0 };
        sum += w * bce_scalar(p.as_f64(), y, eps);
    });
    Ok(sum / probs.len().max(1) as f64)
}

/// `bce_weight · meanBCE + dice_weight · (1 - (2Σpy + s) / (Σp + Σy + s))`, `s = 1`.
pub fn bce_dice<T: Real, D: Dimension>(
    probs: ArrayView<T, D>,
    gt: ArrayView<u8, D>,
    bce_weight: f64,
    dice_weight: f64,
    eps: f64,
) -> Result<f64> {
    let bce = mean_bce(probs.view(), gt.view(), eps)?;
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    Zip::from(&probs).and(&gt).for_each(|&p, &y| {
        let p = p.as_f64();
        let y = f64::from(y);
        inter += p * y;
        sp += p;
        sy += y;
    });
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTHING) / (sp + sy + DICE_SMOOTHING);
    Ok(bce_weight * bce + dice_weight * dice)
}

/// Training objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cem,
    Bce,
    Focal,
    Wbce,
    BceDice,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Cem,
        LossKind::Focal,
        LossKind::Wbce,
        LossKind::BceDice,
        LossKind::Bce,
    ];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Cem => "cem",
            LossKind::Bce => "bce",
            LossKind::Focal => "focal",
            LossKind::Wbce => "wbce",
            LossKind::BceDice => "bce_dice",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cem" => Ok(LossKind::Cem),
            "bce" => Ok(LossKind::Bce),
            "focal" => Ok(LossKind::Focal),
            "wbce" => Ok(LossKind::Wbce),
            "bce_dice" => Ok(LossKind::BceDice),
            other => Err(Error::config(format!(
                "unknown loss.kind '{other}' (expected cem, bce, focal, wbce or bce_dice)"
            ))),
        }
    }
}

/// Loss selection plus every baseline's parameters (`loss.*` config keys).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub w0: f64,
    pub w1: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Cem,
            delta: 0.3,
            epsilon: DEFAULT_EPSILON,
            alpha: 0.5,
            gamma: 2.0,
            w0: 0.7,
            w1: 1.0,
            bce_weight: 0.7,
            dice_weight: 0.3,
        }
    }
}

/// Result of evaluating an objective on a batch of logits.
#[derive(Clone, Debug)]
pub struct LossOutput<T, D: Dimension> {
    pub value: f64,
    /// Gradient with respect to the logits.
    pub grad: Array<T, D>,
    pub fell_back: bool,
}

impl LossConfig {
    pub fn of_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn cem(&self) -> CemConfig {
        CemConfig {
            delta: self.delta,
            epsilon: self.epsilon,
        }
    }

    pub fn uses_mask(&self) -> bool {
        self.kind == LossKind::Cem
    }

    pub fn validate(&self) -> Result<()> {
        self.cem().validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("loss.alpha must be in (0,1), got {}", self.alpha)));
        }
        if self.gamma < 0.0 {
            return Err(Error::config(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        for (k, v) in [
            ("loss.w0", self.w0),
            ("loss.w1", self.w1),
            ("loss.bce_weight", self.bce_weight),
            ("loss.dice_weight", self.dice_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{k} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Apply one `loss.*` key. Returns `false` for keys outside the namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("{key}: '{value}' is not a number")))
        };
        match key {
            "loss.kind" => self.kind = value.parse()?,
            "loss.delta" => self.delta = num()?,
            "loss.epsilon" => self.epsilon = num()?,
            "loss.alpha" => self.alpha = num()?,
            "loss.gamma" => self.gamma = num()?,
            "loss.w0" => self.w0 = num()?,
            "loss.w1" => self.w1 = num()?,
            "loss.bce_weight" => self.bce_weight = num()?,
            "loss.dice_weight" => self.dice_weight = num()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("loss.kind".into(), self.kind.to_string()),
            ("loss.delta".into(), self.delta.to_string()),
            ("loss.epsilon".into(), self.epsilon.to_string()),
            ("loss.alpha".into(), self.alpha.to_string()),
            ("loss.gamma".into(), self.gamma.to_string()),
            ("loss.w0".into(), self.w0.to_string()),
            ("loss.w1".into(), self.w1.to_string()),
            ("loss.bce_weight".into(), self.bce_weight.to_string()),
            ("loss.dice_weight".into(), self.dice_weight.to_string()),
        ]
    }

    /// Probability-space value of the configured loss. CEM needs a mask.
    pub fn evaluate_probs<T: Real, D: Dimension>(
        &self,
        probs: ArrayView<T, D>,
        gt: ArrayView<u8, D>,
        mask: Option<&LossMask<D>>,
    ) -> Result<f64> {
        let eps = self.epsilon;
        match self.kind {
            LossKind::Cem => {
                let mask = mask.ok_or_else(|| Error::config("cem loss requires a mask"))?;
                masked_bce(probs, gt, mask, eps).map(|(v, _)| v)
            }
            LossKind::Bce => mean_bce(probs, gt, eps),
            LossKind::Focal => focal_loss(probs, gt, self.alpha, self.gamma, eps),
            LossKind::Wbce => weighted_bce(probs, gt, self.w0, self.w1, eps),
            LossKind::BceDice => bce_dice(probs, gt, self.bce_weight, self.dice_weight, eps),
        }
    }

    /// Value and logit gradient of the configured loss, computed from raw
    /// logits with softplus forms. All reductions run over every element of
    /// the input, so a `[batch, H, W]` input normalises per batch.
    pub fn evaluate_logits<T: Real, D: Dimension>(
        &self,
        logits: ArrayView<T, D>,
        gt: ArrayView<u8, D>,
        mask: Option<&LossMask<D>>,
    ) -> Result<LossOutput<T, D>> {
        check_shape(logits.shape(), gt.shape())?;
        let n = logits.len().max(1) as f64;
        let mut grad = Array::<T, D>::zeros(logits.raw_dim());
        let mut fell_back = false;
        let value = match self.kind {
            LossKind::Cem | LossKind::Bce | LossKind::Wbce => {
                // Per-pixel weight and a shared normaliser.
                let ones;
                let keep = match (self.kind, mask) {
                    (LossKind::Cem, Some(m)) => {
                        check_shape(m.keep.shape(), gt.shape())?;
                        &m.keep
                    }
                    (LossKind::Cem, None) => return Err(Error::config("cem loss requires a mask")),
                    _ => {
                        ones = Array::from_elem(gt.raw_dim(), 1u8);
                        &ones
                    }
                };
                let kept = keep.iter().filter(|&&k| k == 1).count();
                let (den, masked) = if self.kind == LossKind::Cem && kept > 0 {
                    (kept as f64, true)
                } else {
                    if self.kind == LossKind::Cem {
                        fell_back = true;
                        CEM_FALLBACKS.fetch_add(1, Ordering::Relaxed);
                        log::warn!("loss mask dropped every pixel; using unmasked mean BCE");
                    }
                    (n, false)
                };
                let (w0, w1) = if self.kind == LossKind::Wbce {
                    (self.w0, self.w1)
                } else {
                    (1.0, 1.0)
                };
                let mut sum = 0.0;
                Zip::from(&mut grad)
                    .and(&logits)
                    .and(&gt)
                    .and(keep)
                    .for_each(|g, &z, &y, &m| {
                        if masked && m == 0 {
                            return;
                        }
                        let z = z.as_f64();
                        let w = if y == 1 { w1 } else { w0 };
                        let yf = f64::from(y);
                        sum += w * (softplus(z) - yf * z);
                        *g = lit(w * (sigmoid(z) - yf) / den);
                    });
                sum / den
            }
            LossKind::Focal => {
                let (alpha, gamma) = (self.alpha, self.gamma);
                let mut sum = 0.0;
                Zip::from(&mut grad)
                    .and(&logits)
                    .and(&gt)
                    .for_each(|g, &z, &y| {
                        let s = if y == 1 { 1.0 } else { -1.0 };
                        let at = if y == 1 { alpha } else { 1.0 - alpha };
                        let sz = s * z.as_f64();
                        let pt = sigmoid(sz);
                        let qt = sigmoid(-sz);
                        let log_pt = -softplus(-sz);
                        sum += -at * qt.powf(gamma) * log_pt;
                        let d = gamma * qt.powf(gamma) * pt * log_pt - qt.powf(gamma + 1.0);
                        *g = lit(s * at * d / n);
                    });
                sum / n
            }
            LossKind::BceDice => {
                let (mut inter, mut sp, mut sy, mut bce) = (0.0, 0.0, 0.0, 0.0);
                Zip::from(&logits).and(&gt).for_each(|&z, &y| {
                    let z = z.as_f64();
                    let p = sigmoid(z);
                    let yf = f64::from(y);
                    bce += softplus(z) - yf * z;
                    inter += p * yf;
                    sp += p;
                    sy += yf;
                });
                let num = 2.0 * inter + DICE_SMOOTHING;
                let den = sp + sy + DICE_SMOOTHING;
                let (bw, dw) = (self.bce_weight, self.dice_weight);
                Zip::from(&mut grad)
                    .and(&logits)
                    .and(&gt)
                    .for_each(|g, &z, &y| {
                        let p = sigmoid(z.as_f64());
                        let yf = f64::from(y);
                        let d_dice = -(2.0 * yf * den - num) / (den * den);
                        *g = lit(bw * (p - yf) / n + dw * d_dice * p * (1.0 - p));
                    });
                bw * bce / n + dw * (1.0 - num / den)
            }
        };
        Ok(LossOutput {
            value,
            grad,
            fell_back,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array2, Ix2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_case(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Array2<f64>, Array2<u8>) {
        let probs = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.01..0.99));
        let gt = Array2::from_shape_fn((h, w), |_| u8::from(rng.gen_bool(0.2)));
        (probs, gt)
    }

    #[test]
    fn bce_analytic_values() {
        let p = arr1(&[0.5f64, 0.5, DEFAULT_EPSILON, 1.0 - DEFAULT_EPSILON]);
        let y = arr1(&[1u8, 0, 0, 1]);
        let m = bce_map(p.view(), y.view(), DEFAULT_EPSILON).unwrap();
        assert!((m[0] - LN2).abs() < 1e-12);
        assert!((m[1] - LN2).abs() < 1e-12);
        assert!(m[2] <= 1.2e-7 && m[3] <= 1.2e-7);
        assert!(m.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = Array2::<f64>::from_elem((2, 2), 0.5);
        let y = Array2::<u8>::zeros((2, 3));
        assert!(matches!(bce_map(p.view(), y.view(), 1e-7), Err(Error::Shape(_))));
        assert!(matches!(focal_loss(p.view(), y.view(), 0.5, 2.0, 1e-7), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_keeps_all_change_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = Array2::<u8>::ones((32, 32));
        let mask = cem_mask(gt.view(), &CemConfig::new(0.9).unwrap(), &mut rng);
        assert_eq!(mask.kept(), 1024);
    }

    #[test]
    fn delta_zero_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Array2::<u8>::zeros((64, 64));
        let mask = cem_mask(gt.view(), &CemConfig::new(0.0).unwrap(), &mut rng);
        assert_eq!(mask.kept(), 64 * 64);
    }

    #[test]
    fn kept_fraction_binomial_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = Array2::<u8>::zeros((256, 256));
        let mask = cem_mask(gt.view(), &CemConfig::new(0.3).unwrap(), &mut rng);
        let frac = mask.kept() as f64 / 65536.0;
        assert!((frac - 0.7).abs() <= 0.0054, "kept fraction {frac}");
    }

    #[test]
    fn cem_two_pixel_case() {
        let probs = arr2(&[[0.5f64], [0.5]]);
        let gt = arr2(&[[1u8], [0]]);
        let mask = LossMask::from_keep(arr2(&[[1u8], [1]]), gt.view()).unwrap();
        let (v, fb) = masked_bce(probs.view(), gt.view(), &mask, DEFAULT_EPSILON).unwrap();
        assert!(!fb);
        assert!((v - LN2).abs() < 1e-12);
    }

    #[test]
    fn cem_delta_zero_is_mean_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, y) = random_case(&mut rng, 16, 16);
        let cem = cem_loss(p.view(), y.view(), &CemConfig::new(0.0).unwrap(), &mut rng).unwrap();
        let bce = mean_bce(p.view(), y.view(), DEFAULT_EPSILON).unwrap();
        assert!((cem - bce).abs() <= 1e-12);
    }

    #[test]
    fn fully_dropped_mask_falls_back() {
        let probs = Array2::<f64>::from_elem((2, 2), 0.25);
        let gt = Array2::<u8>::zeros((2, 2));
        let mask = LossMask::from_keep(Array2::zeros((2, 2)), gt.view()).unwrap();
        let before = cem_fallback_count();
        let (v, fb) = masked_bce(probs.view(), gt.view(), &mask, DEFAULT_EPSILON).unwrap();
        assert!(fb);
        assert!(cem_fallback_count() > before);
        assert!((v - -(0.75f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_may_not_drop_change_pixels() {
        let gt = arr2(&[[1u8, 0]]);
        assert!(LossMask::from_keep(arr2(&[[0u8, 1]]), gt.view()).is_err());
    }

    #[test]
    fn focal_analytic_and_reductions() {
        let p = arr1(&[0.5f64]);
        let y = arr1(&[1u8]);
        let v = focal_loss(p.view(), y.view(), 0.5, 2.0, DEFAULT_EPSILON).unwrap();
        assert!((v - 0.5 * 0.25 * LN2).abs() < 1e-12);
        assert!((v - 0.086643).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, y) = random_case(&mut rng, 8, 8);
        let f0 = focal_loss(p.view(), y.view(), 0.5, 0.0, DEFAULT_EPSILON).unwrap();
        let b = mean_bce(p.view(), y.view(), DEFAULT_EPSILON).unwrap();
        assert!((f0 - 0.5 * b).abs() < 1e-14);

        let perfect = arr1(&[1.0f64, 0.0]);
        let yy = arr1(&[1u8, 0]);
        assert!(focal_loss(perfect.view(), yy.view(), 0.5, 2.0, DEFAULT_EPSILON).unwrap() < 1e-12);
    }

    #[test]
    fn weighted_bce_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p, y) = random_case(&mut rng, 4, 4);
        let w = weighted_bce(p.view(), y.view(), 1.0, 1.0, DEFAULT_EPSILON).unwrap();
        let b = mean_bce(p.view(), y.view(), DEFAULT_EPSILON).unwrap();
        assert_eq!(w, b);

        let single = weighted_bce(arr1(&[0.5f64]).view(), arr1(&[0u8]).view(), 0.7, 1.0, 1e-7).unwrap();
        assert!((single - 0.7 * LN2).abs() < 1e-12);
        assert!((single - 0.485203).abs() < 1e-6);

        // y = [1, 0], p = [0.8, 0.4]: (1.0·(−ln 0.8) + 0.7·(−ln 0.6)) / 2
        let two = weighted_bce(arr1(&[0.8f64, 0.4]).view(), arr1(&[1u8, 0]).view(), 0.7, 1.0, 1e-7)
            .unwrap();
        let hand = (-(0.8f64).ln() + 0.7 * -(0.6f64).ln()) / 2.0;
        assert_eq!(two, hand);
    }

    #[test]
    fn bce_dice_cases() {
        let perfect = arr1(&[1.0f64, 0.0, 1.0]);
        let y = arr1(&[1u8, 0, 1]);
        assert!(bce_dice(perfect.view(), y.view(), 0.7, 0.3, DEFAULT_EPSILON).unwrap() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (p, y) = random_case(&mut rng, 8, 8);
        let v = bce_dice(p.view(), y.view(), 1.0, 0.0, DEFAULT_EPSILON).unwrap();
        assert_eq!(v, mean_bce(p.view(), y.view(), DEFAULT_EPSILON).unwrap());
    }

    #[test]
    fn masked_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p, y) = random_case(&mut rng, 4, 4);
        let mask = cem_mask(y.view(), &CemConfig::new(0.3).unwrap(), &mut rng);
        let g = masked_bce_grad(p.view(), y.view(), &mask, DEFAULT_EPSILON).unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (1, 2), (3, 3), (2, 1)] {
            let mut pp = p.clone();
            pp[idx] += h;
            let mut pm = p.clone();
            pm[idx] -= h;
            let lp = masked_bce(pp.view(), y.view(), &mask, DEFAULT_EPSILON).unwrap().0;
            let lm = masked_bce(pm.view(), y.view(), &mask, DEFAULT_EPSILON).unwrap().0;
            let num = (lp - lm) / (2.0 * h);
            let denom = num.abs().max(g[idx].abs()).max(1e-12);
            assert!(
                (num - g[idx]).abs() / denom < 1e-6 || (num - g[idx]).abs() < 1e-10,
                "{idx:?}: {num} vs {}",
                g[idx]
            );
        }
    }

    fn logits_case(seed: u64) -> (Array2<f64>, Array2<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-8.0..8.0));
        let y = Array2::from_shape_fn((6, 5), |_| u8::from(rng.gen_bool(0.3)));
        (z, y)
    }

    #[test]
    fn logits_entry_agrees_with_probability_entry() {
        let (z, y) = logits_case(9);
        let probs = z.mapv(sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mask = cem_mask(y.view(), &CemConfig::new(0.3).unwrap(), &mut rng);
        for kind in LossKind::ALL {
            let cfg = LossConfig::of_kind(kind);
            let a = cfg.evaluate_logits(z.view(), y.view(), Some(&mask)).unwrap().value;
            let b = cfg.evaluate_probs(probs.view(), y.view(), Some(&mask)).unwrap();
            assert!((a - b).abs() < 1e-6, "{kind}: {a} vs {b}");
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let (z, y) = logits_case(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mask = cem_mask(y.view(), &CemConfig::new(0.4).unwrap(), &mut rng);
        for kind in LossKind::ALL {
            let cfg = LossConfig::of_kind(kind);
            let out = cfg.evaluate_logits(z.view(), y.view(), Some(&mask)).unwrap();
            let h = 1e-5;
            for idx in [(0, 0), (2, 3), (5, 4)] {
                let mut zp = z.clone();
                zp[idx] += h;
                let mut zm = z.clone();
                zm[idx] -= h;
                let lp = cfg.evaluate_logits(zp.view(), y.view(), Some(&mask)).unwrap().value;
                let lm = cfg.evaluate_logits(zm.view(), y.view(), Some(&mask)).unwrap().value;
                let num = (lp - lm) / (2.0 * h);
                assert!(
                    (num - out.grad[idx]).abs() < 1e-8,
                    "{kind} {idx:?}: {num} vs {}",
                    out.grad[idx]
                );
            }
        }
    }

    #[test]
    fn cem_with_delta_zero_matches_bce_bitwise_on_logits() {
        let (z, y) = logits_case(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mask = cem_mask(y.view(), &CemConfig::new(0.0).unwrap(), &mut rng);
        let mut cem = LossConfig::of_kind(LossKind::Cem);
        cem.delta = 0.0;
        let a = cem.evaluate_logits(z.view(), y.view(), Some(&mask)).unwrap();
        let b = LossConfig::of_kind(LossKind::Bce)
            .evaluate_logits(z.view(), y.view(), None)
            .unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn config_keys_round_trip() {
        let mut cfg = LossConfig::default();
        assert!(cfg.set("loss.kind", "focal").unwrap());
        assert!(cfg.set("loss.gamma", "1.5").unwrap());
        assert!(!cfg.set("epochs", "3").unwrap());
        assert!(cfg.set("loss.kind", "lovasz").is_err());
        let mut again = LossConfig::default();
        for (k, v) in cfg.entries() {
            again.set(&k, &v).unwrap();
        }
        assert_eq!(cfg, again);
    }

    proptest! {
        #[test]
        fn change_pixels_never_dropped(seed in any::<u64>(), delta in 0.0f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = Array2::from_shape_fn((12, 9), |_| u8::from(rng.gen_bool(0.4)));
            let mask = cem_mask(gt.view(), &CemConfig::new(delta).unwrap(), &mut rng);
            for (&y, &m) in gt.iter().zip(mask.keep().iter()) {
                prop_assert!(y == 0 || m == 1);
            }
        }

        #[test]
        fn moving_towards_label_decreases_loss(
            seed in any::<u64>(),
            idx in 0usize..20,
            step in 0.01f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs = Array2::from_shape_fn((4, 5), |_| rng.gen_range(0.05..0.95));
            let gt = Array2::from_shape_fn((4, 5), |_| u8::from(rng.gen_bool(0.5)));
            let mut keep = Array2::<u8>::ones((4, 5));
            keep[(idx / 5, idx % 5)] = 1;
            let mask = LossMask::from_keep(keep, gt.view()).unwrap();
            let (r, c) = (idx / 5, idx % 5);
            let mut moved = probs.clone();
            let p = probs[(r, c)];
            moved[(r, c)] = if gt[(r, c)] == 1 { p + (1.0 - p) * step } else { p * (1.0 - step) };
            let before = masked_bce(probs.view(), gt.view(), &mask, DEFAULT_EPSILON).unwrap().0;
            let after = masked_bce(moved.view(), gt.view(), &mask, DEFAULT_EPSILON).unwrap().0;
            prop_assert!(after < before);
        }

        #[test]
        fn losses_are_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs = Array2::from_shape_fn((1, 24), |_| rng.gen_range(0.02..0.98));
            let gt = Array2::from_shape_fn((1, 24), |_| u8::from(rng.gen_bool(0.3)));
            let keep = gt.mapv(|y| if y == 1 { 1 } else { u8::from(rng.gen_bool(0.6)) });
            let mut perm: Vec<usize> = (0..24).collect();
            perm.reverse();
            perm.swap(3, 17);
            let permute_f = |a: &Array2<f64>| Array2::from_shape_fn((1, 24), |(_, j)| a[(0, perm[j])]);
            let permute_u = |a: &Array2<u8>| Array2::from_shape_fn((1, 24), |(_, j)| a[(0, perm[j])]);
            let mask = LossMask::<Ix2>::from_keep(keep.clone(), gt.view()).unwrap();
            let pgt = permute_u(&gt);
            let pmask = LossMask::from_keep(permute_u(&keep), pgt.view()).unwrap();
            let pprobs = permute_f(&probs);
            for kind in LossKind::ALL {
                let cfg = LossConfig::of_kind(kind);
                let a = cfg.evaluate_probs(probs.view(), gt.view(), Some(&mask)).unwrap();
                let b = cfg.evaluate_probs(pprobs.view(), pgt.view(), Some(&pmask)).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
