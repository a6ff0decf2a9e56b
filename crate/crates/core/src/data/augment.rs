use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BitemporalSample, SIZE_MULTIPLE};
use crate::error::{Error, Result};
use crate::transform::Flip;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Side of the square random crop.
    pub crop: usize,
    /// Independent probability of each flip axis.
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 256,
            flip_prob: 0.5,
        }
    }
}

/// One draw of the training-time geometry: flips first, then a crop window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeometricTransform {
    pub horizontal: bool,
    pub vertical: bool,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl GeometricTransform {
    pub fn sample<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        cfg: &AugmentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        check_crop(cfg.crop, height, width)?;
        let horizontal = rng.gen_bool(cfg.flip_prob);
        let vertical = rng.gen_bool(cfg.flip_prob);
        let top = rng.gen_range(0..=height - cfg.crop);
        let left = rng.gen_range(0..=width - cfg.crop);
        Ok(Self {
            horizontal,
            vertical,
            top,
            left,
            size: cfg.crop,
        })
    }

    pub fn identity_crop(size: usize) -> Self {
        Self {
            horizontal: false,
            vertical: false,
            top: 0,
            left: 0,
            size,
        }
    }

    /// Apply the same flip and crop to the image pair and the mask.
    pub fn apply(&self, sample: &BitemporalSample) -> Result<BitemporalSample> {
        let (h, w) = (sample.height(), sample.width());
        check_crop(self.size, h, w)?;
        if self.top + self.size > h || self.left + self.size > w {
            return Err(Error::config(format!(
                "crop window at ({}, {}) of size {} exceeds {h}x{w}",
                self.top, self.left, self.size
            )));
        }
        let flip = Flip::from_axes(self.horizontal, self.vertical);
        let (ys, xs) = (self.top..self.top + self.size, self.left..self.left + self.size);
        let pre = flip.apply(sample.pre().view());
        let post = flip.apply(sample.post().view());
        let gt = flip.apply(sample.gt().view());
        BitemporalSample::new(
            sample.id(),
            pre.slice(ndarray::s![.., ys.clone(), xs.clone()]).to_owned(),
            post.slice(ndarray::s![.., ys.clone(), xs.clone()]).to_owned(),
            gt.slice(ndarray::s![ys, xs]).to_owned(),
        )
    }
}

fn check_crop(crop: usize, h: usize, w: usize) -> Result<()> {
    if crop == 0 || crop % SIZE_MULTIPLE != 0 {
        return Err(Error::config(format!(
            "crop size {crop} is not a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    if crop > h || crop > w {
        return Err(Error::config(format!("crop size {crop} exceeds tile {h}x{w}")));
    }
    Ok(())
}

/// Random flips (probability `flip_prob` per axis) followed by a random crop.
pub fn augment<R: Rng + ?Sized>(
    sample: &BitemporalSample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<BitemporalSample> {
    GeometricTransform::sample(sample.height(), sample.width(), cfg, rng)?.apply(sample)
}
