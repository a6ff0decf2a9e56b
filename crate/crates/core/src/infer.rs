//! Prediction, test-time augmentation, evaluation and visual outputs.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, ArrayView3, Ix2};

use crate::data::dataset::save_png;
use crate::data::{BitemporalSample, SampleSource};
use crate::error::{Error, Result};
use crate::loss::LossMask;
use crate::metrics::{confusion, ConfusionCounts};
use crate::network::ChangeDetector;
use crate::nn::{sigmoid, Real};
use crate::transform::Flip;

/// Decision threshold on the change probability.
pub const THRESHOLD: f32 = 0.5;

pub const TRUE_POSITIVE: [u8; 3] = [255, 255, 255];
pub const FALSE_POSITIVE: [u8; 3] = [255, 0, 0];
pub const FALSE_NEGATIVE: [u8; 3] = [0, 0, 255];
pub const DROPPED: [u8; 3] = [255, 0, 0];
/// Brightness factor applied to the base image under true negatives.
pub const DIM: f32 = 0.5;

/// Anything that maps an image pair to a per-pixel change probability map.
pub trait ChangeModel {
    fn change_probabilities(&self, pre: ArrayView3<f32>, post: ArrayView3<f32>) -> Result<Array2<f32>>;
}

impl<T: Real> ChangeModel for ChangeDetector<T> {
    fn change_probabilities(&self, pre: ArrayView3<f32>, post: ArrayView3<f32>) -> Result<Array2<f32>> {
        Ok(self.logits(pre, post)?.mapv(sigmoid))
    }
}

/// Mean probability over the four flips, each mapped back before averaging.
pub fn predict_tta<M: ChangeModel + ?Sized>(
    model: &M,
    pre: ArrayView3<f32>,
    post: ArrayView3<f32>,
) -> Result<Array2<f32>> {
    let (_, h, w) = pre.dim();
    let mut acc = Array2::<f64>::zeros((h, w));
    for flip in Flip::GROUP {
        let p = model.change_probabilities(flip.apply(pre).view(), flip.apply(post).view())?;
        if p.dim() != (h, w) {
            return Err(Error::shape(format!("model returned {:?} for a {h}x{w} input", p.dim())));
        }
        let back = flip.inverse().apply(p.view());
        acc.zip_mut_with(&back, |a, &b| *a += f64::from(b));
    }
    Ok(acc.mapv(|v| (v / Flip::GROUP.len() as f64) as f32))
}

pub fn predict<M: ChangeModel + ?Sized>(model: &M, sample: &BitemporalSample, tta: bool) -> Result<Array2<f32>> {
    if tta {
        predict_tta(model, sample.pre().view(), sample.post().view())
    } else {
        model.change_probabilities(sample.pre().view(), sample.post().view())
    }
}

pub fn binarize(probs: ArrayView2<f32>) -> Array2<u8> {
    probs.mapv(|p| u8::from(p > THRESHOLD))
}

/// Confusion counts accumulated over every sample of `source`.
pub fn evaluate<M, S>(model: &M, source: &S, tta: bool) -> Result<ConfusionCounts>
where
    M: ChangeModel + ?Sized,
    S: SampleSource + ?Sized,
{
    let mut total = ConfusionCounts::default();
    for i in 0..source.len() {
        let sample = source.get(i)?;
        let pred = binarize(predict(model, &sample, tta)?.view());
        total += confusion(pred.view(), sample.gt().view())?;
    }
    Ok(total)
}

fn base_pixel(base: &ArrayView3<f32>, y: usize, x: usize, scale: f32) -> [u8; 3] {
    std::array::from_fn(|c| (base[(c, y, x)].clamp(0.0, 1.0) * 255.0 * scale).round() as u8)
}

fn check_overlay(base: &ArrayView3<f32>, planes: &[(&str, (usize, usize))]) -> Result<(usize, usize)> {
    let (c, h, w) = base.dim();
    if c != 3 {
        return Err(Error::shape(format!("overlay base must have 3 channels, got {c}")));
    }
    for (name, dim) in planes {
        if *dim != (h, w) {
            return Err(Error::shape(format!("{name} {dim:?} does not match base {h}x{w}")));
        }
    }
    Ok((h, w))
}

/// White true positives, red false positives, blue false negatives and the
/// dimmed base image under true negatives.
pub fn render_error_overlay(pred: ArrayView2<u8>, gt: ArrayView2<u8>, base: ArrayView3<f32>) -> Result<RgbImage> {
    let (h, w) = check_overlay(&base, &[("prediction", pred.dim()), ("label", gt.dim())])?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb(match (pred[(y, x)] == 1, gt[(y, x)] == 1) {
            (true, true) => TRUE_POSITIVE,
            (true, false) => FALSE_POSITIVE,
            (false, true) => FALSE_NEGATIVE,
            (false, false) => base_pixel(&base, y, x, DIM),
        })
    }))
}

/// Base image with every pixel excluded by `mask` painted red.
pub fn render_dropped_overlay(gt: ArrayView2<u8>, mask: &LossMask<Ix2>, base: ArrayView3<f32>) -> Result<RgbImage> {
    let keep = mask.keep();
    let (h, w) = check_overlay(&base, &[("label", gt.dim()), ("mask", keep.dim())])?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb(if keep[(y, x)] == 0 { DROPPED } else { base_pixel(&base, y, x, 1.0) })
    }))
}

/// Paths written for one prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionFiles {
    pub prob: PathBuf,
    pub mask: PathBuf,
    pub overlay: PathBuf,
    pub dropped: Option<PathBuf>,
}

/// Write `<id>_prob.png`, `<id>_mask.png`, `<id>_overlay.png` and, given a
/// loss mask, `<id>_dropped.png`.
pub fn write_prediction(
    dir: &Path,
    sample: &BitemporalSample,
    probs: ArrayView2<f32>,
    dropped: Option<&LossMask<Ix2>>,
) -> Result<PredictionFiles> {
    let (h, w) = probs.dim();
    if (h, w) != sample.gt().dim() {
        return Err(Error::shape(format!("probabilities {:?} do not match sample {:?}", probs.dim(), sample.gt().dim())));
    }
    let id = sample.id();
    let files = PredictionFiles {
        prob: dir.join(format!("{id}_prob.png")),
        mask: dir.join(format!("{id}_mask.png")),
        overlay: dir.join(format!("{id}_overlay.png")),
        dropped: dropped.map(|_| dir.join(format!("{id}_dropped.png"))),
    };
    let prob_img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(probs[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save_png(&prob_img, &files.prob)?;
    let pred = binarize(probs);
    let mask_img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([pred[(y as usize, x as usize)] * 255]));
    save_png(&mask_img, &files.mask)?;
    let overlay = render_error_overlay(pred.view(), sample.gt().view(), sample.post().view())?;
    save_png(&overlay, &files.overlay)?;
    if let (Some(mask), Some(path)) = (dropped, &files.dropped) {
        save_png(&render_dropped_overlay(sample.gt().view(), mask, sample.pre().view())?, path)?;
    }
    Ok(files)
}
