//! Bitemporal samples: directory datasets, synthetic generation and
//! training-time augmentation.

mod augment;
pub(crate) mod dataset;
mod synth;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentConfig, GeometricTransform};
pub use dataset::{
    load_dataset, read_sample, write_dataset, write_list, write_sample, DatasetManifest,
    DiskDataset, Split,
};
pub use synth::{make_sample, synthesize_dataset, Scene, SceneObject, Shape, SynthesisConfig};

/// Spatial side lengths must be multiples of this (the coarsest pyramid stride).
pub const SIZE_MULTIPLE: usize = 32;

/// Co-registered pre-change image, post-change image and change mask.
///
/// Images are `[3, H, W]` in `[0, 1]`; the mask is `[H, W]` with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BitemporalSample {
    id: String,
    pre: Array3<f32>,
    post: Array3<f32>,
    gt: Array2<u8>,
}

impl BitemporalSample {
    pub fn new(
        id: impl Into<String>,
        pre: Array3<f32>,
        post: Array3<f32>,
        gt: Array2<u8>,
    ) -> Result<Self> {
        let id = id.into();
        if pre.dim() != post.dim() || pre.len_of(Axis(0)) != 3 {
            return Err(Error::shape(format!(
                "sample {id}: images must both be [3, H, W], got {:?} and {:?}",
                pre.shape(),
                post.shape()
            )));
        }
        let (_, h, w) = pre.dim();
        if gt.dim() != (h, w) {
            return Err(Error::shape(format!(
                "sample {id}: mask {:?} does not match image {h}x{w}",
                gt.shape()
            )));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "sample {id}: {h}x{w} is not a positive multiple of {SIZE_MULTIPLE}"
            )));
        }
        if gt.iter().any(|&v| v > 1) {
            return Err(Error::shape(format!("sample {id}: mask values must be 0 or 1")));
        }
        Ok(Self { id, pre, post, gt })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pre(&self) -> &Array3<f32> {
        &self.pre
    }

    pub fn post(&self) -> &Array3<f32> {
        &self.post
    }

    pub fn gt(&self) -> &Array2<u8> {
        &self.gt
    }

    pub fn height(&self) -> usize {
        self.gt.nrows()
    }

    pub fn width(&self) -> usize {
        self.gt.ncols()
    }

    pub fn change_fraction(&self) -> f64 {
        self.gt.iter().map(|&v| f64::from(v)).sum::<f64>() / self.gt.len() as f64
    }

    /// Same sample with the two acquisition dates exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            id: self.id.clone(),
            pre: self.post.clone(),
            post: self.pre.clone(),
            gt: self.gt.clone(),
        }
    }

    pub fn into_parts(self) -> (String, Array3<f32>, Array3<f32>, Array2<u8>) {
        (self.id, self.pre, self.post, self.gt)
    }
}

/// Random-access collection of samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<BitemporalSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [BitemporalSample] {
    fn len(&self) -> usize {
        <[BitemporalSample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<BitemporalSample> {
        <[BitemporalSample]>::get(self, index)
            .cloned()
            .ok_or_else(|| Error::DatasetLayout(format!("sample index {index} out of range")))
    }
}

impl SampleSource for Vec<BitemporalSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<BitemporalSample> {
        SampleSource::get(self.as_slice(), index)
    }
}
