//! Siamese backbone producing a four-level feature pyramid.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{concatenate, s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{join, ConvBnSilu, Module, Param, Real};

/// Downsampling factor of each pyramid level.
pub const SCALES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderBackend {
    /// Randomly initialised strided-conv backbone.
    Toy,
    /// Same topology, weights loaded from an encoder checkpoint.
    External,
}

impl std::fmt::Display for EncoderBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderBackend::Toy => "toy",
            EncoderBackend::External => "external",
        })
    }
}

impl FromStr for EncoderBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(EncoderBackend::Toy),
            "external" => Ok(EncoderBackend::External),
            _ => Err(Error::config(format!("unknown encoder backend '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub backend: EncoderBackend,
    pub channels: [usize; 4],
    pub weights: Option<PathBuf>,
    pub freeze: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            backend: EncoderBackend::Toy,
            channels: [32, 64, 128, 256],
            weights: None,
            freeze: false,
        }
    }
}

impl EncoderSpec {
    pub fn with_channels(channels: [usize; 4]) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c < 8) {
            return Err(Error::config(format!(
                "encoder channels must all be >= 8, got {:?}",
                self.channels
            )));
        }
        if self.backend == EncoderBackend::External && self.weights.is_none() {
            return Err(Error::config("external encoder needs a weights path"));
        }
        Ok(())
    }
}

/// Parse `"32,64,128,256"`.
pub fn parse_channels(s: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("bad channel list '{s}'")))?;
    parts
        .try_into()
        .map_err(|_| Error::config(format!("expected four channel widths, got '{s}'")))
}

/// Features at strides 4, 8, 16 and 32, each `[batch, C_i, H/s_i, W/s_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: [Array4<T>; 4],
}

impl<T: Real> FeaturePyramid<T> {
    pub fn f1(&self) -> &Array4<T> {
        &self.levels[0]
    }
    pub fn f2(&self) -> &Array4<T> {
        &self.levels[1]
    }
    pub fn f3(&self) -> &Array4<T> {
        &self.levels[2]
    }
    pub fn f4(&self) -> &Array4<T> {
        &self.levels[3]
    }

    pub fn batch(&self) -> usize {
        self.levels[0].dim().0
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }

    /// Split a batch `[pre; post]` of size `2B` into its two halves.
    pub fn split_halves(&self) -> (Self, Self) {
        let b = self.batch() / 2;
        let half = |lo: usize| Self {
            levels: std::array::from_fn(|i| self.levels[i].slice(s![lo..lo + b, .., .., ..]).to_owned()),
        };
        (half(0), half(b))
    }
}

pub(crate) fn check_divisible(h: usize, w: usize) -> Result<()> {
    let m = SCALES[3];
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} is not divisible by {m}"
        )));
    }
    Ok(())
}

/// Two stride-2 stem units followed by three stride-2 stages.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    spec: EncoderSpec,
    stem: [ConvBnSilu<T>; 2],
    stages: [ConvBnSilu<T>; 3],
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let mut enc = Self {
            spec: spec.clone(),
            stem: [ConvBnSilu::new(3, c[0], 2, rng), ConvBnSilu::new(c[0], c[0], 2, rng)],
            stages: [
                ConvBnSilu::new(c[0], c[1], 2, rng),
                ConvBnSilu::new(c[1], c[2], 2, rng),
                ConvBnSilu::new(c[2], c[3], 2, rng),
            ],
        };
        if let Some(path) = &spec.weights {
            Checkpoint::load(path)?.load_module("", &mut enc)?;
        }
        enc.set_frozen(spec.freeze);
        Ok(enc)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn channels(&self) -> [usize; 4] {
        self.spec.channels
    }

    pub fn is_frozen(&self) -> bool {
        self.spec.freeze
    }

    pub fn set_frozen(&mut self, freeze: bool) {
        self.spec.freeze = freeze;
        self.visit_mut("", &mut |name, p| {
            if !name.ends_with("running_mean") && !name.ends_with("running_var") {
                p.trainable = !freeze;
            }
        });
    }

    fn check(x: &ArrayView4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::shape(format!("encoder expects 3 channels, got {c}")));
        }
        check_divisible(h, w)
    }

    /// Training-mode pass over `[batch, 3, H, W]`.
    pub fn forward(&mut self, x: Array4<T>) -> Result<FeaturePyramid<T>> {
        Self::check(&x.view())?;
        let x = self.stem[0].forward(x);
        let x = self.stem[1].forward(x);
        let f2 = self.stages[0].forward(x.clone());
        let f3 = self.stages[1].forward(f2.clone());
        let f4 = self.stages[2].forward(f3.clone());
        Ok(FeaturePyramid {
            levels: [x, f2, f3, f4],
        })
    }

    /// Evaluation-mode pass.
    pub fn infer(&self, x: ArrayView4<T>) -> Result<FeaturePyramid<T>> {
        Self::check(&x)?;
        let x = self.stem[1].infer(self.stem[0].infer(x).view());
        let f2 = self.stages[0].infer(x.view());
        let f3 = self.stages[1].infer(f2.view());
        let f4 = self.stages[2].infer(f3.view());
        Ok(FeaturePyramid {
            levels: [x, f2, f3, f4],
        })
    }

    /// Back-propagate gradients for all four levels; returns the input gradient.
    pub fn backward(&mut self, grads: [Array4<T>; 4]) -> Array4<T> {
        let [g1, g2, g3, g4] = grads;
        let g = self.stages[2].backward(&g4) + g3;
        let g = self.stages[1].backward(&g) + g2;
        let g = self.stages[0].backward(&g) + g1;
        let g = self.stem[1].backward(&g);
        self.stem[0].backward(&g)
    }

    /// Encode one `[3, H, W]` image in evaluation mode.
    pub fn encode(&self, image: ArrayView3<f32>) -> Result<FeaturePyramid<T>> {
        let x = image.mapv(|v| T::from_f64_lossy(f64::from(v))).insert_axis(Axis(0));
        self.infer(x.view())
    }

    /// Encode both epochs with shared weights as one batch of two.
    pub fn encode_pair(
        &self,
        pre: ArrayView3<f32>,
        post: ArrayView3<f32>,
    ) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>)> {
        if pre.dim() != post.dim() {
            return Err(Error::shape(format!(
                "pre {:?} and post {:?} differ",
                pre.dim(),
                post.dim()
            )));
        }
        let x = stack_pair(pre, post);
        Ok(self.infer(x.view())?.split_halves())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("encoder");
        ck.set_meta("channels", join_channels(self.spec.channels));
        ck.add_module("", self);
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }
}

pub(crate) fn join_channels(c: [usize; 4]) -> String {
    c.map(|v| v.to_string()).join(",")
}

fn stack_pair<T: Real>(pre: ArrayView3<f32>, post: ArrayView3<f32>) -> Array4<T> {
    let conv = |a: ArrayView3<f32>| -> Array3<T> { a.mapv(|v| T::from_f64_lossy(f64::from(v))) };
    concatenate(
        Axis(0),
        &[conv(pre).insert_axis(Axis(0)).view(), conv(post).insert_axis(Axis(0)).view()],
    )
    .expect("equal shapes")
}

/// Load an encoder checkpoint, validating it against the declared widths.
///
/// Loaded weights are trainable unless `spec.freeze` is set.
pub fn load_external_encoder<T: Real>(path: &Path, spec: &EncoderSpec) -> Result<Encoder<T>> {
    let spec = EncoderSpec {
        backend: EncoderBackend::External,
        weights: Some(path.to_path_buf()),
        ..spec.clone()
    };
    let ck = Checkpoint::load(path)?;
    if let Some(kind) = ck.kind() {
        if kind != "encoder" {
            return Err(Error::checkpoint("wrong checkpoint kind", "encoder", kind));
        }
    }
    spec.validate()?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut enc = Encoder::new(
        &EncoderSpec {
            backend: EncoderBackend::Toy,
            weights: None,
            ..spec.clone()
        },
        &mut rng,
    )?;
    ck.load_module("", &mut enc)?;
    enc.spec = spec;
    Ok(enc)
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, u) in self.stem.iter().enumerate() {
            u.visit(&join(prefix, &format!("stem{i}")), f);
        }
        for (i, u) in self.stages.iter().enumerate() {
            u.visit(&join(prefix, &format!("stage{}", i + 2)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, u) in self.stem.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("stem{i}")), f);
        }
        for (i, u) in self.stages.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("stage{}", i + 2)), f);
        }
    }
}
