//! Bitemporal change-detection network: shared encoder, per-scale temporal
//! fusion, progressive decoder, multi-scale fusion and residual head.

use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::encoder::{join_channels, parse_channels, Encoder, EncoderSpec, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{
    bilinear_matrix, join, upsample_bilinear, upsample_bilinear_adjoint, Conv2d, ConvBnSilu,
    ConvTranspose2x2, Module, Param, Real, ResidualBlock,
};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub encoder: EncoderSpec,
    pub head_width: usize,
    pub residual_blocks: usize,
    /// Seed for weight initialisation.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            head_width: 32,
            residual_blocks: 6,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Compact configuration for quick experiments.
    pub fn small(channels: [usize; 4], head_width: usize) -> Self {
        Self {
            encoder: EncoderSpec::with_channels(channels),
            head_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head_width == 0 {
            return Err(Error::config("head width must be positive"));
        }
        Ok(())
    }
}

fn concat_channels<T: Real>(a: ArrayView4<'_, T>, b: ArrayView4<'_, T>) -> Array4<T> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial shapes")
}

fn split_channels<T: Real>(g: &Array4<T>, at: usize) -> (Array4<T>, Array4<T>) {
    (
        g.slice(s![.., ..at, .., ..]).to_owned(),
        g.slice(s![.., at.., .., ..]).to_owned(),
    )
}

/// Spatio-temporal feature enhancement: `SiLU(BN(Conv3x3([pre ‖ post])))`.
#[derive(Clone, Debug)]
pub struct Stfe<T> {
    unit: ConvBnSilu<T>,
    channels: usize,
}

impl<T: Real> Stfe<T> {
    pub fn new<R: rand::Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            unit: ConvBnSilu::new(2 * channels, channels, 1, rng),
            channels,
        }
    }

    pub fn forward(&mut self, pre: ArrayView4<T>, post: ArrayView4<T>) -> Array4<T> {
        self.unit.forward(concat_channels(pre, post))
    }

    pub fn infer(&self, pre: ArrayView4<T>, post: ArrayView4<T>) -> Array4<T> {
        self.unit.infer(concat_channels(pre, post).view())
    }

    /// Returns the gradients for `(pre, post)`.
    pub fn backward(&mut self, dy: &Array4<T>) -> (Array4<T>, Array4<T>) {
        split_channels(&self.unit.backward(dy), self.channels)
    }
}

impl<T: Real> Module<T> for Stfe<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.unit.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.unit.visit_mut(prefix, f);
    }
}

/// One decoder step: ×2 transposed conv, concatenation with the skip, conv unit.
#[derive(Clone, Debug)]
pub struct DecoderStage<T> {
    up: ConvTranspose2x2<T>,
    unit: ConvBnSilu<T>,
    channels: usize,
}

impl<T: Real> DecoderStage<T> {
    pub fn new<R: rand::Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            up: ConvTranspose2x2::new(cin, cout, rng),
            unit: ConvBnSilu::new(2 * cout, cout, 1, rng),
            channels: cout,
        }
    }

    pub fn forward(&mut self, prev: Array4<T>, skip: ArrayView4<T>) -> Array4<T> {
        let up = self.up.forward(prev);
        self.unit.forward(concat_channels(up.view(), skip))
    }

    pub fn infer(&self, prev: ArrayView4<T>, skip: ArrayView4<T>) -> Array4<T> {
        let up = self.up.infer(prev);
        self.unit.infer(concat_channels(up.view(), skip).view())
    }

    /// Returns the gradients for `(prev, skip)`.
    pub fn backward(&mut self, dy: &Array4<T>) -> (Array4<T>, Array4<T>) {
        let (gup, gskip) = split_channels(&self.unit.backward(dy), self.channels);
        (self.up.backward(&gup), gskip)
    }
}

impl<T: Real> Module<T> for DecoderStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.unit.visit(&join(prefix, "unit"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.unit.visit_mut(&join(prefix, "unit"), f);
    }
}

/// Multi-scale fusion: bilinear upsampling of `[d1, d2, d3]` to full
/// resolution, channel concatenation and a 1×1 convolution.
///
/// The projection is applied before upsampling; both operators are linear, so
/// the result equals the concatenate-then-project order at a fraction of the
/// cost. The weight keeps the `[out, Σ in, 1, 1]` layout of the 1×1 conv.
#[derive(Clone, Debug)]
pub struct MultiScaleFusion<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    widths: [usize; 3],
    cache: Option<([Array4<T>; 3], usize, usize)>,
}

impl<T: Real> MultiScaleFusion<T> {
    pub fn new<R: rand::Rng + ?Sized>(widths: [usize; 3], out: usize, rng: &mut R) -> Self {
        let total: usize = widths.iter().sum();
        Self {
            weight: Param::he_normal(&[out, total, 1, 1], total, rng),
            bias: Param::zeros(&[out]),
            widths,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let total: usize = self.widths.iter().sum();
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels(), total))
            .expect("contiguous weight")
    }

    fn offsets(&self) -> [usize; 3] {
        [0, self.widths[0], self.widths[0] + self.widths[1]]
    }

    pub fn infer(&self, inputs: [ArrayView4<T>; 3], h: usize, w: usize) -> Array4<T> {
        let b = inputs[0].dim().0;
        let oc = self.out_channels();
        let wm = self.matrix();
        let mut out = Array4::<T>::zeros((b, oc, h, w));
        for (k, x) in inputs.iter().enumerate() {
            let (_, c, xh, xw) = x.dim();
            assert_eq!(c, self.widths[k], "fusion input channels");
            let wk = wm.slice(s![.., self.offsets()[k]..self.offsets()[k] + c]);
            let x = x.as_standard_layout();
            let mut proj = Array4::<T>::zeros((b, oc, xh, xw));
            for bi in 0..b {
                let xm = x.index_axis(Axis(0), bi).into_shape_with_order((c, xh * xw)).expect("contiguous");
                let mut pm = proj
                    .index_axis_mut(Axis(0), bi)
                    .into_shape_with_order((oc, xh * xw))
                    .expect("contiguous");
                general_mat_mul(T::one(), &wk, &xm, T::zero(), &mut pm);
            }
            let rows = bilinear_matrix::<T>(xh, h);
            let cols = bilinear_matrix::<T>(xw, w);
            out += &upsample_bilinear(proj.view(), &rows, &cols);
        }
        for (mut ch, &bv) in out.axis_iter_mut(Axis(1)).zip(self.bias.value.iter()) {
            ch += bv;
        }
        out
    }

    pub fn forward(&mut self, inputs: [Array4<T>; 3], h: usize, w: usize) -> Array4<T> {
        let y = self.infer([inputs[0].view(), inputs[1].view(), inputs[2].view()], h, w);
        self.cache = Some((inputs, h, w));
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> [Array4<T>; 3] {
        let (inputs, h, w) = self.cache.take().expect("fusion backward without forward");
        debug_assert_eq!((dy.dim().2, dy.dim().3), (h, w));
        for (o, gb) in self.bias.grad.iter_mut().enumerate() {
            *gb += dy.index_axis(Axis(1), o).sum();
        }
        let oc = self.out_channels();
        let total: usize = self.widths.iter().sum();
        let wm = self.matrix().to_owned();
        let offsets = self.offsets();
        let mut gw = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((oc, total))
            .expect("contiguous grad");
        let mut grads = Vec::with_capacity(3);
        for (k, x) in inputs.iter().enumerate() {
            let (b, c, xh, xw) = x.dim();
            let rows = bilinear_matrix::<T>(xh, h);
            let cols = bilinear_matrix::<T>(xw, w);
            let gp = upsample_bilinear_adjoint(dy.view(), &rows, &cols);
            let wk = wm.slice(s![.., offsets[k]..offsets[k] + c]);
            let mut gwk = gw.slice_mut(s![.., offsets[k]..offsets[k] + c]);
            let x = x.as_standard_layout();
            let mut gx = Array4::<T>::zeros((b, c, xh, xw));
            for bi in 0..b {
                let gpm = gp.index_axis(Axis(0), bi).into_shape_with_order((oc, xh * xw)).expect("contiguous");
                let xm = x.index_axis(Axis(0), bi).into_shape_with_order((c, xh * xw)).expect("contiguous");
                general_mat_mul(T::one(), &gpm, &xm.t(), T::one(), &mut gwk);
                let mut gxm = gx
                    .index_axis_mut(Axis(0), bi)
                    .into_shape_with_order((c, xh * xw))
                    .expect("contiguous");
                general_mat_mul(T::one(), &wk.t(), &gpm, T::zero(), &mut gxm);
            }
            grads.push(gx);
        }
        grads.try_into().expect("three inputs")
    }
}

impl<T: Real> Module<T> for MultiScaleFusion<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Residual blocks followed by a 1×1 projection to one logit channel.
#[derive(Clone, Debug)]
pub struct ResidualHead<T> {
    pub blocks: Vec<ResidualBlock<T>>,
    pub out: Conv2d<T>,
}

impl<T: Real> ResidualHead<T> {
    pub fn new<R: rand::Rng + ?Sized>(width: usize, blocks: usize, rng: &mut R) -> Self {
        Self {
            blocks: (0..blocks).map(|_| ResidualBlock::new(width, rng)).collect(),
            out: Conv2d::new(width, 1, 1, 1, true, rng),
        }
    }

    pub fn forward(&mut self, x: Array4<T>) -> Array4<T> {
        let x = self.blocks.iter_mut().fold(x, |x, b| b.forward(x));
        self.out.forward(x)
    }

    pub fn infer(&self, x: ArrayView4<T>) -> Array4<T> {
        let mut x = x.to_owned();
        for b in &self.blocks {
            x = b.infer(x.view());
        }
        self.out.infer(x.view())
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let g = self.out.backward(dy);
        self.blocks.iter_mut().rev().fold(g, |g, b| b.backward(&g))
    }
}

impl<T: Real> Module<T> for ResidualHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Temporally fused features `e1..e4`, same shapes as one pyramid half.
#[derive(Clone, Debug, PartialEq)]
pub struct StfeOutput<T> {
    pub levels: [Array4<T>; 4],
}

/// Decoder outputs at strides 16, 8 and 4.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState<T> {
    pub d3: Array4<T>,
    pub d2: Array4<T>,
    pub d1: Array4<T>,
}

/// Gradients of a scalar objective with respect to both input images.
#[derive(Clone, Debug)]
pub struct InputGradients<T> {
    pub pre: Array4<T>,
    pub post: Array4<T>,
}

#[derive(Clone, Debug)]
pub struct ChangeDetector<T> {
    config: NetworkConfig,
    pub encoder: Encoder<T>,
    pub stfe: [Stfe<T>; 4],
    /// Stages producing `d3`, `d2`, `d1` in that order.
    pub decoder: [DecoderStage<T>; 3],
    pub fusion: MultiScaleFusion<T>,
    pub head: ResidualHead<T>,
    batch: usize,
}

fn check_pair<T>(pre: &ArrayView4<T>, post: &ArrayView4<T>) -> Result<()> {
    if pre.dim() != post.dim() {
        return Err(Error::shape(format!(
            "pre {:?} and post {:?} differ",
            pre.dim(),
            post.dim()
        )));
    }
    Ok(())
}

impl<T: Real> ChangeDetector<T> {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(&config.encoder, &mut rng)?;
        let c = config.encoder.channels;
        Ok(Self {
            config: config.clone(),
            encoder,
            stfe: std::array::from_fn(|i| Stfe::new(c[i], &mut rng)),
            decoder: [
                DecoderStage::new(c[3], c[2], &mut rng),
                DecoderStage::new(c[2], c[1], &mut rng),
                DecoderStage::new(c[1], c[0], &mut rng),
            ],
            fusion: MultiScaleFusion::new([c[0], c[1], c[2]], config.head_width, &mut rng),
            head: ResidualHead::new(config.head_width, config.residual_blocks, &mut rng),
            batch: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Fuse the two pyramids scale by scale.
    pub fn stfe(&self, pre: &FeaturePyramid<T>, post: &FeaturePyramid<T>) -> Result<StfeOutput<T>> {
        for i in 0..4 {
            check_pair(&pre.levels[i].view(), &post.levels[i].view())?;
        }
        Ok(StfeOutput {
            levels: std::array::from_fn(|i| self.stfe[i].infer(pre.levels[i].view(), post.levels[i].view())),
        })
    }

    pub fn decode(&self, e: &StfeOutput<T>) -> DecoderState<T> {
        let [e1, e2, e3, e4] = &e.levels;
        let d3 = self.decoder[0].infer(e4.view(), e3.view());
        let d2 = self.decoder[1].infer(d3.view(), e2.view());
        let d1 = self.decoder[2].infer(d2.view(), e1.view());
        DecoderState { d3, d2, d1 }
    }

    /// Fuse decoder outputs at `h × w` and produce `[batch, 1, h, w]` logits.
    pub fn msdf_and_head(&self, d: &DecoderState<T>, h: usize, w: usize) -> Array4<T> {
        let fused = self.fusion.infer([d.d1.view(), d.d2.view(), d.d3.view()], h, w);
        self.head.infer(fused.view())
    }

    /// Evaluation-mode logits for batched inputs `[batch, 3, H, W]`.
    pub fn infer(&self, pre: ArrayView4<T>, post: ArrayView4<T>) -> Result<Array4<T>> {
        check_pair(&pre, &post)?;
        let (_, _, h, w) = pre.dim();
        let x = concatenate(Axis(0), &[pre.view(), post.view()]).expect("equal shapes");
        let (fa, fb) = self.encoder.infer(x.view())?.split_halves();
        let e = self.stfe(&fa, &fb)?;
        Ok(self.msdf_and_head(&self.decode(&e), h, w))
    }

    /// Evaluation-mode logits `[H, W]` for one image pair.
    pub fn logits(&self, pre: ArrayView3<f32>, post: ArrayView3<f32>) -> Result<Array2<f32>> {
        let conv = |a: ArrayView3<f32>| -> Array4<T> {
            a.mapv(|v| T::from_f64_lossy(f64::from(v))).insert_axis(Axis(0))
        };
        let z = self.infer(conv(pre).view(), conv(post).view())?;
        Ok(z.slice(s![0, 0, .., ..]).mapv(|v| v.as_f64() as f32))
    }

    /// Training-mode pass; caches activations for [`Self::backward`].
    pub fn forward_train(&mut self, pre: Array4<T>, post: Array4<T>) -> Result<Array4<T>> {
        check_pair(&pre.view(), &post.view())?;
        let (b, _, h, w) = pre.dim();
        let x = concatenate(Axis(0), &[pre.view(), post.view()]).expect("equal shapes");
        let (fa, fb) = self.encoder.forward(x)?.split_halves();
        let e: [Array4<T>; 4] =
            std::array::from_fn(|i| self.stfe[i].forward(fa.levels[i].view(), fb.levels[i].view()));
        let [e1, e2, e3, e4] = e;
        let d3 = self.decoder[0].forward(e4, e3.view());
        let d2 = self.decoder[1].forward(d3.clone(), e2.view());
        let d1 = self.decoder[2].forward(d2.clone(), e1.view());
        let fused = self.fusion.forward([d1, d2, d3], h, w);
        self.batch = b;
        Ok(self.head.forward(fused))
    }

    /// Accumulate parameter gradients for `dlogits = ∂L/∂logits`.
    pub fn backward(&mut self, dlogits: &Array4<T>) -> InputGradients<T> {
        let g = self.head.backward(dlogits);
        let [g1, g2, g3] = self.fusion.backward(&g);
        let (gprev, ge1) = self.decoder[2].backward(&g1);
        let (gprev, ge2) = self.decoder[1].backward(&(g2 + gprev));
        let (ge4, ge3) = self.decoder[0].backward(&(g3 + gprev));
        let ge = [ge1, ge2, ge3, ge4];
        let levels: Vec<Array4<T>> = ge
            .iter()
            .zip(self.stfe.iter_mut())
            .map(|(g, unit)| {
                let (a, b) = unit.backward(g);
                concatenate(Axis(0), &[a.view(), b.view()]).expect("equal shapes")
            })
            .collect();
        let dx = self.encoder.backward(levels.try_into().expect("four levels"));
        let b = self.batch;
        InputGradients {
            pre: dx.slice(s![..b, .., .., ..]).to_owned(),
            post: dx.slice(s![b.., .., .., ..]).to_owned(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("model");
        self.describe(&mut ck);
        ck.add_module("", self);
        ck
    }

    pub(crate) fn describe(&self, ck: &mut Checkpoint) {
        ck.set_meta("channels", join_channels(self.config.encoder.channels));
        ck.set_meta("head_width", self.config.head_width);
        ck.set_meta("residual_blocks", self.config.residual_blocks);
        ck.set_meta("init_seed", self.config.seed);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuild a model from any checkpoint holding model tensors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = NetworkConfig {
            encoder: EncoderSpec::with_channels(parse_channels(ck.meta("channels")?)?),
            head_width: ck.meta_parse("head_width")?,
            residual_blocks: ck.meta_parse("residual_blocks")?,
            seed: ck.meta_parse("init_seed").unwrap_or(0),
        };
        let mut model = Self::new(&config)?;
        ck.load_module("", &mut model)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl<T: Real> Module<T> for ChangeDetector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, u) in self.stfe.iter().enumerate() {
            u.visit(&join(prefix, &format!("stfe{}", i + 1)), f);
        }
        for (i, u) in self.decoder.iter().enumerate() {
            u.visit(&join(prefix, &format!("decoder{}", 3 - i)), f);
        }
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (i, u) in self.stfe.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("stfe{}", i + 1)), f);
        }
        for (i, u) in self.decoder.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("decoder{}", 3 - i)), f);
        }
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Stack samples into `(pre, post)` batches of shape `[batch, 3, H, W]`.
pub fn stack_images<T: Real>(images: &[(ArrayView3<f32>, ArrayView3<f32>)]) -> Result<(Array4<T>, Array4<T>)> {
    let conv = |a: &ArrayView3<f32>| -> Array3<T> { a.mapv(|v| T::from_f64_lossy(f64::from(v))) };
    let pre: Vec<Array3<T>> = images.iter().map(|(a, _)| conv(a)).collect();
    let post: Vec<Array3<T>> = images.iter().map(|(_, b)| conv(b)).collect();
    let stack = |v: &[Array3<T>]| {
        ndarray::stack(Axis(0), &v.iter().map(|a| a.view()).collect::<Vec<_>>())
            .map_err(|_| Error::shape("samples in a batch must share one size"))
    };
    Ok((stack(&pre)?, stack(&post)?))
}
