//! Synthetic bitemporal scenes: textured background, filled rectangles and
//! ellipses, and a post-change image with objects added or removed.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BitemporalSample, SIZE_MULTIPLE};
use crate::error::{Error, Result};

/// Per-sample attempts before a target is declared unreachable.
const MAX_RETRIES: usize = 40;
/// Accepted per-sample deviation from the target change fraction.
const SAMPLE_TOLERANCE: f64 = 0.01;
/// Accepted deviation of the dataset mean.
pub const DATASET_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub num_samples: usize,
    pub tile_size: usize,
    pub change_fraction_target: f64,
    /// Inclusive range of objects in the pre-change scene; the upper bound
    /// also caps the number of change events per sample.
    pub object_count_range: (usize, usize),
    /// Object side lengths as fractions of the tile side.
    pub object_size_range: (f64, f64),
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            num_samples: 50,
            tile_size: 256,
            change_fraction_target: 0.05,
            object_count_range: (3, 10),
            object_size_range: (0.06, 0.25),
            noise_level: 0.02,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be positive"));
        }
        if self.tile_size == 0 || self.tile_size % SIZE_MULTIPLE != 0 {
            return Err(Error::config(format!(
                "tile size {} is not a positive multiple of {SIZE_MULTIPLE}",
                self.tile_size
            )));
        }
        if !(self.change_fraction_target > 0.0 && self.change_fraction_target < 1.0) {
            return Err(Error::config(format!(
                "change fraction target must be in (0, 1), got {}",
                self.change_fraction_target
            )));
        }
        let (lo, hi) = self.object_count_range;
        if lo > hi || hi == 0 {
            return Err(Error::config(format!("invalid object count range {lo}..={hi}")));
        }
        let (smin, smax) = self.object_size_range;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return Err(Error::config(format!("invalid object size range {smin}..{smax}")));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("noise level must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    pub center: (f64, f64),
    /// Half extents `(rows, cols)`.
    pub half: (f64, f64),
    pub color: [f32; 3],
}

impl SceneObject {
    fn covers(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.center.0) / self.half.0;
        let dx = (x - self.center.1) / self.half.1;
        match self.shape {
            Shape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }

    fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let clampi = |v: f64| v.max(0.0).min(size as f64) as usize;
        (
            clampi((self.center.0 - self.half.0).floor()),
            clampi((self.center.0 + self.half.0).ceil() + 1.0),
            clampi((self.center.1 - self.half.1).floor()),
            clampi((self.center.1 + self.half.1).ceil() + 1.0),
        )
    }
}

/// A square scene: background texture plus objects painted in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub base: [f32; 3],
    /// Texture frequencies and phase of a low-amplitude sinusoid.
    pub wave: (f64, f64, f64),
    pub grain_seed: u64,
    pub objects: Vec<SceneObject>,
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

impl Scene {
    pub fn empty<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let base = [
            rng.gen_range(0.25..0.6),
            rng.gen_range(0.25..0.6),
            rng.gen_range(0.25..0.6),
        ];
        Self {
            size,
            base,
            wave: (
                rng.gen_range(0.02..0.15),
                rng.gen_range(0.02..0.15),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ),
            grain_seed: rng.gen(),
            objects: Vec::new(),
        }
    }

    fn next_id(&self) -> u32 {
        self.objects.iter().map(|o| o.id).max().unwrap_or(0) + 1
    }

    /// Append a random object with roughly the requested area (in pixels),
    /// side lengths clipped to `side_range`.
    pub fn add_object<R: Rng + ?Sized>(
        &mut self,
        area: f64,
        side_range: (f64, f64),
        rng: &mut R,
    ) -> &SceneObject {
        let shape = if rng.gen_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let shape_factor = match shape {
            Shape::Rectangle => 1.0,
            Shape::Ellipse => std::f64::consts::FRAC_PI_4,
        };
        let h = (area / shape_factor * aspect).sqrt().clamp(side_range.0, side_range.1);
        let w = (area / shape_factor / h).clamp(side_range.0, side_range.1);
        let s = self.size as f64;
        let cy = rng.gen_range(h / 2.0..(s - h / 2.0).max(h / 2.0 + 1e-9));
        let cx = rng.gen_range(w / 2.0..(s - w / 2.0).max(w / 2.0 + 1e-9));
        let obj = SceneObject {
            id: self.next_id(),
            shape,
            center: (cy, cx),
            half: (h / 2.0, w / 2.0),
            color: random_color(rng),
        };
        self.objects.push(obj);
        self.objects.last().expect("just pushed")
    }

    /// Id of the top-most object at each pixel (0 for background).
    pub fn membership(&self) -> Array2<u32> {
        let mut ids = Array2::<u32>::zeros((self.size, self.size));
        for obj in &self.objects {
            let (y0, y1, x0, x1) = obj.bounds(self.size);
            for y in y0..y1 {
                for x in x0..x1 {
                    if obj.covers(y as f64 + 0.5, x as f64 + 0.5) {
                        ids[(y, x)] = obj.id;
                    }
                }
            }
        }
        ids
    }

    /// Render to an 8-bit-quantised `[3, size, size]` image.
    pub fn render(&self) -> Array3<f32> {
        let n = self.size;
        let mut grain = ChaCha8Rng::seed_from_u64(self.grain_seed);
        let (fy, fx, phase) = self.wave;
        let mut img = Array3::<f32>::zeros((3, n, n));
        for y in 0..n {
            for x in 0..n {
                let wave = 0.06 * (fy * y as f64 + fx * x as f64 + phase).sin();
                let g: f64 = grain.gen_range(-0.03..0.03);
                for c in 0..3 {
                    img[(c, y, x)] = self.base[c] + (wave + g) as f32;
                }
            }
        }
        let ids = self.membership();
        let colors: std::collections::HashMap<u32, [f32; 3]> =
            self.objects.iter().map(|o| (o.id, o.color)).collect();
        for ((y, x), &id) in ids.indexed_iter() {
            if id != 0 {
                let col = colors[&id];
                for c in 0..3 {
                    img[(c, y, x)] = col[c];
                }
            }
        }
        img.mapv_inplace(quantize);
        img
    }
}

/// Render a pre/post pair. The mask marks pixels whose top-most object
/// differs between the scenes; `noise_level` adds uniform noise to the
/// post-change image only.
pub fn make_sample<R: Rng + ?Sized>(
    id: impl Into<String>,
    pre: &Scene,
    post: &Scene,
    noise_level: f64,
    rng: &mut R,
) -> Result<BitemporalSample> {
    if pre.size != post.size {
        return Err(Error::shape("pre and post scenes differ in size"));
    }
    let a = pre.render();
    let mut b = post.render();
    if noise_level > 0.0 {
        let amp = noise_level as f32;
        b.mapv_inplace(|v| quantize(v + amp * rng.gen_range(-1.0f32..1.0)));
    }
    let ma = pre.membership();
    let mb = post.membership();
    let gt = ndarray::Zip::from(&ma).and(&mb).map_collect(|&x, &y| u8::from(x != y));
    BitemporalSample::new(id, a, b, gt)
}

fn changed_pixels(pre: &Array2<u32>, post: &Scene) -> usize {
    let mb = post.membership();
    ndarray::Zip::from(pre)
        .and(&mb)
        .fold(0, |acc, &x, &y| acc + usize::from(x != y))
}

fn try_sample<R: Rng + ?Sized>(cfg: &SynthesisConfig, rng: &mut R) -> Option<(Scene, Scene)> {
    let n = cfg.tile_size;
    let px = (n * n) as f64;
    let sides = (cfg.object_size_range.0 * n as f64, cfg.object_size_range.1 * n as f64);
    let (cmin, cmax) = cfg.object_count_range;
    let mut pre = Scene::empty(n, rng);
    let count = rng.gen_range(cmin..=cmax);
    for _ in 0..count {
        let side = rng.gen_range(sides.0..=sides.1);
        pre.add_object(side * side, sides, rng);
    }
    let pre_ids = pre.membership();
    let target = cfg.change_fraction_target * px;
    let mut post = pre.clone();
    let mut changed = 0usize;
    for _ in 0..cmax {
        let deficit = target - changed as f64;
        if deficit <= SAMPLE_TOLERANCE * px * 0.5 {
            break;
        }
        let mut candidate = post.clone();
        let removable: Vec<usize> = (0..candidate.objects.len())
            .filter(|&i| {
                let o = &candidate.objects[i];
                let area = 4.0 * o.half.0 * o.half.1;
                pre.objects.iter().any(|p| p.id == o.id) && area <= 1.5 * deficit
            })
            .collect();
        if !removable.is_empty() && rng.gen_bool(0.35) {
            let pick = removable[rng.gen_range(0..removable.len())];
            candidate.objects.remove(pick);
        } else {
            let area = deficit * rng.gen_range(0.7..1.0);
            candidate.add_object(area, sides, rng);
        }
        let c = changed_pixels(&pre_ids, &candidate);
        if (c as f64) <= target + SAMPLE_TOLERANCE * px || changed == 0 {
            post = candidate;
            changed = c;
        }
    }
    let frac = changed as f64 / px;
    ((frac - cfg.change_fraction_target).abs() <= SAMPLE_TOLERANCE).then_some((pre, post))
}

/// Generate `num_samples` pairs. A pure function of `cfg`.
pub fn synthesize_dataset(cfg: &SynthesisConfig) -> Result<Vec<BitemporalSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let (pre, post) = (0..MAX_RETRIES)
            .find_map(|_| try_sample(cfg, &mut rng))
            .ok_or_else(|| {
                Error::Synthesis(format!(
                    "could not reach change fraction {} within {MAX_RETRIES} attempts \
                     (object count range {:?}, object size range {:?})",
                    cfg.change_fraction_target, cfg.object_count_range, cfg.object_size_range
                ))
            })?;
        samples.push(make_sample(format!("{i:04}"), &pre, &post, cfg.noise_level, &mut rng)?);
    }
    let mean = samples.iter().map(BitemporalSample::change_fraction).sum::<f64>()
        / samples.len() as f64;
    if (mean - cfg.change_fraction_target).abs() > DATASET_TOLERANCE {
        return Err(Error::Synthesis(format!(
            "dataset change fraction {mean:.4} misses target {}",
            cfg.change_fraction_target
        )));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num: usize, seed: u64) -> SynthesisConfig {
        SynthesisConfig {
            num_samples: num,
            tile_size: 64,
            seed,
            ..SynthesisConfig::default()
        }
    }

    #[test]
    fn unchanged_scene_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scene = Scene::empty(64, &mut rng);
        scene.add_object(200.0, (4.0, 20.0), &mut rng);
        let s = make_sample("s", &scene, &scene.clone(), 0.0, &mut rng).unwrap();
        assert!(s.gt().iter().all(|&v| v == 0));
        assert_eq!(s.pre(), s.post());
    }

    #[test]
    fn removal_marks_exactly_the_object() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pre = Scene::empty(64, &mut rng);
        pre.add_object(150.0, (4.0, 20.0), &mut rng);
        let mut post = pre.clone();
        post.objects.clear();
        let s = make_sample("r", &pre, &post, 0.0, &mut rng).unwrap();
        let ids = pre.membership();
        for ((y, x), &id) in ids.indexed_iter() {
            assert_eq!(s.gt()[(y, x)], u8::from(id != 0));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synthesize_dataset(&small(4, 7)).unwrap();
        let b = synthesize_dataset(&small(4, 7)).unwrap();
        assert_eq!(a, b);
        let c = synthesize_dataset(&small(4, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mean_change_fraction_near_target() {
        let data = synthesize_dataset(&small(50, 11)).unwrap();
        let mean = data.iter().map(|s| s.change_fraction()).sum::<f64>() / 50.0;
        assert!((0.03..=0.07).contains(&mean), "mean {mean}");
    }

    #[test]
    fn unreachable_target_fails() {
        let cfg = SynthesisConfig {
            change_fraction_target: 0.9,
            object_size_range: (0.02, 0.05),
            ..small(2, 1)
        };
        assert!(matches!(synthesize_dataset(&cfg), Err(Error::Synthesis(_))));
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(
            synthesize_dataset(&SynthesisConfig { tile_size: 50, ..small(1, 0) }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            synthesize_dataset(&SynthesisConfig { change_fraction_target: 0.0, ..small(1, 0) }),
            Err(Error::Config(_))
        ));
    }
}
