use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{BitemporalSample, SampleSource, SIZE_MULTIPLE};
use crate::error::{Error, Result};

pub const PRE_DIR: &str = "A";
pub const POST_DIR: &str = "B";
pub const LABEL_DIR: &str = "label";
pub const LIST_DIR: &str = "list";
const EXT: &str = "png";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

/// Ids of one split of an `A/ B/ label/ [list/]` dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub sample_ids: Vec<String>,
    pub tile_size: usize,
}

impl DatasetManifest {
    fn path(&self, dir: &str, id: &str) -> PathBuf {
        self.root.join(dir).join(format!("{id}.{EXT}"))
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

fn stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(EXT) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Scan a dataset directory. Ids come from `list/<split>.txt` in file order
/// when present, otherwise from the sorted file stems shared by `A/`, `B/`
/// and `label/`.
pub fn load_dataset(root: &Path, split: Split, tile_size: usize) -> Result<DatasetManifest> {
    if tile_size == 0 || tile_size % SIZE_MULTIPLE != 0 {
        return Err(Error::config(format!(
            "tile size {tile_size} is not a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    let mut sets = Vec::with_capacity(3);
    for dir in [PRE_DIR, POST_DIR, LABEL_DIR] {
        let p = root.join(dir);
        if !p.is_dir() {
            return Err(Error::DatasetLayout(format!("missing directory {}", p.display())));
        }
        sets.push(stems(&p)?);
    }
    let union: BTreeSet<&String> = sets.iter().flatten().collect();
    let list = root.join(LIST_DIR).join(format!("{split}.txt"));
    let sample_ids: Vec<String> = if list.is_file() {
        let text = fs::read_to_string(&list)?;
        let ids: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.trim_end_matches(&format!(".{EXT}")).to_string())
            .collect();
        for id in &ids {
            if sets.iter().any(|s| !s.contains(id)) {
                return Err(Error::DatasetLayout(id.clone()));
            }
        }
        ids
    } else {
        if let Some(missing) = union.iter().find(|id| sets.iter().any(|s| !s.contains(**id))) {
            return Err(Error::DatasetLayout((*missing).clone()));
        }
        union.into_iter().cloned().collect()
    };
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        sample_ids,
        tile_size,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::Io(e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

/// Read and validate one triple. Labels are binarised with `value > 127`.
pub fn read_sample(manifest: &DatasetManifest, id: &str) -> Result<BitemporalSample> {
    if !manifest.sample_ids.iter().any(|s| s == id) {
        return Err(Error::DatasetLayout(format!("{id} is not in the {} split", manifest.split)));
    }
    let pre = open(&manifest.path(PRE_DIR, id))?.to_rgb8();
    let post = open(&manifest.path(POST_DIR, id))?.to_rgb8();
    let label = open(&manifest.path(LABEL_DIR, id))?.to_luma8();
    if pre.dimensions() != post.dimensions() || pre.dimensions() != label.dimensions() {
        return Err(Error::DatasetLayout(format!(
            "{id}: size mismatch pre {:?}, post {:?}, label {:?}",
            pre.dimensions(),
            post.dimensions(),
            label.dimensions()
        )));
    }
    let (w, h) = label.dimensions();
    let gt = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(label.get_pixel(x as u32, y as u32)[0] > 127)
    });
    BitemporalSample::new(id, rgb_to_array(&pre), rgb_to_array(&post), gt)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn array_to_rgb(a: &Array3<f32>) -> RgbImage {
    let (_, h, w) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(a[(0, y, x)]), to_u8(a[(1, y, x)]), to_u8(a[(2, y, x)])])
    })
}

pub(crate) fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a sample as `A/<id>.png`, `B/<id>.png`, `label/<id>.png` (0/255).
pub fn write_sample(root: &Path, sample: &BitemporalSample) -> Result<()> {
    let id = sample.id();
    save_png(&array_to_rgb(sample.pre()), &root.join(PRE_DIR).join(format!("{id}.{EXT}")))?;
    save_png(&array_to_rgb(sample.post()), &root.join(POST_DIR).join(format!("{id}.{EXT}")))?;
    let gt = sample.gt();
    let label = GrayImage::from_fn(gt.ncols() as u32, gt.nrows() as u32, |x, y| {
        image::Luma([gt[(y as usize, x as usize)] * 255])
    });
    save_png(&label, &root.join(LABEL_DIR).join(format!("{id}.{EXT}")))
}

/// Write `list/<split>.txt`, one id per line.
pub fn write_list(root: &Path, split: Split, ids: &[String]) -> Result<()> {
    let dir = root.join(LIST_DIR);
    fs::create_dir_all(&dir)?;
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(dir.join(format!("{split}.txt")), text)?;
    Ok(())
}

pub fn write_dataset(root: &Path, samples: &[BitemporalSample]) -> Result<()> {
    for dir in [PRE_DIR, POST_DIR, LABEL_DIR] {
        fs::create_dir_all(root.join(dir))?;
    }
    samples.iter().try_for_each(|s| write_sample(root, s))
}

/// Samples read lazily from disk.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    pub manifest: DatasetManifest,
}

impl DiskDataset {
    pub fn open(root: &Path, split: Split, tile_size: usize) -> Result<Self> {
        Ok(Self {
            manifest: load_dataset(root, split, tile_size)?,
        })
    }

    pub fn load_all(&self) -> Result<Vec<BitemporalSample>> {
        self.manifest
            .sample_ids
            .iter()
            .map(|id| read_sample(&self.manifest, id))
            .collect()
    }
}

impl SampleSource for DiskDataset {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn get(&self, index: usize) -> Result<BitemporalSample> {
        let id = self
            .manifest
            .sample_ids
            .get(index)
            .ok_or_else(|| Error::DatasetLayout(format!("sample index {index} out of range")))?;
        read_sample(&self.manifest, id)
    }
}
