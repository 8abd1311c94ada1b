//! Tiles, masks and datasets: loading the on-disk layout, choosing labelled
//! training subsets per pipe, computing the class prior and thresholding
//! predictions into hard masks.
//!
//! On-disk layout under a dataset root:
//!
//! ```text
//! labelled/images/<pipe>_<tile>.png    8-bit RGB
//! labelled/masks/<pipe>_<tile>.png     8-bit gray, 0 = suspension, 255 = aggregate
//! unlabelled/images/<pipe>_<tile>.png  8-bit RGB
//! ```

mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::class::{Class, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::losses::{ClassPrior, SIGMA_FLOOR};
use crate::tensor::{Real, Tensor};

pub use synth::{generate_synthetic, SynthConfig};

/// Number of image channels (RGB).
pub const IMAGE_CHANNELS: usize = 3;

/// An RGB tile stored channel-major with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTile {
    size: usize,
    data: Vec<f32>,
}

impl ImageTile {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != IMAGE_CHANNELS * size * size {
            return Err(Error::input(format!(
                "tile of size {size} needs {} values, got {}",
                IMAGE_CHANNELS * size * size,
                data.len()
            )));
        }
        Ok(ImageTile { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn from_rgb(img: &RgbImage) -> Self {
        let size = img.width() as usize;
        let plane = size * size;
        let mut data = vec![0.0f32; IMAGE_CHANNELS * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..IMAGE_CHANNELS {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        ImageTile { size, data }
    }

    fn to_rgb(&self) -> RgbImage {
        let plane = self.size * self.size;
        let mut raw = vec![0u8; IMAGE_CHANNELS * plane];
        for i in 0..plane {
            for c in 0..IMAGE_CHANNELS {
                raw[i * IMAGE_CHANNELS + c] = (self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        RgbImage::from_raw(self.size as u32, self.size as u32, raw).expect("buffer sized")
    }
}

/// Hard per-pixel class labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::input("mask length does not match its shape"));
        }
        if let Some(v) = labels.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::input(format!("mask label {v} is not a class index")));
        }
        Ok(LabelMask { height, width, labels })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|&&v| v == class as u8).count()
    }

    pub fn proportion(&self, class: Class) -> f64 {
        self.count(class) as f64 / self.labels.len() as f64
    }

    pub fn to_gray(&self) -> GrayImage {
        let raw = self.labels.iter().map(|&v| if v == Class::Aggregate as u8 { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer sized")
    }

    fn from_gray(img: &GrayImage, path: &Path) -> Result<Self> {
        let mut labels = Vec::with_capacity(img.len());
        for &v in img.as_raw() {
            labels.push(match v {
                0 => Class::Suspension as u8,
                255 => Class::Aggregate as u8,
                other => return Err(Error::dataset(path, format!("mask value {other} is neither 0 nor 255"))),
            });
        }
        Ok(LabelMask {
            height: img.height() as usize,
            width: img.width() as usize,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledTile {
    pub name: String,
    pub pipe: String,
    pub image: ImageTile,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabelledTile {
    pub name: String,
    pub pipe: String,
    pub image: ImageTile,
}

/// Labelled, unlabelled and (after subset selection) held-out tiles.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetSplit {
    pub labelled: Vec<LabelledTile>,
    pub unlabelled: Vec<UnlabelledTile>,
    pub held_out: Vec<LabelledTile>,
    pub tile_size: usize,
}

impl DatasetSplit {
    pub fn masks(&self) -> Vec<&LabelMask> {
        self.labelled.iter().map(|t| &t.mask).collect()
    }

    /// Pooled per-class pixel frequency over the labelled tiles.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let total: usize = self.labelled.iter().map(|t| t.mask.labels.len()).sum();
        Class::ALL
            .iter()
            .map(|&c| self.labelled.iter().map(|t| t.mask.count(c)).sum::<usize>() as f64 / total.max(1) as f64)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let tiles = self
            .labelled
            .iter()
            .chain(&self.held_out)
            .map(|t| (&t.name, &t.pipe, &t.image, Some(&t.mask)))
            .chain(self.unlabelled.iter().map(|t| (&t.name, &t.pipe, &t.image, None)));
        for (name, pipe, image, mask) in tiles {
            if pipe.is_empty() {
                return Err(Error::input(format!("tile {name} has an empty pipe id")));
            }
            if image.size != self.tile_size {
                return Err(Error::input(format!("tile {name} has size {}, expected {}", image.size, self.tile_size)));
            }
            if mask.is_some_and(|m| m.shape() != (self.tile_size, self.tile_size)) {
                return Err(Error::input(format!("mask of {name} does not match its tile")));
            }
        }
        Ok(())
    }
}

/// Splits `<pipe>_<tile>.png` into its pipe id.
fn pipe_of(path: &Path) -> Result<(String, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::dataset(path, "file name is not valid UTF-8"))?;
    match stem.rsplit_once('_') {
        Some((pipe, tile)) if !pipe.is_empty() && !tile.is_empty() => Ok((stem.to_string(), pipe.to_string())),
        _ => Err(Error::dataset(path, "file name must look like <pipe>_<tile>.png")),
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_image(path: &Path) -> Result<ImageTile> {
    let img = open(path)?.to_rgb8();
    if img.width() != img.height() {
        return Err(Error::dataset(path, "tiles must be square"));
    }
    Ok(ImageTile::from_rgb(&img))
}

fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = open(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::dataset(path, "masks must be 8-bit grayscale"));
    }
    LabelMask::from_gray(&img.to_luma8(), path)
}

/// Reads a dataset root. Files are ordered lexicographically. A missing
/// `unlabelled/images` directory yields an empty unlabelled set.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let images_dir = root.join("labelled/images");
    let masks_dir = root.join("labelled/masks");
    let unlabelled_dir = root.join("unlabelled/images");
    if !images_dir.is_dir() {
        return Err(Error::dataset(&images_dir, "labelled image directory is missing"));
    }

    let labelled = list_pngs(&images_dir)?
        .par_iter()
        .map(|path| {
            let (name, pipe) = pipe_of(path)?;
            let mask_path = masks_dir.join(path.file_name().expect("listed file"));
            if !mask_path.is_file() {
                return Err(Error::dataset(&mask_path, format!("no mask for labelled image {name}")));
            }
            let image = read_image(path)?;
            let mask = read_mask(&mask_path)?;
            if mask.shape() != (image.size, image.size) {
                return Err(Error::dataset(&mask_path, "mask size differs from its image"));
            }
            Ok(LabelledTile { name, pipe, image, mask })
        })
        .collect::<Result<Vec<_>>>()?;

    let unlabelled = if unlabelled_dir.is_dir() {
        list_pngs(&unlabelled_dir)?
            .par_iter()
            .map(|path| {
                let (name, pipe) = pipe_of(path)?;
                Ok(UnlabelledTile {
                    name,
                    pipe,
                    image: read_image(path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let tile_size = labelled
        .first()
        .map(|t| t.image.size)
        .or_else(|| unlabelled.first().map(|t| t.image.size))
        .ok_or_else(|| Error::dataset(root, "dataset contains no tiles"))?;
    let split = DatasetSplit {
        labelled,
        unlabelled,
        held_out: Vec::new(),
        tile_size,
    };
    split.validate().map_err(|e| Error::dataset(root, e.to_string()))?;
    Ok(split)
}

/// Writes a split in the layout `load_dataset` reads. Held-out tiles are
/// written back as labelled tiles.
pub fn save_dataset(split: &DatasetSplit, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let dirs = ["labelled/images", "labelled/masks", "unlabelled/images"].map(|d| root.join(d));
    for d in &dirs {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let save = |img: Result<(), image::ImageError>, path: PathBuf| img.map_err(|source| Error::Image { path, source });
    split.labelled.par_iter().chain(split.held_out.par_iter()).try_for_each(|t| {
        let file = format!("{}.png", t.name);
        let p = dirs[0].join(&file);
        save(t.image.to_rgb().save(&p), p)?;
        let p = dirs[1].join(&file);
        save(t.mask.to_gray().save(&p), p)
    })?;
    split.unlabelled.par_iter().try_for_each(|t| {
        let p = dirs[2].join(format!("{}.png", t.name));
        save(t.image.to_rgb().save(&p), p)
    })
}

/// Keeps `k` randomly chosen labelled tiles per pipe for training; all other
/// labelled tiles move to `held_out`. Tiles keep their original order.
pub fn select_training_subset(split: &DatasetSplit, k: usize, seed: u64) -> Result<DatasetSplit> {
    if k == 0 {
        return Err(Error::input("tiles per pipe must be at least 1"));
    }
    let all: Vec<&LabelledTile> = split.labelled.iter().chain(&split.held_out).collect();
    let mut by_pipe: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in all.iter().enumerate() {
        by_pipe.entry(&t.pipe).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; all.len()];
    for (pipe, mut idx) in by_pipe {
        if idx.len() < k {
            return Err(Error::input(format!(
                "pipe {pipe} has {} labelled tiles, fewer than {k}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            chosen[i] = true;
        }
    }
    let (train, held): (Vec<_>, Vec<_>) = all.into_iter().zip(chosen).partition(|(_, c)| *c);
    Ok(DatasetSplit {
        labelled: train.into_iter().map(|(t, _)| t.clone()).collect(),
        held_out: held.into_iter().map(|(t, _)| t.clone()).collect(),
        unlabelled: split.unlabelled.clone(),
        tile_size: split.tile_size,
    })
}

/// Per-class mean and population standard deviation of per-image class
/// proportions, with the deviation floored.
pub fn compute_class_prior(masks: &[&LabelMask]) -> Result<ClassPrior> {
    if masks.is_empty() {
        return Err(Error::input("class prior needs at least one mask"));
    }
    let n = masks.len() as f64;
    let mut mu = Vec::with_capacity(NUM_CLASSES);
    let mut sigma = Vec::with_capacity(NUM_CLASSES);
    for class in Class::ALL {
        let props: Vec<f64> = masks.iter().map(|m| m.proportion(class)).collect();
        let mean = props.iter().sum::<f64>() / n;
        let var = props.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        mu.push(mean);
        sigma.push(var.sqrt().max(SIGMA_FLOOR));
    }
    ClassPrior::new(mu, sigma)
}

/// Thresholds an aggregate-probability map (`N x 1 x H x W`) into one mask
/// per sample. Pixels at or above the threshold are aggregate.
pub fn binarize<T: Real>(pred: &Tensor<T>, threshold: f64) -> Result<Vec<LabelMask>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::input(format!("threshold {threshold} outside [0, 1]")));
    }
    if pred.channels() != 1 {
        return Err(Error::input("binarize expects a single-channel probability map"));
    }
    let t = T::from_f64_lossy(threshold);
    Ok((0..pred.batch())
        .map(|n| LabelMask {
            height: pred.height(),
            width: pred.width(),
            labels: pred
                .sample(n)
                .iter()
                .map(|&v| if v >= t { Class::Aggregate as u8 } else { Class::Suspension as u8 })
                .collect(),
        })
        .collect())
}

/// Stacks tiles into an `N x 3 x S x S` tensor.
pub fn images_to_tensor<T: Real>(tiles: &[&ImageTile]) -> Tensor<T> {
    let size = tiles.first().map_or(0, |t| t.size);
    let data = tiles
        .iter()
        .flat_map(|t| t.data.iter().map(|&v| T::from_f32(v).expect("f32 converts")))
        .collect();
    Tensor::from_vec([tiles.len(), IMAGE_CHANNELS, size, size], data).expect("tiles share a size")
}

/// Stacks masks into an `N x 1 x H x W` tensor with aggregate = 1.
pub fn masks_to_tensor<T: Real>(masks: &[&LabelMask]) -> Tensor<T> {
    let (h, w) = masks.first().map_or((0, 0), |m| m.shape());
    let data = masks
        .iter()
        .flat_map(|m| m.labels.iter().map(|&v| if v == Class::Aggregate as u8 { T::one() } else { T::zero() }))
        .collect();
    Tensor::from_vec([masks.len(), 1, h, w], data).expect("masks share a shape")
}
