//! Paired low/normal-light images: loading, cropping, augmentation,
//! synthetic fixtures and seeded epoch iteration.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;

use image::{DynamicImage, ImageBuffer, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::DIVISOR;
use crate::tensor::Tensor;

pub const LOW_DIR: &str = "low";
pub const GT_DIR: &str = "high";
const EXTENSIONS: [&str; 4] = ["png", "ppm", "pnm", "pgm"];

/// A low-light image and its reference, both `[3,H,W]` in `[0,1]`.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub low: Tensor,
    pub gt: Tensor,
    pub id: String,
}

impl PairedSample {
    pub fn new(low: Tensor, gt: Tensor, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if low.shape().len() != 3 || low.shape()[0] != 3 {
            return Err(Error::Data(format!("{id}: expected a [3,H,W] image, got {:?}", low.shape())));
        }
        if low.shape() != gt.shape() {
            return Err(Error::Data(format!(
                "{id}: low {:?} and gt {:?} differ in size",
                low.shape(),
                gt.shape()
            )));
        }
        Ok(PairedSample { low, gt, id })
    }

    pub fn height(&self) -> usize {
        self.low.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.low.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub low_dir: PathBuf,
    pub gt_dir: PathBuf,
    /// Training crop size; `None` keeps full images.
    pub crop: Option<usize>,
    pub augment: bool,
    pub seed: u64,
}

impl DatasetSpec {
    /// `<root>/low` and `<root>/high`.
    pub fn from_root(root: &Path, crop: Option<usize>, augment: bool, seed: u64) -> Self {
        DatasetSpec {
            low_dir: root.join(LOW_DIR),
            gt_dir: root.join(GT_DIR),
            crop,
            augment,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.crop {
            if c == 0 || c % DIVISOR != 0 {
                return Err(Error::Config(format!("crop must be a positive multiple of {DIVISOR}, got {c}")));
            }
        }
        Ok(())
    }

    /// File names present in the low directory, sorted, each checked for a
    /// counterpart in the gt directory.
    pub fn ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        let entries = std::fs::read_dir(&self.low_dir)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", self.low_dir.display())))?;
        for entry in entries {
            let path = entry?.path();
            let supported = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if !supported {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).map(str::to_owned);
            let Some(name) = name else { continue };
            if !self.gt_dir.join(&name).is_file() {
                return Err(Error::Data(format!(
                    "{name} has no counterpart in {}",
                    self.gt_dir.display()
                )));
            }
            ids.push(name);
        }
        ids.sort();
        Ok(ids)
    }
}

/// Reads an 8- or 16-bit image as `[3,H,W]` in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    let mut put = |x: usize, y: usize, rgb: [f64; 3]| {
        for (c, v) in rgb.into_iter().enumerate() {
            data[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
        }
    };
    match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            for (x, y, p) in img.to_rgb16().enumerate_pixels() {
                put(x as usize, y as usize, p.0.map(|v| f64::from(v) / 65535.0));
            }
        }
        _ => {
            for (x, y, p) in img.to_rgb8().enumerate_pixels() {
                put(x as usize, y as usize, p.0.map(|v| f64::from(v) / 255.0));
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a `[3,H,W]` or `[1,3,H,W]` image as 8-bit PNG after clamping.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let shape = image.shape();
    let (h, w) = match shape {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => return Err(Error::Data(format!("cannot save an image of shape {shape:?}"))),
    };
    let data = image.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = data[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_pair(spec: &DatasetSpec, id: &str) -> Result<PairedSample> {
    let gt_path = spec.gt_dir.join(id);
    if !gt_path.is_file() {
        return Err(Error::Data(format!("{id} has no counterpart in {}", spec.gt_dir.display())));
    }
    let low = load_image(&spec.low_dir.join(id))?;
    let gt = load_image(&gt_path)?;
    PairedSample::new(low, gt, id)
}

pub fn load_all(spec: &DatasetSpec) -> Result<Vec<PairedSample>> {
    spec.ids()?.iter().map(|id| load_pair(spec, id)).collect()
}

fn crop_plane(t: &Tensor, y0: usize, x0: usize, size: usize) -> Result<Tensor> {
    t.narrow(1, y0, size)?.narrow(2, x0, size)?.detach().reshape(&[3, size, size])
}

/// Cuts the same random `crop x crop` window from both images. Returns the
/// window origin `(y, x)` along with the patch.
pub fn sample_patch(pair: &PairedSample, crop: usize, rng: &mut impl Rng) -> Result<(PairedSample, (usize, usize))> {
    let (h, w) = (pair.height(), pair.width());
    if h < crop || w < crop {
        return Err(Error::Data(format!("{}: image {h}x{w} is smaller than crop {crop}", pair.id)));
    }
    let y0 = rng.gen_range(0..=h - crop);
    let x0 = rng.gen_range(0..=w - crop);
    let patch = PairedSample::new(
        crop_plane(&pair.low, y0, x0, crop)?,
        crop_plane(&pair.gt, y0, x0, crop)?,
        pair.id.clone(),
    )?;
    Ok((patch, (y0, x0)))
}

/// The eight symmetries of the square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dihedral {
    Identity,
    FlipH,
    FlipV,
    Rot90,
    Rot90FlipH,
    Rot90FlipV,
    Rot180,
    Rot270,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Rot90,
        Dihedral::Rot90FlipH,
        Dihedral::Rot90FlipV,
        Dihedral::Rot180,
        Dihedral::Rot270,
    ];

    fn swaps_axes(self) -> bool {
        matches!(
            self,
            Dihedral::Rot90 | Dihedral::Rot90FlipH | Dihedral::Rot90FlipV | Dihedral::Rot270
        )
    }

    /// Source pixel `(y, x)` for output pixel `(i, j)` of an `n x n` image.
    /// Rotations are counter-clockwise; flips after a rotation act on the
    /// rotated image.
    fn source(self, i: usize, j: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Dihedral::Identity => (i, j),
            Dihedral::FlipH => (i, m - j),
            Dihedral::FlipV => (m - i, j),
            Dihedral::Rot90 => (j, m - i),
            Dihedral::Rot90FlipH => (m - j, m - i),
            Dihedral::Rot90FlipV => (j, i),
            Dihedral::Rot180 => (m - i, m - j),
            Dihedral::Rot270 => (m - j, i),
        }
    }

    /// Applies the transform to a `[C,H,W]` tensor.
    pub fn apply(self, t: &Tensor) -> Result<Tensor> {
        let [c, h, w] = t.shape() else {
            return Err(Error::Data(format!("expected [C,H,W], got {:?}", t.shape())));
        };
        let (c, h, w) = (*c, *h, *w);
        if self.swaps_axes() && h != w {
            return Err(Error::Data(format!("{self:?} needs a square image, got {h}x{w}")));
        }
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            let plane = &src[ch * h * w..][..h * w];
            for i in 0..h {
                for j in 0..w {
                    let (y, x) = match self {
                        Dihedral::FlipH => (i, w - 1 - j),
                        Dihedral::FlipV => (h - 1 - i, j),
                        Dihedral::Rot180 => (h - 1 - i, w - 1 - j),
                        other => other.source(i, j, h),
                    };
                    out[(ch * h + i) * w + j] = plane[y * w + x];
                }
            }
        }
        Tensor::new(t.shape(), out)
    }
}

/// Applies one uniformly drawn dihedral transform to both images.
pub fn augment(pair: &PairedSample, rng: &mut impl Rng) -> Result<(PairedSample, Dihedral)> {
    let d = Dihedral::ALL[rng.gen_range(0..Dihedral::ALL.len())];
    let out = PairedSample::new(d.apply(&pair.low)?, d.apply(&pair.gt)?, pair.id.clone())?;
    Ok((out, d))
}

/// Synthetic pair: a smoothed random colour field in `[0.3, 0.9]` and its
/// darkened, noisy counterpart `clamp(gt^gamma * s + n)`.
pub fn synth_pair(rng: &mut impl Rng, size: usize, id: impl Into<String>) -> Result<PairedSample> {
    if size == 0 || size % DIVISOR != 0 {
        return Err(Error::InvalidArgument {
            op: "synth_pair",
            detail: format!("size must be a positive multiple of {DIVISOR}, got {size}"),
        });
    }
    let n = size * size;
    let mut gt = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let noise: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let smooth = box_blur(&box_blur(&noise, size), size);
        let (lo, hi) = smooth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let span = (hi - lo).max(1e-12);
        gt.extend(smooth.iter().map(|v| 0.3 + 0.6 * (v - lo) / span));
    }
    let gamma = rng.gen_range(2.0..=3.0);
    let s = rng.gen_range(0.1..=0.3);
    let normal = Normal::new(0.0, 0.01).expect("positive std");
    let low = gt
        .iter()
        .map(|g| (g.powf(gamma) * s + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    PairedSample::new(Tensor::new(&[3, size, size], low)?, Tensor::new(&[3, size, size], gt)?, id)
}

/// 3x3 mean filter with wrap-around borders.
fn box_blur(plane: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for dy in [size - 1, 0, 1] {
                for dx in [size - 1, 0, 1] {
                    acc += plane[((y + dy) % size) * size + (x + dx) % size];
                }
            }
            out[y * size + x] = acc / 9.0;
        }
    }
    out
}

/// `count` synthetic pairs, deterministic in `seed`.
pub fn synth_dataset(seed: u64, count: usize, size: usize) -> Result<Vec<PairedSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| synth_pair(&mut rng, size, format!("synth{i:03}"))).collect()
}

/// Seed of the rng owned by sample `index` in `epoch`.
pub fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combination of the three inputs
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded permutation of `0..len` for `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, u64::MAX)));
    order
}

/// Crop and augmentation of one sample, reproducible from its seed alone.
pub fn prepare(pair: &PairedSample, crop: Option<usize>, augment_on: bool, seed: u64) -> Result<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = match crop {
        Some(c) => sample_patch(pair, c, &mut rng)?.0,
        None => pair.clone(),
    };
    if augment_on {
        out = augment(&out, &mut rng)?.0;
    }
    Ok(out)
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub low: Tensor,
    pub gt: Tensor,
    pub ids: Vec<String>,
}

/// Stacks `[3,H,W]` samples into `[N,3,H,W]` tensors.
pub fn stack(samples: &[PairedSample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let shape = first.low.shape().to_vec();
    let mut low = Vec::new();
    let mut gt = Vec::new();
    for s in samples {
        if s.low.shape() != shape {
            return Err(Error::Data(format!(
                "batch mixes sizes {shape:?} and {:?}; set a crop size",
                s.low.shape()
            )));
        }
        low.extend_from_slice(&s.low.data());
        gt.extend_from_slice(&s.gt.data());
    }
    let full = [samples.len(), shape[0], shape[1], shape[2]];
    Ok(Batch {
        low: Tensor::new(&full, low)?,
        gt: Tensor::new(&full, gt)?,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Options for [`epoch_batches`].
#[derive(Clone, Copy, Debug)]
pub struct LoaderOptions {
    pub batch: usize,
    pub crop: Option<usize>,
    pub augment: bool,
    pub seed: u64,
    /// Bound of the queue between the worker and the consumer.
    pub prefetch: usize,
}

/// Batches of one epoch produced on a worker thread. Every pair is visited
/// exactly once in a seeded order; the last batch may be smaller.
pub fn epoch_batches(pairs: Arc<Vec<PairedSample>>, epoch: u64, opts: LoaderOptions) -> Receiver<Result<Batch>> {
    let (tx, rx) = sync_channel(opts.prefetch.max(1));
    thread::spawn(move || {
        let order = epoch_order(opts.seed, epoch, pairs.len());
        for chunk in order.chunks(opts.batch.max(1)) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    prepare(
                        &pairs[i],
                        opts.crop,
                        opts.augment,
                        sample_seed(opts.seed, epoch, i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()
                .and_then(|s| stack(&s));
            let failed = batch.is_err();
            if tx.send(batch).is_err() || failed {
                return;
            }
        }
    });
    rx
}
