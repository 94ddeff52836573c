//! Dataset ingestion and batch assembly for unpaired two-domain training.

pub mod io;
pub mod manifest;
pub mod toy;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{DisparitySign, ImageTensor, ValueDomain};
use crate::imageops;

pub use io::{load_disparity, load_image, load_labels, save_disparity, save_image};
pub use manifest::{DatasetDomain, DatasetManifest, ManifestEntry, DEFAULT_BUILDING_THRESHOLD};

/// Left view, right view and right-view disparity of one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoTuple {
    pub left: ImageTensor,
    pub right: ImageTensor,
    pub disparity: ImageTensor,
    pub id: String,
}

impl StereoTuple {
    pub fn new(left: ImageTensor, right: ImageTensor, disparity: ImageTensor, id: impl Into<String>) -> Result<Self> {
        let t = Self {
            left,
            right,
            disparity,
            id: id.into(),
        };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<()> {
        if !self.left.same_dims(&self.right) || !self.left.same_dims(&self.disparity) {
            return Err(Error::dim(format!(
                "{}: left {:?}, right {:?}, disparity {:?} differ",
                self.id,
                self.left.dims(),
                self.right.dims(),
                self.disparity.dims()
            )));
        }
        if self.disparity.channels() != 1 || self.disparity.domain() != ValueDomain::Free {
            return Err(Error::Contract(format!("{}: disparity must be a 1-channel free raster", self.id)));
        }
        if self.left.domain() != ValueDomain::Signed || self.right.domain() != ValueDomain::Signed {
            return Err(Error::Contract(format!("{}: views must be signed images", self.id)));
        }
        if self.disparity.data().iter().any(|&d| d < 0.0) {
            return Err(Error::Contract(format!("{}: negative disparity must be stored as NaN", self.id)));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.left.dims()
    }

    /// Resizes both views bilinearly and the disparity by nearest neighbour,
    /// scaling disparity magnitudes by the width ratio.
    pub fn resized(&self, rows: usize, cols: usize) -> Result<Self> {
        if (rows, cols) == self.dims() {
            return Ok(self.clone());
        }
        Ok(Self {
            left: imageops::resize_bilinear(&self.left, rows, cols)?,
            right: imageops::resize_bilinear(&self.right, rows, cols)?,
            disparity: resize_disparity(&self.disparity, rows, cols)?,
            id: self.id.clone(),
        })
    }
}

/// Nearest-neighbour resize followed by multiplication with `cols' / cols`.
pub fn resize_disparity(disp: &ImageTensor, rows: usize, cols: usize) -> Result<ImageTensor> {
    let r = cols as f32 / disp.cols() as f32;
    imageops::resize_nearest(disp, rows, cols)?.map(ValueDomain::Free, |d| d * r)
}

/// Real-domain image with its identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub image: ImageTensor,
    pub id: String,
}

/// True iff the fraction of pixels whose class is in `building_classes` is at
/// least `threshold`.
pub fn building_filter(labels: &ImageTensor, building_classes: &[u8], threshold: f64) -> bool {
    let plane = labels.plane(0);
    if plane.is_empty() {
        return false;
    }
    let hits = plane
        .iter()
        .filter(|&&v| v >= 0.0 && v <= 255.0 && v.fract() == 0.0 && building_classes.contains(&(v as u8)))
        .count();
    // The slack absorbs rounding in `threshold * n` so exact boundaries pass.
    hits as f64 >= (threshold - 1e-9) * plane.len() as f64
}

/// Uniform crop window `(top, left)` for a `rows x cols` crop.
pub fn crop_origin(dims: (usize, usize), rows: usize, cols: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if rows == 0 || cols == 0 || rows > dims.0 || cols > dims.1 {
        return Err(Error::dim(format!(
            "crop {rows}x{cols} does not fit in {}x{}",
            dims.0, dims.1
        )));
    }
    Ok((rng.random_range(0..=dims.0 - rows), rng.random_range(0..=dims.1 - cols)))
}

/// Applies one random window to both views and the disparity.
pub fn paired_random_crop(tuple: &StereoTuple, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<StereoTuple> {
    let (top, left) = crop_origin(tuple.dims(), rows, cols, rng)?;
    crop_tuple(tuple, top, left, rows, cols)
}

pub fn crop_tuple(t: &StereoTuple, top: usize, left: usize, rows: usize, cols: usize) -> Result<StereoTuple> {
    Ok(StereoTuple {
        left: t.left.crop(top, left, rows, cols)?,
        right: t.right.crop(top, left, rows, cols)?,
        disparity: t.disparity.crop(top, left, rows, cols)?,
        id: t.id.clone(),
    })
}

/// Runs `f` over `items` on up to `workers` threads, preserving order.
fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn keep_entry(m: &DatasetManifest, e: &ManifestEntry) -> Result<bool> {
    match (&e.labels, m.building_classes.is_empty()) {
        (Some(p), false) => Ok(building_filter(&load_labels(p)?, &m.building_classes, m.building_threshold)),
        _ => Ok(true),
    }
}

/// Loads, filters and resizes every synthetic tuple of a manifest.
pub fn load_synthetic(m: &DatasetManifest, workers: usize) -> Result<Vec<StereoTuple>> {
    if m.domain != DatasetDomain::Synthetic {
        return Err(Error::Manifest("expected a synthetic manifest".into()));
    }
    let loaded = par_map(&m.entries, workers, |e| {
        if !keep_entry(m, e)? {
            return Ok(None);
        }
        let disp_path = e
            .disparity
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("{}: synthetic entry without disparity", e.id)))?;
        let t = StereoTuple::new(load_image(&e.images[0])?, load_image(&e.images[1])?, load_disparity(disp_path)?, &e.id)?;
        Ok(Some(match m.resize_to {
            Some((r, c)) => t.resized(r, c)?,
            None => t,
        }))
    })?;
    Ok(loaded.into_iter().flatten().collect())
}

/// Loads, filters and resizes every real image of a manifest.
pub fn load_real(m: &DatasetManifest, workers: usize) -> Result<Vec<RealImage>> {
    if m.domain != DatasetDomain::Real {
        return Err(Error::Manifest("expected a real manifest".into()));
    }
    let loaded = par_map(&m.entries, workers, |e| {
        if !keep_entry(m, e)? {
            return Ok(None);
        }
        let mut image = load_image(&e.images[0])?;
        if let Some((r, c)) = m.resize_to {
            image = imageops::resize_bilinear(&image, r, c)?;
        }
        Ok(Some(RealImage { image, id: e.id.clone() }))
    })?;
    Ok(loaded.into_iter().flatten().collect())
}

/// In-memory training data for both domains.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub synthetic: Vec<StereoTuple>,
    pub real: Vec<RealImage>,
    pub disparity_sign: DisparitySign,
}

impl Dataset {
    pub fn new(synthetic: Vec<StereoTuple>, real: Vec<RealImage>, disparity_sign: DisparitySign) -> Result<Self> {
        if synthetic.is_empty() {
            return Err(Error::Config(vec!["synthetic dataset is empty".into()]));
        }
        if real.is_empty() {
            return Err(Error::Config(vec!["real dataset is empty".into()]));
        }
        Ok(Self {
            synthetic,
            real,
            disparity_sign,
        })
    }

    pub fn load(synthetic: &DatasetManifest, real: &DatasetManifest, workers: usize) -> Result<Self> {
        if synthetic.entries.is_empty() || real.entries.is_empty() {
            return Err(Error::Config(vec!["both manifests must list at least one entry".into()]));
        }
        Self::new(load_synthetic(synthetic, workers)?, load_real(real, workers)?, synthetic.disparity_sign)
    }

    /// Number of batches per epoch: the larger domain is covered exactly once.
    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.synthetic.len().max(self.real.len()).div_ceil(batch_size.max(1))
    }

    /// Deterministic batch plan for one epoch.
    pub fn epoch(&self, batch_size: usize, crop: Option<(usize, usize)>, seed: u64, epoch: u64) -> Result<EpochPlan<'_>> {
        if batch_size == 0 {
            return Err(Error::Config(vec!["batch_size must be positive".into()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let steps = self.steps_per_epoch(batch_size);
        let total = self.synthetic.len().max(self.real.len());
        let syn = draw_order(self.synthetic.len(), total, &mut rng);
        let real = draw_order(self.real.len(), total, &mut rng);
        let mut batches = Vec::with_capacity(steps);
        for s in 0..steps {
            let range = s * batch_size..((s + 1) * batch_size).min(total);
            let mut crops = Vec::new();
            if let Some((r, c)) = crop {
                for &i in &syn[range.clone()] {
                    crops.push(crop_origin(self.synthetic[i].dims(), r, c, &mut rng)?);
                }
                for &i in &real[range.clone()] {
                    crops.push(crop_origin(self.real[i].image.dims(), r, c, &mut rng)?);
                }
            }
            batches.push(BatchPlan {
                synthetic: syn[range.clone()].to_vec(),
                real: real[range].to_vec(),
                crops,
            });
        }
        Ok(EpochPlan {
            data: self,
            crop,
            batches,
        })
    }
}

/// Indices covering `total` draws: whole permutations of `0..n`, concatenated
/// and truncated when the domain is the shorter one.
fn draw_order(n: usize, total: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(total + n);
    while out.len() < total {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        out.extend(p);
    }
    out.truncate(total);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub synthetic: Vec<usize>,
    pub real: Vec<usize>,
    crops: Vec<(usize, usize)>,
}

/// Ordered batch stream of one epoch.
#[derive(Debug, Clone)]
pub struct EpochPlan<'a> {
    data: &'a Dataset,
    crop: Option<(usize, usize)>,
    batches: Vec<BatchPlan>,
}

impl<'a> EpochPlan<'a> {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn plans(&self) -> &[BatchPlan] {
        &self.batches
    }

    /// Materializes batch `i` with its edge maps.
    pub fn batch(&self, i: usize) -> Result<Batch> {
        let p = &self.batches[i];
        let mut crops = p.crops.iter();
        let mut synthetic = Vec::with_capacity(p.synthetic.len());
        for &k in &p.synthetic {
            let t = &self.data.synthetic[k];
            synthetic.push(match self.crop {
                Some((r, c)) => {
                    let &(top, left) = crops.next().expect("one crop per item");
                    crop_tuple(t, top, left, r, c)?
                }
                None => t.clone(),
            });
        }
        let mut real = Vec::with_capacity(p.real.len());
        for &k in &p.real {
            let x = &self.data.real[k];
            real.push(match self.crop {
                Some((r, c)) => {
                    let &(top, left) = crops.next().expect("one crop per item");
                    RealImage {
                        image: x.image.crop(top, left, r, c)?,
                        id: x.id.clone(),
                    }
                }
                None => x.clone(),
            });
        }
        Batch::assemble(synthetic, real)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Batch>> + '_ {
        (0..self.len()).map(move |i| self.batch(i))
    }
}

/// One training step's inputs for both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub synthetic: Vec<StereoTuple>,
    pub real: Vec<ImageTensor>,
    pub real_ids: Vec<String>,
    pub left_edges: Vec<ImageTensor>,
    pub right_edges: Vec<ImageTensor>,
    pub real_edges: Vec<ImageTensor>,
}

impl Batch {
    /// Computes edge maps and checks that everything shares one size.
    pub fn assemble(synthetic: Vec<StereoTuple>, real: Vec<RealImage>) -> Result<Self> {
        if synthetic.is_empty() || real.is_empty() {
            return Err(Error::Config(vec!["a batch needs both domains".into()]));
        }
        let dims = synthetic[0].dims();
        for t in &synthetic {
            t.check()?;
        }
        if let Some(bad) = synthetic
            .iter()
            .map(StereoTuple::dims)
            .chain(real.iter().map(|r| r.image.dims()))
            .find(|&d| d != dims)
        {
            return Err(Error::dim(format!(
                "batch mixes {}x{} and {}x{} images; set a common resize or crop",
                dims.0, dims.1, bad.0, bad.1
            )));
        }
        let edges = |xs: &mut dyn Iterator<Item = &ImageTensor>| xs.map(imageops::sobel_edges).collect::<Result<Vec<_>>>();
        let left_edges = edges(&mut synthetic.iter().map(|t| &t.left))?;
        let right_edges = edges(&mut synthetic.iter().map(|t| &t.right))?;
        let real_edges = edges(&mut real.iter().map(|r| &r.image))?;
        let (real, real_ids) = real.into_iter().map(|r| (r.image, r.id)).unzip();
        Ok(Self {
            synthetic,
            real,
            real_ids,
            left_edges,
            right_edges,
            real_edges,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.synthetic[0].dims()
    }

    pub fn image_count(&self) -> usize {
        2 * self.synthetic.len() + self.real.len()
    }

    pub fn edge_count(&self) -> usize {
        self.left_edges.len() + self.right_edges.len() + self.real_edges.len()
    }

    pub fn synthetic_ids(&self) -> Vec<&str> {
        self.synthetic.iter().map(|t| t.id.as_str()).collect()
    }
}
