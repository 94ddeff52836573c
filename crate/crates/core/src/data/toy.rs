//! Procedural stereo scenes for tests, demos and smoke runs.
//!
//! A scene is a sky gradient over a ground plane with a few box "buildings".
//! The disparity is defined on the right-view grid and the right view is
//! sampled from the left one, so `right(v, u) = left(v, u + d(v, u))` holds
//! wherever the sample stays inside the image.
//! Real-domain images use the same layout with a shifted palette, a gamma
//! curve and sensor noise, which gives the two domains a visible gap.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::image::{DisparitySign, ImageTensor, ValueDomain};
use crate::imageops;

use super::manifest::{DatasetDomain, DatasetManifest, ManifestEntry};
use super::{io, StereoTuple};

struct Building {
    top: usize,
    left: usize,
    right: usize,
    color: [f32; 3],
    disparity: f32,
    window: usize,
}

struct Scene {
    rows: usize,
    cols: usize,
    horizon: usize,
    sky: [f32; 3],
    ground: [f32; 3],
    buildings: Vec<Building>,
    max_ground_disp: f32,
}

impl Scene {
    fn sample(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let horizon = rows * 2 / 5 + rng.random_range(0..=rows / 10);
        let max_d = (cols as f32 / 10.0).max(1.0);
        let n = rng.random_range(2..=4);
        let mut buildings = Vec::with_capacity(n);
        for _ in 0..n {
            let w = rng.random_range(cols / 8..=cols / 3).max(1);
            let left = rng.random_range(0..cols.saturating_sub(w).max(1));
            let g = rng.random_range(0.2..0.8f32);
            buildings.push(Building {
                top: rng.random_range(rows / 8..horizon.max(rows / 8 + 1)),
                left,
                right: left + w,
                color: [g + rng.random_range(-0.15..0.15f32), g, g + rng.random_range(-0.15..0.15f32)],
                disparity: rng.random_range(0.3..1.0f32) * max_d,
                window: rng.random_range(2..=4),
            });
        }
        // Nearer buildings are drawn last.
        buildings.sort_by(|a, b| a.disparity.total_cmp(&b.disparity));
        Self {
            rows,
            cols,
            horizon,
            sky: [0.55, 0.7, rng.random_range(0.85..1.0f32)],
            ground: [0.35, rng.random_range(0.3..0.45f32), 0.3],
            buildings,
            max_ground_disp: max_d * 0.8,
        }
    }

    /// Unit-range color and disparity at pixel `(v, u)` of the left view.
    fn shade(&self, v: usize, u: usize) -> ([f32; 3], f32) {
        for b in self.buildings.iter().rev() {
            if u >= b.left && u < b.right && v >= b.top && v < self.horizon + (self.rows - self.horizon) / 3 {
                let lit = (u - b.left) % (2 * b.window) < b.window && (v - b.top) % (2 * b.window) < b.window;
                let k = if lit { 1.25 } else { 1.0 };
                return (b.color.map(|c| (c * k).min(1.0)), b.disparity);
            }
        }
        if v < self.horizon {
            let t = v as f32 / self.horizon.max(1) as f32;
            (self.sky.map(|c| c * (1.0 - 0.3 * t)), 0.25)
        } else {
            let t = (v - self.horizon) as f32 / (self.rows - self.horizon).max(1) as f32;
            let stripe = if (u / 4 + v / 4) % 2 == 0 { 0.06 } else { 0.0 };
            (self.ground.map(|c| c + stripe), 0.25 + t * self.max_ground_disp)
        }
    }

    fn render(&self) -> (Vec<f32>, Vec<f32>) {
        let n = self.rows * self.cols;
        let mut img = vec![0.0; 3 * n];
        let mut disp = vec![0.0; n];
        for v in 0..self.rows {
            for u in 0..self.cols {
                let (c, d) = self.shade(v, u);
                for k in 0..3 {
                    img[k * n + v * self.cols + u] = c[k];
                }
                disp[v * self.cols + u] = d;
            }
        }
        (img, disp)
    }
}

fn to_signed(unit: Vec<f32>, rows: usize, cols: usize) -> Result<ImageTensor> {
    ImageTensor::from_vec_clamped(unit.into_iter().map(|x| 2.0 * x - 1.0).collect(), 3, rows, cols, ValueDomain::Signed)
}

/// Synthetic stereo tuple with an exactly consistent right view.
pub fn toy_tuple(rows: usize, cols: usize, seed: u64, id: impl Into<String>) -> Result<StereoTuple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::sample(rows, cols, &mut rng);
    let (img, disp) = scene.render();
    let left = to_signed(img, rows, cols)?;
    // The right view is defined through the disparity, so the warp relation
    // is exact by construction; out-of-range samples keep the left pixel.
    let disparity = ImageTensor::new(disp, 1, rows, cols, ValueDomain::Free)?;
    let (warped, mask) = imageops::warp_horizontal(&left, &disparity, DisparitySign::Positive)?;
    let n = rows * cols;
    let mut right = warped.into_data();
    for c in 0..3 {
        for i in 0..n {
            if !mask.data()[i] {
                right[c * n + i] = left.data()[c * n + i];
            }
        }
    }
    let right = ImageTensor::new(right, 3, rows, cols, ValueDomain::Signed)?;
    StereoTuple::new(left, right, disparity, id)
}

/// Real-domain image: same kind of layout, different appearance statistics.
pub fn toy_real(rows: usize, cols: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_4ea1);
    let scene = Scene::sample(rows, cols, &mut rng);
    let (img, _) = scene.render();
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");
    let n = rows * cols;
    let tint = [1.1f32, 0.9, 0.7];
    let out = img
        .iter()
        .enumerate()
        .map(|(i, &x)| (x.powf(0.6) * tint[i / n] + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    to_signed(out, rows, cols)
}

/// Paths of a toy dataset written by [`write_toy_dataset`].
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub synthetic_manifest: PathBuf,
    pub real_manifest: PathBuf,
}

/// Writes PNG views, raw disparities and both manifests under `dir`.
pub fn write_toy_dataset(dir: &Path, synthetic: usize, real: usize, rows: usize, cols: usize, seed: u64) -> Result<ToyDataset> {
    let mut ms = DatasetManifest::new(DatasetDomain::Synthetic);
    for i in 0..synthetic {
        let id = format!("syn_{i:04}");
        let t = toy_tuple(rows, cols, seed.wrapping_add(i as u64), &id)?;
        let l = PathBuf::from(format!("synthetic/left/{id}.png"));
        let r = PathBuf::from(format!("synthetic/right/{id}.png"));
        let d = PathBuf::from(format!("synthetic/disp/{id}.dsp"));
        io::save_image(&dir.join(&l), &t.left)?;
        io::save_image(&dir.join(&r), &t.right)?;
        io::save_disparity(&dir.join(&d), &t.disparity)?;
        ms.entries.push(ManifestEntry {
            id,
            images: vec![l, r],
            disparity: Some(d),
            labels: None,
        });
    }
    let mut mr = DatasetManifest::new(DatasetDomain::Real);
    for i in 0..real {
        let id = format!("real_{i:04}");
        let img = toy_real(rows, cols, seed.wrapping_add(1_000_003 + i as u64))?;
        let p = PathBuf::from(format!("real/{id}.png"));
        io::save_image(&dir.join(&p), &img)?;
        mr.entries.push(ManifestEntry {
            id,
            images: vec![p],
            disparity: None,
            labels: None,
        });
    }
    let out = ToyDataset {
        synthetic_manifest: dir.join("synthetic.tsv"),
        real_manifest: dir.join("real.tsv"),
    };
    ms.save(&out.synthetic_manifest)?;
    mr.save(&out.real_manifest)?;
    Ok(out)
}
