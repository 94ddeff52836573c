//! Pure image kernels: grayscale, Sobel edges, horizontal disparity warping,
//! masked windowed SSIM, bilinear resizing and byte normalization.
//!
//! Everything here works on [`ImageTensor`] values and allocates its output.
//! The warp sampling plan and the masked Gaussian blur are shared with the
//! differentiable graph in [`crate::autograd`].

use crate::error::{Error, Result};
use crate::image::{DisparitySign, ImageTensor, ValidityMask, ValueDomain};

pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of the remapped `[0, 1]` intensities.
pub const SSIM_RANGE: f64 = 1.0;

pub fn ssim_c1() -> f64 {
    (SSIM_K1 * SSIM_RANGE).powi(2)
}

pub fn ssim_c2() -> f64 {
    (SSIM_K2 * SSIM_RANGE).powi(2)
}

pub fn to_grayscale(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(Error::dim(format!(
            "grayscale needs 3 channels, got {}",
            img.channels()
        )));
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b)
        .collect();
    ImageTensor::from_vec_clamped(data, 1, img.rows(), img.cols(), img.domain())
}

/// Unnormalized Sobel gradient magnitude with replicate-border padding.
pub fn sobel_magnitude(plane: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let at = |v: isize, u: isize| -> f32 {
        let v = v.clamp(0, rows as isize - 1) as usize;
        let u = u.clamp(0, cols as isize - 1) as usize;
        plane[v * cols + u]
    };
    let mut out = Vec::with_capacity(rows * cols);
    for v in 0..rows as isize {
        for u in 0..cols as isize {
            let mut gx = 0.0f32;
            let mut gy = 0.0f32;
            for (k, w) in [(-1isize, 1.0f32), (0, 2.0), (1, 1.0)] {
                gx += w * (at(v + k, u + 1) - at(v + k, u - 1));
                gy += w * (at(v + 1, u + k) - at(v - 1, u + k));
            }
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Sobel edge map rescaled per image so that its maximum is 1.
///
/// Three-channel input is grayscaled first. A constant image yields zeros.
pub fn sobel_edges(img: &ImageTensor) -> Result<ImageTensor> {
    if img.rows() < 3 || img.cols() < 3 {
        return Err(Error::dim(format!(
            "sobel needs at least 3x3, got {}x{}",
            img.rows(),
            img.cols()
        )));
    }
    let gray = match img.channels() {
        1 => img.clone(),
        3 => to_grayscale(img)?,
        n => return Err(Error::dim(format!("sobel needs 1 or 3 channels, got {n}"))),
    };
    let mut mag = sobel_magnitude(gray.data(), img.rows(), img.cols());
    let max = mag.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|m| *m = (*m / max).min(1.0));
    } else {
        mag.iter_mut().for_each(|m| *m = 0.0);
    }
    ImageTensor::new(mag, 1, img.rows(), img.cols(), ValueDomain::Unit)
}

/// Bilinear taps for one output pixel: `(left column, right column, right weight)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpTap {
    pub x0: u32,
    pub x1: u32,
    pub frac: f32,
}

/// Per-pixel bilinear sampling positions for a horizontal warp.
///
/// The plan depends only on the disparity field, so it is computed once and
/// reused for every channel (and for the backward pass).
#[derive(Debug, Clone, PartialEq)]
pub struct WarpPlan {
    rows: usize,
    cols: usize,
    taps: Vec<Option<WarpTap>>,
}

impl WarpPlan {
    pub fn new(disp: &ImageTensor, sign: DisparitySign) -> Result<Self> {
        if disp.channels() != 1 {
            return Err(Error::dim("disparity must be single-channel"));
        }
        let (rows, cols) = disp.dims();
        let s = sign.factor();
        let last = (cols - 1) as f32;
        let mut taps = Vec::with_capacity(rows * cols);
        for v in 0..rows {
            for u in 0..cols {
                let d = disp.get(0, v, u);
                let x = u as f32 + s * d;
                // NaN fails both comparisons and is treated as out of bounds.
                if !(x >= 0.0 && x <= last) {
                    taps.push(None);
                    continue;
                }
                let x0 = x.floor();
                let frac = x - x0;
                let x0 = x0 as u32;
                let x1 = if frac > 0.0 { x0 + 1 } else { x0 };
                taps.push(Some(WarpTap { x0, x1, frac }));
            }
        }
        Ok(Self { rows, cols, taps })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn taps(&self) -> &[Option<WarpTap>] {
        &self.taps
    }

    pub fn mask(&self) -> ValidityMask {
        ValidityMask::new(self.taps.iter().map(Option::is_some).collect(), self.rows, self.cols)
            .expect("plan dims are consistent")
    }

    /// Samples one `rows x cols` plane.
    pub fn apply_plane(&self, src: &[f32], out: &mut [f32]) {
        for (i, tap) in self.taps.iter().enumerate() {
            let row = (i / self.cols) * self.cols;
            out[i] = match tap {
                None => 0.0,
                Some(t) if t.frac == 0.0 => src[row + t.x0 as usize],
                Some(t) => {
                    (1.0 - t.frac) * src[row + t.x0 as usize] + t.frac * src[row + t.x1 as usize]
                }
            };
        }
    }

    /// Adjoint of [`WarpPlan::apply_plane`]: scatters `grad_out` into `grad_src`.
    pub fn scatter_plane(&self, grad_out: &[f32], grad_src: &mut [f32]) {
        for (i, tap) in self.taps.iter().enumerate() {
            let Some(t) = tap else { continue };
            let row = (i / self.cols) * self.cols;
            let g = grad_out[i];
            if t.frac == 0.0 {
                grad_src[row + t.x0 as usize] += g;
            } else {
                grad_src[row + t.x0 as usize] += (1.0 - t.frac) * g;
                grad_src[row + t.x1 as usize] += t.frac * g;
            }
        }
    }
}

/// Resamples `src` along rows at `u + sign * disp(v, u)`.
///
/// Out-of-range samples (and undefined disparities) produce 0 and a `false`
/// mask entry.
pub fn warp_horizontal(
    src: &ImageTensor,
    disp: &ImageTensor,
    sign: DisparitySign,
) -> Result<(ImageTensor, ValidityMask)> {
    if !src.same_dims(disp) {
        return Err(Error::dim(format!(
            "warp source {}x{} vs disparity {}x{}",
            src.rows(),
            src.cols(),
            disp.rows(),
            disp.cols()
        )));
    }
    let plan = WarpPlan::new(disp, sign)?;
    let n = src.rows() * src.cols();
    let mut out = vec![0.0f32; src.channels() * n];
    for c in 0..src.channels() {
        plan.apply_plane(src.plane(c), &mut out[c * n..(c + 1) * n]);
    }
    let img = ImageTensor::from_vec_clamped(out, src.channels(), src.rows(), src.cols(), src.domain())?;
    Ok((img, plan.mask()))
}

/// Normalized 1-D Gaussian used for the separable SSIM window.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Zero-padded "same" separable convolution of one plane.
pub fn separable_blur(plane: &[f64], rows: usize, cols: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f64; rows * cols];
    for v in 0..rows {
        let line = &plane[v * cols..(v + 1) * cols];
        for u in 0..cols as isize {
            let lo = (u - r).max(0);
            let hi = (u + r).min(cols as isize - 1);
            let mut acc = 0.0;
            for x in lo..=hi {
                acc += kernel[(x - u + r) as usize] * line[x as usize];
            }
            tmp[v * cols + u as usize] = acc;
        }
    }
    let mut out = vec![0.0f64; rows * cols];
    for v in 0..rows as isize {
        let lo = (v - r).max(0);
        let hi = (v + r).min(rows as isize - 1);
        for u in 0..cols {
            let mut acc = 0.0;
            for y in lo..=hi {
                acc += kernel[(y - v + r) as usize] * tmp[y as usize * cols + u];
            }
            out[v as usize * cols + u] = acc;
        }
    }
    out
}

/// Gaussian window mass that falls on valid pixels, per pixel.
pub fn mask_support(mask: &ValidityMask, kernel: &[f64]) -> Vec<f64> {
    let m: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    separable_blur(&m, mask.rows(), mask.cols(), kernel)
}

/// Local weighted mean over valid pixels: `blur(m * x) / blur(m)`.
pub fn masked_mean_filter(
    plane: &[f64],
    mask: &ValidityMask,
    support: &[f64],
    kernel: &[f64],
) -> Vec<f64> {
    let masked: Vec<f64> = plane
        .iter()
        .zip(mask.data())
        .map(|(&x, &m)| if m { x } else { 0.0 })
        .collect();
    let num = separable_blur(&masked, mask.rows(), mask.cols(), kernel);
    num.iter()
        .zip(support)
        .map(|(&n, &d)| if d > 0.0 { n / d } else { 0.0 })
        .collect()
}

fn ssim_remap(img: &ImageTensor) -> Vec<f64> {
    match img.domain() {
        ValueDomain::Signed => img.data().iter().map(|&v| (v as f64 + 1.0) * 0.5).collect(),
        _ => img.data().iter().map(|&v| v as f64).collect(),
    }
}

/// Mean structural similarity over the valid pixels of `mask`.
///
/// Signed images are remapped to `[0, 1]` first. Local statistics use an
/// 11x11 Gaussian window (sigma 1.5) restricted to valid pixels: masked-out
/// and off-image pixels carry zero weight and the remaining weights are
/// renormalized. The per-pixel index is averaged over valid pixels and
/// channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, mask: &ValidityMask) -> Result<f64> {
    if a.channels() != b.channels() || !a.same_dims(b) {
        return Err(Error::dim("ssim inputs differ in shape"));
    }
    if mask.rows() != a.rows() || mask.cols() != a.cols() {
        return Err(Error::dim("ssim mask does not match image dims"));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptySupport("ssim mask"));
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let support = mask_support(mask, &kernel);
    let (c1, c2) = (ssim_c1(), ssim_c2());
    let (xa, xb) = (ssim_remap(a), ssim_remap(b));
    let n = a.rows() * a.cols();
    let mut total = 0.0f64;
    for c in 0..a.channels() {
        let pa = &xa[c * n..(c + 1) * n];
        let pb = &xb[c * n..(c + 1) * n];
        let filt = |p: &[f64]| masked_mean_filter(p, mask, &support, &kernel);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filt(pa);
        let mu_b = filt(pb);
        let e_aa = filt(&prod(pa, pa));
        let e_bb = filt(&prod(pb, pb));
        let e_ab = filt(&prod(pa, pb));
        for i in 0..n {
            if !mask.data()[i] {
                continue;
            }
            let s_aa = e_aa[i] - mu_a[i] * mu_a[i];
            let s_bb = e_bb[i] - mu_b[i] * mu_b[i];
            let s_ab = e_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * s_ab + c2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (s_aa + s_bb + c2);
            total += num / den;
        }
    }
    Ok((total / (count * a.channels()) as f64).clamp(-1.0, 1.0))
}

fn bilinear_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let x0 = (src.floor() as usize).min(in_len - 1);
            let x1 = (x0 + 1).min(in_len - 1);
            let f = if x0 == x1 { 0.0 } else { (src - x0 as f64) as f32 };
            (x0, x1, f)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(img: &ImageTensor, rows: usize, cols: usize) -> Result<ImageTensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::dim("resize target must be at least 1x1"));
    }
    if (rows, cols) == img.dims() {
        return Ok(img.clone());
    }
    let ys = bilinear_axis(rows, img.rows());
    let xs = bilinear_axis(cols, img.cols());
    let mut out = Vec::with_capacity(img.channels() * rows * cols);
    for c in 0..img.channels() {
        let p = img.plane(c);
        let w = img.cols();
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = (1.0 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1];
                let bot = (1.0 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1];
                out.push((1.0 - fy) * top + fy * bot);
            }
        }
    }
    ImageTensor::from_vec_clamped(out, img.channels(), rows, cols, img.domain())
}

/// Nearest-neighbour resampling (source index `floor(dst * in / out)`).
pub fn resize_nearest(img: &ImageTensor, rows: usize, cols: usize) -> Result<ImageTensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::dim("resize target must be at least 1x1"));
    }
    let pick = |d: usize, out_len: usize, in_len: usize| ((d * in_len) / out_len).min(in_len - 1);
    let mut out = Vec::with_capacity(img.channels() * rows * cols);
    for c in 0..img.channels() {
        let p = img.plane(c);
        for v in 0..rows {
            let sv = pick(v, rows, img.rows());
            for u in 0..cols {
                out.push(p[sv * img.cols() + pick(u, cols, img.cols())]);
            }
        }
    }
    ImageTensor::new(out, img.channels(), rows, cols, img.domain())
}

/// Maps bytes to the signed domain: `b -> 2 * b / 255 - 1`.
pub fn normalize(bytes: &[u8], channels: usize, rows: usize, cols: usize) -> Result<ImageTensor> {
    let data = bytes.iter().map(|&b| normalize_byte(b)).collect();
    ImageTensor::new(data, channels, rows, cols, ValueDomain::Signed)
}

pub fn normalize_byte(b: u8) -> f32 {
    (2.0 * (b as f64 / 255.0) - 1.0) as f32
}

/// Inverse of [`normalize`], rounding half away from zero and clamping.
pub fn denormalize(img: &ImageTensor) -> Vec<u8> {
    img.data().iter().map(|&v| denormalize_value(v)).collect()
}

pub fn denormalize_value(v: f32) -> u8 {
    ((v as f64 + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Unit-domain raster to bytes, `round(255 * v)`.
pub fn unit_to_bytes(img: &ImageTensor) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(r: f32, g: f32, b: f32) -> ImageTensor {
        ImageTensor::from_fn(3, 4, 5, ValueDomain::Unit, |c, _, _| [r, g, b][c]).unwrap()
    }

    #[test]
    fn grayscale_fixtures() {
        let white = to_grayscale(&rgb(1.0, 1.0, 1.0)).unwrap();
        assert!(white.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let red = to_grayscale(&rgb(1.0, 0.0, 0.0)).unwrap();
        assert!(red.data().iter().all(|&v| v == 0.299));
        let black = to_grayscale(&rgb(0.0, 0.0, 0.0)).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        let two = ImageTensor::filled(0.0, 2, 3, 3, ValueDomain::Unit).unwrap();
        assert!(matches!(to_grayscale(&two), Err(Error::Dimension(_))));
    }

    #[test]
    fn sobel_constant_and_small() {
        let flat = ImageTensor::filled(0.3, 1, 6, 7, ValueDomain::Unit).unwrap();
        assert!(sobel_edges(&flat).unwrap().data().iter().all(|&v| v == 0.0));
        let tiny = ImageTensor::filled(0.3, 1, 2, 7, ValueDomain::Unit).unwrap();
        assert!(matches!(sobel_edges(&tiny), Err(Error::Dimension(_))));
    }

    #[test]
    fn sobel_step_band() {
        let k = 4;
        let img = ImageTensor::from_fn(1, 6, 9, ValueDomain::Unit, |_, _, u| if u >= k { 1.0 } else { 0.0 }).unwrap();
        let e = sobel_edges(&img).unwrap();
        for v in 0..6 {
            for u in 0..9 {
                let expect = if u == k - 1 || u == k { 1.0 } else { 0.0 };
                assert_eq!(e.get(0, v, u), expect, "({v},{u})");
            }
        }
    }

    #[test]
    fn sobel_ramp_is_flat_inside() {
        let img = ImageTensor::from_fn(1, 5, 8, ValueDomain::Unit, |_, _, u| u as f32 * 0.1).unwrap();
        let e = sobel_edges(&img).unwrap();
        for v in 0..5 {
            for u in 1..7 {
                assert!((e.get(0, v, u) - 1.0).abs() < 1e-6);
            }
            // replicate border halves the central difference
            assert!((e.get(0, v, 0) - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_identity_and_unit_shift() {
        let src = ImageTensor::from_fn(2, 3, 6, ValueDomain::Free, |c, v, u| (c * 50 + v * 7 + u) as f32).unwrap();
        let zero = ImageTensor::filled(0.0, 1, 3, 6, ValueDomain::Free).unwrap();
        let (out, mask) = warp_horizontal(&src, &zero, DisparitySign::Positive).unwrap();
        assert_eq!(out, src);
        assert_eq!(mask.count(), 18);

        let one = ImageTensor::filled(1.0, 1, 3, 6, ValueDomain::Free).unwrap();
        let (out, mask) = warp_horizontal(&src, &one, DisparitySign::Positive).unwrap();
        for c in 0..2 {
            for v in 0..3 {
                for u in 0..5 {
                    assert_eq!(out.get(c, v, u), src.get(c, v, u + 1));
                }
                assert_eq!(out.get(c, v, 5), 0.0);
                assert!(!mask.get(v, 5));
            }
        }
    }

    #[test]
    fn warp_half_pixel_on_ramp() {
        let src = ImageTensor::from_fn(1, 2, 8, ValueDomain::Free, |_, _, u| 0.25 * u as f32).unwrap();
        let half = ImageTensor::filled(0.5, 1, 2, 8, ValueDomain::Free).unwrap();
        let (out, mask) = warp_horizontal(&src, &half, DisparitySign::Positive).unwrap();
        for u in 0..7 {
            assert!((out.get(0, 0, u) - 0.25 * (u as f32 + 0.5)).abs() < 1e-6);
            assert!(mask.get(0, u));
        }
        assert!(!mask.get(0, 7));
    }

    #[test]
    fn warp_nan_disparity_is_invalid() {
        let src = ImageTensor::filled(0.5, 1, 2, 4, ValueDomain::Signed).unwrap();
        let mut d = vec![0.0; 8];
        d[1] = f32::NAN;
        let disp = ImageTensor::new(d, 1, 2, 4, ValueDomain::Free).unwrap();
        let (out, mask) = warp_horizontal(&src, &disp, DisparitySign::Negative).unwrap();
        assert!(!mask.get(0, 1));
        assert_eq!(out.get(0, 0, 1), 0.0);
        let bad = ImageTensor::filled(0.0, 1, 3, 4, ValueDomain::Free).unwrap();
        assert!(warp_horizontal(&src, &bad, DisparitySign::Positive).is_err());
    }

    #[test]
    fn ssim_self_and_empty_mask() {
        let x = ImageTensor::from_fn(3, 12, 14, ValueDomain::Signed, |c, v, u| ((c + v * 3 + u * 5) % 7) as f32 / 7.0 - 0.5).unwrap();
        let full = ValidityMask::full(12, 14);
        assert!((ssim(&x, &x, &full).unwrap() - 1.0).abs() < 1e-6);
        let empty = ValidityMask::new(vec![false; 12 * 14], 12, 14).unwrap();
        assert!(matches!(ssim(&x, &x, &empty), Err(Error::EmptySupport(_))));
    }

    #[test]
    fn ssim_checkerboard_inverse_is_negative() {
        let x = ImageTensor::from_fn(1, 11, 16, ValueDomain::Unit, |_, v, u| ((v + u) % 2) as f32).unwrap();
        let y = x.map(ValueDomain::Unit, |v| 1.0 - v).unwrap();
        assert!(ssim(&x, &y, &ValidityMask::full(11, 16)).unwrap() < 0.0);
    }

    #[test]
    fn resize_fixtures() {
        let img = ImageTensor::from_fn(2, 3, 5, ValueDomain::Signed, |c, v, u| (c as f32 - 0.5) * (v * 5 + u) as f32 / 20.0).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 5).unwrap(), img);
        let k = ImageTensor::filled(0.37, 1, 3, 5, ValueDomain::Signed).unwrap();
        let up = resize_bilinear(&k, 7, 2).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
        let ramp = ImageTensor::new(vec![0.0, 1.0, 0.0, 1.0], 1, 2, 2, ValueDomain::Unit).unwrap();
        let up = resize_bilinear(&ramp, 4, 4).unwrap();
        for v in 0..4 {
            assert_eq!(
                [0, 1, 2, 3].map(|u| up.get(0, v, u)),
                [0.0, 0.25, 0.75, 1.0]
            );
        }
        assert!(resize_bilinear(&img, 0, 4).is_err());
    }

    #[test]
    fn normalize_endpoints_and_round_trip() {
        assert_eq!(normalize_byte(0), -1.0);
        assert_eq!(normalize_byte(255), 1.0);
        assert!((normalize_byte(128) - 0.003_921_569).abs() < 1e-7);
        let all: Vec<u8> = (0..=255).collect();
        let t = normalize(&all, 1, 16, 16).unwrap();
        assert_eq!(denormalize(&t), all);
    }
}
