//! Independent f64 scalar-loop oracles and the check suites built on them.
//!
//! Nothing here calls the kernel under test to produce an expected value.
//! Shared by the core integration tests and the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereo_translate::autograd::{Graph, Tensor};
use stereo_translate::imageops;
use stereo_translate::losses::{self, LossWeights, WarpTarget};
use stereo_translate::{DisparitySign, ImageTensor, ValidityMask, ValueDomain};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_signed(rng: &mut impl Rng, channels: usize, rows: usize, cols: usize) -> ImageTensor {
    ImageTensor::from_fn(channels, rows, cols, ValueDomain::Signed, |_, _, _| rng.random_range(-1.0f32..=1.0)).unwrap()
}

/// Non-negative disparities on a 1/64 grid, so sample positions are exact
/// in f32; about one pixel in ten is undefined.
pub fn random_disparity(rng: &mut impl Rng, rows: usize, cols: usize, max: f32) -> ImageTensor {
    let steps = (max * 64.0) as u32;
    ImageTensor::from_fn(1, rows, cols, ValueDomain::Free, |_, _, _| {
        if rng.random_bool(0.1) {
            f32::NAN
        } else {
            rng.random_range(0..=steps) as f32 / 64.0
        }
    })
    .unwrap()
}

pub fn random_mask(rng: &mut impl Rng, rows: usize, cols: usize, p: f64) -> ValidityMask {
    let mut data: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(p)).collect();
    data[0] = true;
    ValidityMask::new(data, rows, cols).unwrap()
}

fn f64s(img: &ImageTensor) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

// ---- oracles ----

/// Luma, replicate-padded Sobel magnitude, then division by the maximum.
pub fn sobel_oracle(img: &ImageTensor) -> Vec<f64> {
    let (rows, cols) = img.dims();
    let x = f64s(img);
    let n = rows * cols;
    let gray: Vec<f64> = if img.channels() == 3 {
        (0..n).map(|i| 0.299 * x[i] + 0.587 * x[n + i] + 0.114 * x[2 * n + i]).collect()
    } else {
        x
    };
    let px = |v: i64, u: i64| {
        let v = v.clamp(0, rows as i64 - 1) as usize;
        let u = u.clamp(0, cols as i64 - 1) as usize;
        gray[v * cols + u]
    };
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut mag = Vec::with_capacity(n);
    for v in 0..rows as i64 {
        for u in 0..cols as i64 {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let p = px(v + i as i64 - 1, u + j as i64 - 1);
                    gx += kx[i][j] * p;
                    gy += ky[i][j] * p;
                }
            }
            mag.push((gx * gx + gy * gy).sqrt());
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter().map(|m| m / max).collect()
    } else {
        vec![0.0; n]
    }
}

/// Linear interpolation along rows at `u + sign * d`; `None` when the
/// position leaves `[0, cols - 1]` or `d` is undefined.
pub fn warp_oracle(src: &ImageTensor, disp: &ImageTensor, sign: f64) -> (Vec<f64>, Vec<bool>) {
    warp_sampled(&f64s(src), src.channels(), disp, sign)
}

/// Sliding 11x11 Gaussian window over the valid in-image neighbours of each
/// valid pixel, evaluated directly in two dimensions.
pub fn ssim_oracle(a: &[f64], b: &[f64], channels: usize, rows: usize, cols: usize, mask: &[bool]) -> f64 {
    let g = |k: i64| (-((k * k) as f64) / (2.0 * 1.5 * 1.5)).exp();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = rows * cols;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let pa = &a[c * n..(c + 1) * n];
        let pb = &b[c * n..(c + 1) * n];
        for v in 0..rows as i64 {
            for u in 0..cols as i64 {
                if !mask[v as usize * cols + u as usize] {
                    continue;
                }
                let (mut w, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5i64 {
                    for dx in -5..=5i64 {
                        let (y, x) = (v + dy, u + dx);
                        if y < 0 || x < 0 || y >= rows as i64 || x >= cols as i64 {
                            continue;
                        }
                        let i = y as usize * cols + x as usize;
                        if !mask[i] {
                            continue;
                        }
                        let k = g(dy) * g(dx);
                        w += k;
                        sa += k * pa[i];
                        sb += k * pb[i];
                        saa += k * pa[i] * pa[i];
                        sbb += k * pb[i] * pb[i];
                        sab += k * pa[i] * pb[i];
                    }
                }
                let (ma, mb) = (sa / w, sb / w);
                let va = saa / w - ma * ma;
                let vb = sbb / w - mb * mb;
                let cov = sab / w - ma * mb;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// SSIM of signed images after the `[0, 1]` remap.
pub fn ssim_signed_oracle(a: &ImageTensor, b: &ImageTensor, mask: &[bool]) -> f64 {
    let remap = |x: &ImageTensor| x.data().iter().map(|&v| (v as f64 + 1.0) / 2.0).collect::<Vec<_>>();
    ssim_oracle(&remap(a), &remap(b), a.channels(), a.rows(), a.cols(), mask)
}

pub fn l1_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

/// Masked L1 over all channels of one image.
pub fn masked_l1_oracle(a: &[f64], b: &[f64], channels: usize, mask: &[bool]) -> f64 {
    let n = mask.len();
    let (mut s, mut k) = (0.0, 0usize);
    for c in 0..channels {
        for i in 0..n {
            if mask[i] {
                s += (a[c * n + i] - b[c * n + i]).abs();
                k += 1;
            }
        }
    }
    s / k as f64
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-log sigmoid(r)` averaged over real patches plus `-log(1 - sigmoid(f))`
/// averaged over fake patches.
pub fn adv_d_oracle(real: &[f64], fake: &[f64]) -> f64 {
    let r: f64 = real.iter().map(|&x| log1p_exp(-x)).sum::<f64>() / real.len() as f64;
    let f: f64 = fake.iter().map(|&x| log1p_exp(x)).sum::<f64>() / fake.len() as f64;
    r + f
}

pub fn adv_g_oracle(fake: &[f64]) -> f64 {
    fake.iter().map(|&x| log1p_exp(-x)).sum::<f64>() / fake.len() as f64
}

/// `w1 * L1 + w2 * (1 - SSIM)` between `right` and the warped `left` over
/// the warp mask intersected with defined disparity.
pub fn warp_loss_oracle(left: &[f64], right: &[f64], channels: usize, disp: &ImageTensor, sign: f64, w1: f64, w2: f64) -> f64 {
    let (rows, cols) = disp.dims();
    let warped = warp_sampled(left, channels, disp, sign);
    let mask: Vec<bool> = warped
        .1
        .iter()
        .zip(disp.data())
        .map(|(&m, &d)| m && d.is_finite() && d >= 0.0)
        .collect();
    let l1 = masked_l1_oracle(right, &warped.0, channels, &mask);
    let remap = |x: &[f64]| x.iter().map(|&v| (v + 1.0) / 2.0).collect::<Vec<_>>();
    let s = ssim_oracle(&remap(right), &remap(&warped.0), channels, rows, cols, &mask);
    w1 * l1 + w2 * (1.0 - s)
}

fn warp_sampled(src: &[f64], channels: usize, disp: &ImageTensor, sign: f64) -> (Vec<f64>, Vec<bool>) {
    let (rows, cols) = disp.dims();
    let mut out = vec![0.0; src.len()];
    let mut valid = vec![false; rows * cols];
    for v in 0..rows {
        for u in 0..cols {
            let pos = u as f64 + sign * disp.get(0, v, u) as f64;
            if !(pos >= 0.0 && pos <= (cols - 1) as f64) {
                continue;
            }
            valid[v * cols + u] = true;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(cols - 1);
            let t = pos - lo as f64;
            for c in 0..channels {
                let base = (c * rows + v) * cols;
                out[base + u] = (1.0 - t) * src[base + lo] + t * src[base + hi];
            }
        }
    }
    (out, valid)
}

// ---- suites ----

fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_dims(rng: &mut impl Rng) -> (usize, usize) {
    (rng.random_range(3..=16), rng.random_range(3..=32))
}

/// Sobel, warp, SSIM and every loss reduction against the oracles on
/// `cases` random inputs no larger than 16x32.
pub fn kernel_suite(cases: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let (mut e_sobel, mut e_warp, mut e_ssim, mut e_ssim_graph) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut e_l1, mut e_adv, mut e_warp_loss) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..cases {
        let (rows, cols) = random_dims(&mut r);
        let a = random_signed(&mut r, 3, rows, cols);
        let b = random_signed(&mut r, 3, rows, cols);

        let edges = imageops::sobel_edges(&a).map_err(|e| e.to_string())?;
        e_sobel = e_sobel.max(max_abs_diff(f64s(&edges), sobel_oracle(&a)));

        let disp = random_disparity(&mut r, rows, cols, cols as f32 / 3.0);
        let sign = if case % 2 == 0 { DisparitySign::Positive } else { DisparitySign::Negative };
        let (warped, mask) = imageops::warp_horizontal(&a, &disp, sign).map_err(|e| e.to_string())?;
        let (want, valid) = warp_oracle(&a, &disp, sign.factor() as f64);
        if mask.data() != valid.as_slice() {
            return Err(format!("warp mask differs from the oracle in case {case}"));
        }
        e_warp = e_warp.max(max_abs_diff(f64s(&warped), want));

        let m = random_mask(&mut r, rows, cols, 0.8);
        let s = imageops::ssim(&a, &b, &m).map_err(|e| e.to_string())?;
        let want = ssim_signed_oracle(&a, &b, m.data());
        e_ssim = e_ssim.max((s - want).abs());
        let sg = losses::ssim_value(&a, &b, &m).map_err(|e| e.to_string())?;
        e_ssim_graph = e_ssim_graph.max((sg - want).abs());

        let rec = losses::reconstruction_loss(&a, &b).map_err(|e| e.to_string())?;
        e_l1 = e_l1.max((rec - l1_oracle(&f64s(&a), &f64s(&b))).abs());
        let cyc = losses::cycle_loss(&b, &a).map_err(|e| e.to_string())?;
        e_l1 = e_l1.max((cyc - l1_oracle(&f64s(&b), &f64s(&a))).abs());

        let n = rows * cols;
        let real: Vec<f32> = (0..n).map(|_| r.random_range(-6.0f32..6.0)).collect();
        let fake: Vec<f32> = (0..n).map(|_| r.random_range(-6.0f32..6.0)).collect();
        let rt = Tensor::from_vec([1, 1, rows, cols], real.clone()).unwrap();
        let ft = Tensor::from_vec([1, 1, rows, cols], fake.clone()).unwrap();
        let rf: Vec<f64> = real.iter().map(|&v| v as f64).collect();
        let ff: Vec<f64> = fake.iter().map(|&v| v as f64).collect();
        e_adv = e_adv.max((losses::adversarial_d(&rt, &ft) - adv_d_oracle(&rf, &ff)).abs());
        e_adv = e_adv.max((losses::adversarial_g(&ft) - adv_g_oracle(&ff)).abs());

        let w = LossWeights::default();
        if let Ok(got) = losses::warp_loss(&a, &b, &disp, sign, &w) {
            let want = warp_loss_oracle(&f64s(&a), &f64s(&b), 3, &disp, sign.factor() as f64, 1.0, 1.0);
            e_warp_loss = e_warp_loss.max((got - want).abs());
        }
    }
    let report = format!(
        "sobel {e_sobel:.1e}, warp {e_warp:.1e}, ssim {e_ssim:.1e} (graph {e_ssim_graph:.1e}), l1 {e_l1:.1e}, adversarial {e_adv:.1e}, warp loss {e_warp_loss:.1e}"
    );
    let ok = e_sobel <= 1e-5
        && e_warp <= 1e-6
        && e_ssim <= 1e-5
        && e_ssim_graph <= 1e-5
        && e_l1 <= 1e-7
        && e_adv <= 1e-6
        && e_warp_loss <= 1e-5;
    if ok {
        Ok(report)
    } else {
        Err(report)
    }
}

/// Relative 2-norm error between an analytic and a finite-difference gradient.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Values in `[-0.9, 0.9]` whose difference from `other` stays clear of the
/// L1 kink by `gap`, so central differences are smooth.
fn away_from(rng: &mut impl Rng, other: &[f32], gap: f32) -> Vec<f32> {
    other
        .iter()
        .map(|&o| loop {
            let v = rng.random_range(-0.9f32..0.9);
            if (v - o).abs() > gap {
                break v;
            }
        })
        .collect()
}

const GRAD_H: f64 = 1e-4;

/// Analytic gradients of every loss on 6x8 inputs against central
/// differences of the oracles. Returns the worst relative error per loss.
pub fn gradient_suite(seed: u64) -> Check {
    let mut r = rng(seed);
    let (rows, cols) = (6, 8);
    let shape = [2, 3, rows, cols];
    let n: usize = shape.iter().product();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, err: f64, tol: f64| {
        ok &= err <= tol;
        lines.push(format!("{name} {err:.1e}"));
    };

    // Reconstruction and cycle share the L1 reduction; cycle is checked on
    // the second argument as well.
    for (name, wrt_second) in [("reconstruction", true), ("cycle", false)] {
        let x: Vec<f32> = (0..n).map(|_| r.random_range(-0.9f32..0.9)).collect();
        let y = away_from(&mut r, &x, 1e-2);
        let mut g = Graph::new();
        let (xv, yv) = if wrt_second {
            (g.constant(Tensor::from_vec(shape, x.clone()).unwrap()), g.variable(Tensor::from_vec(shape, y.clone()).unwrap()))
        } else {
            (g.variable(Tensor::from_vec(shape, x.clone()).unwrap()), g.constant(Tensor::from_vec(shape, y.clone()).unwrap()))
        };
        let l = losses::l1_graph(&mut g, xv, yv).unwrap();
        let grads = g.backward(l).unwrap();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let y64: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let (analytic, numeric) = if wrt_second {
            (to_f64(grads.get(yv).unwrap()), numeric_grad(&y64, GRAD_H, |p| l1_oracle(&x64, p)))
        } else {
            (to_f64(grads.get(xv).unwrap()), numeric_grad(&x64, GRAD_H, |p| l1_oracle(p, &y64)))
        };
        record(name, rel_error(&analytic, &numeric), 1e-3);
    }

    // Adversarial, both players, on patch logits.
    let lshape = [2, 1, rows, cols];
    let ln = rows * cols * 2;
    let real: Vec<f32> = (0..ln).map(|_| r.random_range(-4.0f32..4.0)).collect();
    let fake: Vec<f32> = (0..ln).map(|_| r.random_range(-4.0f32..4.0)).collect();
    let real64: Vec<f64> = real.iter().map(|&v| v as f64).collect();
    let fake64: Vec<f64> = fake.iter().map(|&v| v as f64).collect();
    let mut g = Graph::new();
    let rv = g.variable(Tensor::from_vec(lshape, real.clone()).unwrap());
    let fv = g.variable(Tensor::from_vec(lshape, fake.clone()).unwrap());
    let d = losses::adversarial_d_graph(&mut g, rv, fv);
    let grads = g.backward(d).unwrap();
    let e_real = rel_error(&to_f64(grads.get(rv).unwrap()), &numeric_grad(&real64, GRAD_H, |p| adv_d_oracle(p, &fake64)));
    let e_fake = rel_error(&to_f64(grads.get(fv).unwrap()), &numeric_grad(&fake64, GRAD_H, |p| adv_d_oracle(&real64, p)));
    record("adversarial_d", e_real.max(e_fake), 1e-3);
    let mut g = Graph::new();
    let fv = g.variable(Tensor::from_vec(lshape, fake.clone()).unwrap());
    let l = losses::adversarial_g_graph(&mut g, fv);
    let grads = g.backward(l).unwrap();
    record(
        "adversarial_g",
        rel_error(&to_f64(grads.get(fv).unwrap()), &numeric_grad(&fake64, GRAD_H, adv_g_oracle)),
        1e-3,
    );

    // Warp loss: L1 and SSIM parts separately, with respect to both views.
    let disp = random_disparity(&mut r, rows, cols, 3.0);
    let sign = DisparitySign::Positive;
    let left = random_signed(&mut r, 3, rows, cols);
    let (warped, _) = imageops::warp_horizontal(&left, &disp, sign).unwrap();
    let right_data = away_from(&mut r, warped.data(), 1e-2);
    let right = ImageTensor::new(right_data, 3, rows, cols, ValueDomain::Signed).unwrap();
    let target = WarpTarget::new(&[&disp], sign).unwrap();
    let l64 = f64s(&left);
    let r64 = f64s(&right);
    for (name, w1, w2, tol) in [("warp_l1", 1.0f32, 0.0f32, 1e-3), ("warp_ssim", 0.0, 1.0, 1e-2)] {
        let w = LossWeights {
            warp_l1: w1,
            warp_ssim: w2,
            ..LossWeights::default()
        };
        let mut g = Graph::new();
        let lv = g.variable(Tensor::from_image(&left));
        let rv = g.variable(Tensor::from_image(&right));
        let terms = losses::warp_loss_graph(&mut g, lv, rv, &target, &w).unwrap();
        let grads = g.backward(terms.total).unwrap();
        let (w1, w2) = (w1 as f64, w2 as f64);
        let e_l = rel_error(
            &to_f64(grads.get(lv).unwrap()),
            &numeric_grad(&l64, GRAD_H, |p| warp_loss_oracle(p, &r64, 3, &disp, 1.0, w1, w2)),
        );
        let e_r = rel_error(
            &to_f64(grads.get(rv).unwrap()),
            &numeric_grad(&r64, GRAD_H, |p| warp_loss_oracle(&l64, p, 3, &disp, 1.0, w1, w2)),
        );
        record(name, e_l.max(e_r), tol);
    }

    let report = lines.join(", ");
    if ok {
        Ok(report)
    } else {
        Err(report)
    }
}

/// `right = warp(left, d)` makes the warp loss exactly zero.
pub fn warp_zero_suite(fixtures: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let w = LossWeights::default();
    for i in 0..fixtures {
        let (rows, cols) = random_dims(&mut r);
        let left = random_signed(&mut r, 3, rows, cols);
        let disp = random_disparity(&mut r, rows, cols, cols as f32 / 4.0);
        let sign = if i % 2 == 0 { DisparitySign::Positive } else { DisparitySign::Negative };
        let (right, _) = imageops::warp_horizontal(&left, &disp, sign).map_err(|e| e.to_string())?;
        match losses::warp_loss(&left, &right, &disp, sign, &w) {
            Ok(0.0) => {}
            Ok(v) => return Err(format!("fixture {i} ({rows}x{cols}): warp loss {v:e}")),
            // An all-invalid support is a legitimate empty case, not a pass.
            Err(e) => return Err(format!("fixture {i}: {e}")),
        }
    }
    Ok(format!("{fixtures} fixtures exactly zero"))
}

/// Hand-derived metric fixtures.
pub fn metric_fixtures() -> Check {
    use stereo_translate::eval;
    let img = |v: &[f32]| ImageTensor::new(v.to_vec(), 1, 1, v.len(), ValueDomain::Free).unwrap();
    let gt = img(&[10.0, 10.0, 10.0, 10.0]);
    let pred = img(&[10.0, 11.0, 12.0, 14.0]);
    let mask = eval::mask_defined(&gt);
    let checks = [
        ("mad", eval::mad(&pred, &gt, &mask).map_err(|e| e.to_string())?, 1.5),
        ("3px", eval::px_accuracy(&pred, &gt, &mask, 3.0).map_err(|e| e.to_string())?, 75.0),
        ("1px", eval::px_accuracy(&pred, &gt, &mask, 1.0).map_err(|e| e.to_string())?, 50.0),
        ("median even", eval::median(&[0.0, 1.0, 2.0, 4.0]).map_err(|e| e.to_string())?, 1.5),
        ("median outlier", {
            let mut v = vec![1.0; 99];
            v.push(1000.0);
            eval::median(&v).map_err(|e| e.to_string())?
        }, 1.0),
        ("mask count", {
            let mut v = vec![1.0f32; 12];
            v[2] = f32::NAN;
            v[7] = f32::NAN;
            v[11] = f32::NAN;
            eval::mask_defined(&img(&v)).count() as f64
        }, 9.0),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(n, got, want)| format!("{n}: {got} != {want}"))
        .collect();
    if bad.is_empty() {
        Ok(format!("{} fixtures exact", checks.len()))
    } else {
        Err(bad.join("; "))
    }
}
