//! Disparity comparison metrics: median absolute error and k-pixel accuracy
//! over ground-truth-defined pixels, pooled across a test set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValidityMask};

/// True where the ground truth is finite and non-negative.
pub fn mask_defined(gt: &ImageTensor) -> ValidityMask {
    let data = gt.plane(0).iter().map(|&v| v.is_finite() && v >= 0.0).collect();
    ValidityMask::new(data, gt.rows(), gt.cols()).expect("plane dims")
}

fn check(pred: &ImageTensor, gt: &ImageTensor, mask: &ValidityMask) -> Result<()> {
    if pred.channels() != 1 || gt.channels() != 1 {
        return Err(Error::dim("disparity maps must be single-channel"));
    }
    if !pred.same_dims(gt) || mask.rows() != gt.rows() || mask.cols() != gt.cols() {
        return Err(Error::dim(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.rows(),
            pred.cols(),
            gt.rows(),
            gt.cols()
        )));
    }
    Ok(())
}

/// Absolute errors at the valid pixels, in raster order.
pub fn abs_errors(pred: &ImageTensor, gt: &ImageTensor, mask: &ValidityMask) -> Result<Vec<f64>> {
    check(pred, gt, mask)?;
    Ok(pred
        .plane(0)
        .iter()
        .zip(gt.plane(0))
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| (p as f64 - g as f64).abs())
        .collect())
}

/// Median of a non-empty sample; the mean of the central pair for even sizes.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySupport("median"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Percentage of errors at most `tau`.
pub fn accuracy_of(errors: &[f64], tau: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptySupport("accuracy"));
    }
    let hits = errors.iter().filter(|&&e| e <= tau).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Median absolute disparity error over valid pixels.
pub fn mad(pred: &ImageTensor, gt: &ImageTensor, mask: &ValidityMask) -> Result<f64> {
    let e = abs_errors(pred, gt, mask)?;
    if e.is_empty() {
        return Err(Error::EmptySupport("evaluation mask"));
    }
    median(&e)
}

/// Percentage of valid pixels with `|pred - gt| <= tau`.
pub fn px_accuracy(pred: &ImageTensor, gt: &ImageTensor, mask: &ValidityMask, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("accuracy threshold must be positive, got {tau}")));
    }
    let e = abs_errors(pred, gt, mask)?;
    if e.is_empty() {
        return Err(Error::EmptySupport("evaluation mask"));
    }
    accuracy_of(&e, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemMetrics {
    pub id: String,
    pub mad: f64,
    pub acc_3px: f64,
    pub acc_1px: f64,
    pub valid_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mad: f64,
    pub acc_3px: f64,
    pub acc_1px: f64,
    pub valid_pixel_count: usize,
    pub items: Vec<ItemMetrics>,
}

impl EvalReport {
    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10} {:>10}", "id", "MAD", "3px-acc%", "1px-acc%", "valid");
        for it in &self.items {
            let _ = writeln!(
                s,
                "{:<24} {:>10.4} {:>10.3} {:>10.3} {:>10}",
                it.id, it.mad, it.acc_3px, it.acc_1px, it.valid_pixels
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:>10.4} {:>10.3} {:>10.3} {:>10}",
            "POOLED", self.mad, self.acc_3px, self.acc_1px, self.valid_pixel_count
        );
        s
    }

    /// One JSON record per item followed by a pooled record.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for it in &self.items {
            let mut v = serde_json::to_value(it).expect("plain struct");
            v["kind"] = "item".into();
            s.push_str(&v.to_string());
            s.push('\n');
        }
        let pooled = serde_json::json!({
            "kind": "pooled",
            "mad": self.mad,
            "acc_3px": self.acc_3px,
            "acc_1px": self.acc_1px,
            "valid_pixel_count": self.valid_pixel_count,
        });
        s.push_str(&pooled.to_string());
        s.push('\n');
        s
    }
}

/// Pixel-pooled metrics over matching prediction / ground-truth sets.
pub fn evaluate(
    preds: &BTreeMap<String, ImageTensor>,
    gts: &BTreeMap<String, ImageTensor>,
) -> Result<EvalReport> {
    let missing: Vec<&String> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
    let extra: Vec<&String> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Manifest(format!(
            "prediction ids do not match ground truth (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    if gts.is_empty() {
        return Err(Error::Manifest("no items to evaluate".into()));
    }
    let mut pooled = Vec::new();
    let mut items = Vec::with_capacity(gts.len());
    for (id, gt) in gts {
        let e = abs_errors(&preds[id], gt, &mask_defined(gt))?;
        if e.is_empty() {
            return Err(Error::EmptySupport("evaluation mask"));
        }
        items.push(ItemMetrics {
            id: id.clone(),
            mad: median(&e)?,
            acc_3px: accuracy_of(&e, 3.0)?,
            acc_1px: accuracy_of(&e, 1.0)?,
            valid_pixels: e.len(),
        });
        pooled.extend(e);
    }
    Ok(EvalReport {
        mad: median(&pooled)?,
        acc_3px: accuracy_of(&pooled, 3.0)?,
        acc_1px: accuracy_of(&pooled, 1.0)?,
        valid_pixel_count: pooled.len(),
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueDomain;

    fn map(values: &[f32], rows: usize, cols: usize) -> ImageTensor {
        ImageTensor::new(values.to_vec(), 1, rows, cols, ValueDomain::Free).unwrap()
    }

    #[test]
    fn defined_mask_counts() {
        assert!(mask_defined(&map(&[f32::NAN; 6], 2, 3)).is_empty());
        let mut v = vec![1.0f32; 12];
        v[0] = f32::NAN;
        v[5] = f32::NAN;
        v[11] = f32::NAN;
        assert_eq!(mask_defined(&map(&v, 3, 4)).count(), 9);
        let m = mask_defined(&map(&[-1.0, 0.0, 2.0], 1, 3));
        assert_eq!(m.data(), &[false, true, true]);
    }

    #[test]
    fn fixture_errors() {
        let gt = map(&[10.0, 10.0, 10.0, 10.0], 2, 2);
        let pred = map(&[10.0, 11.0, 8.0, 14.0], 2, 2);
        let m = mask_defined(&gt);
        assert_eq!(mad(&pred, &gt, &m).unwrap(), 1.5);
        assert_eq!(px_accuracy(&pred, &gt, &m, 3.0).unwrap(), 75.0);
        assert_eq!(px_accuracy(&pred, &gt, &m, 1.0).unwrap(), 50.0);
        assert_eq!(mad(&gt, &gt, &m).unwrap(), 0.0);
        assert_eq!(px_accuracy(&gt, &gt, &m, 0.5).unwrap(), 100.0);
        assert!(px_accuracy(&pred, &gt, &m, 0.0).is_err());
        let none = ValidityMask::new(vec![false; 4], 2, 2).unwrap();
        assert!(matches!(mad(&pred, &gt, &none), Err(Error::EmptySupport(_))));
    }

    #[test]
    fn median_is_robust_to_outliers() {
        let mut e = vec![1.0; 99];
        e.push(1000.0);
        assert_eq!(median(&e).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_id_mismatch() {
        let mut a = BTreeMap::new();
        a.insert("x".to_string(), map(&[1.0], 1, 1));
        let mut b = BTreeMap::new();
        b.insert("y".to_string(), map(&[1.0], 1, 1));
        assert!(matches!(evaluate(&a, &b), Err(Error::Manifest(_))));
    }
}
