//! Training objectives: reconstruction, cycle, adversarial and stereo warp
//! losses, plus their weighted composition.
//!
//! Each loss exists in a graph form (used by training, differentiable) and a
//! value form that evaluates the same graph on constants.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, MaskedFilter, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::mask_defined;
use crate::image::{DisparitySign, ImageTensor, ValidityMask, ValueDomain};
use crate::imageops::{self, WarpPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// L1 part of the warp loss.
    pub warp_l1: f32,
    /// `1 - SSIM` part of the warp loss.
    pub warp_ssim: f32,
    pub reconstruction: f32,
    pub cycle: f32,
    pub adversarial: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            warp_l1: 1.0,
            warp_ssim: 1.0,
            reconstruction: 0.8,
            cycle: 10.0,
            adversarial: 10.0,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        [
            ("train.weights.warp_l1", self.warp_l1),
            ("train.weights.warp_ssim", self.warp_ssim),
            ("train.weights.reconstruction", self.reconstruction),
            ("train.weights.cycle", self.cycle),
            ("train.weights.adversarial", self.adversarial),
        ]
        .into_iter()
        .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
        .map(|(n, v)| format!("{n} must be finite and >= 0, got {v}"))
        .collect()
    }
}

/// Per-term loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_aa: f64,
    pub rec_bb: f64,
    pub cyc_aba: f64,
    pub cyc_bab: f64,
    pub adv_a: f64,
    pub adv_b: f64,
    pub warp: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBreakdown {
    pub fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("rec_aa", self.rec_aa),
            ("rec_bb", self.rec_bb),
            ("cyc_aba", self.cyc_aba),
            ("cyc_bab", self.cyc_bab),
            ("adv_a", self.adv_a),
            ("adv_b", self.adv_b),
            ("warp", self.warp),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }

    /// Fails with the first non-finite field.
    pub fn check_finite(&self) -> Result<()> {
        match self.fields().iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::Divergence {
                component: (*name).to_string(),
            }),
            None => Ok(()),
        }
    }

    /// The generator objective recomputed from the components.
    pub fn weighted_generator_sum(&self, w: &LossWeights) -> f64 {
        w.reconstruction as f64 * (self.rec_aa + self.rec_bb)
            + w.cycle as f64 * (self.cyc_aba + self.cyc_bab)
            + w.adversarial as f64 * (self.adv_a + self.adv_b)
            + self.warp
    }
}

/// Generator-side loss components before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorParts {
    pub rec_aa: f64,
    pub rec_bb: f64,
    pub cyc_aba: f64,
    pub cyc_bab: f64,
    pub adv_a: f64,
    pub adv_b: f64,
    /// Already includes its internal L1/SSIM weights.
    pub warp: f64,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            component: name.to_string(),
        })
    }
}

pub fn total_generator_loss(parts: &GeneratorParts, w: &LossWeights) -> Result<f64> {
    let p = parts;
    let rec = finite("rec_aa", p.rec_aa)? + finite("rec_bb", p.rec_bb)?;
    let cyc = finite("cyc_aba", p.cyc_aba)? + finite("cyc_bab", p.cyc_bab)?;
    let adv = finite("adv_a", p.adv_a)? + finite("adv_b", p.adv_b)?;
    let warp = finite("warp", p.warp)?;
    Ok(w.reconstruction as f64 * rec + w.cycle as f64 * cyc + w.adversarial as f64 * adv + warp)
}

pub fn total_discriminator_loss(adv_d_a: f64, adv_d_b: f64) -> Result<f64> {
    Ok(finite("adv_d_a", adv_d_a)? + finite("adv_d_b", adv_d_b)?)
}

// ---- graph forms ----

/// Mean absolute difference over all elements.
pub fn l1_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    g.mean_abs_diff(x, y, None)
}

/// `mean(-log sigmoid(real)) + mean(-log(1 - sigmoid(fake)))`.
pub fn adversarial_d_graph(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = g.mean_softplus(real, -1.0);
    let f = g.mean_softplus(fake, 1.0);
    g.add(r, f).expect("scalars")
}

/// Non-saturating generator loss `mean(-log sigmoid(fake))`.
pub fn adversarial_g_graph(g: &mut Graph, fake: Var) -> Var {
    g.mean_softplus(fake, -1.0)
}

/// Mean masked SSIM of two signed batches (see [`imageops::ssim`]).
pub fn ssim_graph(g: &mut Graph, a: Var, b: Var, masks: Rc<Vec<ValidityMask>>) -> Result<Var> {
    let kernel = Rc::new(imageops::gaussian_kernel(imageops::SSIM_WINDOW, imageops::SSIM_SIGMA));
    let filters: Rc<Vec<MaskedFilter>> = Rc::new(
        masks
            .iter()
            .map(|m| MaskedFilter::new(m.clone(), kernel.clone()))
            .collect(),
    );
    let c1 = imageops::ssim_c1() as f32;
    let c2 = imageops::ssim_c2() as f32;
    let to_unit = |g: &mut Graph, x: Var| {
        let h = g.mul_scalar(x, 0.5);
        g.add_scalar(h, 0.5)
    };
    let a = to_unit(g, a);
    let b = to_unit(g, b);
    let mu_a = g.masked_filter(a, filters.clone())?;
    let mu_b = g.masked_filter(b, filters.clone())?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.masked_filter(aa, filters.clone())?;
    let e_bb = g.masked_filter(bb, filters.clone())?;
    let e_ab = g.masked_filter(ab, filters)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let s_aa = g.sub(e_aa, mu_aa)?;
    let s_bb = g.sub(e_bb, mu_bb)?;
    let s_ab = g.sub(e_ab, mu_ab)?;
    let n1 = g.mul_scalar(mu_ab, 2.0);
    let n1 = g.add_scalar(n1, c1);
    let n2 = g.mul_scalar(s_ab, 2.0);
    let n2 = g.add_scalar(n2, c2);
    let d1 = g.add(mu_aa, mu_bb)?;
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(s_aa, s_bb)?;
    let d2 = g.add_scalar(d2, c2);
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    g.masked_mean(map, masks)
}

/// Warp sampling plans and loss support for a batch of ground-truth
/// disparities.
#[derive(Debug, Clone)]
pub struct WarpTarget {
    plans: Rc<Vec<WarpPlan>>,
    masks: Rc<Vec<ValidityMask>>,
}

impl WarpTarget {
    pub fn new(disparities: &[&ImageTensor], sign: DisparitySign) -> Result<Self> {
        let mut plans = Vec::with_capacity(disparities.len());
        let mut masks = Vec::with_capacity(disparities.len());
        for d in disparities {
            let plan = WarpPlan::new(d, sign)?;
            masks.push(plan.mask().and(&mask_defined(d))?);
            plans.push(plan);
        }
        Ok(Self {
            plans: Rc::new(plans),
            masks: Rc::new(masks),
        })
    }

    pub fn masks(&self) -> &[ValidityMask] {
        &self.masks
    }

    pub fn support(&self) -> usize {
        self.masks.iter().map(ValidityMask::count).sum()
    }
}

/// Graph nodes of one warp-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct WarpTerms {
    pub total: Var,
    pub l1: Var,
    pub ssim: Var,
}

/// `w1 * L1(right, W(left)) + w2 * (1 - SSIM(right, W(left)))` on the support
/// of `target`.
pub fn warp_loss_graph(
    g: &mut Graph,
    left_ab: Var,
    right_ab: Var,
    target: &WarpTarget,
    weights: &LossWeights,
) -> Result<WarpTerms> {
    if g.shape(left_ab) != g.shape(right_ab) {
        return Err(Error::dim("translated views differ in shape"));
    }
    if target.support() == 0 {
        return Err(Error::EmptySupport("warp loss"));
    }
    let warped = g.warp(left_ab, target.plans.clone())?;
    let l1 = g.mean_abs_diff(right_ab, warped, Some(target.masks.clone()))?;
    let ssim = ssim_graph(g, right_ab, warped, target.masks.clone())?;
    let dissim = g.mul_scalar(ssim, -1.0);
    let dissim = g.add_scalar(dissim, 1.0);
    let a = g.mul_scalar(l1, weights.warp_l1);
    let b = g.mul_scalar(dissim, weights.warp_ssim);
    let total = g.add(a, b)?;
    Ok(WarpTerms { total, l1, ssim })
}

/// Weighted generator objective on the graph. `warp` is already weighted.
pub fn total_generator_graph(
    g: &mut Graph,
    rec: (Var, Var),
    cyc: (Var, Var),
    adv: (Var, Var),
    warp: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let r = g.add(rec.0, rec.1)?;
    let r = g.mul_scalar(r, w.reconstruction);
    let c = g.add(cyc.0, cyc.1)?;
    let c = g.mul_scalar(c, w.cycle);
    let a = g.add(adv.0, adv.1)?;
    let a = g.mul_scalar(a, w.adversarial);
    let mut t = g.add(r, c)?;
    t = g.add(t, a)?;
    if let Some(wp) = warp {
        t = g.add(t, wp)?;
    }
    Ok(t)
}

// ---- value forms ----

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.channels() != b.channels() || !a.same_dims(b) {
        return Err(Error::dim(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.rows(),
            a.cols(),
            b.channels(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Mean absolute difference between an image and its reconstruction.
pub fn reconstruction_loss(x: &ImageTensor, x_recon: &ImageTensor) -> Result<f64> {
    same_shape(x, x_recon)?;
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_image(x));
    let b = g.constant(Tensor::from_image(x_recon));
    let l = l1_graph(&mut g, a, b)?;
    Ok(g.value(l).item() as f64)
}

/// Same reduction as [`reconstruction_loss`], applied to the a->b->a path.
pub fn cycle_loss(x: &ImageTensor, x_cycled: &ImageTensor) -> Result<f64> {
    reconstruction_loss(x, x_cycled)
}

pub fn adversarial_d(real_logits: &Tensor, fake_logits: &Tensor) -> f64 {
    let mut g = Graph::new();
    let r = g.constant(real_logits.clone());
    let f = g.constant(fake_logits.clone());
    let l = adversarial_d_graph(&mut g, r, f);
    g.value(l).item() as f64
}

pub fn adversarial_g(fake_logits: &Tensor) -> f64 {
    let mut g = Graph::new();
    let f = g.constant(fake_logits.clone());
    let l = adversarial_g_graph(&mut g, f);
    g.value(l).item() as f64
}

/// Stereo warp-consistency loss between translated views.
pub fn warp_loss(
    left_ab: &ImageTensor,
    right_ab: &ImageTensor,
    disparity: &ImageTensor,
    sign: DisparitySign,
    weights: &LossWeights,
) -> Result<f64> {
    same_shape(left_ab, right_ab)?;
    if !left_ab.same_dims(disparity) {
        return Err(Error::dim("disparity does not match the translated views"));
    }
    let target = WarpTarget::new(&[disparity], sign)?;
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_image(left_ab));
    let r = g.constant(Tensor::from_image(right_ab));
    let terms = warp_loss_graph(&mut g, l, r, &target, weights)?;
    Ok(g.value(terms.total).item() as f64)
}

/// Masked SSIM through the graph path, for cross-checking [`imageops::ssim`].
pub fn ssim_value(a: &ImageTensor, b: &ImageTensor, mask: &ValidityMask) -> Result<f64> {
    same_shape(a, b)?;
    if a.domain() != ValueDomain::Signed || b.domain() != ValueDomain::Signed {
        return Err(Error::Contract("graph ssim expects signed images".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_image(a));
    let y = g.constant(Tensor::from_image(b));
    let s = ssim_graph(&mut g, x, y, Rc::new(vec![mask.clone()]))?;
    Ok(g.value(s).item() as f64)
}
