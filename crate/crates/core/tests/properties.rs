mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::Rng;
use stereo_translate::autograd::Tensor;
use stereo_translate::data::{self, Dataset, RealImage, StereoTuple};
use stereo_translate::eval;
use stereo_translate::imageops;
use stereo_translate::losses::{self, LossWeights};
use stereo_translate::model::{self, CodeKind, NetConfig};
use stereo_translate::{DisparitySign, ImageTensor, ValidityMask, ValueDomain};

use common::{random_disparity, random_signed, rng};

fn transpose(img: &ImageTensor) -> ImageTensor {
    let (rows, cols) = img.dims();
    ImageTensor::from_fn(img.channels(), cols, rows, img.domain(), |c, v, u| img.get(c, u, v)).unwrap()
}

fn sign_of(positive: bool) -> DisparitySign {
    if positive {
        DisparitySign::Positive
    } else {
        DisparitySign::Negative
    }
}

fn constant_disparity(d: f32, rows: usize, cols: usize) -> ImageTensor {
    ImageTensor::filled(d, 1, rows, cols, ValueDomain::Free).unwrap()
}

fn disparity_map(values: &[f32]) -> ImageTensor {
    ImageTensor::new(values.to_vec(), 1, 1, values.len(), ValueDomain::Free).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn warp_with_zero_disparity_is_identity(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..20, pos in any::<bool>()) {
        let x = random_signed(&mut rng(seed), 3, rows, cols);
        let (w, m) = imageops::warp_horizontal(&x, &constant_disparity(0.0, rows, cols), sign_of(pos)).unwrap();
        prop_assert_eq!(w.data(), x.data());
        prop_assert_eq!(m.count(), rows * cols);
    }

    #[test]
    fn integer_warp_equals_shift(seed in any::<u64>(), rows in 1usize..10, cols in 2usize..20, d in 0usize..6, pos in any::<bool>()) {
        let x = random_signed(&mut rng(seed), 2, rows, cols);
        let (w, m) = imageops::warp_horizontal(&x, &constant_disparity(d as f32, rows, cols), sign_of(pos)).unwrap();
        for v in 0..rows {
            for u in 0..cols {
                let src = if pos { u as isize + d as isize } else { u as isize - d as isize };
                let inside = src >= 0 && src < cols as isize;
                prop_assert_eq!(m.get(v, u), inside);
                for c in 0..2 {
                    let want = if inside { x.get(c, v, src as usize) } else { 0.0 };
                    prop_assert_eq!(w.get(c, v, u), want);
                }
            }
        }
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_reflexive(seed in any::<u64>(), rows in 3usize..12, cols in 3usize..16) {
        let mut r = rng(seed);
        let a = random_signed(&mut r, 3, rows, cols);
        let b = random_signed(&mut r, 3, rows, cols);
        let m = common::random_mask(&mut r, rows, cols, 0.7);
        let ab = imageops::ssim(&a, &b, &m).unwrap();
        let ba = imageops::ssim(&b, &a, &m).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(imageops::ssim(&a, &a, &m).unwrap(), 1.0);
    }

    #[test]
    fn sobel_commutes_with_transpose(seed in any::<u64>(), rows in 3usize..12, cols in 3usize..16) {
        let x = random_signed(&mut rng(seed), 1, rows, cols);
        let a = transpose(&imageops::sobel_edges(&x).unwrap());
        let b = imageops::sobel_edges(&transpose(&x)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-6, "{} vs {}", p, q);
        }
    }

    #[test]
    fn kernels_are_pure(seed in any::<u64>(), rows in 3usize..10, cols in 3usize..14) {
        let mut r = rng(seed);
        let x = random_signed(&mut r, 3, rows, cols);
        let d = random_disparity(&mut r, rows, cols, 4.0);
        prop_assert_eq!(imageops::sobel_edges(&x).unwrap(), imageops::sobel_edges(&x).unwrap());
        prop_assert_eq!(
            imageops::warp_horizontal(&x, &d, DisparitySign::Positive).unwrap(),
            imageops::warp_horizontal(&x, &d, DisparitySign::Positive).unwrap()
        );
        let m = ValidityMask::full(rows, cols);
        prop_assert_eq!(imageops::ssim(&x, &x, &m).unwrap().to_bits(), imageops::ssim(&x, &x, &m).unwrap().to_bits());
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), rows in 3usize..10, cols in 4usize..14) {
        let mut r = rng(seed);
        let a = random_signed(&mut r, 3, rows, cols);
        let b = random_signed(&mut r, 3, rows, cols);
        prop_assert!(losses::reconstruction_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(losses::cycle_loss(&a, &b).unwrap() >= 0.0);
        let logits = |r: &mut rand_chacha::ChaCha8Rng| {
            Tensor::from_vec([1, 1, rows, cols], (0..rows * cols).map(|_| r.random_range(-20.0f32..20.0)).collect()).unwrap()
        };
        let (real, fake) = (logits(&mut r), logits(&mut r));
        prop_assert!(losses::adversarial_d(&real, &fake) >= 0.0);
        prop_assert!(losses::adversarial_g(&fake) >= 0.0);
        let d = constant_disparity(1.0, rows, cols);
        prop_assert!(losses::warp_loss(&a, &b, &d, DisparitySign::Positive, &LossWeights::default()).unwrap() >= 0.0);
    }

    #[test]
    fn warp_loss_is_positive_off_consistency(seed in any::<u64>(), rows in 3usize..8, cols in 4usize..12) {
        let mut r = rng(seed);
        let left = random_signed(&mut r, 3, rows, cols);
        let d = constant_disparity(1.0, rows, cols);
        let (right, _) = imageops::warp_horizontal(&left, &d, DisparitySign::Positive).unwrap();
        let w = LossWeights::default();
        prop_assert_eq!(losses::warp_loss(&left, &right, &d, DisparitySign::Positive, &w).unwrap(), 0.0);
        // Perturb one valid pixel.
        let mut data = right.data().to_vec();
        data[0] = if data[0] > 0.0 { data[0] - 0.5 } else { data[0] + 0.5 };
        let bent = ImageTensor::new(data, 3, rows, cols, ValueDomain::Signed).unwrap();
        prop_assert!(losses::warp_loss(&left, &bent, &d, DisparitySign::Positive, &w).unwrap() > 0.0);
    }

    #[test]
    fn breakdown_sum_matches_total(parts in prop::array::uniform7(0.0f64..50.0)) {
        let p = losses::GeneratorParts {
            rec_aa: parts[0], rec_bb: parts[1], cyc_aba: parts[2], cyc_bab: parts[3],
            adv_a: parts[4], adv_b: parts[5], warp: parts[6],
        };
        let w = LossWeights::default();
        let total = losses::total_generator_loss(&p, &w).unwrap();
        let b = losses::LossBreakdown {
            rec_aa: p.rec_aa, rec_bb: p.rec_bb, cyc_aba: p.cyc_aba, cyc_bab: p.cyc_bab,
            adv_a: p.adv_a, adv_b: p.adv_b, warp: p.warp, total_g: total, total_d: 0.0,
        };
        prop_assert!((b.weighted_generator_sum(&w) - total).abs() <= 1e-9 * total.max(1.0));
    }

    #[test]
    fn resized_disparity_is_scaled_nearest(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..16, r2 in 1usize..12, c2 in 1usize..24) {
        let d = random_disparity(&mut rng(seed), rows, cols, 8.0);
        let got = data::resize_disparity(&d, r2, c2).unwrap();
        let near = imageops::resize_nearest(&d, r2, c2).unwrap();
        let ratio = c2 as f32 / cols as f32;
        for (g, n) in got.data().iter().zip(near.data()) {
            prop_assert!(g.to_bits() == (n * ratio).to_bits() || (g.is_nan() && n.is_nan()));
        }
    }

    #[test]
    fn accuracy_is_monotone_and_translation_invariant(
        errs in prop::collection::vec(0.0f32..8.0, 1..40),
        base in prop::collection::vec(0.0f32..50.0, 40),
        shift in 0.0f32..20.0,
    ) {
        let gt = disparity_map(&base[..errs.len()]);
        let pred = disparity_map(&errs.iter().zip(&base).map(|(e, b)| b + e).collect::<Vec<_>>());
        let m = eval::mask_defined(&gt);
        let a1 = eval::px_accuracy(&pred, &gt, &m, 1.0).unwrap();
        let a3 = eval::px_accuracy(&pred, &gt, &m, 3.0).unwrap();
        prop_assert!(0.0 <= a1 && a1 <= a3 && a3 <= 100.0);
        // Whole-pixel shifts; values stay below 128 so rounding is bounded.
        let shift = shift.round();
        let gt2 = gt.map(ValueDomain::Free, |v| v + shift).unwrap();
        let pred2 = pred.map(ValueDomain::Free, |v| v + shift).unwrap();
        let m2 = eval::mask_defined(&gt2);
        let e1 = eval::abs_errors(&pred, &gt, &m).unwrap();
        let e2 = eval::abs_errors(&pred2, &gt2, &m2).unwrap();
        for (x, y) in e1.iter().zip(&e2) {
            prop_assert!((x - y).abs() <= 3e-5);
        }
    }

    #[test]
    fn mad_of_constant_errors_is_that_error(k in 0u8..30, n in 1usize..30) {
        let gt = disparity_map(&vec![5.0; n]);
        let pred = disparity_map(&vec![5.0 + k as f32; n]);
        prop_assert_eq!(eval::mad(&pred, &gt, &eval::mask_defined(&gt)).unwrap(), k as f64);
    }

    #[test]
    fn pooled_metrics_equal_concatenated_population(
        a in prop::collection::vec(0u8..10, 1..20),
        b in prop::collection::vec(10u8..30, 1..20),
    ) {
        let item = |errs: &[u8]| {
            let gt = disparity_map(&vec![0.0; errs.len()]);
            let pred = disparity_map(&errs.iter().map(|&e| e as f32).collect::<Vec<_>>());
            (pred, gt)
        };
        let (pa, ga) = item(&a);
        let (pb, gb) = item(&b);
        let preds = BTreeMap::from([("a".to_string(), pa), ("b".to_string(), pb)]);
        let gts = BTreeMap::from([("a".to_string(), ga), ("b".to_string(), gb)]);
        let report = eval::evaluate(&preds, &gts).unwrap();
        let all: Vec<u8> = a.iter().chain(&b).copied().collect();
        let (pc, gc) = item(&all);
        let mc = eval::mask_defined(&gc);
        prop_assert_eq!(report.mad, eval::mad(&pc, &gc, &mc).unwrap());
        prop_assert_eq!(report.acc_3px, eval::px_accuracy(&pc, &gc, &mc, 3.0).unwrap());
        prop_assert_eq!(report.acc_1px, eval::px_accuracy(&pc, &gc, &mc, 1.0).unwrap());
        prop_assert_eq!(report.valid_pixel_count, all.len());
    }
}

fn tiny_net() -> NetConfig {
    NetConfig {
        base_channels: 4,
        downsample_count: 2,
        residual_blocks: 1,
        input_channels: 3,
        discriminator_layers: 2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fuse_is_elementwise_addition_and_decode_keeps_dims(seed in any::<u64>(), k in 2usize..4, l in 2usize..5) {
        let net = tiny_net();
        let state = model::init_model(&net, seed).unwrap();
        let (rows, cols) = (4 * k, 4 * l);
        let x = random_signed(&mut rng(seed), 3, rows, cols);
        let edges = imageops::sobel_edges(&x).unwrap();
        let c = model::encode(&state, &x, CodeKind::Content).unwrap();
        let e = model::encode(&state, &model::edge_input(&edges, 3).unwrap(), CodeKind::Edge).unwrap();
        let ce = model::fuse(&c, &e).unwrap();
        for ((s, p), q) in ce.tensor().data().iter().zip(c.tensor().data()).zip(e.tensor().data()) {
            prop_assert_eq!(*s, p + q);
        }
        let out = model::decode(&state, &ce, &state.style_a).unwrap();
        prop_assert_eq!(out.dims(), (rows, cols));
        prop_assert_eq!(out.channels(), 3);
    }

    #[test]
    fn epochs_cover_the_larger_domain_with_consistent_batches(
        seed in any::<u64>(), n_syn in 1usize..7, n_real in 1usize..7, bs in 1usize..4, epoch in 0u64..3,
    ) {
        let syn: Vec<StereoTuple> = (0..n_syn)
            .map(|i| data::toy::toy_tuple(8, 12, seed.wrapping_add(i as u64), format!("s{i}")).unwrap())
            .collect();
        let real: Vec<RealImage> = (0..n_real)
            .map(|i| RealImage { image: data::toy::toy_real(8, 12, seed ^ i as u64).unwrap(), id: format!("r{i}") })
            .collect();
        let ds = Dataset::new(syn, real, DisparitySign::Positive).unwrap();
        let plan = ds.epoch(bs, Some((4, 8)), seed, epoch).unwrap();
        prop_assert_eq!(plan.len(), n_syn.max(n_real).div_ceil(bs));
        let mut syn_ids = BTreeSet::new();
        let mut real_ids = BTreeSet::new();
        for b in plan.iter() {
            let b = b.unwrap();
            prop_assert_eq!(b.dims(), (4, 8));
            prop_assert_eq!(b.edge_count(), b.image_count());
            for t in &b.synthetic {
                prop_assert_eq!(t.left.dims(), t.disparity.dims());
                prop_assert_eq!(t.right.dims(), t.disparity.dims());
            }
            syn_ids.extend(b.synthetic_ids().into_iter().map(String::from));
            real_ids.extend(b.real_ids.iter().cloned());
        }
        if n_syn >= n_real {
            prop_assert_eq!(syn_ids.len(), n_syn);
        }
        if n_real >= n_syn {
            prop_assert_eq!(real_ids.len(), n_real);
        }
        // Same seed and epoch, same plan.
        let again = ds.epoch(bs, Some((4, 8)), seed, epoch).unwrap();
        prop_assert_eq!(again.plans(), plan.plans());
    }
}
