mod common;

use std::sync::OnceLock;

use candle_core::{Device, Tensor};
use common::*;
use proptest::prelude::*;
use sht_core::data::{degrade, load_image_dataset, write_image_dataset, LoadOptions};
use sht_core::heatmap::{decode_heatmaps, render_heatmaps};
use sht_core::image::{ImageRole, ImageTensor, LandmarkSet};
use sht_core::losses::gradient_map;
use sht_core::metrics::{ced_auc, failure_rate, psnr_y, ssim_y};
use sht_core::trainer::{TrainData, Trainer};
use sht_core::ShtConfig;

fn image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let t = uniform_tensor(seed, &[h, w, 3], 0.0, 1.0);
    let v: Vec<f32> = t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|&x| x as f32).collect();
    ImageTensor::new(v, h, w, 3, ImageRole::Hr).unwrap()
}

struct Shared {
    trainer: Trainer,
    data: TrainData,
}

fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| Shared { trainer: tiny_trainer(3), data: TrainData::labeled(toy_faces(6, 21)) })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: CASES, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fublock1_gate_bound(seed in any::<u64>()) {
        fublock1_bound(seed)?;
    }

    #[test]
    fn zero_initialized_branches_are_identities(seed in any::<u64>()) {
        zero_init_identity(seed)?;
    }

    #[test]
    fn render_then_decode(points in proptest::collection::vec(point_on_grid(), 1..6), sigma in 1.0f64..3.0) {
        render_decode_round_trip(&points, sigma)?;
    }

    #[test]
    fn nme_translation_and_scale(
        (pred, gt) in landmark_pair(),
        dx in -500.0f64..500.0,
        dy in -500.0f64..500.0,
        scale in 0.01f64..100.0,
    ) {
        nme_invariance(&pred, &gt, [dx, dy], scale)?;
    }

    #[test]
    fn pair_swap_leaves_joint_loss_unchanged(step in 0usize..100_000) {
        let s = shared();
        pair_swap_symmetry(&s.trainer, &s.data, step)?;
    }

    #[test]
    fn equal_seeds_reproduce(seed in any::<u64>()) {
        seed_reproducibility(seed, &shared().data)?;
    }

    #[test]
    fn rendering_is_translation_equivariant(x in 10usize..50, y in 10usize..50, dx in -8i64..8, dy in -8i64..8) {
        let at = |px: f64, py: f64| render_heatmaps(&LandmarkSet::new(vec![[px, py]]).unwrap(), (64, 64), 1.5).unwrap();
        let a = at(x as f64, y as f64);
        let b = at(x as f64 + dx as f64, y as f64 + dy as f64);
        for yy in 0..64i64 {
            for xx in 0..64i64 {
                let (sx, sy) = (xx + dx, yy + dy);
                if (0..64).contains(&sx) && (0..64).contains(&sy) {
                    prop_assert_eq!(a.map(0)[(yy * 64 + xx) as usize], b.map(0)[(sy * 64 + sx) as usize]);
                }
            }
        }
    }

    #[test]
    fn decoded_peaks_are_map_values(points in proptest::collection::vec(point_on_grid(), 1..5)) {
        let stack = render_heatmaps(&LandmarkSet::new(points).unwrap(), (64, 64), 1.5).unwrap();
        let d = decode_heatmaps(&stack).unwrap();
        for (i, v) in d.peak_values.iter().enumerate() {
            let max = stack.map(i).iter().cloned().fold(f32::MIN, f32::max);
            prop_assert_eq!(*v, max);
        }
    }

    #[test]
    fn auc_never_drops_when_errors_shrink(
        errors in proptest::collection::vec(0.0f64..0.3, 1..40),
        shrink in proptest::collection::vec(0.0f64..1.0, 40),
        threshold in 0.01f64..0.3,
    ) {
        let better: Vec<f64> = errors.iter().zip(&shrink).map(|(e, s)| e * s).collect();
        prop_assert!(ced_auc(&better, threshold).unwrap() >= ced_auc(&errors, threshold).unwrap() - 1e-12);
        let fr = failure_rate(&errors, threshold).unwrap();
        let ok = errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64;
        prop_assert_eq!(fr + ok, 1.0);
    }

    #[test]
    fn image_metrics_are_symmetric(seed in any::<u64>()) {
        let (a, b) = (image(seed, 16, 16), image(seed ^ 9, 16, 16));
        prop_assert_eq!(psnr_y(&a, &b).unwrap(), psnr_y(&b, &a).unwrap());
        prop_assert!((ssim_y(&a, &b).unwrap() - ssim_y(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim_y(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_map_ignores_offsets(seed in any::<u64>(), offset in -0.4f64..0.4) {
        let a = image(seed, 8, 8);
        let shifted: Vec<f32> = a.data().iter().map(|v| ((*v as f64) * 0.2 + 0.4 + offset) as f32).collect();
        let base: Vec<f32> = a.data().iter().map(|v| ((*v as f64) * 0.2 + 0.4) as f32).collect();
        let g1 = gradient_map(&ImageTensor::new(base, 8, 8, 3, ImageRole::Hr).unwrap()).unwrap();
        let g2 = gradient_map(&ImageTensor::new(shifted, 8, 8, 3, ImageRole::Hr).unwrap()).unwrap();
        for (x, y) in g1.data().iter().zip(g2.data()) {
            prop_assert!(*x >= 0.0);
            prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
        }
    }

    #[test]
    fn degraded_images_stay_in_range(seed in any::<u64>()) {
        let cfg = ShtConfig::toy();
        let lr = degrade(&image(seed, 128, 128), &cfg).unwrap();
        prop_assert_eq!((lr.height(), lr.width()), (64, 64));
        prop_assert!(lr.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_output_is_an_image(seed in any::<u64>()) {
        let cfg = tiny_config();
        let g = sht_core::fptn::Generator::new(&cfg, seed, &Device::Cpu).unwrap();
        let f32t = |t: Tensor| t.to_dtype(candle_core::DType::F32).unwrap();
        let i = f32t(uniform_tensor(seed, &[1, 3, 128, 128], 0.0, 1.0));
        let h = f32t(uniform_tensor(seed ^ 1, &[1, 5, 64, 64], 0.0, 1.0));
        let out = g.forward(&i, &h, &h).unwrap();
        let v: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        prop_assert!(v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn annotations_round_trip(seed in any::<u64>()) {
        let faces = toy_faces(3, seed);
        let dir = tempfile::tempdir().unwrap();
        write_image_dataset(dir.path(), &faces).unwrap();
        let opts = LoadOptions { num_landmarks: 5, interocular: None, strict: true };
        let (back, _) = load_image_dataset(dir.path(), &opts).unwrap();
        prop_assert_eq!(back.len(), faces.len());
        for (a, b) in faces.iter().zip(&back) {
            for (p, q) in a.landmarks.points().iter().zip(b.landmarks.points()) {
                prop_assert!((p[0] - q[0]).abs() <= 5e-5 && (p[1] - q[1]).abs() <= 5e-5);
            }
            prop_assert_eq!(a.image().unwrap().data().len(), b.image().unwrap().data().len());
        }
    }
}
