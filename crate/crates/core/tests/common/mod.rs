//! Shared fixtures and property checks for the integration suites.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sht_core::config::{FptnConfig, PerceptualConfig, PerceptualSource};
use sht_core::data::{generate_toy_dataset, AnnotatedFace, ToyRanges};
use sht_core::dhln::{Dhln, ForwardOptions, FuBlock1};
use sht_core::fptn::Generator;
use sht_core::heatmap::{decode_heatmaps, render_heatmaps};
use sht_core::image::{BBox, LandmarkSet};
use sht_core::losses::PerceptualExtractor;
use sht_core::metrics::{nme, NormalizationKind};
use sht_core::nn::ParamStore;
use sht_core::trainer::{Phase, TrainData, Trainer, TrainingPair};
use sht_core::ShtConfig;

pub const CASES: u32 = 128;

pub type Check = std::result::Result<(), TestCaseError>;

/// Toy geometry with the smallest widths that keep every module in play.
pub fn tiny_config() -> ShtConfig {
    ShtConfig {
        num_stacks: 2,
        pose_channels: 16,
        sr_channels: 8,
        sr_blocks_per_module: 1,
        hourglass_blocks: 1,
        hourglass_depth: 2,
        batch_size: 2,
        fptn: FptnConfig { channels: 4, disc_channels: 4, transfer_blocks: 2, ..ShtConfig::toy().fptn },
        perceptual: PerceptualConfig { source: PerceptualSource::Seeded { seed: 1 }, channels: 4 },
        ..ShtConfig::toy()
    }
}

pub fn normal_tensor(seed: u64, shape: &[usize], std: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn uniform_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// `q < q' < 2q` for positive `q` and `q' = 0` for `q = 0`.
pub fn fublock1_bound(seed: u64) -> Check {
    let dev = Device::Cpu;
    let mut ps = ParamStore::new(seed, &dev);
    let fu = FuBlock1::new(&mut ps, "fu", 8, 4).unwrap();
    let p = normal_tensor(seed ^ 1, &[2, 8, 6, 6], 1.0);
    let q = uniform_tensor(seed ^ 2, &[2, 4, 6, 6], 0.01, 2.0);
    let out = fu.forward(&p, &q).unwrap();
    for (a, b) in values(&q).iter().zip(values(&out)) {
        prop_assert!(*a < b && b < 2.0 * a, "q {a} → q' {b}");
    }
    let zero = fu.forward(&p, &q.zeros_like().unwrap()).unwrap();
    prop_assert!(values(&zero).iter().all(|v| *v == 0.0));
    Ok(())
}

/// With the residual branches zeroed, fusion leaves the pose stream alone and
/// every SR module is the identity; with its transfer branches zeroed the
/// generator's image pathway passes through the cascade unchanged.
pub fn zero_init_identity(seed: u64) -> Check {
    let dev = Device::Cpu;
    let cfg = tiny_config();
    let dhln = Dhln::new(&cfg, seed, &dev).unwrap();
    dhln.zero_residual_branches().unwrap();
    let lr = uniform_tensor(seed ^ 3, &[1, 3, 64, 64], 0.0, 1.0).to_dtype(DType::F32).unwrap();
    let keep = |fusion| ForwardOptions { fusion, keep_states: true };
    let on = dhln.forward_with(&lr, keep(true)).unwrap();
    let off = dhln.forward_with(&lr, keep(false)).unwrap();
    for (t, s) in on.states.iter().enumerate() {
        prop_assert_eq!(values(&s.p_prime), values(&s.p), "stack {}", t);
        prop_assert_eq!(values(&on.heatmaps[t]), values(&off.heatmaps[t]), "stack {}", t);
        if t > 0 {
            prop_assert_eq!(values(&s.q), values(&on.states[t - 1].q_prime), "sr module {}", t);
        }
    }

    let gen = Generator::new(&cfg, seed, &dev).unwrap();
    gen.zero_transfer_branches().unwrap();
    let i_con = uniform_tensor(seed ^ 4, &[1, 3, 128, 128], 0.0, 1.0).to_dtype(DType::F32).unwrap();
    let h = uniform_tensor(seed ^ 5, &[1, cfg.num_landmarks, 64, 64], 0.0, 1.0).to_dtype(DType::F32).unwrap();
    let h2 = uniform_tensor(seed ^ 6, &[1, cfg.num_landmarks, 64, 64], 0.0, 1.0).to_dtype(DType::F32).unwrap();
    let (before, after) = gen.transfer_features(&i_con, &h, &h2).unwrap();
    prop_assert_eq!(values(&before), values(&after));
    Ok(())
}

pub fn point_on_grid() -> impl Strategy<Value = [f64; 2]> {
    (0.0f64..63.0, 0.0f64..63.0).prop_map(|(x, y)| [x, y])
}

/// Decoding a rendered map lands within half a pixel of the landmark.
pub fn render_decode_round_trip(points: &[[f64; 2]], sigma: f64) -> Check {
    let lm = LandmarkSet::new(points.to_vec()).unwrap();
    let decoded = decode_heatmaps(&render_heatmaps(&lm, (64, 64), sigma).unwrap()).unwrap();
    for (p, d) in points.iter().zip(decoded.landmarks.points()) {
        let err = (p[0] - d[0]).abs().max((p[1] - d[1]).abs());
        prop_assert!(err <= 0.5, "{:?} decoded as {:?} (σ = {})", p, d, sigma);
    }
    Ok(())
}

pub fn landmark_pair() -> impl Strategy<Value = (Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    (3usize..12).prop_flat_map(|n| {
        let pts = proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0).prop_map(|(x, y)| [x, y]), n);
        (pts.clone(), pts)
    })
}

fn annotated(points: &[[f64; 2]], gt: &[[f64; 2]]) -> Option<LandmarkSet> {
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in gt {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let b = BBox::new(lo[0], lo[1], (hi[0] - lo[0]).max(1.0), (hi[1] - lo[1]).max(1.0)).ok()?;
    LandmarkSet::new(points.to_vec()).ok()?.with_bbox(b).with_interocular([0, 1]).ok()
}

/// Every NME variant is unchanged when prediction, ground truth and anchors
/// are translated together, or scaled together by `s > 0`.
pub fn nme_invariance(pred: &[[f64; 2]], gt: &[[f64; 2]], shift: [f64; 2], scale: f64) -> Check {
    let Some(g) = annotated(gt, gt) else { return Ok(()) };
    let p = LandmarkSet::new(pred.to_vec()).unwrap();
    let moved = |l: &LandmarkSet, f: &dyn Fn([f64; 2]) -> [f64; 2]| l.map_points(f);
    let tr = |q: [f64; 2]| [q[0] + shift[0], q[1] + shift[1]];
    let sc = |q: [f64; 2]| [q[0] * scale, q[1] * scale];
    for kind in NormalizationKind::ALL {
        let base = nme(&p, &g, kind).unwrap();
        for f in [&tr as &dyn Fn([f64; 2]) -> [f64; 2], &sc] {
            let v = nme(&moved(&p, f), &moved(&g, f), kind).unwrap();
            prop_assert!((v - base).abs() <= 1e-9 * base.max(1.0), "{kind}: {base} vs {v}");
        }
    }
    Ok(())
}

pub fn toy_faces(n: usize, seed: u64) -> Vec<AnnotatedFace> {
    generate_toy_dataset(n, &ToyRanges::default(), seed).unwrap()
}

pub fn tiny_trainer(seed: u64) -> Trainer {
    let cfg = ShtConfig { seed, ..tiny_config() };
    let mut t = Trainer::new(cfg.clone(), &Device::Cpu).unwrap();
    t.set_perceptual(Some(PerceptualExtractor::seeded(1, 4, &Device::Cpu).unwrap()));
    t
}

/// The joint objective does not depend on which view of a pair is `j`.
pub fn pair_swap_symmetry(trainer: &Trainer, data: &TrainData, step: usize) -> Check {
    let pairs = trainer.sample_batch(Phase::FinetuneSht, step, data).unwrap();
    let swapped: Vec<TrainingPair> = pairs.iter().map(TrainingPair::swapped).collect();
    let a = trainer.evaluate_sht(&pairs).unwrap();
    let b = trainer.evaluate_sht(&swapped).unwrap();
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1e-8);
    prop_assert!(close(a.total, b.total), "total {} vs {}", a.total, b.total);
    for (k, v) in &a.components {
        prop_assert!(close(*v, b.get(k)), "{}: {} vs {}", k, v, b.get(k));
    }
    Ok(())
}

/// Equal seeds give bitwise-equal data, weights, batches and training steps.
pub fn seed_reproducibility(seed: u64, data: &TrainData) -> Check {
    let ranges = ToyRanges::default();
    prop_assert_eq!(
        generate_toy_dataset(1, &ranges, seed).unwrap(),
        generate_toy_dataset(1, &ranges, seed).unwrap()
    );
    let mut a = tiny_trainer(seed);
    let mut b = tiny_trainer(seed);
    let (pa, pb) = (a.dhln().params().snapshot().unwrap(), b.dhln().params().snapshot().unwrap());
    for (k, v) in &pa {
        prop_assert_eq!(values(v), values(&pb[k]), "{}", k);
    }
    let step = (seed % 1000) as usize;
    let ba = a.sample_batch(Phase::PretrainDhln, step, data).unwrap();
    let bb = b.sample_batch(Phase::PretrainDhln, step, data).unwrap();
    for (x, y) in ba.iter().zip(&bb) {
        prop_assert!(x.j.lr == y.j.lr && x.k.hr == y.k.hr && x.j.heatmaps == y.j.heatmaps);
    }
    let ra = a.train_step(Phase::PretrainDhln, &ba, step, 1000).unwrap();
    let rb = b.train_step(Phase::PretrainDhln, &bb, step, 1000).unwrap();
    prop_assert_eq!(ra, rb);
    Ok(())
}

/// Runs `check` on `cases` instances drawn from `strategy`; returns the
/// failure message, if any.
pub fn run<S: Strategy>(strategy: S, cases: u32, check: impl Fn(S::Value) -> Check) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, check).map_err(|e| e.to_string())
}
