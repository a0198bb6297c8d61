use proptest::prelude::*;
use smlw_core::data::{extract_patch, stratified_split, synth_generate, GroundTruth, HsiCube, SynthConfig};

fn random_cube(h: usize, w: usize, c: usize, seed: u64) -> HsiCube {
    let values = (0..h * w * c)
        .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 7.0)
        .collect();
    HsiCube::new(h, w, c, values).unwrap()
}

fn flip_cols(cube: &HsiCube) -> HsiCube {
    let (h, w, c) = (cube.height(), cube.width(), cube.bands());
    let mut values = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            values.extend_from_slice(cube.pixel(r, w - 1 - col));
        }
    }
    HsiCube::new(h, w, c, values).unwrap()
}

#[test]
fn nearest_mean_is_perfect_without_noise() {
    let cfg = SynthConfig {
        classes: 6,
        bands: 12,
        height: 20,
        width: 30,
        sigma: 0.0,
        seed: 11,
    };
    let (cube, gt) = synth_generate(&cfg).unwrap();
    let c = cube.bands();
    let mut sums = vec![vec![0.0f64; c]; cfg.classes];
    let counts = gt.class_counts();
    for p in gt.labeled() {
        let k = gt.labels()[p] as usize - 1;
        for (s, v) in sums[k].iter_mut().zip(&cube.values()[p * c..(p + 1) * c]) {
            *s += *v as f64;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let mut correct = 0;
    for p in gt.labeled() {
        let px = &cube.values()[p * c..(p + 1) * c];
        let pred = (0..cfg.classes)
            .min_by(|&a, &b| {
                let d = |k: usize| -> f64 { px.iter().zip(&means[k]).map(|(x, m)| (*x as f64 - m).powi(2)).sum() };
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        correct += usize::from(pred + 1 == gt.labels()[p] as usize);
    }
    assert_eq!(correct, cfg.height * cfg.width);
}

#[test]
fn synth_is_deterministic_and_covers_classes() {
    let cfg = SynthConfig::default();
    let (a, ga) = synth_generate(&cfg).unwrap();
    let (b, gb) = synth_generate(&cfg).unwrap();
    let bits = |c: &HsiCube| c.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ga, gb);
    assert!(ga.class_counts().iter().all(|&n| n > 0));
    let (c, _) = synth_generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn mirrored_cube_gives_mirrored_patches() {
    let cube = random_cube(6, 7, 3, 5);
    let flipped = flip_cols(&cube);
    for s in [3, 5, 7, 9] {
        for r in 0..6 {
            for c in 0..7 {
                let a = extract_patch::<f32>(&cube, r, c, s).unwrap();
                let b = extract_patch::<f32>(&flipped, r, 6 - c, s).unwrap();
                for i in 0..s {
                    for j in 0..s {
                        for k in 0..3 {
                            let ia = (i * s + j) * 3 + k;
                            let ib = (i * s + (s - 1 - j)) * 3 + k;
                            assert_eq!(a.data()[ia], b.data()[ib]);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn houston_class_one_within_one_of_table() {
    let mut labels = vec![1u16; 1251];
    labels.push(0);
    let gt = GroundTruth::new(1, 1252, 1, labels).unwrap();
    let a = stratified_split(&gt, 0.05, 0.05, 0).unwrap();
    for (got, want) in [(a.train.len(), 63i64), (a.val.len(), 62), (a.test.len(), 1126)] {
        assert!((got as i64 - want).abs() <= 1, "{got} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn center_pixel_matches_cube(h in 1usize..8, w in 1usize..8, half in 0usize..4, r in 0usize..8, c in 0usize..8) {
        let cube = random_cube(h, w, 2, 9);
        let (r, c, s) = (r % h, c % w, 2 * half + 1);
        let p = extract_patch::<f32>(&cube, r, c, s).unwrap();
        prop_assert_eq!(p.shape(), &[s, s, 2][..]);
        let mid = (half * s + half) * 2;
        prop_assert_eq!(&p.data()[mid..mid + 2], cube.pixel(r, c));
    }

    #[test]
    fn split_buckets_partition_labeled_pixels(
        counts in prop::collection::vec(3usize..120, 1..6),
        train in 0.0f64..0.6,
        val in 0.0f64..0.35,
        seed in any::<u64>(),
    ) {
        let mut labels = vec![0u16; 2];
        for (k, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat_n((k + 1) as u16, n));
        }
        let gt = GroundTruth::new(1, labels.len(), counts.len(), labels).unwrap();
        let a = stratified_split(&gt, train, val, seed).unwrap();
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, gt.labeled().collect::<Vec<_>>());
        for (k, &n) in counts.iter().enumerate() {
            let label = (k + 1) as u16;
            let t = a.train.iter().filter(|&&p| gt.labels()[p] == label).count();
            prop_assert!((t as f64 - n as f64 * train).abs() <= 1.0);
        }
    }
}
