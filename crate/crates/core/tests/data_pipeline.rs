use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seedet::data::*;
use seedet::eval::{froc, ScanResult};

fn ball_patch(size: usize, c: [f64; 3], d: f64) -> PatchSample {
    let mut data = vec![0.0f32; size * size * size];
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let r2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                if r2 <= (d / 2.0).powi(2) {
                    data[(z * size + y) * size + x] = 1.0;
                }
            }
        }
    }
    let ann = NoduleAnnotation { scan_id: "s".into(), x: c[0], y: c[1], z: c[2], diameter: d };
    PatchSample { data, size: [size; 3], origin: [0; 3], annotations: vec![ann], augmentation: Augmentation::IDENTITY }
}

/// Mean image value over a ball rendered at the annotation.
fn ball_mean(s: &PatchSample, a: &NoduleAnnotation) -> f64 {
    let r = a.diameter / 2.0;
    let (mut sum, mut n) = (0.0, 0);
    for z in 0..s.size[2] {
        for y in 0..s.size[1] {
            for x in 0..s.size[0] {
                let r2 = (x as f64 - a.x).powi(2) + (y as f64 - a.y).powi(2) + (z as f64 - a.z).powi(2);
                if r2 <= r * r {
                    sum += s.get(x, y, z) as f64;
                    n += 1;
                }
            }
        }
    }
    sum / n as f64
}

#[test]
fn augmentation_keeps_annotations_on_blobs() {
    let base = ball_patch(32, [11.0, 19.5, 14.0], 8.0);
    for mask in 0..8u8 {
        let flips = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
        for scale in [0.75, 0.9, 1.0, 1.1, 1.25] {
            let aug = apply_augmentation(&base, Augmentation { flips, scale });
            let a = &aug.annotations[0];
            assert!((a.diameter - 8.0 * scale).abs() < 1e-12);
            let c = [a.x, a.y, a.z].map(|v| v.round() as usize);
            assert!(aug.get(c[0], c[1], c[2]) > 0.5, "flips {flips:?} scale {scale}");
            assert!(ball_mean(&aug, a) > 0.7, "flips {flips:?} scale {scale}: {}", ball_mean(&aug, a));
        }
    }
}

#[test]
fn phantom_centers_stand_out_from_background() {
    let cfg = PhantomConfig::default();
    for seed in 0..100 {
        let (v, anns) = generate_phantom(cfg.volume_seed(seed), &cfg, "p").unwrap();
        let dims = v.dims();
        // background statistics from voxels away from every nodule
        let mut bg = Vec::new();
        for z in (0..dims[2]).step_by(3) {
            for y in (0..dims[1]).step_by(3) {
                for x in (0..dims[0]).step_by(3) {
                    let far = anns.iter().all(|a| {
                        let d = ((x as f64 - a.x).powi(2) + (y as f64 - a.y).powi(2) + (z as f64 - a.z).powi(2)).sqrt();
                        d > a.diameter / 2.0 + 4.0
                    });
                    if far {
                        bg.push(v.get(x, y, z) as f64);
                    }
                }
            }
        }
        bg.sort_by(f64::total_cmp);
        let median = bg[bg.len() / 2];
        let mut dev: Vec<f64> = bg.iter().map(|b| (b - median).abs()).collect();
        dev.sort_by(f64::total_cmp);
        let sigma = 1.4826 * dev[dev.len() / 2];
        for a in &anns {
            let c = v.get(a.x.round() as usize, a.y.round() as usize, a.z.round() as usize) as f64;
            assert!(c >= median + 3.0 * sigma, "seed {seed}: center {c} vs background {median} ± {sigma}");
        }
    }
}

#[test]
fn threshold_baseline_separates_default_phantoms() {
    let cfg = PhantomConfig::default();
    let scans: Vec<ScanResult> = (0..10)
        .map(|i| {
            let id = format!("p{i}");
            let (v, anns) = generate_phantom(cfg.volume_seed(i), &cfg, &id).unwrap();
            ScanResult::new(id, &threshold_baseline(&v, -500.0), &anns)
        })
        .collect();
    let curve = froc(&scans).unwrap();
    println!("threshold baseline sensitivities {:?}", curve.sensitivities);
    assert!(curve.sensitivities[6] >= 0.5);
}

#[test]
fn train_patches_are_deterministic_and_normalized() {
    let cfg = PhantomConfig { dims: [48, 48, 48], ..Default::default() };
    let (v, anns) = generate_phantom(3, &cfg, "p").unwrap();
    let n = preprocess(&v);
    let crop = CropConfig { patch: 32, nodule_prob: 0.7 };
    for seed in 0..20 {
        let a = extract_train_patch(&n, &anns, &mut ChaCha8Rng::seed_from_u64(seed), &crop);
        let b = extract_train_patch(&n, &anns, &mut ChaCha8Rng::seed_from_u64(seed), &crop);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let aug = augment(&a, &mut ChaCha8Rng::seed_from_u64(seed));
        assert!(aug.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((0.75..1.25).contains(&aug.augmentation.scale));
    }
}

proptest! {
    #[test]
    fn preprocess_lands_in_unit_interval(vals in prop::collection::vec(-5000.0f32..5000.0, 512)) {
        let v = Volume::new("s", [8, 8, 8], vals).unwrap();
        let n = preprocess(&v);
        prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let clamped = Volume::new("s", [8, 8, 8], v.data().iter().map(|x| x.clamp(HU_MIN, HU_MAX)).collect()).unwrap();
        prop_assert_eq!(preprocess(&clamped), n);
    }

    #[test]
    fn tiles_cover_every_voxel(dim in 1usize..700, patch in 16usize..240, overlap_frac in 0.0f64..0.9) {
        let overlap = ((patch as f64) * overlap_frac) as usize;
        let origins = tile_origins(dim, patch, overlap).unwrap();
        let padded = dim.max(patch);
        prop_assert_eq!(origins[0], 0);
        prop_assert_eq!(*origins.last().unwrap() + patch, padded);
        for w in origins.windows(2) {
            prop_assert!(w[1] > w[0]);
            // seams are covered twice across at least `overlap` voxels
            prop_assert!(w[0] + patch >= w[1] + overlap);
        }
        let mut cover = vec![0usize; padded];
        for o in &origins {
            for c in &mut cover[*o..o + patch] {
                *c += 1;
            }
        }
        prop_assert!(cover.iter().all(|&c| c >= 1));
    }

    #[test]
    fn train_crop_remap_is_a_translation(seed in 0u64..1000, x in 0.0f64..40.0, y in 0.0f64..40.0, z in 0.0f64..40.0) {
        let v = Volume::new("s", [40, 40, 40], vec![0.0; 64000]).unwrap();
        let anns = [NoduleAnnotation { scan_id: "s".into(), x, y, z, diameter: 5.0 }];
        let s = extract_train_patch(&v, &anns, &mut ChaCha8Rng::seed_from_u64(seed), &CropConfig { patch: 24, nodule_prob: 0.7 });
        for a in &s.annotations {
            prop_assert_eq!(a.x + s.origin[0] as f64, x);
            prop_assert_eq!(a.y + s.origin[1] as f64, y);
            prop_assert_eq!(a.z + s.origin[2] as f64, z);
        }
    }
}
