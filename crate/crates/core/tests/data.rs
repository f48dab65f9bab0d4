use djscc_core::data::{
    band_maxima, denormalize, load_directory, load_multiband, normalize, resize_cubic, save_multiband, split_dataset,
    synth_dataset, MultibandImage,
};
use djscc_core::Error;
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = MultibandImage> {
    (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(b, h, w)| {
        proptest::collection::vec(any::<f32>(), b * h * w)
            .prop_map(move |px| MultibandImage::new(b, h, w, px).unwrap())
    })
}

proptest! {
    #[test]
    fn container_round_trip_is_bit_exact(img in image_strategy()) {
        let bytes = img.encode();
        let back = MultibandImage::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn normalize_then_denormalize_recovers_pixels(seed in 0u64..1000) {
        let img = synth_dataset(seed, 1, [6, 5, 3]).unwrap().remove(0);
        let scaled = denormalize(&img, &[2.0, 350.0, 0.75]).unwrap();
        let max = band_maxima(std::slice::from_ref(&scaled)).unwrap();
        let back = denormalize(&normalize(&scaled, &max).unwrap(), &max).unwrap();
        for (a, b) in back.pixels().iter().zip(scaled.pixels()) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }
}

#[test]
fn files_round_trip_and_truncation_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = synth_dataset(1, 1, [4, 3, 2]).unwrap().remove(0);
    let path = dir.path().join("a.mbif");
    save_multiband(&img, &path).unwrap();
    assert_eq!(load_multiband(&path).unwrap(), img);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_multiband(&path), Err(Error::Format { offset: 19, .. })));
    std::fs::write(&path, b"MBI").unwrap();
    assert!(matches!(load_multiband(&path), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn directory_loading_is_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = synth_dataset(2, 3, [4, 4, 1]).unwrap();
    for (name, img) in ["c", "a", "b"].iter().zip(&imgs) {
        save_multiband(img, dir.path().join(format!("{name}.mbif"))).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "skip me").unwrap();
    let loaded = load_directory(dir.path()).unwrap();
    assert_eq!(loaded, vec![imgs[1].clone(), imgs[2].clone(), imgs[0].clone()]);
    assert!(load_directory(tempfile::tempdir().unwrap().path()).is_err());
}

#[test]
fn identity_and_constant_resizes() {
    let img = synth_dataset(3, 1, [7, 9, 1]).unwrap().remove(0);
    let same = resize_cubic(img.band(0), 7, 9, 7, 9).unwrap();
    for (a, b) in same.iter().zip(img.band(0)) {
        assert!((a - b).abs() < 1e-6);
    }
    let flat = resize_cubic(&[0.375; 20], 4, 5, 11, 3).unwrap();
    assert!(flat.iter().all(|v| *v == 0.375));
}

#[test]
fn bilinear_ramp_upscales_to_the_analytic_ramp() {
    let (h, w) = (8, 10);
    let ramp = |y: f64, x: f64| 0.1 + 0.03 * x + 0.05 * y + 0.004 * x * y;
    let band: Vec<f32> = (0..h * w).map(|i| ramp((i / w) as f64, (i % w) as f64) as f32).collect();
    let out = resize_cubic(&band, h, w, 2 * h, 2 * w).unwrap();
    let src = |o: usize| (o as f64 + 0.5) / 2.0 - 0.5;
    let mut checked = 0;
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let (sy, sx) = (src(oy), src(ox));
            // taps of interior outputs never reach the clamped border
            if sy < 1.0 || sx < 1.0 || sy > (h - 2) as f64 || sx > (w - 2) as f64 {
                continue;
            }
            assert!((out[oy * 2 * w + ox] as f64 - ramp(sy, sx)).abs() < 1e-3);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn smooth_images_stay_inside_overshoot_bound() {
    for img in synth_dataset(4, 8, [12, 12, 3]).unwrap() {
        for factor in [2, 3] {
            let big = img.resized(12 * factor, 12 * factor).unwrap();
            for b in 0..3 {
                let (lo, hi) = img.band(b).iter().fold((f32::MAX, f32::MIN), |(l, u), v| (l.min(*v), u.max(*v)));
                assert!(big.band(b).iter().all(|v| *v >= lo - 0.05 && *v <= hi + 0.05));
            }
        }
    }
}

#[test]
fn unit_step_overshoot_equals_kernel_lobe() {
    // at 2x the far tap sits 1.25 pixels away; the kernel there is -9/128
    let band: Vec<f32> = (0..4 * 8).map(|i| if i % 8 < 4 { 0.0 } else { 1.0 }).collect();
    let out = resize_cubic(&band, 4, 8, 4, 16).unwrap();
    let max = out.iter().copied().fold(f32::MIN, f32::max) as f64;
    let min = out.iter().copied().fold(f32::MAX, f32::min) as f64;
    assert!((max - (1.0 + 9.0 / 128.0)).abs() < 1e-6, "{max}");
    assert!((min + 9.0 / 128.0).abs() < 1e-6, "{min}");
}

#[test]
fn normalize_maps_extremes_and_clamps() {
    let img = MultibandImage::new(2, 1, 3, vec![0.0, 5.0, 10.0, 1.0, 2.0, 4.0]).unwrap();
    let max = band_maxima(std::slice::from_ref(&img)).unwrap();
    assert_eq!(max, vec![10.0, 4.0]);
    let n = normalize(&img, &max).unwrap();
    assert_eq!(n.pixels(), &[0.0, 0.5, 1.0, 0.25, 0.5, 1.0]);
    let clamped = normalize(&img, &[5.0, 4.0]).unwrap();
    assert_eq!(clamped.pixels()[2], 1.0);
    assert!(normalize(&img, &[1.0]).is_err());
}

fn lag1_autocorrelation(band: &[f32], h: usize, w: usize) -> f64 {
    let mean = band.iter().map(|v| *v as f64).sum::<f64>() / band.len() as f64;
    let var = band.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>();
    let mut cov = 0.0;
    for y in 0..h {
        for x in 0..w - 1 {
            cov += (band[y * w + x] as f64 - mean) * (band[y * w + x + 1] as f64 - mean);
        }
    }
    cov / var * (h * w) as f64 / (h * (w - 1)) as f64
}

#[test]
fn synthetic_images_are_smooth_bounded_and_reproducible() {
    let a = synth_dataset(11, 6, [16, 16, 3]).unwrap();
    assert_eq!(a, synth_dataset(11, 6, [16, 16, 3]).unwrap());
    assert_ne!(a, synth_dataset(12, 6, [16, 16, 3]).unwrap());
    for img in &a {
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        for b in 0..3 {
            let rho = lag1_autocorrelation(img.band(b), 16, 16);
            assert!(rho > 0.5, "lag-1 autocorrelation {rho}");
        }
    }
}

#[test]
fn splits_are_disjoint_exhaustive_and_seeded() {
    let all = split_dataset(10, [1.0, 0.0, 0.0], 3).unwrap();
    assert_eq!(all.train.len(), 10);
    for (n, f, seed) in [(100, [0.7, 0.1, 0.2], 1), (37, [0.5, 0.25, 0.25], 2), (5, [0.0, 0.0, 1.0], 3)] {
        let s = split_dataset(n, f, seed).unwrap();
        assert_eq!(s, split_dataset(n, f, seed).unwrap());
        let mut seen: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
    assert_ne!(split_dataset(100, [0.5, 0.0, 0.5], 1).unwrap().train, split_dataset(100, [0.5, 0.0, 0.5], 2).unwrap().train);
    assert!(split_dataset(10, [0.5, 0.5, 0.5], 1).is_err());
}
