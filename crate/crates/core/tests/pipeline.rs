use filament_core::dwdc::{make_label, LrSpec, WaveletSpec};
use filament_core::imgcore::{load_image, save_image, SourceDepth};
use filament_core::postmetrics::{postprocess_result, psnr, ssim};
use filament_core::preprocess::{
    build_dataset, gaussian_upsample_x2, load_manifest, load_pairs, threshold_denoise, Split, ThresholdK, WeightParams,
};
use filament_core::synthlab::{degrade, gaussian_psf, generate_phantom, DegradationSpec, NoiseKind, PhantomSpec};

fn phantom(seed: u64) -> PhantomSpec {
    PhantomSpec {
        width: 48,
        height: 48,
        n_filaments: 2,
        thickness_px: 1.0,
        intensity: 1.0,
        curvature: 0.3,
        seed,
        pixel_pitch_nm: 62.5,
    }
}

#[test]
fn labels_land_on_the_filaments() {
    let latent = generate_phantom(&phantom(11)).unwrap();
    let degraded = degrade(
        &latent,
        &DegradationSpec {
            psf: gaussian_psf(2.0, 6).unwrap(),
            noise_kind: NoiseKind::Gaussian,
            noise_param: 0.01,
            seed: 5,
        },
    )
    .unwrap();
    let pre = threshold_denoise(&degraded, ThresholdK::Auto);
    let lspec = LrSpec::new(gaussian_psf(2.0, 6).unwrap(), 50, 1e-12).unwrap();
    let label = make_label(&pre, &WaveletSpec::default(), &lspec).unwrap().label;
    let on: Vec<usize> = (0..label.len()).filter(|&i| label.values()[i] > 0.0).collect();
    assert!(!on.is_empty());
    // Most foreground pixels sit where the phantom has real signal.
    let near = on.iter().filter(|&&i| latent.values()[i] > 0.05).count();
    assert!(near as f64 >= 0.8 * on.len() as f64, "{near} of {}", on.len());
    // And the label is much thinner than the blurred observation.
    let blurred_on = degraded.values().iter().filter(|v| **v > 0.5 * degraded.max()).count();
    assert!(on.len() < blurred_on * 2);
}

#[test]
fn dataset_survives_a_disk_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let latent = generate_phantom(&phantom(3)).unwrap();
    let up = gaussian_upsample_x2(&latent, 0.7).unwrap();
    assert_eq!((up.width(), up.height(), up.pixel_pitch_nm()), (96, 96, 31.25));
    let label = up.with_values(up.values().iter().map(|v| f64::from(*v > 0.2)).collect()).unwrap();

    let image_path = dir.path().join("up.f32");
    save_image(&up, &image_path, SourceDepth::F32).unwrap();
    let back = load_image(&image_path, None).unwrap();
    assert_eq!(back.pixel_pitch_nm(), 31.25);
    assert!(psnr(&up, &back, 1.0).unwrap() > 100.0);

    let params = WeightParams { w0: 10.0, sigma_px: 5.0 };
    let out = dir.path().join("ds");
    let manifest = build_dataset(&[back.clone()], &[label.clone()], 32, &params, Split::Train, &out).unwrap();
    assert_eq!(manifest.counts.pairs, 9);
    let reloaded = load_manifest(&out.join(filament_core::preprocess::MANIFEST_FILE)).unwrap();
    let pairs = load_pairs(&reloaded).unwrap();
    assert_eq!(pairs.len(), 9);
    for p in &pairs {
        assert_eq!((p.original.width(), p.label.width(), p.weight.width), (32, 32, 32));
        assert!(p.label.values().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(p.weight.data.iter().all(|w| w.is_finite() && *w > 0.0));
    }

    let result = postprocess_result(&label, &back, 0.5).unwrap();
    assert!((ssim(&result, &result).unwrap() - 1.0).abs() < 1e-12);
}
