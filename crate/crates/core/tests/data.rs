use moe_restore::data::{add_gaussian_noise, add_haze, add_rain, synth_clean, synth_pair, DegradeSpec, NOISE_LEVELS};
use moe_restore::manifest::{write_dataset, Dataset, SynthConfig};
use moe_restore::metrics::{psnr, ssim};
use moe_restore::pnm::{decode_pnm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm};
use moe_restore::priors::DegradationKind;
use moe_restore::Tensor;
use proptest::prelude::*;

fn variance(d: &[f32]) -> f64 {
    let n = d.len() as f64;
    let m = d.iter().map(|&v| v as f64).sum::<f64>() / n;
    d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n
}

fn mean(t: &Tensor<f32>) -> f64 {
    t.mean()
}

#[test]
fn synth_is_deterministic_bounded_and_textured() {
    assert_eq!(synth_clean(3, 64, 64).unwrap(), synth_clean(3, 64, 64).unwrap());
    assert_ne!(synth_clean(3, 64, 64).unwrap(), synth_clean(4, 64, 64).unwrap());
    for seed in 0..100 {
        let img = synth_clean(seed, 32, 64).unwrap();
        assert_eq!(img.shape(), &[3, 32, 64]);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(variance(img.data()) > 1e-3, "seed {seed}");
    }
}

#[test]
fn synth_rejects_bad_sizes() {
    assert!(synth_clean(0, 48, 64).is_err());
    assert!(synth_clean(0, 16, 16).is_err());
}

#[test]
fn noise_statistics() {
    let img = Tensor::full(&[3, 64, 64], 0.5f32);
    for seed in [1, 2, 3] {
        let out = add_gaussian_noise(&img, 25.0, seed).unwrap();
        let diff: Vec<f32> = out.data().iter().map(|v| v - 0.5).collect();
        let sd = variance(&diff).sqrt();
        let want = 25.0 / 255.0;
        assert!((sd - want).abs() < 0.05 * want, "{sd} vs {want}");
    }
    assert_eq!(add_gaussian_noise(&img, 0.0, 1).unwrap(), img);
    assert_eq!(add_gaussian_noise(&img, 25.0, 9).unwrap(), add_gaussian_noise(&img, 25.0, 9).unwrap());
    assert!(add_gaussian_noise(&img, -1.0, 1).is_err());
    assert_eq!(NOISE_LEVELS, [15.0, 25.0, 50.0]);
}

#[test]
fn psnr_falls_with_noise_level() {
    for seed in [1, 2, 3] {
        let img = synth_clean(seed, 64, 64).unwrap();
        let p: Vec<f64> =
            NOISE_LEVELS.iter().map(|&s| psnr(&add_gaussian_noise(&img, s, seed).unwrap(), &img).unwrap()).collect();
        assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
    }
}

#[test]
fn rain_properties() {
    let img = synth_clean(5, 64, 64).unwrap();
    assert_eq!(add_rain(&img, 0.0, 1).unwrap(), img);
    let mut prev = f64::INFINITY;
    for d in [0.1, 0.3, 0.5] {
        let out = add_rain(&img, d, 11).unwrap();
        assert!(mean(&out) >= mean(&img));
        let p = psnr(&out, &img).unwrap();
        assert!(p < prev, "density {d}: {p} !< {prev}");
        prev = p;
    }
    assert!(add_rain(&img, 1.5, 1).is_err());
}

#[test]
fn haze_limits_and_blend() {
    let img = synth_clean(6, 64, 64).unwrap();
    let faint = add_haze(&img, 1e-9, 0.9, 1).unwrap();
    assert!(faint.max_abs_diff(&img) < 1e-6);
    let thick = add_haze(&img, 1e4, 0.9, 1).unwrap();
    // the depth map reaches 0 only at isolated pixels; check the bulk
    let near = thick.data().iter().filter(|&&v| (v - 0.9).abs() < 1e-6).count();
    assert!(near as f64 > 0.99 * thick.numel() as f64);
    for seed in [1, 2, 3] {
        let mid = add_haze(&img, 1.0, 0.9, seed).unwrap();
        let (mi, mo) = (mean(&img), mean(&mid));
        assert!(mo > mi.min(0.9) && mo < mi.max(0.9), "{mi} {mo}");
    }
    assert!(add_haze(&img, 0.0, 0.9, 1).is_err());
    assert!(add_haze(&img, -1.0, 0.9, 1).is_err());
    assert!(add_haze(&img, 1.0, 0.5, 1).is_err());
}

#[test]
fn metric_identities() {
    let a = synth_clean(1, 32, 32).unwrap();
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

    let base = Tensor::from_fn(&[3, 32, 32], |i| 0.2 + 0.6 * ((i * 37 % 101) as f32 / 101.0));
    let shifted = Tensor::from_fn(&[3, 32, 32], |i| base.data()[i] + 10.0 / 255.0);
    let want = 20.0 * (255.0f64 / 10.0).log10();
    assert!((psnr(&shifted, &base).unwrap() - want).abs() < 1e-4);
    assert!((want - 28.1308).abs() < 1e-4);

    let b = add_gaussian_noise(&a, 25.0, 3).unwrap();
    let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    assert!((s1 - s2).abs() < 1e-9);
    assert!(s1 < 1.0 && s1 > -1.0);
}

#[test]
fn metric_shape_errors() {
    let a = Tensor::zeros(&[3, 16, 16]);
    let b = Tensor::zeros(&[3, 16, 8]);
    assert!(psnr(&a, &b).is_err());
    assert!(ssim(&Tensor::zeros(&[1, 8, 8]), &Tensor::zeros(&[1, 8, 8])).is_err());
}

#[test]
fn ppm_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = synth_clean(2, 32, 32).unwrap();
    let p = dir.path().join("a.ppm");
    write_ppm(&p, &img).unwrap();
    let back = read_ppm(&p).unwrap();
    assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-7);

    let gray = Tensor::from_fn(&[1, 4, 8], |i| i as f32 / 31.0);
    let q = dir.path().join("g.pgm");
    write_pgm(&q, &gray).unwrap();
    let back = read_pgm(&q).unwrap();
    assert_eq!(back.shape(), &[1, 4, 8]);
    assert!(back.max_abs_diff(&gray) <= 0.5 / 255.0 + 1e-7);
    assert!(read_ppm(&q).is_err());
    assert!(read_ppm(dir.path().join("missing.ppm")).is_err());
}

#[test]
fn ppm_header_bytes() {
    let img = Tensor::from_fn(&[3, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
    let bytes = encode_ppm(&img).unwrap();
    let header = b"P6\n2 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 12);
    assert!(bytes[header.len()..].chunks(3).all(|px| px == [0xFF, 0x00, 0x00]));
    assert!(encode_ppm(&Tensor::zeros(&[1, 2, 2])).is_err());
}

#[test]
fn truncated_payload_rejected() {
    let img = synth_clean(2, 32, 32).unwrap();
    let bytes = encode_ppm(&img).unwrap();
    assert!(decode_pnm(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn dataset_synthesis_is_reproducible() {
    let cfg = SynthConfig {
        count: 6,
        size: 32,
        seed: 7,
        spec: DegradeSpec::Mixed(vec![DegradationKind::Noise, DegradationKind::Rain, DegradationKind::Haze]),
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_dataset(a.path(), &cfg).unwrap();
    let mb = write_dataset(b.path(), &cfg).unwrap();
    assert_eq!(ma, mb);
    for r in &ma.records {
        for rel in [r.path.clone(), r.clean_path().unwrap()] {
            assert_eq!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap());
        }
    }
    let ds = Dataset::open(a.path()).unwrap();
    assert_eq!(ds.manifest, ma);
    let samples = ds.load_all().unwrap();
    assert_eq!(samples.len(), 6);
    let kinds: Vec<_> = samples.iter().map(|s| s.label.entries[0].0).collect();
    assert_eq!(&kinds[..3], &[DegradationKind::Noise, DegradationKind::Rain, DegradationKind::Haze]);
}

#[test]
fn partial_noise_respects_mask() {
    let p = synth_pair(3, 0, 64, &DegradeSpec::Noise { sigma_255: 25.0, partial: true }).unwrap();
    let mask = p.mask.as_ref().unwrap();
    let hw = 64 * 64;
    for i in 0..p.clean.numel() {
        if !mask[i % hw] {
            assert_eq!(p.clean.data()[i], p.degraded.data()[i]);
        }
    }
    assert!(p.clean.max_abs_diff(&p.degraded) > 0.0);
}

proptest! {
    #[test]
    fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_pnm(&bytes);
        let mut framed = b"P6\n2 1\n255\n".to_vec();
        framed.extend(&bytes);
        let _ = decode_pnm(&framed);
    }

    #[test]
    fn pgm_round_trip(w in 1usize..9, h in 1usize..9, seed in 0u64..1000) {
        let img = Tensor::from_fn(&[1, h, w], |i| ((i as u64 * 2654435761 + seed) % 256) as f32 / 255.0);
        let back = decode_pnm(&encode_pgm(&img).unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }
}
