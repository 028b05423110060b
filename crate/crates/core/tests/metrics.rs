use octgan_core::metrics::{mse, psnr, ssim, EvalReport, EvalRow, Psnr};
use octgan_core::{Error, Image, SsimParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

mod common;
use common::naive_ssim;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn noisy(img: &Image, std: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, std).unwrap();
    let data = img.data.iter().map(|&v| v + n.sample(&mut rng) as f32).collect();
    Image::new(img.height, img.width, data).unwrap()
}

#[test]
fn matches_naive_oracle_on_random_pairs() {
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let a = random_image(&mut rng, 32, 32);
        // mix of unrelated and correlated pairs
        let b = if k % 2 == 0 { random_image(&mut rng, 32, 32) } else { noisy(&a, 0.1, k) };
        let got = ssim(&a, &b, &p).unwrap();
        worst = worst.max((got - naive_ssim(&a, &b)).abs());
    }
    assert!(worst < 1e-7, "max deviation {worst:e}");
}

#[test]
fn constant_images_match_oracle() {
    let p = SsimParams::default();
    let zero = Image::filled(16, 16, 0.0);
    let one = Image::filled(16, 16, 1.0);
    let got = ssim(&zero, &one, &p).unwrap();
    assert!((got - naive_ssim(&zero, &one)).abs() < 1e-7);
    // luminance term only: C1 / (1 + C1)
    assert!((got - 1e-4 / (1.0 + 1e-4)).abs() < 1e-9);
}

#[test]
fn identity_and_symmetry() {
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (h, w) in [(11, 11), (20, 37), (64, 128)] {
        let a = random_image(&mut rng, h, w);
        let b = random_image(&mut rng, h, w);
        assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b, &p).unwrap(), ssim(&b, &a, &p).unwrap());
    }
}

#[test]
fn errors() {
    let p = SsimParams::default();
    let a = Image::filled(10, 20, 0.5);
    assert!(matches!(ssim(&a, &a, &p), Err(Error::WindowTooLarge { .. })));
    let b = Image::filled(20, 20, 0.5);
    let c = Image::filled(20, 21, 0.5);
    assert!(matches!(ssim(&b, &c, &p), Err(Error::ShapeMismatch(_))));
    assert!(matches!(mse(&b, &c), Err(Error::ShapeMismatch(_))));
    assert!(matches!(psnr(&b, &c, 1.0), Err(Error::ShapeMismatch(_))));
}

#[test]
fn translation_invariance() {
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let big_a = random_image(&mut rng, 40, 40);
    let big_b = noisy(&big_a, 0.2, 1);
    let crop = |img: &Image, oy: usize, ox: usize| {
        let data = (0..30).flat_map(|y| (0..30).map(move |x| (y, x))).map(|(y, x)| img.get(y + oy, x + ox)).collect();
        Image::new(30, 30, data).unwrap()
    };
    // shifting both images by the same amount is the same as comparing the same region
    let s1 = ssim(&crop(&big_a, 5, 7), &crop(&big_b, 5, 7), &p).unwrap();
    let mut shifted_a = Image::filled(40, 40, 0.0);
    let mut shifted_b = Image::filled(40, 40, 0.0);
    for y in 0..35 {
        for x in 0..33 {
            shifted_a.data[y * 40 + x] = big_a.get(y + 5, x + 7);
            shifted_b.data[y * 40 + x] = big_b.get(y + 5, x + 7);
        }
    }
    let s2 = ssim(&crop(&shifted_a, 0, 0), &crop(&shifted_b, 0, 0), &p).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn more_noise_lowers_ssim() {
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = random_image(&mut rng, 48, 48);
    let scores: Vec<f64> = [0.05, 0.2, 0.5].iter().map(|&s| ssim(&base, &noisy(&base, s, 5), &p).unwrap()).collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
}

#[test]
fn mse_and_psnr() {
    let zero = Image::filled(8, 8, 0.0);
    let one = Image::filled(8, 8, 1.0);
    assert_eq!(mse(&zero, &one).unwrap(), 1.0);
    assert_eq!(psnr(&zero, &one, 1.0).unwrap(), Psnr::Finite(0.0));
    assert_eq!(psnr(&one, &one, 1.0).unwrap(), Psnr::Infinite);
    assert_eq!(mse(&one, &one).unwrap(), 0.0);
    match Psnr::from_mse(0.01, 1.0) {
        Psnr::Finite(db) => assert!((db - 20.0).abs() < 1e-12),
        Psnr::Infinite => panic!("finite mse"),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        assert!(mse(&a, &b).unwrap() > 0.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn report_summary_recomputes_from_rows() {
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<EvalRow> = (0..7)
        .map(|i| {
            let a = random_image(&mut rng, 16, 16);
            let b = noisy(&a, 0.1 * (i + 1) as f64, i);
            EvalRow::compare(i as u32, 3, i as usize, &b, &a, &p).unwrap()
        })
        .collect();
    let report = EvalReport { rows };
    let mean = report.rows.iter().map(|r| r.ssim).sum::<f64>() / 7.0;
    assert!((report.mean_ssim() - mean).abs() < 1e-9);

    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let back = EvalReport::parse_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
    assert_eq!(back.rows.len(), 7);
    assert!((back.mean_ssim() - mean).abs() < 1e-9);
}
