mod common;

use common::rng;
use fedrecon_core::metrics::{
    evaluate, evaluate_with, evaluate_zero_filled, export_latents, psnr, ssim, ReportMeta,
};
use fedrecon_core::model::{UNet, UNetConfig};
use fedrecon_core::sites::{default_profiles, generate_site, MaskParams};
use fedrecon_core::{seed, Tensor};
use rand::Rng;

fn random_image(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n, n], (0..n * n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn psnr_oracle(a: &[f64], b: &[f64], range: f64) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]).powi(2);
    }
    let mse = se / a.len() as f64;
    20.0 * range.log10() - 10.0 * mse.log10()
}

/// Direct windowed SSIM: 2-D Gaussian weights evaluated per offset, every
/// statistic summed explicitly at every valid window position.
fn ssim_oracle(a: &[f64], b: &[f64], n: usize, range: f64) -> f64 {
    let mut weights = [[0.0; 11]; 11];
    let mut norm = 0.0;
    for (dy, row) in weights.iter_mut().enumerate() {
        for (dx, wt) in row.iter_mut().enumerate() {
            let r2 = ((dy as f64 - 5.0).powi(2) + (dx as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *wt = (-r2).exp();
            norm += *wt;
        }
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=n - 11 {
        for x in 0..=n - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let w = weights[dy][dx] / norm;
                    ma += w * a[(y + dy) * n + x + dx];
                    mb += w * b[(y + dy) * n + x + dx];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let w = weights[dy][dx] / norm;
                    let (p, q) = (a[(y + dy) * n + x + dx] - ma, b[(y + dy) * n + x + dx] - mb);
                    va += w * p * p;
                    vb += w * q * q;
                    cov += w * p * q;
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn psnr_matches_direct_formula() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (a, b) = (random_image(&mut r, 16), random_image(&mut r, 16));
        let range = r.random_range(0.5..2.0);
        let got = psnr(&a, &b, range).unwrap();
        assert!((got - psnr_oracle(a.data(), b.data(), range)).abs() < 1e-10);
    }
}

#[test]
fn psnr_gains_three_db_when_mse_halves() {
    let mut r = rng(12);
    let reference = random_image(&mut r, 16);
    let noise: Vec<f64> = (0..256).map(|_| r.random_range(-0.1..0.1)).collect();
    let shifted = |scale: f64| {
        let d = reference.data().iter().zip(&noise).map(|(v, e)| v + scale * e).collect();
        Tensor::new(vec![16, 16], d).unwrap()
    };
    let full = psnr(&shifted(1.0), &reference, 1.0).unwrap();
    let half = psnr(&shifted(0.5f64.sqrt()), &reference, 1.0).unwrap();
    assert!((half - full - 10.0 * 2f64.log10()).abs() < 1e-9);
    assert!((10.0 * 2f64.log10() - 3.0103).abs() < 1e-4);
}

#[test]
fn ssim_matches_direct_formula() {
    let mut r = rng(13);
    for _ in 0..20 {
        let a = random_image(&mut r, 32);
        let b = random_image(&mut r, 32);
        let got = ssim(&a, &b, 1.0).unwrap();
        let want = ssim_oracle(a.data(), b.data(), 32, 1.0);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!((-1.0..=1.0).contains(&got));
        assert!((got - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ssim_of_inverted_checkerboard_is_negative() {
    let n = 32;
    let t: Vec<f64> = (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect();
    let inv: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
    let want = ssim_oracle(&t, &inv, n, 1.0);
    assert!(want < 0.0);
    let got = ssim(
        &Tensor::new(vec![n, n], t.clone()).unwrap(),
        &Tensor::new(vec![n, n], inv).unwrap(),
        1.0,
    )
    .unwrap();
    assert!((got - want).abs() < 1e-10);
    let t = Tensor::new(vec![n, n], t).unwrap();
    assert_eq!(ssim(&t, &t, 1.0).unwrap(), 1.0);
}

#[test]
fn evaluation_reports_are_consistent() {
    let profile = default_profiles().remove(0);
    let ds = generate_site(&profile, 4, 6, 32, MaskParams::default()).unwrap();
    let meta = ReportMeta { strategy: "oracle".into(), test_site: "A".into(), ..Default::default() };

    let oracle = evaluate_with(&ds.test, meta.clone(), |s| Ok(s.reference.clone())).unwrap();
    assert_eq!(oracle.mean_ssim, 1.0);
    assert_eq!(oracle.mean_psnr, f64::INFINITY);

    let floor = evaluate_zero_filled(&ds.test, meta.clone()).unwrap();
    assert_eq!(floor.per_sample.len(), 6);
    let hand: f64 = floor.per_sample.iter().map(|m| m.psnr).sum::<f64>() / 6.0;
    assert!((floor.mean_psnr - hand).abs() < 1e-12);
    let hand: f64 = floor.per_sample.iter().map(|m| m.ssim).sum::<f64>() / 6.0;
    assert!((floor.mean_ssim - hand).abs() < 1e-12);
    assert!(floor.mean_psnr.is_finite() && floor.mean_ssim < 1.0);

    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.init(&mut seed::rng(1, &[]));
    let a = evaluate(&net, &params, &ds.test, meta.clone()).unwrap();
    assert_eq!(a, evaluate(&net, &params, &ds.test, meta).unwrap());
    assert!(evaluate_zero_filled(&[], ReportMeta::default()).is_err());
}

#[test]
fn latent_export_has_one_row_per_sample() {
    let profile = default_profiles().remove(1);
    let ds = generate_site(&profile, 3, 5, 32, MaskParams::default()).unwrap();
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.init(&mut seed::rng(2, &[]));
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_latents(&net, &params, &ds.test, &p1).unwrap();
    export_latents(&net, &params, &ds.test, &p2).unwrap();
    let text = std::fs::read_to_string(&p1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 5);
    let dim = 32 * 4 * 4;
    assert_eq!(lines[0].split(',').count(), dim + 1);
    assert!(lines[0].starts_with("site_id,f0,f1,"));
    for row in &lines[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], "B");
        assert_eq!(cells.len(), dim + 1);
    }
}
