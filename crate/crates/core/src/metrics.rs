//! Image-quality metrics (PSNR, SSIM), evaluation reports and latent export.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::model::UNet;
use crate::sites::{stack_batch, KSpaceSample};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn image_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let s = a.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::Domain {
            op,
            detail: format!("expected a single image, got shape {s:?}"),
        });
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn check_range(op: &'static str, data_range: f64) -> Result<()> {
    if data_range > 0.0 && data_range.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            op,
            detail: format!("data_range must be positive, got {data_range}"),
        })
    }
}

/// `max(reference) − min(reference)`.
pub fn data_range(reference: &Tensor) -> f64 {
    let (lo, hi) = reference
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Peak signal-to-noise ratio in dB; `+∞` when the images are identical.
pub fn psnr(pred: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape("psnr", pred.shape(), reference.shape()));
    }
    check_range("psnr", data_range)?;
    let mse = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable "valid" Gaussian filtering of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid 11×11 Gaussian windows.
pub fn ssim(pred: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    let (h, w) = image_dims("ssim", pred, reference)?;
    check_range("ssim", data_range)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain {
            op: "ssim",
            detail: format!("image {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        });
    }
    let taps = gaussian_taps();
    let (a, b) = (pred.data(), reference.data());
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &taps);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

mod float_or_inf {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            Err(serde::ser::Error::custom(format!("unrepresentable metric {v}")))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("bad metric value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub ssim: f64,
    #[serde(with = "float_or_inf")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub strategy: String,
    pub train_sites: Vec<String>,
    pub test_site: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub mean_ssim: f64,
    #[serde(with = "float_or_inf")]
    pub mean_psnr: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn from_samples(meta: ReportMeta, per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::EmptyDataset("no samples to evaluate".into()));
        }
        let n = per_sample.len() as f64;
        let mean_ssim = per_sample.iter().map(|m| m.ssim).sum::<f64>() / n;
        let mean_psnr = per_sample.iter().map(|m| m.psnr).sum::<f64>() / n;
        Ok(Self {
            meta,
            mean_ssim,
            mean_psnr,
            per_sample,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Scores `predict(sample)` against each sample's reference.
pub fn evaluate_with<F>(samples: &[KSpaceSample], meta: ReportMeta, predict: F) -> Result<MetricsReport>
where
    F: Fn(&KSpaceSample) -> Result<Tensor> + Sync,
{
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to evaluate".into()));
    }
    let per_sample = samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let pred = predict(s)?;
            let pred = pred.reshape(s.reference.shape().to_vec())?;
            let range = data_range(&s.reference);
            Ok(SampleMetrics {
                index,
                ssim: ssim(&pred, &s.reference, range)?,
                psnr: psnr(&pred, &s.reference, range)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_samples(meta, per_sample)
}

/// Runs the reconstruction network on every sample (one at a time, so the
/// result does not depend on batching or thread count).
pub fn evaluate(net: &UNet, params: &ParamSet, samples: &[KSpaceSample], meta: ReportMeta) -> Result<MetricsReport> {
    evaluate_with(samples, meta, |s| {
        let (x, _) = stack_batch(&[s])?;
        net.reconstruct(params, &x)
    })
}

/// The "no model" floor: the zero-filled input itself.
pub fn evaluate_zero_filled(samples: &[KSpaceSample], meta: ReportMeta) -> Result<MetricsReport> {
    evaluate_with(samples, meta, |s| Ok(s.input.clone()))
}

/// Writes one CSV row per sample: `site_id,f0,…,f{N−1}` with the flattened
/// bottleneck latent.
pub fn export_latents(net: &UNet, params: &ParamSet, samples: &[KSpaceSample], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_latents(net, params, samples, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_latents(net: &UNet, params: &ParamSet, samples: &[KSpaceSample], mut out: impl Write) -> Result<()> {
    let latents = samples
        .par_iter()
        .map(|s| {
            let (x, _) = stack_batch(&[s])?;
            net.encode_latent(params, &x, &s.site_id)
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = match samples.first() {
        Some(s) => {
            let l = net.config().latent_size(s.image_size());
            net.config().latent_channels() * l * l
        }
        None => 0,
    };
    let header: Vec<String> = std::iter::once("site_id".to_string())
        .chain((0..dim).map(|i| format!("f{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for z in &latents {
        let mut line = z.origin_site.clone();
        for v in z.features.data() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
