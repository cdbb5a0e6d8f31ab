//! Synthetic institutions. Each site draws randomized multi-ellipse phantoms
//! and applies its own intensity curve, bias field, lesion rate and noise,
//! so sites differ in distribution the way scanners and cohorts do.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::kspace::{self, MaskSpec};
use crate::seed;

const MAGIC: &[u8; 4] = b"FLMR";
const VERSION: u16 = 1;
pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SiteProfile {
    pub site_id: String,
    pub contrast_gamma: f64,
    pub bias_field_strength: f64,
    pub noise_sigma: f64,
    pub structure_scale: f64,
    pub lesion_probability: f64,
    pub seed: u64,
}

impl SiteProfile {
    /// Plain phantom site: identity intensity curve, no bias, noise or lesions.
    pub fn neutral(site_id: &str, seed: u64) -> Self {
        Self {
            site_id: site_id.to_string(),
            contrast_gamma: 1.0,
            bias_field_strength: 0.0,
            noise_sigma: 0.0,
            structure_scale: 1.0,
            lesion_probability: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.site_id.is_empty()
            && !self.site_id.contains(['\n', '=', ',', '+'])
            && self.contrast_gamma > 0.0
            && self.bias_field_strength >= 0.0
            && self.bias_field_strength < 1.0
            && self.noise_sigma >= 0.0
            && self.structure_scale > 0.0
            && (0.0..=1.0).contains(&self.lesion_probability);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid site profile {self:?}")))
        }
    }

    fn to_lines(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "site_id={}", self.site_id);
        let _ = writeln!(s, "contrast_gamma={:?}", self.contrast_gamma);
        let _ = writeln!(s, "bias_field_strength={:?}", self.bias_field_strength);
        let _ = writeln!(s, "noise_sigma={:?}", self.noise_sigma);
        let _ = writeln!(s, "structure_scale={:?}", self.structure_scale);
        let _ = writeln!(s, "lesion_probability={:?}", self.lesion_probability);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

/// The four default institutions. "C" is the small site.
pub fn default_profiles() -> Vec<SiteProfile> {
    let p = |id: &str, gamma, bias, noise, scale, lesion, seed| SiteProfile {
        site_id: id.to_string(),
        contrast_gamma: gamma,
        bias_field_strength: bias,
        noise_sigma: noise,
        structure_scale: scale,
        lesion_probability: lesion,
        seed,
    };
    vec![
        p("A", 0.6, 0.0, 0.0, 1.0, 0.0, 101),
        p("B", 1.0, 0.3, 0.01, 0.9, 0.3, 202),
        p("C", 1.6, 0.15, 0.02, 0.8, 0.6, 303),
        p("D", 2.4, 0.2, 0.0, 1.1, 0.1, 404),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    pub acceleration: f64,
    pub center_fraction: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            acceleration: 4.0,
            center_fraction: 0.08,
        }
    }
}

/// One training pair: zero-filled input `x`, fully sampled reference `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceSample {
    pub input: Tensor,
    pub reference: Tensor,
    pub mask: MaskSpec,
    pub site_id: String,
}

impl KSpaceSample {
    /// Acquires `reference` through `mask` without noise and scales both
    /// images by the reference maximum.
    pub fn from_reference(reference: Tensor, mask: MaskSpec, site_id: &str) -> Result<Self> {
        let max = reference.data().iter().cloned().fold(0.0, f64::max);
        let reference = if max > 0.0 && max != 1.0 {
            let d = reference.data().iter().map(|v| v / max).collect();
            Tensor::new(reference.shape().to_vec(), d)?
        } else {
            reference
        };
        // Zero noise draws nothing, so any generator will do.
        let input = kspace::acquire(&reference, &mask, 0.0, &mut seed::rng(0, &[]))?;
        Ok(Self {
            input,
            reference,
            mask,
            site_id: site_id.to_string(),
        })
    }

    pub fn image_size(&self) -> usize {
        self.reference.shape()[0]
    }
}

/// Stacks inputs and references into `[n, 1, H, W]` network batches.
pub fn stack_batch(samples: &[&KSpaceSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let shape = first.reference.shape().to_vec();
    let per = first.reference.numel();
    let mut x = Vec::with_capacity(samples.len() * per);
    let mut y = Vec::with_capacity(samples.len() * per);
    for s in samples {
        if s.reference.shape() != shape.as_slice() || s.input.shape() != shape.as_slice() {
            return Err(Error::shape("stack_batch", &shape, s.reference.shape()));
        }
        x.extend_from_slice(s.input.data());
        y.extend_from_slice(s.reference.data());
    }
    let dims = vec![samples.len(), 1, shape[0], shape[1]];
    Ok((Tensor::new(dims.clone(), x)?, Tensor::new(dims, y)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub profile: SiteProfile,
    pub mask_params: MaskParams,
    pub train: Vec<KSpaceSample>,
    pub test: Vec<KSpaceSample>,
}

impl SiteDataset {
    pub fn site_id(&self) -> &str {
        &self.profile.site_id
    }

    pub fn image_size(&self) -> usize {
        self.train
            .first()
            .or(self.test.first())
            .map(KSpaceSample::image_size)
            .unwrap_or(0)
    }

    /// Same site with only the first `n` training samples.
    pub fn with_train_limit(mut self, n: usize) -> Self {
        self.train.truncate(n);
        self
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn random(
        rng: &mut impl Rng,
        center: (f64, f64),
        axes: (f64, f64),
        value: f64,
    ) -> Self {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cx: center.0,
            cy: center.1,
            a: axes.0,
            b: axes.1,
            cos: theta.cos(),
            sin: theta.sin(),
            value,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn grid(size: usize) -> impl Iterator<Item = (usize, f64, f64)> {
    let step = 2.0 / size as f64;
    (0..size * size).map(move |i| {
        let (r, c) = (i / size, i % size);
        (i, -1.0 + (c as f64 + 0.5) * step, -1.0 + (r as f64 + 0.5) * step)
    })
}

fn normalize_max(img: &mut [f64]) {
    let max = img.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        img.iter_mut().for_each(|v| *v /= max);
    }
}

/// One reference image for `profile`, fully determined by `rng`.
pub fn phantom(profile: &SiteProfile, size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s = profile.structure_scale;
    let head_a = (rng.random_range(0.70..0.85) * s).min(0.95);
    let head_b = (rng.random_range(0.80..0.92) * s).min(0.95);
    let head = Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: head_a,
        b: head_b,
        cos: 1.0,
        sin: 0.0,
        value: rng.random_range(0.7..1.0),
    };
    let inner_count = rng.random_range(2..=7);
    let mut ellipses = vec![head];
    for _ in 0..inner_count {
        let (r, t) = (rng.random_range(0.0..0.6f64).sqrt(), rng.random_range(0.0..std::f64::consts::TAU));
        let c = (r * head_a * t.cos(), r * head_b * t.sin());
        let axes = (rng.random_range(0.08..0.35) * s, rng.random_range(0.08..0.35) * s);
        let value = rng.random_range(-0.4..0.3);
        ellipses.push(Ellipse::random(rng, c, axes, value));
    }

    let mut img = vec![0.0; size * size];
    for (i, x, y) in grid(size) {
        let inside_head = ellipses[0].contains(x, y);
        if inside_head {
            img[i] = ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.value)
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
    }
    normalize_max(&mut img);
    img.iter_mut().for_each(|v| *v = v.powf(profile.contrast_gamma));

    if profile.bias_field_strength > 0.0 {
        let (cx, cy, cxy): (f64, f64, f64) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let norm = (cx.abs() + cy.abs() + cxy.abs()).max(1e-12);
        for (i, x, y) in grid(size) {
            let field = (cx * x + cy * y + cxy * x * y) / norm;
            img[i] *= 1.0 + profile.bias_field_strength * field;
        }
    }

    if rng.random_bool(profile.lesion_probability) {
        let (r, t) = (rng.random_range(0.0..0.4f64).sqrt(), rng.random_range(0.0..std::f64::consts::TAU));
        let c = (r * head_a * t.cos(), r * head_b * t.sin());
        let axes = (rng.random_range(0.04..0.10) * s, rng.random_range(0.04..0.10) * s);
        let lesion = Ellipse::random(rng, c, axes, 0.6);
        for (i, x, y) in grid(size) {
            if lesion.contains(x, y) {
                img[i] += lesion.value;
            }
        }
    }

    if profile.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, profile.noise_sigma).expect("sigma validated");
        img.iter_mut()
            .for_each(|v| *v = (*v + normal.sample(rng)).max(0.0));
    }
    normalize_max(&mut img);
    // Stored as f32 on disk; quantize now so save/load is lossless.
    img.iter_mut().for_each(|v| *v = *v as f32 as f64);
    img
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_TEST: u64 = 2;

fn make_sample(
    profile: &SiteProfile,
    split: u64,
    index: usize,
    size: usize,
    mask: MaskParams,
) -> Result<KSpaceSample> {
    let mut img_rng = seed::rng(profile.seed, &[split, index as u64, 0]);
    let mut mask_rng = seed::rng(profile.seed, &[split, index as u64, 1]);
    let reference = Tensor::new(vec![size, size], phantom(profile, size, &mut img_rng))?;
    let mask = kspace::make_mask(size, mask.acceleration, mask.center_fraction, &mut mask_rng)?;
    KSpaceSample::from_reference(reference, mask, &profile.site_id)
}

/// Generates a site's train and test splits. Train and test phantoms use
/// disjoint seed streams; each sample gets its own mask.
pub fn generate_site(
    profile: &SiteProfile,
    n_train: usize,
    n_test: usize,
    image_size: usize,
    mask: MaskParams,
) -> Result<SiteDataset> {
    profile.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::config("sample counts must be positive"));
    }
    if !image_size.is_power_of_two() || image_size < 8 {
        return Err(Error::config(format!("image size {image_size} is not a power of two ≥ 8")));
    }
    let split = |tag: u64, n: usize| -> Result<Vec<KSpaceSample>> {
        (0..n)
            .into_par_iter()
            .map(|i| make_sample(profile, tag, i, image_size, mask))
            .collect()
    };
    Ok(SiteDataset {
        profile: profile.clone(),
        mask_params: mask,
        train: split(SPLIT_TRAIN, n_train)?,
        test: split(SPLIT_TEST, n_test)?,
    })
}

/// Average per-image intensity histogram over `[0, 1]`.
pub fn probe_histogram(samples: &[KSpaceSample]) -> Vec<f64> {
    let mut hist = vec![0.0; HISTOGRAM_BINS];
    for s in samples {
        let n = s.reference.numel() as f64;
        for &v in s.reference.data() {
            let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            hist[b] += 1.0 / n;
        }
    }
    let total: f64 = hist.iter().sum();
    hist.iter_mut().for_each(|h| *h /= total);
    hist
}

/// Jensen–Shannon divergence in nats.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

fn metadata(ds: &SiteDataset) -> String {
    let mut s = ds.profile.to_lines();
    let _ = writeln!(s, "mask.acceleration={:?}", ds.mask_params.acceleration);
    let _ = writeln!(s, "mask.center_fraction={:?}", ds.mask_params.center_fraction);
    let _ = writeln!(s, "split.train={}", ds.train.len());
    s
}

pub fn encode_dataset(ds: &SiteDataset) -> Result<Vec<u8>> {
    if ds.train.is_empty() {
        return Err(Error::EmptyDataset(format!("site {} has no training samples", ds.site_id())));
    }
    let size = ds.image_size();
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.string(&metadata(ds));
    let all: Vec<&KSpaceSample> = ds.train.iter().chain(&ds.test).collect();
    w.u32(all.len() as u32);
    w.u32(size as u32);
    w.u32(size as u32);
    for s in all {
        if s.reference.shape() != [size, size] || s.site_id != ds.site_id() {
            return Err(Error::config(format!("inconsistent sample in site {}", ds.site_id())));
        }
        for &v in s.reference.data() {
            w.f32(v as f32);
        }
        w.u16(s.mask.kept_columns.len() as u16);
        for &c in &s.mask.kept_columns {
            w.u16(c as u16);
        }
    }
    Ok(w.into_inner())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SiteDataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported dataset version {version}"),
        });
    }
    let meta_offset = r.offset();
    let meta = r.string()?;
    let bad_meta = |detail: String| Error::Format {
        offset: meta_offset as u64,
        detail,
    };
    let mut kv = std::collections::BTreeMap::new();
    for line in meta.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad_meta(format!("malformed metadata line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| bad_meta(format!("missing metadata key `{k}`")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| bad_meta(format!("bad number for `{k}`")))
    };
    let int = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| bad_meta(format!("bad integer for `{k}`")))
    };
    let profile = SiteProfile {
        site_id: get("site_id")?,
        contrast_gamma: num("contrast_gamma")?,
        bias_field_strength: num("bias_field_strength")?,
        noise_sigma: num("noise_sigma")?,
        structure_scale: num("structure_scale")?,
        lesion_probability: num("lesion_probability")?,
        seed: int("seed")?,
    };
    profile.validate().map_err(|e| bad_meta(e.to_string()))?;
    let mask_params = MaskParams {
        acceleration: num("mask.acceleration")?,
        center_fraction: num("mask.center_fraction")?,
    };
    let n_train = int("split.train")? as usize;

    let count = r.u32()? as usize;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    if h != w || !h.is_power_of_two() || n_train > count || n_train == 0 {
        return Err(r.error(format!("bad header: {count} samples of {h}×{w}, {n_train} train")));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let start = r.offset();
        let pixels = (0..h * w)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let k = r.u16()? as usize;
        let cols = (0..k)
            .map(|_| r.u16().map(usize::from))
            .collect::<Result<Vec<_>>>()?;
        let mask = MaskSpec::from_columns(w, mask_params.acceleration, mask_params.center_fraction, cols)
            .map_err(|e| Error::Format {
                offset: start as u64,
                detail: e.to_string(),
            })?;
        let reference = Tensor::new(vec![h, w], pixels)?;
        samples.push(KSpaceSample::from_reference(reference, mask, &profile.site_id)?);
    }
    r.expect_end()?;
    let test = samples.split_off(n_train);
    Ok(SiteDataset {
        profile,
        mask_params,
        train: samples,
        test,
    })
}

pub fn save_dataset(ds: &SiteDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SiteDataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// `<dir>/<site_id>.flmr`
pub fn dataset_path(dir: impl AsRef<Path>, site_id: &str) -> std::path::PathBuf {
    dir.as_ref().join(format!("{site_id}.flmr"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(profile: &SiteProfile) -> SiteDataset {
        generate_site(profile, 4, 2, 32, MaskParams::default()).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let p = &default_profiles()[1];
        assert_eq!(small(p), small(p));
    }

    #[test]
    fn references_are_unit_range_and_labelled() {
        for p in default_profiles() {
            let ds = small(&p);
            for s in ds.train.iter().chain(&ds.test) {
                assert_eq!(s.site_id, p.site_id);
                let max = s.reference.data().iter().cloned().fold(f64::MIN, f64::max);
                let min = s.reference.data().iter().cloned().fold(f64::MAX, f64::min);
                assert_eq!(max, 1.0);
                assert!(min >= 0.0);
                s.mask.validate().unwrap();
                assert_eq!(s.mask.kept_columns.len(), 8);
            }
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = small(&default_profiles()[0]);
        for a in &ds.train {
            assert!(ds.test.iter().all(|b| a.reference != b.reference));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let p = SiteProfile::neutral("N", 1);
        assert!(generate_site(&p, 2, 2, 48, MaskParams::default()).is_err());
        assert!(generate_site(&p, 0, 2, 32, MaskParams::default()).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small(&default_profiles()[2]);
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert!(back
            .train
            .iter()
            .zip(&ds.train)
            .all(|(a, b)| a.input.bit_eq(&b.input) && a.reference.bit_eq(&b.reference)));
    }

    #[test]
    fn wrong_magic_reports_offset_zero() {
        let mut bytes = encode_dataset(&small(&default_profiles()[0])).unwrap();
        bytes[0] = b'X';
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode_dataset(&small(&default_profiles()[0])).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_dataset(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_train_split_is_rejected_on_save() {
        let mut ds = small(&default_profiles()[0]);
        ds.train.clear();
        assert!(matches!(encode_dataset(&ds), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn jensen_shannon_basics() {
        let p = [0.5, 0.5, 0.0];
        let q = [0.0, 0.5, 0.5];
        assert_eq!(jensen_shannon(&p, &p), 0.0);
        let d = jensen_shannon(&p, &q);
        assert!((d - jensen_shannon(&q, &p)).abs() < 1e-15);
        assert!(d > 0.0 && d <= std::f64::consts::LN_2);
    }
}
