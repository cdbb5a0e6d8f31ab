//! Cartesian MR acquisition model: orthonormal 2-D FFT, random column
//! undersampling masks and zero-filled reconstruction,
//! `x = |F⁻¹(M ⊙ (F y + ε))|`.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || re.len() != height * width || im.len() != re.len() {
            return Err(Error::shape("complex image", &[height, width], &[re.len(), im.len()]));
        }
        Ok(Self { height, width, re, im })
    }

    pub fn from_real(height: usize, width: usize, re: Vec<f64>) -> Result<Self> {
        let im = vec![0.0; re.len()];
        Self::new(height, width, re, im)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).sum()
    }
}

/// In-place iterative radix-2 FFT over one strided line. `sign` is −1 for
/// the forward transform and +1 for the inverse; no scaling is applied.
fn fft_line(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (s, c) = (ang * k as f64).sin_cos();
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

fn transform(img: &ComplexImage, sign: f64) -> Result<ComplexImage> {
    let (h, w) = (img.height, img.width);
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Domain {
            op: "fft2",
            detail: format!("dimensions {h}×{w} are not powers of two"),
        });
    }
    let mut out = img.clone();
    for row in 0..h {
        let r = row * w..(row + 1) * w;
        fft_line(&mut out.re[r.clone()], &mut out.im[r], sign);
    }
    let (mut cr, mut ci) = (vec![0.0; h], vec![0.0; h]);
    for col in 0..w {
        for row in 0..h {
            cr[row] = out.re[row * w + col];
            ci[row] = out.im[row * w + col];
        }
        fft_line(&mut cr, &mut ci, sign);
        for row in 0..h {
            out.re[row * w + col] = cr[row];
            out.im[row * w + col] = ci[row];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    out.re.iter_mut().chain(out.im.iter_mut()).for_each(|v| *v *= scale);
    Ok(out)
}

/// Orthonormal forward 2-D DFT (scaled by `1/√(HW)`).
pub fn fft2(img: &ComplexImage) -> Result<ComplexImage> {
    transform(img, -1.0)
}

/// Orthonormal inverse 2-D DFT.
pub fn ifft2(img: &ComplexImage) -> Result<ComplexImage> {
    transform(img, 1.0)
}

/// Columns ordered from lowest to highest |frequency| in unshifted FFT
/// layout: 0, 1, W−1, 2, W−2, …
pub fn columns_by_frequency(width: usize) -> Vec<usize> {
    let mut order = vec![0];
    for f in 1..=width / 2 {
        order.push(f);
        if width - f != f {
            order.push(width - f);
        }
    }
    order
}

/// Cartesian column-sampling pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub width: usize,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub kept_columns: Vec<usize>,
}

impl MaskSpec {
    pub fn kept_count(width: usize, acceleration: f64) -> usize {
        (width as f64 / acceleration).round() as usize
    }

    pub fn center_count(width: usize, center_fraction: f64) -> usize {
        ((center_fraction * width as f64).round() as usize).max(1)
    }

    /// Mask that keeps every column.
    pub fn full(width: usize) -> Self {
        Self {
            width,
            acceleration: 1.0,
            center_fraction: 1.0,
            kept_columns: (0..width).collect(),
        }
    }

    /// Rebuilds a mask from stored columns, checking every invariant.
    pub fn from_columns(
        width: usize,
        acceleration: f64,
        center_fraction: f64,
        kept_columns: Vec<usize>,
    ) -> Result<Self> {
        let spec = Self {
            width,
            acceleration,
            center_fraction,
            kept_columns,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let cols = &self.kept_columns;
        if cols.windows(2).any(|p| p[0] >= p[1]) || cols.iter().any(|&c| c >= self.width) {
            return Err(Error::config("mask columns must be sorted, unique and in range"));
        }
        if self.acceleration != 1.0 || self.center_fraction != 1.0 {
            if cols.len() != Self::kept_count(self.width, self.acceleration) {
                return Err(Error::config(format!(
                    "mask keeps {} columns, expected {}",
                    cols.len(),
                    Self::kept_count(self.width, self.acceleration)
                )));
            }
            let center = Self::center_count(self.width, self.center_fraction);
            if !columns_by_frequency(self.width)[..center]
                .iter()
                .all(|c| cols.binary_search(c).is_ok())
            {
                return Err(Error::config("mask is missing a low-frequency center column"));
            }
        }
        Ok(())
    }

    pub fn column_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.width];
        self.kept_columns.iter().for_each(|&c| m[c] = true);
        m
    }
}

/// Random column mask: the lowest-frequency `max(1, round(cf·W))` columns
/// plus uniformly drawn extra columns up to `round(W/AF)` in total.
pub fn make_mask(
    width: usize,
    acceleration: f64,
    center_fraction: f64,
    rng: &mut impl Rng,
) -> Result<MaskSpec> {
    if width == 0 || !(acceleration >= 1.0) || !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::config(format!(
            "invalid mask parameters: width {width}, acceleration {acceleration}, center fraction {center_fraction}"
        )));
    }
    let keep = MaskSpec::kept_count(width, acceleration);
    let center = MaskSpec::center_count(width, center_fraction);
    if keep < center {
        return Err(Error::config(format!(
            "acceleration {acceleration} keeps {keep} columns, fewer than the {center} center columns"
        )));
    }
    let order = columns_by_frequency(width);
    let mut kept: Vec<usize> = order[..center].to_vec();
    let rest = &order[center..];
    kept.extend(index::sample(rng, rest.len(), keep - center).into_iter().map(|i| rest[i]));
    kept.sort_unstable();
    Ok(MaskSpec {
        width,
        acceleration,
        center_fraction,
        kept_columns: kept,
    })
}

/// Projects a complex image onto the sampled columns of k-space.
pub fn zero_fill(img: &ComplexImage, mask: &MaskSpec) -> Result<ComplexImage> {
    if mask.width != img.width {
        return Err(Error::shape("zero_fill", &[img.height, img.width], &[mask.width]));
    }
    let mut k = fft2(img)?;
    apply_mask(&mut k, mask);
    ifft2(&k)
}

fn apply_mask(k: &mut ComplexImage, mask: &MaskSpec) {
    let keep = mask.column_mask();
    for (i, (r, im)) in k.re.iter_mut().zip(k.im.iter_mut()).enumerate() {
        if !keep[i % mask.width] {
            *r = 0.0;
            *im = 0.0;
        }
    }
}

/// Simulated under-sampled acquisition of an `[H, W]` magnitude image.
/// With `noise_sigma == 0` no random numbers are drawn.
pub fn acquire(
    reference: &Tensor,
    mask: &MaskSpec,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (h, w) = match *reference.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::shape("acquire", s, &[mask.width, mask.width])),
    };
    if mask.width != w {
        return Err(Error::shape("acquire", reference.shape(), &[h, mask.width]));
    }
    let img = ComplexImage::from_real(h, w, reference.data().to_vec())?;
    let mut k = fft2(&img)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::config(e.to_string()))?;
        for (r, i) in k.re.iter_mut().zip(k.im.iter_mut()) {
            *r += normal.sample(rng);
            *i += normal.sample(rng);
        }
    }
    apply_mask(&mut k, mask);
    let x = ifft2(&k)?;
    Tensor::new(vec![h, w], x.magnitude())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn random_image(h: usize, w: usize, s: u64) -> ComplexImage {
        let mut r = seed::rng(s, &[]);
        let re = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let im = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        ComplexImage::new(h, w, re, im).unwrap()
    }

    /// Direct O(N²) DFT, independent of the butterfly code.
    fn naive_dft(img: &ComplexImage) -> ComplexImage {
        let (h, w) = (img.height(), img.width());
        let mut out = ComplexImage::zeros(h, w);
        let tau = 2.0 * std::f64::consts::PI;
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -tau * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let (s, c) = ang.sin_cos();
                        let (a, b) = (img.re[y * w + x], img.im[y * w + x]);
                        sr += a * c - b * s;
                        si += a * s + b * c;
                    }
                }
                let n = ((h * w) as f64).sqrt();
                out.re[u * w + v] = sr / n;
                out.im[u * w + v] = si / n;
            }
        }
        out
    }

    #[test]
    fn matches_direct_dft() {
        let img = random_image(8, 16, 3);
        let fast = fft2(&img).unwrap();
        let slow = naive_dft(&img);
        for (a, b) in fast.re.iter().chain(&fast.im).zip(slow.re.iter().chain(&slow.im)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut img = ComplexImage::zeros(16, 16);
        img.re[0] = 1.0;
        let k = fft2(&img).unwrap();
        for (r, i) in k.re.iter().zip(&k.im) {
            assert!((r - 1.0 / 16.0).abs() < 1e-15 && i.abs() < 1e-15);
        }
    }

    #[test]
    fn constant_image_is_dc_only() {
        let c = 0.37;
        let img = ComplexImage::from_real(8, 8, vec![c; 64]).unwrap();
        let k = fft2(&img).unwrap();
        assert!((k.re[0] - c * 8.0).abs() < 1e-14);
        assert!(k.re[1..].iter().chain(&k.im).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn round_trip_and_parseval() {
        let img = random_image(32, 32, 11);
        let k = fft2(&img).unwrap();
        assert!((k.energy() - img.energy()).abs() / img.energy() < 1e-10);
        let back = ifft2(&k).unwrap();
        let err = back
            .re
            .iter()
            .chain(&back.im)
            .zip(img.re.iter().chain(&img.im))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let img = ComplexImage::zeros(12, 16);
        assert!(fft2(&img).is_err());
    }

    #[test]
    fn mask_counts_follow_the_rule() {
        let mut r = seed::rng(1, &[]);
        let m = make_mask(32, 4.0, 0.08, &mut r).unwrap();
        assert_eq!(m.kept_columns.len(), 8);
        for c in [0, 1, 31] {
            assert!(m.kept_columns.contains(&c));
        }
        m.validate().unwrap();
        let full = make_mask(32, 1.0, 0.08, &mut r).unwrap();
        assert_eq!(full.kept_columns, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let a = make_mask(64, 4.0, 0.08, &mut seed::rng(9, &[])).unwrap();
        let b = make_mask(64, 4.0, 0.08, &mut seed::rng(9, &[])).unwrap();
        let c = make_mask(64, 4.0, 0.08, &mut seed::rng(10, &[])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mask_rejects_too_few_columns() {
        // 16/8 = 2 kept columns but 0.3·16 ≈ 5 center columns.
        assert!(make_mask(16, 8.0, 0.3, &mut seed::rng(0, &[])).is_err());
    }

    #[test]
    fn zero_filling_is_a_projection() {
        let img = random_image(32, 32, 5);
        let m = make_mask(32, 4.0, 0.08, &mut seed::rng(2, &[])).unwrap();
        let once = zero_fill(&img, &m).unwrap();
        let twice = zero_fill(&once, &m).unwrap();
        let d = once
            .re
            .iter()
            .chain(&once.im)
            .zip(twice.re.iter().chain(&twice.im))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-10);
    }

    #[test]
    fn full_mask_without_noise_reproduces_reference() {
        let mut r = seed::rng(4, &[]);
        let data: Vec<f64> = (0..32 * 32).map(|_| r.random_range(0.0..1.0)).collect();
        let reference = Tensor::new(vec![32, 32], data).unwrap();
        let x = acquire(&reference, &MaskSpec::full(32), 0.0, &mut r).unwrap();
        for (a, b) in x.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_reference_stays_zero() {
        let m = make_mask(16, 4.0, 0.08, &mut seed::rng(1, &[])).unwrap();
        let x = acquire(&Tensor::zeros(&[16, 16]), &m, 0.0, &mut seed::rng(1, &[])).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn acquire_checks_mask_width() {
        let m = MaskSpec::full(16);
        assert!(acquire(&Tensor::zeros(&[32, 32]), &m, 0.0, &mut seed::rng(1, &[])).is_err());
    }
}
