//! Server-side parameter averaging.

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Mean of `values` computed as `min + Σ (v − min) / K` over the values in
/// ascending order: independent of client order and exact when all values
/// agree.
pub(crate) fn ordered_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let lo = values[0];
    let spread: f64 = values.iter().map(|v| v - lo).sum();
    if spread == 0.0 {
        return lo;
    }
    lo + spread / values.len() as f64
}

fn ordered_weighted_mean(pairs: &mut [(f64, f64)]) -> f64 {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let lo = pairs[0].0;
    let spread: f64 = pairs.iter().map(|(v, w)| w * (v - lo)).sum();
    if spread == 0.0 {
        return lo;
    }
    lo + spread
}

fn check_uploads(uploads: &[ParamSet]) -> Result<()> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Protocol("aggregate needs at least one upload".into()))?;
    uploads[1..].iter().try_for_each(|u| first.check_compatible(u))
}

fn combine(uploads: &[ParamSet], mut mean: impl FnMut(usize, &[f64]) -> f64) -> ParamSet {
    let mut out = ParamSet::new();
    let mut column = vec![0.0; uploads.len()];
    for (e, (name, t)) in uploads[0].iter().enumerate() {
        let tensors: Vec<&Tensor> = uploads.iter().map(|u| u.iter().nth(e).expect("compatible").1).collect();
        let data = (0..t.numel())
            .map(|i| {
                for (c, src) in column.iter_mut().zip(&tensors) {
                    *c = src.data()[i];
                }
                mean(i, &column)
            })
            .collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data).expect("same shape"))
            .expect("unique names");
    }
    out
}

/// Unweighted elementwise mean of the uploads.
pub fn aggregate(uploads: &[ParamSet]) -> Result<ParamSet> {
    check_uploads(uploads)?;
    if uploads.len() == 1 {
        return Ok(detach_all(&uploads[0]));
    }
    let mut scratch = vec![0.0; uploads.len()];
    Ok(combine(uploads, |_, col| {
        scratch.copy_from_slice(col);
        ordered_mean(&mut scratch)
    }))
}

/// Elementwise mean weighted by `weights` (normalized here), e.g. dataset sizes.
pub fn aggregate_weighted(uploads: &[ParamSet], weights: &[f64]) -> Result<ParamSet> {
    check_uploads(uploads)?;
    if weights.len() != uploads.len() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Protocol(format!("invalid aggregation weights {weights:?}")));
    }
    if uploads.len() == 1 {
        return Ok(detach_all(&uploads[0]));
    }
    let total: f64 = weights.iter().sum();
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut scratch: Vec<(f64, f64)> = vec![(0.0, 0.0); uploads.len()];
    Ok(combine(uploads, |_, col| {
        for ((s, v), w) in scratch.iter_mut().zip(col).zip(&norm) {
            *s = (*v, *w);
        }
        ordered_weighted_mean(&mut scratch)
    }))
}

fn detach_all(p: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, t) in p.iter() {
        out.insert(n, t.detached()).expect("unique names");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn mean_of_three_scalars() {
        let out = aggregate(&[scalar_set(0.0), scalar_set(3.0), scalar_set(6.0)]).unwrap();
        assert_eq!(out.get("x").unwrap().item(), 3.0);
    }

    #[test]
    fn single_upload_is_identity() {
        let p = scalar_set(0.1 + 0.2);
        assert!(aggregate(&[p.clone()]).unwrap().bit_eq(&p));
        assert!(aggregate_weighted(&[p.clone()], &[5.0]).unwrap().bit_eq(&p));
    }

    #[test]
    fn repeated_uploads_are_a_fixed_point() {
        for v in [0.1, -0.7, 1e-300, -0.0, 12345.678] {
            let p = scalar_set(v);
            let out = aggregate(&vec![p.clone(); 7]).unwrap();
            assert_eq!(out.get("x").unwrap().item().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn errors_name_the_mismatch() {
        let mut other = ParamSet::new();
        other.insert("y", Tensor::scalar(1.0)).unwrap();
        match aggregate(&[scalar_set(1.0), other]) {
            Err(Error::Incompatible(name)) => assert_eq!(name, "x"),
            e => panic!("{e:?}"),
        }
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn weighted_mean() {
        let out = aggregate_weighted(&[scalar_set(0.0), scalar_set(4.0)], &[3.0, 1.0]).unwrap();
        assert_eq!(out.get("x").unwrap().item(), 1.0);
    }
}
