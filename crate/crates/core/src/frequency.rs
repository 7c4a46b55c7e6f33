//! Orthonormal 2-D DCT-II over `[C, H, W]` tensors and the low-frequency mask.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// `D[u, i] = c_u cos(pi (i + 1/2) u / n)` with `c_0 = sqrt(1/n)`, `c_u = sqrt(2/n)`.
pub fn dct_matrix(n: usize) -> Tensor {
    let nf = n as f64;
    Tensor::from_fn(vec![n, n], |k| {
        let (u, i) = (k / n, k % n);
        let c = if u == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        c * (PI * (i as f64 + 0.5) * u as f64 / nf).cos()
    })
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    Tensor::from_fn(vec![c, r], |k| m.data()[(k % r) * c + k / r])
}

fn check_spatial(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
        return Err(Error::InvalidShape { shape: shape.to_vec(), reason: "expected [C, H, W] with H, W >= 2".into() });
    }
    Ok((shape[1], shape[2]))
}

/// Per-channel forward transform: rows, then columns.
pub fn dct2<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let (h, w) = check_spatial(&x.shape())?;
    x.linear_along(1, Rc::new(dct_matrix(h)))?.linear_along(2, Rc::new(dct_matrix(w)))
}

/// Exact inverse of [`dct2`].
pub fn idct2<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let (h, w) = check_spatial(&x.shape())?;
    x.linear_along(1, Rc::new(transpose(&dct_matrix(h))))?.linear_along(2, Rc::new(transpose(&dct_matrix(w))))
}

/// Side length of the kept block along an axis of extent `n`. The epsilon
/// absorbs rounding in `sqrt` so that exact squares such as 0.25 are not
/// pushed up by one.
fn kept_extent(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction.sqrt() - 1e-9).ceil() as usize).clamp(1, n)
}

/// Binary `[H, W]` mask with a top-left block of ones covering `fraction` of the area.
pub fn make_lowfreq_mask(h: usize, w: usize, fraction: f64) -> Result<Tensor> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::OutOfRange { what: "mask fraction", detail: format!("{fraction} is not in (0, 1]") });
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("mask extents must be positive"));
    }
    let (kh, kw) = (kept_extent(h, fraction), kept_extent(w, fraction));
    Ok(Tensor::from_fn(vec![h, w], |k| if k / w < kh && k % w < kw { 1.0 } else { 0.0 }))
}

/// `idct2(dct2(x) + delta * mask)`. With `literal` set the mask is applied to
/// the full perturbed spectrum instead, `idct2((dct2(x) + delta) * mask)`,
/// which also low-passes the image itself.
pub fn apply_masked_delta<'t>(x: &Var<'t>, delta: &Var<'t>, mask: &Tensor, literal: bool) -> Result<Var<'t>> {
    let xs = x.shape();
    let (h, w) = check_spatial(&xs)?;
    if delta.shape() != xs {
        return Err(Error::shape("apply_masked_delta", &xs, &delta.shape()));
    }
    if mask.shape() != [h, w] {
        return Err(Error::shape("apply_masked_delta mask", &[h, w], mask.shape()));
    }
    let m = x.tape().constant(mask.clone());
    let spectrum = dct2(x)?;
    let perturbed = if literal { spectrum.add(delta)?.mul(&m)? } else { spectrum.add(&delta.mul(&m)?)? };
    idct2(&perturbed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Tape};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn constant_image_has_only_dc() {
        let tape = Tape::new();
        let c = 0.37;
        let x = tape.constant(Tensor::full(vec![1, 4, 6], c));
        let y = dct2(&x).unwrap().value();
        assert!((y.data()[0] - c * 24f64.sqrt()).abs() < 1e-12);
        assert!(y.data()[1..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn two_by_two_against_double_sum() {
        let tape = Tape::new();
        let img = [[1.0, 0.0], [0.0, 0.0]];
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let y = dct2(&x).unwrap().value();
        let n = 2.0f64;
        let c = |u: usize| if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for u in 0..2 {
            for v in 0..2 {
                let mut s = 0.0;
                for (i, row) in img.iter().enumerate() {
                    for (j, &p) in row.iter().enumerate() {
                        s += p
                            * (PI * (2.0 * i as f64 + 1.0) * u as f64 / (2.0 * n)).cos()
                            * (PI * (2.0 * j as f64 + 1.0) * v as f64 / (2.0 * n)).cos();
                    }
                }
                assert!((y.get(&[0, u, v]) - c(u) * c(v) * s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parseval_and_round_trip() {
        let mut r = rng(5);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![3, 32, 32], |_| r.random_range(-1.0..1.0)));
        let y = dct2(&x).unwrap();
        assert!((y.value().sum_sq().sqrt() - x.value().sum_sq().sqrt()).abs() < 1e-9);
        let back = idct2(&y).unwrap().value();
        assert!(back.max_abs_diff(&x.value()).unwrap() < 1e-9);
    }

    #[test]
    fn dct_matrix_is_orthonormal() {
        for n in [2, 5, 8, 32] {
            let d = dct_matrix(n);
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = (0..n).map(|k| d.get(&[i, k]) * d.get(&[j, k])).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn dc_coefficient_inverts_to_ones() {
        let tape = Tape::new();
        let mut x = Tensor::zeros(vec![1, 4, 4]);
        x.set(&[0, 0, 0], 4.0);
        let y = idct2(&tape.constant(x)).unwrap().value();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn mask_sizes() {
        let m = make_lowfreq_mask(32, 32, 0.25).unwrap();
        assert_eq!(m.sum(), 256.0);
        assert_eq!(m.get(&[15, 15]), 1.0);
        assert_eq!(m.get(&[16, 0]), 0.0);
        assert_eq!(make_lowfreq_mask(8, 8, 0.25).unwrap().sum(), 16.0);
        assert_eq!(make_lowfreq_mask(8, 8, 1.0).unwrap().sum(), 64.0);
        assert!(make_lowfreq_mask(8, 8, 0.0).is_err());
        assert!(make_lowfreq_mask(8, 8, 1.5).is_err());
    }

    #[test]
    fn masked_delta_identities() {
        let mut r = rng(9);
        let tape = Tape::new();
        let (h, w) = (8, 8);
        let x = tape.constant(Tensor::from_fn(vec![3, h, w], |_| r.random::<f64>()));
        let mask = make_lowfreq_mask(h, w, 0.25).unwrap();

        let zero = tape.constant(Tensor::zeros(vec![3, h, w]));
        let out = apply_masked_delta(&x, &zero, &mask, false).unwrap().value();
        assert!(out.max_abs_diff(&x.value()).unwrap() < 1e-9);

        let outside = tape.constant(Tensor::from_fn(vec![3, h, w], |k| 1.0 - mask.data()[k % (h * w)]));
        let out = apply_masked_delta(&x, &outside, &mask, false).unwrap().value();
        assert!(out.max_abs_diff(&x.value()).unwrap() < 1e-9);

        let e = 0.8;
        let mut dc = Tensor::zeros(vec![3, h, w]);
        dc.set(&[1, 0, 0], e);
        let out = apply_masked_delta(&x, &tape.constant(dc), &mask, false).unwrap().value();
        let shift = out.zip_map(&x.value(), |a, b| a - b).unwrap();
        for c in 0..3 {
            let want = if c == 1 { e / 8.0 } else { 0.0 };
            assert!((0..h * w).all(|k| (shift.data()[c * h * w + k] - want).abs() < 1e-12));
        }
    }

    #[test]
    fn literal_mask_lowpasses_the_image() {
        let mut r = rng(2);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![3, 8, 8], |_| r.random::<f64>()));
        let mask = make_lowfreq_mask(8, 8, 0.25).unwrap();
        let zero = tape.constant(Tensor::zeros(vec![3, 8, 8]));
        let out = apply_masked_delta(&x, &zero, &mask, true).unwrap().value();
        assert!(out.max_abs_diff(&x.value()).unwrap() > 1e-3);
    }

    #[test]
    fn gradient_is_masked_idct() {
        let mut r = rng(4);
        let x = Tensor::from_fn(vec![3, 6, 6], |_| r.random::<f64>());
        let w = Tensor::from_fn(vec![3, 6, 6], |_| r.random_range(-1.0..1.0));
        let d0 = Tensor::from_fn(vec![3, 6, 6], |_| r.random_range(-0.1..0.1));
        let mask = make_lowfreq_mask(6, 6, 0.25).unwrap();
        let report = finite_diff_check(
            |d| {
                let tape = d.tape();
                let out = apply_masked_delta(&tape.constant(x.clone()), &d, &mask, false)?;
                Ok(out.mul(&tape.constant(w.clone()))?.sum())
            },
            &d0,
            1e-5,
        )
        .unwrap();
        assert!(report.max_abs_error < 1e-6, "{report:?}");
    }
}
