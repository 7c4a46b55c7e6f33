//! Differentiable sRGB <-> CIELAB (D65) conversion.
//!
//! Images are `[3, H, W]` tensors. All conversions run on the tape so that a
//! chroma perturbation can be differentiated through the return trip to RGB.

use std::rc::Rc;

use crate::autodiff::{Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};

/// Linear sRGB -> XYZ under D65.
pub const RGB_TO_XYZ: [[f64; 3]; 3] =
    [[0.4124564, 0.3575761, 0.1804375], [0.2126729, 0.7151522, 0.0721750], [0.0193339, 0.1191920, 0.9503041]];

/// D65 reference white `(X_n, Y_n, Z_n)`.
pub const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

const F_OFFSET: f64 = 4.0 / 29.0;

/// Native a*/b* units per unit of Lab budget: a budget of `16/255` allows
/// `±16` on each chroma channel.
pub fn lab_delta_scale() -> f64 {
    255.0
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // cyclic cofactor form of the adjugate; the sign is built in
            let (j1, j2, i1, i2) = ((j + 1) % 3, (j + 2) % 3, (i + 1) % 3, (i + 2) % 3);
            *v = (m[j1][i1] * m[j2][i2] - m[j1][i2] * m[j2][i1]) / det;
        }
    }
    inv
}

fn mat(rows: [[f64; 3]; 3]) -> Rc<Tensor> {
    Rc::new(Tensor::from_fn(vec![3, 3], |k| rows[k / 3][k % 3]))
}

/// Linear RGB -> white-normalized XYZ, i.e. `diag(1/white) * M`.
fn rgb_to_xyzn() -> [[f64; 3]; 3] {
    let mut m = RGB_TO_XYZ;
    for (row, w) in m.iter_mut().zip(WHITE_D65) {
        for v in row.iter_mut() {
            *v /= w;
        }
    }
    m
}

/// Maps `f(t) - 4/29` for `(X, Y, Z)` onto `(L*, a*, b*)`. Subtracting the
/// offset first keeps `L*` of black at exactly zero.
const F_TO_LAB: [[f64; 3]; 3] = [[0.0, 116.0, 0.0], [500.0, -500.0, 0.0], [0.0, 200.0, -200.0]];

fn check_image(shape: &[usize], what: &str) -> Result<()> {
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape { shape: shape.to_vec(), reason: format!("{what} must have shape [3, H, W]") });
    }
    Ok(())
}

fn check_unit_range(x: &Var<'_>) -> Result<()> {
    x.with_value(|t| match t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::OutOfRange { what: "sRGB value", detail: format!("element {i} = {} is outside [0, 1]", t.data()[i]) }),
        None => Ok(()),
    })
}

/// sRGB EOTF, elementwise. Rejects values outside `[0, 1]`.
pub fn srgb_to_linear<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    check_unit_range(x)?;
    Ok(x.unary(Unary::SrgbToLinear))
}

/// Inverse EOTF. Accepts any real input; values beyond `[0, 1]` follow the
/// analytic continuation of the two branches.
pub fn linear_to_srgb<'t>(x: &Var<'t>) -> Var<'t> {
    x.unary(Unary::LinearToSrgb)
}

/// `[3, H, W]` sRGB in `[0, 1]` to `[3, H, W]` CIELAB.
pub fn rgb_to_lab<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    check_image(&x.shape(), "RGB image")?;
    let lin = srgb_to_linear(x)?;
    let xyzn = lin.linear_along(0, mat(rgb_to_xyzn()))?;
    let g = xyzn.unary(Unary::LabF).add_scalar(-F_OFFSET);
    g.linear_along(0, mat(F_TO_LAB))
}

/// CIELAB to sRGB. Out-of-gamut results are clipped into `[0, 1]`.
pub fn lab_to_rgb<'t>(lab: &Var<'t>) -> Result<Var<'t>> {
    check_image(&lab.shape(), "Lab image")?;
    let g = lab.linear_along(0, mat(invert3(&F_TO_LAB)))?;
    let xyzn = g.add_scalar(F_OFFSET).unary(Unary::LabFInv);
    let lin = xyzn.linear_along(0, mat(invert3(&rgb_to_xyzn())))?;
    Ok(linear_to_srgb(&lin).clip(0.0, 1.0))
}

/// Off-tape conversion of a concrete image.
pub fn rgb_to_lab_tensor(x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(rgb_to_lab(&tape.constant(x.clone()))?.value())
}

/// Off-tape inverse conversion.
pub fn lab_to_rgb_tensor(lab: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(lab_to_rgb(&tape.constant(lab.clone()))?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::{Rng, SeedableRng};

    /// Independent scalar implementation used as an oracle.
    fn reference_lab(rgb: [f64; 3]) -> [f64; 3] {
        let lin = rgb.map(|v| if v <= 0.04045 { v / 12.92 } else { ((v + 0.055) / 1.055).powf(2.4) });
        let mut xyz = [0.0; 3];
        for r in 0..3 {
            for c in 0..3 {
                xyz[r] += RGB_TO_XYZ[r][c] * lin[c];
            }
        }
        let f = |t: f64| {
            let d: f64 = 6.0 / 29.0;
            if t > d * d * d {
                t.cbrt()
            } else {
                t / (3.0 * d * d) + 4.0 / 29.0
            }
        };
        let (fx, fy, fz) = (f(xyz[0] / 0.95047), f(xyz[1] / 1.0), f(xyz[2] / 1.08883));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    fn pixel(rgb: [f64; 3]) -> Tensor {
        Tensor::new(vec![3, 1, 1], rgb.to_vec()).unwrap()
    }

    #[test]
    fn eotf_fixed_points_and_knee() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 1.0, 0.04045]).unwrap());
        let y = srgb_to_linear(&x).unwrap().value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
        assert!((y.data()[2] - 0.04045 / 12.92).abs() < 1e-15);
        assert!((y.data()[2] - 0.0031308).abs() < 1e-7);
    }

    #[test]
    fn eotf_round_trip_on_grid() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![256], |i| i as f64 / 255.0));
        let back = linear_to_srgb(&srgb_to_linear(&x).unwrap()).value();
        assert!(back.max_abs_diff(&x.value()).unwrap() < 1e-12);
    }

    #[test]
    fn out_of_range_rgb_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.5, 1.2]).unwrap());
        assert!(matches!(srgb_to_linear(&x), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn black_is_exactly_zero() {
        let lab = rgb_to_lab_tensor(&pixel([0.0; 3])).unwrap();
        assert_eq!(lab.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn white_maps_to_l100() {
        let lab = rgb_to_lab_tensor(&pixel([1.0; 3])).unwrap();
        assert!((lab.data()[0] - 100.0).abs() < 1e-3, "{:?}", lab.data());
        assert!(lab.data()[1].abs() < 0.01 && lab.data()[2].abs() < 0.01);
        let rgb = lab_to_rgb_tensor(&pixel([100.0, 0.0, 0.0])).unwrap();
        assert!(rgb.data().iter().all(|v| (v - 1.0).abs() < 1e-4), "{:?}", rgb.data());
    }

    #[test]
    fn matches_reference_formula() {
        for rgb in [[0.5, 0.5, 0.5], [0.2, 0.7, 0.1], [0.01, 0.02, 0.9]] {
            let lab = rgb_to_lab_tensor(&pixel(rgb)).unwrap();
            let want = reference_lab(rgb);
            for c in 0..3 {
                assert!((lab.data()[c] - want[c]).abs() < 1e-6, "{rgb:?}: {:?} vs {want:?}", lab.data());
            }
        }
    }

    #[test]
    fn round_trip_random_colors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(vec![3, 10, 100], |_| rng.random::<f64>());
        let back = lab_to_rgb_tensor(&rgb_to_lab_tensor(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(vec![3, 2, 2], |_| rng.random_range(0.1..0.9));
        let w = Tensor::from_fn(vec![3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let r = finite_diff_check(
            |v| {
                let lab = rgb_to_lab(&v)?;
                lab.mul(&v.tape().constant(w.clone())).map(|p| p.sum())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn matrix_inverse_is_exact() {
        let m = rgb_to_xyzn();
        let inv = invert3(&m);
        for i in 0..3 {
            for j in 0..3 {
                let p: f64 = (0..3).map(|k| m[i][k] * inv[k][j]).sum();
                assert!((p - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }
}
