//! Channel-wise PCA of feature maps for layer visualization.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// PCA of one tap.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerProjection {
    /// `[N, k, H, W]` scores, each component divided by its largest magnitude
    /// so values lie in `[-1, 1]`.
    pub images: Tensor,
    /// Unnormalized scores, same shape as `images`.
    pub scores: Tensor,
    /// `[k, C]` principal axes; the first nonzero loading of each is positive.
    pub components: Tensor,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Set when the covariance has rank below `k`; missing components are zero.
    pub degenerate: bool,
}

/// Eigen-decomposition of a symmetric `n x n` matrix (row-major) by cyclic
/// Jacobi rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 =
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j] * m[i * n + j]).sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

fn as_nchw(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((1, *c, *h, *w)),
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::InvalidShape { shape: s.to_vec(), reason: "feature map must be [C, H, W] or [N, C, H, W]".into() }),
    }
}

fn project(tap: &Tensor, k: usize) -> Result<LayerProjection> {
    let (n, c, h, w) = as_nchw(tap)?;
    if k == 0 || k > c {
        return Err(Error::OutOfRange { what: "PCA components", detail: format!("k = {k} with {c} channels") });
    }
    let hw = h * w;
    let sites = n * hw;
    let d = tap.data();
    let at = |s: usize, ch: usize| d[((s / hw) * c + ch) * hw + s % hw];
    let mean: Vec<f64> = (0..c).map(|ch| (0..sites).map(|s| at(s, ch)).sum::<f64>() / sites as f64).collect();
    let mut cov = vec![0.0; c * c];
    for s in 0..sites {
        for i in 0..c {
            let di = at(s, i) - mean[i];
            for j in i..c {
                cov[i * c + j] += di * (at(s, j) - mean[j]);
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= sites as f64;
            cov[j * c + i] = cov[i * c + j];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, c);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let top = values[0].max(0.0);
    let significant = |v: f64| top > 1e-24 && v > 1e-10 * top;

    let mut components = Tensor::zeros(vec![k, c]);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut degenerate = false;
    for (r, (val, vec)) in values.iter().zip(&vectors).take(k).enumerate() {
        if !significant(*val) {
            degenerate = true;
            eigenvalues.push(0.0);
            continue;
        }
        let first = vec.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        let sign = first.signum();
        for (ch, x) in vec.iter().enumerate() {
            components.set(&[r, ch], sign * x);
        }
        eigenvalues.push(*val);
    }
    let explained_variance_ratio = eigenvalues.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();

    let mut scores = Tensor::zeros(vec![n, k, h, w]);
    for s in 0..sites {
        let (b, p) = (s / hw, s % hw);
        for r in 0..k {
            let proj: f64 = (0..c).map(|ch| (at(s, ch) - mean[ch]) * components.data()[r * c + ch]).sum();
            scores.data_mut()[(b * k + r) * hw + p] = proj;
        }
    }
    let mut images = scores.clone();
    for r in 0..k {
        let m = (0..n).flat_map(|b| (0..hw).map(move |p| (b * k + r) * hw + p)).fold(0.0f64, |acc, i| acc.max(scores.data()[i].abs()));
        if m > 0.0 {
            for b in 0..n {
                for p in 0..hw {
                    images.data_mut()[(b * k + r) * hw + p] /= m;
                }
            }
        }
    }
    Ok(LayerProjection { images, scores, components, eigenvalues, explained_variance_ratio, degenerate })
}

/// Top-`k` channel PCA of each tap.
pub fn pca_layer_viz(taps: &[Tensor], k: usize) -> Result<Vec<LayerProjection>> {
    taps.iter().map(|t| project(t, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::{Rng, SeedableRng};

    fn random_tap(seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // correlated channels so the spectrum is well separated
        let base = Tensor::from_fn(vec![2, 3, 5, 5], |_| rng.random_range(-1.0..1.0));
        Tensor::from_fn(vec![2, 6, 5, 5], |i| {
            let (b, ch, p) = (i / 150, (i / 25) % 6, i % 25);
            let src = |k: usize| base.data()[(b * 3 + k) * 25 + p];
            src(ch % 3) * (1.0 + ch as f64) + 0.1 * src((ch + 1) % 3)
        })
    }

    #[test]
    fn constant_map_is_flagged() {
        let out = pca_layer_viz(&[Tensor::full(vec![4, 3, 3], 2.5)], 3).unwrap();
        assert!(out[0].degenerate);
        assert!(out[0].images.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn explained_variance_is_nonincreasing() {
        let p = &pca_layer_viz(&[random_tap(1)], 3).unwrap()[0];
        let r = &p.explained_variance_ratio;
        assert!(r[0] >= r[1] && r[1] >= r[2], "{r:?}");
        assert!(!p.degenerate);
        assert!(p.images.max_abs() <= 1.0 + 1e-15);
    }

    #[test]
    fn matches_nalgebra_up_to_sign() {
        let tap = random_tap(2);
        let p = &pca_layer_viz(&[tap.clone()], 3).unwrap()[0];
        let (n, c, hw) = (2, 6, 25);
        let sites = n * hw;
        let mut x = DMatrix::<f64>::zeros(sites, c);
        for s in 0..sites {
            for ch in 0..c {
                x[(s, ch)] = tap.data()[((s / hw) * c + ch) * hw + s % hw];
            }
        }
        let mean = x.row_mean();
        for mut row in x.row_iter_mut() {
            row -= &mean;
        }
        let cov = x.transpose() * &x / sites as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for r in 0..3 {
            let oracle = eig.eigenvectors.column(order[r]);
            assert!((eig.eigenvalues[order[r]] - p.eigenvalues[r]).abs() < 1e-9);
            let proj_oracle = &x * oracle;
            let ours: Vec<f64> = (0..sites).map(|s| p.scores.data()[((s / hw) * 3 + r) * hw + s % hw]).collect();
            let same = (0..sites).all(|s| (ours[s] - proj_oracle[s]).abs() < 1e-6);
            let flipped = (0..sites).all(|s| (ours[s] + proj_oracle[s]).abs() < 1e-6);
            assert!(same || flipped, "component {r}");
        }
    }

    #[test]
    fn sign_convention_first_loading_positive() {
        let p = &pca_layer_viz(&[random_tap(3)], 3).unwrap()[0];
        for r in 0..3 {
            let row = &p.components.data()[r * 6..(r + 1) * 6];
            assert!(row.iter().find(|x| x.abs() > 1e-12).unwrap() > &0.0);
        }
    }

    #[test]
    fn too_many_components_rejected() {
        assert!(pca_layer_viz(&[Tensor::zeros(vec![2, 3, 3])], 3).is_err());
    }
}
