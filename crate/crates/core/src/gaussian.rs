//! The optimizable Gaussian set and its activation conventions.
//!
//! Raw parameters are unconstrained: opacity is stored as a logit, scale as a
//! log, rotation as an unnormalized quaternion `(w, x, y, z)`, and color as the
//! degree-0 spherical-harmonic coefficient.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3, Vector4};

/// Degree-0 spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Low-pass dilation added to the projected covariance diagonal, in px².
pub const DEFAULT_DILATION: f64 = 0.3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of the color activation (ignoring the clamp).
#[inline]
pub fn rgb_to_feature(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

#[inline]
pub fn feature_to_rgb(f: f64) -> f64 {
    (SH_C0 * f + 0.5).max(0.0)
}

/// Structure-of-arrays Gaussian parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// Activated parameters of a single Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activated {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub rgb: Vector3<f64>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: [f64; 3], rotation: [f64; 4], log_scale: [f64; 3], opacity_logit: f64, color: [f64; 3]) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.colors.push(color);
    }

    /// Appends Gaussian `i` of `other`.
    pub fn push_from(&mut self, other: &GaussianCloud, i: usize) {
        self.push(other.positions[i], other.rotations[i], other.log_scales[i], other.opacity_logits[i], other.colors[i]);
    }

    pub fn extend_from(&mut self, other: &GaussianCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.colors.extend_from_slice(&other.colors);
    }

    /// Keeps the Gaussians for which `keep` is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.positions, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.opacity_logits, keep);
        filter(&mut self.colors, keep);
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        self.rotations.len() == n && self.log_scales.len() == n && self.opacity_logits.len() == n && self.colors.len() == n
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.colors.iter().flatten().all(|v| v.is_finite())
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    #[inline]
    pub fn scale(&self, i: usize) -> Vector3<f64> {
        let s = self.log_scales[i];
        Vector3::new(s[0].exp(), s[1].exp(), s[2].exp())
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        build_covariance(&Vector4::from(self.rotations[i]), &Vector3::from(self.log_scales[i]))
    }

    pub fn activated(&self, i: usize) -> Activated {
        assert!(i < self.len(), "Gaussian index {i} out of range for cloud of {}", self.len());
        let f = self.colors[i];
        Activated {
            position: Vector3::from(self.positions[i]),
            rotation: quat_to_rotation(&Vector4::from(self.rotations[i])),
            scale: self.scale(i),
            opacity: self.opacity(i),
            rgb: Vector3::new(feature_to_rgb(f[0]), feature_to_rgb(f[1]), feature_to_rgb(f[2])),
        }
    }

    /// Axis-aligned bounds of the centers, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut it = self.positions.iter().map(|p| Vector3::from(*p));
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p))))
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    assert!(n > 1e-12, "degenerate quaternion");
    let q = q / n;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Back-propagates a rotation-matrix adjoint to the raw (unnormalized) quaternion.
pub fn quat_to_rotation_backward(q: &Vector4<f64>, d_rot: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let qn = q / n;
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    let g = d_rot;
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)] + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let d_qn = Vector4::new(dw, dx, dy, dz);
    (d_qn - qn * qn.dot(&d_qn)) / n
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance(quat: &Vector4<f64>, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_rotation(quat);
    let s = log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    // exact symmetry
    (sigma + sigma.transpose()) * 0.5
}

/// `J W Σ Wᵀ Jᵀ` plus `dilation` on the diagonal.
pub fn project_covariance(sigma: &Matrix3<f64>, w: &Matrix3<f64>, j: &Matrix2x3<f64>, dilation: f64) -> Matrix2<f64> {
    let t = j * w;
    let cov = t * sigma * t.transpose();
    let cov = (cov + cov.transpose()) * 0.5;
    cov + Matrix2::identity() * dilation
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{SymmetricEigen, UnitQuaternion};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_covariance() {
        let s = build_covariance(&Vector4::new(1.0, 0.0, 0.0, 0.0), &Vector3::zeros());
        assert!((s - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn rotated_anisotropic_covariance() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = Vector4::new(h.cos(), 0.0, 0.0, h.sin());
        let s = build_covariance(&q, &Vector3::new(2f64.ln(), 0.0, 0.0));
        // oracle: R diag(4,1,1) Rᵀ with R the 90° z-rotation written out by hand
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * r.transpose();
        assert!((s - expected).abs().max() < 1e-12);
        assert!((s - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn rotation_matches_nalgebra_quaternion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = Vector4::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
            let r = quat_to_rotation(&q);
            assert!((r - *uq.to_rotation_matrix().matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let q = Vector4::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let ls = Vector3::new(rng.random_range(-3.0..1.0), rng.random_range(-3.0..1.0), rng.random_range(-3.0..1.0));
            let eig = SymmetricEigen::new(build_covariance(&q, &ls));
            let mut got: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = ls.iter().map(|v| (2.0 * v).exp()).collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            let scale = want[2];
            for (g, w) in got.iter().zip(&want) {
                // absolute error relative to the largest eigenvalue is the attainable bound
                assert!((g - w).abs() <= 1e-9 * scale.max(*w), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn quaternion_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = Vector4::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let analytic = quat_to_rotation_backward(&q, &g);
            let h = 1e-6;
            for k in 0..4 {
                let mut hi = q;
                let mut lo = q;
                hi[k] += h;
                lo[k] -= h;
                let fd = ((quat_to_rotation(&hi) - quat_to_rotation(&lo)).component_mul(&g)).sum() / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn projected_covariance_examples() {
        let j = Matrix2x3::new(50.0, 0.0, 0.0, 0.0, 50.0, 0.0);
        let c = project_covariance(&Matrix3::identity(), &Matrix3::identity(), &j, 0.3);
        assert!((c - Matrix2::new(2500.3, 0.0, 0.0, 2500.3)).abs().max() < 1e-9);
        let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let c2 = project_covariance(&Matrix3::identity(), &w, &j, 0.3);
        assert!((c - c2).abs().max() < 1e-9);
    }

    #[test]
    fn projected_covariance_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let sigma = a * a.transpose();
            let w = quat_to_rotation(&Vector4::new(rng.random_range(-1.0..1.0), 0.3, rng.random_range(-1.0..1.0), 0.1));
            let j = Matrix2x3::from_fn(|_, _| rng.random_range(-50.0..50.0));
            let got = project_covariance(&sigma, &w, &j, 0.0);
            let mut jw = [[0.0; 3]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    jw[r][c] = (0..3).map(|k| j[(r, k)] * w[(k, c)]).sum();
                }
            }
            for r in 0..2 {
                for c in 0..2 {
                    let mut v = 0.0;
                    for k in 0..3 {
                        for l in 0..3 {
                            v += jw[r][k] * sigma[(k, l)] * jw[c][l];
                        }
                    }
                    assert!((got[(r, c)] - v).abs() < 1e-10 * (1.0 + v.abs()));
                }
            }
        }
    }

    #[test]
    fn activation_examples() {
        let mut cloud = GaussianCloud::new();
        cloud.push([0.0; 3], [1.0, 0.0, 0.0, 0.0], [0.0; 3], 0.0, [0.0; 3]);
        let inv = |v: f64| (v - 0.5) / SH_C0;
        cloud.push([0.0; 3], [1.0, 0.0, 0.0, 0.0], [0.0; 3], 0.0, [inv(1.0), inv(0.0), inv(0.0)]);
        let a = cloud.activated(0);
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.rgb, Vector3::new(0.5, 0.5, 0.5));
        let b = cloud.activated(1);
        assert!((b.rgb - Vector3::new(1.0, 0.0, 0.0)).abs().max() < 1e-15);
    }

    #[test]
    #[should_panic]
    fn activation_index_out_of_range() {
        GaussianCloud::new().activated(0);
    }

    #[test]
    fn retain_keeps_arrays_aligned() {
        let mut cloud = GaussianCloud::new();
        for i in 0..5 {
            let v = i as f64;
            cloud.push([v; 3], [1.0, v, 0.0, 0.0], [v; 3], v, [v; 3]);
        }
        cloud.retain_mask(&[true, false, true, false, true]);
        assert!(cloud.is_consistent());
        assert_eq!(cloud.opacity_logits, vec![0.0, 2.0, 4.0]);
        assert_eq!(cloud.colors[1], [2.0; 3]);
    }

    fn quat_strategy() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-2)
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(q in quat_strategy(), ls in prop::array::uniform3(-4.0f64..2.0)) {
            let s = build_covariance(&Vector4::from(q), &Vector3::from(ls));
            prop_assert!((s - s.transpose()).abs().max() <= 1e-12);
            let eig = SymmetricEigen::new(s);
            let top = eig.eigenvalues.max();
            prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-12 * top));
        }

        #[test]
        fn covariance_ignores_quaternion_scale(q in quat_strategy(), ls in prop::array::uniform3(-4.0f64..2.0), k in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            let q = Vector4::from(q);
            let ls = Vector3::from(ls);
            let a = build_covariance(&q, &ls);
            let b = build_covariance(&(q * k), &ls);
            prop_assert!((a - b).abs().max() <= 1e-9 * (1.0 + a.abs().max()));
        }
    }
}
