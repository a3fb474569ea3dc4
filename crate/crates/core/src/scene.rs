//! Domain types: Gaussians, cameras, feature maps, feature fields and labeled
//! point clouds.
//!
//! Storage precision follows the on-disk formats (`f32`); geometry is evaluated
//! in `f64` through the accessor helpers.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Quaternions further than this from unit norm are rejected on load.
pub const QUAT_RENORM_TOLERANCE: f64 = 1e-3;
/// Quaternions within this distance of unit norm are kept bit-for-bit.
pub const QUAT_UNIT_TOLERANCE: f64 = 1e-6;
/// Tolerance on the norm of valid feature-map pixels.
pub const FEATURE_NORM_TOLERANCE: f64 = 1e-4;
/// Tolerance on the norm of stored field features.
pub const FIELD_NORM_TOLERANCE: f64 = 1e-5;

/// One anisotropic 3D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: [f32; 3],
    /// Per-axis standard deviations.
    pub scale: [f32; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f32; 4],
    pub opacity: f32,
}

impl Gaussian {
    pub fn new(mean: [f32; 3], scale: [f32; 3], rotation: [f32; 4], opacity: f32) -> Self {
        Self {
            mean,
            scale,
            rotation,
            opacity,
        }
    }

    /// Axis-aligned Gaussian with identity rotation.
    pub fn axis_aligned(mean: [f32; 3], scale: [f32; 3], opacity: f32) -> Self {
        Self::new(mean, scale, [1.0, 0.0, 0.0, 0.0], opacity)
    }

    pub fn mean_f64(&self) -> Vector3<f64> {
        Vector3::new(self.mean[0] as f64, self.mean[1] as f64, self.mean[2] as f64)
    }

    pub fn scale_f64(&self) -> Vector3<f64> {
        Vector3::new(
            self.scale[0] as f64,
            self.scale[1] as f64,
            self.scale[2] as f64,
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation.map(|c| c as f64);
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix().into_inner()
    }

    /// Covariance `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_of(self)
    }

    /// Largest per-axis standard deviation.
    pub fn max_scale(&self) -> f64 {
        self.scale.iter().fold(0.0f64, |m, &s| m.max(s as f64))
    }

    /// Checks the invariants and renormalizes a slightly off-unit quaternion.
    ///
    /// `index` is only used for error messages.
    pub fn validated(mut self, index: usize) -> Result<Self> {
        let finite = self
            .mean
            .iter()
            .chain(self.scale.iter())
            .chain(self.rotation.iter())
            .chain(std::iter::once(&self.opacity))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation(format!(
                "gaussian {index}: non-finite parameter"
            )));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::validation(format!(
                "gaussian {index}: scale components must be positive, got {:?}",
                self.scale
            )));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::validation(format!(
                "gaussian {index}: opacity {} outside (0, 1]",
                self.opacity
            )));
        }
        let norm = self
            .rotation
            .iter()
            .map(|&c| (c as f64) * (c as f64))
            .sum::<f64>()
            .sqrt();
        let off = (norm - 1.0).abs();
        if off > QUAT_RENORM_TOLERANCE {
            return Err(Error::validation(format!(
                "gaussian {index}: quaternion norm {norm} is not unit"
            )));
        }
        if off > QUAT_UNIT_TOLERANCE {
            self.rotation = self.rotation.map(|c| (c as f64 / norm) as f32);
        }
        Ok(self)
    }
}

/// `Sigma = R diag(s^2) R^T` for a Gaussian.
pub fn covariance_of(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s = g.scale_f64();
    let d = Matrix3::from_diagonal(&s.component_mul(&s));
    let cov = r * d * r.transpose();
    // Symmetrize away rounding asymmetry.
    (cov + cov.transpose()) * 0.5
}

/// Ordered set of Gaussians. Gaussian `i` keeps index `i` everywhere.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(self) -> Result<Self> {
        let gaussians = self
            .gaussians
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.validated(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { gaussians })
    }
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera at `eye` looking at `target`, with image `+y` pointing along
    /// the projection of `-up`. Camera space is `+z` forward, `+x` right,
    /// `+y` down.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation(format!(
                "camera focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::validation("camera resolution must be at least 1x1"));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::validation("camera principal point is not finite"));
        }
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("world_to_camera has non-finite entries"));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-5 {
            return Err(Error::validation(format!(
                "world_to_camera rotation block is not orthonormal (error {err:e})"
            )));
        }
        let bottom = self.world_to_camera.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::validation(
                "world_to_camera bottom row must be (0, 0, 0, 1)",
            ));
        }
        Ok(())
    }
}

/// Dense per-pixel feature image. A zero vector marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    /// Row-major, then column, then channel.
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(height: u32, width: u32, dim: u32) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height as usize * width as usize * dim as usize],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let d = self.dim as usize;
        let start = (y as usize * self.width as usize + x as usize) * d;
        &self.data[start..start + d]
    }

    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [f32] {
        let d = self.dim as usize;
        let start = (y as usize * self.width as usize + x as usize) * d;
        &mut self.data[start..start + d]
    }

    /// Returns the pixel feature, or `None` for the zero (invalid) vector.
    pub fn feature_at(&self, x: u32, y: u32) -> Option<&[f32]> {
        let f = self.pixel(x, y);
        if f.iter().all(|&v| v == 0.0) {
            None
        } else {
            Some(f)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.height as usize * self.width as usize * self.dim as usize;
        if self.data.len() != expected {
            return Err(Error::format(format!(
                "feature map payload has {} values, header implies {expected}",
                self.data.len()
            )));
        }
        if self.dim == 0 {
            return Err(Error::validation("feature map dim must be positive"));
        }
        for (i, px) in self.data.chunks_exact(self.dim as usize).enumerate() {
            if px.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("pixel {i}: non-finite feature")));
            }
            let n2: f64 = px.iter().map(|&v| (v as f64) * (v as f64)).sum();
            if n2 == 0.0 {
                continue;
            }
            let n = n2.sqrt();
            if (n - 1.0).abs() > FEATURE_NORM_TOLERANCE {
                return Err(Error::validation(format!(
                    "pixel {i}: feature norm {n} is neither 0 nor 1"
                )));
            }
        }
        Ok(())
    }
}

/// Per-Gaussian aggregated unit feature plus cumulative visibility weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFeatureField {
    pub dim: u32,
    /// `count * dim` values; row `i` is the feature of Gaussian `i`.
    pub features: Vec<f32>,
    pub weights: Vec<f32>,
}

impl GaussianFeatureField {
    pub fn empty(count: usize, dim: u32) -> Self {
        Self {
            dim,
            features: vec![0.0; count * dim as usize],
            weights: vec![0.0; count],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.features[i * d..(i + 1) * d]
    }

    pub fn feature_f64(&self, i: usize) -> Vec<f64> {
        self.feature(i).iter().map(|&v| v as f64).collect()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.weights[i] > 0.0
    }

    /// Stores a unit feature with its weight; zero weight or a degenerate
    /// direction stores the invalid (zero) entry.
    pub fn set(&mut self, i: usize, feature: &[f64], weight: f64) {
        let d = self.dim as usize;
        let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        let slot = &mut self.features[i * d..(i + 1) * d];
        if weight > 0.0 && norm > 1e-12 && norm.is_finite() {
            for (s, v) in slot.iter_mut().zip(feature) {
                *s = (v / norm) as f32;
            }
            self.weights[i] = weight as f32;
        } else {
            slot.fill(0.0);
            self.weights[i] = 0.0;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim as usize;
        if self.features.len() != self.weights.len() * d {
            return Err(Error::format(format!(
                "field has {} feature values for {} gaussians of dim {d}",
                self.features.len(),
                self.weights.len()
            )));
        }
        for i in 0..self.weights.len() {
            let w = self.weights[i];
            let f = self.feature(i);
            if !w.is_finite() || w < 0.0 || f.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "field entry {i}: non-finite or negative values"
                )));
            }
            let n = f.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if w == 0.0 {
                if n != 0.0 {
                    return Err(Error::validation(format!(
                        "field entry {i}: zero weight with non-zero feature"
                    )));
                }
            } else if (n - 1.0).abs() > FIELD_NORM_TOLERANCE {
                return Err(Error::validation(format!(
                    "field entry {i}: weight {w} with feature norm {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Points with integer class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<[f32; 3]>,
    pub labels: Vec<u32>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<[f32; 3]>, labels: Vec<u32>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point_f64(&self, k: usize) -> Vector3<f64> {
        let p = self.points[k];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f32::consts::FRAC_1_SQRT_2;

    #[test]
    fn covariance_identity() {
        let g = Gaussian::axis_aligned([0.0; 3], [1.0; 3], 0.8);
        assert_relative_eq!(covariance_of(&g), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn covariance_axis_aligned() {
        let g = Gaussian::axis_aligned([0.0; 3], [2.0, 1.0, 1.0], 0.8);
        assert_relative_eq!(
            covariance_of(&g),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_rotated_about_z() {
        // 90 degrees about z swaps the x and y variances.
        let g = Gaussian::new(
            [0.0; 3],
            [2.0, 1.0, 1.0],
            [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2],
            0.8,
        );
        assert_relative_eq!(
            covariance_of(&g),
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-6
        );
    }

    #[test]
    fn validation_rejects_bad_gaussians() {
        let ok = Gaussian::axis_aligned([0.0; 3], [1.0; 3], 0.8);
        assert!(ok.validated(0).is_ok());
        let zero_opacity = Gaussian { opacity: 0.0, ..ok };
        assert!(matches!(zero_opacity.validated(3), Err(Error::Validation(m)) if m.contains("gaussian 3")));
        let neg_scale = Gaussian {
            scale: [1.0, -1.0, 1.0],
            ..ok
        };
        assert!(neg_scale.validated(0).is_err());
        let nan = Gaussian {
            mean: [f32::NAN, 0.0, 0.0],
            ..ok
        };
        assert!(nan.validated(0).is_err());
        let far_quat = Gaussian {
            rotation: [1.1, 0.0, 0.0, 0.0],
            ..ok
        };
        assert!(far_quat.validated(0).is_err());
    }

    #[test]
    fn near_unit_quaternion_is_renormalized() {
        let g = Gaussian::new([0.0; 3], [1.0; 3], [1.0005, 0.0, 0.0, 0.0], 0.5)
            .validated(0)
            .unwrap();
        assert_relative_eq!(g.rotation[0], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn camera_validation() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            100.0,
            64,
            64,
        );
        cam.validate().unwrap();
        let p = cam.to_camera(&Vector3::zeros());
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
        let mut bad = cam.clone();
        bad.world_to_camera[(0, 0)] = 2.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn feature_map_norm_invariant() {
        let mut map = FeatureMap::zeros(2, 2, 2);
        for y in 0..2 {
            for x in 0..2 {
                map.pixel_mut(x, y).copy_from_slice(&[1.0, 0.0]);
            }
        }
        map.validate().unwrap();
        map.pixel_mut(1, 1).copy_from_slice(&[0.5, 0.0]);
        assert!(matches!(map.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn field_set_enforces_invariant() {
        let mut field = GaussianFeatureField::empty(2, 2);
        field.set(0, &[3.0, 4.0], 1.5);
        field.set(1, &[0.0, 0.0], 2.0);
        assert_eq!(field.feature(0), &[0.6, 0.8]);
        assert_eq!(field.weights, vec![1.5, 0.0]);
        field.validate().unwrap();
        field.weights[1] = 1.0;
        assert!(field.validate().is_err());
    }
}
