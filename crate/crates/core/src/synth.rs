//! Deterministic synthetic benchmarks.
//!
//! The occlusion scene is two parallel walls of flat Gaussians: a small
//! opaque front wall hiding the middle of a larger back wall. Cameras on a
//! small ring in front of the walls look straight at them, so the back wall
//! centre is hidden behind the front wall; side cameras look past the front
//! wall at the back wall. Each camera gets a feature map that carries the
//! front feature wherever the front wall dominates, the way a 2D
//! vision-language model labels an occluder.
//!
//! The feature stream generator produces inlier features around a ground
//! truth direction plus outliers, for exercising the aggregators.
//!
//! All randomness comes from [`KeyedRng`] keyed by `(seed, entity)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::aggregate::FeatureObservation;
use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::scene::{Camera, FeatureMap, Gaussian, GaussianScene, FEATURE_NORM_TOLERANCE};
use crate::splat::{SplatView, NEAR_PLANE};

// Entity keys for the generators. Per-item streams add the item index.
const KEY_FRONT_FEATURE: u64 = 1;
const KEY_BACK_FEATURE: u64 = 2;
const KEY_STREAM_DIRECTION: u64 = 3;
const KEY_STREAM_LAYOUT: u64 = 4;
const KEY_JITTER_BASE: u64 = 1 << 32;
const KEY_OBS_BASE: u64 = 2 << 32;

/// Feature-map rule: a wall claims a pixel once its accumulated weight
/// reaches this value.
pub const MAP_COVERAGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionSceneSpec {
    /// World z of the front wall; cameras sit near z = 0.
    pub front_depth: f64,
    pub back_depth: f64,
    /// Half-widths of the square walls.
    pub front_extent: f64,
    pub back_extent: f64,
    /// Gaussians per wall side; a wall holds `grid * grid` Gaussians.
    pub front_grid: usize,
    pub back_grid: usize,
    pub front_opacity: f32,
    pub back_opacity: f32,
    /// In-plane standard deviation as a fraction of the grid spacing.
    pub footprint: f64,
    /// Out-of-plane standard deviation (disk thickness).
    pub thickness: f64,
    pub dim: usize,
    /// Ground-truth features; generated from the seed when absent.
    pub front_feature: Option<Vec<f32>>,
    pub back_feature: Option<Vec<f32>>,
    /// Cameras on the front ring.
    pub front_cameras: usize,
    pub ring_radius: f64,
    /// Cameras placed beside the front wall, looking at the back wall centre.
    pub side_cameras: usize,
    pub side_offset: f64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub seed: u64,
}

impl Default for OcclusionSceneSpec {
    fn default() -> Self {
        Self {
            front_depth: 3.0,
            back_depth: 5.0,
            front_extent: 0.5,
            back_extent: 1.5,
            front_grid: 8,
            back_grid: 16,
            front_opacity: 0.99,
            back_opacity: 0.99,
            footprint: 0.7,
            thickness: 0.01,
            dim: 16,
            front_feature: None,
            back_feature: None,
            front_cameras: 48,
            ring_radius: 0.3,
            side_cameras: 2,
            side_offset: 3.0,
            width: 64,
            height: 64,
            focal: 90.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wall {
    Front,
    Back,
}

#[derive(Debug, Clone)]
pub struct OcclusionScene {
    pub scene: GaussianScene,
    /// Front-ring cameras first, then side cameras.
    pub cameras: Vec<Camera>,
    pub maps: Vec<FeatureMap>,
    pub wall: Vec<Wall>,
    pub front_feature: Vec<f32>,
    pub back_feature: Vec<f32>,
    pub front_cameras: usize,
}

impl OcclusionScene {
    pub fn gt_feature(&self, i: usize) -> &[f32] {
        match self.wall[i] {
            Wall::Front => &self.front_feature,
            Wall::Back => &self.back_feature,
        }
    }

    pub fn back_indices(&self) -> Vec<usize> {
        (0..self.wall.len())
            .filter(|&i| self.wall[i] == Wall::Back)
            .collect()
    }
}

fn unit_or_err(v: &[f32], dim: usize, what: &str) -> Result<Vec<f32>> {
    if v.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: v.len(),
        });
    }
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if (n - 1.0).abs() > FEATURE_NORM_TOLERANCE {
        return Err(Error::validation(format!("{what} has norm {n}, expected 1")));
    }
    Ok(v.to_vec())
}

impl OcclusionSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.front_depth > NEAR_PLANE && self.back_depth > self.front_depth) {
            return Err(Error::config(format!(
                "walls need back depth > front depth > {NEAR_PLANE}, got {} and {}",
                self.back_depth, self.front_depth
            )));
        }
        if !(self.front_extent > 0.0 && self.back_extent > 0.0) {
            return Err(Error::config("wall extents must be positive"));
        }
        for o in [self.front_opacity, self.back_opacity] {
            if !(o > 0.0 && o <= 1.0) {
                return Err(Error::config(format!("wall opacity {o} outside (0, 1]")));
            }
        }
        if !(self.footprint > 0.0 && self.thickness > 0.0) {
            return Err(Error::config("footprint and thickness must be positive"));
        }
        if self.dim < 2 {
            return Err(Error::config("feature dim must be at least 2"));
        }
        if self.width < 1 || self.height < 1 || !(self.focal > 0.0) {
            return Err(Error::config("image size and focal length must be positive"));
        }
        if self.front_cameras + self.side_cameras == 0 {
            return Err(Error::config("at least one camera is required"));
        }
        Ok(())
    }

    fn features(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let front = match &self.front_feature {
            Some(v) => unit_or_err(v, self.dim, "front feature")?,
            None => to_f32(&KeyedRng::new(self.seed, KEY_FRONT_FEATURE).unit_vector(self.dim)),
        };
        let back = match &self.back_feature {
            Some(v) => unit_or_err(v, self.dim, "back feature")?,
            None => {
                // Orthogonal to the front feature so the two are far apart.
                let mut rng = KeyedRng::new(self.seed, KEY_BACK_FEATURE);
                let f: Vec<f64> = front.iter().map(|&x| x as f64).collect();
                loop {
                    let mut b = rng.unit_vector(self.dim);
                    let d: f64 = b.iter().zip(&f).map(|(x, y)| x * y).sum();
                    for (bi, fi) in b.iter_mut().zip(&f) {
                        *bi -= d * fi;
                    }
                    let n = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 1e-6 {
                        break to_f32(&b.iter().map(|x| x / n).collect::<Vec<_>>());
                    }
                }
            }
        };
        Ok((front, back))
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn wall_gaussians(
    out: &mut Vec<Gaussian>,
    grid: usize,
    extent: f64,
    depth: f64,
    opacity: f32,
    spec: &OcclusionSceneSpec,
) {
    if grid == 0 {
        return;
    }
    let spacing = if grid > 1 {
        2.0 * extent / (grid - 1) as f64
    } else {
        2.0 * extent
    };
    let sigma = spec.footprint * spacing;
    for r in 0..grid {
        for c in 0..grid {
            let (x, y) = if grid > 1 {
                (-extent + c as f64 * spacing, -extent + r as f64 * spacing)
            } else {
                (0.0, 0.0)
            };
            // Small in-plane jitter keeps the layout seed-dependent without
            // changing coverage.
            let mut rng = KeyedRng::new(spec.seed, KEY_JITTER_BASE + out.len() as u64);
            let jx = rng.uniform_range(-0.05, 0.05) * spacing;
            let jy = rng.uniform_range(-0.05, 0.05) * spacing;
            out.push(Gaussian::axis_aligned(
                [(x + jx) as f32, (y + jy) as f32, depth as f32],
                [sigma as f32, sigma as f32, spec.thickness as f32],
                opacity,
            ));
        }
    }
}

/// Feature map for one camera: per pixel, the front feature where the front
/// wall's accumulated weight reaches [`MAP_COVERAGE`], the back feature where
/// the back wall reaches it and outweighs the front wall, zero elsewhere.
pub fn wall_feature_map(
    scene: &GaussianScene,
    wall: &[Wall],
    cam: &Camera,
    front: &[f32],
    back: &[f32],
) -> FeatureMap {
    let map = SplatView::new(scene, cam).weight_map();
    let mut out = FeatureMap::zeros(cam.height, cam.width, front.len() as u32);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (mut a_front, mut a_back) = (0.0, 0.0);
            for e in map.entries_at(x, y) {
                match wall[e.gaussian] {
                    Wall::Front => a_front += e.weight,
                    Wall::Back => a_back += e.weight,
                }
            }
            let feature = if a_front >= MAP_COVERAGE {
                Some(front)
            } else if a_back >= MAP_COVERAGE && a_back > a_front {
                Some(back)
            } else {
                None
            };
            if let Some(f) = feature {
                out.pixel_mut(x, y).copy_from_slice(f);
            }
        }
    }
    out
}

/// Front-ring and side cameras for a spec.
pub fn occlusion_cameras(spec: &OcclusionSceneSpec) -> Vec<Camera> {
    let up = Vector3::new(0.0, -1.0, 0.0);
    let mut cams = Vec::with_capacity(spec.front_cameras + spec.side_cameras);
    for k in 0..spec.front_cameras {
        let phi = std::f64::consts::TAU * k as f64 / spec.front_cameras as f64;
        let eye = Vector3::new(spec.ring_radius * phi.cos(), spec.ring_radius * phi.sin(), 0.0);
        let target = eye + Vector3::new(0.0, 0.0, 1.0);
        cams.push(Camera::look_at(eye, target, up, spec.focal, spec.width, spec.height));
    }
    let target = Vector3::new(0.0, 0.0, spec.back_depth);
    for k in 0..spec.side_cameras {
        let phi = std::f64::consts::TAU * k as f64 / spec.side_cameras as f64;
        let eye = Vector3::new(
            spec.side_offset * phi.cos(),
            spec.side_offset * phi.sin(),
            spec.front_depth / 3.0,
        );
        // Keep the up vector off the viewing direction.
        let forward = (target - eye).normalize();
        let up = if forward.cross(&up).norm() > 1e-6 {
            up
        } else {
            Vector3::new(1.0, 0.0, 0.0)
        };
        cams.push(Camera::look_at(eye, target, up, spec.focal, spec.width, spec.height));
    }
    cams
}

pub fn make_occlusion_scene(spec: &OcclusionSceneSpec) -> Result<OcclusionScene> {
    spec.validate()?;
    let (front_feature, back_feature) = spec.features()?;
    let mut gaussians = Vec::new();
    wall_gaussians(
        &mut gaussians,
        spec.front_grid,
        spec.front_extent,
        spec.front_depth,
        spec.front_opacity,
        spec,
    );
    let n_front = gaussians.len();
    wall_gaussians(
        &mut gaussians,
        spec.back_grid,
        spec.back_extent,
        spec.back_depth,
        spec.back_opacity,
        spec,
    );
    let wall: Vec<Wall> = (0..gaussians.len())
        .map(|i| if i < n_front { Wall::Front } else { Wall::Back })
        .collect();
    let scene = GaussianScene::new(gaussians);
    let cameras = occlusion_cameras(spec);
    let maps = cameras
        .iter()
        .map(|cam| wall_feature_map(&scene, &wall, cam, &front_feature, &back_feature))
        .collect();
    Ok(OcclusionScene {
        scene,
        cameras,
        maps,
        wall,
        front_feature,
        back_feature,
        front_cameras: spec.front_cameras,
    })
}

// Feature streams --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierPlacement {
    /// Opposite the ground-truth direction, with the same noise as inliers.
    Antipodal,
    /// Uniform on the sphere.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightDistribution {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl WeightDistribution {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            WeightDistribution::Constant { value } => value > 0.0 && value.is_finite(),
            WeightDistribution::Uniform { lo, hi } => lo > 0.0 && hi >= lo && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid weight distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut KeyedRng) -> f64 {
        match *self {
            WeightDistribution::Constant { value } => value,
            WeightDistribution::Uniform { lo, hi } => rng.uniform_range(lo, hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSpec {
    pub dim: usize,
    /// Ground-truth direction; generated from the seed when absent.
    pub direction: Option<Vec<f32>>,
    /// Standard deviation of the tangent perturbation, in radians.
    pub noise: f64,
    pub outlier_fraction: f64,
    pub placement: OutlierPlacement,
    pub count: usize,
    pub weights: WeightDistribution,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            dim: 512,
            direction: None,
            noise: 0.3,
            outlier_fraction: 0.2,
            placement: OutlierPlacement::Antipodal,
            count: 100,
            weights: WeightDistribution::Uniform { lo: 0.1, hi: 1.0 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureStream {
    pub observations: Vec<FeatureObservation>,
    pub direction: Vec<f64>,
    /// Whether each observation is an outlier.
    pub outlier: Vec<bool>,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::config(format!(
                "outlier fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if self.dim < 2 {
            return Err(Error::config("stream dim must be at least 2"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("noise must be non-negative"));
        }
        self.weights.validate()
    }
}

/// Inliers are the direction plus isotropic tangent noise, renormalized;
/// outlier positions are a seeded random subset of size
/// `round(fraction * count)`. Observation `t` gets view index `t`.
pub fn make_feature_stream(spec: &StreamSpec) -> Result<FeatureStream> {
    spec.validate()?;
    let direction: Vec<f64> = match &spec.direction {
        Some(v) => unit_or_err(v, spec.dim, "stream direction")?
            .iter()
            .map(|&x| x as f64)
            .collect(),
        None => KeyedRng::new(spec.seed, KEY_STREAM_DIRECTION).unit_vector(spec.dim),
    };
    let n_out = (spec.outlier_fraction * spec.count as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.count).collect();
    KeyedRng::new(spec.seed, KEY_STREAM_LAYOUT).shuffle(&mut order);
    let mut outlier = vec![false; spec.count];
    for &t in &order[..n_out.min(spec.count)] {
        outlier[t] = true;
    }
    // Per-coordinate std so the tangent norm is about `noise`.
    let sigma = spec.noise / ((spec.dim - 1) as f64).sqrt();
    let mut observations = Vec::with_capacity(spec.count);
    for t in 0..spec.count {
        let mut rng = KeyedRng::new(spec.seed, KEY_OBS_BASE + t as u64);
        let weight = spec.weights.sample(&mut rng);
        let feature = match (outlier[t], spec.placement) {
            (true, OutlierPlacement::Random) => rng.unit_vector(spec.dim),
            (true, OutlierPlacement::Antipodal) => {
                let anti: Vec<f64> = direction.iter().map(|x| -x).collect();
                perturb(&anti, sigma, &mut rng)
            }
            (false, _) => perturb(&direction, sigma, &mut rng),
        };
        observations.push(FeatureObservation {
            feature,
            weight,
            view_index: t as u32,
        });
    }
    Ok(FeatureStream {
        observations,
        direction,
        outlier,
    })
}

/// `center` plus isotropic tangent noise of per-coordinate std `sigma`,
/// renormalized.
fn perturb(center: &[f64], sigma: f64, rng: &mut KeyedRng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..center.len()).map(|_| sigma * rng.normal()).collect();
    let d: f64 = v.iter().zip(center).map(|(a, b)| a * b).sum();
    for (vi, ci) in v.iter_mut().zip(center) {
        *vi += (1.0 - d) * ci;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}
