//! Pseudo-labels for Gaussians from an annotated point cloud.
//!
//! Each Gaussian collects the points inside a ball of radius
//! `tau_radius * max(scale)` around its mean (or its `k_fallback` nearest
//! points when the ball is too sparse), scores them with the Gaussian's own
//! density `exp(-d^2 / 2)` under its full covariance, scales by the
//! significance `opacity * sx * sy * sz`, and takes the class with the
//! largest summed vote.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Gaussian, GaussianScene, LabeledPointCloud};
use crate::spatial::KdTree;

pub const UNLABELED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub tau_radius: f64,
    pub k_fallback: usize,
    pub chunk_size: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            tau_radius: 3.0,
            k_fallback: 8,
            chunk_size: 4096,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_radius > 0.0) {
            return Err(Error::config(format!(
                "tau_radius must be positive, got {}",
                self.tau_radius
            )));
        }
        if self.k_fallback < 1 {
            return Err(Error::config("k_fallback must be at least 1"));
        }
        if self.chunk_size < 1 {
            return Err(Error::config("chunk_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianLabels {
    /// Class id per Gaussian, [`UNLABELED`] when no candidate exists.
    pub labels: Vec<u32>,
    /// Modulated vote mass of the winning class.
    pub vote_mass: Vec<f32>,
    /// Significance `opacity * sx * sy * sz`.
    pub significance: Vec<f32>,
}

impl GaussianLabels {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            labels: Vec::with_capacity(n),
            vote_mass: Vec::with_capacity(n),
            significance: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        let l = self.labels[i];
        (l != UNLABELED).then_some(l)
    }
}

/// Labeling statistics, mostly for checking the culling cost.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LabelStats {
    pub total_candidates: usize,
    /// Largest number of candidates held by one chunk at a time.
    pub max_chunk_candidates: usize,
    pub fallback_gaussians: usize,
}

/// `(p - mu)^T Sigma^-1 (p - mu)` evaluated in the Gaussian's local frame.
pub fn mahalanobis_sq(g: &Gaussian, p: &nalgebra::Vector3<f64>) -> f64 {
    let local = g.rotation_matrix().transpose() * (p - g.mean_f64());
    let s = g.scale_f64();
    (0..3).map(|k| (local[k] / s[k]).powi(2)).sum()
}

/// Unmodulated density vote `exp(-d^2 / 2)`.
pub fn density_vote(g: &Gaussian, p: &nalgebra::Vector3<f64>) -> f64 {
    (-0.5 * mahalanobis_sq(g, p)).exp()
}

/// Per-Gaussian significance `opacity * sx * sy * sz`.
pub fn significance(g: &Gaussian) -> f64 {
    g.opacity as f64 * g.scale.iter().map(|&s| s as f64).product::<f64>()
}

/// Spatial index over a point cloud, reusable across Gaussians.
pub struct PointIndex<'a> {
    cloud: &'a LabeledPointCloud,
    tree: KdTree,
}

impl<'a> PointIndex<'a> {
    pub fn new(cloud: &'a LabeledPointCloud) -> Self {
        let pts = (0..cloud.len())
            .map(|k| {
                let p = cloud.points[k];
                [p[0] as f64, p[1] as f64, p[2] as f64]
            })
            .collect();
        Self {
            cloud,
            tree: KdTree::new(pts),
        }
    }

    /// Candidate points of one Gaussian, ascending index (radius hits) or
    /// nearest-first (fallback). Returns whether the fallback was used.
    pub fn candidates(&self, g: &Gaussian, cfg: &LabelConfig, out: &mut Vec<usize>) -> bool {
        let m = g.mean_f64();
        let center = [m.x, m.y, m.z];
        self.tree
            .within_radius(&center, cfg.tau_radius * g.max_scale(), out);
        if out.len() < cfg.k_fallback && !self.cloud.is_empty() {
            *out = self.tree.nearest(&center, cfg.k_fallback);
            return true;
        }
        false
    }
}

/// Points within `tau_radius * max(scale)` of the mean, or the `k_fallback`
/// nearest points when fewer qualify.
pub fn candidate_set(g: &Gaussian, cloud: &LabeledPointCloud, cfg: &LabelConfig) -> Vec<usize> {
    let mut out = Vec::new();
    PointIndex::new(cloud).candidates(g, cfg, &mut out);
    out
}

/// Votes per class over a candidate list, returning `(label, modulated mass)`.
/// Ties go to the smaller class id.
pub fn vote(
    g: &Gaussian,
    cloud: &LabeledPointCloud,
    candidates: impl IntoIterator<Item = usize>,
    modulate: bool,
) -> Option<(u32, f64)> {
    let mut per_class: BTreeMap<u32, f64> = BTreeMap::new();
    for k in candidates {
        let w = density_vote(g, &cloud.point_f64(k));
        *per_class.entry(cloud.labels[k]).or_insert(0.0) += w;
    }
    let gamma = if modulate { significance(g) } else { 1.0 };
    // BTreeMap iterates ascending class ids, so strict `>` keeps the smallest on ties.
    let mut best: Option<(u32, f64)> = None;
    for (class, sum) in per_class {
        let mass = gamma * sum;
        if best.is_none_or(|(_, b)| mass > b) {
            best = Some((class, mass));
        }
    }
    best
}

/// Labels every Gaussian; chunks of `chunk_size` Gaussians run in parallel.
pub fn assign_labels(
    scene: &GaussianScene,
    cloud: &LabeledPointCloud,
    cfg: &LabelConfig,
) -> Result<(GaussianLabels, LabelStats)> {
    assign_labels_with(scene, cloud, cfg, true)
}

/// As [`assign_labels`], optionally without significance modulation.
pub fn assign_labels_with(
    scene: &GaussianScene,
    cloud: &LabeledPointCloud,
    cfg: &LabelConfig,
    modulate: bool,
) -> Result<(GaussianLabels, LabelStats)> {
    cfg.validate()?;
    let index = PointIndex::new(cloud);
    let chunks: Vec<(Vec<(u32, f32, f32)>, LabelStats)> = scene
        .gaussians
        .par_chunks(cfg.chunk_size)
        .map(|chunk| {
            let mut stats = LabelStats::default();
            let mut candidates = Vec::new();
            let mut out = Vec::with_capacity(chunk.len());
            for g in chunk {
                let fallback = index.candidates(g, cfg, &mut candidates);
                stats.fallback_gaussians += fallback as usize;
                stats.total_candidates += candidates.len();
                let gamma = significance(g);
                let (label, mass) = vote(g, cloud, candidates.iter().copied(), modulate)
                    .unwrap_or((UNLABELED, 0.0));
                out.push((label, mass as f32, gamma as f32));
            }
            stats.max_chunk_candidates = stats.total_candidates;
            (out, stats)
        })
        .collect();

    let mut labels = GaussianLabels::with_capacity(scene.len());
    let mut stats = LabelStats::default();
    for (rows, s) in chunks {
        for (l, m, g) in rows {
            labels.labels.push(l);
            labels.vote_mass.push(m);
            labels.significance.push(g);
        }
        stats.total_candidates += s.total_candidates;
        stats.fallback_gaussians += s.fallback_gaussians;
        stats.max_chunk_candidates = stats.max_chunk_candidates.max(s.max_chunk_candidates);
    }
    Ok((labels, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    #[test]
    fn mahalanobis_examples() {
        let g = Gaussian::axis_aligned([1.0, 2.0, 3.0], [1.0; 3], 0.5);
        assert_eq!(mahalanobis_sq(&g, &Vector3::new(1.0, 2.0, 3.0)), 0.0);
        assert_relative_eq!(mahalanobis_sq(&g, &Vector3::new(1.0, 4.0, 3.0)), 4.0);
        let g = Gaussian::axis_aligned([0.0; 3], [2.0, 1.0, 1.0], 0.5);
        assert_relative_eq!(mahalanobis_sq(&g, &Vector3::new(2.0, 0.0, 0.0)), 1.0);
    }

    #[test]
    fn vote_values() {
        let g = Gaussian::axis_aligned([0.0; 3], [1.0; 3], 0.5);
        assert_eq!(density_vote(&g, &Vector3::zeros()), 1.0);
        assert_relative_eq!(density_vote(&g, &Vector3::new(1.0, 0.0, 0.0)), 0.6065306597126334);
        let g = Gaussian::axis_aligned([0.0; 3], [1.0, 2.0, 3.0], 0.5);
        assert_relative_eq!(significance(&g), 3.0);
        let cloud = LabeledPointCloud::new(vec![[0.0; 3]], vec![4]).unwrap();
        assert_eq!(vote(&g, &cloud, [0], true), Some((4, 3.0)));
    }

    #[test]
    fn candidate_paths() {
        let g = Gaussian::axis_aligned([0.0; 3], [0.1; 3], 0.5);
        let mut pts = vec![[0.0f32; 3]];
        let mut labels = vec![0];
        for i in 0..20 {
            pts.push([10.0 + i as f32, 0.0, 0.0]);
            labels.push(1);
        }
        let cloud = LabeledPointCloud::new(pts, labels).unwrap();
        let cfg = LabelConfig {
            k_fallback: 1,
            ..LabelConfig::default()
        };
        assert_eq!(candidate_set(&g, &cloud, &cfg), vec![0]);
        // Far from everything: exactly k_fallback nearest points.
        let far = Gaussian::axis_aligned([-50.0, 0.0, 0.0], [0.1; 3], 0.5);
        let c = candidate_set(&far, &cloud, &LabelConfig::default());
        assert_eq!(c, vec![0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn single_point_and_tie_break() {
        let scene = GaussianScene::new(vec![Gaussian::axis_aligned([0.0; 3], [0.5; 3], 0.9)]);
        let cloud = LabeledPointCloud::new(vec![[0.0; 3]], vec![7]).unwrap();
        let (l, _) = assign_labels(&scene, &cloud, &LabelConfig::default()).unwrap();
        assert_eq!(l.labels, vec![7]);

        let cloud = LabeledPointCloud::new(vec![[0.2, 0.0, 0.0], [-0.2, 0.0, 0.0]], vec![2, 1]).unwrap();
        let (l, _) = assign_labels(&scene, &cloud, &LabelConfig::default()).unwrap();
        assert_eq!(l.labels, vec![1]);
    }

    #[test]
    fn empty_cloud_leaves_unlabeled() {
        let scene = GaussianScene::new(vec![Gaussian::axis_aligned([0.0; 3], [0.5; 3], 0.9)]);
        let (l, s) = assign_labels(&scene, &LabeledPointCloud::default(), &LabelConfig::default()).unwrap();
        assert_eq!(l.labels, vec![UNLABELED]);
        assert_eq!(l.label(0), None);
        assert_eq!(s.total_candidates, 0);
    }

    #[test]
    fn config_validation() {
        assert!(LabelConfig { tau_radius: 0.0, ..LabelConfig::default() }.validate().is_err());
        assert!(LabelConfig { k_fallback: 0, ..LabelConfig::default() }.validate().is_err());
    }
}
