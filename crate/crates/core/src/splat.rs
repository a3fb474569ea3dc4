//! Projection of 3D Gaussians into a view and front-to-back alpha compositing.
//!
//! Pixel `(x, y)` is sampled at the integer image coordinate `(x, y)`.
//! Gaussians are ordered globally by camera-space center depth; every pixel
//! composites the Gaussians whose 3-sigma ellipse covers it in that order.
//! The per-pixel path and the per-view center-pixel path share
//! [`SplatView::pixel_alphas`] and [`composite`], so their weights agree
//! bit for bit.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::scene::{Camera, Gaussian, GaussianScene};

/// Gaussians whose center is nearer than this (camera-space z) are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Centers must project inside the image rectangle scaled by this factor.
pub const FRUSTUM_PADDING: f64 = 1.3;
/// Low-pass dilation added to every projected covariance, in pixels^2.
pub const COV_DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Footprints are truncated at this Mahalanobis radius.
pub const SIGMA_CUTOFF: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
}

/// EWA projection of one Gaussian. Returns `None` when the center is behind
/// the near plane or outside the padded image rectangle.
pub fn project_gaussian(index: usize, g: &Gaussian, cam: &Camera) -> Option<ProjectedGaussian> {
    let p = cam.to_camera(&g.mean_f64());
    let z = p.z;
    if !(z > NEAR_PLANE) {
        return None;
    }
    let u = cam.fx * p.x / z + cam.cx;
    let v = cam.fy * p.y / z + cam.cy;
    let (w, h) = (cam.width as f64, cam.height as f64);
    let half_x = 0.5 * FRUSTUM_PADDING * w;
    let half_y = 0.5 * FRUSTUM_PADDING * h;
    if (u - 0.5 * w).abs() > half_x || (v - 0.5 * h).abs() > half_y {
        return None;
    }

    let jacobian = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * p.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * p.y / (z * z),
    );
    let r = cam.rotation();
    let t = jacobian * r;
    let mut cov2d = t * g.covariance() * t.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5;
    cov2d[(0, 0)] += COV_DILATION;
    cov2d[(1, 1)] += COV_DILATION;
    let conic = cov2d.try_inverse()?;

    Some(ProjectedGaussian {
        index,
        mean2d: Vector2::new(u, v),
        cov2d,
        conic,
        depth: z,
        opacity: g.opacity as f64,
    })
}

/// Squared Mahalanobis distance of pixel position `u` from the projected mean.
pub fn mahalanobis_sq_2d(pg: &ProjectedGaussian, u: Vector2<f64>) -> f64 {
    let d = u - pg.mean2d;
    (d.transpose() * pg.conic * d)[(0, 0)]
}

/// Projected density `exp(-0.5 * d^2)`; equals 1 at the projected mean.
pub fn density_at(pg: &ProjectedGaussian, u: Vector2<f64>) -> f64 {
    (-0.5 * mahalanobis_sq_2d(pg, u)).exp()
}

/// Opacity-scaled coverage `min(0.99, o * rho)`, zero outside the 3-sigma
/// footprint or below the `1/255` skip threshold.
pub fn alpha_at(pg: &ProjectedGaussian, u: Vector2<f64>) -> f64 {
    let d2 = mahalanobis_sq_2d(pg, u);
    if d2 > SIGMA_CUTOFF * SIGMA_CUTOFF {
        return 0.0;
    }
    alpha_from_density(pg.opacity, (-0.5 * d2).exp())
}

pub fn alpha_from_density(opacity: f64, density: f64) -> f64 {
    let a = opacity * density;
    if a < ALPHA_SKIP {
        0.0
    } else {
        a.min(ALPHA_MAX)
    }
}

/// One Gaussian's share of a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightEntry {
    pub gaussian: usize,
    pub alpha: f64,
    /// Transmittance reaching this Gaussian.
    pub transmittance: f64,
    /// Marginal contribution `alpha * transmittance`.
    pub weight: f64,
}

/// Front-to-back compositing of depth-ordered `(gaussian, alpha)` pairs.
pub fn composite(alphas: &[(usize, f64)]) -> Vec<WeightEntry> {
    let mut t = 1.0f64;
    alphas
        .iter()
        .map(|&(gaussian, alpha)| {
            let entry = WeightEntry {
                gaussian,
                alpha,
                transmittance: t,
                weight: alpha * t,
            };
            t *= 1.0 - alpha;
            entry
        })
        .collect()
}

/// Per-pixel depth-ordered weight lists for a whole image (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub width: u32,
    pub height: u32,
    offsets: Vec<usize>,
    entries: Vec<WeightEntry>,
}

impl WeightMap {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Entries of the pixel with row-major index `px`.
    pub fn entries(&self, px: usize) -> &[WeightEntry] {
        &self.entries[self.offsets[px]..self.offsets[px + 1]]
    }

    pub fn entries_at(&self, x: u32, y: u32) -> &[WeightEntry] {
        self.entries(y as usize * self.width as usize + x as usize)
    }

    /// Accumulated weight (rendered opacity) of a pixel.
    pub fn pixel_sum(&self, px: usize) -> f64 {
        self.entries(px).iter().map(|e| e.weight).sum()
    }
}

/// Marginal contribution of one Gaussian at its center pixel in one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityRecord {
    pub gaussian_index: usize,
    pub view_index: u32,
    pub pixel: (u32, u32),
    pub weight: f64,
}

impl VisibilityRecord {
    pub fn new(gaussian_index: usize, weight: f64) -> Self {
        Self {
            gaussian_index,
            view_index: 0,
            pixel: (0, 0),
            weight,
        }
    }
}

type PixelBox = (u32, u32, u32, u32);

/// Depth-sorted projections of a scene in one camera, binned by image row.
pub struct SplatView {
    width: u32,
    height: u32,
    projected: Vec<ProjectedGaussian>,
    boxes: Vec<PixelBox>,
    /// For every row, positions into `projected` (ascending, i.e. depth order).
    rows: Vec<Vec<u32>>,
}

impl SplatView {
    pub fn new(scene: &GaussianScene, cam: &Camera) -> Self {
        Self::with_filter(scene, cam, |_| true)
    }

    /// Only Gaussians for which `keep(index)` holds take part.
    pub fn with_filter(scene: &GaussianScene, cam: &Camera, keep: impl Fn(usize) -> bool) -> Self {
        let mut projected: Vec<ProjectedGaussian> = scene
            .gaussians
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .filter_map(|(i, g)| project_gaussian(i, g, cam))
            .collect();
        projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

        let (width, height) = (cam.width, cam.height);
        let mut boxes = Vec::with_capacity(projected.len());
        let mut rows = vec![Vec::new(); height as usize];
        for (pos, pg) in projected.iter().enumerate() {
            let bbox = footprint_box(pg, width, height);
            if let Some((_, _, y0, y1)) = bbox {
                for row in &mut rows[y0 as usize..=y1 as usize] {
                    row.push(pos as u32);
                }
            }
            boxes.push(bbox.unwrap_or((1, 0, 1, 0)));
        }
        Self {
            width,
            height,
            projected,
            boxes,
            rows,
        }
    }

    pub fn projected(&self) -> &[ProjectedGaussian] {
        &self.projected
    }

    /// Depth-ordered non-zero alphas covering pixel `(x, y)`.
    pub fn pixel_alphas(&self, x: u32, y: u32, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let u = Vector2::new(x as f64, y as f64);
        for &pos in &self.rows[y as usize] {
            let (x0, x1, _, _) = self.boxes[pos as usize];
            if x < x0 || x > x1 {
                continue;
            }
            let pg = &self.projected[pos as usize];
            let a = alpha_at(pg, u);
            if a > 0.0 {
                out.push((pg.index, a));
            }
        }
    }

    /// Composited weights of a single pixel.
    pub fn pixel_weights(&self, x: u32, y: u32) -> Vec<WeightEntry> {
        let mut alphas = Vec::new();
        self.pixel_alphas(x, y, &mut alphas);
        composite(&alphas)
    }

    pub fn weight_map(&self) -> WeightMap {
        let rows: Vec<(Vec<usize>, Vec<WeightEntry>)> = (0..self.height)
            .into_par_iter()
            .map(|y| {
                let mut alphas = Vec::new();
                let mut counts = Vec::with_capacity(self.width as usize);
                let mut entries = Vec::new();
                for x in 0..self.width {
                    self.pixel_alphas(x, y, &mut alphas);
                    counts.push(alphas.len());
                    entries.extend(composite(&alphas));
                }
                (counts, entries)
            })
            .collect();

        let mut offsets = Vec::with_capacity(self.width as usize * self.height as usize + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for (counts, row) in rows {
            entries.extend(row);
            for c in counts {
                let last = *offsets.last().unwrap();
                offsets.push(last + c);
            }
        }
        WeightMap {
            width: self.width,
            height: self.height,
            offsets,
            entries,
        }
    }

    /// Center-pixel marginal contributions for every projected Gaussian,
    /// sorted by Gaussian index; zero weights are omitted.
    pub fn visibilities(&self, view_index: u32) -> Vec<VisibilityRecord> {
        let mut centers: Vec<(u32, u32, usize)> = self
            .projected
            .iter()
            .filter_map(|pg| {
                center_pixel(pg.mean2d, self.width, self.height).map(|(x, y)| (y, x, pg.index))
            })
            .collect();
        // Group Gaussians sharing a center pixel.
        centers.sort_unstable();

        let mut out = Vec::with_capacity(centers.len());
        let mut alphas = Vec::new();
        let mut start = 0;
        while start < centers.len() {
            let (y, x, _) = centers[start];
            let mut end = start;
            while end < centers.len() && centers[end].0 == y && centers[end].1 == x {
                end += 1;
            }
            self.pixel_alphas(x, y, &mut alphas);
            let weights = composite(&alphas);
            for &(_, _, gi) in &centers[start..end] {
                if let Some(e) = weights.iter().find(|e| e.gaussian == gi) {
                    if e.weight > 0.0 {
                        out.push(VisibilityRecord {
                            gaussian_index: gi,
                            view_index,
                            pixel: (x, y),
                            weight: e.weight,
                        });
                    }
                }
            }
            start = end;
        }
        out.sort_by_key(|r| r.gaussian_index);
        out
    }
}

/// Nearest pixel to a projected center, if inside the image.
pub fn center_pixel(mean2d: Vector2<f64>, width: u32, height: u32) -> Option<(u32, u32)> {
    let x = (mean2d.x + 0.5).floor();
    let y = (mean2d.y + 0.5).floor();
    if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
        Some((x as u32, y as u32))
    } else {
        None
    }
}

/// Inclusive pixel box bounding the 3-sigma ellipse, clipped to the image.
fn footprint_box(pg: &ProjectedGaussian, width: u32, height: u32) -> Option<PixelBox> {
    // The ellipse d^2 <= c^2 spans +- c * sqrt(cov_xx) in x and +- c * sqrt(cov_yy) in y.
    let rx = SIGMA_CUTOFF * pg.cov2d[(0, 0)].sqrt();
    let ry = SIGMA_CUTOFF * pg.cov2d[(1, 1)].sqrt();
    let x0 = (pg.mean2d.x - rx).ceil().max(0.0);
    let x1 = (pg.mean2d.x + rx).floor().min(width as f64 - 1.0);
    let y0 = (pg.mean2d.y - ry).ceil().max(0.0);
    let y1 = (pg.mean2d.y + ry).floor().min(height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as u32, x1 as u32, y0 as u32, y1 as u32))
}

/// Center-pixel visibility records of one view.
pub fn view_visibilities(scene: &GaussianScene, cam: &Camera, view_index: u32) -> Vec<VisibilityRecord> {
    SplatView::new(scene, cam).visibilities(view_index)
}

/// Depth-ordered weights for every pixel of one view.
pub fn per_pixel_weights(scene: &GaussianScene, cam: &Camera) -> WeightMap {
    SplatView::new(scene, cam).weight_map()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector3};

    fn camera(w: u32, h: u32, f: f64) -> Camera {
        Camera {
            fx: f,
            fy: f,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            world_to_camera: Matrix4::identity(),
        }
    }

    fn pg_with_cov(cov: Matrix2<f64>) -> ProjectedGaussian {
        ProjectedGaussian {
            index: 0,
            mean2d: Vector2::new(10.0, 10.0),
            cov2d: cov,
            conic: cov.try_inverse().unwrap(),
            depth: 1.0,
            opacity: 1.0,
        }
    }

    #[test]
    fn on_axis_projection() {
        let cam = camera(64, 64, 100.0);
        let g = Gaussian::axis_aligned([0.0, 0.0, 2.0], [0.1; 3], 0.5);
        let pg = project_gaussian(0, &g, &cam).unwrap();
        assert_relative_eq!(pg.mean2d, Vector2::new(32.0, 32.0), epsilon = 1e-12);
        assert_relative_eq!(pg.cov2d[(0, 0)], 25.3, epsilon = 1e-5);
        assert_relative_eq!(pg.cov2d[(1, 1)], 25.3, epsilon = 1e-5);
        assert_relative_eq!(pg.cov2d[(0, 1)], 0.0, epsilon = 1e-9);
        assert_eq!(pg.depth, 2.0);
    }

    #[test]
    fn behind_camera_and_outside_frustum_are_culled() {
        let cam = camera(64, 64, 100.0);
        let behind = Gaussian::axis_aligned([0.0, 0.0, -1.0], [0.1; 3], 0.5);
        assert!(project_gaussian(0, &behind, &cam).is_none());
        let near = Gaussian::axis_aligned([0.0, 0.0, 0.005], [0.1; 3], 0.5);
        assert!(project_gaussian(0, &near, &cam).is_none());
        // u = 100 * 5 / 2 + 32 = 282, well beyond 1.15 * 64.
        let aside = Gaussian::axis_aligned([5.0, 0.0, 2.0], [0.1; 3], 0.5);
        assert!(project_gaussian(0, &aside, &cam).is_none());
    }

    #[test]
    fn mean_ignores_own_rotation() {
        let cam = camera(64, 64, 100.0);
        let a = Gaussian::new([0.0, 0.0, 2.0], [0.3, 0.1, 0.05], [1.0, 0.0, 0.0, 0.0], 0.5);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let b = Gaussian {
            rotation: [s, s, 0.0, 0.0],
            ..a
        };
        let pa = project_gaussian(0, &a, &cam).unwrap();
        let pb = project_gaussian(0, &b, &cam).unwrap();
        assert_eq!(pa.mean2d, pb.mean2d);
        assert_ne!(pa.cov2d, pb.cov2d);
    }

    #[test]
    fn density_values() {
        let pg = pg_with_cov(Matrix2::identity());
        assert_eq!(density_at(&pg, pg.mean2d), 1.0);
        assert_relative_eq!(
            density_at(&pg, pg.mean2d + Vector2::new(1.0, 0.0)),
            (-0.5f64).exp(),
            epsilon = 1e-12
        );
        let pg = pg_with_cov(Matrix2::new(4.0, 0.0, 0.0, 1.0));
        assert_relative_eq!(
            density_at(&pg, pg.mean2d + Vector2::new(2.0, 0.0)),
            0.6065306597126334,
            epsilon = 1e-12
        );
        let far = density_at(&pg, pg.mean2d + Vector2::new(3.0, 0.0));
        assert!(far < 0.6065306597126334);
    }

    #[test]
    fn alpha_rules() {
        let mut pg = pg_with_cov(Matrix2::identity());
        pg.opacity = 0.8;
        assert_relative_eq!(alpha_at(&pg, pg.mean2d), 0.8);
        pg.opacity = 1.0;
        assert_eq!(alpha_at(&pg, pg.mean2d), ALPHA_MAX);
        assert_eq!(alpha_from_density(0.3, 0.01), 0.0);
        // Outside the 3-sigma footprint even a dense Gaussian contributes nothing.
        assert_eq!(alpha_at(&pg, pg.mean2d + Vector2::new(3.01, 0.0)), 0.0);
    }

    fn on_axis(depth: f32, opacity: f32) -> Gaussian {
        Gaussian::axis_aligned([0.0, 0.0, depth], [0.05; 3], opacity)
    }

    #[test]
    fn single_gaussian_record() {
        let cam = camera(64, 64, 100.0);
        let scene = GaussianScene::new(vec![on_axis(2.0, 0.8)]);
        let recs = view_visibilities(&scene, &cam, 3);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].pixel, (32, 32));
        assert_eq!(recs[0].view_index, 3);
        assert_relative_eq!(recs[0].weight, 0.8, epsilon = 1e-7);
    }

    #[test]
    fn occluded_chain_weights() {
        let cam = camera(64, 64, 100.0);
        // Listed back to front to check that depth (not index) orders compositing.
        let scene = GaussianScene::new(vec![on_axis(4.0, 0.5), on_axis(3.0, 0.5), on_axis(2.0, 0.6)]);
        let recs = view_visibilities(&scene, &cam, 0);
        let w: Vec<f64> = recs.iter().map(|r| r.weight).collect();
        assert_relative_eq!(w[2], 0.6, epsilon = 1e-7);
        assert_relative_eq!(w[1], 0.2, epsilon = 1e-7);
        assert_relative_eq!(w[0], 0.1, epsilon = 1e-7);
        assert!(w.iter().sum::<f64>() <= 1.0);

        let two = GaussianScene::new(vec![on_axis(2.0, 0.6), on_axis(3.0, 0.5)]);
        let recs = view_visibilities(&two, &cam, 0);
        assert_relative_eq!(recs[0].weight, 0.6, epsilon = 1e-7);
        assert_relative_eq!(recs[1].weight, 0.2, epsilon = 1e-7);
    }

    #[test]
    fn empty_scene_has_empty_pixels() {
        let cam = camera(8, 6, 10.0);
        let map = per_pixel_weights(&GaussianScene::default(), &cam);
        assert_eq!(map.pixel_count(), 48);
        assert_eq!(map.entry_count(), 0);
    }

    #[test]
    fn capped_gaussian_sums_below_cap() {
        let cam = camera(64, 64, 100.0);
        let scene = GaussianScene::new(vec![Gaussian::axis_aligned([0.0, 0.0, 2.0], [0.2; 3], 1.0)]);
        let map = per_pixel_weights(&scene, &cam);
        for px in 0..map.pixel_count() {
            assert!(map.pixel_sum(px) <= ALPHA_MAX);
        }
        assert_eq!(map.pixel_sum(32 * 64 + 32), ALPHA_MAX);
    }

    #[test]
    fn center_records_match_weight_map() {
        let cam = Camera::look_at(
            Vector3::new(0.3, -0.2, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            60.0,
            48,
            40,
        );
        let gaussians = (0..30)
            .map(|i| {
                let t = i as f32;
                Gaussian::axis_aligned(
                    [(t * 0.37).sin() * 0.8, (t * 0.91).cos() * 0.6, (t * 0.13).sin()],
                    [0.05 + 0.01 * (i % 5) as f32, 0.08, 0.04],
                    0.3 + 0.02 * i as f32,
                )
            })
            .collect();
        let scene = GaussianScene::new(gaussians);
        let view = SplatView::new(&scene, &cam);
        let map = view.weight_map();
        let recs = view.visibilities(0);
        assert!(!recs.is_empty());
        for r in &recs {
            let e = map
                .entries_at(r.pixel.0, r.pixel.1)
                .iter()
                .find(|e| e.gaussian == r.gaussian_index)
                .unwrap();
            assert_eq!(e.weight.to_bits(), r.weight.to_bits());
        }
    }
}
