//! Query-driven selection, segmentation metrics and the mask-corruption
//! protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::scene::{Camera, GaussianFeatureField, GaussianScene};
use crate::splat::SplatView;

/// 3D selection threshold on per-Gaussian relevancy.
pub const SELECT_3D_THRESHOLD: f64 = 0.6;
/// 2D threshold on rendered relevancy maps.
pub const SELECT_2D_THRESHOLD: f64 = 0.5;
/// Accumulated-weight threshold when rasterizing a selection into a mask.
pub const RENDER_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TAU_MIN: usize = 64;

// Masks ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height as usize * width as usize],
        }
    }

    pub fn from_bits(height: u32, width: u32, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height as usize * width as usize {
            return Err(Error::format(format!(
                "mask payload has {} bytes for {height}x{width}",
                bits.len()
            )));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::validation(format!(
                "mask byte {pos} is {}, expected 0 or 1",
                bits[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Filled axis-aligned rectangle `[x0, x1) x [y0, y1)`.
    pub fn rect(height: u32, width: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let mut m = Self::zeros(height, width);
        for y in y0..y1.min(height) {
            for x in x0..x1.min(width) {
                m.set(x, y, true);
            }
        }
        m
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Tight inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }
}

// Morphology -------------------------------------------------------------

/// Half-widths of the digital disk `{(dx, dy) : dx^2 + dy^2 <= r^2}`, one per
/// row offset `dy` in `-r..=r`.
pub fn disk_half_widths(r: u32) -> Vec<u32> {
    let r = r as i64;
    (-r..=r)
        .map(|dy| {
            let rem = r * r - dy * dy;
            let mut h = (rem as f64).sqrt() as i64;
            while h * h > rem {
                h -= 1;
            }
            while (h + 1) * (h + 1) <= rem {
                h += 1;
            }
            h as u32
        })
        .collect()
}

/// Per-row prefix counts of set pixels, `width + 1` entries per row.
fn row_prefix(mask: &BinaryMask) -> Vec<u32> {
    let w = mask.width as usize;
    let mut out = Vec::with_capacity((w + 1) * mask.height as usize);
    for row in mask.bits.chunks_exact(w.max(1)).take(mask.height as usize) {
        let mut acc = 0u32;
        out.push(0);
        for &b in row {
            acc += b as u32;
            out.push(acc);
        }
    }
    out
}

fn morph(mask: &BinaryMask, r: u32, erode: bool) -> BinaryMask {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut out = BinaryMask::zeros(mask.height, mask.width);
    if w == 0 || h == 0 {
        return out;
    }
    let prefix = row_prefix(mask);
    let half = disk_half_widths(r);
    let r = r as i64;
    let stride = (w + 1) as usize;
    // Count of set pixels in row `y`, columns `[x0, x1]` clipped to the image.
    let count = |y: i64, x0: i64, x1: i64| -> (u32, u32) {
        let a = x0.max(0);
        let b = x1.min(w - 1);
        if y < 0 || y >= h || a > b {
            return (0, 0);
        }
        let base = y as usize * stride;
        (prefix[base + b as usize + 1] - prefix[base + a as usize], (b - a + 1) as u32)
    };
    for y in 0..h {
        for x in 0..w {
            let mut on = erode;
            for (k, dy) in (-r..=r).enumerate() {
                let hw = half[k] as i64;
                let span = (2 * hw + 1) as u32;
                let (set, inside) = count(y + dy, x - hw, x + hw);
                if erode {
                    // Pixels outside the image count as background.
                    if set < span || inside < span {
                        on = false;
                        break;
                    }
                } else if set > 0 {
                    on = true;
                    break;
                }
            }
            if on {
                out.set(x as u32, y as u32, true);
            }
        }
    }
    out
}

/// Erosion by the disk of radius `r`; outside the image is background.
pub fn erode(mask: &BinaryMask, r: u32) -> BinaryMask {
    morph(mask, r, true)
}

/// Dilation by the disk of radius `r`.
pub fn dilate(mask: &BinaryMask, r: u32) -> BinaryMask {
    morph(mask, r, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    Erode,
    Dilate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub mask: BinaryMask,
    /// The drawn sign.
    pub drawn: Perturbation,
    /// What was actually applied (dilation when the guard fired).
    pub applied: Perturbation,
}

/// Sign for mask `mask_index` under `seed`; independent of visit order.
pub fn corruption_sign(seed: u64, mask_index: u64) -> Perturbation {
    if KeyedRng::new(seed, mask_index).coin() {
        Perturbation::Dilate
    } else {
        Perturbation::Erode
    }
}

/// Applies a given perturbation with the non-vanishing guard: an erosion
/// whose area drops below `tau_min` is replaced by a dilation.
pub fn corrupt_mask_with(mask: &BinaryMask, r: u32, sign: Perturbation, tau_min: usize) -> Corruption {
    match sign {
        Perturbation::Dilate => Corruption {
            mask: dilate(mask, r),
            drawn: sign,
            applied: Perturbation::Dilate,
        },
        Perturbation::Erode => {
            let eroded = erode(mask, r);
            if eroded.area() < tau_min {
                Corruption {
                    mask: dilate(mask, r),
                    drawn: sign,
                    applied: Perturbation::Dilate,
                }
            } else {
                Corruption {
                    mask: eroded,
                    drawn: sign,
                    applied: Perturbation::Erode,
                }
            }
        }
    }
}

/// Random erosion or dilation with probability 1/2 each.
pub fn corrupt_mask(mask: &BinaryMask, r: u32, seed: u64, mask_index: u64, tau_min: usize) -> Corruption {
    corrupt_mask_with(mask, r, corruption_sign(seed, mask_index), tau_min)
}

// Relevancy and selection ------------------------------------------------

fn check_dim(field: &GaussianFeatureField, v: &[f32]) -> Result<()> {
    if v.len() != field.dim() {
        return Err(Error::DimMismatch {
            expected: field.dim(),
            actual: v.len(),
        });
    }
    Ok(())
}

fn dot32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Relevancy of a unit feature against a query.
///
/// Without negatives this is `(cos + 1) / 2`; with negatives it is the
/// smallest pairwise softmax `e^{z.q} / (e^{z.q} + e^{z.n})`.
pub fn relevancy_score(z: &[f32], query: &[f32], negatives: &[Vec<f32>]) -> f64 {
    let zq = dot32(z, query);
    if negatives.is_empty() {
        return (zq + 1.0) / 2.0;
    }
    negatives
        .iter()
        .map(|n| {
            let zn = dot32(z, n);
            // e^a / (e^a + e^b) = 1 / (1 + e^{b - a})
            1.0 / (1.0 + (zn - zq).exp())
        })
        .fold(f64::INFINITY, f64::min)
}

/// Per-Gaussian relevancy; Gaussians without a feature score 0.
pub fn relevancy(field: &GaussianFeatureField, query: &[f32], negatives: &[Vec<f32>]) -> Result<Vec<f64>> {
    check_dim(field, query)?;
    for n in negatives {
        check_dim(field, n)?;
    }
    Ok((0..field.len())
        .map(|i| {
            if field.is_valid(i) {
                relevancy_score(field.feature(i), query, negatives)
            } else {
                0.0
            }
        })
        .collect())
}

/// Indices of valid Gaussians whose relevancy reaches `threshold`.
pub fn select_3d(
    field: &GaussianFeatureField,
    query: &[f32],
    negatives: &[Vec<f32>],
    threshold: f64,
) -> Result<Vec<usize>> {
    let scores = relevancy(field, query, negatives)?;
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| field.is_valid(i) && s >= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Per-pixel accumulated weight of the selected Gaussians composited alone.
pub fn selection_opacity(scene: &GaussianScene, cam: &Camera, selected: &[usize]) -> Vec<f64> {
    let mut keep = vec![false; scene.len()];
    for &i in selected {
        keep[i] = true;
    }
    let map = SplatView::with_filter(scene, cam, |i| keep[i]).weight_map();
    (0..map.pixel_count()).map(|px| map.pixel_sum(px)).collect()
}

/// Rasterizes a selection into a mask where accumulated weight reaches
/// `threshold`.
pub fn render_selection(
    scene: &GaussianScene,
    cam: &Camera,
    selected: &[usize],
    threshold: f64,
) -> BinaryMask {
    let opacity = selection_opacity(scene, cam, selected);
    let bits = opacity.iter().map(|&a| (a >= threshold) as u8).collect();
    BinaryMask {
        height: cam.height,
        width: cam.width,
        bits,
    }
}

/// 2D path: per-pixel weighted sum of valid field features, scored against
/// the query. Pixels with no feature score 0.
pub fn relevancy_map_2d(
    scene: &GaussianScene,
    cam: &Camera,
    field: &GaussianFeatureField,
    query: &[f32],
    negatives: &[Vec<f32>],
) -> Result<Vec<f64>> {
    check_dim(field, query)?;
    let map = SplatView::with_filter(scene, cam, |i| field.is_valid(i)).weight_map();
    let d = field.dim();
    let mut feature = vec![0.0f64; d];
    let mut feature32 = vec![0.0f32; d];
    Ok((0..map.pixel_count())
        .map(|px| {
            feature.fill(0.0);
            for e in map.entries(px) {
                for (acc, &v) in feature.iter_mut().zip(field.feature(e.gaussian)) {
                    *acc += e.weight * v as f64;
                }
            }
            let n = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= 1e-12 {
                return 0.0;
            }
            for (o, v) in feature32.iter_mut().zip(&feature) {
                *o = (v / n) as f32;
            }
            relevancy_score(&feature32, query, negatives)
        })
        .collect())
}

pub fn threshold_map(height: u32, width: u32, scores: &[f64], threshold: f64) -> BinaryMask {
    BinaryMask {
        height,
        width,
        bits: scores.iter().map(|&s| (s >= threshold) as u8).collect(),
    }
}

/// Per-Gaussian class by highest cosine similarity; ties go to the smaller
/// class id. Invalid Gaussians get `None`.
pub fn semantic_segment(field: &GaussianFeatureField, classes: &[Vec<f32>]) -> Result<Vec<Option<u32>>> {
    let mut unit = Vec::with_capacity(classes.len());
    for c in classes {
        check_dim(field, c)?;
        let n = dot32(c, c).sqrt();
        if n == 0.0 {
            return Err(Error::validation("class embedding has zero norm"));
        }
        unit.push(c.iter().map(|&v| (v as f64 / n) as f32).collect::<Vec<f32>>());
    }
    Ok((0..field.len())
        .map(|i| {
            if !field.is_valid(i) {
                return None;
            }
            let z = field.feature(i);
            let mut best: Option<(u32, f64)> = None;
            for (c, e) in unit.iter().enumerate() {
                let s = dot32(z, e);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((c as u32, s));
                }
            }
            best.map(|(c, _)| c)
        })
        .collect())
}

// Metrics ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub iou: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub macc: f64,
    pub per_class: BTreeMap<String, ClassScore>,
}

impl SegmentationMetrics {
    fn from_scores(per_class: BTreeMap<String, ClassScore>) -> Self {
        let n = per_class.len();
        let (miou, macc) = if n == 0 {
            (0.0, 0.0)
        } else {
            let s = per_class
                .values()
                .fold((0.0, 0.0), |(i, a), c| (i + c.iou, a + c.acc));
            (s.0 / n as f64, s.1 / n as f64)
        };
        Self {
            miou,
            macc,
            per_class,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou,acc\n");
        for (k, v) in &self.per_class {
            s.push_str(&format!("{k},{},{}\n", v.iou, v.acc));
        }
        s.push_str(&format!("mean,{},{}\n", self.miou, self.macc));
        s
    }
}

/// mIoU and mAcc over dense label arrays. `None` in the ground truth is
/// ignored; `None` in the prediction counts as a miss. Classes absent from
/// the ground truth are skipped.
pub fn miou_macc(pred: &[Option<u32>], gt: &[Option<u32>], num_classes: usize) -> Result<SegmentationMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::validation(format!(
            "prediction has {} entries, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let Some(g) = g else { continue };
        let g = g as usize;
        if g >= num_classes {
            return Err(Error::validation(format!(
                "ground-truth class {g} exceeds class count {num_classes}"
            )));
        }
        match p {
            Some(p) if p as usize == g => tp[g] += 1,
            Some(p) => {
                fn_[g] += 1;
                if (p as usize) < num_classes {
                    fp[p as usize] += 1;
                }
            }
            None => fn_[g] += 1,
        }
    }
    let mut per_class = BTreeMap::new();
    for c in 0..num_classes {
        if tp[c] + fn_[c] == 0 {
            continue;
        }
        per_class.insert(
            c.to_string(),
            ClassScore {
                iou: tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64,
                acc: tp[c] as f64 / (tp[c] + fn_[c]) as f64,
            },
        );
    }
    Ok(SegmentationMetrics::from_scores(per_class))
}

/// Foreground IoU and accuracy of one binary prediction.
pub fn mask_scores(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<ClassScore>> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::validation(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fn_ == 0 {
        return Ok(None);
    }
    Ok(Some(ClassScore {
        iou: tp as f64 / (tp + fp + fn_) as f64,
        acc: tp as f64 / (tp + fn_) as f64,
    }))
}

/// Mean foreground IoU / accuracy over named `(prediction, ground truth)`
/// mask pairs. Pairs whose ground truth is empty are skipped.
pub fn miou_macc_masks(pairs: &[(String, BinaryMask, BinaryMask)]) -> Result<SegmentationMetrics> {
    let mut per_class = BTreeMap::new();
    for (name, pred, gt) in pairs {
        if let Some(s) = mask_scores(pred, gt)? {
            per_class.insert(name.clone(), s);
        }
    }
    Ok(SegmentationMetrics::from_scores(per_class))
}
