//! The lift: per view, center-pixel visibilities, the gate, then feature
//! lookups streamed into per-Gaussian aggregators in ascending view order.
//!
//! Views are processed in batches. Within a batch, visibility and gating run
//! in parallel; the resulting observations are then applied one view at a
//! time in index order, so the field does not depend on the thread schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    dot, weiszfeld_median, Aggregator, DispersionAccumulator, FeatureObservation, WeiszfeldOptions,
};
use crate::error::{Error, Result};
use crate::eval::{miou_macc, semantic_segment};
use crate::gate::{gate, keep_all, GateConfig};
use crate::io;
use crate::scene::{Camera, FeatureMap, GaussianFeatureField, GaussianScene};
use crate::splat::SplatView;

/// Lazily supplies the camera and feature map of each view.
pub trait ViewSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn camera(&self, view: usize) -> Result<Camera>;

    fn feature_map(&self, view: usize) -> Result<FeatureMap>;
}

/// Views held in memory.
pub struct MemoryViews<'a> {
    pub cameras: &'a [Camera],
    pub maps: &'a [FeatureMap],
}

impl<'a> MemoryViews<'a> {
    pub fn new(cameras: &'a [Camera], maps: &'a [FeatureMap]) -> Result<Self> {
        if cameras.len() != maps.len() {
            return Err(Error::validation(format!(
                "{} cameras but {} feature maps",
                cameras.len(),
                maps.len()
            )));
        }
        Ok(Self { cameras, maps })
    }
}

impl ViewSource for MemoryViews<'_> {
    fn len(&self) -> usize {
        self.cameras.len()
    }

    fn camera(&self, view: usize) -> Result<Camera> {
        Ok(self.cameras[view].clone())
    }

    fn feature_map(&self, view: usize) -> Result<FeatureMap> {
        Ok(self.maps[view].clone())
    }
}

/// Cameras in memory, feature maps read from disk when a view is processed.
pub struct FileViews {
    pub cameras: Vec<Camera>,
    pub map_paths: Vec<PathBuf>,
}

impl FileViews {
    pub fn new(cameras: Vec<Camera>, map_paths: Vec<PathBuf>) -> Result<Self> {
        if cameras.len() != map_paths.len() {
            return Err(Error::validation(format!(
                "{} cameras but {} feature maps",
                cameras.len(),
                map_paths.len()
            )));
        }
        Ok(Self { cameras, map_paths })
    }
}

impl ViewSource for FileViews {
    fn len(&self) -> usize {
        self.cameras.len()
    }

    fn camera(&self, view: usize) -> Result<Camera> {
        Ok(self.cameras[view].clone())
    }

    fn feature_map(&self, view: usize) -> Result<FeatureMap> {
        io::load_feature_map(&self.map_paths[view])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftOptions {
    pub gate: GateConfig,
    pub gating_enabled: bool,
    pub aggregator: Aggregator,
    pub weiszfeld_iters: usize,
    pub weiszfeld_eps: f64,
    /// Views preprocessed together; bounds transient memory.
    pub batch_size: usize,
}

impl Default for LiftOptions {
    fn default() -> Self {
        let w = WeiszfeldOptions::default();
        Self {
            gate: GateConfig::default(),
            gating_enabled: true,
            aggregator: Aggregator::CosineMedian,
            weiszfeld_iters: w.max_iters,
            weiszfeld_eps: w.eps,
            batch_size: 8,
        }
    }
}

impl LiftOptions {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.weiszfeld_eps > 0.0) {
            return Err(Error::config("weiszfeld_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LiftStats {
    pub views: usize,
    /// Observations consumed by the aggregators.
    pub observations: usize,
    /// Kept Gaussians whose center pixel carried no feature.
    pub skipped_invalid_pixels: usize,
    /// Kept Gaussians per view.
    pub kept_per_view: Vec<usize>,
    /// Largest size of the aggregator state, in bytes, over the whole run.
    pub peak_aggregator_bytes: usize,
    /// Gaussians that ended with a feature.
    pub lifted_gaussians: usize,
}

/// One kept Gaussian of one view with the feature at its center pixel.
#[derive(Debug, Clone)]
pub struct ViewObservation {
    pub gaussian: usize,
    pub weight: f64,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone)]
struct ViewResult {
    observations: Vec<ViewObservation>,
    kept: usize,
    skipped: usize,
}

fn process_view(
    scene: &GaussianScene,
    views: &dyn ViewSource,
    view: usize,
    opts: &LiftOptions,
    dim: Option<usize>,
) -> Result<ViewResult> {
    let cam = views.camera(view)?;
    cam.validate()?;
    let map = views.feature_map(view)?;
    if map.width != cam.width || map.height != cam.height {
        return Err(Error::validation(format!(
            "view {view}: feature map {}x{} does not match camera {}x{}",
            map.width, map.height, cam.width, cam.height
        )));
    }
    if let Some(d) = dim {
        if map.dim() != d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: map.dim(),
            });
        }
    }
    let records = SplatView::new(scene, &cam).visibilities(view as u32);
    let result = if opts.gating_enabled {
        gate(&records, &opts.gate)
    } else {
        keep_all(&records)
    };
    // `kept` and `records` are both sorted by Gaussian index.
    let mut observations = Vec::with_capacity(result.kept.len());
    let mut skipped = 0;
    let mut r = 0;
    for &g in &result.kept {
        while records[r].gaussian_index != g {
            r += 1;
        }
        let rec = &records[r];
        match map.feature_at(rec.pixel.0, rec.pixel.1) {
            Some(f) => observations.push(ViewObservation {
                gaussian: g,
                weight: rec.weight,
                feature: f.to_vec(),
            }),
            None => skipped += 1,
        }
    }
    Ok(ViewResult {
        observations,
        kept: result.kept.len(),
        skipped,
    })
}

/// Visits every kept observation in ascending view order (and ascending
/// Gaussian index within a view). Returns the feature dimension seen, if any
/// view was present.
pub fn for_each_observation(
    scene: &GaussianScene,
    views: &dyn ViewSource,
    opts: &LiftOptions,
    stats: &mut LiftStats,
    mut visit: impl FnMut(usize, &ViewObservation),
) -> Result<Option<usize>> {
    opts.validate()?;
    let mut dim: Option<usize> = None;
    if !views.is_empty() {
        dim = Some(views.feature_map(0)?.dim());
    }
    let n = views.len();
    let mut start = 0;
    while start < n {
        let end = (start + opts.batch_size).min(n);
        let batch: Vec<Result<ViewResult>> = (start..end)
            .into_par_iter()
            .map(|v| process_view(scene, views, v, opts, dim))
            .collect();
        for (offset, res) in batch.into_iter().enumerate() {
            let res = res?;
            stats.views += 1;
            stats.kept_per_view.push(res.kept);
            stats.skipped_invalid_pixels += res.skipped;
            for obs in &res.observations {
                stats.observations += 1;
                visit(start + offset, obs);
            }
        }
        start = end;
    }
    Ok(dim)
}

/// Per-Gaussian aggregation state for all three aggregators.
enum State {
    /// `z` rows plus cumulative weight; a row is live once `started`.
    Median {
        z: Vec<f64>,
        weight: Vec<f64>,
        started: Vec<bool>,
    },
    /// Weighted sums, normalized at the end.
    Mean { sum: Vec<f64>, weight: Vec<f64> },
    /// Buffered observations, solved per Gaussian at the end.
    Buffered { obs: Vec<Vec<FeatureObservation>> },
}

impl State {
    fn new(aggregator: Aggregator, n: usize, dim: usize) -> Self {
        match aggregator {
            Aggregator::CosineMedian => State::Median {
                z: vec![0.0; n * dim],
                weight: vec![0.0; n],
                started: vec![false; n],
            },
            Aggregator::WeightedMean => State::Mean {
                sum: vec![0.0; n * dim],
                weight: vec![0.0; n],
            },
            Aggregator::L1Median => State::Buffered {
                obs: vec![Vec::new(); n],
            },
        }
    }

    /// Heap bytes held by the state.
    fn bytes(&self) -> usize {
        use std::mem::size_of;
        match self {
            State::Median { z, weight, started } => {
                z.capacity() * size_of::<f64>()
                    + weight.capacity() * size_of::<f64>()
                    + started.capacity() * size_of::<bool>()
            }
            State::Mean { sum, weight } => {
                (sum.capacity() + weight.capacity()) * size_of::<f64>()
            }
            State::Buffered { obs } => {
                obs.capacity() * size_of::<Vec<FeatureObservation>>()
                    + obs
                        .iter()
                        .map(|v| {
                            v.capacity() * size_of::<FeatureObservation>()
                                + v.iter().map(|o| o.feature.capacity() * size_of::<f64>()).sum::<usize>()
                        })
                        .sum::<usize>()
            }
        }
    }

    fn observe(&mut self, dim: usize, view: usize, o: &ViewObservation) {
        let i = o.gaussian;
        match self {
            State::Median { z, weight, started } => {
                let row = &mut z[i * dim..(i + 1) * dim];
                let f: Vec<f64> = o.feature.iter().map(|&v| v as f64).collect();
                if !started[i] {
                    row.copy_from_slice(&f);
                    started[i] = true;
                }
                crate::aggregate::streaming_step(row, &mut weight[i], &f, o.weight);
            }
            State::Mean { sum, weight } => {
                for (s, &f) in sum[i * dim..(i + 1) * dim].iter_mut().zip(&o.feature) {
                    *s += o.weight * f as f64;
                }
                weight[i] += o.weight;
            }
            State::Buffered { obs } => obs[i].push(FeatureObservation {
                feature: o.feature.iter().map(|&v| v as f64).collect(),
                weight: o.weight,
                view_index: view as u32,
            }),
        }
    }

    fn finish(self, n: usize, dim: usize, opts: &LiftOptions) -> GaussianFeatureField {
        let mut field = GaussianFeatureField::empty(n, dim as u32);
        match self {
            State::Median { z, weight, .. } => {
                for i in 0..n {
                    field.set(i, &z[i * dim..(i + 1) * dim], weight[i]);
                }
            }
            State::Mean { sum, weight } => {
                for i in 0..n {
                    field.set(i, &sum[i * dim..(i + 1) * dim], weight[i]);
                }
            }
            State::Buffered { obs } => {
                let wopts = WeiszfeldOptions {
                    max_iters: opts.weiszfeld_iters,
                    eps: opts.weiszfeld_eps,
                };
                let solved: Vec<(Vec<f64>, f64)> = obs
                    .par_iter()
                    .map(|o| {
                        let w: f64 = o.iter().map(|x| x.weight).sum();
                        (weiszfeld_median(dim, o, wopts), w)
                    })
                    .collect();
                for (i, (z, w)) in solved.into_iter().enumerate() {
                    field.set(i, &z, w);
                }
            }
        }
        field
    }
}

/// Lifts the views onto the scene. Gaussians never observed end with a zero
/// feature and zero weight.
pub fn lift(
    scene: &GaussianScene,
    views: &dyn ViewSource,
    opts: &LiftOptions,
) -> Result<(GaussianFeatureField, LiftStats)> {
    let n = scene.len();
    let mut stats = LiftStats::default();
    let mut state: Option<(State, usize)> = None;
    let seen_dim = for_each_observation(scene, views, opts, &mut stats, |view, o| {
        let (st, dim) = state.get_or_insert_with(|| {
            let dim = o.feature.len();
            (State::new(opts.aggregator, n, dim), dim)
        });
        st.observe(*dim, view, o);
    })?;
    let dim = seen_dim.unwrap_or(0);
    let (st, dim) = state.unwrap_or_else(|| (State::new(opts.aggregator, n, dim), dim));
    // No state ever shrinks, so its final size is its peak.
    stats.peak_aggregator_bytes = st.bytes();
    let field = st.finish(n, dim, opts);
    stats.lifted_gaussians = (0..n).filter(|&i| field.is_valid(i)).count();
    Ok((field, stats))
}

/// Second pass: per-Gaussian unweighted mean of `1 - f.z` over the kept
/// observations of valid Gaussians.
pub fn dispersion_pass(
    scene: &GaussianScene,
    views: &dyn ViewSource,
    field: &GaussianFeatureField,
    opts: &LiftOptions,
) -> Result<DispersionAccumulator> {
    let mut acc = DispersionAccumulator::new(scene.len());
    let mut stats = LiftStats::default();
    for_each_observation(scene, views, opts, &mut stats, |_, o| {
        if field.is_valid(o.gaussian) {
            let z = field.feature(o.gaussian);
            let fz: f64 = o
                .feature
                .iter()
                .zip(z)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            acc.add(o.gaussian, 1.0 - fz);
        }
    })?;
    Ok(acc)
}

/// Buffers every kept observation per Gaussian. Test and oracle use only.
pub fn collect_observations(
    scene: &GaussianScene,
    views: &dyn ViewSource,
    opts: &LiftOptions,
) -> Result<Vec<Vec<FeatureObservation>>> {
    let mut out = vec![Vec::new(); scene.len()];
    let mut stats = LiftStats::default();
    for_each_observation(scene, views, opts, &mut stats, |view, o| {
        out[o.gaussian].push(FeatureObservation {
            feature: o.feature.iter().map(|&v| v as f64).collect(),
            weight: o.weight,
            view_index: view as u32,
        });
    })?;
    Ok(out)
}

// Config ------------------------------------------------------------------

/// Everything a lift needs, as one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scene: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    /// One feature map per camera, in camera order.
    pub feature_maps: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    #[serde(flatten)]
    pub lift: LiftOptions,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("pipeline config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn required<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
        v.as_ref()
            .ok_or_else(|| Error::config(format!("missing {what} path")))
    }

    /// Loads the inputs, lifts, and writes the field when an output path is set.
    pub fn run(&self) -> Result<(GaussianFeatureField, LiftStats)> {
        let scene = io::load_scene(Self::required(&self.scene, "scene")?)?;
        let cameras = io::load_cameras(Self::required(&self.cameras, "cameras")?)?;
        let views = FileViews::new(cameras, self.feature_maps.clone())?;
        let (field, stats) = lift(&scene, &views, &self.lift)?;
        if let Some(out) = &self.output {
            io::save_field(&field, out)?;
        }
        Ok((field, stats))
    }
}

// Ablation ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub gating_enabled: bool,
    pub aggregator: Aggregator,
}

/// Ground truth for scoring a lifted field: class embeddings and the class
/// of every Gaussian (`None` excludes it).
#[derive(Debug, Clone)]
pub struct AblationTruth {
    pub classes: Vec<Vec<f32>>,
    pub labels: Vec<Option<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub gating_enabled: bool,
    pub aggregator: Aggregator,
    pub miou: f64,
    pub macc: f64,
    pub dispersion: f64,
    /// Mean cosine between each valid Gaussian's feature and its class
    /// embedding, per class.
    pub purity: BTreeMap<String, f64>,
    pub lifted_gaussians: usize,
}

/// Mean cosine to the class embedding over valid, labeled Gaussians.
pub fn class_purity(field: &GaussianFeatureField, truth: &AblationTruth) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (i, l) in truth.labels.iter().enumerate() {
        let Some(c) = *l else { continue };
        if !field.is_valid(i) {
            continue;
        }
        let z = field.feature_f64(i);
        let e: Vec<f64> = truth.classes[c as usize].iter().map(|&v| v as f64).collect();
        let s = acc.entry(c).or_insert((0.0, 0));
        s.0 += dot(&z, &e);
        s.1 += 1;
    }
    acc.into_iter()
        .map(|(c, (s, n))| (c.to_string(), s / n as f64))
        .collect()
}

/// Lifts and scores one configuration.
pub fn evaluate_cell(
    scene: &GaussianScene,
    views: &dyn ViewSource,
    base: &LiftOptions,
    cell: AblationCell,
    truth: &AblationTruth,
) -> Result<AblationRow> {
    let opts = LiftOptions {
        gating_enabled: cell.gating_enabled,
        aggregator: cell.aggregator,
        ..*base
    };
    let (field, stats) = lift(scene, views, &opts)?;
    let disp = dispersion_pass(scene, views, &field, &opts)?.scene_value();
    let pred = semantic_segment(&field, &truth.classes)?;
    // Gaussians without a feature are excluded from the metrics.
    let gt: Vec<Option<u32>> = truth
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| if field.is_valid(i) { *l } else { None })
        .collect();
    let m = miou_macc(&pred, &gt, truth.classes.len())?;
    Ok(AblationRow {
        gating_enabled: cell.gating_enabled,
        aggregator: cell.aggregator,
        miou: m.miou,
        macc: m.macc,
        dispersion: disp,
        purity: class_purity(&field, truth),
        lifted_gaussians: stats.lifted_gaussians,
    })
}

/// One row per cell, in cell order, all sharing the same inputs.
pub fn ablation_run(
    scene: &GaussianScene,
    views: &dyn ViewSource,
    base: &LiftOptions,
    cells: &[AblationCell],
    truth: &AblationTruth,
) -> Result<Vec<AblationRow>> {
    if truth.labels.len() != scene.len() {
        return Err(Error::validation(format!(
            "{} ground-truth labels for {} gaussians",
            truth.labels.len(),
            scene.len()
        )));
    }
    cells
        .iter()
        .map(|&c| evaluate_cell(scene, views, base, c, truth))
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("gating,aggregator,miou,macc,dispersion,lifted\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.gating_enabled,
            r.aggregator.name(),
            r.miou,
            r.macc,
            r.dispersion,
            r.lifted_gaussians
        ));
    }
    s
}
