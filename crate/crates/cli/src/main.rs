//! `splatlift` command line front end.
//!
//! Every subcommand prints its metrics as JSON on stdout, or writes them to
//! `--out` where the subcommand has no other output file. Exit codes: 0 ok,
//! 2 config error, 3 data-format error, 4 validation error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use splatlift::aggregate::{
    aggregate_stream, dispersion, weighted_mean, weiszfeld_median, Aggregator, WeiszfeldOptions,
};
use splatlift::eval::{
    self, corrupt_mask, miou_macc, miou_macc_masks, render_selection, select_3d, semantic_segment,
    BinaryMask, Perturbation, DEFAULT_TAU_MIN, RENDER_THRESHOLD, SELECT_2D_THRESHOLD,
    SELECT_3D_THRESHOLD,
};
use splatlift::io;
use splatlift::label::{assign_labels_with, significance, GaussianLabels, LabelConfig};
use splatlift::pipeline::{
    ablation_csv, ablation_run, dispersion_pass, AblationCell, AblationTruth, FileViews,
    PipelineConfig,
};
use splatlift::synth::{make_feature_stream, make_occlusion_scene, OcclusionSceneSpec, StreamSpec, Wall};
use splatlift::{Error, Result};

#[derive(Parser)]
#[command(name = "splatlift", version, about = "Lift 2D feature maps onto 3D Gaussian scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lift per-view feature maps onto a scene.
    Lift(LiftArgs),
    /// Pseudo-label Gaussians from an annotated point cloud.
    Label(LabelArgs),
    /// Select Gaussians matching text queries, optionally rendering masks.
    Query(QueryArgs),
    /// Score a field or predicted masks against ground truth.
    Eval(EvalArgs),
    /// Erode or dilate masks with the seeded corruption protocol.
    Corrupt(CorruptArgs),
    /// Generate synthetic benchmarks.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Dispersion of a lifted field, or of a feature stream per aggregator.
    Disp(DispArgs),
    /// Lift and score a grid of gating/aggregator settings.
    Ablate(AblateArgs),
}

/// Inputs and knobs shared by every command that runs a lift. Flags override
/// the `--config` file.
#[derive(Args, Clone)]
struct LiftInputs {
    /// Pipeline config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Feature maps, one per camera in camera order.
    #[arg(long, num_args = 1..)]
    maps: Vec<PathBuf>,
    #[arg(long)]
    tau_view: Option<f64>,
    #[arg(long)]
    tau_abs: Option<f64>,
    #[arg(long)]
    gate_q: Option<f64>,
    /// Disable the visibility gate and keep every visible Gaussian.
    #[arg(long)]
    no_gating: bool,
    #[arg(long, value_enum)]
    aggregator: Option<AggregatorArg>,
    #[arg(long)]
    weiszfeld_iters: Option<usize>,
    #[arg(long)]
    weiszfeld_eps: Option<f64>,
    /// Views preprocessed in parallel per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregatorArg {
    CosineMedian,
    WeightedMean,
    L1Median,
}

impl From<AggregatorArg> for Aggregator {
    fn from(a: AggregatorArg) -> Self {
        match a {
            AggregatorArg::CosineMedian => Aggregator::CosineMedian,
            AggregatorArg::WeightedMean => Aggregator::WeightedMean,
            AggregatorArg::L1Median => Aggregator::L1Median,
        }
    }
}

impl LiftInputs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if self.scene.is_some() {
            cfg.scene = self.scene.clone();
        }
        if self.cameras.is_some() {
            cfg.cameras = self.cameras.clone();
        }
        if !self.maps.is_empty() {
            cfg.feature_maps = self.maps.clone();
        }
        let o = &mut cfg.lift;
        if let Some(v) = self.tau_view {
            o.gate.tau_view = v;
        }
        if let Some(v) = self.tau_abs {
            o.gate.tau_abs = v;
        }
        if let Some(v) = self.gate_q {
            o.gate.q = v;
        }
        if self.no_gating {
            o.gating_enabled = false;
        }
        if let Some(a) = self.aggregator {
            o.aggregator = a.into();
        }
        if let Some(v) = self.weiszfeld_iters {
            o.weiszfeld_iters = v;
        }
        if let Some(v) = self.weiszfeld_eps {
            o.weiszfeld_eps = v;
        }
        if let Some(v) = self.batch_size {
            o.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.lift.validate()?;
        Ok(cfg)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("missing {what} (flag or config key)")))
}

fn load_views(cfg: &PipelineConfig) -> Result<(splatlift::scene::GaussianScene, FileViews)> {
    let scene = io::load_scene(required(&cfg.scene, "scene")?)?;
    let cameras = io::load_cameras(required(&cfg.cameras, "cameras")?)?;
    let views = FileViews::new(cameras, cfg.feature_maps.clone())?;
    Ok((scene, views))
}

#[derive(Args)]
struct LiftArgs {
    #[command(flatten)]
    inputs: LiftInputs,
    /// Output field file; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the run statistics here instead of stdout.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    points: PathBuf,
    #[arg(long, default_value_t = LabelConfig::default().tau_radius)]
    tau_radius: f64,
    #[arg(long, default_value_t = LabelConfig::default().k_fallback)]
    k_fallback: usize,
    #[arg(long, default_value_t = LabelConfig::default().chunk_size)]
    chunk_size: usize,
    /// Vote without the opacity-volume significance factor.
    #[arg(long)]
    no_significance: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Relevancy threshold for 3D selection.
    #[arg(long, default_value_t = SELECT_3D_THRESHOLD)]
    threshold: f64,
    /// Scene and cameras enable mask rendering into `--mask-dir`.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long)]
    mask_dir: Option<PathBuf>,
    /// Accumulated-weight threshold for rendered selections.
    #[arg(long, default_value_t = RENDER_THRESHOLD)]
    render_threshold: f64,
    /// Render masks from the 2D relevancy map instead of the 3D selection.
    #[arg(long)]
    relevancy_2d: bool,
    /// Threshold on the 2D relevancy map.
    #[arg(long, default_value_t = SELECT_2D_THRESHOLD)]
    threshold_2d: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    /// Per query, the thresholded 3D selection against its class.
    Selection,
    /// Per Gaussian, the class of highest cosine similarity.
    Semantic,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires_all = ["queries", "labels"])]
    field: Option<PathBuf>,
    /// Queries in class-id order.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Ground-truth Gaussian labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "selection")]
    mode: EvalMode,
    #[arg(long, default_value_t = SELECT_3D_THRESHOLD)]
    threshold: f64,
    /// Predicted masks, paired with `--gt-masks` by position.
    #[arg(long, num_args = 1.., conflicts_with = "field")]
    pred_masks: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    gt_masks: Vec<PathBuf>,
    /// Names for mask pairs; defaults to the ground-truth file stems.
    #[arg(long, num_args = 1..)]
    names: Vec<String>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    /// Input masks; each one's position is its index for the seeded sign.
    #[arg(long, num_args = 1.., required = true)]
    masks: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    radius: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TAU_MIN)]
    tau_min: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Two-wall occlusion scene with cameras, maps, truth and a pipeline config.
    Occlusion {
        /// Spec JSON; defaults apply to missing keys and to a missing file.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Feature stream with inliers and outliers.
    Stream {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the ground-truth direction and outlier flags as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DispArgs {
    /// Lifted field; dispersion over the kept observations of the lift inputs.
    #[arg(long, conflicts_with = "stream")]
    field: Option<PathBuf>,
    #[command(flatten)]
    inputs: LiftInputs,
    /// Feature stream; reports dispersion under every aggregator.
    #[arg(long)]
    stream: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    inputs: LiftInputs,
    /// Truth JSON: `{"classes": [[..]], "labels": [id or null, ..]}`.
    #[arg(long)]
    truth: PathBuf,
    /// Cells JSON: `[{"gating_enabled": true, "aggregator": "cosine-median"}, ..]`.
    /// Defaults to gating on/off crossed with cosine median and weighted mean.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthFile {
    classes: Vec<Vec<f32>>,
    labels: Vec<Option<u32>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    match out {
        Some(p) => write_text(p, &(text + "\n")),
        None => {
            use std::io::Write;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                }),
                _ => Ok(()),
            }
        }
    }
}

fn run_lift(a: &LiftArgs) -> Result<()> {
    let mut cfg = a.inputs.resolve()?;
    if a.out.is_some() {
        cfg.output = a.out.clone();
    }
    required(&cfg.output, "output field path")?;
    let (_, stats) = cfg.run()?;
    log::info!(
        "lifted {} of {} observations over {} views",
        stats.lifted_gaussians,
        stats.observations,
        stats.views
    );
    emit(&stats, a.stats.as_deref())
}

fn run_label(a: &LabelArgs) -> Result<()> {
    let cfg = LabelConfig {
        tau_radius: a.tau_radius,
        k_fallback: a.k_fallback,
        chunk_size: a.chunk_size,
    };
    let scene = io::load_scene(&a.scene)?;
    let cloud = io::load_point_cloud(&a.points)?;
    let (labels, stats) = assign_labels_with(&scene, &cloud, &cfg, !a.no_significance)?;
    io::save_labels(&labels, &a.out)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for l in io::label_ids(&labels) {
        let key = l.map_or_else(|| "unlabeled".to_string(), |c| c.to_string());
        *counts.entry(key).or_default() += 1;
    }
    emit(
        &json!({
            "gaussians": labels.len(),
            "total_candidates": stats.total_candidates,
            "fallback_gaussians": stats.fallback_gaussians,
            "class_counts": counts,
        }),
        None,
    )
}

fn run_query(a: &QueryArgs) -> Result<()> {
    let field = io::load_field(&a.field)?;
    let queries = io::load_queries(&a.queries)?;
    let negatives = queries.negative_vectors();
    let render = match (&a.scene, &a.cameras, &a.mask_dir) {
        (Some(s), Some(c), Some(d)) => Some((io::load_scene(s)?, io::load_cameras(c)?, d)),
        (None, None, None) => None,
        _ => {
            return Err(Error::Config(
                "mask rendering needs --scene, --cameras and --mask-dir together".into(),
            ))
        }
    };
    if let Some((scene, _, dir)) = &render {
        if scene.len() != field.len() {
            return Err(Error::Validation(format!(
                "field has {} features for {} gaussians",
                field.len(),
                scene.len()
            )));
        }
        create_dir(dir)?;
    }
    let mut report = BTreeMap::new();
    for q in &queries.queries {
        let selected = select_3d(&field, &q.vec, &negatives, a.threshold)?;
        let mut masks = Vec::new();
        if let Some((scene, cams, dir)) = &render {
            for (v, cam) in cams.iter().enumerate() {
                let mask = if a.relevancy_2d {
                    let scores = eval::relevancy_map_2d(scene, cam, &field, &q.vec, &negatives)?;
                    eval::threshold_map(cam.height, cam.width, &scores, a.threshold_2d)
                } else {
                    render_selection(scene, cam, &selected, a.render_threshold)
                };
                let path = dir.join(format!("{}_view{v:04}.vmsk", q.name));
                io::save_mask(&mask, &path)?;
                masks.push(json!({"view": v, "path": path, "area": mask.area()}));
            }
        }
        report.insert(
            q.name.clone(),
            json!({"count": selected.len(), "selected": selected, "masks": masks}),
        );
    }
    emit(&report, a.out.as_deref())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let metrics = if let Some(field_path) = &a.field {
        let field = io::load_field(field_path)?;
        let queries = io::load_queries(a.queries.as_ref().expect("required by clap"))?;
        let gt = io::label_ids(&io::load_labels(a.labels.as_ref().expect("required by clap"))?);
        if gt.len() != field.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} features",
                gt.len(),
                field.len()
            )));
        }
        // Gaussians without a feature are excluded.
        let gt: Vec<Option<u32>> = gt
            .iter()
            .enumerate()
            .map(|(i, l)| if field.is_valid(i) { *l } else { None })
            .collect();
        match a.mode {
            EvalMode::Semantic => {
                let classes: Vec<Vec<f32>> = queries.queries.iter().map(|q| q.vec.clone()).collect();
                let pred = semantic_segment(&field, &classes)?;
                let mut m = miou_macc(&pred, &gt, classes.len())?;
                m.per_class = m
                    .per_class
                    .into_iter()
                    .map(|(k, v)| {
                        let name = k
                            .parse::<usize>()
                            .ok()
                            .and_then(|c| queries.queries.get(c))
                            .map_or(k, |q| q.name.clone());
                        (name, v)
                    })
                    .collect();
                m
            }
            EvalMode::Selection => {
                let negatives = queries.negative_vectors();
                let valid: Vec<usize> = (0..field.len()).filter(|&i| field.is_valid(i)).collect();
                let n = valid.len() as u32;
                let mut pairs = Vec::new();
                for (c, q) in queries.queries.iter().enumerate() {
                    let selected = select_3d(&field, &q.vec, &negatives, a.threshold)?;
                    let mut pred = BinaryMask::zeros(1, n);
                    let mut truth = BinaryMask::zeros(1, n);
                    for (x, &i) in valid.iter().enumerate() {
                        truth.set(x as u32, 0, gt[i] == Some(c as u32));
                        pred.set(x as u32, 0, selected.binary_search(&i).is_ok());
                    }
                    pairs.push((q.name.clone(), pred, truth));
                }
                miou_macc_masks(&pairs)?
            }
        }
    } else {
        if a.pred_masks.is_empty() || a.pred_masks.len() != a.gt_masks.len() {
            return Err(Error::Config(
                "give --field/--queries/--labels, or equal numbers of --pred-masks and --gt-masks".into(),
            ));
        }
        if !a.names.is_empty() && a.names.len() != a.gt_masks.len() {
            return Err(Error::Config("--names must match the number of mask pairs".into()));
        }
        let mut pairs = Vec::new();
        for (k, (p, g)) in a.pred_masks.iter().zip(&a.gt_masks).enumerate() {
            let name = a.names.get(k).cloned().unwrap_or_else(|| {
                g.file_stem()
                    .map_or_else(|| k.to_string(), |s| s.to_string_lossy().into_owned())
            });
            pairs.push((name, io::load_mask(p)?, io::load_mask(g)?));
        }
        miou_macc_masks(&pairs)?
    };
    if let Some(csv) = &a.csv {
        write_text(csv, &metrics.to_csv())?;
    }
    emit(&metrics, a.out.as_deref())
}

fn run_corrupt(a: &CorruptArgs) -> Result<()> {
    if a.radius == 0 {
        return Err(Error::Config("radius must be at least 1".into()));
    }
    create_dir(&a.out_dir)?;
    let mut rows = Vec::new();
    for (k, path) in a.masks.iter().enumerate() {
        let mask = io::load_mask(path)?;
        let c = corrupt_mask(&mask, a.radius, a.seed, k as u64, a.tau_min);
        let name = path.file_name().map_or_else(|| format!("mask{k}.vmsk"), |s| s.to_string_lossy().into_owned());
        let out = a.out_dir.join(name);
        io::save_mask(&c.mask, &out)?;
        let op = |p: Perturbation| match p {
            Perturbation::Erode => "erode",
            Perturbation::Dilate => "dilate",
        };
        rows.push(json!({
            "index": k,
            "input": path,
            "output": out,
            "drawn": op(c.drawn),
            "applied": op(c.applied),
            "area_before": mask.area(),
            "area_after": c.mask.area(),
            "bbox": c.mask.bounding_box(),
        }));
    }
    emit(
        &json!({"radius": a.radius, "seed": a.seed, "tau_min": a.tau_min, "masks": rows}),
        a.out.as_deref(),
    )
}

fn run_synth(c: &SynthCommand) -> Result<()> {
    match c {
        SynthCommand::Occlusion { spec, out_dir } => {
            let spec: OcclusionSceneSpec = match spec {
                Some(p) => read_json(p, "occlusion spec")?,
                None => OcclusionSceneSpec::default(),
            };
            let s = make_occlusion_scene(&spec)?;
            create_dir(&out_dir.join("maps"))?;
            let scene_path = out_dir.join("scene.vgs");
            let cameras_path = out_dir.join("cameras.json");
            io::save_scene(&s.scene, &scene_path)?;
            io::save_cameras(&s.cameras, &cameras_path)?;
            let mut maps = Vec::new();
            for (v, m) in s.maps.iter().enumerate() {
                let p = out_dir.join("maps").join(format!("view{v:04}.vfm"));
                io::save_feature_map(m, &p)?;
                maps.push(p);
            }
            let class_of = |w: Wall| match w {
                Wall::Front => 0u32,
                Wall::Back => 1,
            };
            let truth = TruthFile {
                classes: vec![s.front_feature.clone(), s.back_feature.clone()],
                labels: s.wall.iter().map(|&w| Some(class_of(w))).collect(),
            };
            emit(&truth, Some(&out_dir.join("truth.json")))?;
            let labels = GaussianLabels {
                labels: s.wall.iter().map(|&w| class_of(w)).collect(),
                vote_mass: vec![1.0; s.scene.len()],
                significance: s.scene.gaussians.iter().map(|g| significance(g) as f32).collect(),
            };
            io::save_labels(&labels, out_dir.join("labels.vglb"))?;
            let dim = s.front_feature.len();
            emit(
                &json!({
                    "dim": dim,
                    "queries": [
                        {"name": "front", "vec": s.front_feature},
                        {"name": "back", "vec": s.back_feature},
                    ],
                }),
                Some(&out_dir.join("queries.json")),
            )?;
            let cfg = PipelineConfig {
                scene: Some(scene_path),
                cameras: Some(cameras_path),
                feature_maps: maps,
                output: Some(out_dir.join("field.vgf")),
                lift: Default::default(),
                seed: spec.seed,
            };
            emit(&cfg, Some(&out_dir.join("config.json")))?;
            emit(
                &json!({
                    "gaussians": s.scene.len(),
                    "back_gaussians": s.back_indices().len(),
                    "cameras": s.cameras.len(),
                    "front_cameras": s.front_cameras,
                    "dim": dim,
                }),
                None,
            )
        }
        SynthCommand::Stream { spec, out, truth } => {
            let spec: StreamSpec = match spec {
                Some(p) => read_json(p, "stream spec")?,
                None => StreamSpec::default(),
            };
            let s = make_feature_stream(&spec)?;
            io::save_stream(spec.dim, &s.observations, out)?;
            if let Some(t) = truth {
                emit(&json!({"direction": s.direction, "outlier": s.outlier}), Some(t))?;
            }
            emit(
                &json!({
                    "count": s.observations.len(),
                    "dim": spec.dim,
                    "outliers": s.outlier.iter().filter(|&&o| o).count(),
                }),
                None,
            )
        }
    }
}

fn run_disp(a: &DispArgs) -> Result<()> {
    if let Some(stream) = &a.stream {
        let (dim, obs) = io::load_stream(stream)?;
        if obs.is_empty() {
            return Err(Error::Validation("stream is empty".into()));
        }
        let cfg = a.inputs.resolve()?;
        let w = WeiszfeldOptions {
            max_iters: cfg.lift.weiszfeld_iters,
            eps: cfg.lift.weiszfeld_eps,
        };
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                v
            }
        };
        let mut report = BTreeMap::new();
        for agg in [Aggregator::CosineMedian, Aggregator::WeightedMean, Aggregator::L1Median] {
            let z = match agg {
                Aggregator::CosineMedian => aggregate_stream(dim, &obs).0,
                Aggregator::WeightedMean => unit(weighted_mean(dim, &obs)),
                Aggregator::L1Median => unit(weiszfeld_median(dim, &obs, w)),
            };
            report.insert(agg.name(), dispersion(&obs, &z));
        }
        return emit(&json!({"observations": obs.len(), "dispersion": report}), a.out.as_deref());
    }
    let field_path = a
        .field
        .as_ref()
        .ok_or_else(|| Error::Config("give --field with lift inputs, or --stream".into()))?;
    let cfg = a.inputs.resolve()?;
    let (scene, views) = load_views(&cfg)?;
    let field = io::load_field(field_path)?;
    if field.len() != scene.len() {
        return Err(Error::Validation(format!(
            "field has {} features for {} gaussians",
            field.len(),
            scene.len()
        )));
    }
    let acc = dispersion_pass(&scene, &views, &field, &cfg.lift)?;
    let scored = (0..scene.len()).filter(|&i| acc.per_gaussian(i).is_some()).count();
    emit(
        &json!({"scene_dispersion": acc.scene_value(), "gaussians_scored": scored}),
        a.out.as_deref(),
    )
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.inputs.resolve()?;
    let (scene, views) = load_views(&cfg)?;
    let truth: TruthFile = read_json(&a.truth, "truth")?;
    let cells: Vec<AblationCell> = match &a.grid {
        Some(p) => read_json(p, "grid")?,
        None => [true, false]
            .into_iter()
            .flat_map(|g| {
                [Aggregator::CosineMedian, Aggregator::WeightedMean].map(|agg| AblationCell {
                    gating_enabled: g,
                    aggregator: agg,
                })
            })
            .collect(),
    };
    if cells.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let truth = AblationTruth {
        classes: truth.classes,
        labels: truth.labels,
    };
    let rows = ablation_run(&scene, &views, &cfg.lift, &cells, &truth)?;
    if let Some(csv) = &a.csv {
        write_text(csv, &ablation_csv(&rows))?;
    }
    emit(&rows, a.out.as_deref())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Lift(a) => run_lift(a),
        Command::Label(a) => run_label(a),
        Command::Query(a) => run_query(a),
        Command::Eval(a) => run_eval(a),
        Command::Corrupt(a) => run_corrupt(a),
        Command::Synth(c) => run_synth(c),
        Command::Disp(a) => run_disp(a),
        Command::Ablate(a) => run_ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
