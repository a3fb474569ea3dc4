use splatlift::aggregate::{weighted_mean, Aggregator};
use splatlift::io;
use splatlift::pipeline::{
    ablation_run, collect_observations, evaluate_cell, lift, AblationCell, AblationTruth, FileViews, LiftOptions,
    MemoryViews, PipelineConfig,
};
use splatlift::synth::{make_feature_stream, make_occlusion_scene, OcclusionScene, OcclusionSceneSpec, StreamSpec, Wall};
use splatlift::Error;

fn small_spec() -> OcclusionSceneSpec {
    OcclusionSceneSpec {
        front_cameras: 12,
        ..OcclusionSceneSpec::default()
    }
}

fn truth(s: &OcclusionScene) -> AblationTruth {
    AblationTruth {
        classes: vec![s.front_feature.clone(), s.back_feature.clone()],
        labels: s.wall.iter().map(|&w| Some((w == Wall::Back) as u32)).collect(),
    }
}

#[test]
fn occlusion_scene_is_deterministic() {
    let a = make_occlusion_scene(&small_spec()).unwrap();
    let b = make_occlusion_scene(&small_spec()).unwrap();
    assert_eq!(io::encode_scene(&a.scene), io::encode_scene(&b.scene));
    assert_eq!(a.cameras, b.cameras);
    for (x, y) in a.maps.iter().zip(&b.maps) {
        assert_eq!(io::encode_feature_map(x), io::encode_feature_map(y));
    }
    let c = make_occlusion_scene(&OcclusionSceneSpec { seed: 1, ..small_spec() }).unwrap();
    assert_ne!(a.front_feature, c.front_feature);
}

#[test]
fn maps_hold_only_wall_features() {
    let s = make_occlusion_scene(&small_spec()).unwrap();
    for map in &s.maps {
        for y in 0..map.height {
            for x in 0..map.width {
                let p = map.pixel(x, y);
                assert!(p == &s.front_feature[..] || p == &s.back_feature[..] || p.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn occlusion_spec_rejects_bad_depths() {
    let bad = OcclusionSceneSpec {
        back_depth: 2.0,
        ..OcclusionSceneSpec::default()
    };
    assert!(matches!(make_occlusion_scene(&bad), Err(Error::Config(_))));
}

#[test]
fn stream_is_deterministic() {
    let spec = StreamSpec::default();
    let a = make_feature_stream(&spec).unwrap();
    let b = make_feature_stream(&spec).unwrap();
    assert_eq!(a.observations, b.observations);
    assert_eq!(a.outlier.iter().filter(|&&o| o).count(), 20);
    let bad = StreamSpec {
        outlier_fraction: 1.0,
        ..StreamSpec::default()
    };
    assert!(make_feature_stream(&bad).is_err());
}

#[test]
fn ungated_mean_matches_batch_oracle() {
    let s = make_occlusion_scene(&small_spec()).unwrap();
    let views = MemoryViews::new(&s.cameras, &s.maps).unwrap();
    let opts = LiftOptions {
        gating_enabled: false,
        aggregator: Aggregator::WeightedMean,
        ..LiftOptions::default()
    };
    let (field, _) = lift(&s.scene, &views, &opts).unwrap();
    let obs = collect_observations(&s.scene, &views, &opts).unwrap();
    let dim = field.dim();
    let mut checked = 0;
    for (i, o) in obs.iter().enumerate() {
        let m = weighted_mean(dim, o);
        let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if o.is_empty() || n < 1e-9 {
            assert!(!field.is_valid(i));
            continue;
        }
        for (a, b) in field.feature(i).iter().zip(&m) {
            assert!((*a as f64 - b / n).abs() < 1e-6, "gaussian {i}");
        }
        let w: f64 = o.iter().map(|x| x.weight).sum();
        assert!((field.weights[i] as f64 - w).abs() < 1e-6 * w.max(1.0));
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn lift_is_independent_of_batching() {
    let s = make_occlusion_scene(&small_spec()).unwrap();
    let views = MemoryViews::new(&s.cameras, &s.maps).unwrap();
    let base = lift(&s.scene, &views, &LiftOptions::default()).unwrap().0;
    for batch_size in [1, 3, 64] {
        let opts = LiftOptions {
            batch_size,
            ..LiftOptions::default()
        };
        assert_eq!(lift(&s.scene, &views, &opts).unwrap().0, base);
    }
}

#[test]
fn file_views_match_memory_views() {
    let dir = tempfile::tempdir().unwrap();
    let s = make_occlusion_scene(&small_spec()).unwrap();
    let scene_path = dir.path().join("scene.bin");
    let cams_path = dir.path().join("cameras.json");
    io::save_scene(&s.scene, &scene_path).unwrap();
    io::save_cameras(&s.cameras, &cams_path).unwrap();
    let maps: Vec<_> = s
        .maps
        .iter()
        .enumerate()
        .map(|(v, m)| {
            let p = dir.path().join(format!("{v}.map"));
            io::save_feature_map(m, &p).unwrap();
            p
        })
        .collect();
    let memory = lift(&s.scene, &MemoryViews::new(&s.cameras, &s.maps).unwrap(), &LiftOptions::default())
        .unwrap()
        .0;
    let files = FileViews::new(io::load_cameras(&cams_path).unwrap(), maps.clone()).unwrap();
    assert_eq!(lift(&s.scene, &files, &LiftOptions::default()).unwrap().0, memory);

    let cfg = PipelineConfig {
        scene: Some(scene_path),
        cameras: Some(cams_path.clone()),
        feature_maps: maps.clone(),
        output: Some(dir.path().join("field.bin")),
        ..PipelineConfig::default()
    };
    let json = serde_json::to_string(&cfg).unwrap();
    let (field, _) = PipelineConfig::from_json(&json).unwrap().run().unwrap();
    assert_eq!(field, memory);
    assert_eq!(io::load_field(dir.path().join("field.bin")).unwrap(), memory);

    let short = FileViews::new(io::load_cameras(&cams_path).unwrap(), maps[1..].to_vec());
    assert!(matches!(short, Err(Error::Validation(_))));
}

#[test]
fn ablation_grid() {
    let s = make_occlusion_scene(&small_spec()).unwrap();
    let views = MemoryViews::new(&s.cameras, &s.maps).unwrap();
    let t = truth(&s);
    let cells: Vec<AblationCell> = [true, false]
        .into_iter()
        .flat_map(|g| {
            [Aggregator::CosineMedian, Aggregator::WeightedMean].map(|a| AblationCell {
                gating_enabled: g,
                aggregator: a,
            })
        })
        .collect();
    let rows = ablation_run(&s.scene, &views, &LiftOptions::default(), &cells, &t).unwrap();
    assert_eq!(rows.len(), 4);
    let back = |r: &splatlift::pipeline::AblationRow| r.purity["1"];
    let best = rows.iter().map(back).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(back(&rows[0]), best);
    assert!(rows[0].gating_enabled && rows[0].aggregator == Aggregator::CosineMedian);

    let again = ablation_run(&s.scene, &views, &LiftOptions::default(), &cells, &t).unwrap();
    assert_eq!(rows, again);

    let one = evaluate_cell(&s.scene, &views, &LiftOptions::default(), cells[2], &t).unwrap();
    assert_eq!(one, rows[2]);
}
