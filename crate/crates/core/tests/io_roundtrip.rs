use nalgebra::Vector3;
use proptest::prelude::*;

use splatlift::aggregate::FeatureObservation;
use splatlift::eval::BinaryMask;
use splatlift::io;
use splatlift::label::GaussianLabels;
use splatlift::scene::{Camera, FeatureMap, Gaussian, GaussianFeatureField, GaussianScene, LabeledPointCloud};
use splatlift::Error;

fn gaussian() -> impl Strategy<Value = Gaussian> {
    (
        prop::array::uniform3(-10.0f32..10.0),
        prop::array::uniform3(0.01f32..2.0),
        prop::array::uniform4(-1.0f32..1.0),
        0.0f32..=1.0,
    )
        .prop_filter_map("degenerate quaternion", |(m, s, q, o)| {
            let n = q.iter().map(|v| v * v).sum::<f32>().sqrt();
            (n > 0.1).then(|| Gaussian::new(m, s, q.map(|v| v / n), o))
        })
}

proptest! {
    #[test]
    fn scene_round_trip(gs in prop::collection::vec(gaussian(), 0..40)) {
        let scene = GaussianScene::new(gs);
        let back = io::decode_scene(&io::encode_scene(&scene)).unwrap();
        prop_assert_eq!(back.len(), scene.len());
        for (a, b) in scene.gaussians.iter().zip(&back.gaussians) {
            prop_assert_eq!(a.mean, b.mean);
            prop_assert_eq!(a.scale, b.scale);
            prop_assert_eq!(a.opacity, b.opacity);
            for k in 0..4 {
                prop_assert!((a.rotation[k] - b.rotation[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn feature_map_round_trip(h in 1u32..8, w in 1u32..8, dim in 1u32..6, seed in any::<u64>()) {
        let mut map = FeatureMap::zeros(h, w, dim);
        let mut rng = splatlift::rng::KeyedRng::new(seed, 0);
        for y in 0..h {
            for x in 0..w {
                if rng.coin() {
                    let v = rng.unit_vector(dim as usize);
                    for (o, &x) in map.pixel_mut(x, y).iter_mut().zip(&v) {
                        *o = x as f32;
                    }
                }
            }
        }
        let back = io::decode_feature_map(&io::encode_feature_map(&map)).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn field_round_trip(n in 0usize..20, dim in 1u32..8, seed in any::<u64>()) {
        let mut field = GaussianFeatureField::empty(n, dim);
        let mut rng = splatlift::rng::KeyedRng::new(seed, 1);
        for i in 0..n {
            if rng.coin() {
                field.set(i, &rng.unit_vector(dim as usize), rng.uniform_range(0.1, 5.0));
            }
        }
        let back = io::decode_field(&io::encode_field(&field)).unwrap();
        prop_assert_eq!(back, field);
    }

    #[test]
    fn point_cloud_round_trip(pts in prop::collection::vec((prop::array::uniform3(-5.0f32..5.0), 0u32..10), 0..50)) {
        let (p, l): (Vec<_>, Vec<_>) = pts.into_iter().unzip();
        let cloud = LabeledPointCloud::new(p, l).unwrap();
        let back = io::decode_point_cloud(&io::encode_point_cloud(&cloud)).unwrap();
        prop_assert_eq!(back, cloud);
    }

    #[test]
    fn mask_round_trip(h in 1u32..16, w in 1u32..16, bits in prop::collection::vec(0u8..2, 256)) {
        let mask = BinaryMask::from_bits(h, w, bits[..(h * w) as usize].to_vec()).unwrap();
        let back = io::decode_mask(&io::encode_mask(&mask)).unwrap();
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn labels_round_trip(rows in prop::collection::vec((prop_oneof![0u32..5, Just(u32::MAX)], 0.0f32..3.0, 0.0f32..1.0), 0..30)) {
        let mut labels = GaussianLabels::with_capacity(rows.len());
        for (l, m, g) in rows {
            labels.labels.push(l);
            labels.vote_mass.push(m);
            labels.significance.push(g);
        }
        let back = io::decode_labels(&io::encode_labels(&labels)).unwrap();
        prop_assert_eq!(back, labels);
    }

    #[test]
    fn stream_round_trip(n in 0usize..20, dim in 1usize..6, seed in any::<u64>()) {
        let mut rng = splatlift::rng::KeyedRng::new(seed, 2);
        let obs: Vec<FeatureObservation> = (0..n)
            .map(|t| {
                let f: Vec<f64> = rng.unit_vector(dim).iter().map(|&v| v as f32 as f64).collect();
                FeatureObservation::new(f, rng.uniform_range(0.1, 1.0) as f32 as f64, t as u32).unwrap()
            })
            .collect();
        let (d, back) = io::decode_stream(&io::encode_stream(dim, &obs)).unwrap();
        prop_assert_eq!(d, dim);
        prop_assert_eq!(back.len(), obs.len());
        for (a, b) in obs.iter().zip(&back) {
            prop_assert_eq!(&a.feature, &b.feature);
            prop_assert_eq!(a.weight, b.weight);
            prop_assert_eq!(a.view_index, b.view_index);
        }
    }
}

#[test]
fn cameras_round_trip() {
    let cams = vec![
        Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 80.0, 64, 48),
        Camera::look_at(Vector3::new(2.0, 1.0, -3.0), Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, -1.0, 0.0), 50.0, 32, 32),
    ];
    let back = io::decode_cameras(&io::encode_cameras(&cams)).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in cams.iter().zip(&back) {
        assert_eq!((a.width, a.height), (b.width, b.height));
        assert!((a.world_to_camera - b.world_to_camera).abs().max() < 1e-12);
        assert_eq!((a.fx, a.fy, a.cx, a.cy), (b.fx, b.fy, b.cx, b.cy));
    }
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let scene = GaussianScene::new(vec![Gaussian::axis_aligned([0.0; 3], [1.0; 3], 0.5)]);
    let mut bytes = io::encode_scene(&scene);

    bytes[0] = b'X';
    let e = io::decode_scene(&bytes).unwrap_err();
    assert!(matches!(e, Error::Format(_)));
    assert_eq!(e.exit_code(), 3);

    let bytes = io::encode_scene(&scene);
    let e = io::decode_scene(&bytes[..bytes.len() - 3]).unwrap_err();
    assert_eq!(e.exit_code(), 3);

    let e = io::load_scene("/nonexistent/scene.bin").unwrap_err();
    assert_eq!(e.exit_code(), 2);

    let bad = GaussianScene::new(vec![Gaussian::axis_aligned([0.0; 3], [1.0; 3], 1.5)]);
    let e = io::decode_scene(&io::encode_scene(&bad)).unwrap_err();
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = GaussianScene::new(vec![
        Gaussian::axis_aligned([0.0, 1.0, 2.0], [0.1, 0.2, 0.3], 0.7),
        Gaussian::axis_aligned([1.0, 1.0, 4.0], [0.5; 3], 0.2),
    ]);
    let p = dir.path().join("s.bin");
    io::save_scene(&scene, &p).unwrap();
    assert_eq!(io::load_scene(&p).unwrap(), scene);
}
