//! Little-endian binary formats and JSON side files.
//!
//! Every binary format starts with a four byte magic and a `u32` version
//! (currently 1). Loaders check that the payload length matches the header
//! exactly before allocating.

use std::fs;
use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::aggregate::FeatureObservation;
use crate::error::{Error, Result};
use crate::eval::BinaryMask;
use crate::label::{GaussianLabels, UNLABELED};
use crate::scene::{
    Camera, FeatureMap, Gaussian, GaussianFeatureField, GaussianScene, LabeledPointCloud,
};
use crate::splat::WeightMap;

pub const VERSION: u32 = 1;

pub const SCENE_MAGIC: &[u8; 4] = b"VGSC";
pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"VFMP";
pub const FIELD_MAGIC: &[u8; 4] = b"VGFT";
pub const POINT_CLOUD_MAGIC: &[u8; 4] = b"VLPC";
pub const MASK_MAGIC: &[u8; 4] = b"VMSK";
pub const LABELS_MAGIC: &[u8; 4] = b"VGLB";
pub const WEIGHT_MAP_MAGIC: &[u8; 4] = b"VWMP";
pub const STREAM_MAGIC: &[u8; 4] = b"VSTR";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != magic {
            return Err(Error::format(format!(
                "{what}: bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = Self { buf, pos: 4, what };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!(
                "{what}: unsupported version {version}"
            )));
        }
        Ok(r)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.buf.len() {
            return Err(Error::format(format!("{}: truncated payload", self.what)));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..end]);
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn f32_array<const N: usize>(&mut self) -> Result<[f32; N]> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.f32()?;
        }
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Fails unless exactly `count * record` payload bytes remain.
    fn expect_payload(&self, count: u64, record: u64) -> Result<usize> {
        let expected = count.checked_mul(record).ok_or_else(|| {
            Error::format(format!("{}: header count overflows", self.what))
        })?;
        if expected != self.remaining() as u64 {
            return Err(Error::format(format!(
                "{}: header implies {expected} payload bytes, found {}",
                self.what,
                self.remaining()
            )));
        }
        usize::try_from(count).map_err(|_| Error::format("count does not fit in memory"))
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4], capacity: usize) -> Self {
        let mut buf = Vec::with_capacity(capacity + 8);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Self { buf }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        for &v in vs {
            self.f32(v);
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// Scene ------------------------------------------------------------------

const GAUSSIAN_RECORD: u64 = 4 * (3 + 3 + 4 + 1);

pub fn decode_scene(bytes: &[u8]) -> Result<GaussianScene> {
    let mut r = Reader::new(bytes, SCENE_MAGIC, "scene")?;
    let count = r.u64()?;
    let count = r.expect_payload(count, GAUSSIAN_RECORD)?;
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let mean = r.f32_array()?;
        let scale = r.f32_array()?;
        let rotation = r.f32_array()?;
        let opacity = r.f32()?;
        gaussians.push(Gaussian::new(mean, scale, rotation, opacity));
    }
    GaussianScene::new(gaussians).validate()
}

pub fn encode_scene(scene: &GaussianScene) -> Vec<u8> {
    let mut w = Writer::new(SCENE_MAGIC, 8 + scene.len() * GAUSSIAN_RECORD as usize);
    w.u64(scene.len() as u64);
    for g in &scene.gaussians {
        w.f32s(&g.mean);
        w.f32s(&g.scale);
        w.f32s(&g.rotation);
        w.f32(g.opacity);
    }
    w.buf
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<GaussianScene> {
    decode_scene(&read_file(path.as_ref())?)
}

pub fn save_scene(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    for (i, g) in scene.gaussians.iter().enumerate() {
        g.validated(i)?;
    }
    write_file(path.as_ref(), &encode_scene(scene))
}

// Cameras ----------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    world_to_camera: Vec<f64>,
}

impl CameraRecord {
    fn into_camera(self, index: usize) -> Result<Camera> {
        if self.world_to_camera.len() != 16 {
            return Err(Error::format(format!(
                "camera {index}: world_to_camera has {} entries, expected 16",
                self.world_to_camera.len()
            )));
        }
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: Matrix4::from_row_slice(&self.world_to_camera),
        };
        cam.validate()
            .map_err(|e| Error::validation(format!("camera {index}: {e}")))?;
        Ok(cam)
    }

    fn from_camera(cam: &Camera) -> Self {
        let m = &cam.world_to_camera;
        let world_to_camera = (0..4)
            .flat_map(|r| (0..4).map(move |c| m[(r, c)]))
            .collect();
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            world_to_camera,
        }
    }
}

pub fn decode_cameras(text: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> =
        serde_json::from_str(text).map_err(|e| Error::format(format!("cameras: {e}")))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_camera(i))
        .collect()
}

pub fn encode_cameras(cameras: &[Camera]) -> String {
    let records: Vec<_> = cameras.iter().map(CameraRecord::from_camera).collect();
    serde_json::to_string_pretty(&records).expect("camera records serialize")
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let bytes = read_file(path.as_ref())?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(format!("cameras: {e}")))?;
    decode_cameras(text)
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), encode_cameras(cameras).as_bytes())
}

// Feature maps -----------------------------------------------------------

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes, FEATURE_MAP_MAGIC, "feature map")?;
    let height = r.u32()?;
    let width = r.u32()?;
    let dim = r.u32()?;
    let n = r.expect_payload(height as u64 * width as u64 * dim as u64, 4)?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()?);
    }
    let map = FeatureMap {
        height,
        width,
        dim,
        data,
    };
    map.validate()?;
    Ok(map)
}

pub fn encode_feature_map(map: &FeatureMap) -> Vec<u8> {
    let mut w = Writer::new(FEATURE_MAP_MAGIC, 12 + map.data.len() * 4);
    w.u32(map.height);
    w.u32(map.width);
    w.u32(map.dim);
    w.f32s(&map.data);
    w.buf
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_feature_map(&read_file(path.as_ref())?)
}

pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    map.validate()?;
    write_file(path.as_ref(), &encode_feature_map(map))
}

// Feature field ----------------------------------------------------------

pub fn decode_field(bytes: &[u8]) -> Result<GaussianFeatureField> {
    let mut r = Reader::new(bytes, FIELD_MAGIC, "field")?;
    let count = r.u64()?;
    let dim = r.u32()?;
    let count = r.expect_payload(count, 4 * (dim as u64 + 1))?;
    let mut field = GaussianFeatureField::empty(count, dim);
    let d = dim as usize;
    for i in 0..count {
        for v in &mut field.features[i * d..(i + 1) * d] {
            *v = r.f32()?;
        }
        field.weights[i] = r.f32()?;
    }
    field.validate()?;
    Ok(field)
}

pub fn encode_field(field: &GaussianFeatureField) -> Vec<u8> {
    let mut w = Writer::new(FIELD_MAGIC, 12 + (field.features.len() + field.len()) * 4);
    w.u64(field.len() as u64);
    w.u32(field.dim);
    for i in 0..field.len() {
        w.f32s(field.feature(i));
        w.f32(field.weights[i]);
    }
    w.buf
}

pub fn load_field(path: impl AsRef<Path>) -> Result<GaussianFeatureField> {
    decode_field(&read_file(path.as_ref())?)
}

pub fn save_field(field: &GaussianFeatureField, path: impl AsRef<Path>) -> Result<()> {
    field.validate()?;
    write_file(path.as_ref(), &encode_field(field))
}

// Labeled point cloud ----------------------------------------------------

pub fn decode_point_cloud(bytes: &[u8]) -> Result<LabeledPointCloud> {
    let mut r = Reader::new(bytes, POINT_CLOUD_MAGIC, "point cloud")?;
    let count = r.u64()?;
    let count = r.expect_payload(count, 16)?;
    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let p: [f32; 3] = r.f32_array()?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("point cloud: non-finite position"));
        }
        points.push(p);
        labels.push(r.u32()?);
    }
    LabeledPointCloud::new(points, labels)
}

pub fn encode_point_cloud(cloud: &LabeledPointCloud) -> Vec<u8> {
    let mut w = Writer::new(POINT_CLOUD_MAGIC, 8 + cloud.len() * 16);
    w.u64(cloud.len() as u64);
    for (p, &l) in cloud.points.iter().zip(&cloud.labels) {
        w.f32s(p);
        w.u32(l);
    }
    w.buf
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<LabeledPointCloud> {
    decode_point_cloud(&read_file(path.as_ref())?)
}

pub fn save_point_cloud(cloud: &LabeledPointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_point_cloud(cloud))
}

// Masks ------------------------------------------------------------------

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let mut r = Reader::new(bytes, MASK_MAGIC, "mask")?;
    let height = r.u32()?;
    let width = r.u32()?;
    let n = r.expect_payload(height as u64 * width as u64, 1)?;
    let bits = r.buf[r.pos..r.pos + n].to_vec();
    BinaryMask::from_bits(height, width, bits)
}

pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut w = Writer::new(MASK_MAGIC, 8 + mask.bits().len());
    w.u32(mask.height());
    w.u32(mask.width());
    w.buf.extend_from_slice(mask.bits());
    w.buf
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    decode_mask(&read_file(path.as_ref())?)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(mask))
}

// Gaussian labels --------------------------------------------------------

pub fn decode_labels(bytes: &[u8]) -> Result<GaussianLabels> {
    let mut r = Reader::new(bytes, LABELS_MAGIC, "labels")?;
    let count = r.u64()?;
    let count = r.expect_payload(count, 12)?;
    let mut out = GaussianLabels::with_capacity(count);
    for _ in 0..count {
        let label = r.u32()?;
        let vote = r.f32()?;
        let gamma = r.f32()?;
        out.labels.push(label);
        out.vote_mass.push(vote);
        out.significance.push(gamma);
    }
    Ok(out)
}

pub fn encode_labels(labels: &GaussianLabels) -> Vec<u8> {
    let mut w = Writer::new(LABELS_MAGIC, 8 + labels.len() * 12);
    w.u64(labels.len() as u64);
    for i in 0..labels.len() {
        w.u32(labels.labels[i]);
        w.f32(labels.vote_mass[i]);
        w.f32(labels.significance[i]);
    }
    w.buf
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<GaussianLabels> {
    decode_labels(&read_file(path.as_ref())?)
}

pub fn save_labels(labels: &GaussianLabels, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_labels(labels))
}

/// Reads `u32` labels from a label file, mapping the unlabeled sentinel to
/// `None`.
pub fn label_ids(labels: &GaussianLabels) -> Vec<Option<u32>> {
    labels
        .labels
        .iter()
        .map(|&l| (l != UNLABELED).then_some(l))
        .collect()
}

// Weight map debug dump --------------------------------------------------

pub fn encode_weight_map(map: &WeightMap) -> Vec<u8> {
    let mut w = Writer::new(WEIGHT_MAP_MAGIC, 8 + map.entry_count() * 8);
    w.u32(map.height);
    w.u32(map.width);
    for px in 0..map.pixel_count() {
        let entries = map.entries(px);
        w.u32(entries.len() as u32);
        for e in entries {
            w.u32(e.gaussian as u32);
            w.f32(e.weight as f32);
        }
    }
    w.buf
}

/// Decodes a weight map dump into per-pixel `(index, weight)` lists.
pub fn decode_weight_map(bytes: &[u8]) -> Result<(u32, u32, Vec<Vec<(u32, f32)>>)> {
    let mut r = Reader::new(bytes, WEIGHT_MAP_MAGIC, "weight map")?;
    let height = r.u32()?;
    let width = r.u32()?;
    let pixels = height as usize * width as usize;
    let mut out = Vec::with_capacity(pixels.min(r.remaining() / 4));
    for _ in 0..pixels {
        let n = r.u32()? as usize;
        if n * 8 > r.remaining() {
            return Err(Error::format("weight map: truncated pixel list"));
        }
        let mut list = Vec::with_capacity(n);
        for _ in 0..n {
            list.push((r.u32()?, r.f32()?));
        }
        out.push(list);
    }
    if r.remaining() != 0 {
        return Err(Error::format("weight map: trailing bytes"));
    }
    Ok((height, width, out))
}

pub fn save_weight_map(map: &WeightMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_weight_map(map))
}

// Feature streams --------------------------------------------------------

pub fn encode_stream(dim: usize, observations: &[FeatureObservation]) -> Vec<u8> {
    let mut w = Writer::new(STREAM_MAGIC, 12 + observations.len() * (dim + 2) * 4);
    w.u64(observations.len() as u64);
    w.u32(dim as u32);
    for obs in observations {
        for &v in &obs.feature {
            w.f32(v as f32);
        }
        w.f32(obs.weight as f32);
        w.u32(obs.view_index);
    }
    w.buf
}

pub fn decode_stream(bytes: &[u8]) -> Result<(usize, Vec<FeatureObservation>)> {
    let mut r = Reader::new(bytes, STREAM_MAGIC, "stream")?;
    let count = r.u64()?;
    let dim = r.u32()? as usize;
    let count = r.expect_payload(count, 4 * (dim as u64 + 2))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut feature = Vec::with_capacity(dim);
        for _ in 0..dim {
            feature.push(r.f32()? as f64);
        }
        let weight = r.f32()? as f64;
        let view_index = r.u32()?;
        out.push(FeatureObservation::new(feature, weight, view_index)?);
    }
    Ok((dim, out))
}

pub fn save_stream(dim: usize, observations: &[FeatureObservation], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_stream(dim, observations))
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<(usize, Vec<FeatureObservation>)> {
    decode_stream(&read_file(path.as_ref())?)
}

// Query embeddings -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedVector {
    pub name: String,
    pub vec: Vec<f32>,
}

/// Named query embeddings with optional negatives, unit-normalized on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub dim: usize,
    pub queries: Vec<NamedVector>,
    #[serde(default)]
    pub negatives: Vec<NamedVector>,
}

impl QuerySet {
    pub fn normalized(mut self) -> Result<Self> {
        let dim = self.dim;
        for v in self.queries.iter_mut().chain(self.negatives.iter_mut()) {
            if v.vec.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: v.vec.len(),
                });
            }
            let n = v.vec.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::validation(format!("query {:?} has zero norm", v.name)));
            }
            v.vec.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
        Ok(self)
    }

    pub fn negative_vectors(&self) -> Vec<Vec<f32>> {
        self.negatives.iter().map(|n| n.vec.clone()).collect()
    }
}

pub fn decode_queries(text: &str) -> Result<QuerySet> {
    let set: QuerySet =
        serde_json::from_str(text).map_err(|e| Error::format(format!("queries: {e}")))?;
    set.normalized()
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<QuerySet> {
    let bytes = read_file(path.as_ref())?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(format!("queries: {e}")))?;
    decode_queries(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_gaussian_bytes(opacity: f32) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"VGSC");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u64.to_le_bytes());
        for v in [0.0f32, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, opacity] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn scene_single_isotropic() {
        let scene = decode_scene(&one_gaussian_bytes(0.8)).unwrap();
        assert_eq!(scene.len(), 1);
        assert_eq!(
            scene.gaussians[0],
            Gaussian::axis_aligned([0.0; 3], [1.0; 3], 0.8)
        );
        assert_eq!(encode_scene(&scene), one_gaussian_bytes(0.8));
    }

    #[test]
    fn scene_zero_opacity_is_validation_error() {
        let err = decode_scene(&one_gaussian_bytes(0.0)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn scene_bad_magic_and_version() {
        let mut b = one_gaussian_bytes(0.8);
        b[0] = b'X';
        assert!(matches!(decode_scene(&b), Err(Error::Format(_))));
        let mut b = one_gaussian_bytes(0.8);
        b[4] = 2;
        assert!(matches!(decode_scene(&b), Err(Error::Format(_))));
    }

    #[test]
    fn scene_count_payload_mismatch() {
        let mut b = one_gaussian_bytes(0.8);
        b[8] = 2;
        assert!(matches!(decode_scene(&b), Err(Error::Format(_))));
        let mut b = one_gaussian_bytes(0.8);
        b.push(0);
        assert!(matches!(decode_scene(&b), Err(Error::Format(_))));
    }

    #[test]
    fn feature_map_header_mismatch() {
        let map = FeatureMap {
            height: 2,
            width: 2,
            dim: 2,
            data: [1.0, 0.0].repeat(4),
        };
        let mut bytes = encode_feature_map(&map);
        assert_eq!(decode_feature_map(&bytes).unwrap(), map);
        // Claim dim 3 with a dim-2 payload.
        bytes[16] = 3;
        assert!(matches!(decode_feature_map(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn cameras_json() {
        let text = r#"[{"fx": 100, "fy": 100, "cx": 32, "cy": 32, "width": 64, "height": 64,
            "world_to_camera": [1,0,0,0, 0,1,0,0, 0,0,1,2, 0,0,0,1]}]"#;
        let cams = decode_cameras(text).unwrap();
        assert_eq!(cams[0].translation().z, 2.0);
        assert_eq!(decode_cameras(&encode_cameras(&cams)).unwrap(), cams);
        let short = text.replace("0,0,0,1]", "0,0,0]");
        assert!(matches!(decode_cameras(&short), Err(Error::Format(_))));
    }

    #[test]
    fn queries_are_normalized() {
        let q = decode_queries(r#"{"dim": 2, "queries": [{"name": "a", "vec": [3, 4]}]}"#).unwrap();
        assert_eq!(q.queries[0].vec, vec![0.6, 0.8]);
        assert!(q.negatives.is_empty());
        assert!(decode_queries(r#"{"dim": 3, "queries": [{"name": "a", "vec": [3, 4]}]}"#).is_err());
    }
}
