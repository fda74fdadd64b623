//! Loaders and writers for every on-disk input: point clouds, calibration,
//! labels, 2D instance outputs, cloud detections and bandwidth traces.
//!
//! Loaders are pure functions of file content and do no geometric filtering.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Box2D, Box3D, GeometryError};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("missing calibration key {0}")]
    MissingKey(String),
    #[error("bad float {token:?} for {key}")]
    BadFloat { key: String, token: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("instance id {0} present in the map but not in the box list")]
    IdMismatch(u16),
    #[error("dimension mismatch: record {record:?} vs map {map:?}")]
    DimensionMismatch { record: (u32, u32), map: (u32, u32) },
    #[error("trace time not strictly increasing at sample {index} (t = {t})")]
    NonMonotoneTime { index: usize, t: f64 },
    #[error("non-positive rate {rate} at sample {index}")]
    NonPositiveRate { index: usize, rate: f64 },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })
}

pub(crate) fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| DatasetError::Io { path: parent.to_owned(), source })?;
    }
    fs::write(path, data).map_err(|source| DatasetError::Io { path: path.to_owned(), source })
}

// ---------------------------------------------------------------------------
// Point clouds

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub r: f32,
}

impl Point {
    pub fn xyz(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub frame_id: u32,
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Size of the on-disk encoding, which is also the upload size.
    pub fn byte_len(&self) -> usize {
        self.points.len() * 16
    }

    pub fn xyz(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::xyz).collect()
    }
}

/// Decodes little-endian `f32` quadruples `(x, y, z, reflectance)`.
pub fn decode_point_cloud(bytes: &[u8], frame_id: u32) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(DatasetError::Format(format!("point cloud length {} is not a multiple of 16", bytes.len())));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap());
        let p = Point { x: f(0), y: f(1), z: f(2), r: f(3) };
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.r.is_finite()) {
            return Err(DatasetError::Format(format!("non-finite value in point {i}")));
        }
        points.push(p);
    }
    Ok(PointCloud { frame_id, points })
}

pub fn encode_point_cloud(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.byte_len());
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Loads a `<frame>.bin` file; the frame id is parsed from the file stem
/// (0 when the stem is not numeric).
pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    let frame_id = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()).unwrap_or(0);
    decode_point_cloud(&read_bytes(path)?, frame_id)
}

pub fn write_point_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    write_file(path, encode_point_cloud(pc))
}

// ---------------------------------------------------------------------------
// Calibration

const KEY_PROJ: &str = "P2";
const KEY_RECT: &str = "R0_rect";
const KEY_VELO: &str = "Tr_velo_to_cam";

/// Camera/LiDAR calibration chain: `image ~ cam_proj · [rect · lidar_to_cam · p; 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    cam_proj: Matrix3x4<f64>,
    rect: Matrix3<f64>,
    lidar_to_cam: Matrix3x4<f64>,
    lidar_to_rect: Matrix3x4<f64>,
    lidar_to_image: Matrix3x4<f64>,
    linear: Matrix3<f64>,
    linear_inv: Matrix3<f64>,
    offset: Vector3<f64>,
}

impl Calibration {
    pub fn new(cam_proj: Matrix3x4<f64>, rect: Matrix3<f64>, lidar_to_cam: Matrix3x4<f64>) -> Result<Self> {
        if rect.determinant().abs() < 1e-12 {
            return Err(DatasetError::Validation("rect matrix is singular".into()));
        }
        let rot: Matrix3<f64> = lidar_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let dev = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if dev > 1e-3 {
            return Err(DatasetError::Validation(format!(
                "lidar_to_cam rotation deviates from orthonormal by {dev:.3e}"
            )));
        }
        if cam_proj[(2, 2)] == 0.0 {
            return Err(DatasetError::Validation("cam_proj[2][2] is zero".into()));
        }
        if !cam_proj.iter().chain(rect.iter()).chain(lidar_to_cam.iter()).all(|v| v.is_finite()) {
            return Err(DatasetError::Validation("non-finite calibration entry".into()));
        }
        let lidar_to_rect = rect * lidar_to_cam;
        let mut rect_h = nalgebra::Matrix4::identity();
        rect_h.fixed_view_mut::<3, 4>(0, 0).copy_from(&lidar_to_rect);
        let lidar_to_image = cam_proj * rect_h;
        let linear: Matrix3<f64> = lidar_to_rect.fixed_view::<3, 3>(0, 0).into_owned();
        let linear_inv =
            linear.try_inverse().ok_or_else(|| DatasetError::Calibration("rect · rotation is singular".into()))?;
        let offset = lidar_to_rect.column(3).into_owned();
        Ok(Self { cam_proj, rect, lidar_to_cam, lidar_to_rect, lidar_to_image, linear, linear_inv, offset })
    }

    /// A typical front-camera rig: LiDAR x forward / y left / z up, camera
    /// x right / y down / z forward.
    pub fn kitti_like() -> Self {
        Self::new(
            Matrix3x4::new(
                721.5377,
                0.0,
                609.5593,
                44.85728, //
                0.0,
                721.5377,
                172.854,
                0.2163791, //
                0.0,
                0.0,
                1.0,
                0.002745884,
            ),
            Matrix3::identity(),
            Matrix3x4::new(
                0.0, -1.0, 0.0, 0.0, //
                0.0, 0.0, -1.0, -0.08, //
                1.0, 0.0, 0.0, -0.27,
            ),
        )
        .expect("built-in calibration is valid")
    }

    pub fn cam_proj(&self) -> &Matrix3x4<f64> {
        &self.cam_proj
    }

    pub fn rect(&self) -> &Matrix3<f64> {
        &self.rect
    }

    pub fn lidar_to_cam(&self) -> &Matrix3x4<f64> {
        &self.lidar_to_cam
    }

    pub fn lidar_to_rect(&self) -> &Matrix3x4<f64> {
        &self.lidar_to_rect
    }

    pub fn lidar_to_image(&self) -> &Matrix3x4<f64> {
        &self.lidar_to_image
    }

    /// LiDAR point to rectified camera coordinates.
    pub fn to_rect(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.linear * Vector3::from(p) + self.offset;
        [q[0], q[1], q[2]]
    }

    /// Rectified camera coordinates back to the LiDAR frame.
    pub fn from_rect(&self, q: [f64; 3]) -> [f64; 3] {
        let p = self.linear_inv * (Vector3::from(q) - self.offset);
        [p[0], p[1], p[2]]
    }

    fn dir_to_rect(&self, d: [f64; 3]) -> [f64; 3] {
        let q = self.linear * Vector3::from(d);
        [q[0], q[1], q[2]]
    }

    fn dir_from_rect(&self, d: [f64; 3]) -> [f64; 3] {
        let q = self.linear_inv * Vector3::from(d);
        [q[0], q[1], q[2]]
    }

    pub fn to_text(&self) -> String {
        let row = |vals: Vec<f64>| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let flat34 = |m: &Matrix3x4<f64>| (0..3).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect();
        let flat33 = |m: &Matrix3<f64>| (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect();
        format!(
            "{KEY_PROJ}: {}\n{KEY_RECT}: {}\n{KEY_VELO}: {}\n",
            row(flat34(&self.cam_proj)),
            row(flat33(&self.rect)),
            row(flat34(&self.lidar_to_cam)),
        )
    }
}

pub fn parse_calibration(text: &str) -> Result<Calibration> {
    let mut entries: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        let key = key.trim();
        if ![KEY_PROJ, KEY_RECT, KEY_VELO].contains(&key) {
            continue;
        }
        let vals = rest
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| DatasetError::BadFloat { key: key.to_owned(), token: tok.to_owned() })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.insert(key, vals);
    }
    let take = |key: &str, n: usize| -> Result<Vec<f64>> {
        let v = entries.get(key).ok_or_else(|| DatasetError::MissingKey(key.to_owned()))?;
        if v.len() != n {
            return Err(DatasetError::Format(format!("{key} has {} values, expected {n}", v.len())));
        }
        Ok(v.clone())
    };
    let p = take(KEY_PROJ, 12)?;
    let r = take(KEY_RECT, 9)?;
    let t = take(KEY_VELO, 12)?;
    Calibration::new(Matrix3x4::from_row_slice(&p), Matrix3::from_row_slice(&r), Matrix3x4::from_row_slice(&t))
}

pub fn load_calibration(path: &Path) -> Result<Calibration> {
    parse_calibration(&read_text(path)?)
}

// ---------------------------------------------------------------------------
// Labels

/// Ground-truth object with its box converted to the LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub class: String,
    pub bbox: Box3D,
}

/// Label geometry in the camera convention: size `(h, w, l)`, bottom-center
/// location in rectified camera coordinates and yaw about the camera's
/// vertical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraBox {
    pub hwl: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
}

pub fn camera_to_lidar(cam: &CameraBox, calib: &Calibration) -> Result<Box3D> {
    let [h, w, l] = cam.hwl;
    let bottom = calib.from_rect(cam.location);
    let (s, c) = cam.rotation_y.sin_cos();
    let d = calib.dir_from_rect([c, 0.0, -s]);
    let norm = d[0].hypot(d[1]);
    if norm < 1e-9 {
        return Err(DatasetError::Calibration("heading maps to the LiDAR vertical axis".into()));
    }
    let theta = d[1].atan2(d[0]);
    Ok(Box3D::new([bottom[0], bottom[1], bottom[2] + 0.5 * h], [l, w, h], theta)?)
}

pub fn lidar_to_camera(b: &Box3D, calib: &Calibration) -> CameraBox {
    let [l, w, h] = b.size;
    let bottom = [b.center[0], b.center[1], b.center[2] - 0.5 * h];
    let d = calib.dir_to_rect([b.theta.cos(), b.theta.sin(), 0.0]);
    CameraBox { hwl: [h, w, l], location: calib.to_rect(bottom), rotation_y: (-d[2]).atan2(d[0]) }
}

/// Parses label lines: `class trunc occ alpha x1 y1 x2 y2 h w l x y z ry [score]`.
pub fn parse_labels(text: &str, calib: &Calibration) -> Result<Vec<Label>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 15 {
            return Err(DatasetError::Parse { line: i + 1, msg: format!("{} tokens, expected 15", toks.len()) });
        }
        let num = |k: usize| -> Result<f64> {
            let v: f64 = toks[k]
                .parse()
                .map_err(|_| DatasetError::Parse { line: i + 1, msg: format!("bad number {:?}", toks[k]) })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DatasetError::Parse { line: i + 1, msg: "non-finite value".into() })
            }
        };
        let cam = CameraBox {
            hwl: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
        };
        let bbox = camera_to_lidar(&cam, calib).map_err(|e| DatasetError::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(Label { class: toks[0].to_owned(), bbox });
    }
    Ok(out)
}

pub fn load_labels(path: &Path, calib: &Calibration) -> Result<Vec<Label>> {
    parse_labels(&read_text(path)?, calib)
}

/// Formats one label line. The image box and alpha are written as given.
pub fn format_label(class: &str, b: &Box3D, image_box: Option<&Box2D>, calib: &Calibration) -> String {
    let cam = lidar_to_camera(b, calib);
    let (x1, y1, x2, y2) = image_box.map_or((0.0, 0.0, 0.0, 0.0), |r| (r.x1, r.y1, r.x2, r.y2));
    format!(
        "{class} 0.00 0 0.00 {x1:.2} {y1:.2} {x2:.2} {y2:.2} {} {} {} {} {} {} {}",
        cam.hwl[0], cam.hwl[1], cam.hwl[2], cam.location[0], cam.location[1], cam.location[2], cam.rotation_y
    )
}

// ---------------------------------------------------------------------------
// 2D instance outputs

const IMAP_MAGIC: &[u8; 4] = b"IMAP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecordEntry {
    pub id: u16,
    pub bbox: [f32; 4],
    pub score: f32,
}

/// One line of the 2D detections JSON Lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub frame: u32,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceRecordEntry>,
}

/// Per-pixel instance ids, row-major, 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMap {
    pub width: u32,
    pub height: u32,
    pub ids: Vec<u16>,
}

impl InstanceMap {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, ids: vec![0; width as usize * height as usize] }
    }

    pub fn get(&self, col: u32, row: u32) -> u16 {
        self.ids[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, id: u16) {
        self.ids[row as usize * self.width as usize + col as usize] = id;
    }

    /// Id under the pixel nearest to `(u, v)`; `None` outside the image.
    pub fn lookup(&self, u: f64, v: f64) -> Option<u16> {
        let (c, r) = (u.round(), v.round());
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some(self.get(c as u32, r as u32))
    }
}

pub fn decode_instance_map(bytes: &[u8]) -> Result<InstanceMap> {
    if bytes.len() < 12 || &bytes[..4] != IMAP_MAGIC {
        return Err(DatasetError::Format("instance map header missing or bad magic".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let n = width as u64 * height as u64;
    if (bytes.len() - 12) as u64 != 2 * n {
        return Err(DatasetError::Format(format!(
            "instance map body has {} bytes, expected {}",
            bytes.len() - 12,
            2 * n
        )));
    }
    let ids = bytes[12..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok(InstanceMap { width, height, ids })
}

pub fn encode_instance_map(map: &InstanceMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 2 * map.ids.len());
    out.extend_from_slice(IMAP_MAGIC);
    out.extend_from_slice(&map.width.to_le_bytes());
    out.extend_from_slice(&map.height.to_le_bytes());
    for id in &map.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBox {
    pub id: u16,
    pub bbox: Box2D,
    pub score: f32,
}

/// One frame of 2D detector output with its squeezed instance map.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFrame {
    pub frame_id: u32,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<InstanceBox>,
    pub map: InstanceMap,
}

impl InstanceFrame {
    /// Cross-validates a record against its map.
    pub fn new(record: &InstanceRecord, map: InstanceMap) -> Result<Self> {
        if (record.width, record.height) != (map.width, map.height) {
            return Err(DatasetError::DimensionMismatch {
                record: (record.width, record.height),
                map: (map.width, map.height),
            });
        }
        let (w, h) = (record.width as f64, record.height as f64);
        let mut boxes = Vec::with_capacity(record.instances.len());
        let mut seen = std::collections::BTreeSet::new();
        for inst in &record.instances {
            if inst.id == 0 {
                return Err(DatasetError::Validation("instance id 0 is reserved for background".into()));
            }
            if !seen.insert(inst.id) {
                return Err(DatasetError::Validation(format!("duplicate instance id {}", inst.id)));
            }
            let [x1, y1, x2, y2] = inst.bbox.map(|v| v as f64);
            let bbox = Box2D::new(x1, y1, x2, y2)?;
            if x1 < 0.0 || y1 < 0.0 || x2 > w || y2 > h {
                return Err(DatasetError::Validation(format!("box {} outside the image", inst.id)));
            }
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(DatasetError::Validation(format!("score {} outside [0, 1]", inst.score)));
            }
            boxes.push(InstanceBox { id: inst.id, bbox, score: inst.score });
        }
        let mut present = std::collections::BTreeSet::new();
        present.extend(map.ids.iter().copied().filter(|&id| id != 0));
        if let Some(&missing) = present.iter().find(|id| !seen.contains(id)) {
            return Err(DatasetError::IdMismatch(missing));
        }
        Ok(Self { frame_id: record.frame, width: record.width, height: record.height, boxes, map })
    }

    pub fn empty(frame_id: u32, width: u32, height: u32) -> Self {
        Self { frame_id, width, height, boxes: Vec::new(), map: InstanceMap::empty(width, height) }
    }

    pub fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            frame: self.frame_id,
            width: self.width,
            height: self.height,
            instances: self
                .boxes
                .iter()
                .map(|b| InstanceRecordEntry {
                    id: b.id,
                    bbox: [b.bbox.x1 as f32, b.bbox.y1 as f32, b.bbox.x2 as f32, b.bbox.y2 as f32],
                    score: b.score,
                })
                .collect(),
        }
    }
}

pub fn load_instance_records(path: &Path) -> Result<Vec<InstanceRecord>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DatasetError::from))
        .collect()
}

/// Loads a single-frame detections file (JSON, or JSON Lines with one
/// record) together with its binary instance map.
pub fn load_instance_frame(json_path: &Path, map_path: &Path) -> Result<InstanceFrame> {
    let records = load_instance_records(json_path)?;
    let [record] = records.as_slice() else {
        return Err(DatasetError::Format(format!(
            "{} holds {} records, expected exactly one",
            json_path.display(),
            records.len()
        )));
    };
    let map = decode_instance_map(&read_bytes(map_path)?)?;
    InstanceFrame::new(record, map)
}

pub fn load_instance_map(path: &Path) -> Result<InstanceMap> {
    decode_instance_map(&read_bytes(path)?)
}

// ---------------------------------------------------------------------------
// Cloud detections

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: Box3D,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CloudDetections {
    pub frame_id: u32,
    pub boxes: Vec<ScoredBox>,
}

impl CloudDetections {
    pub fn boxes3d(&self) -> Vec<Box3D> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CloudBoxJson {
    xyz: [f32; 3],
    lwh: [f32; 3],
    theta: f32,
    score: f32,
}

#[derive(Serialize, Deserialize)]
struct CloudJson {
    frame: u32,
    boxes: Vec<CloudBoxJson>,
}

pub fn parse_cloud_line(line: &str) -> Result<CloudDetections> {
    let raw: CloudJson = serde_json::from_str(line)?;
    let boxes = raw
        .boxes
        .iter()
        .map(|b| {
            Ok(ScoredBox {
                bbox: Box3D::new(b.xyz.map(|v| v as f64), b.lwh.map(|v| v as f64), b.theta as f64)?,
                score: b.score as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CloudDetections { frame_id: raw.frame, boxes })
}

/// Serializes at `f32` precision, the precision of the store.
pub fn format_cloud_line(det: &CloudDetections) -> String {
    let raw = CloudJson {
        frame: det.frame_id,
        boxes: det
            .boxes
            .iter()
            .map(|b| CloudBoxJson {
                xyz: b.bbox.center.map(|v| v as f32),
                lwh: b.bbox.size.map(|v| v as f32),
                theta: b.bbox.theta as f32,
                score: b.score as f32,
            })
            .collect(),
    };
    serde_json::to_string(&raw).expect("plain struct serializes")
}

/// Loads cloud detections from one JSON Lines file or from every `*.jsonl`
/// file in a directory. Frames must be unique across the store.
pub fn load_cloud_store(path: &Path) -> Result<BTreeMap<u32, CloudDetections>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|source| DatasetError::Io { path: path.to_owned(), source })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_owned()]
    };
    let mut store = BTreeMap::new();
    for file in files {
        for line in read_text(&file)?.lines().filter(|l| !l.trim().is_empty()) {
            let det = parse_cloud_line(line)?;
            let frame = det.frame_id;
            if store.insert(frame, det).is_some() {
                return Err(DatasetError::Validation(format!("frame {frame} appears twice in the cloud store")));
            }
        }
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// Bandwidth traces

/// Piecewise-constant uplink bandwidth. Sample `i` holds from `t_i` until
/// `t_{i+1}`; the final sample holds for `tail_s`, after which the trace
/// repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    pub name: String,
    samples: Vec<(f64, f64)>,
    tail_s: f64,
}

/// Default hold time of the last sample, matching per-second trace logs.
pub const DEFAULT_TRACE_TAIL_S: f64 = 1.0;

impl BandwidthTrace {
    pub fn new(name: impl Into<String>, mut samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(DatasetError::Format("bandwidth trace has no samples".into()));
        }
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (i, &(t, rate)) in samples.iter().enumerate() {
            if !t.is_finite() || !rate.is_finite() {
                return Err(DatasetError::Format(format!("non-finite trace sample {i}")));
            }
            if !(rate > 0.0) {
                return Err(DatasetError::NonPositiveRate { index: i, rate });
            }
            if i > 0 && t <= samples[i - 1].0 {
                return Err(DatasetError::NonMonotoneTime { index: i, t });
            }
        }
        if samples[0].0 != 0.0 {
            return Err(DatasetError::NonMonotoneTime { index: 0, t: samples[0].0 });
        }
        Ok(Self { name: name.into(), samples, tail_s: DEFAULT_TRACE_TAIL_S })
    }

    pub fn constant(name: impl Into<String>, mbps: f64) -> Result<Self> {
        Self::new(name, vec![(0.0, mbps)])
    }

    pub fn with_tail(mut self, tail_s: f64) -> Self {
        assert!(tail_s > 0.0, "trace tail must be positive");
        self.tail_s = tail_s;
        self
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Length of one cycle of the trace, seconds.
    pub fn period(&self) -> f64 {
        self.samples.last().unwrap().0 + self.tail_s
    }

    /// `(start, end, mbps)` for each segment of one cycle.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let period = self.period();
        self.samples.iter().enumerate().map(move |(i, &(t, r))| {
            let end = self.samples.get(i + 1).map_or(period, |s| s.0);
            (t, end, r)
        })
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        let tc = t.rem_euclid(self.period());
        let idx = self.samples.partition_point(|s| s.0 <= tc);
        self.samples[idx.saturating_sub(1)].1
    }

    /// Time-weighted mean rate over one cycle, Mbps.
    pub fn mean_rate(&self) -> f64 {
        self.segments().map(|(a, b, r)| (b - a) * r).sum::<f64>() / self.period()
    }
}

pub fn parse_bandwidth_trace(text: &str, name: &str) -> Result<BandwidthTrace> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(DatasetError::Parse { line: i + 1, msg: "expected two columns".into() });
        };
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(t), Ok(r)) => samples.push((t, r)),
            _ if samples.is_empty() && i == 0 => continue, // header
            _ => return Err(DatasetError::Parse { line: i + 1, msg: format!("bad sample {line:?}") }),
        }
    }
    BandwidthTrace::new(name, samples)
}

pub fn load_bandwidth_trace(path: &Path) -> Result<BandwidthTrace> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace").to_owned();
    parse_bandwidth_trace(&read_text(path)?, &name)
}

pub fn format_bandwidth_trace(trace: &BandwidthTrace) -> String {
    let mut s = String::from("t_s,mbps\n");
    for (t, r) in trace.samples() {
        s.push_str(&format!("{t},{r}\n"));
    }
    s
}

/// Summary statistics of a cellular uplink trace family (Mbps).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceProfile {
    pub name: &'static str,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// FCC and Belgium 4G/LTE trace statistics, slowest first.
pub const TRACE_PROFILES: [TraceProfile; 4] = [
    TraceProfile { name: "FCC-1", mean: 11.89, std: 2.83, min: 7.76, max: 17.76 },
    TraceProfile { name: "FCC-2", mean: 16.69, std: 4.69, min: 8.824, max: 28.157 },
    TraceProfile { name: "Belgium-1", mean: 23.89, std: 4.93, min: 16.02, max: 33.33 },
    TraceProfile { name: "Belgium-2", mean: 29.60, std: 4.92, min: 20.17, max: 37.345 },
];

impl TraceProfile {
    pub fn by_name(name: &str) -> Option<Self> {
        TRACE_PROFILES.iter().copied().find(|p| p.name.eq_ignore_ascii_case(name))
    }

    pub fn constant_trace(&self) -> BandwidthTrace {
        BandwidthTrace::constant(self.name, self.mean).expect("profile mean is positive")
    }

    /// Seeded per-second samples from a normal with the profile's mean/std,
    /// clamped to its observed range.
    pub fn synthesize(&self, duration_s: usize, seed: u64) -> BandwidthTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(self.mean, self.std).expect("std is positive");
        let samples =
            (0..duration_s.max(1)).map(|i| (i as f64, normal.sample(&mut rng).clamp(self.min, self.max))).collect();
        BandwidthTrace::new(self.name, samples).expect("synthesized trace is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn le(vals: &[f32]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn decode_two_points() {
        let pc = decode_point_cloud(&le(&[1.0, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.1]), 7).unwrap();
        assert_eq!(pc.frame_id, 7);
        assert_eq!(pc.points, vec![Point { x: 1.0, y: 2.0, z: 3.0, r: 0.5 }, Point { x: 4.0, y: 5.0, z: 6.0, r: 0.1 }]);
    }

    #[test]
    fn decode_empty_and_bad_length() {
        assert!(decode_point_cloud(&[], 0).unwrap().is_empty());
        assert!(matches!(decode_point_cloud(&[0u8; 17], 0), Err(DatasetError::Format(_))));
        assert!(matches!(decode_point_cloud(&le(&[f32::NAN, 0.0, 0.0, 0.0]), 0), Err(DatasetError::Format(_))));
    }

    #[test]
    fn point_cloud_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000042.bin");
        let pc = PointCloud { frame_id: 42, points: vec![Point { x: -1.5, y: 2.25, z: f32::MIN_POSITIVE, r: 0.75 }] };
        write_point_cloud(&path, &pc).unwrap();
        assert_eq!(load_point_cloud(&path).unwrap(), pc);
    }

    const IDENTITY_CALIB: &str =
        "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";

    #[test]
    fn identity_calibration_parses() {
        let c = parse_calibration(IDENTITY_CALIB).unwrap();
        assert_eq!(*c.rect(), Matrix3::identity());
        assert_eq!(c.cam_proj()[(0, 0)], 1.0);
        assert_eq!(c.lidar_to_cam().column(3).norm(), 0.0);
    }

    #[test]
    fn calibration_errors() {
        let missing = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        assert!(matches!(parse_calibration(missing), Err(DatasetError::MissingKey(k)) if k == "R0_rect"));
        let garbage =
            "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0.2 0 0 0 1 0 0 0 0 1 0\n";
        assert!(matches!(parse_calibration(garbage), Err(DatasetError::Validation(_))));
        let bad = "P2: 1 0 0 x 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        assert!(matches!(parse_calibration(bad), Err(DatasetError::BadFloat { .. })));
    }

    #[test]
    fn calibration_text_roundtrip() {
        let c = Calibration::kitti_like();
        assert_eq!(parse_calibration(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn identity_label_lifts_by_half_height() {
        let c = parse_calibration(IDENTITY_CALIB).unwrap();
        let labels = parse_labels("Car 0 0 0 0 0 10 10 2.0 1.6 4.0 3.0 4.0 5.0 0.0\n", &c).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].class, "Car");
        assert_eq!(labels[0].bbox.center, [3.0, 4.0, 6.0]);
        assert_eq!(labels[0].bbox.size, [4.0, 1.6, 2.0]);
    }

    #[test]
    fn malformed_label_line() {
        let c = Calibration::kitti_like();
        assert!(matches!(parse_labels("Car 0 0\n", &c), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn label_camera_lidar_roundtrip() {
        // A rectification that rotates about the camera's vertical axis keeps
        // headings in the ground plane.
        let a: f64 = 0.01;
        let rect = Matrix3::new(a.cos(), 0.0, a.sin(), 0.0, 1.0, 0.0, -a.sin(), 0.0, a.cos());
        let base = Calibration::kitti_like();
        let calib = Calibration::new(*base.cam_proj(), rect, *base.lidar_to_cam()).unwrap();
        for k in 0..50 {
            let cam = CameraBox {
                hwl: [1.5 + 0.01 * k as f64, 1.6, 3.9],
                location: [-4.0 + 0.2 * k as f64, 1.7, 8.0 + k as f64],
                rotation_y: -3.0 + 0.12 * k as f64,
            };
            let lidar = camera_to_lidar(&cam, &calib).unwrap();
            let back = lidar_to_camera(&lidar, &calib);
            for i in 0..3 {
                assert!((back.location[i] - cam.location[i]).abs() < 1e-6);
                assert!((back.hwl[i] - cam.hwl[i]).abs() < 1e-12);
            }
            let d = crate::geometry::normalize_angle(back.rotation_y - cam.rotation_y);
            assert!(d.abs() < 1e-6);
        }
    }

    #[test]
    fn kitti_like_yaw_convention() {
        // ry = 0 faces camera +x, which is LiDAR -y.
        let c = Calibration::kitti_like();
        let b = camera_to_lidar(&CameraBox { hwl: [1.5, 1.6, 3.9], location: [0.0, 1.0, 10.0], rotation_y: 0.0 }, &c)
            .unwrap();
        assert!((b.theta + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    fn record(ids: &[(u16, [f32; 4])], w: u32, h: u32) -> InstanceRecord {
        InstanceRecord {
            frame: 0,
            width: w,
            height: h,
            instances: ids.iter().map(|&(id, bbox)| InstanceRecordEntry { id, bbox, score: 0.9 }).collect(),
        }
    }

    #[test]
    fn instance_frame_validation() {
        let empty = InstanceFrame::new(&record(&[], 4, 4), InstanceMap::empty(4, 4)).unwrap();
        assert!(empty.boxes.is_empty());

        let mut map = InstanceMap::empty(4, 4);
        map.set(1, 1, 3);
        assert!(matches!(InstanceFrame::new(&record(&[], 4, 4), map), Err(DatasetError::IdMismatch(3))));

        let mut map = InstanceMap::empty(4, 4);
        map.set(1, 1, 1);
        let ok = InstanceFrame::new(&record(&[(1, [0.0, 0.0, 2.0, 2.0])], 4, 4), map).unwrap();
        assert_eq!(ok.boxes[0].id, 1);

        assert!(matches!(
            InstanceFrame::new(&record(&[], 4, 4), InstanceMap::empty(5, 4)),
            Err(DatasetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn instance_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = InstanceMap::empty(6, 3);
        map.set(5, 2, 1);
        let rec = record(&[(1, [4.0, 1.0, 6.0, 3.0])], 6, 3);
        write_file(&dir.path().join("f.json"), serde_json::to_string(&rec).unwrap()).unwrap();
        write_file(&dir.path().join("f.imap"), encode_instance_map(&map)).unwrap();
        let f = load_instance_frame(&dir.path().join("f.json"), &dir.path().join("f.imap")).unwrap();
        assert_eq!(f.map, map);
        assert_eq!(f.to_record(), rec);
        assert!(decode_instance_map(b"IMAP\x01\x00\x00\x00\x01\x00\x00\x00").is_err());
    }

    #[test]
    fn map_lookup_rounds_and_rejects_out_of_bounds() {
        let mut map = InstanceMap::empty(3, 2);
        map.set(2, 1, 9);
        assert_eq!(map.lookup(1.6, 0.6), Some(9));
        assert_eq!(map.lookup(2.49, 1.0), Some(9));
        assert_eq!(map.lookup(2.5, 1.0), None);
        assert_eq!(map.lookup(-0.6, 0.0), None);
    }

    #[test]
    fn cloud_line_roundtrip() {
        let det = CloudDetections {
            frame_id: 5,
            boxes: vec![ScoredBox { bbox: Box3D::new([10.5, -2.0, -0.9], [3.9, 1.6, 1.5], 0.3).unwrap(), score: 0.75 }],
        };
        let line = format_cloud_line(&det);
        let back = parse_cloud_line(&line).unwrap();
        assert_eq!(back.frame_id, 5);
        let (a, b) = (back.boxes[0].bbox, det.boxes[0].bbox);
        assert!((a.theta - b.theta).abs() < 1e-6);
        assert_eq!(format_cloud_line(&back), line);
    }

    #[test]
    fn trace_parsing() {
        let t = parse_bandwidth_trace("0,16\n1,8", "x").unwrap();
        assert_eq!(t.samples(), &[(0.0, 16.0), (1.0, 8.0)]);
        let h = parse_bandwidth_trace("t_s,mbps\n0,16\n", "x").unwrap();
        assert_eq!(h.samples().len(), 1);
        assert!(matches!(parse_bandwidth_trace("0,16\n0,8", "x"), Err(DatasetError::NonMonotoneTime { .. })));
        assert!(matches!(parse_bandwidth_trace("0,16\n1,0", "x"), Err(DatasetError::NonPositiveRate { .. })));
        assert!(parse_bandwidth_trace("0,16\nfoo,8", "x").is_err());
    }

    #[test]
    fn fcc1_shaped_trace_accepted() {
        let p = TraceProfile::by_name("FCC-1").unwrap();
        let t = p.synthesize(300, 1);
        assert!(t.samples().iter().all(|&(_, r)| (7.76..=17.76).contains(&r)));
        let text = format_bandwidth_trace(&t);
        assert_eq!(parse_bandwidth_trace(&text, "FCC-1").unwrap().samples(), t.samples());
    }

    #[test]
    fn trace_rate_lookup_cycles() {
        let t = BandwidthTrace::new("x", vec![(0.0, 16.0), (0.25, 8.0)]).unwrap();
        assert_eq!(t.period(), 1.25);
        assert_eq!(t.rate_at(0.1), 16.0);
        assert_eq!(t.rate_at(0.25), 8.0);
        assert_eq!(t.rate_at(1.3), 16.0);
    }
}
