//! On-disk scene bundles.
//!
//! A bundle is a directory holding `manifest.json` plus the files it
//! references. Every referenced file carries a SHA-256 digest; binary blobs
//! are little-endian arrays whose dtype and shape are declared in the
//! manifest. Layout written by [`SceneBundle::write`]:
//!
//! ```text
//! manifest.json
//! points.bin                    f64 or f32 [N, 3]
//! superpoints.bin               u32 [N]
//! frames/000000.camera.json     intrinsics, extrinsics (world→camera), width, height
//! frames/000000.depth.bin       f32 or f64 [H, W], meters, 0 = invalid
//! frames/000000.detections.json run-length encoded 2D instances
//! embeddings/…                  table or synthetic embedding source
//! text_embeddings.bin           f64 or f32 [C, D]
//! pointcloud_proposals.json     optional class-agnostic point masks
//! ground_truth.json             optional evaluation instances
//! ```
//!
//! Point masks in JSON files are `(start, length)` runs over point indices.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{EmbeddingProvider, ViewRequest};
use crate::error::{Error, Result};
use crate::eval::GroundTruthInstance;
use crate::grounding::DetectionFile;
use crate::mask::{MaskError, RunMask};
use crate::scene::{CameraFrame, PointCloud, SuperpointPartition};
use crate::sets::PointMask;

pub const BUNDLE_FORMAT: &str = "ovseg3d-bundle";
pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U32,
    I32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub path: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub frame_id: u32,
    pub camera: FileRef,
    pub depth: BlobRef,
    pub detections: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingSourceRef {
    /// Precomputed vectors addressed by `(mask key, frame, scale)`.
    Table { index: FileRef, blob: BlobRef },
    /// Procedural embeddings: class prototype of the dominant ground-truth
    /// instance in the view footprint, plus seeded Gaussian noise.
    Synthetic {
        point_instances: BlobRef,
        instance_classes: Vec<u32>,
        prototypes: BlobRef,
        sigma: f64,
        label_flip_rate: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEmbeddingRef {
    pub classes: Vec<String>,
    pub template: String,
    pub blob: BlobRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_points: usize,
    pub num_superpoints: usize,
    pub embedding_dim: usize,
    pub num_frames: usize,
    pub points: BlobRef,
    pub superpoints: BlobRef,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EmbeddingSourceRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embeddings: Option<TextEmbeddingRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointcloud_proposals: Option<FileRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<FileRef>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRunsRecord {
    pub point_runs: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalMasksFile {
    pub num_points: usize,
    pub proposals: Vec<PointRunsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub class_id: u32,
    pub point_runs: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub num_points: usize,
    pub classes: Vec<String>,
    pub instances: Vec<GroundTruthRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingIndexEntry {
    pub key: String,
    pub frame_id: u32,
    pub scale: u32,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingIndexFile {
    pub entries: Vec<EmbeddingIndexEntry>,
}

/// Decodes `(start, length)` runs over `n` points.
pub fn point_mask_from_runs(n: usize, runs: &[(u32, u32)]) -> std::result::Result<PointMask, MaskError> {
    let mask = RunMask::from_runs(n as u32, 1, runs.to_vec())?;
    if mask.area() == 0 {
        return Err(MaskError::ZeroArea);
    }
    Ok(PointMask::from_indices(
        n,
        mask.runs()
            .iter()
            .flat_map(|&(s, l)| (s as usize)..(s + l) as usize),
    ))
}

/// Content key of a point mask: SHA-256 over its point indices as
/// little-endian `u32`, hex encoded.
pub fn mask_key(mask: &PointMask) -> String {
    let mut hasher = Sha256::new();
    for i in mask.iter() {
        hasher.update((i as u32).to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_floats(values: impl IntoIterator<Item = f64>, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        match dtype {
            Dtype::F32 => out.extend((v as f32).to_le_bytes()),
            Dtype::F64 => out.extend(v.to_le_bytes()),
            _ => unreachable!("float dtype expected"),
        }
    }
    out
}

fn decode_floats(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        _ => unreachable!("float dtype expected"),
    }
}

fn decode_u32(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn decode_i32(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextQueries {
    pub classes: Vec<String>,
    pub template: String,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEmbeddings {
    /// Ground-truth instance per point, -1 for none.
    pub point_instances: Vec<i32>,
    pub instance_classes: Vec<u32>,
    pub prototypes: Vec<Vec<f64>>,
    pub sigma: f64,
    pub label_flip_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entries: BTreeMap<(String, u32, u32), Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingData {
    Table(EmbeddingTable),
    Synthetic(SyntheticEmbeddings),
}

impl EmbeddingData {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingData::Table(t) => t.dim,
            EmbeddingData::Synthetic(s) => s.prototypes.first().map_or(0, Vec::len),
        }
    }

    pub fn provider(&self) -> Box<dyn EmbeddingProvider<f64> + '_> {
        match self {
            EmbeddingData::Table(t) => Box::new(TableProvider(t)),
            EmbeddingData::Synthetic(s) => Box::new(crate::synth::SyntheticProvider::new(s)),
        }
    }
}

pub struct TableProvider<'a>(pub &'a EmbeddingTable);

impl EmbeddingProvider<f64> for TableProvider<'_> {
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn embed(&self, req: &ViewRequest<'_>) -> Result<Vec<f64>> {
        let key = (mask_key(&req.proposal.mask), req.frame_id, req.scale.level);
        self.0.entries.get(&key).cloned().ok_or_else(|| {
            Error::Provider(format!(
                "no embedding for mask {} in frame {} at scale {}",
                key.0, key.1, key.2
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub classes: Vec<String>,
    pub instances: Vec<GroundTruthInstance>,
}

impl GroundTruth {
    pub fn to_file(&self) -> GroundTruthFile {
        GroundTruthFile {
            num_points: self.instances.first().map_or(0, |g| g.mask.width()),
            classes: self.classes.clone(),
            instances: self
                .instances
                .iter()
                .map(|g| GroundTruthRecord {
                    class_id: g.class_id,
                    point_runs: g.mask.runs(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: &GroundTruthFile) -> Result<Self> {
        let instances = file
            .instances
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                if rec.class_id as usize >= file.classes.len() {
                    return Err(Error::Invalid(format!("instance {i}: unknown class {}", rec.class_id)));
                }
                let mask = point_mask_from_runs(file.num_points, &rec.point_runs)
                    .map_err(|e| Error::Invalid(format!("instance {i}: {e}")))?;
                Ok(GroundTruthInstance {
                    mask,
                    class_id: rec.class_id,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            classes: file.classes.clone(),
            instances,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_file(&read_json(path)?)
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Serializes `value` as pretty JSON followed by a newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
    bytes.push(b'\n');
    bytes
}

/// In-memory scene bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub cloud: PointCloud<f64>,
    pub partition: SuperpointPartition,
    /// Frames in ascending frame id.
    pub frames: Vec<CameraFrame<f64>>,
    /// Detection file of each frame, aligned with `frames`.
    pub detections: Vec<DetectionFile>,
    pub embeddings: Option<EmbeddingData>,
    pub text: Option<TextQueries>,
    pub point_cloud_proposals: Vec<PointMask>,
    pub ground_truth: Option<GroundTruth>,
    pub provenance: BTreeMap<String, String>,
    /// Storage dtype of depth maps when written.
    pub depth_dtype: Dtype,
}

impl SceneBundle {
    pub fn num_points(&self) -> usize {
        self.cloud.len()
    }

    /// Writes the bundle under `dir` (created if needed) and returns its manifest.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let mut w = Writer { root: dir.to_path_buf() };
        std::fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir, e))?;

        let n = self.num_points();
        let points = w.blob(
            "points.bin",
            Dtype::F64,
            vec![n, 3],
            encode_floats(self.cloud.positions().iter().flatten().copied(), Dtype::F64),
        )?;
        let labels: Vec<u8> = self.partition.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
        let superpoints = w.blob("superpoints.bin", Dtype::U32, vec![n], labels)?;

        let mut frames = Vec::with_capacity(self.frames.len());
        for (frame, det) in self.frames.iter().zip(&self.detections) {
            let stem = format!("frames/{:06}", frame.frame_id);
            let camera = CameraFile {
                intrinsics: frame.intrinsics,
                extrinsics: frame.extrinsics,
                width: frame.width,
                height: frame.height,
            };
            frames.push(FrameEntry {
                frame_id: frame.frame_id,
                camera: w.file(&format!("{stem}.camera.json"), to_json_bytes(&camera))?,
                depth: w.blob(
                    &format!("{stem}.depth.bin"),
                    self.depth_dtype,
                    vec![frame.height as usize, frame.width as usize],
                    encode_floats(frame.depth.iter().copied(), self.depth_dtype),
                )?,
                detections: w.file(&format!("{stem}.detections.json"), to_json_bytes(det))?,
            });
        }

        let embeddings = match &self.embeddings {
            None => None,
            Some(EmbeddingData::Table(t)) => {
                std::fs::create_dir_all(dir.join("embeddings")).map_err(|e| Error::io(dir, e))?;
                let mut entries = Vec::new();
                let mut rows = Vec::new();
                for (row, ((key, frame_id, scale), v)) in t.entries.iter().enumerate() {
                    entries.push(EmbeddingIndexEntry {
                        key: key.clone(),
                        frame_id: *frame_id,
                        scale: *scale,
                        row,
                    });
                    rows.extend(v.iter().copied());
                }
                Some(EmbeddingSourceRef::Table {
                    index: w.file("embeddings/index.json", to_json_bytes(&EmbeddingIndexFile { entries }))?,
                    blob: w.blob(
                        "embeddings/vectors.bin",
                        Dtype::F32,
                        vec![t.entries.len(), t.dim],
                        encode_floats(rows, Dtype::F32),
                    )?,
                })
            }
            Some(EmbeddingData::Synthetic(s)) => {
                std::fs::create_dir_all(dir.join("embeddings")).map_err(|e| Error::io(dir, e))?;
                let inst: Vec<u8> = s.point_instances.iter().flat_map(|v| v.to_le_bytes()).collect();
                let dim = s.prototypes.first().map_or(0, Vec::len);
                Some(EmbeddingSourceRef::Synthetic {
                    point_instances: w.blob("embeddings/point_instances.bin", Dtype::I32, vec![n], inst)?,
                    instance_classes: s.instance_classes.clone(),
                    prototypes: w.blob(
                        "embeddings/prototypes.bin",
                        Dtype::F64,
                        vec![s.prototypes.len(), dim],
                        encode_floats(s.prototypes.iter().flatten().copied(), Dtype::F64),
                    )?,
                    sigma: s.sigma,
                    label_flip_rate: s.label_flip_rate,
                    seed: s.seed,
                })
            }
        };

        let text_embeddings = match &self.text {
            None => None,
            Some(t) => {
                let dim = t.vectors.first().map_or(0, Vec::len);
                Some(TextEmbeddingRef {
                    classes: t.classes.clone(),
                    template: t.template.clone(),
                    blob: w.blob(
                        "text_embeddings.bin",
                        Dtype::F64,
                        vec![t.vectors.len(), dim],
                        encode_floats(t.vectors.iter().flatten().copied(), Dtype::F64),
                    )?,
                })
            }
        };

        let pointcloud_proposals = if self.point_cloud_proposals.is_empty() {
            None
        } else {
            let file = ProposalMasksFile {
                num_points: n,
                proposals: self
                    .point_cloud_proposals
                    .iter()
                    .map(|m| PointRunsRecord { point_runs: m.runs() })
                    .collect(),
            };
            Some(w.file("pointcloud_proposals.json", to_json_bytes(&file))?)
        };

        let ground_truth = match &self.ground_truth {
            None => None,
            Some(gt) => {
                let mut file = gt.to_file();
                file.num_points = n;
                Some(w.file("ground_truth.json", to_json_bytes(&file))?)
            }
        };

        let manifest = Manifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            num_points: n,
            num_superpoints: self.partition.num_superpoints(),
            embedding_dim: self
                .embeddings
                .as_ref()
                .map(EmbeddingData::dim)
                .or_else(|| self.text.as_ref().and_then(|t| t.vectors.first().map(Vec::len)))
                .unwrap_or(0),
            num_frames: frames.len(),
            points,
            superpoints,
            frames,
            embeddings,
            text_embeddings,
            pointcloud_proposals,
            ground_truth,
            provenance: self.provenance.clone(),
        };
        w.raw(MANIFEST_FILE, &to_json_bytes(&manifest))?;
        Ok(manifest)
    }

    /// Validates and loads the bundle under `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let (report, bundle) = inspect(dir);
        match bundle {
            Some(b) if report.is_clean() => Ok(b),
            _ => Err(Error::Validation(report)),
        }
    }
}

struct Writer {
    root: PathBuf,
}

impl Writer {
    fn raw(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    fn file(&mut self, rel: &str, bytes: Vec<u8>) -> Result<FileRef> {
        self.raw(rel, &bytes)?;
        Ok(FileRef {
            path: rel.into(),
            sha256: sha256_hex(&bytes),
        })
    }

    fn blob(&mut self, rel: &str, dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) -> Result<BlobRef> {
        let f = self.file(rel, bytes)?;
        Ok(BlobRef {
            path: f.path,
            dtype,
            shape,
            sha256: f.sha256,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            match v.offset {
                Some(o) => writeln!(f, "{} @ byte {o}: {}", v.file, v.message)?,
                None => writeln!(f, "{}: {}", v.file, v.message)?,
            }
        }
        Ok(())
    }
}

/// Runs every schema, hash and invariant check on the bundle under `dir`.
pub fn validate_bundle(dir: &Path) -> ValidationReport {
    inspect(dir).0
}

struct Checker<'a> {
    root: &'a Path,
    report: ValidationReport,
}

impl Checker<'_> {
    fn flag(&mut self, file: &str, offset: Option<u64>, message: impl Into<String>) {
        self.report.violations.push(Violation {
            file: file.into(),
            offset,
            message: message.into(),
        });
    }

    fn read(&mut self, rel: &str, sha: &str) -> Option<Vec<u8>> {
        let path = self.root.join(rel);
        match std::fs::read(&path) {
            Ok(bytes) => {
                if sha256_hex(&bytes) != sha {
                    self.flag(rel, None, "SHA-256 digest does not match the manifest");
                }
                Some(bytes)
            }
            Err(e) => {
                self.flag(rel, None, format!("unreadable: {e}"));
                None
            }
        }
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, r: &FileRef) -> Option<T> {
        let bytes = self.read(&r.path, &r.sha256)?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                self.flag(&r.path, None, format!("malformed JSON: {e}"));
                None
            }
        }
    }

    /// Reads a blob, checking dtype membership and shape (`None` entries are free).
    fn blob(&mut self, r: &BlobRef, dtypes: &[Dtype], shape: &[Option<usize>]) -> Option<Vec<u8>> {
        if !dtypes.contains(&r.dtype) {
            self.flag(&r.path, None, format!("dtype {:?} not allowed here (expected one of {dtypes:?})", r.dtype));
            return None;
        }
        let shape_ok = r.shape.len() == shape.len()
            && r.shape.iter().zip(shape).all(|(got, want)| want.is_none_or(|w| w == *got));
        if !shape_ok {
            self.flag(&r.path, None, format!("shape {:?} does not match expected {shape:?}", r.shape));
            return None;
        }
        let bytes = self.read(&r.path, &r.sha256)?;
        let expected = r.shape.iter().product::<usize>() * r.dtype.size();
        if bytes.len() != expected {
            self.flag(
                &r.path,
                Some(bytes.len().min(expected) as u64),
                format!("blob holds {} bytes, shape {:?} needs {expected}", bytes.len(), r.shape),
            );
            return None;
        }
        Some(bytes)
    }

    fn unit_rows(&mut self, file: &str, rows: &[Vec<f64>], elem_size: usize) {
        for (i, r) in rows.iter().enumerate() {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-5 {
                let offset = (i * r.len() * elem_size) as u64;
                self.flag(file, Some(offset), format!("row {i} has norm {norm}, expected unit length"));
            }
        }
    }
}

fn rows_of(values: Vec<f64>, dim: usize) -> Vec<Vec<f64>> {
    if dim == 0 {
        return Vec::new();
    }
    values.chunks_exact(dim).map(<[f64]>::to_vec).collect()
}

fn inspect(dir: &Path) -> (ValidationReport, Option<SceneBundle>) {
    let mut ck = Checker {
        root: dir,
        report: ValidationReport::default(),
    };
    let manifest: Manifest = match std::fs::read(dir.join(MANIFEST_FILE)) {
        Err(e) => {
            ck.flag(MANIFEST_FILE, None, format!("unreadable: {e}"));
            return (ck.report, None);
        }
        Ok(bytes) => match serde_json::from_slice(&bytes) {
            Ok(m) => m,
            Err(e) => {
                ck.flag(MANIFEST_FILE, None, format!("malformed manifest: {e}"));
                return (ck.report, None);
            }
        },
    };
    if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
        ck.flag(
            MANIFEST_FILE,
            None,
            format!("unsupported format {:?} version {}", manifest.format, manifest.version),
        );
        return (ck.report, None);
    }
    let n = manifest.num_points;
    let s = manifest.num_superpoints;
    let d = manifest.embedding_dim;

    let cloud = ck
        .blob(&manifest.points, &[Dtype::F32, Dtype::F64], &[Some(n), Some(3)])
        .map(|b| decode_floats(&b, manifest.points.dtype))
        .and_then(|v| {
            let pts = v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            PointCloud::new(pts)
                .map_err(|e| ck.flag(&manifest.points.path, None, e.to_string()))
                .ok()
        });

    let partition = ck
        .blob(&manifest.superpoints, &[Dtype::U32], &[Some(n)])
        .and_then(|b| {
            let labels = decode_u32(&b);
            let path = manifest.superpoints.path.clone();
            if let Some(i) = labels.iter().position(|&l| l as usize >= s) {
                ck.flag(
                    &path,
                    Some(4 * i as u64),
                    format!("superpoint id {} at point {i} is out of range [0, {s})", labels[i]),
                );
                return None;
            }
            SuperpointPartition::new(labels, s)
                .map_err(|e| ck.flag(&path, None, e.to_string()))
                .ok()
        });

    if manifest.frames.len() != manifest.num_frames {
        ck.flag(
            MANIFEST_FILE,
            None,
            format!("declares {} frames but lists {}", manifest.num_frames, manifest.frames.len()),
        );
    }
    let mut seen = BTreeSet::new();
    let mut frames = Vec::new();
    let mut detections = Vec::new();
    for entry in &manifest.frames {
        if !seen.insert(entry.frame_id) {
            ck.flag(MANIFEST_FILE, None, format!("frame id {} listed twice", entry.frame_id));
            continue;
        }
        let Some(cam) = ck.json::<CameraFile>(&entry.camera) else { continue };
        let Some(depth) = ck.blob(
            &entry.depth,
            &[Dtype::F32, Dtype::F64],
            &[Some(cam.height as usize), Some(cam.width as usize)],
        ) else {
            continue;
        };
        let depth = decode_floats(&depth, entry.depth.dtype);
        let frame = match CameraFrame::new(entry.frame_id, cam.intrinsics, cam.extrinsics, cam.width, cam.height, depth) {
            Ok(f) => f,
            Err(e) => {
                ck.flag(&entry.camera.path, None, e.to_string());
                continue;
            }
        };
        let Some(det) = ck.json::<DetectionFile>(&entry.detections) else { continue };
        if det.frame_id != entry.frame_id || det.width != cam.width || det.height != cam.height {
            ck.flag(
                &entry.detections.path,
                None,
                "detection file frame id or image size disagrees with its camera",
            );
            continue;
        }
        let (_, load) = det.decode();
        for r in load.rejected {
            ck.flag(&entry.detections.path, None, format!("instance {}: {}", r.index, r.reason));
        }
        frames.push(frame);
        detections.push(det);
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| frames[i].frame_id);
    let frames: Vec<_> = order.iter().map(|&i| frames[i].clone()).collect();
    let detections: Vec<_> = order.iter().map(|&i| detections[i].clone()).collect();

    let embeddings = match &manifest.embeddings {
        None => None,
        Some(EmbeddingSourceRef::Table { index, blob }) => {
            let index: Option<EmbeddingIndexFile> = ck.json(index);
            let vectors = ck
                .blob(blob, &[Dtype::F32, Dtype::F64], &[None, Some(d)])
                .map(|b| rows_of(decode_floats(&b, blob.dtype), d));
            match (index, vectors) {
                (Some(index), Some(vectors)) => {
                    ck.unit_rows(&blob.path, &vectors, blob.dtype.size());
                    let mut entries = BTreeMap::new();
                    for (i, e) in index.entries.iter().enumerate() {
                        match vectors.get(e.row) {
                            Some(v) => {
                                if entries.insert((e.key.clone(), e.frame_id, e.scale), v.clone()).is_some() {
                                    ck.flag("embeddings index", None, format!("entry {i} duplicates an earlier key"));
                                }
                            }
                            None => ck.flag(
                                "embeddings index",
                                None,
                                format!("entry {i} points at row {} beyond {} rows", e.row, vectors.len()),
                            ),
                        }
                    }
                    Some(EmbeddingData::Table(EmbeddingTable { dim: d, entries }))
                }
                _ => None,
            }
        }
        Some(EmbeddingSourceRef::Synthetic {
            point_instances,
            instance_classes,
            prototypes,
            sigma,
            label_flip_rate,
            seed,
        }) => {
            let inst = ck.blob(point_instances, &[Dtype::I32], &[Some(n)]).map(|b| decode_i32(&b));
            let protos = ck
                .blob(prototypes, &[Dtype::F32, Dtype::F64], &[None, Some(d)])
                .map(|b| rows_of(decode_floats(&b, prototypes.dtype), d));
            match (inst, protos) {
                (Some(inst), Some(protos)) => {
                    ck.unit_rows(&prototypes.path, &protos, prototypes.dtype.size());
                    if let Some(i) = inst.iter().position(|&x| x < -1 || x >= instance_classes.len() as i32) {
                        ck.flag(&point_instances.path, Some(4 * i as u64), format!("instance id {} out of range", inst[i]));
                    }
                    if let Some(c) = instance_classes.iter().find(|&&c| c as usize >= protos.len()) {
                        ck.flag(MANIFEST_FILE, None, format!("instance class {c} has no prototype"));
                    }
                    if !(*sigma >= 0.0) || !(0.0..=1.0).contains(label_flip_rate) {
                        ck.flag(MANIFEST_FILE, None, "synthetic embedding noise knobs out of range");
                    }
                    Some(EmbeddingData::Synthetic(SyntheticEmbeddings {
                        point_instances: inst,
                        instance_classes: instance_classes.clone(),
                        prototypes: protos,
                        sigma: *sigma,
                        label_flip_rate: *label_flip_rate,
                        seed: *seed,
                    }))
                }
                _ => None,
            }
        }
    };

    let text = manifest.text_embeddings.as_ref().and_then(|t| {
        let vectors = ck
            .blob(&t.blob, &[Dtype::F32, Dtype::F64], &[Some(t.classes.len()), Some(d)])
            .map(|b| rows_of(decode_floats(&b, t.blob.dtype), d))?;
        ck.unit_rows(&t.blob.path, &vectors, t.blob.dtype.size());
        Some(TextQueries {
            classes: t.classes.clone(),
            template: t.template.clone(),
            vectors,
        })
    });

    let mut point_cloud_proposals = Vec::new();
    if let Some(r) = &manifest.pointcloud_proposals {
        if let Some(file) = ck.json::<ProposalMasksFile>(r) {
            if file.num_points != n {
                ck.flag(&r.path, None, format!("masks cover {} points, bundle has {n}", file.num_points));
            } else {
                for (i, rec) in file.proposals.iter().enumerate() {
                    match point_mask_from_runs(n, &rec.point_runs) {
                        Ok(m) => point_cloud_proposals.push(m),
                        Err(e) => ck.flag(&r.path, None, format!("proposal {i}: {e}")),
                    }
                }
            }
        }
    }

    let ground_truth = manifest.ground_truth.as_ref().and_then(|r| {
        let file: GroundTruthFile = ck.json(r)?;
        if file.num_points != n {
            ck.flag(&r.path, None, format!("ground truth covers {} points, bundle has {n}", file.num_points));
            return None;
        }
        GroundTruth::from_file(&file)
            .map_err(|e| ck.flag(&r.path, None, e.to_string()))
            .ok()
    });

    let complete = ck.report.is_clean();
    let bundle = match (cloud, partition) {
        (Some(cloud), Some(partition)) if complete => Some(SceneBundle {
            cloud,
            partition,
            frames,
            detections,
            embeddings,
            text,
            point_cloud_proposals,
            ground_truth,
            provenance: manifest.provenance.clone(),
            depth_dtype: manifest.frames.first().map_or(Dtype::F32, |f| f.depth.dtype),
        }),
        _ => None,
    };
    (ck.report, bundle)
}
