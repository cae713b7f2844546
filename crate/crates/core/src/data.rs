//! Dataset manifests, 7-frame chunk selection and pseudo-label ingestion.
//!
//! A manifest is JSON-lines, one clip per line: frame image paths, the audio
//! file, per-frame audio sample offsets and (optionally) per-frame pseudo
//! labels. Chunks are non-overlapping 7-frame windows whose per-dimension
//! head-pose standard deviation, taken in the normalized label space and
//! maximized over the 6 dimensions, stays at or below a threshold. The
//! supervision targets of a chunk belong to its center (4th) frame.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{io::read_wav, AudioClip};
use crate::error::{Error, Result};
use crate::geometry::{GazeVector, HeadPose6D};

/// Frames per chunk.
pub const CHUNK_LEN: usize = 7;

/// 0-based offset of the supervised center frame (the 4th of 7).
pub const CENTER_OFFSET: usize = 3;

/// Std components are clamped to this when fitting label statistics.
pub const LABEL_STD_EPSILON: f64 = 1e-8;

/// Optional per-clip task label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskLabel {
    Zone { zone: u8 },
    Gaze { pitch: f64, yaw: f64 },
}

/// One clip of the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub clip_id: String,
    pub frame_paths: Vec<String>,
    pub audio_path: String,
    pub fps: f64,
    /// Per-frame `(start_sample, end_sample)` spans into the audio file.
    pub audio_offsets: Vec<(u64, u64)>,
    /// Per-frame 6-D head pose pseudo labels (rotation, translation).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_headpose: Option<Vec<[f64; 6]>>,
    /// Per-frame gaze pseudo labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_gaze: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_label: Option<TaskLabel>,
}

fn default_schema_version() -> u32 {
    1
}

impl ManifestEntry {
    pub fn n_frames(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn chunk_eligible(&self) -> bool {
        self.n_frames() >= CHUNK_LEN
    }

    pub fn headpose_at(&self, frame_idx: usize) -> Option<HeadPose6D> {
        self.pseudo_headpose
            .as_ref()
            .and_then(|v| v.get(frame_idx))
            .map(|&h| HeadPose6D::from_vec6(h))
    }

    pub fn gaze_at(&self, frame_idx: usize) -> Option<GazeVector> {
        self.pseudo_gaze
            .as_ref()
            .and_then(|v| v.get(frame_idx))
            .map(|&g| GazeVector::new(g))
    }
}

/// A loaded, validated manifest.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Non-fatal findings (e.g. chunk-ineligible clips).
    pub warnings: Vec<String>,
    /// Directory all relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn entry(&self, clip_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }
}

/// Load and validate a JSON-lines manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| Error::ManifestParse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if entry.schema_version != 1 {
            return Err(Error::ManifestParse {
                line: lineno + 1,
                msg: format!("unsupported schema_version {}", entry.schema_version),
            });
        }
        entries.push(entry);
    }

    let mut problems = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.clip_id.clone()) {
            problems.push(format!("duplicate clip_id '{}'", e.clip_id));
        }
        if !(e.fps > 0.0) {
            problems.push(format!("clip '{}': fps must be positive", e.clip_id));
        }
        if e.audio_offsets.len() != e.n_frames() {
            problems.push(format!(
                "clip '{}': {} audio offsets for {} frames",
                e.clip_id,
                e.audio_offsets.len(),
                e.n_frames()
            ));
        }
        for w in e.audio_offsets.windows(2) {
            if w[1].0 < w[0].0 || w[0].1 < w[0].0 {
                problems.push(format!(
                    "clip '{}': audio offsets not monotonically increasing",
                    e.clip_id
                ));
                break;
            }
        }
        if let Some(hp) = &e.pseudo_headpose {
            if hp.len() != e.n_frames() {
                problems.push(format!(
                    "clip '{}': {} head-pose labels for {} frames",
                    e.clip_id,
                    hp.len(),
                    e.n_frames()
                ));
            }
        }
        if let Some(g) = &e.pseudo_gaze {
            if g.len() != e.n_frames() {
                problems.push(format!(
                    "clip '{}': {} gaze labels for {} frames",
                    e.clip_id,
                    g.len(),
                    e.n_frames()
                ));
            }
        }
        if let Some(TaskLabel::Zone { zone }) = e.task_label {
            if !(1..=9).contains(&zone) {
                problems.push(format!("clip '{}': zone {} outside 1-9", e.clip_id, zone));
            }
        }
        for p in e.frame_paths.iter().chain(std::iter::once(&e.audio_path)) {
            if !root.join(p).exists() {
                problems.push(format!("clip '{}': missing file {p}", e.clip_id));
            }
        }
        if !e.chunk_eligible() {
            warnings.push(format!(
                "clip '{}': only {} frames, chunk-ineligible",
                e.clip_id,
                e.n_frames()
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::ManifestValidation(problems));
    }
    Ok(Manifest {
        entries,
        warnings,
        root,
    })
}

/// Write entries as a JSON-lines manifest.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-dimension head-pose label normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelNormStats {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

/// Fit z-score statistics over all labeled frames of the given entries.
pub fn fit_label_norm(entries: &[ManifestEntry]) -> Result<LabelNormStats> {
    let mut count = 0usize;
    let mut mean = [0.0; 6];
    for e in entries {
        if let Some(poses) = &e.pseudo_headpose {
            for p in poses {
                for d in 0..6 {
                    mean[d] += p[d];
                }
                count += 1;
            }
        }
    }
    if count < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 labeled frames to fit label stats, got {count}"
        )));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = [0.0; 6];
    for e in entries {
        if let Some(poses) = &e.pseudo_headpose {
            for p in poses {
                for d in 0..6 {
                    let diff = p[d] - mean[d];
                    var[d] += diff * diff;
                }
            }
        }
    }
    let mut std = [0.0; 6];
    for d in 0..6 {
        std[d] = (var[d] / count as f64).sqrt().max(LABEL_STD_EPSILON);
    }
    Ok(LabelNormStats { mean, std })
}

/// Z-score a head pose with fitted statistics.
pub fn normalize_headpose(h: &HeadPose6D, stats: &LabelNormStats) -> [f64; 6] {
    let v = h.to_vec6();
    let mut out = [0.0; 6];
    for d in 0..6 {
        out[d] = (v[d] - stats.mean[d]) / stats.std[d];
    }
    out
}

/// Invert [`normalize_headpose`].
pub fn denormalize_headpose(v: &[f64; 6], stats: &LabelNormStats) -> HeadPose6D {
    let mut out = [0.0; 6];
    for d in 0..6 {
        out[d] = v[d] * stats.std[d] + stats.mean[d];
    }
    HeadPose6D::from_vec6(out)
}

/// A 7-frame training sample; labels belong to the center frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameChunk {
    pub clip_id: String,
    /// Index of the first frame within the clip.
    pub start_frame: usize,
    /// Exactly [`CHUNK_LEN`] resolved frame paths.
    pub frame_paths: Vec<PathBuf>,
    pub fps: f64,
    pub audio_path: PathBuf,
    /// Sample span covering frames 1..=7 in the audio file.
    pub audio_span: (u64, u64),
    pub center_headpose: HeadPose6D,
    pub center_gaze: GazeVector,
}

impl FrameChunk {
    /// Clip-level index of the supervised center frame.
    pub fn center_frame(&self) -> usize {
        self.start_frame + CENTER_OFFSET
    }

    /// Stable identifier for reports and split bookkeeping.
    pub fn sample_id(&self) -> String {
        format!("{}#{}", self.clip_id, self.start_frame)
    }
}

/// Chunk selection parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub chunk_len: usize,
    pub std_threshold: f64,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self {
            chunk_len: CHUNK_LEN,
            std_threshold: 0.1,
        }
    }
}

/// Per-dimension population std of normalized head poses, maximized over the
/// 6 dimensions.
pub fn window_pose_std(normalized: &[[f64; 6]]) -> f64 {
    let n = normalized.len() as f64;
    let mut worst = 0.0f64;
    for d in 0..6 {
        let mean = normalized.iter().map(|p| p[d]).sum::<f64>() / n;
        let var = normalized
            .iter()
            .map(|p| (p[d] - mean) * (p[d] - mean))
            .sum::<f64>()
            / n;
        worst = worst.max(var.sqrt());
    }
    worst
}

/// Select every non-overlapping window (stride = chunk length) whose
/// normalized head-pose std passes the stability filter.
pub fn select_chunks(
    entry: &ManifestEntry,
    root: &Path,
    stats: &LabelNormStats,
    params: &ChunkParams,
) -> Result<Vec<FrameChunk>> {
    let poses = entry.pseudo_headpose.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!(
            "clip '{}' has no per-frame head-pose labels",
            entry.clip_id
        ))
    })?;
    if poses.len() != entry.n_frames() {
        return Err(Error::Shape(format!(
            "clip '{}': {} labels for {} frames",
            entry.clip_id,
            poses.len(),
            entry.n_frames()
        )));
    }
    let len = params.chunk_len;
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= entry.n_frames() {
        let normalized: Vec<[f64; 6]> = poses[start..start + len]
            .iter()
            .map(|&p| normalize_headpose(&HeadPose6D::from_vec6(p), stats))
            .collect();
        if window_pose_std(&normalized) <= params.std_threshold {
            let center = start + CENTER_OFFSET;
            let center_headpose = HeadPose6D::from_vec6(poses[center]);
            let center_gaze = entry
                .gaze_at(center)
                .unwrap_or_else(|| center_headpose.orientation_vector());
            out.push(FrameChunk {
                clip_id: entry.clip_id.clone(),
                start_frame: start,
                frame_paths: entry.frame_paths[start..start + len]
                    .iter()
                    .map(|p| root.join(p))
                    .collect(),
                fps: entry.fps,
                audio_path: root.join(&entry.audio_path),
                audio_span: (
                    entry.audio_offsets[start].0,
                    entry.audio_offsets[start + len - 1].1,
                ),
                center_headpose,
                center_gaze,
            });
        }
        start += len;
    }
    Ok(out)
}

/// Cut the chunk's audio segment out of a decoded clip.
pub fn slice_clip(clip: &AudioClip, span: (u64, u64), fps: f64) -> Result<AudioClip> {
    let (start, end) = (span.0 as usize, span.1 as usize);
    if end > clip.samples.len() || start >= end {
        return Err(Error::Alignment(format!(
            "span {start}..{end} outside audio of {} samples",
            clip.samples.len()
        )));
    }
    let expected = CHUNK_LEN as f64 / fps * clip.sample_rate as f64;
    if ((end - start) as f64 - expected).abs() > 1.0 {
        return Err(Error::Alignment(format!(
            "span covers {} samples, expected {expected:.1} +/- 1",
            end - start
        )));
    }
    AudioClip::new(clip.samples[start..end].to_vec(), clip.sample_rate)
}

/// Load the audio segment spanning the chunk's 7 frames.
pub fn align_audio(chunk: &FrameChunk) -> Result<AudioClip> {
    let clip = read_wav(&chunk.audio_path)?;
    slice_clip(&clip, chunk.audio_span, chunk.fps)
}

/// Source of pseudo labels (an external teacher stand-in).
pub trait LabelProvider {
    fn headpose(&self, clip_id: &str, frame_idx: usize) -> Option<HeadPose6D>;
    fn gaze(&self, clip_id: &str, frame_idx: usize) -> Option<GazeVector>;
}

/// Resolve the chunk's center labels from providers.
///
/// Head pose is mandatory; a missing gaze label falls back to the head
/// orientation (the rotation applied to the frontal axis).
pub fn attach_pseudo_labels(
    chunk: &FrameChunk,
    headpose_provider: &dyn LabelProvider,
    gaze_provider: &dyn LabelProvider,
) -> Result<FrameChunk> {
    let center = chunk.center_frame();
    let hp = headpose_provider
        .headpose(&chunk.clip_id, center)
        .ok_or_else(|| Error::Lookup {
            clip_id: chunk.clip_id.clone(),
            frame_idx: center,
        })?;
    let gaze = gaze_provider
        .gaze(&chunk.clip_id, center)
        .unwrap_or_else(|| hp.orientation_vector());
    let mut out = chunk.clone();
    out.center_headpose = hp;
    out.center_gaze = gaze;
    Ok(out)
}

/// Labels served from the manifest's inline pseudo-label fields.
pub struct ManifestProvider<'a> {
    by_clip: BTreeMap<&'a str, &'a ManifestEntry>,
}

impl<'a> ManifestProvider<'a> {
    pub fn new(manifest: &'a Manifest) -> Self {
        Self {
            by_clip: manifest
                .entries
                .iter()
                .map(|e| (e.clip_id.as_str(), e))
                .collect(),
        }
    }
}

impl LabelProvider for ManifestProvider<'_> {
    fn headpose(&self, clip_id: &str, frame_idx: usize) -> Option<HeadPose6D> {
        self.by_clip
            .get(clip_id)
            .and_then(|e| e.headpose_at(frame_idx))
    }

    fn gaze(&self, clip_id: &str, frame_idx: usize) -> Option<GazeVector> {
        self.by_clip.get(clip_id).and_then(|e| e.gaze_at(frame_idx))
    }
}

/// Labels read from a teacher-export CSV:
/// `clip_id, frame_idx, rx, ry, rz, tx, ty, tz[, gx, gy, gz]`.
pub struct CsvLabelProvider {
    map: BTreeMap<(String, usize), (HeadPose6D, Option<GazeVector>)>,
}

impl CsvLabelProvider {
    pub fn from_path(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)?;
        let mut map = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 8 && record.len() != 11 {
                return Err(Error::InvalidInput(format!(
                    "label CSV row {}: expected 8 or 11 fields, got {}",
                    i + 1,
                    record.len()
                )));
            }
            let f = |k: usize| -> Result<f64> {
                record[k].parse::<f64>().map_err(|e| {
                    Error::InvalidInput(format!("label CSV row {}: bad float: {e}", i + 1))
                })
            };
            let frame_idx: usize = record[1].parse().map_err(|e| {
                Error::InvalidInput(format!("label CSV row {}: bad frame index: {e}", i + 1))
            })?;
            let hp = HeadPose6D::from_vec6([f(2)?, f(3)?, f(4)?, f(5)?, f(6)?, f(7)?]);
            let gaze = if record.len() == 11 {
                Some(GazeVector::new([f(8)?, f(9)?, f(10)?]))
            } else {
                None
            };
            map.insert((record[0].to_string(), frame_idx), (hp, gaze));
        }
        Ok(Self { map })
    }
}

impl LabelProvider for CsvLabelProvider {
    fn headpose(&self, clip_id: &str, frame_idx: usize) -> Option<HeadPose6D> {
        self.map
            .get(&(clip_id.to_string(), frame_idx))
            .map(|(h, _)| *h)
    }

    fn gaze(&self, clip_id: &str, frame_idx: usize) -> Option<GazeVector> {
        self.map
            .get(&(clip_id.to_string(), frame_idx))
            .and_then(|(_, g)| *g)
    }
}

/// Fill an entry's per-frame label fields from a provider. Fails if any
/// frame lacks a head pose.
pub fn populate_labels(
    entry: &ManifestEntry,
    provider: &dyn LabelProvider,
) -> Result<ManifestEntry> {
    let mut poses = Vec::with_capacity(entry.n_frames());
    let mut gazes = Vec::with_capacity(entry.n_frames());
    let mut any_gaze = false;
    for idx in 0..entry.n_frames() {
        let hp = provider
            .headpose(&entry.clip_id, idx)
            .ok_or_else(|| Error::Lookup {
                clip_id: entry.clip_id.clone(),
                frame_idx: idx,
            })?;
        poses.push(hp.to_vec6());
        match provider.gaze(&entry.clip_id, idx) {
            Some(g) => {
                any_gaze = true;
                gazes.push(g.direction);
            }
            None => gazes.push(hp.orientation_vector().direction),
        }
    }
    let mut out = entry.clone();
    out.pseudo_headpose = Some(poses);
    out.pseudo_gaze = if any_gaze { Some(gazes) } else { None };
    Ok(out)
}

/// Load one frame as planar RGB bytes (CHW), resized to
/// `resolution` x `resolution`.
pub fn load_frame_u8(path: &Path, resolution: usize) -> Result<Vec<u8>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize == resolution && img.height() as usize == resolution {
        img
    } else {
        image::imageops::resize(
            &img,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let mut out = vec![0u8; 3 * resolution * resolution];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            out[c * resolution * resolution + y * resolution + x] = p.0[c];
        }
    }
    Ok(out)
}
