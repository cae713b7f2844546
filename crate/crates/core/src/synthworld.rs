//! Synthetic audio-visual world with exact ground truth.
//!
//! Each clip is a smoothed bounded random walk in yaw/pitch/roll. Frames are
//! parametric 2-D renderings of a head (ellipse, nose marker displaced with
//! yaw/pitch, pupil markers displaced by the gaze-minus-head eye offset).
//! Audio is a harmonic tone whose two lowest spectral peaks move monotonically
//! with yaw and pitch, plus a small noise floor, so coarse pose is audible
//! while gaze fine structure stays visual-only.
//!
//! The whole world is a pure function of the seed: clip generation draws from
//! per-clip derived streams and can run in any order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{io::write_wav_f32, AudioClip};
use crate::data::{write_manifest, LabelProvider, Manifest, ManifestEntry, TaskLabel};
use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle_apply, euler_to_axis_angle, pitchyaw_to_vector, GazeVector, HeadPose6D, PitchYaw,
};
use crate::seeding::derive_rng;

/// World generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_clips: usize,
    pub frames_per_clip: usize,
    pub fps: f64,
    pub sample_rate: u32,
    /// Random-walk step scale for head angles, radians per frame.
    pub pose_walk_scale: f64,
    /// Magnitude of the slowly drifting gaze-minus-head offset, radians.
    pub eye_offset_scale: f64,
    pub image_size: usize,
    /// Std of the additive audio noise floor.
    pub audio_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clips: 10,
            frames_per_clip: 21,
            fps: 25.0,
            sample_rate: 16_000,
            pose_walk_scale: 0.02,
            eye_offset_scale: 0.1,
            image_size: 64,
            audio_noise: 0.02,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(Error::Config("n_clips must be positive".into()));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::Config("frames_per_clip must be positive".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        if self.sample_rate == 0 || self.image_size == 0 {
            return Err(Error::Config(
                "sample_rate and image_size must be positive".into(),
            ));
        }
        if !(self.pose_walk_scale > 0.0 && self.eye_offset_scale > 0.0 && self.audio_noise >= 0.0)
        {
            return Err(Error::Config(
                "pose_walk_scale and eye_offset_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Exact per-frame labels of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTruth {
    pub headposes: Vec<HeadPose6D>,
    pub gazes: Vec<GazeVector>,
    /// (yaw, pitch, roll) per frame.
    pub angles: Vec<[f64; 3]>,
    /// (pitch offset, yaw offset) of the eyes relative to the head.
    pub eye_offsets: Vec<[f64; 2]>,
}

/// One generated clip before it is written to disk.
#[derive(Debug, Clone)]
pub struct ClipData {
    /// Manifest entry with world-relative paths and ground truth attached as
    /// pseudo labels.
    pub entry: ManifestEntry,
    /// Raw RGB8 frames (row-major, interleaved), `image_size` squared.
    pub frames: Vec<Vec<u8>>,
    pub audio: AudioClip,
    pub truth: ClipTruth,
}

const YAW_BOUND: f64 = 0.8;
const PITCH_BOUND: f64 = 0.45;
const ROLL_BOUND: f64 = 0.25;
const HEAD_TRANSLATION: [f64; 3] = [0.0, 0.0, 0.6];

fn clip_id_for(index: usize) -> String {
    format!("clip_{index:04}")
}

/// Generate one clip deterministically from `(config.seed, clip_index)`.
pub fn generate_clip(cfg: &WorldConfig, clip_index: usize) -> Result<ClipData> {
    cfg.validate()?;
    let mut rng = derive_rng(cfg.seed, "clip", clip_index as u64);
    let n = cfg.frames_per_clip;

    // Head trajectory: AR(1) velocity, clamped positions.
    let mut yaw = rng.gen_range(-0.6..0.6);
    let mut pitch = rng.gen_range(-0.35..0.35);
    let mut roll = rng.gen_range(-0.15..0.15);
    let mut vel = [0.0f64; 3];
    // Eye offset drifts slowly within +/- 1.5x its scale.
    let mut eye_pitch = rng.gen_range(-cfg.eye_offset_scale..cfg.eye_offset_scale);
    let mut eye_yaw = rng.gen_range(-cfg.eye_offset_scale..cfg.eye_offset_scale);

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut truth = ClipTruth {
        headposes: Vec::with_capacity(n),
        gazes: Vec::with_capacity(n),
        angles: Vec::with_capacity(n),
        eye_offsets: Vec::with_capacity(n),
    };

    for _ in 0..n {
        truth.angles.push([yaw, pitch, roll]);
        truth.eye_offsets.push([eye_pitch, eye_yaw]);
        let rotation = euler_to_axis_angle(yaw, pitch, roll);
        let pose = HeadPose6D::new(rotation, HEAD_TRANSLATION);
        let local = pitchyaw_to_vector(&PitchYaw {
            pitch: eye_pitch,
            yaw: eye_yaw,
        });
        let gaze = GazeVector::new(axis_angle_apply(&rotation, &local.direction));
        truth.headposes.push(pose);
        truth.gazes.push(gaze);

        let steps = [
            (YAW_BOUND, cfg.pose_walk_scale),
            (PITCH_BOUND, cfg.pose_walk_scale * 0.7),
            (ROLL_BOUND, cfg.pose_walk_scale * 0.4),
        ];
        for (i, (bound, scale)) in steps.into_iter().enumerate() {
            vel[i] = 0.8 * vel[i] + scale * normal.sample(&mut rng);
            let target = match i {
                0 => &mut yaw,
                1 => &mut pitch,
                _ => &mut roll,
            };
            *target = (*target + vel[i]).clamp(-bound, bound);
        }
        let drift = cfg.eye_offset_scale * 0.08;
        eye_pitch = (eye_pitch + drift * normal.sample(&mut rng))
            .clamp(-1.5 * cfg.eye_offset_scale, 1.5 * cfg.eye_offset_scale);
        eye_yaw = (eye_yaw + drift * normal.sample(&mut rng))
            .clamp(-1.5 * cfg.eye_offset_scale, 1.5 * cfg.eye_offset_scale);
    }

    let frames: Vec<Vec<u8>> = (0..n)
        .map(|i| {
            render_frame(
                cfg.image_size,
                truth.angles[i][0],
                truth.angles[i][1],
                truth.eye_offsets[i][0],
                truth.eye_offsets[i][1],
            )
        })
        .collect();

    let audio = synthesize_audio(cfg, &truth, &mut rng)?;

    let clip_id = clip_id_for(clip_index);
    let spf = cfg.sample_rate as f64 / cfg.fps;
    let audio_offsets: Vec<(u64, u64)> = (0..n)
        .map(|i| {
            (
                (i as f64 * spf).round() as u64,
                ((i + 1) as f64 * spf).round() as u64,
            )
        })
        .collect();

    // Per-clip zone from the mean gaze direction.
    let mean_gaze = mean_direction(&truth.gazes);
    let task_label = crate::evaluation::gaze_zone(&mean_gaze)
        .ok()
        .map(|zone| TaskLabel::Zone { zone });

    let entry = ManifestEntry {
        schema_version: 1,
        clip_id: clip_id.clone(),
        frame_paths: (0..n)
            .map(|i| format!("clips/{clip_id}/frame_{i:03}.png"))
            .collect(),
        audio_path: format!("clips/{clip_id}/audio.wav"),
        fps: cfg.fps,
        audio_offsets,
        pseudo_headpose: Some(truth.headposes.iter().map(|h| h.to_vec6()).collect()),
        pseudo_gaze: Some(truth.gazes.iter().map(|g| g.direction).collect()),
        task_label,
    };

    Ok(ClipData {
        entry,
        frames,
        audio,
        truth,
    })
}

fn mean_direction(gazes: &[GazeVector]) -> GazeVector {
    let mut sum = [0.0; 3];
    for g in gazes {
        for d in 0..3 {
            sum[d] += g.direction[d];
        }
    }
    GazeVector::new(sum)
}

/// Audio peaks: the first moves with yaw, the second with pitch.
fn peak_frequencies(yaw: f64, pitch: f64) -> (f64, f64) {
    (500.0 + 375.0 * yaw, 1500.0 + 1200.0 * pitch)
}

fn synthesize_audio(
    cfg: &WorldConfig,
    truth: &ClipTruth,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<AudioClip> {
    let spf = cfg.sample_rate as f64 / cfg.fps;
    let total = (truth.angles.len() as f64 * spf).round() as usize;
    let mut samples = Vec::with_capacity(total);
    let mut ph1 = 0.0f64;
    let mut ph2 = 0.0f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    for i in 0..total {
        let frame = ((i as f64 / spf) as usize).min(truth.angles.len() - 1);
        let [yaw, pitch, _] = truth.angles[frame];
        let (f1, f2) = peak_frequencies(yaw, pitch);
        ph1 += two_pi * f1 / cfg.sample_rate as f64;
        ph2 += two_pi * f2 / cfg.sample_rate as f64;
        let noise: f64 = StandardNormal.sample(rng);
        samples.push(
            0.35 * ph1.sin() + 0.1 * (2.0 * ph1).sin() + 0.35 * ph2.sin()
                + cfg.audio_noise * noise,
        );
    }
    AudioClip::new(samples, cfg.sample_rate)
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Composite an anti-aliased disk onto the buffer.
fn draw_disk(buf: &mut [f64], size: usize, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
    let lo_y = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let hi_y = ((cy + r + 1.0).ceil().min(size as f64 - 1.0)) as usize;
    let lo_x = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let hi_x = ((cx + r + 1.0).ceil().min(size as f64 - 1.0)) as usize;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let alpha = 1.0 - smoothstep(r - 0.75, r + 0.75, d);
            if alpha > 0.0 {
                let base = (y * size + x) * 3;
                for c in 0..3 {
                    buf[base + c] = buf[base + c] * (1.0 - alpha) + color[c] * alpha;
                }
            }
        }
    }
}

/// Render one frame: head ellipse, nose marker (moves with yaw/pitch), sclera
/// disks and black pupils (move with the eye offset).
fn render_frame(size: usize, yaw: f64, pitch: f64, eye_pitch: f64, eye_yaw: f64) -> Vec<u8> {
    let s = size as f64;
    let mut buf = vec![0.0f64; size * size * 3];
    for px in buf.chunks_exact_mut(3) {
        px.copy_from_slice(&[0.93, 0.93, 0.93]);
    }

    // Head ellipse.
    let (a, b) = (0.34 * s, 0.42 * s);
    let (cx, cy) = (0.5 * s, 0.5 * s);
    let skin = [0.82, 0.68, 0.56];
    for y in 0..size {
        for x in 0..size {
            let fx = (x as f64 - cx) / a;
            let fy = (y as f64 - cy) / b;
            let f = (fx * fx + fy * fy).sqrt();
            let dist = (f - 1.0) * a.min(b);
            let alpha = 1.0 - smoothstep(-0.75, 0.75, dist);
            if alpha > 0.0 {
                let base = (y * size + x) * 3;
                for c in 0..3 {
                    buf[base + c] = buf[base + c] * (1.0 - alpha) + skin[c] * alpha;
                }
            }
        }
    }

    // Head pose shifts shared by the facial features.
    let head_dx = -0.10 * s * yaw.sin();
    let head_dy = 0.10 * s * pitch.sin();

    // Sclera and pupils.
    let eye_y = 0.40 * s + head_dy;
    let pupil_dx = -0.35 * s * eye_yaw.sin();
    let pupil_dy = 0.35 * s * eye_pitch.sin();
    for side in [-1.0, 1.0] {
        let ex = cx + side * 0.16 * s + head_dx;
        draw_disk(&mut buf, size, ex, eye_y, 0.085 * s, [1.0, 1.0, 1.0]);
        draw_disk(
            &mut buf,
            size,
            ex + pupil_dx,
            eye_y + pupil_dy,
            0.032 * s,
            [0.0, 0.0, 0.0],
        );
    }

    // Nose marker, displaced proportionally to yaw/pitch.
    let nose_x = cx - 0.20 * s * yaw.sin();
    let nose_y = 0.58 * s + 0.20 * s * pitch.sin();
    draw_disk(&mut buf, size, nose_x, nose_y, 0.05 * s, [0.75, 0.25, 0.20]);

    buf.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// A generated world: manifest on disk plus in-memory ground truth.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub manifest_path: PathBuf,
    truth: BTreeMap<String, ClipTruth>,
}

impl World {
    pub fn truth(&self, clip_id: &str) -> Option<&ClipTruth> {
        self.truth.get(clip_id)
    }

    pub fn clip_ids(&self) -> impl Iterator<Item = &str> {
        self.truth.keys().map(String::as_str)
    }

    /// An exact-ground-truth label provider, optionally corrupted by
    /// zero-mean Gaussian noise to emulate teacher error. Noise is a pure
    /// function of `(noise_seed, clip, frame)`, so repeated lookups agree.
    pub fn oracle_provider(&self, noise_std: f64, noise_seed: u64) -> OracleProvider<'_> {
        OracleProvider {
            world: self,
            noise_std,
            noise_seed,
        }
    }
}

/// Ground-truth pseudo-label provider backed by a [`World`].
pub struct OracleProvider<'w> {
    world: &'w World,
    noise_std: f64,
    noise_seed: u64,
}

impl OracleProvider<'_> {
    fn noise_rng(&self, clip_id: &str, frame_idx: usize) -> rand_chacha::ChaCha20Rng {
        let mut key = 1469598103934665603u64; // FNV-1a over the clip id
        for b in clip_id.bytes() {
            key ^= b as u64;
            key = key.wrapping_mul(1099511628211);
        }
        derive_rng(self.noise_seed ^ key, "oracle-noise", frame_idx as u64)
    }
}

impl LabelProvider for OracleProvider<'_> {
    fn headpose(&self, clip_id: &str, frame_idx: usize) -> Option<HeadPose6D> {
        let truth = self.world.truth(clip_id)?;
        let pose = truth.headposes.get(frame_idx)?;
        if self.noise_std == 0.0 {
            return Some(*pose);
        }
        let mut rng = self.noise_rng(clip_id, frame_idx);
        let normal = Normal::new(0.0, self.noise_std).expect("valid std");
        let mut v = pose.to_vec6();
        for x in &mut v {
            *x += normal.sample(&mut rng);
        }
        Some(HeadPose6D::from_vec6(v))
    }

    fn gaze(&self, clip_id: &str, frame_idx: usize) -> Option<GazeVector> {
        let truth = self.world.truth(clip_id)?;
        let gaze = truth.gazes.get(frame_idx)?;
        if self.noise_std == 0.0 {
            return Some(*gaze);
        }
        let mut rng = self.noise_rng(clip_id, frame_idx);
        let normal = Normal::new(0.0, self.noise_std).expect("valid std");
        // Skip the 6 head-pose draws so gaze noise is independent of them.
        for _ in 0..6 {
            normal.sample(&mut rng);
        }
        let mut d = gaze.direction;
        for x in &mut d {
            *x += normal.sample(&mut rng);
        }
        Some(GazeVector::new(d))
    }
}

/// Generate all clips and write the world to `out_dir`.
///
/// Layout: `out_dir/manifest.jsonl` plus `out_dir/clips/<clip>/frame_*.png`
/// and `audio.wav`, consumable by the data module unchanged.
pub fn generate_world(cfg: &WorldConfig, out_dir: &Path) -> Result<World> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(cfg.n_clips);
    let mut truth = BTreeMap::new();
    for i in 0..cfg.n_clips {
        let clip = generate_clip(cfg, i)?;
        let clip_dir = out_dir.join("clips").join(&clip.entry.clip_id);
        std::fs::create_dir_all(&clip_dir)?;
        for (j, frame) in clip.frames.iter().enumerate() {
            let img = image::RgbImage::from_raw(
                cfg.image_size as u32,
                cfg.image_size as u32,
                frame.clone(),
            )
            .expect("frame buffer matches dimensions");
            img.save(clip_dir.join(format!("frame_{j:03}.png")))?;
        }
        write_wav_f32(&clip_dir.join("audio.wav"), &clip.audio)?;
        truth.insert(clip.entry.clip_id.clone(), clip.truth);
        entries.push(clip.entry);
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &entries)?;
    Ok(World {
        config: cfg.clone(),
        manifest_path,
        truth,
    })
}

/// Reconstruct the in-memory world (ground truth included) from its config
/// without touching the filesystem. Useful after a manifest round-trip.
pub fn rebuild_truth(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut truth = BTreeMap::new();
    for i in 0..cfg.n_clips {
        let clip = generate_clip(cfg, i)?;
        truth.insert(clip.entry.clip_id.clone(), clip.truth);
    }
    Ok(World {
        config: cfg.clone(),
        manifest_path: PathBuf::new(),
        truth,
    })
}

/// Load a manifest produced by [`generate_world`].
pub fn load_world_manifest(out_dir: &Path) -> Result<Manifest> {
    crate::data::load_manifest(&out_dir.join("manifest.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fit_label_norm, normalize_headpose, window_pose_std, CHUNK_LEN};

    fn small_cfg(seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            n_clips: 4,
            frames_per_clip: 14,
            image_size: 32,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn clip_generation_is_bit_deterministic() {
        let cfg = small_cfg(9);
        let a = generate_clip(&cfg, 2).unwrap();
        let b = generate_clip(&cfg, 2).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.entry, b.entry);
        for (x, y) in a.audio.samples.iter().zip(b.audio.samples.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Different clip index produces different content.
        let c = generate_clip(&cfg, 3).unwrap();
        assert_ne!(a.truth.angles, c.truth.angles);
    }

    #[test]
    fn default_walk_passes_the_chunk_filter_mostly() {
        let cfg = WorldConfig {
            seed: 11,
            n_clips: 30,
            frames_per_clip: 21,
            image_size: 16,
            ..WorldConfig::default()
        };
        let entries: Vec<ManifestEntry> = (0..cfg.n_clips)
            .map(|i| generate_clip(&cfg, i).unwrap().entry)
            .collect();
        let stats = fit_label_norm(&entries).unwrap();
        let mut total = 0;
        let mut passed = 0;
        for e in &entries {
            let poses = e.pseudo_headpose.as_ref().unwrap();
            let mut start = 0;
            while start + CHUNK_LEN <= poses.len() {
                let normalized: Vec<[f64; 6]> = poses[start..start + CHUNK_LEN]
                    .iter()
                    .map(|&p| normalize_headpose(&HeadPose6D::from_vec6(p), &stats))
                    .collect();
                total += 1;
                if window_pose_std(&normalized) <= 0.1 {
                    passed += 1;
                }
                start += CHUNK_LEN;
            }
        }
        let frac = passed as f64 / total as f64;
        assert!(
            frac >= 0.5,
            "only {passed}/{total} windows pass the stability filter"
        );
        assert!(total > 0);
    }

    #[test]
    fn negligible_walk_passes_every_window() {
        let cfg = WorldConfig {
            seed: 3,
            n_clips: 3,
            frames_per_clip: 14,
            pose_walk_scale: 1e-12,
            image_size: 16,
            ..WorldConfig::default()
        };
        let entries: Vec<ManifestEntry> = (0..cfg.n_clips)
            .map(|i| generate_clip(&cfg, i).unwrap().entry)
            .collect();
        let stats = fit_label_norm(&entries).unwrap();
        for e in &entries {
            let poses = e.pseudo_headpose.as_ref().unwrap();
            let mut start = 0;
            while start + CHUNK_LEN <= poses.len() {
                let normalized: Vec<[f64; 6]> = poses[start..start + CHUNK_LEN]
                    .iter()
                    .map(|&p| normalize_headpose(&HeadPose6D::from_vec6(p), &stats))
                    .collect();
                assert!(window_pose_std(&normalized) <= 0.1);
                start += CHUNK_LEN;
            }
        }
    }

    #[test]
    fn oracle_provider_noise_behaviour() {
        let cfg = small_cfg(21);
        let world = rebuild_truth(&cfg).unwrap();

        // Zero noise: provider output equals ground truth.
        let clean = world.oracle_provider(0.0, 0);
        let truth = world.truth("clip_0000").unwrap();
        assert_eq!(clean.headpose("clip_0000", 3).unwrap(), truth.headposes[3]);
        assert_eq!(clean.gaze("clip_0000", 3).unwrap(), truth.gazes[3]);

        // Unknown clip or frame: lookup fails.
        assert!(clean.headpose("clip_9999", 0).is_none());
        assert!(clean.headpose("clip_0000", 999).is_none());

        // Repeated noisy lookups agree (frozen teacher).
        let noisy = world.oracle_provider(0.05, 7);
        let a = noisy.headpose("clip_0000", 3).unwrap();
        let b = noisy.headpose("clip_0000", 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, truth.headposes[3]);
    }

    #[test]
    fn oracle_noise_matches_folded_normal_mean() {
        // Mean |perturbation| of N(0, sigma) is sigma * sqrt(2/pi).
        let cfg = WorldConfig {
            seed: 5,
            n_clips: 50,
            frames_per_clip: 40,
            image_size: 8,
            ..WorldConfig::default()
        };
        let world = rebuild_truth(&cfg).unwrap();
        let sigma = 0.05;
        let noisy = world.oracle_provider(sigma, 13);
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..cfg.n_clips {
            let id = clip_id_for(i);
            let truth = world.truth(&id).unwrap();
            for f in 0..cfg.frames_per_clip {
                let noisy_pose = noisy.headpose(&id, f).unwrap().to_vec6();
                let clean = truth.headposes[f].to_vec6();
                for d in 0..6 {
                    total += (noisy_pose[d] - clean[d]).abs();
                    count += 1;
                }
            }
        }
        assert!(count >= 10_000, "need at least 10k draws, got {count}");
        let mean_abs = total / count as f64;
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean_abs - expected).abs() / expected < 0.10,
            "mean |noise| {mean_abs} vs folded-normal {expected}"
        );
    }

    #[test]
    fn gaze_offset_magnitude_matches_eye_offset() {
        let cfg = small_cfg(33);
        let clip = generate_clip(&cfg, 0).unwrap();
        for i in 0..cfg.frames_per_clip {
            let [ep, ey] = clip.truth.eye_offsets[i];
            if ep.abs() < 1e-9 && ey.abs() < 1e-9 {
                continue;
            }
            let head = clip.truth.headposes[i].orientation_vector();
            let gaze = clip.truth.gazes[i];
            let angle = crate::geometry::angular_error_deg(&head, &gaze).unwrap();
            let offset_deg = (ep * ep + ey * ey).sqrt().to_degrees();
            assert!(
                (angle - offset_deg).abs() < 1.5,
                "angle {angle} vs offset magnitude {offset_deg}"
            );
        }
    }

    #[test]
    fn rendered_pupils_track_eye_offset() {
        // Dark-pixel centroid shift is monotone in the yaw offset.
        let size = 64;
        let base = render_frame(size, 0.0, 0.0, 0.0, 0.0);
        let shifted = render_frame(size, 0.0, 0.0, 0.0, 0.12);
        let centroid = |img: &[u8]| -> (f64, f64) {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut n = 0.0;
            for y in 0..size {
                for x in 0..size {
                    let i = (y * size + x) * 3;
                    let lum = img[i] as f64 * 0.299
                        + img[i + 1] as f64 * 0.587
                        + img[i + 2] as f64 * 0.114;
                    if lum < 50.0 {
                        sx += x as f64;
                        sy += y as f64;
                        n += 1.0;
                    }
                }
            }
            (sx / n, sy / n)
        };
        let (x0, _) = centroid(&base);
        let (x1, _) = centroid(&shifted);
        // Positive yaw offset moves pupils toward negative x.
        assert!(x1 < x0 - 1.0, "pupil centroid {x0} -> {x1}");
    }
}
