//! Weakly-supervised joint training.
//!
//! The objective is `w_hp * MSE(h, h') + w_pg * (1 - cos(g, g'))` on the
//! chunk's center-frame pseudo labels, with head-pose regression in the
//! normalized label space. Each step samples a modality mask (dropout with
//! both-dropped resampling) so every inference path gets trained.
//!
//! Determinism: weight init, epoch shuffles and per-step masks are all pure
//! functions of `(seed, purpose, index)`, and the optimizer state rides along
//! in checkpoints, so an interrupted run resumes bit-for-bit.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array5, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    apply_norm, extract_features, fit_norm_stats, io::read_wav, FilterbankConfig,
    FilterbankFeatures, NormStats,
};
use crate::autodiff::Gradients;
use crate::data::{
    attach_pseudo_labels, load_frame_u8, normalize_headpose, populate_labels, select_chunks,
    slice_clip, ChunkParams, FrameChunk, LabelNormStats, LabelProvider, Manifest,
    ManifestProvider,
};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, OptimizerState, TrainerCounters};
use crate::model::{ModalityMask, Model, ModelConfig, ParamSet, CHUNK_LEN};
use crate::seeding::derive_rng;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Per-modality drop probability during training.
    pub modality_drop_prob: f64,
    /// `(w_hp, w_pg)` loss weights.
    pub loss_weights: (f64, f64),
    pub grad_clip_norm: f64,
    /// Fraction of clips held out for per-epoch validation metrics.
    pub val_fraction: f64,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Train a single fixed modality path instead of sampling masks.
    pub fixed_mask: Option<ModalityMask>,
    /// Include the head-pose loss term.
    pub use_hp_loss: bool,
    /// Include the pseudo-gaze loss term.
    pub use_pg_loss: bool,
    /// Progress print granularity in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 4,
            seed: 0,
            modality_drop_prob: 0.2,
            loss_weights: (1.0, 1.0),
            grad_clip_norm: 5.0,
            val_fraction: 0.1,
            checkpoint_every: 0,
            fixed_mask: None,
            use_hp_loss: true,
            use_pg_loss: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.modality_drop_prob) {
            return Err(Error::Config(format!(
                "modality_drop_prob must be in [0, 0.5], got {}",
                self.modality_drop_prob
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.loss_weights.0 < 0.0 || self.loss_weights.1 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if !self.use_hp_loss && !self.use_pg_loss {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if let Some(m) = self.fixed_mask {
            m.validate()?;
        }
        Ok(())
    }
}

/// Draw a modality mask: drop audio with probability `p`, independently drop
/// visual with probability `p`; resample if both dropped.
pub fn sample_modality_mask(rng: &mut impl Rng, drop_prob: f64) -> ModalityMask {
    loop {
        let use_audio = !rng.gen_bool(drop_prob);
        let use_visual = !rng.gen_bool(drop_prob);
        if use_audio || use_visual {
            return ModalityMask {
                use_visual,
                use_audio,
            };
        }
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let zeros: Vec<ArrayD<f64>> = params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_state(lr: f64, state: OptimizerState) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: state.t,
            m: state.m,
            v: state.v,
        }
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// One update. `grads` aligns with the parameter order; `None` means the
    /// parameter was outside the step's graph and keeps a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<ArrayD<f64>>]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..params.len() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            match &grads[idx] {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    });
                    ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|m| self.beta1 * m);
                    v.mapv_inplace(|v| self.beta2 * v);
                }
            }
            let p = params.value_at_mut(idx);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / b1t;
                let v_hat = v / b2t;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        }
    }
}

/// Scale gradients in place so their global norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<ArrayD<f64>>], clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Preprocessed chunks ready for batching: cached frames, normalized pooled
/// audio features and label statistics.
pub struct ChunkDataset {
    pub chunks: Vec<FrameChunk>,
    frames: Vec<Option<Vec<Vec<u8>>>>,
    audio_pooled: Vec<Option<Array1<f64>>>,
    pub label_stats: LabelNormStats,
    pub audio_stats: NormStats,
    pub resolution: usize,
    pub warnings: Vec<String>,
}

impl ChunkDataset {
    /// Assemble the dataset from a manifest.
    ///
    /// Labels come from `provider` when given, otherwise from the manifest's
    /// inline pseudo-label fields. Statistics are fitted here unless
    /// `stats` carries the training-time values (mandatory for evaluation on
    /// held-out data).
    pub fn build(
        manifest: &Manifest,
        model_cfg: &ModelConfig,
        fb_cfg: &FilterbankConfig,
        chunk_params: &ChunkParams,
        need_visual: bool,
        stats: Option<(LabelNormStats, NormStats)>,
        provider: Option<&dyn LabelProvider>,
    ) -> Result<ChunkDataset> {
        if model_cfg.n_filters != fb_cfg.n_filters {
            return Err(Error::Config(format!(
                "model expects {} filters but the front-end produces {}",
                model_cfg.n_filters, fb_cfg.n_filters
            )));
        }
        let mut warnings = manifest.warnings.clone();

        // Resolve per-frame labels.
        let mut labeled: Vec<crate::data::ManifestEntry> = Vec::new();
        for entry in &manifest.entries {
            if !entry.chunk_eligible() {
                continue;
            }
            let populated = match provider {
                Some(p) => match populate_labels(entry, p) {
                    Ok(e) => e,
                    Err(err) => {
                        warnings.push(format!(
                            "clip '{}' skipped: {err}",
                            entry.clip_id
                        ));
                        continue;
                    }
                },
                None => {
                    if entry.pseudo_headpose.is_none() {
                        warnings.push(format!(
                            "clip '{}' skipped: no head-pose labels",
                            entry.clip_id
                        ));
                        continue;
                    }
                    entry.clone()
                }
            };
            labeled.push(populated);
        }

        let label_stats = match &stats {
            Some((l, _)) => l.clone(),
            None => fit_label_norm(&labeled)?,
        };

        // Stability filter, then canonical label attachment.
        let labeled_manifest = Manifest {
            entries: labeled.clone(),
            warnings: Vec::new(),
            root: manifest.root.clone(),
        };
        let inline = ManifestProvider::new(&labeled_manifest);
        let hp_provider: &dyn LabelProvider = provider.unwrap_or(&inline);

        let mut chunks = Vec::new();
        for entry in &labeled {
            let selected = select_chunks(entry, &manifest.root, &label_stats, chunk_params)?;
            for chunk in selected {
                match attach_pseudo_labels(&chunk, hp_provider, hp_provider) {
                    Ok(c) => chunks.push(c),
                    Err(err) => warnings.push(format!(
                        "chunk {} dropped: {err}",
                        chunk.sample_id()
                    )),
                }
            }
        }

        // Audio features: decode each clip once, slice per chunk.
        let mut raw_features: Vec<Option<FilterbankFeatures>> = Vec::with_capacity(chunks.len());
        let mut decoded: std::collections::BTreeMap<PathBuf, crate::audio::AudioClip> =
            Default::default();
        for chunk in &chunks {
            if !decoded.contains_key(&chunk.audio_path) {
                match read_wav(&chunk.audio_path) {
                    Ok(clip) => {
                        decoded.insert(chunk.audio_path.clone(), clip);
                    }
                    Err(err) => {
                        warnings.push(format!(
                            "audio unavailable for {}: {err}",
                            chunk.sample_id()
                        ));
                    }
                }
            }
            let feats = decoded.get(&chunk.audio_path).and_then(|clip| {
                match slice_clip(clip, chunk.audio_span, chunk.fps)
                    .and_then(|seg| extract_features(&seg, fb_cfg))
                {
                    Ok(f) => Some(f),
                    Err(err) => {
                        warnings.push(format!(
                            "audio features failed for {}: {err}",
                            chunk.sample_id()
                        ));
                        None
                    }
                }
            });
            raw_features.push(feats);
        }

        let audio_stats = match &stats {
            Some((_, a)) => a.clone(),
            None => {
                let present: Vec<FilterbankFeatures> =
                    raw_features.iter().flatten().cloned().collect();
                if present.is_empty() {
                    // No usable audio anywhere; keep harmless identity stats.
                    NormStats {
                        mean: vec![0.0; fb_cfg.n_filters],
                        std: vec![1.0; fb_cfg.n_filters],
                    }
                } else {
                    fit_norm_stats(&present)?
                }
            }
        };

        let audio_pooled: Vec<Option<Array1<f64>>> = raw_features
            .iter()
            .map(|f| {
                f.as_ref()
                    .map(|feats| apply_norm(feats, &audio_stats).mean_pooled())
            })
            .collect();

        // Visual frames, cached as bytes.
        let resolution = model_cfg.input_resolution;
        let frames: Vec<Option<Vec<Vec<u8>>>> = if need_visual {
            chunks
                .iter()
                .map(|chunk| {
                    let mut loaded = Vec::with_capacity(CHUNK_LEN);
                    for p in &chunk.frame_paths {
                        match load_frame_u8(p, resolution) {
                            Ok(f) => loaded.push(f),
                            Err(err) => {
                                warnings.push(format!(
                                    "frame unavailable for {}: {err}",
                                    chunk.sample_id()
                                ));
                                return None;
                            }
                        }
                    }
                    Some(loaded)
                })
                .collect()
        } else {
            vec![None; chunks.len()]
        };

        Ok(ChunkDataset {
            chunks,
            frames,
            audio_pooled,
            label_stats,
            audio_stats,
            resolution,
            warnings,
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Indices of chunks that can serve the given mask.
    pub fn eligible_indices(&self, mask: ModalityMask) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                (!mask.use_visual || self.frames[i].is_some())
                    && (!mask.use_audio || self.audio_pooled[i].is_some())
            })
            .collect()
    }

    pub fn has_visual(&self, idx: usize) -> bool {
        self.frames[idx].is_some()
    }

    pub fn has_audio(&self, idx: usize) -> bool {
        self.audio_pooled[idx].is_some()
    }

    /// `[B, 7, 3, R, R]` frame tensor for a batch.
    pub fn visual_batch(&self, idxs: &[usize]) -> Result<Array5<f64>> {
        let r = self.resolution;
        let mut out = Array5::zeros((idxs.len(), CHUNK_LEN, 3, r, r));
        for (bi, &i) in idxs.iter().enumerate() {
            let frames = self.frames[i].as_ref().ok_or_else(|| {
                Error::Shape(format!("chunk {} has no cached frames", self.chunks[i].sample_id()))
            })?;
            for (t, frame) in frames.iter().enumerate() {
                for c in 0..3 {
                    for y in 0..r {
                        for x in 0..r {
                            out[(bi, t, c, y, x)] =
                                frame[c * r * r + y * r + x] as f64 / 255.0;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// `[B, n_filters]` pooled audio feature rows for a batch.
    pub fn audio_batch(&self, idxs: &[usize]) -> Result<Array2<f64>> {
        let n = self
            .audio_pooled
            .iter()
            .flatten()
            .next()
            .map(|a| a.len())
            .unwrap_or(0);
        let mut out = Array2::zeros((idxs.len(), n));
        for (bi, &i) in idxs.iter().enumerate() {
            let pooled = self.audio_pooled[i].as_ref().ok_or_else(|| {
                Error::Shape(format!("chunk {} has no audio features", self.chunks[i].sample_id()))
            })?;
            out.row_mut(bi).assign(pooled);
        }
        Ok(out)
    }

    /// Normalized head-pose targets `[B, 6]` and gaze targets `[B, 3]`.
    pub fn target_batches(&self, idxs: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let mut hp = Array2::zeros((idxs.len(), 6));
        let mut gaze = Array2::zeros((idxs.len(), 3));
        for (bi, &i) in idxs.iter().enumerate() {
            let c = &self.chunks[i];
            let n = normalize_headpose(&c.center_headpose, &self.label_stats);
            for d in 0..6 {
                hp[(bi, d)] = n[d];
            }
            for d in 0..3 {
                gaze[(bi, d)] = c.center_gaze.direction[d];
            }
        }
        (hp, gaze)
    }
}

/// Losses of one step. Disabled terms are absent, not zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_hp: Option<f64>,
    pub l_pg: Option<f64>,
    pub l_total: f64,
    pub grad_norm: f64,
}

/// One optimization step on a batch under a fixed mask.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    dataset: &ChunkDataset,
    batch: &[usize],
    mask: ModalityMask,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let visual = if mask.use_visual {
        Some(dataset.visual_batch(batch)?)
    } else {
        None
    };
    let audio = if mask.use_audio {
        Some(dataset.audio_batch(batch)?)
    } else {
        None
    };
    let (hp_targets, gaze_targets) = dataset.target_batches(batch);

    let mut pass = model.forward_graph(visual.as_ref(), audio.as_ref(), mask)?;
    let (w_hp, w_pg) = cfg.loss_weights;
    let mut terms = Vec::new();
    let l_hp = if cfg.use_hp_loss {
        let l = pass.tape.mse_loss(pass.headpose, hp_targets.into_dyn());
        terms.push((l, w_hp));
        Some(pass.tape.scalar(l))
    } else {
        None
    };
    let l_pg = if cfg.use_pg_loss {
        let l = pass.tape.cosine_loss(pass.gaze, gaze_targets)?;
        terms.push((l, w_pg));
        Some(pass.tape.scalar(l))
    } else {
        None
    };
    let total = pass.tape.weighted_sum(&terms);
    let l_total = pass.tape.scalar(total);
    if !l_total.is_finite() {
        let ids: Vec<String> = batch
            .iter()
            .map(|&i| dataset.chunks[i].sample_id())
            .collect();
        return Err(Error::NonFiniteLoss {
            step: step as usize,
            mask: mask.to_string(),
            batch_ids: ids.join(","),
        });
    }

    let grads = pass.tape.backward(total);
    let mut aligned = collect_param_grads(model, &pass.bound, &grads);
    let grad_norm = clip_global_norm(&mut aligned, cfg.grad_clip_norm);
    adam.step(&mut model.params, &aligned);

    Ok(StepLosses {
        l_hp,
        l_pg,
        l_total,
        grad_norm,
    })
}

/// Map tape gradients back onto the parameter order.
pub fn collect_param_grads(
    model: &Model,
    bound: &[(usize, crate::autodiff::Var)],
    grads: &Gradients,
) -> Vec<Option<ArrayD<f64>>> {
    let mut out = vec![None; model.params.len()];
    for (idx, var) in bound {
        out[*idx] = grads.wrt(*var).cloned();
    }
    out
}

/// Cumulative mask counts for the log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskHistogram {
    pub av: u64,
    pub audio: u64,
    pub visual: u64,
}

impl MaskHistogram {
    fn record(&mut self, mask: ModalityMask) {
        match (mask.use_visual, mask.use_audio) {
            (true, true) => self.av += 1,
            (false, true) => self.audio += 1,
            (true, false) => self.visual += 1,
            (false, false) => unreachable!("mask invariant"),
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: u64,
        mask: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        l_hp: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        l_pg: Option<f64>,
        l_total: f64,
        grad_norm: f64,
        mask_hist: MaskHistogram,
    },
    Epoch {
        epoch: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        val_l_hp: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        val_l_pg: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        val_l_total: Option<f64>,
    },
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub steps: u64,
    pub warnings: Vec<String>,
}

/// Deterministic split of clip ids into (train, val).
fn split_clips(dataset: &ChunkDataset, seed: u64, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let clip_ids: BTreeSet<&str> = dataset.chunks.iter().map(|c| c.clip_id.as_str()).collect();
    let mut ids: Vec<&str> = clip_ids.into_iter().collect();
    let mut rng = derive_rng(seed, "val-split", 0);
    // Fisher-Yates with the derived stream.
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let n_val = ((ids.len() as f64) * val_fraction).floor() as usize;
    let val_set: BTreeSet<&str> = ids.iter().take(n_val).copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, c) in dataset.chunks.iter().enumerate() {
        if val_set.contains(c.clip_id.as_str()) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

fn mask_for_step(cfg: &TrainConfig, step: u64) -> ModalityMask {
    match cfg.fixed_mask {
        Some(m) => m,
        None => {
            let mut rng = derive_rng(cfg.seed, "mask", step);
            sample_modality_mask(&mut rng, cfg.modality_drop_prob)
        }
    }
}

/// Mean validation losses under the deterministic evaluation mask.
fn validation_losses(
    model: &Model,
    dataset: &ChunkDataset,
    idxs: &[usize],
    cfg: &TrainConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    let mask = cfg.fixed_mask.unwrap_or(ModalityMask::AV);
    let eligible: Vec<usize> = idxs
        .iter()
        .copied()
        .filter(|&i| {
            (!mask.use_visual || dataset.has_visual(i))
                && (!mask.use_audio || dataset.has_audio(i))
        })
        .collect();
    if eligible.is_empty() {
        return Ok((None, None));
    }
    let mut sum_hp = 0.0;
    let mut sum_pg = 0.0;
    let mut n = 0usize;
    for batch in eligible.chunks(cfg.batch_size.max(1)) {
        let visual = if mask.use_visual {
            Some(dataset.visual_batch(batch)?)
        } else {
            None
        };
        let audio = if mask.use_audio {
            Some(dataset.audio_batch(batch)?)
        } else {
            None
        };
        let out = model.forward(visual.as_ref(), audio.as_ref(), mask)?;
        let (hp_t, gaze_t) = dataset.target_batches(batch);
        for b in 0..batch.len() {
            let mut hp = 0.0;
            for d in 0..6 {
                let diff = out.headpose[(b, d)] - hp_t[(b, d)];
                hp += diff * diff;
            }
            sum_hp += hp / 6.0;
            let pred = crate::geometry::GazeVector::new([
                out.gaze[(b, 0)],
                out.gaze[(b, 1)],
                out.gaze[(b, 2)],
            ]);
            let target = crate::geometry::GazeVector::new([
                gaze_t[(b, 0)],
                gaze_t[(b, 1)],
                gaze_t[(b, 2)],
            ]);
            sum_pg += crate::geometry::gaze_loss(&pred, &target)?;
            n += 1;
        }
    }
    Ok((
        cfg.use_hp_loss.then_some(sum_hp / n as f64),
        cfg.use_pg_loss.then_some(sum_pg / n as f64),
    ))
}

/// Run (or resume) training and write checkpoints plus a JSON-lines log.
///
/// The dataset must already be built with statistics consistent with
/// `resume` when resuming.
pub fn train(
    dataset: &ChunkDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let train_mask_needs = cfg.fixed_mask.unwrap_or(ModalityMask::AV);
    let mut eligible = dataset.eligible_indices(train_mask_needs);
    if eligible.is_empty() {
        return Err(Error::Config(
            "no eligible chunks: nothing to train on".into(),
        ));
    }
    let (train_idx, val_idx) = if cfg.val_fraction > 0.0 {
        let (t, v) = split_clips(dataset, cfg.seed, cfg.val_fraction);
        let tset: BTreeSet<usize> = t.into_iter().collect();
        let vset: BTreeSet<usize> = v.into_iter().collect();
        eligible.retain(|i| tset.contains(i) || vset.contains(i));
        (
            eligible
                .iter()
                .copied()
                .filter(|i| tset.contains(i))
                .collect::<Vec<_>>(),
            eligible
                .iter()
                .copied()
                .filter(|i| vset.contains(i))
                .collect::<Vec<_>>(),
        )
    } else {
        (eligible, Vec::new())
    };
    if train_idx.is_empty() {
        return Err(Error::Config(
            "validation split consumed every chunk".into(),
        ));
    }

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let (mut model, mut adam, start_epoch, mut step) = match resume {
        Some(ckpt) => {
            if ckpt.config != *model_cfg {
                return Err(Error::Config(
                    "resume checkpoint config differs from the requested model config".into(),
                ));
            }
            let counters = ckpt.trainer.unwrap_or(TrainerCounters { epoch: 0, step: 0 });
            let adam = match ckpt.optimizer.clone() {
                Some(state) => Adam::from_state(cfg.learning_rate, state),
                None => Adam::new(cfg.learning_rate, &ckpt.params),
            };
            (ckpt.model(), adam, counters.epoch, counters.step)
        }
        None => {
            let model = Model::new(model_cfg.clone(), cfg.seed)?;
            let adam = Adam::new(cfg.learning_rate, &model.params);
            (model, adam, 0, 0)
        }
    };

    // Rebuild the cumulative mask histogram for the log (masks are a pure
    // function of the step index).
    let mut hist = MaskHistogram::default();
    for s in 0..step {
        hist.record(mask_for_step(cfg, s));
    }

    let log_path = out_dir.join("trainlog.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    for epoch in start_epoch..cfg.epochs as u64 {
        // Seeded epoch shuffle; batch order is a pure function of the seed.
        let mut order = train_idx.clone();
        let mut rng = derive_rng(cfg.seed, "shuffle", epoch);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mask = mask_for_step(cfg, step);
            hist.record(mask);
            // Under sampled masks some chunks may lack a modality; batches are
            // pre-filtered to fully-loaded chunks, so use them as-is.
            let losses = train_step(&mut model, &mut adam, dataset, batch, mask, cfg, step)?;
            let record = LogRecord::Step {
                step,
                epoch,
                mask: mask.to_string(),
                l_hp: losses.l_hp,
                l_pg: losses.l_pg,
                l_total: losses.l_total,
                grad_norm: losses.grad_norm,
                mask_hist: hist,
            };
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
            if cfg.log_every > 0 && step % cfg.log_every as u64 == 0 {
                println!(
                    "step {step} epoch {epoch} mask {mask} l_total {:.6}",
                    losses.l_total
                );
            }
            step += 1;
        }

        let (val_hp, val_pg) = if val_idx.is_empty() {
            (None, None)
        } else {
            validation_losses(&model, dataset, &val_idx, cfg)?
        };
        let record = LogRecord::Epoch {
            epoch,
            val_l_hp: val_hp,
            val_l_pg: val_pg,
            val_l_total: match (val_hp, val_pg) {
                (None, None) => None,
                (h, p) => Some(
                    cfg.loss_weights.0 * h.unwrap_or(0.0) + cfg.loss_weights.1 * p.unwrap_or(0.0),
                ),
            },
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;

        if cfg.checkpoint_every > 0 && ((epoch + 1) as usize) % cfg.checkpoint_every == 0 {
            let ckpt = snapshot(&model, cfg, dataset, epoch + 1, step, &adam);
            ckpt.save(&out_dir.join(format!("ckpt_epoch_{:04}.bin", epoch + 1)))?;
        }
    }
    log.flush()?;

    debug_assert_eq!(
        step.max(start_epoch * steps_per_epoch),
        step,
        "step counter consistent"
    );

    let final_ckpt = snapshot(&model, cfg, dataset, cfg.epochs as u64, step, &adam);
    let checkpoint_path = out_dir.join("ckpt_final.bin");
    final_ckpt.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        checkpoint: final_ckpt,
        checkpoint_path,
        log_path,
        steps: step,
        warnings: dataset.warnings.clone(),
    })
}

fn snapshot(
    model: &Model,
    cfg: &TrainConfig,
    dataset: &ChunkDataset,
    epoch: u64,
    step: u64,
    adam: &Adam,
) -> Checkpoint {
    Checkpoint {
        config: model.config.clone(),
        seed: cfg.seed,
        params: model.params.clone(),
        label_stats: Some(dataset.label_stats.clone()),
        audio_stats: Some(dataset.audio_stats.clone()),
        trainer: Some(TrainerCounters { epoch, step }),
        optimizer: Some(adam.state()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::derive_rng;

    #[test]
    fn mask_sampling_properties() {
        // p = 0: always both.
        let mut rng = derive_rng(1, "t", 0);
        for _ in 0..100 {
            let m = sample_modality_mask(&mut rng, 0.0);
            assert_eq!(m, ModalityMask::AV);
        }

        // p = 0.5: single-modality masks appear with sensible frequency and
        // both-false never occurs.
        let mut rng = derive_rng(2, "t", 0);
        let mut audio_only = 0;
        let mut visual_only = 0;
        let n = 10_000;
        for _ in 0..n {
            let m = sample_modality_mask(&mut rng, 0.5);
            assert!(m.use_audio || m.use_visual);
            match (m.use_visual, m.use_audio) {
                (false, true) => audio_only += 1,
                (true, false) => visual_only += 1,
                _ => {}
            }
        }
        // Under resampling, P(audio-only) = P(visual-only) = 1/3.
        for count in [audio_only, visual_only] {
            let f = count as f64 / n as f64;
            assert!((0.15..=0.45).contains(&f), "single-mask frequency {f}");
        }
    }

    #[test]
    fn adam_moves_parameters_toward_gradient_descent() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg, 3).unwrap();
        let mut params = model.params.clone();
        let mut adam = Adam::new(0.01, &params);
        let grads: Vec<Option<ArrayD<f64>>> = params
            .iter()
            .map(|(_, v)| Some(ArrayD::from_elem(v.raw_dim(), 1.0)))
            .collect();
        let before = params.value_at(0).clone();
        adam.step(&mut params, &grads);
        let after = params.value_at(0);
        // Positive gradient decreases every component.
        for (b, a) in before.iter().zip(after.iter()) {
            assert!(a < b);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = vec![
            Some(ArrayD::from_elem(ndarray::IxDyn(&[4]), 3.0)),
            Some(ArrayD::from_elem(ndarray::IxDyn(&[4]), -4.0)),
            None,
        ];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 10.0).abs() < 1e-12);
        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);

        // Below the clip, gradients are untouched.
        let mut small = vec![Some(ArrayD::from_elem(ndarray::IxDyn(&[2]), 0.1))];
        let norm = clip_global_norm(&mut small, 5.0);
        assert!(norm < 5.0);
        assert_eq!(small[0].as_ref().unwrap()[[0]], 0.1);
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.modality_drop_prob = 0.6;
        assert!(cfg.validate().is_err());
        cfg.modality_drop_prob = 0.2;
        cfg.use_hp_loss = false;
        cfg.use_pg_loss = false;
        assert!(cfg.validate().is_err());
    }
}
