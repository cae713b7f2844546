//! The cascaded audio-visual network.
//!
//! Per-frame visual encoder (residual conv stack, shared weights across the 7
//! frames) -> bidirectional recurrent encoder over the chunk -> fusion with
//! the audio embedding -> head-pose head -> gaze head. The gaze head consumes
//! the concatenation of the predicted head pose and the fused embedding, so
//! pose conditions gaze.
//!
//! Modality masking replaces a disabled modality's embedding with zeros and
//! feeds two explicit mask bits to the fusion layers; the disabled encoder is
//! not evaluated at all, so its parameters receive exactly zero gradient.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, Array3, Array5, ArrayD, Ix2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{hex_string, FilterbankFeatures};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seeding::derive_rng;

/// Frames per chunk consumed by the temporal encoder.
pub use crate::data::CHUNK_LEN;

/// Pointwise nonlinearity used throughout the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Visual backbone depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneDepth {
    /// Reduced-depth residual encoder (one block per stage), desk scale.
    Small,
    /// Two residual blocks per stage at conventional widths.
    Full,
}

/// Network dimensions and switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input frame resolution in pixels.
    pub input_resolution: usize,
    /// Per-frame visual feature width (the recurrent encoder's output too).
    pub visual_feat_dim: usize,
    /// Audio embedding width `d`.
    pub audio_embed_dim: usize,
    /// Recurrent hidden width per direction.
    pub temporal_hidden: usize,
    /// Fused embedding width (the representation evaluated downstream).
    pub fused_dim: usize,
    /// Filterbank coefficients per audio frame.
    pub n_filters: usize,
    pub headpose_dim: usize,
    pub gaze_dim: usize,
    pub backbone: BackboneDepth,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_resolution: 64,
            visual_feat_dim: 256,
            audio_embed_dim: 256,
            temporal_hidden: 128,
            fused_dim: 256,
            n_filters: 40,
            headpose_dim: 6,
            gaze_dim: 3,
            backbone: BackboneDepth::Small,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration for gradient checks: 8x8 inputs, width-8
    /// embeddings, smooth activations.
    pub fn tiny() -> Self {
        Self {
            input_resolution: 8,
            visual_feat_dim: 8,
            audio_embed_dim: 8,
            temporal_hidden: 4,
            fused_dim: 8,
            n_filters: 8,
            headpose_dim: 6,
            gaze_dim: 3,
            backbone: BackboneDepth::Small,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_resolution", self.input_resolution),
            ("visual_feat_dim", self.visual_feat_dim),
            ("audio_embed_dim", self.audio_embed_dim),
            ("temporal_hidden", self.temporal_hidden),
            ("fused_dim", self.fused_dim),
            ("n_filters", self.n_filters),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.headpose_dim != 6 {
            return Err(Error::Config("headpose_dim must be 6".into()));
        }
        if self.gaze_dim != 3 {
            return Err(Error::Config("gaze_dim must be 3".into()));
        }
        if self.input_resolution < 8 {
            return Err(Error::Config(
                "input_resolution must be at least 8 pixels".into(),
            ));
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }

    fn visual_widths(&self) -> (usize, Vec<(usize, usize, usize)>) {
        // (stem width, blocks as (cin, cout, stride))
        match self.backbone {
            BackboneDepth::Small => (8, vec![(8, 16, 2), (16, 32, 2), (32, 64, 2)]),
            BackboneDepth::Full => (
                64,
                vec![
                    (64, 64, 1),
                    (64, 64, 1),
                    (64, 128, 2),
                    (128, 128, 1),
                    (128, 256, 2),
                    (256, 256, 1),
                    (256, 512, 2),
                    (512, 512, 1),
                ],
            ),
        }
    }
}

/// Which modalities a forward pass consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub use_visual: bool,
    pub use_audio: bool,
}

impl ModalityMask {
    pub const AV: ModalityMask = ModalityMask {
        use_visual: true,
        use_audio: true,
    };
    pub const VISUAL_ONLY: ModalityMask = ModalityMask {
        use_visual: true,
        use_audio: false,
    };
    pub const AUDIO_ONLY: ModalityMask = ModalityMask {
        use_visual: false,
        use_audio: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.use_visual && !self.use_audio {
            return Err(Error::InvalidMask);
        }
        Ok(())
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.use_visual, self.use_audio) {
            (true, true) => write!(f, "av"),
            (true, false) => write!(f, "visual"),
            (false, true) => write!(f, "audio"),
            (false, false) => write!(f, "none"),
        }
    }
}

/// Predictions plus the fused embedding of one batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, 6]` head-pose predictions (normalized label space).
    pub headpose: Array2<f64>,
    /// `[B, 3]` gaze direction predictions (unnormalized).
    pub gaze: Array2<f64>,
    /// `[B, fused_dim]` embeddings used by probing and k-NN.
    pub embedding: Array2<f64>,
}

/// Named parameter tensors in a fixed deterministic order.
///
/// Names partition the network: `visual.*`, `temporal.*`, `audio.*` and
/// `fusion.*` form the backbone; `head_hp.*` and `head_gaze.*` are the task
/// heads updated by linear probing.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    fn from_entries(entries: Vec<(String, ArrayD<f64>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self { entries, index }
    }

    /// Tensor shapes for a config, without values.
    fn template(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let f = config.visual_feat_dim;
        let d = config.audio_embed_dim;
        let h = config.temporal_hidden;
        let z = config.fused_dim;
        let (stem_w, blocks) = config.visual_widths();

        let mut t: Vec<(String, Vec<usize>)> = Vec::new();
        t.push(("visual.stem.w".into(), vec![stem_w, 3, 3, 3]));
        t.push(("visual.stem.b".into(), vec![stem_w]));
        let mut last = stem_w;
        for (i, &(cin, cout, stride)) in blocks.iter().enumerate() {
            let p = format!("visual.block{}", i + 1);
            t.push((format!("{p}.conv1.w"), vec![cout, cin, 3, 3]));
            t.push((format!("{p}.conv1.b"), vec![cout]));
            t.push((format!("{p}.conv2.w"), vec![cout, cout, 3, 3]));
            t.push((format!("{p}.conv2.b"), vec![cout]));
            if stride != 1 || cin != cout {
                t.push((format!("{p}.skip.w"), vec![cout, cin, 1, 1]));
                t.push((format!("{p}.skip.b"), vec![cout]));
            }
            last = cout;
        }
        t.push(("visual.fc.w".into(), vec![last, f]));
        t.push(("visual.fc.b".into(), vec![f]));
        for dir in ["fwd", "bwd"] {
            t.push((format!("temporal.{dir}.w_ih"), vec![f, 4 * h]));
            t.push((format!("temporal.{dir}.w_hh"), vec![h, 4 * h]));
            t.push((format!("temporal.{dir}.b"), vec![4 * h]));
        }
        t.push(("temporal.proj.w".into(), vec![2 * h, f]));
        t.push(("temporal.proj.b".into(), vec![f]));
        t.push(("audio.fc1.w".into(), vec![config.n_filters, d]));
        t.push(("audio.fc1.b".into(), vec![d]));
        t.push(("audio.fc2.w".into(), vec![d, d]));
        t.push(("audio.fc2.b".into(), vec![d]));
        t.push(("fusion.fc1.w".into(), vec![f + d + 2, z]));
        t.push(("fusion.fc1.b".into(), vec![z]));
        t.push(("fusion.fc2.w".into(), vec![z, z]));
        t.push(("fusion.fc2.b".into(), vec![z]));
        t.push(("head_hp.w".into(), vec![z, config.headpose_dim]));
        t.push(("head_hp.b".into(), vec![config.headpose_dim]));
        t.push(("head_gaze.w".into(), vec![config.headpose_dim + z, config.gaze_dim]));
        t.push(("head_gaze.b".into(), vec![config.gaze_dim]));
        t
    }

    /// Seeded initialization. Weight std scales with fan-in; biases start at
    /// zero except the recurrent forget gate, which starts at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "model-init", 0);
        let h = config.temporal_hidden;
        let entries = Self::template(config)
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".b") && !name.starts_with("temporal") {
                    ArrayD::zeros(ndarray::IxDyn(&shape))
                } else if name.ends_with(".b") {
                    // LSTM bias: forget-gate block starts at 1.
                    let mut b = ArrayD::zeros(ndarray::IxDyn(&shape));
                    for (i, v) in b.iter_mut().enumerate() {
                        if (h..2 * h).contains(&i) {
                            *v = 1.0;
                        }
                    }
                    b
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1] * shape[2] * shape[3]
                    } else {
                        shape[0]
                    };
                    let gain = if shape.len() == 4 { 2.0 } else { 1.0 };
                    let std = (gain / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("valid std");
                    ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| dist.sample(&mut rng))
                };
                (name, value)
            })
            .collect();
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn value_at(&self, idx: usize) -> &ArrayD<f64> {
        &self.entries[idx].1
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.entries[idx].1
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index_of(name).map(|i| self.value_at(i))
    }

    /// Whether a parameter belongs to the frozen backbone partition.
    pub fn is_backbone(name: &str) -> bool {
        !name.starts_with("head_")
    }

    fn hash_subset(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.entries {
            if !filter(name) {
                continue;
            }
            h.update(name.as_bytes());
            h.update((value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &v in value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Cryptographic hash of the backbone parameters.
    pub fn backbone_hash(&self) -> String {
        self.hash_subset(ParamSet::is_backbone)
    }

    /// Cryptographic hash of every parameter.
    pub fn full_hash(&self) -> String {
        self.hash_subset(|_| true)
    }
}

/// The network: config plus current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// A recorded forward pass, ready for backprop.
pub struct ForwardPass {
    pub tape: Tape,
    pub headpose: Var,
    pub gaze: Var,
    pub embedding: Var,
    /// Parameters bound into this graph, as (param index, var), in index order.
    pub bound: Vec<(usize, Var)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Build the forward graph for a batch under a modality mask.
    ///
    /// `visual`: `[B, 7, 3, R, R]` frames, required when the mask uses vision.
    /// `audio`: `[B, n_filters]` mean-pooled normalized filterbank rows,
    /// required when the mask uses audio.
    pub fn forward_graph(
        &self,
        visual: Option<&Array5<f64>>,
        audio: Option<&Array2<f64>>,
        mask: ModalityMask,
    ) -> Result<ForwardPass> {
        mask.validate()?;
        let batch = match (mask.use_visual, visual, mask.use_audio, audio) {
            (true, None, _, _) => {
                return Err(Error::Shape("mask uses vision but no frames given".into()))
            }
            (_, _, true, None) => {
                return Err(Error::Shape("mask uses audio but no features given".into()))
            }
            (true, Some(v), true, Some(a)) => {
                if v.dim().0 != a.nrows() {
                    return Err(Error::Shape(format!(
                        "batch mismatch: {} visual vs {} audio",
                        v.dim().0,
                        a.nrows()
                    )));
                }
                v.dim().0
            }
            (true, Some(v), false, _) => v.dim().0,
            (false, _, true, Some(a)) => a.nrows(),
            (false, _, false, _) => unreachable!("mask validated"),
        };
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }

        let mut b = NetBuilder {
            model: self,
            tape: Tape::new(),
            bound: BTreeMap::new(),
        };

        let z_v = if mask.use_visual {
            let frames = visual.expect("checked above");
            let per_frame = b.visual_encoder(frames)?;
            Some(b.temporal_encoder(per_frame, batch))
        } else {
            None
        };
        let z_a = if mask.use_audio {
            let pooled = audio.expect("checked above");
            if pooled.ncols() != self.config.n_filters {
                return Err(Error::Shape(format!(
                    "audio features have {} coefficients, config expects {}",
                    pooled.ncols(),
                    self.config.n_filters
                )));
            }
            Some(b.audio_encoder(pooled))
        } else {
            None
        };

        let embedding = b.fusion(z_v, z_a, mask, batch);
        let headpose = b.head_hp(embedding);
        let gaze = b.head_gaze(headpose, embedding);

        let bound = b.bound.into_iter().collect();
        Ok(ForwardPass {
            tape: b.tape,
            headpose,
            gaze,
            embedding,
            bound,
        })
    }

    /// Evaluate the network on a batch; deterministic for fixed inputs.
    pub fn forward(
        &self,
        visual: Option<&Array5<f64>>,
        audio: Option<&Array2<f64>>,
        mask: ModalityMask,
    ) -> Result<ForwardOutput> {
        let pass = self.forward_graph(visual, audio, mask)?;
        let out = ForwardOutput {
            headpose: to2(pass.tape.value(pass.headpose)),
            gaze: to2(pass.tape.value(pass.gaze)),
            embedding: to2(pass.tape.value(pass.embedding)),
        };
        for v in out
            .headpose
            .iter()
            .chain(out.gaze.iter())
            .chain(out.embedding.iter())
        {
            if !v.is_finite() {
                return Err(Error::InvalidInput("non-finite forward output".into()));
            }
        }
        Ok(out)
    }

    /// Per-frame visual features: `[B, 7, 3, R, R] -> [B, 7, visual_feat_dim]`.
    pub fn encode_frames(&self, frames: &Array5<f64>) -> Result<Array3<f64>> {
        let (batch, steps, _, _, _) = frames.dim();
        let mut b = self.builder();
        let per_frame = b.visual_encoder(frames)?;
        let flat = to2(b.tape.value(per_frame));
        Ok(flat
            .into_shape_with_order((batch, steps, self.config.visual_feat_dim))
            .expect("reshape"))
    }

    /// Bidirectional temporal encoding of per-frame features:
    /// `[B, 7, F] -> [B, F]`.
    pub fn encode_sequence(&self, per_frame: &Array3<f64>) -> Result<Array2<f64>> {
        let (batch, steps, feat) = per_frame.dim();
        if steps != CHUNK_LEN {
            return Err(Error::Shape(format!(
                "temporal encoder needs {CHUNK_LEN} steps, got {steps}"
            )));
        }
        if feat != self.config.visual_feat_dim {
            return Err(Error::Shape(format!(
                "per-frame features are {feat}-d, config expects {}",
                self.config.visual_feat_dim
            )));
        }
        let mut b = self.builder();
        let flat = per_frame
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((batch * steps, feat))
            .expect("reshape");
        let input = b.tape.constant(flat.into_dyn());
        let z = b.temporal_encoder(input, batch);
        Ok(to2(b.tape.value(z)))
    }

    /// Audio embedding of one feature matrix: mean-pool over frames, then two
    /// dense layers.
    pub fn encode_audio(&self, features: &FilterbankFeatures) -> Result<Array1<f64>> {
        if features.n_frames() == 0 {
            return Err(Error::Shape("empty filterbank features".into()));
        }
        let pooled = features
            .mean_pooled()
            .into_shape_with_order((1, features.n_filters()))
            .expect("reshape");
        let out = self.encode_audio_pooled(&pooled)?;
        Ok(out.row(0).to_owned())
    }

    /// Audio embedding of pre-pooled feature rows: `[B, n_filters] -> [B, d]`.
    pub fn encode_audio_pooled(&self, pooled: &Array2<f64>) -> Result<Array2<f64>> {
        if pooled.ncols() != self.config.n_filters {
            return Err(Error::Shape(format!(
                "pooled features are {}-d, config expects {}",
                pooled.ncols(),
                self.config.n_filters
            )));
        }
        let mut b = self.builder();
        let z = b.audio_encoder(pooled);
        Ok(to2(b.tape.value(z)))
    }

    /// Fuse modality embeddings under a mask: missing sides become zeros.
    pub fn fuse(
        &self,
        z_v: Option<&Array2<f64>>,
        z_a: Option<&Array2<f64>>,
        mask: ModalityMask,
    ) -> Result<Array2<f64>> {
        mask.validate()?;
        let batch = match (mask.use_visual, z_v, mask.use_audio, z_a) {
            (true, None, _, _) => {
                return Err(Error::Shape("mask uses vision but z_v missing".into()))
            }
            (_, _, true, None) => {
                return Err(Error::Shape("mask uses audio but z_a missing".into()))
            }
            (true, Some(v), _, _) => v.nrows(),
            (false, _, true, Some(a)) => a.nrows(),
            _ => unreachable!(),
        };
        let mut b = self.builder();
        let z_v = if mask.use_visual {
            Some(b.tape.constant(z_v.expect("checked").to_owned().into_dyn()))
        } else {
            None
        };
        let z_a = if mask.use_audio {
            Some(b.tape.constant(z_a.expect("checked").to_owned().into_dyn()))
        } else {
            None
        };
        let z = b.fusion(z_v, z_a, mask, batch);
        Ok(to2(b.tape.value(z)))
    }

    /// Head-pose head: `[B, fused] -> [B, 6]`.
    pub fn predict_headpose(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.config.fused_dim {
            return Err(Error::Shape(format!(
                "embedding is {}-d, config expects {}",
                z.ncols(),
                self.config.fused_dim
            )));
        }
        let mut b = self.builder();
        let zv = b.tape.constant(z.to_owned().into_dyn());
        let h = b.head_hp(zv);
        Ok(to2(b.tape.value(h)))
    }

    /// Gaze head on the cascade input `[h' || z']`: `-> [B, 3]`.
    pub fn predict_gaze(&self, h: &Array2<f64>, z: &Array2<f64>) -> Result<Array2<f64>> {
        if h.ncols() != self.config.headpose_dim || z.ncols() != self.config.fused_dim {
            return Err(Error::Shape(format!(
                "cascade inputs are [{}, {}], config expects [{}, {}]",
                h.ncols(),
                z.ncols(),
                self.config.headpose_dim,
                self.config.fused_dim
            )));
        }
        let mut b = self.builder();
        let hv = b.tape.constant(h.to_owned().into_dyn());
        let zv = b.tape.constant(z.to_owned().into_dyn());
        let g = b.head_gaze(hv, zv);
        Ok(to2(b.tape.value(g)))
    }

    fn builder(&self) -> NetBuilder<'_> {
        NetBuilder {
            model: self,
            tape: Tape::new(),
            bound: BTreeMap::new(),
        }
    }
}

fn to2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("2-d tensor")
        .to_owned()
}

struct NetBuilder<'m> {
    model: &'m Model,
    tape: Tape,
    bound: BTreeMap<usize, Var>,
}

impl NetBuilder<'_> {
    fn p(&mut self, name: &str) -> Var {
        let idx = self
            .model
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.bound.get(&idx) {
            return *v;
        }
        let v = self.tape.param(self.model.params.value_at(idx).clone());
        self.bound.insert(idx, v);
        v
    }

    fn act(&mut self, x: Var) -> Var {
        match self.model.config.activation {
            Activation::Relu => self.tape.relu(x),
            Activation::Tanh => self.tape.tanh(x),
        }
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_bias(y, b)
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.tape.conv2d(x, w, stride, pad);
        self.tape.add_channel_bias(y, b)
    }

    /// `[B, 7, 3, R, R] -> [B*7, visual_feat_dim]`, shared weights per frame.
    fn visual_encoder(&mut self, frames: &Array5<f64>) -> Result<Var> {
        let (batch, steps, ch, hgt, wdt) = frames.dim();
        let r = self.model.config.input_resolution;
        if steps != CHUNK_LEN || ch != 3 || hgt != r || wdt != r {
            return Err(Error::Shape(format!(
                "frames must be [B, {CHUNK_LEN}, 3, {r}, {r}], got [{batch}, {steps}, {ch}, {hgt}, {wdt}]"
            )));
        }
        let flat = frames
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((batch * steps, ch, hgt, wdt))
            .expect("reshape");
        let mut x = self.tape.constant(flat.into_dyn());

        x = self.conv(x, "visual.stem", 2, 1);
        x = self.act(x);
        let (_, blocks) = self.model.config.visual_widths();
        for (i, &(cin, cout, stride)) in blocks.iter().enumerate() {
            let prefix = format!("visual.block{}", i + 1);
            let mut y = self.conv(x, &format!("{prefix}.conv1"), stride, 1);
            y = self.act(y);
            y = self.conv(y, &format!("{prefix}.conv2"), 1, 1);
            let skip = if stride != 1 || cin != cout {
                self.conv(x, &format!("{prefix}.skip"), stride, 0)
            } else {
                x
            };
            let sum = self.tape.add(y, skip);
            x = self.act(sum);
        }
        let pooled = self.tape.global_avg_pool(x);
        Ok(self.linear(pooled, "visual.fc"))
    }

    /// One recurrent direction over the 7 steps; returns the final hidden state.
    fn lstm_direction(&mut self, per_frame: Var, batch: usize, dir: &str, reversed: bool) -> Var {
        let h_width = self.model.config.temporal_hidden;
        let w_ih = self.p(&format!("temporal.{dir}.w_ih"));
        let w_hh = self.p(&format!("temporal.{dir}.w_hh"));
        let bias = self.p(&format!("temporal.{dir}.b"));

        let zeros = ndarray::Array2::<f64>::zeros((batch, h_width)).into_dyn();
        let mut h = self.tape.constant(zeros.clone());
        let mut c = self.tape.constant(zeros);

        let order: Vec<usize> = if reversed {
            (0..CHUNK_LEN).rev().collect()
        } else {
            (0..CHUNK_LEN).collect()
        };
        for t in order {
            let rows: Vec<usize> = (0..batch).map(|b| b * CHUNK_LEN + t).collect();
            let x_t = self.tape.gather_rows(per_frame, rows);
            let xz = self.tape.matmul(x_t, w_ih);
            let hz = self.tape.matmul(h, w_hh);
            let pre = self.tape.add(xz, hz);
            let gates = self.tape.add_bias(pre, bias);

            let i_g = self.tape.slice_cols(gates, 0, h_width);
            let f_g = self.tape.slice_cols(gates, h_width, 2 * h_width);
            let g_g = self.tape.slice_cols(gates, 2 * h_width, 3 * h_width);
            let o_g = self.tape.slice_cols(gates, 3 * h_width, 4 * h_width);

            let i_g = self.tape.sigmoid(i_g);
            let f_g = self.tape.sigmoid(f_g);
            let g_g = self.tape.tanh(g_g);
            let o_g = self.tape.sigmoid(o_g);

            let fc = self.tape.mul(f_g, c);
            let ig = self.tape.mul(i_g, g_g);
            c = self.tape.add(fc, ig);
            let ct = self.tape.tanh(c);
            h = self.tape.mul(o_g, ct);
        }
        h
    }

    /// `[B*7, F] -> [B, F]`: both directions' final states, projected.
    fn temporal_encoder(&mut self, per_frame: Var, batch: usize) -> Var {
        let fwd = self.lstm_direction(per_frame, batch, "fwd", false);
        let bwd = self.lstm_direction(per_frame, batch, "bwd", true);
        let cat = self.tape.concat_cols(&[fwd, bwd]);
        self.linear(cat, "temporal.proj")
    }

    /// `[B, n_filters] -> [B, d]`.
    fn audio_encoder(&mut self, pooled: &Array2<f64>) -> Var {
        let x = self.tape.constant(pooled.to_owned().into_dyn());
        let y = self.linear(x, "audio.fc1");
        let y = self.act(y);
        self.linear(y, "audio.fc2")
    }

    /// Concatenate `[z_v || z_a || mask bits]` with zero substitution, then
    /// two dense layers.
    fn fusion(&mut self, z_v: Option<Var>, z_a: Option<Var>, mask: ModalityMask, batch: usize) -> Var {
        let f = self.model.config.visual_feat_dim;
        let d = self.model.config.audio_embed_dim;
        let z_v = z_v.unwrap_or_else(|| {
            self.tape
                .constant(ndarray::Array2::<f64>::zeros((batch, f)).into_dyn())
        });
        let z_a = z_a.unwrap_or_else(|| {
            self.tape
                .constant(ndarray::Array2::<f64>::zeros((batch, d)).into_dyn())
        });
        let mut bits = ndarray::Array2::<f64>::zeros((batch, 2));
        for mut row in bits.rows_mut() {
            row[0] = mask.use_visual as u8 as f64;
            row[1] = mask.use_audio as u8 as f64;
        }
        let bits = self.tape.constant(bits.into_dyn());
        let cat = self.tape.concat_cols(&[z_v, z_a, bits]);
        let y = self.linear(cat, "fusion.fc1");
        let y = self.act(y);
        self.linear(y, "fusion.fc2")
    }

    fn head_hp(&mut self, z: Var) -> Var {
        self.linear(z, "head_hp")
    }

    fn head_gaze(&mut self, h: Var, z: Var) -> Var {
        let cat = self.tape.concat_cols(&[h, z]);
        self.linear(cat, "head_gaze")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array5};
    use rand::Rng as _;

    fn tiny_model(seed: u64) -> Model {
        Model::new(ModelConfig::tiny(), seed).unwrap()
    }

    fn rand_frames(model: &Model, batch: usize, seed: u64) -> Array5<f64> {
        let r = model.config.input_resolution;
        let mut rng = derive_rng(seed, "test-frames", 0);
        Array5::from_shape_fn((batch, CHUNK_LEN, 3, r, r), |_| rng.gen_range(0.0..1.0))
    }

    fn rand_audio(model: &Model, batch: usize, seed: u64) -> Array2<f64> {
        let mut rng = derive_rng(seed, "test-audio", 0);
        Array2::from_shape_fn((batch, model.config.n_filters), |_| {
            rng.gen_range(-1.0..1.0)
        })
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = tiny_model(1);
        let frames = rand_frames(&m, 3, 2);
        let audio = rand_audio(&m, 3, 3);
        let out = m
            .forward(Some(&frames), Some(&audio), ModalityMask::AV)
            .unwrap();
        assert_eq!(out.headpose.dim(), (3, 6));
        assert_eq!(out.gaze.dim(), (3, 3));
        assert_eq!(out.embedding.dim(), (3, 8));

        let again = m
            .forward(Some(&frames), Some(&audio), ModalityMask::AV)
            .unwrap();
        assert_eq!(out.headpose, again.headpose);
        assert_eq!(out.gaze, again.gaze);
        assert_eq!(out.embedding, again.embedding);
    }

    #[test]
    fn identical_frames_share_per_frame_encoding() {
        let m = tiny_model(4);
        let r = m.config.input_resolution;
        let one = Array5::from_shape_fn((1, CHUNK_LEN, 3, r, r), |(_, _, c, y, x)| {
            (c + y + x) as f64 * 0.01
        });
        let enc = m.encode_frames(&one).unwrap();
        let first = enc.index_axis(ndarray::Axis(1), 0).to_owned();
        for t in 1..CHUNK_LEN {
            let row = enc.index_axis(ndarray::Axis(1), t).to_owned();
            assert_eq!(first, row, "frame {t} encoding differs");
        }
    }

    #[test]
    fn sequence_encoder_is_order_sensitive() {
        let m = tiny_model(5);
        let mut rng = derive_rng(5, "seq", 0);
        let feats = Array3::from_shape_fn((2, CHUNK_LEN, m.config.visual_feat_dim), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let fwd = m.encode_sequence(&feats).unwrap();
        let mut rev = feats.clone();
        rev.invert_axis(ndarray::Axis(1));
        let bwd = m.encode_sequence(&rev).unwrap();
        let diff = (&fwd - &bwd).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "reversing frames changed output by only {diff}");
        assert_eq!(fwd.ncols(), m.config.visual_feat_dim);
    }

    #[test]
    fn sequence_encoder_rejects_wrong_step_count() {
        let m = tiny_model(6);
        let feats = Array3::zeros((1, 5, m.config.visual_feat_dim));
        assert!(matches!(m.encode_sequence(&feats), Err(Error::Shape(_))));
    }

    #[test]
    fn audio_encoder_pooling_invariances() {
        let m = tiny_model(7);
        let mut rng = derive_rng(7, "audio-feat", 0);
        let values = Array2::from_shape_fn((6, m.config.n_filters), |_| rng.gen_range(-1.0..1.0));
        let feats = FilterbankFeatures {
            values: values.clone(),
            frame_times: (0..6).map(|i| i as f64).collect(),
        };
        let base = m.encode_audio(&feats).unwrap();
        assert_eq!(base.len(), m.config.audio_embed_dim);

        // Permuting rows leaves the embedding unchanged.
        let permuted = Array2::from_shape_fn(values.dim(), |(i, j)| values[((i * 5 + 2) % 6, j)]);
        let perm = m
            .encode_audio(&FilterbankFeatures {
                values: permuted,
                frame_times: (0..6).map(|i| i as f64).collect(),
            })
            .unwrap();
        for (a, b) in base.iter().zip(perm.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Duplicating every row leaves the embedding unchanged.
        let mut doubled = Array2::zeros((12, m.config.n_filters));
        for i in 0..12 {
            doubled.row_mut(i).assign(&values.row(i / 2));
        }
        let dup = m
            .encode_audio(&FilterbankFeatures {
                values: doubled,
                frame_times: (0..12).map(|i| i as f64).collect(),
            })
            .unwrap();
        for (a, b) in base.iter().zip(dup.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let empty = FilterbankFeatures {
            values: Array2::zeros((0, m.config.n_filters)),
            frame_times: vec![],
        };
        assert!(matches!(m.encode_audio(&empty), Err(Error::Shape(_))));
    }

    #[test]
    fn fusion_ignores_disabled_modality_values() {
        let m = tiny_model(8);
        let z_v = rand_audio(&m, 2, 9); // any [2, 8] matrix works here
        let z_v2 = rand_audio(&m, 2, 10);
        let z_a = rand_audio(&m, 2, 11);

        // Audio-only: changing z_v must not change the output.
        let a1 = m
            .fuse(Some(&z_v), Some(&z_a), ModalityMask::AUDIO_ONLY)
            .unwrap();
        let a2 = m
            .fuse(Some(&z_v2), Some(&z_a), ModalityMask::AUDIO_ONLY)
            .unwrap();
        assert_eq!(a1, a2);

        // Visual-only: changing z_a must not change the output.
        let v1 = m
            .fuse(Some(&z_v), Some(&z_a), ModalityMask::VISUAL_ONLY)
            .unwrap();
        let v2 = m
            .fuse(Some(&z_v), Some(&z_v2), ModalityMask::VISUAL_ONLY)
            .unwrap();
        assert_eq!(v1, v2);

        // Both disabled is invalid.
        let none = ModalityMask {
            use_visual: false,
            use_audio: false,
        };
        assert!(matches!(
            m.fuse(Some(&z_v), Some(&z_a), none),
            Err(Error::InvalidMask)
        ));
    }

    #[test]
    fn cascade_responds_to_headpose_perturbation() {
        let m = tiny_model(12);
        let z = rand_audio(&m, 1, 13);
        let h = m.predict_headpose(&z).unwrap();
        assert_eq!(h.dim(), (1, 6));
        let g = m.predict_gaze(&h, &z).unwrap();
        assert_eq!(g.dim(), (1, 3));

        let mut h2 = h.clone();
        h2[(0, 0)] += 0.5;
        let g2 = m.predict_gaze(&h2, &z).unwrap();
        let delta = (&g - &g2).mapv(f64::abs).sum();
        assert!(delta > 0.0, "gaze head ignores its head-pose input");
    }

    #[test]
    fn modality_paths_all_yield_finite_outputs() {
        let m = tiny_model(14);
        let frames = rand_frames(&m, 2, 15);
        let audio = rand_audio(&m, 2, 16);
        for mask in [
            ModalityMask::AV,
            ModalityMask::AUDIO_ONLY,
            ModalityMask::VISUAL_ONLY,
        ] {
            let out = m.forward(Some(&frames), Some(&audio), mask).unwrap();
            assert_eq!(out.headpose.dim(), (2, 6));
            assert_eq!(out.gaze.dim(), (2, 3));
            assert_eq!(out.embedding.dim(), (2, 8));
        }
        // Audio-only and AV differ on the same chunk.
        let av = m
            .forward(Some(&frames), Some(&audio), ModalityMask::AV)
            .unwrap();
        let ao = m
            .forward(Some(&frames), Some(&audio), ModalityMask::AUDIO_ONLY)
            .unwrap();
        let diff = (&av.headpose - &ao.headpose).mapv(f64::abs).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn dropped_modality_receives_no_gradient() {
        let m = tiny_model(17);
        let audio = rand_audio(&m, 2, 18);
        let pass = m
            .forward_graph(None, Some(&audio), ModalityMask::AUDIO_ONLY)
            .unwrap();
        let target = ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 6]));
        let mut tape = pass.tape;
        let l = tape.mse_loss(pass.headpose, target);
        let grads = tape.backward(l);

        let bound_names: Vec<&str> = pass
            .bound
            .iter()
            .map(|(idx, _)| m.params.name_at(*idx))
            .collect();
        // No visual or temporal parameter may be bound into an audio-only graph.
        assert!(bound_names
            .iter()
            .all(|n| !n.starts_with("visual.") && !n.starts_with("temporal.")));
        // Audio parameters do receive gradient.
        let audio_idx = m.params.index_of("audio.fc1.w").unwrap();
        let var = pass
            .bound
            .iter()
            .find(|(idx, _)| *idx == audio_idx)
            .map(|(_, v)| *v)
            .unwrap();
        assert!(grads.wrt(var).is_some());
    }

    #[test]
    fn param_partition_is_exhaustive_and_disjoint() {
        let m = tiny_model(19);
        let prefixes = ["visual.", "temporal.", "audio.", "fusion.", "head_hp.", "head_gaze."];
        for (name, _) in m.params.iter() {
            let hits = prefixes.iter().filter(|p| name.starts_with(**p)).count();
            assert_eq!(hits, 1, "param {name} matches {hits} partitions");
        }
        let backbone: Vec<&str> = m
            .params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| ParamSet::is_backbone(n))
            .collect();
        assert!(backbone.iter().all(|n| !n.starts_with("head_")));
        assert!(m.params.iter().count() > backbone.len());
    }

    #[test]
    fn full_backbone_builds_and_runs() {
        let config = ModelConfig {
            input_resolution: 32,
            backbone: BackboneDepth::Full,
            ..ModelConfig::tiny()
        };
        let m = Model::new(config, 20).unwrap();
        let frames = rand_frames(&m, 1, 21);
        let audio = rand_audio(&m, 1, 22);
        let out = m
            .forward(Some(&frames), Some(&audio), ModalityMask::AV)
            .unwrap();
        assert_eq!(out.headpose.dim(), (1, 6));
    }
}
