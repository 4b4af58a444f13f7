//! Shared encoder, edge-conditioned VAE decoder and U-Net segmentation head.
//!
//! All networks take signed-range images. The encoder is held behind an
//! `Arc<RwLock<_>>` so a [`VaeModel`] and a [`SegModel`] can share one
//! parameter store.

use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use endouda_nn::{Conv2d, Graph, Init, Linear, Module, NodeId, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{ImageTensor, MaskTensor, Range};
use crate::edge::EdgeMap;
use crate::{Error, Result};

pub const LEAK: f32 = 0.2;
/// Images pushed through the network per forward pass in batched inference.
const INFER_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    LiteCnn,
    /// Reserved slot for an EfficientNet-B4 feature extractor. No weights
    /// ship with this crate, so construction fails with a dependency error.
    PluggableB4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub stage_channels: Vec<usize>,
    pub latent_dim: usize,
    pub input_size: usize,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::LiteCnn,
            stage_channels: vec![32, 64, 128, 256],
            latent_dim: 64,
            input_size: 64,
            in_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::config("encoder.stage_channels", "need at least one non-zero stage"));
        }
        let factor = 1usize << self.stage_channels.len();
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::config(
                "encoder.input_size",
                format!("{} is not divisible by 2^{}", self.input_size, self.stage_channels.len()),
            ));
        }
        if self.latent_dim < 8 {
            return Err(Error::config("encoder.latent_dim", "must be at least 8"));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::config("encoder.in_channels", "must be 1 or 3"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial side of the deepest feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.num_stages()
    }
}

/// Architecture of both networks; embedded in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Widths of the five decoder convolutions. The first four each follow a
    /// 2x upsample.
    pub decoder_channels: Vec<usize>,
    /// U-Net up-block widths, deepest first; one per encoder stage.
    pub seg_channels: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder_channels: vec![64, 32, 32, 16, 16],
            seg_channels: vec![64, 32, 16, 16],
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.backbone == Backbone::PluggableB4 {
            return Err(Error::Dependency(
                "the pluggable-b4 backbone needs external EfficientNet-B4 weights, which are not bundled; use lite-cnn".into(),
            ));
        }
        if self.decoder_channels.len() != 5 || self.decoder_channels.contains(&0) {
            return Err(Error::config("decoder_channels", "need exactly five non-zero widths"));
        }
        // the decoder upsamples 4 times from its seed map
        if self.encoder.input_size % 16 != 0 {
            return Err(Error::config("encoder.input_size", "decoder needs a multiple of 16"));
        }
        if self.seg_channels.len() != self.encoder.num_stages() || self.seg_channels.contains(&0) {
            return Err(Error::config("seg_channels", "need one non-zero width per encoder stage"));
        }
        Ok(())
    }

    /// Same architecture as `self` but tiny; used by tests and smoke runs.
    pub fn tiny(input_size: usize, latent_dim: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                stage_channels: vec![4, 8, 8, 8],
                latent_dim,
                input_size,
                ..EncoderConfig::default()
            },
            decoder_channels: vec![8, 8, 4, 4, 4],
            seg_channels: vec![8, 8, 4, 4],
            init_seed: 0,
        }
    }
}

fn check_input(cfg: &EncoderConfig, x: &ImageTensor) -> Result<()> {
    if x.size() != cfg.input_size || x.channels() != cfg.in_channels {
        return Err(Error::Shape(format!(
            "model expects {}x{}x{} input, got {}x{}x{}",
            cfg.in_channels,
            cfg.input_size,
            cfg.input_size,
            x.channels(),
            x.size(),
            x.size()
        )));
    }
    Ok(())
}

fn chunks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(INFER_CHUNK).map(move |s| (s, INFER_CHUNK.min(n - s)))
}

fn array2_from(t: &Tensor) -> Array2<f32> {
    let (r, c) = t.dims2().expect("2-d tensor");
    Array2::from_shape_vec((r, c), t.data().to_vec()).expect("consistent shape")
}

fn tensor_from(a: &Array2<f32>) -> Tensor {
    Tensor::new(&[a.nrows(), a.ncols()], a.iter().copied().collect()).expect("consistent shape")
}

pub struct EncoderOutput {
    /// Post-activation feature map of each stage, shallowest first.
    pub skips: Vec<NodeId>,
    pub mu: NodeId,
    pub logvar: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Conv2d>,
    mu: Linear,
    logvar: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Self {
        let mut c_in = config.in_channels;
        let mut stages = Vec::new();
        for (i, &c) in config.stage_channels.iter().enumerate() {
            stages.push(Conv2d::new(
                format!("encoder.stage{i}"),
                c_in,
                c,
                3,
                2,
                1,
                Init::Kaiming { negative_slope: LEAK },
                rng,
            ));
            c_in = c;
        }
        let s = config.bottleneck_size();
        let flat = c_in * s * s;
        let mut logvar = Linear::new("encoder.logvar", flat, config.latent_dim, Init::Xavier, rng);
        // start near unit variance so early samples are not dominated by noise
        logvar.weight = logvar.weight.map(|v| v * 0.1);
        Self {
            config: config.clone(),
            mu: Linear::new("encoder.mu", flat, config.latent_dim, Init::Xavier, rng),
            logvar,
            stages,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<EncoderOutput> {
        let mut h = x;
        let mut skips = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let y = conv.forward(g, h)?;
            h = g.leaky_relu(y, LEAK);
            skips.push(h);
        }
        let (n, c, s, _) = g.value(h).dims4()?;
        let flat = g.reshape(h, &[n, c * s * s])?;
        Ok(EncoderOutput {
            mu: self.mu.forward(g, flat)?,
            logvar: self.logvar.forward(g, flat)?,
            skips,
        })
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stages.iter().for_each(|c| c.visit(f));
        self.mu.visit(f);
        self.logvar.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stages.iter_mut().for_each(|c| c.visit_mut(f));
        self.mu.visit_mut(f);
        self.logvar.visit_mut(f);
    }
}

pub type SharedEncoder = Arc<RwLock<Encoder>>;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeDecoder {
    seed_channels: usize,
    seed_size: usize,
    fc: Linear,
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl VaeDecoder {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let seed_channels = *config.encoder.stage_channels.last().expect("validated");
        let seed_size = config.encoder.input_size / 16;
        let fc = Linear::new(
            "decoder.fc",
            config.encoder.latent_dim,
            seed_channels * seed_size * seed_size,
            Init::Kaiming { negative_slope: LEAK },
            rng,
        );
        let mut convs = Vec::new();
        let mut c_in = seed_channels;
        for (i, &c) in config.decoder_channels.iter().enumerate() {
            convs.push(Conv2d::new(
                format!("decoder.conv{i}"),
                c_in,
                c,
                3,
                1,
                1,
                Init::Kaiming { negative_slope: LEAK },
                rng,
            ));
            c_in = c;
        }
        let out = Conv2d::new("decoder.out", c_in + 1, config.encoder.in_channels, 3, 1, 1, Init::Xavier, rng);
        Self {
            seed_channels,
            seed_size,
            fc,
            convs,
            out,
        }
    }

    /// `z` is `[N, latent]`, `edge` is `[N, 1, S, S]` in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, z: NodeId, edge: NodeId) -> Result<NodeId> {
        let n = g.value(z).dims2()?.0;
        let h = self.fc.forward(g, z)?;
        let h = g.leaky_relu(h, LEAK);
        let mut h = g.reshape(h, &[n, self.seed_channels, self.seed_size, self.seed_size])?;
        for (i, conv) in self.convs.iter().enumerate() {
            if i < 4 {
                h = g.upsample2x(h)?;
            }
            let y = conv.forward(g, h)?;
            h = g.leaky_relu(y, LEAK);
        }
        let e = g.tanh(edge);
        let h = g.concat_channels(h, e)?;
        let y = self.out.forward(g, h)?;
        Ok(g.tanh(y))
    }
}

impl Module for VaeDecoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc.visit(f);
        self.convs.iter().for_each(|c| c.visit(f));
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc.visit_mut(f);
        self.convs.iter_mut().for_each(|c| c.visit_mut(f));
        self.out.visit_mut(f);
    }
}

/// U-Net decoder over the encoder's stage features.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    ups: Vec<Conv2d>,
    out: Conv2d,
}

impl SegHead {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let enc = &config.encoder;
        let stages = enc.num_stages();
        let mut ups = Vec::new();
        let mut c_in = enc.stage_channels[stages - 1];
        for (i, &c) in config.seg_channels.iter().enumerate() {
            // block i upsamples and joins stage (stages - 2 - i), or the raw image last
            let skip = if i + 1 < stages {
                enc.stage_channels[stages - 2 - i]
            } else {
                enc.in_channels
            };
            ups.push(Conv2d::new(
                format!("seg.up{i}"),
                c_in + skip,
                c,
                3,
                1,
                1,
                Init::Kaiming { negative_slope: LEAK },
                rng,
            ));
            c_in = c;
        }
        let out = Conv2d::new("seg.out", c_in, 1, 1, 1, 0, Init::Xavier, rng);
        Self { ups, out }
    }

    /// Returns pre-sigmoid logits `[N, 1, S, S]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, skips: &[NodeId]) -> Result<NodeId> {
        let stages = skips.len();
        let mut h = skips[stages - 1];
        for (i, conv) in self.ups.iter().enumerate() {
            h = g.upsample2x(h)?;
            let skip = if i + 1 < stages { skips[stages - 2 - i] } else { x };
            h = g.concat_channels(h, skip)?;
            let y = conv.forward(g, h)?;
            h = g.leaky_relu(y, LEAK);
        }
        Ok(self.out.forward(g, h)?)
    }
}

impl Module for SegHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ups.iter().for_each(|c| c.visit(f));
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ups.iter_mut().for_each(|c| c.visit_mut(f));
        self.out.visit_mut(f);
    }
}

/// Posterior parameters and a sample for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Array2<f32>,
    pub mu: Array2<f32>,
    pub logvar: Array2<f32>,
}

impl LatentCode {
    pub fn batch(&self) -> usize {
        self.z.nrows()
    }
}

/// Source of the reparameterisation noise.
pub enum Noise<'a> {
    /// ε ≡ 0, so z == mu.
    Zero,
    Sample(&'a mut dyn rand::RngCore),
}

fn shared_read(e: &SharedEncoder) -> RwLockReadGuard<'_, Encoder> {
    e.read().unwrap_or_else(|p| p.into_inner())
}

fn shared_write(e: &SharedEncoder) -> RwLockWriteGuard<'_, Encoder> {
    e.write().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug)]
pub struct VaeModel {
    config: ModelConfig,
    encoder: SharedEncoder,
    decoder: VaeDecoder,
}

impl VaeModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = Encoder::new(&config.encoder, &mut rng);
        let decoder = VaeDecoder::new(config, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder: Arc::new(RwLock::new(encoder)),
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &SharedEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &VaeDecoder {
        &self.decoder
    }

    /// Graph-level encoder pass.
    pub fn encode_graph(&self, g: &mut Graph, x: NodeId) -> Result<EncoderOutput> {
        shared_read(&self.encoder).forward(g, x)
    }

    /// Graph-level decoder pass.
    pub fn decode_graph(&self, g: &mut Graph, z: NodeId, edge: NodeId) -> Result<NodeId> {
        self.decoder.forward(g, z, edge)
    }

    pub fn encode(&self, x: &ImageTensor, noise: Noise<'_>) -> Result<LatentCode> {
        check_input(&self.config.encoder, x)?;
        let x = x.to_signed();
        let d = self.config.encoder.latent_dim;
        let n = x.batch();
        let mut mu = Array2::<f32>::zeros((n, d));
        let mut logvar = Array2::<f32>::zeros((n, d));
        let enc = shared_read(&self.encoder);
        for (start, len) in chunks(n) {
            let mut g = Graph::new();
            let xi = g.input(x.select(&(start..start + len).collect::<Vec<_>>()).to_tensor());
            let out = enc.forward(&mut g, xi)?;
            mu.slice_mut(ndarray::s![start..start + len, ..])
                .assign(&array2_from(g.value(out.mu)));
            logvar
                .slice_mut(ndarray::s![start..start + len, ..])
                .assign(&array2_from(g.value(out.logvar)));
        }
        let z = match noise {
            Noise::Zero => mu.clone(),
            Noise::Sample(rng) => {
                let mut z = mu.clone();
                for (zi, lv) in z.iter_mut().zip(logvar.iter()) {
                    let eps: f32 = rng.sample(StandardNormal);
                    *zi += (0.5 * lv).exp() * eps;
                }
                z
            }
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder produced a non-finite latent code".into()));
        }
        Ok(LatentCode { z, mu, logvar })
    }

    /// Decodes raw latent vectors with an edge map into a signed-range image.
    pub fn decode(&self, z: &Array2<f32>, edge: &EdgeMap) -> Result<ImageTensor> {
        let s = self.config.encoder.input_size;
        if z.ncols() != self.config.encoder.latent_dim {
            return Err(Error::Shape(format!(
                "latent width {} != {}",
                z.ncols(),
                self.config.encoder.latent_dim
            )));
        }
        let (en, _, eh, ew) = edge.data().dim();
        if en != z.nrows() || eh != s || ew != s {
            return Err(Error::Shape(format!(
                "edge map [{en}, 1, {eh}, {ew}] does not match {} codes at {s}x{s}",
                z.nrows()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code contains NaN or infinity".into()));
        }
        let mut parts = Vec::new();
        for (start, len) in chunks(z.nrows()) {
            let idx: Vec<usize> = (start..start + len).collect();
            let mut g = Graph::new();
            let zi = g.input(tensor_from(&z.slice(ndarray::s![start..start + len, ..]).to_owned()));
            let ei = g.input(edge_tensor(&edge.select(&idx)));
            let y = self.decoder.forward(&mut g, zi, ei)?;
            parts.push(g.value(y).clone());
        }
        ImageTensor::from_tensor(&Tensor::stack_batch(&parts)?, Range::Signed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(path, "vae", &self.config, self)
    }

    /// Loads a VAE checkpoint. With `expected`, any architecture difference
    /// is reported as [`Error::ConfigMismatch`].
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let config = checked_config(&ckpt, "vae", expected)?;
        let mut model = Self::new(&config)?;
        load_params(&mut model, &ckpt)?;
        Ok(model)
    }
}

impl Module for VaeModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        shared_read(&self.encoder).visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        shared_write(&self.encoder).visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

pub fn edge_tensor(edge: &EdgeMap) -> Tensor {
    let shape = edge.data().shape().to_vec();
    Tensor::new(&shape, edge.data().iter().copied().collect()).expect("consistent shape")
}

#[derive(Debug)]
pub struct SegModel {
    config: ModelConfig,
    encoder: SharedEncoder,
    head: SegHead,
}

impl SegModel {
    /// Builds a segmentation head on top of an existing (possibly shared)
    /// encoder.
    pub fn with_encoder(config: &ModelConfig, encoder: SharedEncoder) -> Result<Self> {
        config.validate()?;
        if shared_read(&encoder).config() != &config.encoder {
            return Err(Error::ConfigMismatch("shared encoder has a different configuration".into()));
        }
        // offset the stream so head init differs from the encoder's
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            head: SegHead::new(config, &mut rng),
            encoder,
        })
    }

    /// A standalone model with a freshly initialised encoder of its own.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = Encoder::new(&config.encoder, &mut rng);
        Self::with_encoder(config, Arc::new(RwLock::new(encoder)))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &SharedEncoder {
        &self.encoder
    }

    pub fn head(&self) -> &SegHead {
        &self.head
    }

    /// Graph-level pass returning logits.
    pub fn logits_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let out = shared_read(&self.encoder).forward(g, x)?;
        self.head.forward(g, x, &out.skips)
    }

    /// Pre-sigmoid outputs `[N, 1, S, S]`.
    pub fn logits(&self, x: &ImageTensor) -> Result<ndarray::Array4<f32>> {
        check_input(&self.config.encoder, x)?;
        let x = x.to_signed();
        let mut parts = Vec::new();
        for (start, len) in chunks(x.batch()) {
            let mut g = Graph::new();
            let xi = g.input(x.select(&(start..start + len).collect::<Vec<_>>()).to_tensor());
            let logits = self.logits_graph(&mut g, xi)?;
            parts.push(g.value(logits).clone());
        }
        let t = Tensor::stack_batch(&parts)?;
        let (n, c, h, w) = t.dims4()?;
        ndarray::Array4::from_shape_vec((n, c, h, w), t.into_data()).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn segment(&self, x: &ImageTensor) -> Result<MaskTensor> {
        let logits = self.logits(x)?;
        MaskTensor::probability(logits.mapv(endouda_nn::sigmoid))
    }

    /// Saves the head together with the encoder weights it currently sees.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(path, "seg", &self.config, self)
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let config = checked_config(&ckpt, "seg", expected)?;
        let mut model = Self::new(&config)?;
        load_params(&mut model, &ckpt)?;
        Ok(model)
    }

    /// Loads a checkpoint into a model that shares `encoder`; the stored
    /// encoder weights are written into the shared store.
    pub fn load_shared(path: &Path, encoder: SharedEncoder) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let expected_enc = shared_read(&encoder).config().clone();
        let config = checked_config(&ckpt, "seg", None)?;
        if config.encoder != expected_enc {
            return Err(Error::ConfigMismatch("checkpoint encoder differs from the shared encoder".into()));
        }
        let mut model = Self::with_encoder(&config, encoder)?;
        load_params(&mut model, &ckpt)?;
        Ok(model)
    }
}

impl Module for SegModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        shared_read(&self.encoder).visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        shared_write(&self.encoder).visit_mut(f);
        self.head.visit_mut(f);
    }
}

fn save_model(path: &Path, kind: &str, config: &ModelConfig, m: &dyn Module) -> Result<()> {
    Checkpoint {
        kind: kind.into(),
        config: serde_json::to_value(config)?,
        tensors: m.named_params(),
    }
    .save(path)
}

fn checked_config(ckpt: &Checkpoint, kind: &str, expected: Option<&ModelConfig>) -> Result<ModelConfig> {
    if ckpt.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", ckpt.kind)));
    }
    let config: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
    if let Some(want) = expected {
        if want.encoder != config.encoder || want.decoder_channels != config.decoder_channels || want.seg_channels != config.seg_channels {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has encoder {:?} (latent {}), expected {:?} (latent {})",
                config.encoder.stage_channels,
                config.encoder.latent_dim,
                want.encoder.stage_channels,
                want.encoder.latent_dim
            )));
        }
    }
    Ok(config)
}

fn load_params(m: &mut dyn Module, ckpt: &Checkpoint) -> Result<()> {
    let mut problem = None;
    m.visit_mut(&mut |name, t| match ckpt.tensor(name) {
        Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
        Some(src) => {
            problem.get_or_insert(format!("{name}: shape {:?} != {:?}", src.shape(), t.shape()));
        }
        None => {
            problem.get_or_insert(format!("{name}: missing from checkpoint"));
        }
    });
    match problem {
        Some(p) => Err(Error::Checkpoint(p)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::sobel_edge_map;
    use ndarray::Array4;

    fn images(n: usize, size: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_fn((n, 3, size, size), |_| rng.random::<f32>());
        ImageTensor::new(data, Range::Unit).unwrap().to_signed()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.encoder.input_size = 72;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.encoder.latent_dim = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.encoder.backbone = Backbone::PluggableB4;
        assert!(matches!(VaeModel::new(&c), Err(Error::Dependency(_))));
    }

    #[test]
    fn encode_contract() {
        let m = VaeModel::new(&ModelConfig::tiny(16, 8)).unwrap();
        let x = images(4, 16, 1);
        let code = m.encode(&x, Noise::Zero).unwrap();
        assert_eq!(code.z.dim(), (4, 8));
        assert_eq!(code.mu.dim(), (4, 8));
        assert_eq!(code.z, code.mu);
        let a = m.encode(&x, Noise::Sample(&mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        let b = m.encode(&x, Noise::Sample(&mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.z, a.mu);
        assert!(matches!(m.encode(&images(1, 32, 0), Noise::Zero), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_range_shape_and_edge_path() {
        for latent in [8, 24] {
            let m = VaeModel::new(&ModelConfig::tiny(16, latent)).unwrap();
            let x = images(3, 16, 2);
            let code = m.encode(&x, Noise::Zero).unwrap();
            let edge = sobel_edge_map(&x);
            let y = m.decode(&code.z.mapv(|v| v * 50.0), &edge).unwrap();
            assert_eq!(y.data().dim(), (3, 3, 16, 16));
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let y0 = m.decode(&code.z, &edge).unwrap();
            let y1 = m.decode(&code.z, &edge.zeros_like()).unwrap();
            assert_ne!(y0, y1);
        }
        let m = VaeModel::new(&ModelConfig::tiny(16, 8)).unwrap();
        let edge = sobel_edge_map(&images(1, 16, 0));
        let mut z = Array2::zeros((1, 8));
        z[[0, 3]] = f32::NAN;
        assert!(matches!(m.decode(&z, &edge), Err(Error::NonFinite(_))));
    }

    /// Independent f64 forward of the decoder on one latent vector, built
    /// from the raw parameter tensors.
    fn reference_decode(params: &std::collections::HashMap<String, Vec<f64>>, cfg: &ModelConfig, z: &[f64], edge: &[f64]) -> Vec<f64> {
        let leak = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let s0 = cfg.encoder.input_size / 16;
        let c0 = *cfg.encoder.stage_channels.last().unwrap();
        let (w, b) = (&params["decoder.fc.weight"], &params["decoder.fc.bias"]);
        let d = z.len();
        let mut h: Vec<f64> = (0..c0 * s0 * s0)
            .map(|o| leak(b[o] + (0..d).map(|i| w[o * d + i] * z[i]).sum::<f64>()))
            .collect();
        let (mut c, mut s) = (c0, s0);
        let conv = |x: &[f64], c_in: usize, s: usize, name: &str| -> (Vec<f64>, usize) {
            let (w, b) = (&params[&format!("{name}.weight")], &params[&format!("{name}.bias")]);
            let c_out = b.len();
            let mut y = vec![0.0; c_out * s * s];
            for o in 0..c_out {
                for yy in 0..s {
                    for xx in 0..s {
                        let mut acc = b[o];
                        for i in 0..c_in {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy >= 0 && sx >= 0 && (sy as usize) < s && (sx as usize) < s {
                                        acc += w[((o * c_in + i) * 3 + ky) * 3 + kx] * x[(i * s + sy as usize) * s + sx as usize];
                                    }
                                }
                            }
                        }
                        y[(o * s + yy) * s + xx] = acc;
                    }
                }
            }
            (y, c_out)
        };
        for i in 0..5 {
            if i < 4 {
                let s2 = 2 * s;
                h = (0..c * s2 * s2)
                    .map(|k| {
                        let (p, r) = (k / (s2 * s2), k % (s2 * s2));
                        h[(p * s + (r / s2) / 2) * s + (r % s2) / 2]
                    })
                    .collect();
                s = s2;
            }
            let (y, c_out) = conv(&h, c, s, &format!("decoder.conv{i}"));
            h = y.into_iter().map(leak).collect();
            c = c_out;
        }
        h.extend(edge.iter().map(|e| e.tanh()));
        let (y, _) = conv(&h, c + 1, s, "decoder.out");
        y.into_iter().map(f64::tanh).collect()
    }

    #[test]
    fn decoder_gradient_wrt_latent_matches_finite_differences() {
        let cfg = ModelConfig::tiny(16, 8);
        let m = VaeModel::new(&cfg).unwrap();
        let params: std::collections::HashMap<String, Vec<f64>> = m
            .decoder()
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|v| f64::from(*v)).collect()))
            .collect();
        let edge = edge_tensor(&sobel_edge_map(&images(1, 16, 4)));
        let edge64: Vec<f64> = edge.data().iter().map(|v| f64::from(*v)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0 = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let probe = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng);
        let objective = |z: &[f64]| -> f64 {
            reference_decode(&params, &cfg, z, &edge64)
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * f64::from(*b))
                .sum()
        };

        let mut g = Graph::new();
        let zi = g.variable(z0.clone());
        let ei = g.input(edge.clone());
        let y = m.decoder().forward(&mut g, zi, ei).unwrap();
        // the f32 graph forward agrees with the reference
        let z64: Vec<f64> = z0.data().iter().map(|v| f64::from(*v)).collect();
        for (a, b) in g.value(y).data().iter().zip(reference_decode(&params, &cfg, &z64, &edge64)) {
            assert!((f64::from(*a) - b).abs() < 1e-5);
        }
        let grads = g.backward(vec![(y, probe.clone())]).unwrap();
        let analytic = grads.get(zi).unwrap().clone();
        let h = 1e-6;
        for i in 0..8 {
            let (mut zp, mut zm) = (z64.clone(), z64.clone());
            zp[i] += h;
            zm[i] -= h;
            let fd = (objective(&zp) - objective(&zm)) / (2.0 * h);
            let a = f64::from(analytic.data()[i]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-3, "dim {i}: analytic {a} fd {fd} rel {rel}");
        }
    }

    #[test]
    fn segment_contract() {
        let vae = VaeModel::new(&ModelConfig::tiny(16, 8)).unwrap();
        let seg = SegModel::with_encoder(vae.config(), vae.encoder().clone()).unwrap();
        let x = images(2, 16, 5);
        let p = seg.segment(&x).unwrap();
        assert_eq!(p.data().dim(), (2, 1, 16, 16));
        assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(p, seg.segment(&x).unwrap());
        assert!(seg.segment(&images(1, 32, 0)).is_err());
    }

    #[test]
    fn shared_encoder_identity() {
        let mut vae = VaeModel::new(&ModelConfig::tiny(16, 8)).unwrap();
        let seg = SegModel::with_encoder(vae.config(), vae.encoder().clone()).unwrap();
        assert!(Arc::ptr_eq(vae.encoder(), seg.encoder()));
        let x = images(1, 16, 6);
        let before = seg.segment(&x).unwrap();
        vae.visit_mut(&mut |name, t| {
            if name == "encoder.stage0.weight" {
                *t = t.map(|v| v * 1.5);
            }
        });
        let mut seen = None;
        seg.visit(&mut |name, t| {
            if name == "encoder.stage0.weight" {
                seen = Some(t.clone());
            }
        });
        let mut want = None;
        vae.visit(&mut |name, t| {
            if name == "encoder.stage0.weight" {
                want = Some(t.clone());
            }
        });
        assert_eq!(seen, want);
        assert_ne!(before, seg.segment(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            init_seed: 11,
            ..ModelConfig::tiny(16, 8)
        };
        let vae = VaeModel::new(&cfg).unwrap();
        let seg = SegModel::with_encoder(&cfg, vae.encoder().clone()).unwrap();
        let (pv, ps) = (dir.path().join("vae.ckpt"), dir.path().join("seg.ckpt"));
        vae.save(&pv).unwrap();
        seg.save(&ps).unwrap();

        let x = images(2, 16, 7);
        let edge = sobel_edge_map(&x);
        let vae2 = VaeModel::load(&pv, Some(&cfg)).unwrap();
        let c1 = vae.encode(&x, Noise::Zero).unwrap();
        assert_eq!(c1, vae2.encode(&x, Noise::Zero).unwrap());
        assert_eq!(vae.decode(&c1.z, &edge).unwrap(), vae2.decode(&c1.z, &edge).unwrap());
        let seg2 = SegModel::load_shared(&ps, vae2.encoder().clone()).unwrap();
        assert_eq!(seg.segment(&x).unwrap(), seg2.segment(&x).unwrap());

        let other = ModelConfig::tiny(16, 16);
        assert!(matches!(VaeModel::load(&pv, Some(&other)), Err(Error::ConfigMismatch(_))));
        assert!(matches!(SegModel::load(&pv, None), Err(Error::Checkpoint(_))));

        let mut bytes = std::fs::read(&pv).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        std::fs::write(&pv, &bytes).unwrap();
        assert!(VaeModel::load(&pv, None).is_err());
    }

    #[test]
    fn one_step_reaches_every_parameter() {
        let cfg = ModelConfig::tiny(16, 8);
        let vae = VaeModel::new(&cfg).unwrap();
        let seg = SegModel::with_encoder(&cfg, vae.encoder().clone()).unwrap();
        let x = images(1, 16, 8);
        let edge = edge_tensor(&sobel_edge_map(&x));

        let mut g = Graph::new();
        let xi = g.input(x.to_tensor());
        let ei = g.input(edge);
        let enc = vae.encode_graph(&mut g, xi).unwrap();
        let y = vae.decode_graph(&mut g, enc.mu, ei).unwrap();
        let ones = |g: &Graph, id: NodeId| Tensor::full(g.value(id).shape(), 1.0);
        let seeds = vec![(y, ones(&g, y)), (enc.logvar, ones(&g, enc.logvar))];
        let grads = g.backward(seeds).unwrap().param_grads();
        vae.visit(&mut |name, _| {
            let gr = grads.get(name).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(gr.max_abs() > 0.0, "{name} gradient is zero");
        });

        let mut g = Graph::new();
        let xi = g.input(x.to_tensor());
        let logits = seg.logits_graph(&mut g, xi).unwrap();
        let seed = ones(&g, logits);
        let grads = g.backward(vec![(logits, seed)]).unwrap().param_grads();
        seg.visit(&mut |name, _| {
            if name.starts_with("encoder.mu") || name.starts_with("encoder.logvar") {
                return;
            }
            let gr = grads.get(name).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(gr.max_abs() > 0.0, "{name} gradient is zero");
        });
    }
}
