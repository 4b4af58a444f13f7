//! Test-time latent search.
//!
//! Each target image gets its own latent code, initialised from the encoder
//! mean, which is moved by gradient descent on the joint NCC + SSIM loss
//! between the decoded clone and the image. The decoder always sees the
//! target's own Sobel map. Model weights are only read.

use std::path::Path;

use endouda_nn::{Adam, Graph, Tensor};
use ndarray::{Array2, Array4, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, MaskTensor, Range};
use crate::edge::sobel_edge_map;
use crate::losses::{joint_loss_grad, JointLossParams, SsimParams};
use crate::models::{edge_tensor, Noise, SegModel, VaeModel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptOptimizer {
    PlainGradient,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentInit {
    EncodeTarget,
    PriorSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub eta: f64,
    pub iterations: usize,
    /// Images handed to the segmenter per call. Latent searches never share
    /// statistics, so this only bounds memory.
    pub batch_size: usize,
    pub optimizer: AdaptOptimizer,
    pub joint: JointLossParams,
    pub init: LatentInit,
    /// Seeds prior-sample initialisation.
    pub seed: u64,
    /// Worker threads for independent per-image searches; 0 picks the
    /// available parallelism.
    pub threads: usize,
    pub keep_latents: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            iterations: 40,
            batch_size: 32,
            optimizer: AdaptOptimizer::PlainGradient,
            joint: JointLossParams::default(),
            init: LatentInit::EncodeTarget,
            seed: 0,
            threads: 1,
            keep_latents: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        // eta = 0 is allowed as an explicit no-op search
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("adapt.eta", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("adapt.batch_size", "must be positive"));
        }
        self.joint.validate()
    }

    fn worker_count(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

/// Loss history of one image's search. Entry `k` is the loss at the k-th
/// iterate, so the length is `iterations + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationTrace {
    pub joint: Vec<f64>,
    pub ncc: Vec<f64>,
    pub ssim: Vec<f64>,
    pub z_initial: Option<Vec<f32>>,
    pub z_final: Option<Vec<f32>>,
    /// Set when the search hit a non-finite value and stopped early.
    pub failure: Option<String>,
}

impl AdaptationTrace {
    pub fn iterations(&self) -> usize {
        self.joint.len().saturating_sub(1)
    }

    pub fn initial(&self) -> f64 {
        self.joint[0]
    }

    pub fn last(&self) -> f64 {
        *self.joint.last().expect("trace holds iterate 0")
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutput {
    pub z_hat: Array2<f32>,
    /// Signed-range reconstructions from `z_hat`.
    pub clone: ImageTensor,
    pub traces: Vec<AdaptationTrace>,
}

struct ImageResult {
    z: Vec<f32>,
    clone: Tensor,
    trace: AdaptationTrace,
}

fn initial_latent(vae: &VaeModel, x: &ImageTensor, cfg: &AdaptConfig, index: usize) -> Result<Vec<f32>> {
    match cfg.init {
        LatentInit::EncodeTarget => Ok(vae.encode(x, Noise::Zero)?.mu.into_raw_vec_and_offset().0),
        LatentInit::PriorSample => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(index as u64);
            Ok(Tensor::randn(&[vae.config().encoder.latent_dim], 1.0, &mut rng).into_data())
        }
    }
}

/// Runs the search for one signed-range image `[1, C, S, S]`.
fn adapt_one(vae: &VaeModel, x: &ImageTensor, cfg: &AdaptConfig, ssim: &SsimParams, index: usize) -> Result<ImageResult> {
    let d = vae.config().encoder.latent_dim;
    let edge = edge_tensor(&sobel_edge_map(x));
    let target = x.to_f64();
    let mut z = initial_latent(vae, x, cfg, index)?;
    let z_initial = cfg.keep_latents.then(|| z.clone());
    let mut adam = (cfg.optimizer == AdaptOptimizer::Adam).then(|| Adam::new(cfg.eta, 0.9, 0.999));
    let mut trace = AdaptationTrace {
        joint: Vec::with_capacity(cfg.iterations + 1),
        ncc: Vec::with_capacity(cfg.iterations + 1),
        ssim: Vec::with_capacity(cfg.iterations + 1),
        z_initial,
        z_final: None,
        failure: None,
    };
    let mut clone = None;
    for k in 0..=cfg.iterations {
        let mut g = Graph::new();
        g.freeze("decoder.");
        let zi = g.variable(Tensor::new(&[1, d], z.clone())?);
        let ei = g.input(edge.clone());
        let y = vae.decode_graph(&mut g, zi, ei)?;
        let recon = g.value(y);
        let (_, c, h, w) = recon.dims4()?;
        let recon64 = Array4::from_shape_vec((1, c, h, w), recon.data().iter().map(|v| f64::from(*v)).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let loss = joint_loss_grad(recon64.view(), target.view(), &cfg.joint, ssim)?;
        if !loss.value.is_finite() || !recon.all_finite() {
            trace.failure = Some(format!("non-finite joint loss at iteration {k}"));
            break;
        }
        trace.joint.push(loss.value);
        trace.ncc.push(loss.ncc);
        trace.ssim.push(loss.ssim);
        clone = Some(recon.clone());
        if k == cfg.iterations {
            break;
        }
        let seed = Tensor::new(recon.shape(), loss.grad.iter().map(|v| *v as f32).collect())?;
        let grads = g.backward(vec![(y, seed)])?;
        let dz = grads.get(zi).expect("latent requires grad");
        if !dz.all_finite() {
            trace.failure = Some(format!("non-finite latent gradient at iteration {k}"));
            break;
        }
        match adam.as_mut() {
            Some(opt) => opt.step_slice("z", &mut z, dz.data()),
            None => {
                let eta = cfg.eta as f32;
                z.iter_mut().zip(dz.data()).for_each(|(zi, gi)| *zi -= eta * gi);
            }
        }
    }
    if let Some(msg) = &trace.failure {
        log::warn!("latent search for image {index} aborted: {msg}");
    }
    let clone = match clone {
        Some(c) => c,
        None => return Err(Error::NonFinite(format!("image {index}: initial reconstruction is not finite"))),
    };
    trace.z_final = cfg.keep_latents.then(|| z.clone());
    Ok(ImageResult { z, clone, trace })
}

/// Latent search over every image of `x_t`. Searches are independent, so
/// the result for an image does not depend on its batch or thread.
pub fn adapt_latent(x_t: &ImageTensor, vae: &VaeModel, cfg: &AdaptConfig) -> Result<AdaptOutput> {
    cfg.validate()?;
    let cfg_enc = &vae.config().encoder;
    if x_t.size() != cfg_enc.input_size || x_t.channels() != cfg_enc.in_channels {
        return Err(Error::Shape(format!(
            "target images are {}x{}, model expects {}x{}",
            x_t.size(),
            x_t.size(),
            cfg_enc.input_size,
            cfg_enc.input_size
        )));
    }
    let x = x_t.to_signed();
    let ssim = SsimParams::for_range(Range::Signed);
    let n = x.batch();
    let workers = cfg.worker_count().clamp(1, n.max(1));
    let mut results: Vec<Option<Result<ImageResult>>> = (0..n).map(|_| None).collect();
    if workers == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(adapt_one(vae, &x.select(&[i]), cfg, &ssim, i));
        }
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|s| {
            for (w, slots) in results.chunks_mut(chunk).enumerate() {
                let (x, ssim) = (&x, &ssim);
                s.spawn(move || {
                    for (j, slot) in slots.iter_mut().enumerate() {
                        let i = w * chunk + j;
                        *slot = Some(adapt_one(vae, &x.select(&[i]), cfg, ssim, i));
                    }
                });
            }
        });
    }
    let d = cfg_enc.latent_dim;
    let mut z_hat = Array2::<f32>::zeros((n, d));
    let mut clones = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        let r = r.expect("every slot filled")?;
        z_hat.index_axis_mut(Axis(0), i).assign(&ndarray::ArrayView1::from(&r.z));
        clones.push(r.clone);
        traces.push(r.trace);
    }
    let clone = if n == 0 {
        ImageTensor::new(Array4::zeros((0, cfg_enc.in_channels, cfg_enc.input_size, cfg_enc.input_size)), Range::Signed)?
    } else {
        ImageTensor::from_tensor(&Tensor::stack_batch(&clones)?, Range::Signed)?
    };
    Ok(AdaptOutput { z_hat, clone, traces })
}

/// Adapts `x_t` and segments the clones.
pub fn predict_target(x_t: &ImageTensor, vae: &VaeModel, seg: &SegModel, cfg: &AdaptConfig) -> Result<(MaskTensor, AdaptOutput)> {
    let out = adapt_latent(x_t, vae, cfg)?;
    let mut parts = Vec::new();
    let idx: Vec<usize> = (0..out.clone.batch()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        parts.push(seg.segment(&out.clone.select(chunk))?.data().clone());
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let probs = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((MaskTensor::probability(probs)?, out))
}

/// CSV dump with columns `image_id,iteration,joint,ncc,ssim`.
pub fn write_traces(path: &Path, ids: &[String], traces: &[AdaptationTrace]) -> Result<()> {
    if ids.len() != traces.len() {
        return Err(Error::Shape(format!("{} ids for {} traces", ids.len(), traces.len())));
    }
    let mut w = crate::io::csv_writer(path)?;
    w.write_record(["image_id", "iteration", "joint", "ncc", "ssim"])?;
    for (id, t) in ids.iter().zip(traces) {
        for k in 0..t.joint.len() {
            w.write_record([
                id.clone(),
                k.to_string(),
                t.joint[k].to_string(),
                t.ncc[k].to_string(),
                t.ssim[k].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::training::reconstruct;
    use endouda_nn::Module;
    use rand::Rng;

    fn images(n: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_fn((n, 3, 16, 16), |(_, c, y, x)| {
            (0.3 + 0.1 * c as f32 + 0.02 * (x + y) as f32 + 0.05 * rng.random::<f32>()).min(1.0)
        });
        ImageTensor::new(data, Range::Unit).unwrap()
    }

    fn model() -> VaeModel {
        VaeModel::new(&ModelConfig::tiny(16, 8)).unwrap()
    }

    #[test]
    fn zero_iterations_or_zero_step_is_a_no_op() {
        let vae = model();
        let x = images(3, 1);
        let recon = reconstruct(&vae, &x.to_signed()).unwrap();
        let cfg = AdaptConfig {
            iterations: 0,
            ..AdaptConfig::default()
        };
        let out = adapt_latent(&x, &vae, &cfg).unwrap();
        assert_eq!(out.clone, recon);
        assert!(out.traces.iter().all(|t| t.joint.len() == 1));
        let cfg = AdaptConfig {
            eta: 0.0,
            iterations: 5,
            ..AdaptConfig::default()
        };
        let out = adapt_latent(&x, &vae, &cfg).unwrap();
        assert_eq!(out.clone, recon);
        assert!(out.traces.iter().all(|t| t.joint.len() == 6 && t.joint.iter().all(|v| *v == t.joint[0])));
    }

    #[test]
    fn search_lowers_the_loss_and_leaves_weights_alone() {
        let vae = model();
        let before = vae.named_params();
        let x = images(4, 2);
        for optimizer in [AdaptOptimizer::PlainGradient, AdaptOptimizer::Adam] {
            let cfg = AdaptConfig {
                eta: 0.05,
                iterations: 10,
                optimizer,
                keep_latents: true,
                ..AdaptConfig::default()
            };
            let out = adapt_latent(&x, &vae, &cfg).unwrap();
            for t in &out.traces {
                assert_eq!(t.iterations(), 10);
                assert!(t.joint.iter().all(|v| v.is_finite()));
                assert!(t.last() < t.initial(), "{optimizer:?}: {:?}", t.joint);
                assert_ne!(t.z_initial, t.z_final);
            }
        }
        assert_eq!(before, vae.named_params());
    }

    #[test]
    fn batch_and_thread_independence() {
        let vae = model();
        let x = images(5, 3);
        let cfg = AdaptConfig {
            eta: 0.05,
            iterations: 4,
            ..AdaptConfig::default()
        };
        let all = adapt_latent(&x, &vae, &cfg).unwrap();
        let threaded = adapt_latent(&x, &vae, &AdaptConfig { threads: 3, ..cfg.clone() }).unwrap();
        assert_eq!(all.z_hat, threaded.z_hat);
        assert_eq!(all.clone, threaded.clone);
        for i in 0..5 {
            let one = adapt_latent(&x.select(&[i]), &vae, &cfg).unwrap();
            assert_eq!(one.z_hat.row(0), all.z_hat.row(i));
        }
    }

    #[test]
    fn prediction_shapes_and_trace_csv() {
        let cfg_m = ModelConfig::tiny(16, 8);
        let vae = VaeModel::new(&cfg_m).unwrap();
        let seg = SegModel::with_encoder(&cfg_m, vae.encoder().clone()).unwrap();
        let x = images(3, 4);
        let cfg = AdaptConfig {
            iterations: 2,
            batch_size: 2,
            init: LatentInit::PriorSample,
            ..AdaptConfig::default()
        };
        let (p, out) = predict_target(&x, &vae, &seg, &cfg).unwrap();
        assert_eq!(p.data().dim(), (3, 1, 16, 16));
        assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let ids: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        write_traces(&path, &ids, &out.traces).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 3);
        assert!(adapt_latent(&images(1, 0), &vae, &AdaptConfig { eta: -1.0, ..cfg }).is_err());
    }
}
