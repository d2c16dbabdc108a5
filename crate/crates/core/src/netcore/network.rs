//! The shared per-channel ConvNet, RoI pooling, concatenation and the dense
//! classifier head.

use std::collections::BTreeMap;

use rand::Rng;

use super::layers::{self, BnCache, Mode};
use super::tensor::{Real, Tensor};
use crate::error::{NtlError, Result};
use crate::profile::{BBox, SuperImage, CHANNELS, GRID};

/// Output widths of the nine convolutions; the last two are 1×1.
pub const TABLE_WIDTHS: [usize; 9] = [32, 32, 64, 64, 128, 128, 256, 128, 64];
const POOL_AFTER: [usize; 3] = [1, 3, 5];
const CONV_KERNEL: [usize; 9] = [3, 3, 3, 3, 3, 3, 3, 1, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_size: usize,
    pub channels: usize,
    pub widths: [usize; 9],
    pub roi_bins: usize,
    pub noise_sigma: f64,
    pub dropout: f64,
    pub lrelu_alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub classes: usize,
    /// When false every channel pools over the whole feature map.
    pub roi_pooling: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: GRID,
            channels: CHANNELS,
            widths: TABLE_WIDTHS,
            roi_bins: 3,
            noise_sigma: 0.15,
            dropout: 0.5,
            lrelu_alpha: 0.1,
            bn_momentum: 0.99,
            bn_eps: 1e-5,
            classes: 2,
            roi_pooling: true,
        }
    }
}

impl NetConfig {
    /// Every width divided by `div` (at least 1).
    pub fn scaled_widths(mut self, div: usize) -> Self {
        for w in self.widths.iter_mut() {
            *w = (*w / div).max(1);
        }
        self
    }

    /// Spatial size at the input and after each pooling stage.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut t = vec![self.input_size];
        for _ in POOL_AFTER {
            t.push(t.last().unwrap() / 2);
        }
        t
    }

    pub fn feature_map_size(&self) -> usize {
        *self.spatial_trace().last().unwrap()
    }

    pub fn embedding_dim(&self) -> usize {
        self.channels * self.widths[8] * self.roi_bins * self.roi_bins
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LayerSpec {
    Noise,
    Conv { idx: usize, k: usize },
    LRelu,
    Bn { idx: usize },
    Pool,
    Dropout,
}

enum Cache<T> {
    Pass,
    Conv(Tensor<T>),
    LRelu(Tensor<T>),
    Bn(BnCache<T>),
    Pool { argmax: Vec<u32>, in_shape: Vec<usize> },
    Mask(Vec<T>),
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

pub type Grads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Real> ParamSet<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| NtlError::ParamMismatch(format!("missing tensor `{name}`")))
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|(k, v)| (k.clone(), v.zeros_like())).collect()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    /// Fails unless both sets hold the same names with the same shapes.
    pub fn check_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        for (a, b) in [(&self.params, &other.params), (&self.buffers, &other.buffers)] {
            if a.len() != b.len() {
                return Err(NtlError::ParamMismatch(format!("{} vs {} tensors", a.len(), b.len())));
            }
            for ((ka, va), (kb, vb)) in a.iter().zip(b.iter()) {
                if ka != kb || va.shape != vb.shape {
                    return Err(NtlError::ParamMismatch(format!(
                        "`{ka}` {:?} vs `{kb}` {:?}",
                        va.shape, vb.shape
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            step: self.step,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Tensor::is_finite)
    }
}

/// A batch of samples laid out as one single-channel image per
/// (sample, channel) pair, with one box per image.
#[derive(Debug, Clone)]
pub struct NetInput<T> {
    pub images: Tensor<T>,
    pub boxes: Vec<BBox>,
    pub samples: usize,
}

impl<T: Real> NetInput<T> {
    pub fn from_images(images: &[&SuperImage]) -> Self {
        let mut data = Vec::with_capacity(images.len() * CHANNELS * GRID * GRID);
        let mut boxes = Vec::with_capacity(images.len() * CHANNELS);
        for img in images {
            data.extend(img.channels.iter().map(|&v| T::lit(v as f64)));
            boxes.extend_from_slice(&img.bboxes);
        }
        NetInput {
            images: Tensor { shape: vec![images.len() * CHANNELS, 1, GRID, GRID], data },
            boxes,
            samples: images.len(),
        }
    }
}

/// Per-sample network outputs for a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[n, classes]`
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    /// `[n, embedding_dim]`, the concatenated pooled channel features.
    pub embedding: Tensor<T>,
    /// Batch mean and variance per batch-norm layer (train mode only).
    pub bn_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl<T: Real> ForwardOutput<T> {
    pub fn prob(&self, sample: usize, class: usize) -> T {
        self.probs.data[sample * self.probs.shape[1] + class]
    }
}

/// Saved activations needed for the backward pass.
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
    fm_shape: Vec<usize>,
    roi_argmax: Vec<u32>,
    embedding: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetConfig,
    layers: Vec<LayerSpec>,
}

impl Network {
    pub fn new(config: NetConfig) -> Result<Self> {
        let trace = config.spatial_trace();
        if trace.iter().any(|&s| s == 0) {
            return Err(NtlError::Config(format!("input size {} too small for three pools", config.input_size)));
        }
        if config.input_size == GRID && trace != [50, 25, 12, 6] {
            return Err(NtlError::Config(format!("unexpected spatial trace {trace:?}")));
        }
        if !(0.0..1.0).contains(&config.dropout) || config.roi_bins == 0 || config.classes < 2 {
            return Err(NtlError::Config("invalid dropout, bin count or class count".into()));
        }
        let mut layers = vec![LayerSpec::Noise];
        for idx in 0..9 {
            layers.push(LayerSpec::Conv { idx, k: CONV_KERNEL[idx] });
            layers.push(LayerSpec::LRelu);
            layers.push(LayerSpec::Bn { idx });
            if POOL_AFTER.contains(&idx) {
                layers.push(LayerSpec::Pool);
                layers.push(LayerSpec::Dropout);
            }
        }
        Ok(Network { config, layers })
    }

    fn conv_in(&self, idx: usize) -> usize {
        if idx == 0 {
            1
        } else {
            self.config.widths[idx - 1]
        }
    }

    /// Fresh parameters: fan-in scaled uniform kernels, zero biases, unit
    /// batch-norm scale.
    pub fn init_params<T: Real, R: Rng>(&self, rng: &mut R) -> ParamSet<T> {
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor { shape: shape.to_vec(), data: (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect() }
        };
        for idx in 0..9 {
            let (cin, cout, k) = (self.conv_in(idx), self.config.widths[idx], CONV_KERNEL[idx]);
            params.insert(format!("conv{idx}.weight"), uniform(&[cout, cin, k, k], cin * k * k));
            params.insert(format!("conv{idx}.bias"), Tensor::zeros(&[cout]));
            params.insert(format!("bn{idx}.gamma"), Tensor { shape: vec![cout], data: vec![T::one(); cout] });
            params.insert(format!("bn{idx}.beta"), Tensor::zeros(&[cout]));
            buffers.insert(format!("bn{idx}.running_mean"), Tensor::zeros(&[cout]));
            buffers.insert(format!("bn{idx}.running_var"), Tensor { shape: vec![cout], data: vec![T::one(); cout] });
        }
        let d = self.config.embedding_dim();
        params.insert("head.weight".into(), uniform(&[self.config.classes, d], d));
        params.insert("head.bias".into(), Tensor::zeros(&[self.config.classes]));
        ParamSet { params, buffers, step: 0 }
    }

    /// Runs the shared stack over `[m, 1, s, s]` images.
    fn run_stack<T: Real, R: Rng>(
        &self,
        params: &ParamSet<T>,
        images: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
        keep_tape: bool,
        bn_stats: &mut Vec<(usize, Vec<f64>, Vec<f64>)>,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let s = self.config.input_size;
        let [_, c, h, w] = images.dims4("input")?;
        if (c, h, w) != (1, s, s) {
            return Err(NtlError::shape("input", format!("expected 1x{s}x{s} channels, got {c}x{h}x{w}")));
        }
        let cfg = &self.config;
        let train = mode == Mode::Train;
        let mut x = images.clone();
        let mut caches = Vec::new();
        for spec in &self.layers {
            let (y, cache) = match *spec {
                LayerSpec::Noise | LayerSpec::Dropout if !train => (x, Cache::Pass),
                LayerSpec::Noise => (layers::noise_forward(&x, cfg.noise_sigma, rng), Cache::Pass),
                LayerSpec::Dropout => {
                    let (y, mask) = layers::dropout_forward(&x, cfg.dropout, rng);
                    (y, Cache::Mask(mask))
                }
                LayerSpec::Conv { idx, k } => {
                    let name = format!("conv{idx}");
                    let y = layers::conv_forward(
                        &x,
                        params.get(&format!("{name}.weight"))?,
                        params.get(&format!("{name}.bias"))?,
                        k,
                        &name,
                    )?;
                    (y, Cache::Conv(x))
                }
                LayerSpec::LRelu => {
                    let y = layers::lrelu_forward(&x, cfg.lrelu_alpha);
                    let cache = if keep_tape { Cache::LRelu(y.clone()) } else { Cache::Pass };
                    (y, cache)
                }
                LayerSpec::Bn { idx } => {
                    let name = format!("bn{idx}");
                    let gamma = params.get(&format!("{name}.gamma"))?;
                    let beta = params.get(&format!("{name}.beta"))?;
                    if train {
                        let (y, cache) = layers::bn_forward_train(&x, gamma, beta, cfg.bn_eps, &name)?;
                        bn_stats.push((idx, cache.mean.clone(), cache.var.clone()));
                        (y, Cache::Bn(cache))
                    } else {
                        let y = layers::bn_forward_eval(
                            &x,
                            gamma,
                            beta,
                            params.get(&format!("{name}.running_mean"))?,
                            params.get(&format!("{name}.running_var"))?,
                            cfg.bn_eps,
                            &name,
                        )?;
                        (y, Cache::Pass)
                    }
                }
                LayerSpec::Pool => {
                    let in_shape = x.shape.clone();
                    let (y, argmax) = layers::maxpool_forward(&x, "maxpool")?;
                    (y, Cache::Pool { argmax, in_shape })
                }
            };
            if keep_tape {
                caches.push(cache);
            }
            x = y;
        }
        Ok((x, caches))
    }

    /// The shared ConvNet alone: `[m, 1, s, s]` → `[m, width, fm, fm]`.
    pub fn shared_convnet<T: Real, R: Rng>(
        &self,
        params: &ParamSet<T>,
        images: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        Ok(self.run_stack(params, images, mode, rng, false, &mut Vec::new())?.0)
    }

    /// Project each box onto the feature map and pool it to `bins × bins`.
    pub fn roi_project_pool<T: Real>(&self, fm: &Tensor<T>, boxes: &[BBox]) -> Result<Tensor<T>> {
        Ok(self.pool_regions(fm, boxes)?.0)
    }

    fn pool_regions<T: Real>(&self, fm: &Tensor<T>, boxes: &[BBox]) -> Result<(Tensor<T>, Vec<u32>)> {
        let s = self.config.input_size;
        let full = BBox { x0: 0, y0: 0, x1: (s - 1) as u16, y1: (s - 1) as u16 };
        let boxes: Vec<BBox> = if self.config.roi_pooling {
            boxes.iter().map(|b| BBox { x1: b.x1.min(full.x1), y1: b.y1.min(full.y1), ..*b }).collect()
        } else {
            vec![full; boxes.len()]
        };
        layers::roi_pool_forward(fm, &boxes, s, self.config.roi_bins, "roi_pool")
    }

    /// Full forward pass: shared ConvNet per channel, RoI pooling,
    /// concatenation, dense head and softmax.
    pub fn forward<T: Real, R: Rng>(
        &self,
        params: &ParamSet<T>,
        input: &NetInput<T>,
        mode: Mode,
        rng: &mut R,
        keep_tape: bool,
    ) -> Result<(ForwardOutput<T>, Option<Tape<T>>)> {
        let cfg = &self.config;
        if input.images.shape.first() != Some(&(input.samples * cfg.channels)) || input.boxes.len() != input.samples * cfg.channels {
            return Err(NtlError::shape(
                "input",
                format!("{} samples need {} channel images and boxes", input.samples, input.samples * cfg.channels),
            ));
        }
        let mut bn_stats = Vec::new();
        let (fm, caches) = self.run_stack(params, &input.images, mode, rng, keep_tape, &mut bn_stats)?;
        let (pooled, roi_argmax) = self.pool_regions(&fm, &input.boxes)?;
        let d = cfg.embedding_dim();
        let embedding = Tensor { shape: vec![input.samples, d], data: pooled.data };
        let logits = layers::dense_forward(&embedding, params.get("head.weight")?, params.get("head.bias")?, "head")?;
        let probs = layers::softmax(&logits);
        let tape = keep_tape.then(|| Tape { caches, fm_shape: fm.shape.clone(), roi_argmax, embedding: embedding.clone() });
        Ok((ForwardOutput { logits, probs, embedding, bn_stats }, tape))
    }

    /// Gradients of a loss given its derivative with respect to the logits
    /// and, optionally, the embedding.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        tape: Tape<T>,
        d_logits: &Tensor<T>,
        d_embedding: Option<&Tensor<T>>,
    ) -> Result<Grads<T>> {
        let cfg = &self.config;
        let mut grads = params.zero_grads();
        let mut take = |name: &str| grads.remove(name).ok_or_else(|| NtlError::ParamMismatch(name.to_string()));
        let mut done: Vec<(String, Tensor<T>)> = Vec::new();

        let (mut dw, mut db) = (take("head.weight")?, take("head.bias")?);
        let mut de = layers::dense_backward(&tape.embedding, params.get("head.weight")?, d_logits, &mut dw, &mut db, "head")?;
        done.push(("head.weight".into(), dw));
        done.push(("head.bias".into(), db));
        if let Some(extra) = d_embedding {
            if extra.shape != de.shape {
                return Err(NtlError::shape("embedding", format!("{:?} vs {:?}", extra.shape, de.shape)));
            }
            for (a, &b) in de.data.iter_mut().zip(&extra.data) {
                *a = *a + b;
            }
        }
        let mut dx = layers::scatter_backward(&tape.roi_argmax, &de, &tape.fm_shape);

        for (spec, cache) in self.layers.iter().zip(tape.caches).rev() {
            dx = match (*spec, cache) {
                (LayerSpec::Conv { idx, k }, Cache::Conv(x)) => {
                    let name = format!("conv{idx}");
                    let (mut dw, mut db) = (take(&format!("{name}.weight"))?, take(&format!("{name}.bias"))?);
                    let g = layers::conv_backward(&x, params.get(&format!("{name}.weight"))?, k, &dx, &mut dw, &mut db, &name)?;
                    done.push((format!("{name}.weight"), dw));
                    done.push((format!("{name}.bias"), db));
                    g
                }
                (LayerSpec::LRelu, Cache::LRelu(y)) => layers::lrelu_backward(&y, &dx, cfg.lrelu_alpha),
                (LayerSpec::Bn { idx }, Cache::Bn(c)) => {
                    let name = format!("bn{idx}");
                    let (mut dg, mut dbeta) = (take(&format!("{name}.gamma"))?, take(&format!("{name}.beta"))?);
                    let g = layers::bn_backward(&c, params.get(&format!("{name}.gamma"))?, &dx, &mut dg, &mut dbeta, &name)?;
                    done.push((format!("{name}.gamma"), dg));
                    done.push((format!("{name}.beta"), dbeta));
                    g
                }
                (LayerSpec::Pool, Cache::Pool { argmax, in_shape }) => layers::scatter_backward(&argmax, &dx, &in_shape),
                (LayerSpec::Dropout, Cache::Mask(m)) => layers::mask_backward(&m, &dx),
                (LayerSpec::Noise, Cache::Pass) => dx,
                (spec, _) => {
                    return Err(NtlError::shape(format!("{spec:?}"), "tape does not match a train-mode forward"));
                }
            };
        }
        Ok(done.into_iter().collect())
    }

    /// Fold the batch statistics of a train-mode forward into the running
    /// mean and variance.
    pub fn update_running_stats<T: Real>(&self, params: &mut ParamSet<T>, out: &ForwardOutput<T>) -> Result<()> {
        let m = self.config.bn_momentum;
        for (idx, mean, var) in &out.bn_stats {
            for (key, batch) in [("running_mean", mean), ("running_var", var)] {
                let name = format!("bn{idx}.{key}");
                let buf = params
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| NtlError::ParamMismatch(format!("missing buffer `{name}`")))?;
                for (r, &b) in buf.data.iter_mut().zip(batch.iter()) {
                    *r = T::lit(m * r.f64() + (1.0 - m) * b);
                }
            }
        }
        Ok(())
    }
}
