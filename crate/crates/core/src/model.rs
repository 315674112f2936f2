//! UNet-family segmentation networks built from a declarative [`ModelSpec`].
//!
//! Layout per encoder stage: conv → ReLU → conv → ReLU → 2×2 max-pool.
//! A two-conv bottleneck follows the last stage. Each decoder stage
//! upsamples 2× (nearest), applies the up-convolution, concatenates the
//! matching encoder skip, then conv → ReLU → conv → ReLU. A 1×1 head maps to
//! class scores. There is no normalization layer, so averaging two weight
//! sets of the same spec is always meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::{self, ConvShape};
use crate::tensor::{Real, Tensor};

/// Per-pixel unnormalized class scores, shaped `(batch, classes, h, w)`.
pub type LogitMap<F = f32> = Tensor<F>;

fn default_upconv_kernel() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_filters: Vec<usize>,
    pub bottleneck_filters: usize,
    pub decoder_filters: Vec<usize>,
    pub kernel_size: usize,
    /// Kernel of the convolution that follows each nearest-neighbour
    /// upsampling step.
    #[serde(default = "default_upconv_kernel")]
    pub upconv_kernel: usize,
}

impl ModelSpec {
    /// Four-stage UNet, ~17.07M parameters at 30 classes.
    pub fn default_teacher(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            num_classes,
            encoder_filters: vec![64, 128, 256, 512],
            bottleneck_filters: 256,
            decoder_filters: vec![512, 256, 128, 64],
            kernel_size: 3,
            upconv_kernel: 2,
        }
    }

    /// Two-stage reduced UNet with filters (16, 32, 32, 16).
    pub fn default_student(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            num_classes,
            encoder_filters: vec![16, 32],
            bottleneck_filters: 64,
            decoder_filters: vec![32, 16],
            kernel_size: 3,
            upconv_kernel: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.encoder_filters.is_empty() || self.decoder_filters.is_empty() {
            return bad("encoder_filters and decoder_filters must be non-empty".into());
        }
        if self.encoder_filters.len() != self.decoder_filters.len() {
            return bad(format!(
                "{} encoder stages but {} decoder stages",
                self.encoder_filters.len(),
                self.decoder_filters.len()
            ));
        }
        if self
            .encoder_filters
            .iter()
            .chain(&self.decoder_filters)
            .any(|&f| f == 0)
            || self.bottleneck_filters == 0
        {
            return bad("filter counts must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd and >= 1, got {}", self.kernel_size));
        }
        if self.upconv_kernel == 0 {
            return bad("upconv_kernel must be >= 1".into());
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.encoder_filters.len()
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages()
    }

    /// Stable 64-bit fingerprint stored in weight-container headers.
    pub fn fingerprint(&self) -> u64 {
        let canonical = format!(
            "in={};classes={};enc={:?};bottleneck={};dec={:?};k={};up={}",
            self.in_channels,
            self.num_classes,
            self.encoder_filters,
            self.bottleneck_filters,
            self.decoder_filters,
            self.kernel_size,
            self.upconv_kernel
        );
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry<F = f32> {
    pub name: String,
    pub tensor: Tensor<F>,
}

/// Ordered named tensors. Order and shapes are a pure function of the
/// generating spec, identified by `spec_hash`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<F = f32> {
    pub spec_hash: u64,
    pub entries: Vec<WeightEntry<F>>,
}

impl<F: Real> WeightSet<F> {
    pub fn empty() -> Self {
        Self {
            spec_hash: 0,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec_hash: self.spec_hash,
            entries: self
                .entries
                .iter()
                .map(|e| WeightEntry {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(e.tensor.shape()),
                })
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> WeightSet<G> {
        WeightSet {
            spec_hash: self.spec_hash,
            entries: self
                .entries
                .iter()
                .map(|e| WeightEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Errors unless `other` has the same entry names and shapes in the same
    /// order.
    pub fn check_compatible(&self, other: &WeightSet<F>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "weight sets have {} and {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Shape(format!(
                    "entry {} {:?} does not match {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// In-place `self -= step * grad`.
    pub fn sgd_step(&mut self, grad: &WeightSet<F>, step: F) {
        for (w, g) in self.entries.iter_mut().zip(&grad.entries) {
            for (wv, gv) in w.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
                *wv = *wv - step * *gv;
            }
        }
    }
}

/// Total element count of all tensors, biases included.
pub fn count_parameters<F: Real>(weights: &WeightSet<F>) -> usize {
    weights.entries.iter().map(|e| e.tensor.numel()).sum()
}

/// Builds initialized teacher weights. Any valid spec is accepted; see
/// [`ModelSpec::default_teacher`] for the reference configuration.
pub fn build_teacher(spec: &ModelSpec, seed: u64) -> Result<WeightSet> {
    Ok(Unet::new(spec.clone())?.init(seed))
}

/// Builds initialized student weights; see [`ModelSpec::default_student`].
pub fn build_student(spec: &ModelSpec, seed: u64) -> Result<WeightSet> {
    Ok(Unet::new(spec.clone())?.init(seed))
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    shape: ConvShape,
    relu: bool,
}

/// A validated spec together with its layer plan.
#[derive(Clone, Debug)]
pub struct Unet {
    spec: ModelSpec,
    layers: Vec<Layer>,
    names: Vec<String>,
}

/// Activations retained from a training forward pass.
pub struct ForwardCache<F> {
    height: usize,
    width: usize,
    samples: Vec<SampleCache<F>>,
}

struct SampleCache<F> {
    /// Input to each conv layer, indexed like `Unet::layers`.
    inputs: Vec<Vec<F>>,
    /// Post-activation output of each conv layer.
    outputs: Vec<Vec<F>>,
    pool_argmax: Vec<Vec<u32>>,
}

impl Unet {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel_size;
        let mut layers = Vec::new();
        let mut names = Vec::new();
        let mut push = |name: String, c_in: usize, c_out: usize, k: usize, relu: bool| {
            layers.push(Layer {
                shape: ConvShape { c_in, c_out, k },
                relu,
            });
            names.push(name);
        };
        let mut c = spec.in_channels;
        for (s, &f) in spec.encoder_filters.iter().enumerate() {
            push(format!("encoder.{s}.conv1"), c, f, k, true);
            push(format!("encoder.{s}.conv2"), f, f, k, true);
            c = f;
        }
        push("bottleneck.conv1".into(), c, spec.bottleneck_filters, k, true);
        push(
            "bottleneck.conv2".into(),
            spec.bottleneck_filters,
            spec.bottleneck_filters,
            k,
            true,
        );
        c = spec.bottleneck_filters;
        for (j, &d) in spec.decoder_filters.iter().enumerate() {
            let skip = spec.encoder_filters[spec.stages() - 1 - j];
            push(format!("decoder.{j}.upconv"), c, d, spec.upconv_kernel, true);
            push(format!("decoder.{j}.conv1"), d + skip, d, k, true);
            push(format!("decoder.{j}.conv2"), d, d, k, true);
            c = d;
        }
        push("head".into(), c, spec.num_classes, 1, false);
        Ok(Self { spec, layers, names })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.shape.weight_len() + l.shape.c_out).sum()
    }

    fn entries_with<F: Real>(&self, mut fill: impl FnMut(&Layer, usize) -> F) -> WeightSet<F> {
        let mut entries = Vec::with_capacity(2 * self.layers.len());
        for (layer, name) in self.layers.iter().zip(&self.names) {
            let s = layer.shape;
            let w: Vec<F> = (0..s.weight_len()).map(|_| fill(layer, 0)).collect();
            let b: Vec<F> = (0..s.c_out).map(|_| fill(layer, 1)).collect();
            entries.push(WeightEntry {
                name: format!("{name}.weight"),
                tensor: Tensor::from_vec(&[s.c_out, s.c_in, s.k, s.k], w).expect("sized by plan"),
            });
            entries.push(WeightEntry {
                name: format!("{name}.bias"),
                tensor: Tensor::from_vec(&[s.c_out], b).expect("sized by plan"),
            });
        }
        WeightSet {
            spec_hash: self.spec.fingerprint(),
            entries,
        }
    }

    pub fn zeros<F: Real>(&self) -> WeightSet<F> {
        self.entries_with(|_, _| F::zero())
    }

    /// Fan-in scaled uniform weights (He bound `sqrt(6 / fan_in)`), zero
    /// biases.
    pub fn init<F: Real>(&self, seed: u64) -> WeightSet<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.entries_with(|layer, part| {
            if part == 1 {
                return F::zero();
            }
            let fan_in = (layer.shape.c_in * layer.shape.k * layer.shape.k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            F::lit(rng.gen_range(-bound..bound))
        })
    }

    /// Verifies `weights` was laid out by this spec.
    pub fn check_weights<F: Real>(&self, weights: &WeightSet<F>) -> Result<()> {
        if weights.entries.len() != 2 * self.layers.len() {
            return Err(Error::Shape(format!(
                "expected {} weight entries, got {}",
                2 * self.layers.len(),
                weights.entries.len()
            )));
        }
        for (i, (layer, name)) in self.layers.iter().zip(&self.names).enumerate() {
            let s = layer.shape;
            let w = &weights.entries[2 * i];
            let b = &weights.entries[2 * i + 1];
            if w.tensor.shape() != [s.c_out, s.c_in, s.k, s.k] || b.tensor.shape() != [s.c_out] {
                return Err(Error::Shape(format!(
                    "layer {name}: expected weight [{}, {}, {}, {}], got {:?}",
                    s.c_out,
                    s.c_in,
                    s.k,
                    s.k,
                    w.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_batch<F: Real>(&self, batch: &Tensor<F>) -> Result<(usize, usize, usize)> {
        let shape = batch.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "input must be (batch, channels, height, width), got rank {}",
                shape.len()
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if n == 0 {
            return Err(Error::Shape("batch dimension is 0".into()));
        }
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "channels: expected {}, got {c}",
                self.spec.in_channels
            )));
        }
        let m = self.spec.size_multiple();
        if h == 0 || h % m != 0 {
            return Err(Error::Shape(format!("height {h} is not a positive multiple of {m}")));
        }
        if w == 0 || w % m != 0 {
            return Err(Error::Shape(format!("width {w} is not a positive multiple of {m}")));
        }
        Ok((n, h, w))
    }

    /// Inference forward pass.
    pub fn forward<F: Real>(&self, weights: &WeightSet<F>, batch: &Tensor<F>) -> Result<LogitMap<F>> {
        self.forward_train(weights, batch).map(|(logits, _)| logits)
    }

    /// Forward pass retaining what [`Unet::backward`] needs.
    pub fn forward_train<F: Real>(
        &self,
        weights: &WeightSet<F>,
        batch: &Tensor<F>,
    ) -> Result<(LogitMap<F>, ForwardCache<F>)> {
        self.check_weights(weights)?;
        let (n, h, w) = self.check_batch(batch)?;
        let results: Vec<(Vec<F>, SampleCache<F>)> = (0..n)
            .into_par_iter()
            .map(|i| self.forward_sample(weights, batch.outer(i), h, w))
            .collect();
        let mut data = Vec::with_capacity(n * self.spec.num_classes * h * w);
        let mut samples = Vec::with_capacity(n);
        for (logits, cache) in results {
            data.extend_from_slice(&logits);
            samples.push(cache);
        }
        let logits = Tensor::from_vec(&[n, self.spec.num_classes, h, w], data)?;
        Ok((
            logits,
            ForwardCache {
                height: h,
                width: w,
                samples,
            },
        ))
    }

    fn conv<F: Real>(
        &self,
        weights: &WeightSet<F>,
        idx: usize,
        input: Vec<F>,
        h: usize,
        w: usize,
        cache: &mut SampleCache<F>,
    ) -> Vec<F> {
        let layer = self.layers[idx];
        let mut out = ops::conv_forward(
            layer.shape,
            &input,
            h,
            w,
            weights.entries[2 * idx].tensor.data(),
            weights.entries[2 * idx + 1].tensor.data(),
        );
        if layer.relu {
            ops::relu_in_place(&mut out);
        }
        cache.inputs[idx] = input;
        cache.outputs[idx] = out.clone();
        out
    }

    fn forward_sample<F: Real>(
        &self,
        weights: &WeightSet<F>,
        x: &[F],
        mut h: usize,
        mut w: usize,
    ) -> (Vec<F>, SampleCache<F>) {
        let stages = self.spec.stages();
        let mut cache = SampleCache {
            inputs: vec![Vec::new(); self.layers.len()],
            outputs: vec![Vec::new(); self.layers.len()],
            pool_argmax: Vec::with_capacity(stages),
        };
        let mut cur = x.to_vec();
        let mut idx = 0;
        for s in 0..stages {
            let a = self.conv(weights, idx, cur, h, w, &mut cache);
            let b = self.conv(weights, idx + 1, a, h, w, &mut cache);
            idx += 2;
            let (pooled, arg) = ops::maxpool2(&b, self.spec.encoder_filters[s], h, w);
            cache.pool_argmax.push(arg);
            cur = pooled;
            h /= 2;
            w /= 2;
        }
        let a = self.conv(weights, idx, cur, h, w, &mut cache);
        cur = self.conv(weights, idx + 1, a, h, w, &mut cache);
        idx += 2;
        let mut c = self.spec.bottleneck_filters;
        for j in 0..stages {
            let up = ops::upsample2(&cur, c, h, w);
            h *= 2;
            w *= 2;
            let mut cat = self.conv(weights, idx, up, h, w, &mut cache);
            let skip_layer = 2 * (stages - 1 - j) + 1;
            cat.extend_from_slice(&cache.outputs[skip_layer]);
            let a = self.conv(weights, idx + 1, cat, h, w, &mut cache);
            cur = self.conv(weights, idx + 2, a, h, w, &mut cache);
            idx += 3;
            c = self.spec.decoder_filters[j];
        }
        let logits = self.conv(weights, idx, cur, h, w, &mut cache);
        // the head output is the returned logits; no need to keep a copy
        cache.outputs[idx] = Vec::new();
        (logits, cache)
    }

    /// Gradient of `sum(grad_logits ⊙ logits)` with respect to every weight.
    /// Per-sample gradients are reduced in sample order.
    pub fn backward<F: Real>(
        &self,
        weights: &WeightSet<F>,
        cache: &ForwardCache<F>,
        grad_logits: &Tensor<F>,
    ) -> Result<WeightSet<F>> {
        let n = cache.samples.len();
        let expected = [n, self.spec.num_classes, cache.height, cache.width];
        if grad_logits.shape() != expected {
            return Err(Error::Shape(format!(
                "logit gradient {:?} does not match forward output {expected:?}",
                grad_logits.shape()
            )));
        }
        let per_sample: Vec<WeightSet<F>> = (0..n)
            .into_par_iter()
            .map(|i| {
                self.backward_sample(
                    weights,
                    &cache.samples[i],
                    grad_logits.outer(i),
                    cache.height,
                    cache.width,
                )
            })
            .collect();
        let mut iter = per_sample.into_iter();
        let mut total = iter.next().expect("batch is non-empty");
        for g in iter {
            for (t, e) in total.entries.iter_mut().zip(&g.entries) {
                for (a, b) in t.tensor.data_mut().iter_mut().zip(e.tensor.data()) {
                    *a = *a + *b;
                }
            }
        }
        Ok(total)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_back<F: Real>(
        &self,
        weights: &WeightSet<F>,
        grads: &mut WeightSet<F>,
        cache: &SampleCache<F>,
        idx: usize,
        mut grad_out: Vec<F>,
        h: usize,
        w: usize,
        want_input_grad: bool,
    ) -> Option<Vec<F>> {
        let layer = self.layers[idx];
        if layer.relu {
            ops::relu_backward_in_place(&cache.outputs[idx], &mut grad_out);
        }
        let (gw, gb) = grads.entries.split_at_mut(2 * idx + 1);
        ops::conv_backward(
            layer.shape,
            &cache.inputs[idx],
            h,
            w,
            weights.entries[2 * idx].tensor.data(),
            &grad_out,
            gw[2 * idx].tensor.data_mut(),
            gb[0].tensor.data_mut(),
            want_input_grad,
        )
    }

    fn backward_sample<F: Real>(
        &self,
        weights: &WeightSet<F>,
        cache: &SampleCache<F>,
        grad_logits: &[F],
        height: usize,
        width: usize,
    ) -> WeightSet<F> {
        let stages = self.spec.stages();
        let mut grads = self.zeros::<F>();
        let head = self.layers.len() - 1;
        let (mut h, mut w) = (height, width);
        let mut g = self
            .conv_back(weights, &mut grads, cache, head, grad_logits.to_vec(), h, w, true)
            .expect("input grad requested");
        let mut skip_grads: Vec<Vec<F>> = vec![Vec::new(); stages];
        let mut idx = head;
        for j in (0..stages).rev() {
            idx -= 3;
            let d = self.spec.decoder_filters[j];
            let s = stages - 1 - j;
            let g_a = self
                .conv_back(weights, &mut grads, cache, idx + 2, g, h, w, true)
                .expect("input grad requested");
            let mut g_cat = self
                .conv_back(weights, &mut grads, cache, idx + 1, g_a, h, w, true)
                .expect("input grad requested");
            skip_grads[s] = g_cat.split_off(d * h * w);
            let g_up = self
                .conv_back(weights, &mut grads, cache, idx, g_cat, h, w, true)
                .expect("input grad requested");
            h /= 2;
            w /= 2;
            let c_below = if j == 0 {
                self.spec.bottleneck_filters
            } else {
                self.spec.decoder_filters[j - 1]
            };
            g = ops::upsample2_backward(&g_up, c_below, h, w);
        }
        idx -= 2;
        let g_a = self
            .conv_back(weights, &mut grads, cache, idx + 1, g, h, w, true)
            .expect("input grad requested");
        g = self
            .conv_back(weights, &mut grads, cache, idx, g_a, h, w, true)
            .expect("input grad requested");
        for s in (0..stages).rev() {
            idx -= 2;
            let c = self.spec.encoder_filters[s];
            let mut g_b = ops::maxpool2_backward(&g, &cache.pool_argmax[s], c * 4 * h * w);
            h *= 2;
            w *= 2;
            for (a, b) in g_b.iter_mut().zip(&skip_grads[s]) {
                *a = *a + *b;
            }
            let g_a = self
                .conv_back(weights, &mut grads, cache, idx + 1, g_b, h, w, true)
                .expect("input grad requested");
            match self.conv_back(weights, &mut grads, cache, idx, g_a, h, w, s > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = ModelSpec::default_student(3);
        spec.decoder_filters.pop();
        assert!(matches!(Unet::new(spec), Err(Error::InvalidSpec(_))));

        let mut spec = ModelSpec::default_student(3);
        spec.kernel_size = 4;
        assert!(Unet::new(spec).is_err());

        let mut spec = ModelSpec::default_student(3);
        spec.kernel_size = 0;
        assert!(Unet::new(spec).is_err());

        let mut spec = ModelSpec::default_student(3);
        spec.encoder_filters[0] = 0;
        assert!(Unet::new(spec).is_err());

        let mut spec = ModelSpec::default_student(3);
        spec.num_classes = 1;
        assert!(Unet::new(spec).is_err());

        let mut spec = ModelSpec::default_student(3);
        spec.in_channels = 0;
        assert!(Unet::new(spec).is_err());
    }

    #[test]
    fn count_of_empty_and_single_conv() {
        assert_eq!(count_parameters(&WeightSet::<f32>::empty()), 0);
        let single = WeightSet::<f32> {
            spec_hash: 0,
            entries: vec![
                WeightEntry {
                    name: "w".into(),
                    tensor: Tensor::zeros(&[1, 1, 3, 3]),
                },
                WeightEntry {
                    name: "b".into(),
                    tensor: Tensor::zeros(&[1]),
                },
            ],
        };
        assert_eq!(count_parameters(&single), 10);
    }

    #[test]
    fn forward_shape_errors_name_the_dimension() {
        let net = Unet::new(ModelSpec::default_student(3)).unwrap();
        let w = net.init::<f32>(0);
        let err = net.forward(&w, &Tensor::zeros(&[1, 1, 16, 16])).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let err = net.forward(&w, &Tensor::zeros(&[1, 3, 18, 16])).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let err = net.forward(&w, &Tensor::zeros(&[1, 3, 16, 6])).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let net = Unet::new(ModelSpec::default_student(4)).unwrap();
        let w = net.zeros::<f32>();
        let x = Tensor::from_vec(&[1, 3, 8, 8], (0..192).map(|i| i as f32 * 0.01).collect()).unwrap();
        let y = net.forward(&w, &x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plan_count_matches_built_weights() {
        for spec in [ModelSpec::default_student(30), ModelSpec::default_student(3)] {
            let net = Unet::new(spec).unwrap();
            assert_eq!(net.parameter_count(), count_parameters(&net.init::<f32>(1)));
        }
    }

    #[test]
    fn fingerprint_tracks_spec() {
        let a = ModelSpec::default_student(3);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.bottleneck_filters += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
