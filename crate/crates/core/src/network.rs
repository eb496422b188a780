//! Sequential VGG-style feature extractor with named layers.
//!
//! [`Network::forward`] stops at the deepest requested layer and keeps
//! every intermediate activation; [`Network::backward`] takes gradients
//! injected at any subset of the cached layers and pulls their sum back to
//! the input image.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::format;
use crate::tensor::{self, Kernel, Padding, PoolMode, PoolRecord, Shape3, Tensor3};

/// Channel means of the usual VGG preprocessing (RGB order).
pub const VGG_MEAN: [f64; 3] = [123.68, 116.779, 103.939];

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv { out_channels: usize, kernel_size: usize, stride: usize, padding: Padding },
    Relu,
    Pool { mode: PoolMode, size: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv { out_channels, kernel_size, stride: 1, padding: Padding::Same },
        }
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: LayerKind::Relu }
    }

    pub fn pool(name: impl Into<String>, mode: PoolMode) -> Self {
        Self { name: name.into(), kind: LayerKind::Pool { mode, size: 2, stride: 2 } }
    }
}

/// Whether a conv layer name refers to its raw output or to the ReLU that
/// directly follows it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    Pre,
    #[default]
    Post,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub mean: Vec<f64>,
    pub layers: Vec<LayerSpec>,
    pub features: FeatureMode,
}

/// Shape of one convolution's parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvShape {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
}

impl NetworkConfig {
    pub fn new(input_channels: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let config = Self {
            input_channels,
            mean: VGG_MEAN.iter().copied().take(input_channels).collect(),
            layers,
            features: FeatureMode::Post,
        };
        config.validate()?;
        Ok(config)
    }

    /// Small five-conv stack used as the standard fixture.
    pub fn tinyvgg() -> Self {
        Self::tinyvgg_with(PoolMode::Max)
    }

    pub fn tinyvgg_with(pool: PoolMode) -> Self {
        let layers = vec![
            LayerSpec::conv("conv1-1", 8, 3),
            LayerSpec::relu("relu1-1"),
            LayerSpec::conv("conv1-2", 8, 3),
            LayerSpec::relu("relu1-2"),
            LayerSpec::pool("pool1", pool),
            LayerSpec::conv("conv2-1", 16, 3),
            LayerSpec::relu("relu2-1"),
            LayerSpec::conv("conv2-2", 16, 3),
            LayerSpec::relu("relu2-2"),
            LayerSpec::pool("pool2", pool),
            LayerSpec::conv("conv3-1", 32, 3),
            LayerSpec::relu("relu3-1"),
        ];
        Self::new(3, layers).expect("tinyvgg preset is valid")
    }

    /// The 16 convolutions of VGG-19 with their ReLUs and pools.
    pub fn vgg19() -> Self {
        Self::vgg19_with(PoolMode::Max)
    }

    pub fn vgg19_with(pool: PoolMode) -> Self {
        let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];
        let mut layers = Vec::new();
        for (b, &(convs, width)) in blocks.iter().enumerate() {
            for c in 1..=convs {
                layers.push(LayerSpec::conv(format!("conv{}-{c}", b + 1), width, 3));
                layers.push(LayerSpec::relu(format!("relu{}-{c}", b + 1)));
            }
            layers.push(LayerSpec::pool(format!("pool{}", b + 1), pool));
        }
        Self::new(3, layers).expect("vgg19 preset is valid")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tinyvgg" => Some(Self::tinyvgg()),
            "vgg19" => Some(Self::vgg19()),
            _ => None,
        }
    }

    pub fn with_features(mut self, features: FeatureMode) -> Self {
        self.features = features;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::InvalidNetwork("input channel count must be positive".into()));
        }
        if self.mean.len() != self.input_channels {
            return Err(Error::InvalidNetwork(format!(
                "{} channel means for {} input channels",
                self.mean.len(),
                self.input_channels
            )));
        }
        let mut seen = HashSet::new();
        let mut convs = 0;
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::InvalidNetwork(format!("duplicate layer name `{}`", layer.name)));
            }
            match layer.kind {
                LayerKind::Conv { out_channels, kernel_size, stride, .. } => {
                    if out_channels == 0 || kernel_size == 0 || stride == 0 {
                        return Err(Error::InvalidNetwork(format!(
                            "layer `{}` needs positive channels, kernel size and stride",
                            layer.name
                        )));
                    }
                    convs += 1;
                }
                LayerKind::Pool { size, stride, .. } => {
                    if size == 0 || stride == 0 {
                        return Err(Error::InvalidNetwork(format!(
                            "layer `{}` needs positive window and stride",
                            layer.name
                        )));
                    }
                }
                LayerKind::Relu => {}
            }
        }
        if convs == 0 {
            return Err(Error::InvalidNetwork("network has no convolution layer".into()));
        }
        Ok(())
    }

    /// Parameter shapes of every conv layer in order, with in-channels
    /// inferred from the preceding layers.
    pub fn conv_shapes(&self) -> Vec<ConvShape> {
        let mut channels = self.input_channels;
        let mut out = Vec::new();
        for layer in &self.layers {
            if let LayerKind::Conv { out_channels, kernel_size, .. } = layer.kind {
                out.push(ConvShape { name: layer.name.clone(), out_channels, in_channels: channels, kernel_size });
                channels = out_channels;
            }
        }
        out
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Index of the layer whose output is reported under `name`, honouring
    /// the pre/post-ReLU feature mode.
    pub fn feature_index(&self, name: &str) -> Result<usize> {
        let i = self.layer_index(name).ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        if self.features == FeatureMode::Post
            && matches!(self.layers[i].kind, LayerKind::Conv { .. })
            && matches!(self.layers.get(i + 1).map(|l| &l.kind), Some(LayerKind::Relu))
        {
            return Ok(i + 1);
        }
        Ok(i)
    }

    /// Channel count of the feature reported under `name`.
    pub fn feature_channels(&self, name: &str) -> Result<usize> {
        let idx = self.feature_index(name)?;
        let mut channels = self.input_channels;
        for layer in &self.layers[..=idx] {
            if let LayerKind::Conv { out_channels, .. } = layer.kind {
                channels = out_channels;
            }
        }
        Ok(channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub name: String,
    pub kernel: Kernel,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    File(PathBuf),
    Seeded(u64),
    Manual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub layers: Vec<ConvParams>,
    pub provenance: Provenance,
}

impl WeightStore {
    /// Kernels drawn from N(0, 1/fan_in), biases zero. Values are rounded to
    /// f32 so a save/load cycle reproduces the store exactly.
    pub fn random_init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .conv_shapes()
            .into_iter()
            .map(|s| {
                let fan_in = s.in_channels * s.kernel_size * s.kernel_size;
                let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
                let n = s.out_channels * fan_in;
                let data = (0..n).map(|_| normal.sample(&mut rng) as f32 as f64).collect();
                ConvParams {
                    kernel: Kernel::new(s.out_channels, s.in_channels, s.kernel_size, s.kernel_size, data)
                        .expect("sized from shape"),
                    bias: vec![0.0; s.out_channels],
                    name: s.name,
                }
            })
            .collect();
        Self { layers, provenance: Provenance::Seeded(seed) }
    }

    /// All kernels and biases zero.
    pub fn zeros(config: &NetworkConfig) -> Self {
        let layers = config
            .conv_shapes()
            .into_iter()
            .map(|s| ConvParams {
                kernel: Kernel::zeros(s.out_channels, s.in_channels, s.kernel_size, s.kernel_size),
                bias: vec![0.0; s.out_channels],
                name: s.name,
            })
            .collect();
        Self { layers, provenance: Provenance::Manual }
    }

    pub fn load(config: &NetworkConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let mut store = format::decode_weights(&bytes)?;
        store.provenance = Provenance::File(path.to_path_buf());
        store.check_against(config)?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, format::encode_weights(self))?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ConvParams> {
        self.layers.iter().find(|p| p.name == name)
    }

    /// Checks that names, order and shapes agree with `config`.
    pub fn check_against(&self, config: &NetworkConfig) -> Result<()> {
        let shapes = config.conv_shapes();
        for (s, p) in shapes.iter().zip(&self.layers) {
            if s.name != p.name {
                return Err(Error::Format(format!("expected weights for layer `{}`, found `{}`", s.name, p.name)));
            }
            let want = [s.out_channels, s.in_channels, s.kernel_size, s.kernel_size];
            if p.kernel.dims() != want {
                return Err(Error::Format(format!(
                    "layer `{}`: kernel dims {:?} do not match the network's {:?}",
                    s.name,
                    p.kernel.dims(),
                    want
                )));
            }
            if p.bias.len() != s.out_channels {
                return Err(Error::Format(format!(
                    "layer `{}`: {} biases for {} output channels",
                    s.name,
                    p.bias.len(),
                    s.out_channels
                )));
            }
        }
        if let Some(s) = shapes.get(self.layers.len()) {
            return Err(Error::Format(format!("no weights for layer `{}`", s.name)));
        }
        if let Some(p) = self.layers.get(shapes.len()) {
            return Err(Error::Format(format!("weights for layer `{}` that the network does not have", p.name)));
        }
        Ok(())
    }
}

/// A validated configuration with matching weights.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    weights: WeightStore,
    // layer index -> position in `weights.layers`
    param_slot: Vec<Option<usize>>,
}

/// Activations of one forward pass, up to the deepest requested layer.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    input: Tensor3,
    outputs: Vec<Tensor3>,
    pool_records: HashMap<usize, PoolRecord>,
    requested: HashMap<String, usize>,
}

impl FeatureCache {
    /// Feature reported under `name`.
    pub fn feature(&self, name: &str) -> Result<&Tensor3> {
        let idx = self.requested.get(name).ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        Ok(&self.outputs[*idx])
    }

    /// Number of layers the forward pass executed.
    pub fn executed_layers(&self) -> usize {
        self.outputs.len()
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input.shape()
    }

    fn layer_input(&self, i: usize) -> &Tensor3 {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }

    /// Bit pattern of every ReLU gate and max-pool winner. Two inputs with
    /// the same signature lie in the same linear piece of the network.
    pub fn activation_signature(&self, config: &NetworkConfig) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, layer) in config.layers.iter().take(self.outputs.len()).enumerate() {
            match layer.kind {
                LayerKind::Relu => {
                    for v in self.layer_input(i).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                LayerKind::Pool { .. } => {
                    if let Some(r) = self.pool_records.get(&i) {
                        r.argmax.hash(&mut h);
                    }
                }
                LayerKind::Conv { .. } => {}
            }
        }
        h.finish()
    }
}

impl Network {
    pub fn new(config: NetworkConfig, weights: WeightStore) -> Result<Self> {
        config.validate()?;
        weights.check_against(&config)?;
        let mut next = 0;
        let param_slot = config
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv { .. } => {
                    next += 1;
                    Some(next - 1)
                }
                _ => None,
            })
            .collect();
        Ok(Self { config, weights, param_slot })
    }

    pub fn seeded(config: NetworkConfig, seed: u64) -> Self {
        let weights = WeightStore::random_init(&config, seed);
        Self::new(config, weights).expect("random weights match their config")
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    fn params(&self, layer: usize) -> &ConvParams {
        &self.weights.layers[self.param_slot[layer].expect("conv layer has parameters")]
    }

    /// Runs the stack up to the deepest of `wanted` and caches every
    /// intermediate activation.
    pub fn forward<S: AsRef<str>>(&self, image: &Tensor3, wanted: &[S]) -> Result<FeatureCache> {
        if image.channels() != self.config.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "image has {} channels, network expects {}",
                image.channels(),
                self.config.input_channels
            )));
        }
        let mut requested = HashMap::new();
        for name in wanted {
            let name = name.as_ref();
            requested.insert(name.to_string(), self.config.feature_index(name)?);
        }
        let depth = requested.values().copied().max().map_or(0, |d| d + 1);

        let mut outputs: Vec<Tensor3> = Vec::with_capacity(depth);
        let mut pool_records = HashMap::new();
        for i in 0..depth {
            let input = if i == 0 { image } else { &outputs[i - 1] };
            let layer = &self.config.layers[i];
            let out = match layer.kind {
                LayerKind::Conv { stride, padding, .. } => {
                    let p = self.params(i);
                    tensor::conv2d(input, &p.kernel, &p.bias, stride, padding)
                        .map_err(|e| Error::ShapeMismatch(format!("layer `{}`: {e}", layer.name)))?
                }
                LayerKind::Relu => tensor::relu(input),
                LayerKind::Pool { mode, size, stride } => {
                    let (out, rec) = tensor::pool2d(input, mode, size, stride)
                        .map_err(|e| Error::ShapeMismatch(format!("layer `{}`: {e}", layer.name)))?;
                    pool_records.insert(i, rec);
                    out
                }
            };
            outputs.push(out);
        }
        Ok(FeatureCache { input: image.clone(), outputs, pool_records, requested })
    }

    /// Gradient of `sum_l <grads[l], F_l(image)>` with respect to the image,
    /// where `F_l` are the features cached under each name.
    pub fn backward<S: AsRef<str>>(&self, cache: &FeatureCache, grads: &[(S, Tensor3)]) -> Result<Tensor3> {
        let mut injected: Vec<Option<Tensor3>> = vec![None; cache.outputs.len()];
        for (name, g) in grads {
            let name = name.as_ref();
            let idx = self.config.feature_index(name)?;
            if idx >= cache.outputs.len() {
                return Err(Error::UnknownLayer(format!("{name} (not computed by the forward pass)")));
            }
            g.expect_shape(cache.outputs[idx].shape(), &format!("gradient for `{name}`"))?;
            match &mut injected[idx] {
                Some(acc) => acc.add_scaled(g, 1.0)?,
                slot => *slot = Some(g.clone()),
            }
        }

        let mut running: Option<Tensor3> = None;
        for i in (0..cache.outputs.len()).rev() {
            if let Some(inj) = injected[i].take() {
                running = Some(match running {
                    Some(mut r) => {
                        r.add_scaled(&inj, 1.0)?;
                        r
                    }
                    None => inj,
                });
            }
            let Some(g) = running.take() else { continue };
            let input_shape = cache.layer_input(i).shape();
            let down = match self.config.layers[i].kind {
                LayerKind::Conv { stride, padding, .. } => {
                    tensor::conv2d_adjoint(&g, &self.params(i).kernel, input_shape, stride, padding)?
                }
                LayerKind::Relu => tensor::relu_adjoint(&g, cache.layer_input(i))?,
                LayerKind::Pool { .. } => tensor::pool2d_adjoint(&g, &cache.pool_records[&i])?,
            };
            running = Some(down);
        }
        Ok(running.unwrap_or_else(|| Tensor3::zeros(cache.input_shape())))
    }
}
