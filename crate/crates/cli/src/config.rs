//! Job files. One TOML document describes a run; relative paths inside it
//! are resolved against the file's directory.

use std::path::{Path, PathBuf};

use gramstyle::network::VGG_MEAN;
use gramstyle::objective::{ContentEntry, StyleEntry};
use gramstyle::tensor::{Padding, PoolMode};
use gramstyle::{
    FeatureMode, InitMode, LayerKind, LayerPartition, LayerSpec, Method, NetworkConfig, OptConfig, PixelRange,
    StyleKind,
};
use serde::Deserialize;

use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    /// Drives noise initialization, target re-randomization and gradient
    /// check sampling.
    #[serde(default)]
    pub seed: u64,
    pub network: NetworkSection,
    pub weights: WeightsSection,
    #[serde(default)]
    pub images: ImagesSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub output: OutputSection,
    pub texture: Option<TextureSection>,
    pub stats: Option<StatsSection>,
    pub gradcheck: Option<GradcheckSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub preset: Option<String>,
    pub path: Option<PathBuf>,
    /// Pooling mode for presets.
    pub pooling: Option<PoolName>,
    #[serde(default)]
    pub features: FeatureName,
    /// Per-channel preprocessing mean; the VGG convention when absent.
    pub mean: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PoolName {
    Max,
    Average,
}

impl From<PoolName> for PoolMode {
    fn from(p: PoolName) -> Self {
        match p {
            PoolName::Max => PoolMode::Max,
            PoolName::Average => PoolMode::Average,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum FeatureName {
    Pre,
    #[default]
    Post,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub seed: Option<u64>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagesSection {
    pub content: Option<PathBuf>,
    pub style: Option<PathBuf>,
    /// `[height, width]` both images are resized to.
    pub size: Option<[usize; 2]>,
    /// Resize the style image to the content image's size.
    #[serde(default)]
    pub match_style_to_content: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub content: Vec<ContentEntryConfig>,
    #[serde(default)]
    pub style: Vec<StyleEntryConfig>,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, content: Vec::new(), style: Vec::new() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentEntryConfig {
    pub layer: String,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleEntryConfig {
    pub layer: String,
    pub weight: Option<f64>,
    #[serde(default)]
    pub kind: KindName,
    /// Window radius, for `kind = "localized"` only.
    pub radius: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum KindName {
    #[default]
    Global,
    Spatial,
    Pixelwise,
    Localized,
}

impl StyleEntryConfig {
    pub fn kind(&self) -> Result<StyleKind> {
        match (self.kind, self.radius) {
            (KindName::Global, None) => Ok(StyleKind::Global),
            (KindName::Spatial, None) => Ok(StyleKind::Spatial),
            (KindName::Pixelwise, None) => Ok(StyleKind::Pixelwise),
            (KindName::Localized, Some(radius)) => Ok(StyleKind::Localized { radius }),
            (KindName::Localized, None) => {
                Err(config_err(format!("style layer `{}`: localized needs a radius", self.layer)))
            }
            (_, Some(_)) => Err(config_err(format!("style layer `{}`: radius only applies to localized", self.layer))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default)]
    pub method: MethodName,
    #[serde(default)]
    pub init: InitName,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_memory")]
    pub memory: usize,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
    #[serde(default = "one")]
    pub step: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    /// Project pixels onto the valid range after every step.
    #[serde(default = "yes")]
    pub clamp: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        toml::from_str("").expect("all optimizer fields have defaults")
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    #[default]
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum InitName {
    #[default]
    Noise,
    Content,
    Style,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub image: Option<PathBuf>,
    /// Loss trace CSV; defaults to the image path with a `.csv` extension.
    pub trace: Option<PathBuf>,
    /// Directory for gram-stats tables.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSection {
    pub height: usize,
    pub width: usize,
    /// Draw fresh targets before every iteration (first-order methods only).
    #[serde(default)]
    pub rerandomize: bool,
    pub targets: Vec<TextureTarget>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TextureTarget {
    pub layer: String,
    pub weight: Option<f64>,
    #[serde(flatten)]
    pub source: TargetSource,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TargetSource {
    OneHot {
        i: usize,
        j: usize,
        magnitude: f64,
    },
    Sparse {
        sparsity: f64,
        sigma: f64,
        seed: Option<u64>,
    },
    /// A rank-2 array from a GFG1 container, looked up by `name` or else
    /// by the layer name.
    File {
        path: PathBuf,
        name: Option<String>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    /// Defaults to `images.content`.
    pub image: Option<PathBuf>,
    /// Defaults to every conv layer.
    #[serde(default)]
    pub layers: Vec<String>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for StatsSection {
    fn default() -> Self {
        toml::from_str("").expect("all stats fields have defaults")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_check_size")]
    pub height: usize,
    #[serde(default = "default_check_size")]
    pub width: usize,
    #[serde(default = "default_check_layers")]
    pub layers: Vec<String>,
    /// `content`, `global`, `spatial`, `pixelwise` or `localized<radius>`.
    #[serde(default = "default_check_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "default_check_eps")]
    pub eps: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub hook: Option<HookName>,
    /// Gradient scale applied by the `corrupted` hook.
    #[serde(default = "default_corruption")]
    pub corruption: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        toml::from_str("").expect("all gradcheck fields have defaults")
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum HookName {
    Quadratic,
    Corrupted,
}

/// A gradient-check case parsed from [`GradcheckSection::kinds`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Content,
    Style(StyleKind),
}

impl CheckKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "content" => CheckKind::Content,
            "global" => CheckKind::Style(StyleKind::Global),
            "spatial" => CheckKind::Style(StyleKind::Spatial),
            "pixelwise" => CheckKind::Style(StyleKind::Pixelwise),
            _ => {
                let radius = s
                    .strip_prefix("localized")
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| config_err(format!("unknown loss kind `{s}`")))?;
                CheckKind::Style(StyleKind::Localized { radius })
            }
        })
    }

    pub fn label(self) -> String {
        match self {
            CheckKind::Content => "content".into(),
            CheckKind::Style(k) => k.label(),
        }
    }
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_iterations() -> usize {
    200
}
fn default_memory() -> usize {
    10
}
fn default_c1() -> f64 {
    1e-4
}
fn default_c2() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_tolerance() -> f64 {
    1e-7
}
fn default_window() -> usize {
    10
}
fn default_trace_every() -> usize {
    1
}
fn default_bins() -> usize {
    20
}
fn default_tau() -> f64 {
    1e-12
}
fn default_check_size() -> usize {
    16
}
fn default_check_layers() -> Vec<String> {
    vec!["conv1-1".into(), "conv2-1".into()]
}
fn default_check_kinds() -> Vec<String> {
    ["content", "global", "spatial", "pixelwise", "localized0", "localized1", "localized2"].map(String::from).to_vec()
}
fn default_check_eps() -> f64 {
    1e-4
}
fn default_samples() -> usize {
    30
}
fn default_threshold() -> f64 {
    1e-4
}
fn default_corruption() -> f64 {
    1.01
}

pub(crate) fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl JobConfig {
    /// Reads and parses `path`, resolving relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut job = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        job.resolve(base);
        Ok(job)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let job: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        job.check()?;
        Ok(job)
    }

    fn check(&self) -> Result<()> {
        match (&self.weights.seed, &self.weights.path) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(config_err("[weights] needs exactly one of `seed` or `path`")),
        }
        match (&self.network.preset, &self.network.path) {
            (Some(_), None) => {}
            (None, Some(_)) if self.network.pooling.is_none() => {}
            (None, Some(_)) => return Err(config_err("[network] `pooling` only applies to presets")),
            _ => return Err(config_err("[network] needs exactly one of `preset` or `path`")),
        }
        for e in &self.objective.style {
            e.kind()?;
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p)
            }
        };
        opt(&mut self.network.path);
        opt(&mut self.weights.path);
        opt(&mut self.images.content);
        opt(&mut self.images.style);
        opt(&mut self.output.image);
        opt(&mut self.output.trace);
        opt(&mut self.output.dir);
        if let Some(stats) = &mut self.stats {
            opt(&mut stats.image);
        }
        if let Some(tex) = &mut self.texture {
            for t in &mut tex.targets {
                if let TargetSource::File { path, .. } = &mut t.source {
                    fix(path);
                }
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.network.mean.clone().unwrap_or_else(|| VGG_MEAN.to_vec())
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let mut config = match (&self.network.preset, &self.network.path) {
            (Some(name), _) => {
                let pool = self.network.pooling.unwrap_or(PoolName::Max).into();
                match name.as_str() {
                    "tinyvgg" => NetworkConfig::tinyvgg_with(pool),
                    "vgg19" => NetworkConfig::vgg19_with(pool),
                    other => return Err(config_err(format!("unknown network preset `{other}`"))),
                }
            }
            (None, Some(path)) => NetworkFile::load(path)?.into_config()?,
            (None, None) => return Err(config_err("[network] needs `preset` or `path`")),
        };
        config.features = match self.network.features {
            FeatureName::Pre => FeatureMode::Pre,
            FeatureName::Post => FeatureMode::Post,
        };
        if let Some(mean) = &self.network.mean {
            config.mean = mean.clone();
        }
        config.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(config)
    }

    /// Partition from `[objective]`, with missing weights set to
    /// `1 / pool size`. Layer names are checked against `config`.
    pub fn partition(&self, config: &NetworkConfig) -> Result<LayerPartition> {
        let cw = 1.0 / self.objective.content.len().max(1) as f64;
        let sw = 1.0 / self.objective.style.len().max(1) as f64;
        let content = self
            .objective
            .content
            .iter()
            .map(|e| ContentEntry { layer: e.layer.clone(), weight: e.weight.unwrap_or(cw) })
            .collect();
        let style = self
            .objective
            .style
            .iter()
            .map(|e| Ok(StyleEntry { layer: e.layer.clone(), weight: e.weight.unwrap_or(sw), kind: e.kind()? }))
            .collect::<Result<Vec<_>>>()?;
        let partition = LayerPartition { content, style };
        check_layers(config, partition.content.iter().map(|e| e.layer.as_str()))?;
        check_layers(config, partition.style.iter().map(|e| e.layer.as_str()))?;
        partition.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(partition)
    }

    pub fn init_mode(&self, seed: u64) -> InitMode {
        match self.optimizer.init {
            InitName::Noise => InitMode::Noise { seed },
            InitName::Content => InitMode::Content,
            InitName::Style => InitMode::Style,
        }
    }

    pub fn opt_config(&self, range: &PixelRange) -> Result<OptConfig> {
        let o = &self.optimizer;
        let method = match o.method {
            MethodName::Lbfgs => Method::Lbfgs { memory: o.memory, c1: o.c1, c2: o.c2 },
            MethodName::Adam => Method::Adam { step: o.step, beta1: o.beta1, beta2: o.beta2, eps: o.eps },
        };
        let cfg = OptConfig {
            max_iterations: o.max_iterations,
            method,
            clamp: o.clamp.then(|| range.clone()),
            tolerance: o.tolerance,
            window: o.window,
            trace_every: o.trace_every,
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }
}

pub(crate) fn check_layers<'a>(config: &NetworkConfig, layers: impl IntoIterator<Item = &'a str>) -> Result<()> {
    for l in layers {
        if config.layer_index(l).is_none() {
            return Err(config_err(format!("layer `{l}` is not in the network")));
        }
    }
    Ok(())
}

/// Custom network description.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub input_channels: usize,
    pub mean: Option<Vec<f64>>,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerEntry {
    Conv {
        name: String,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: PaddingName,
    },
    Relu {
        name: String,
    },
    Pool {
        name: String,
        #[serde(default = "default_pool_mode")]
        mode: PoolName,
        #[serde(default = "default_pool_size")]
        size: usize,
        #[serde(default = "default_pool_size")]
        stride: usize,
    },
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PaddingName {
    Valid,
    #[default]
    Same,
}

fn default_stride() -> usize {
    1
}
fn default_pool_mode() -> PoolName {
    PoolName::Max
}
fn default_pool_size() -> usize {
    2
}

impl NetworkFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read network file {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn into_config(self) -> Result<NetworkConfig> {
        let layers = self
            .layers
            .into_iter()
            .map(|l| match l {
                LayerEntry::Conv { name, out_channels, kernel_size, stride, padding } => LayerSpec {
                    name,
                    kind: LayerKind::Conv {
                        out_channels,
                        kernel_size,
                        stride,
                        padding: match padding {
                            PaddingName::Valid => Padding::Valid,
                            PaddingName::Same => Padding::Same,
                        },
                    },
                },
                LayerEntry::Relu { name } => LayerSpec::relu(name),
                LayerEntry::Pool { name, mode, size, stride } => {
                    LayerSpec { name, kind: LayerKind::Pool { mode: mode.into(), size, stride } }
                }
            })
            .collect();
        let mean = self.mean.unwrap_or_else(|| VGG_MEAN.iter().copied().cycle().take(self.input_channels).collect());
        let config = NetworkConfig { input_channels: self.input_channels, mean, layers, features: FeatureMode::Post };
        config.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(config)
    }
}
