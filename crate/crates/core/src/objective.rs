//! Weighted multi-layer content + style objective over an input image.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::optim::{Evaluation, Problem};
use crate::style::{content_loss_and_grad, StyleKind, StyleTarget};
use crate::tensor::{Shape3, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct ContentEntry {
    pub layer: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleEntry {
    pub layer: String,
    pub weight: f64,
    pub kind: StyleKind,
}

/// Content and style layer pools. A layer may sit in both.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerPartition {
    pub content: Vec<ContentEntry>,
    pub style: Vec<StyleEntry>,
}

impl LayerPartition {
    /// Pools with weight `1 / pool size` on every entry.
    pub fn equal<S: AsRef<str>>(content: &[S], style: &[(S, StyleKind)]) -> Self {
        let cw = 1.0 / content.len().max(1) as f64;
        let sw = 1.0 / style.len().max(1) as f64;
        Self {
            content: content.iter().map(|l| ContentEntry { layer: l.as_ref().to_string(), weight: cw }).collect(),
            style: style
                .iter()
                .map(|(l, kind)| StyleEntry { layer: l.as_ref().to_string(), weight: sw, kind: *kind })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.content.is_empty() && self.style.is_empty() {
            return Err(Error::Config("partition has no content or style entries".into()));
        }
        let weights =
            self.content.iter().map(|e| (&e.layer, e.weight)).chain(self.style.iter().map(|e| (&e.layer, e.weight)));
        for (layer, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("layer `{layer}` has invalid weight {w}")));
            }
        }
        Ok(())
    }

    fn layers(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.content
            .iter()
            .map(|e| &e.layer)
            .chain(self.style.iter().map(|e| &e.layer))
            .filter(|l| seen.insert(l.as_str()))
            .cloned()
            .collect()
    }
}

/// Supplies fresh style targets between optimizer iterations.
pub trait TargetProvider: Send {
    /// New target for style entry `index`, or `None` to keep the current one.
    fn target(&mut self, iteration: usize, index: usize, entry: &StyleEntry) -> Result<Option<StyleTarget>>;
}

pub struct Objective {
    network: Arc<Network>,
    partition: LayerPartition,
    content_targets: Vec<Tensor3>,
    style_targets: Vec<StyleTarget>,
    alpha: f64,
    beta: f64,
    image_shape: Shape3,
    layers: Vec<String>,
    provider: Option<Box<dyn TargetProvider>>,
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Objective")
            .field("partition", &self.partition)
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("image_shape", &self.image_shape)
            .field("dynamic_targets", &self.provider.is_some())
            .finish_non_exhaustive()
    }
}

impl Objective {
    /// Extracts content targets from `content` and style targets from
    /// `style`. The optimized image takes the content image's shape, or the
    /// style image's when there are no content entries.
    pub fn build(
        network: Arc<Network>,
        partition: LayerPartition,
        content: Option<&Tensor3>,
        style: Option<&Tensor3>,
    ) -> Result<Self> {
        partition.validate()?;
        let style_targets = if partition.style.is_empty() {
            Vec::new()
        } else {
            let style = style.ok_or_else(|| Error::Config("style layers were given but no style image".into()))?;
            let layers: Vec<&str> = partition.style.iter().map(|e| e.layer.as_str()).collect();
            let cache = network.forward(style, &layers)?;
            partition
                .style
                .iter()
                .map(|e| Ok(StyleTarget::from_features(e.kind, cache.feature(&e.layer)?)))
                .collect::<Result<Vec<_>>>()?
        };
        let shape = match (content, style) {
            (Some(c), _) => c.shape(),
            (None, Some(s)) => s.shape(),
            (None, None) => return Err(Error::Config("objective needs a content or style image".into())),
        };
        if let (Some(c), Some(s)) = (content, style) {
            let spatial = partition.style.iter().any(|e| e.kind.is_spatial());
            if spatial && c.shape() != s.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "spatial style statistics need equal image sizes (content {}, style {}); resize both images to the same dimensions",
                    c.shape(),
                    s.shape()
                )));
            }
        }
        Self::assemble(network, partition, content, style_targets, shape)
    }

    /// Uses the given style targets (one per style entry, in order) instead
    /// of extracting them from a style image.
    pub fn from_targets(
        network: Arc<Network>,
        partition: LayerPartition,
        content: Option<&Tensor3>,
        style_targets: Vec<StyleTarget>,
        image_shape: Shape3,
    ) -> Result<Self> {
        partition.validate()?;
        if let Some(c) = content {
            c.expect_shape(image_shape, "content image")?;
        }
        Self::assemble(network, partition, content, style_targets, image_shape)
    }

    fn assemble(
        network: Arc<Network>,
        partition: LayerPartition,
        content: Option<&Tensor3>,
        style_targets: Vec<StyleTarget>,
        image_shape: Shape3,
    ) -> Result<Self> {
        if style_targets.len() != partition.style.len() {
            return Err(Error::Config(format!(
                "{} style targets for {} style entries",
                style_targets.len(),
                partition.style.len()
            )));
        }
        let layers = partition.layers();
        // resolves names and checks that the image survives the stack
        let probe = network.forward(&Tensor3::zeros(image_shape), &layers)?;

        let content_targets = if partition.content.is_empty() {
            Vec::new()
        } else {
            let content =
                content.ok_or_else(|| Error::Config("content layers were given but no content image".into()))?;
            let names: Vec<&str> = partition.content.iter().map(|e| e.layer.as_str()).collect();
            let cache = network.forward(content, &names)?;
            partition.content.iter().map(|e| cache.feature(&e.layer).cloned()).collect::<Result<Vec<_>>>()?
        };
        for (e, t) in partition.style.iter().zip(&style_targets) {
            if t.kind() != e.kind {
                return Err(Error::Config(format!(
                    "style layer `{}` expects a {} target, got {}",
                    e.layer,
                    e.kind.label(),
                    t.kind().label()
                )));
            }
            t.check(probe.feature(&e.layer)?.shape())
                .map_err(|err| Error::ShapeMismatch(format!("style layer `{}`: {err}", e.layer)))?;
        }
        Ok(Self {
            network,
            partition,
            content_targets,
            style_targets,
            alpha: 1.0,
            beta: 1.0,
            image_shape,
            layers,
            provider: None,
        })
    }

    /// Sets the content weight `alpha` and style weight `beta`.
    pub fn with_weights(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn with_target_provider(mut self, provider: Box<dyn TargetProvider>) -> Self {
        self.provider = Some(provider);
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn image_shape(&self) -> Shape3 {
        self.image_shape
    }

    pub fn style_targets(&self) -> &[StyleTarget] {
        &self.style_targets
    }

    pub fn content_targets(&self) -> &[Tensor3] {
        &self.content_targets
    }

    /// One label per breakdown term: content entries first, then style.
    pub fn labels(&self) -> Vec<String> {
        let content = self.partition.content.iter().map(|e| format!("content:{}", e.layer));
        let style = self.partition.style.iter().map(|e| format!("style:{}:{}", e.layer, e.kind.label()));
        content.chain(style).collect()
    }

    /// Total loss, image gradient, and every term's contribution to the
    /// total (already multiplied by its entry weight and by alpha or beta).
    pub fn eval(&self, image: &Tensor3) -> Result<Evaluation> {
        image.expect_shape(self.image_shape, "objective input image")?;
        let cache = self.network.forward(image, &self.layers)?;
        let mut terms = Vec::with_capacity(self.partition.content.len() + self.partition.style.len());
        let mut layer_grads: Vec<(String, Tensor3)> = Vec::new();
        let mut inject = |layer: &str, g: Tensor3, scale: f64| -> Result<()> {
            match layer_grads.iter_mut().find(|(l, _)| l == layer) {
                Some((_, acc)) => acc.add_scaled(&g, scale),
                None => {
                    let mut g = g;
                    g.scale(scale);
                    layer_grads.push((layer.to_string(), g));
                    Ok(())
                }
            }
        };

        for (e, target) in self.partition.content.iter().zip(&self.content_targets) {
            let scale = self.alpha * e.weight;
            if scale == 0.0 {
                terms.push(0.0);
                continue;
            }
            let (loss, grad) = content_loss_and_grad(cache.feature(&e.layer)?, target)?;
            terms.push(scale * loss);
            inject(&e.layer, grad, scale)?;
        }
        for (e, target) in self.partition.style.iter().zip(&self.style_targets) {
            let scale = self.beta * e.weight;
            if scale == 0.0 {
                terms.push(0.0);
                continue;
            }
            let (loss, grad) = target.loss_and_grad(cache.feature(&e.layer)?)?;
            terms.push(scale * loss);
            inject(&e.layer, grad, scale)?;
        }

        let loss = terms.iter().sum();
        let grad = self.network.backward(&cache, &layer_grads)?;
        Ok(Evaluation { loss, grad, terms })
    }

    /// Signature of the network's ReLU gates and max-pool winners at `image`.
    pub fn activation_signature(&self, image: &Tensor3) -> Result<u64> {
        let cache = self.network.forward(image, &self.layers)?;
        Ok(cache.activation_signature(self.network.config()))
    }

    /// Asks the target provider, if any, for fresh targets.
    pub fn refresh_targets(&mut self, iteration: usize) -> Result<()> {
        let Some(provider) = self.provider.as_mut() else { return Ok(()) };
        for (i, entry) in self.partition.style.iter().enumerate() {
            if let Some(t) = provider.target(iteration, i, entry)? {
                if t.kind() != entry.kind {
                    return Err(Error::Config(format!(
                        "target provider returned a {} target for {} layer `{}`",
                        t.kind().label(),
                        entry.kind.label(),
                        entry.layer
                    )));
                }
                t.check(self.style_targets[i].shape_hint())?;
                self.style_targets[i] = t;
            }
        }
        Ok(())
    }
}

impl StyleTarget {
    // feature shape implied by an existing target, for re-validation
    fn shape_hint(&self) -> Shape3 {
        match self {
            StyleTarget::Global(a) => Shape3::new(a.rows(), 1, 1),
            StyleTarget::Spatial(a) => Shape3::new(a.channels(), a.height().div_ceil(2), a.width().div_ceil(2)),
            StyleTarget::Pixelwise(a) | StyleTarget::Localized { field: a, .. } => {
                let [n, _, h, w] = a.dims();
                Shape3::new(n, h, w)
            }
        }
    }
}

impl Problem for Objective {
    fn shape(&self) -> Shape3 {
        self.image_shape
    }

    fn term_labels(&self) -> Vec<String> {
        self.labels()
    }

    fn evaluate(&self, x: &Tensor3) -> Result<Evaluation> {
        self.eval(x)
    }

    fn is_stationary(&self) -> bool {
        self.provider.is_none()
    }

    fn advance(&mut self, iteration: usize) -> Result<()> {
        self.refresh_targets(iteration)
    }

    fn activation_signature(&self, x: &Tensor3) -> Result<Option<u64>> {
        Objective::activation_signature(self, x).map(Some)
    }
}
