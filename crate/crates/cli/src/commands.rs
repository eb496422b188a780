//! The four subcommands. Each returns a report; nothing is printed here.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gramstyle::format::{read_arrays, write_arrays};
use gramstyle::image::{self, RawImage};
use gramstyle::optim::{noise_image, GradCheckReport, Quadratic, ScaledGradient};
use gramstyle::style::gram;
use gramstyle::synth::{gram_stats, one_hot_gram, random_sparse_gram, GramStats, SparseGramSpec};
use gramstyle::{
    grad_check, init_image, minimize, LayerPartition, Matrix, Network, Objective, OptRun, PixelRange, Problem, Shape3,
    StyleEntry, StyleKind, StyleTarget, TargetProvider, Tensor3, WeightStore,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{
    check_layers, config_err, CheckKind, GradcheckSection, HookName, InitName, JobConfig, MethodName, StatsSection,
    TargetSource,
};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Command-line values that take precedence over the job file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct RunReport {
    pub run: OptRun,
    pub image: PathBuf,
    pub trace: PathBuf,
}

impl RunReport {
    pub fn summary(&self) -> String {
        format!(
            "{} iterations ({} evaluations, {:?}); loss {:.6e} -> {:.6e}\nwrote {} and {}",
            self.run.iterations,
            self.run.evaluations,
            self.run.termination,
            self.run.initial_loss(),
            self.run.final_loss(),
            self.image.display(),
            self.trace.display()
        )
    }
}

#[derive(Debug)]
pub struct StatsReport {
    pub layers: Vec<(String, GramStats)>,
    pub dir: PathBuf,
}

impl StatsReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (layer, st) in &self.layers {
            let _ = writeln!(
                s,
                "{layer}: n={} zero_fraction={:.4} max_abs={:.6e} mean_abs={:.6e}",
                (st.counts.iter().sum::<usize>() as f64).sqrt().round() as usize,
                st.zero_fraction,
                st.max_abs,
                st.mean_abs
            );
        }
        let _ = write!(s, "wrote {}", self.dir.display());
        s
    }
}

#[derive(Debug)]
pub struct CheckReport {
    pub rows: Vec<(String, GradCheckReport)>,
    pub threshold: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|(_, r)| r.max_rel_error < self.threshold)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (label, r) in &self.rows {
            let verdict = if r.max_rel_error < self.threshold { "ok" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{label}: max_rel_error={:.3e} checked={} skipped={} {verdict}",
                r.max_rel_error, r.checked, r.skipped
            );
        }
        let _ = write!(s, "threshold {:.1e}", self.threshold);
        s
    }
}

fn load_job(path: &Path, ov: &Overrides) -> Result<JobConfig> {
    let mut job = JobConfig::load(path)?;
    if let Some(seed) = ov.seed {
        job.seed = seed;
    }
    Ok(job)
}

fn as_config(e: gramstyle::Error) -> CliError {
    config_err(e.to_string())
}

fn build_network(job: &JobConfig) -> Result<Arc<Network>> {
    let config = job.network_config()?;
    let weights = match (&job.weights.seed, &job.weights.path) {
        (Some(seed), _) => WeightStore::random_init(&config, *seed),
        (None, Some(path)) => {
            WeightStore::load(&config, path).map_err(|e| config_err(format!("weights {}: {e}", path.display())))?
        }
        (None, None) => return Err(config_err("[weights] needs `seed` or `path`")),
    };
    Ok(Arc::new(Network::new(config, weights).map_err(as_config)?))
}

fn read_image(path: &Path, role: &str) -> Result<RawImage> {
    image::load(path).map_err(|e| config_err(format!("{role} image {}: {e}", path.display())))
}

fn resized(img: RawImage, size: Option<[usize; 2]>) -> Result<RawImage> {
    match size {
        Some([h, w]) if (h, w) != (img.height, img.width) => image::resize_bilinear(&img, h, w).map_err(as_config),
        _ => Ok(img),
    }
}

/// Image and trace destinations. An `--output` override also moves the
/// trace next to it.
fn outputs(job: &JobConfig, ov: &Overrides) -> Result<(PathBuf, PathBuf)> {
    let image = ov
        .output
        .clone()
        .or_else(|| job.output.image.clone())
        .ok_or_else(|| config_err("no output image: set [output] image or pass --output"))?;
    let trace = match (&ov.output, &job.output.trace) {
        (None, Some(t)) => t.clone(),
        _ => image.with_extension("csv"),
    };
    Ok((image, trace))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(gramstyle::Error::from)?;
    }
    Ok(())
}

fn finish(job: &JobConfig, run: OptRun, image: PathBuf, trace: PathBuf) -> Result<RunReport> {
    let raw = image::deprocess(&run.image, &job.mean())?;
    ensure_parent(&image)?;
    image::save(&image, &raw)?;
    ensure_parent(&trace)?;
    fs::write(&trace, run.trace_csv()).map_err(gramstyle::Error::from)?;
    Ok(RunReport { run, image, trace })
}

/// Optimizes an image against the content and style terms of `[objective]`.
pub fn transfer(config: &Path, ov: &Overrides) -> Result<RunReport> {
    let job = load_job(config, ov)?;
    let net = build_network(&job)?;
    let partition = job.partition(net.config())?;
    if partition.content.is_empty() && partition.style.is_empty() {
        return Err(config_err("[objective] lists no content or style layers"));
    }
    let init = job.optimizer.init;
    let need_content = !partition.content.is_empty() || init == InitName::Content;
    let need_style = !partition.style.is_empty() || init == InitName::Style;
    let fetch = |path: &Option<PathBuf>, needed: bool, role: &str| -> Result<Option<RawImage>> {
        match path {
            Some(p) => read_image(p, role).map(Some),
            None if needed => Err(config_err(format!("[images] {role} is required by this objective"))),
            None => Ok(None),
        }
    };
    let mut content = fetch(&job.images.content, need_content, "content")?;
    let mut style = fetch(&job.images.style, need_style, "style")?;
    if job.images.size.is_some() {
        content = content.map(|c| resized(c, job.images.size)).transpose()?;
        style = style.map(|s| resized(s, job.images.size)).transpose()?;
    } else if job.images.match_style_to_content {
        if let Some(c) = &content {
            style = style.map(|s| resized(s, Some([c.height, c.width]))).transpose()?;
        }
    }

    let mean = job.mean();
    let prep =
        |img: &Option<RawImage>| img.as_ref().map(|i| image::preprocess(i, &mean)).transpose().map_err(as_config);
    let content = prep(&content)?;
    let style = prep(&style)?;
    let range = PixelRange::from_mean(&mean);
    let opt = job.opt_config(&range)?;
    let (out_image, out_trace) = outputs(&job, ov)?;

    let mut objective = Objective::build(net, partition, content.as_ref(), style.as_ref())
        .map_err(as_config)?
        .with_weights(job.objective.alpha, job.objective.beta);
    let base = content.as_ref().or(style.as_ref()).expect("objective needs an image");
    let start = init_image(job.init_mode(job.seed), base, style.as_ref(), &range).map_err(as_config)?;
    let run = minimize(&mut objective, &start, &opt)?;
    finish(&job, run, out_image, out_trace)
}

fn source_target(source: &TargetSource, n: usize, seed: u64, layer: &str) -> Result<Matrix> {
    match source {
        TargetSource::OneHot { i, j, magnitude } => one_hot_gram(n, *i, *j, *magnitude).map_err(as_config),
        TargetSource::Sparse { sparsity, sigma, seed: s } => {
            random_sparse_gram(&SparseGramSpec { n, sparsity: *sparsity, sigma: *sigma, seed: s.unwrap_or(seed) })
                .map_err(as_config)
        }
        TargetSource::File { path, name } => {
            let wanted = name.as_deref().unwrap_or(layer);
            let arrays = read_arrays(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let a = arrays
                .into_iter()
                .find(|a| a.name == wanted)
                .ok_or_else(|| config_err(format!("{} has no array `{wanted}`", path.display())))?;
            if a.dims != [n, n] {
                return Err(config_err(format!(
                    "array `{wanted}` has dims {:?}; layer `{layer}` needs [{n}, {n}]",
                    a.dims
                )));
            }
            Matrix::new(n, n, a.values).map_err(as_config)
        }
    }
}

/// Draws a new synthetic Gram target for every entry before each iteration.
struct Redraw {
    rng: ChaCha8Rng,
    sources: Vec<(TargetSource, usize)>,
}

impl TargetProvider for Redraw {
    fn target(
        &mut self,
        _iteration: usize,
        index: usize,
        _entry: &StyleEntry,
    ) -> gramstyle::Result<Option<StyleTarget>> {
        let (source, n) = &self.sources[index];
        let n = *n;
        let g = match source {
            TargetSource::OneHot { magnitude, .. } => {
                let (i, j) = (self.rng.random_range(0..n), self.rng.random_range(0..n));
                one_hot_gram(n, i, j, *magnitude)?
            }
            TargetSource::Sparse { sparsity, sigma, .. } => {
                random_sparse_gram(&SparseGramSpec { n, sparsity: *sparsity, sigma: *sigma, seed: self.rng.random() })?
            }
            TargetSource::File { .. } => return Ok(None),
        };
        Ok(Some(StyleTarget::Global(g)))
    }
}

/// Synthesizes an image from noise whose Gram matrices approach synthetic
/// or stored targets.
pub fn texture(config: &Path, ov: &Overrides) -> Result<RunReport> {
    let job = load_job(config, ov)?;
    let tex = job.texture.clone().ok_or_else(|| config_err("missing [texture] section"))?;
    if !job.objective.content.is_empty() || !job.objective.style.is_empty() {
        return Err(config_err("texture jobs take their layers from [[texture.targets]], not [objective]"));
    }
    if tex.targets.is_empty() {
        return Err(config_err("[texture] lists no targets"));
    }
    if job.optimizer.init != InitName::Noise {
        return Err(config_err("texture jobs start from noise"));
    }
    if tex.rerandomize {
        if job.optimizer.method == MethodName::Lbfgs {
            return Err(config_err("re-randomized targets need a first-order method (method = \"adam\")"));
        }
        if tex.targets.iter().any(|t| matches!(t.source, TargetSource::File { .. })) {
            return Err(config_err("file targets cannot be re-randomized"));
        }
    }

    let net = build_network(&job)?;
    let cfg = net.config();
    check_layers(cfg, tex.targets.iter().map(|t| t.layer.as_str()))?;
    let default_weight = 1.0 / tex.targets.len() as f64;
    let mut style = Vec::new();
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    for (k, t) in tex.targets.iter().enumerate() {
        let n = cfg.feature_channels(&t.layer).map_err(as_config)?;
        let seed = job.seed.wrapping_add(k as u64);
        targets.push(StyleTarget::Global(source_target(&t.source, n, seed, &t.layer)?));
        style.push(StyleEntry {
            layer: t.layer.clone(),
            weight: t.weight.unwrap_or(default_weight),
            kind: StyleKind::Global,
        });
        sources.push((t.source.clone(), n));
    }
    let shape = Shape3::new(cfg.input_channels, tex.height, tex.width);
    let partition = LayerPartition { content: Vec::new(), style };
    partition.validate().map_err(as_config)?;

    let range = PixelRange::from_mean(&job.mean());
    let opt = job.opt_config(&range)?;
    let (out_image, out_trace) = outputs(&job, ov)?;
    let mut objective = Objective::from_targets(net, partition, None, targets, shape)
        .map_err(as_config)?
        .with_weights(job.objective.alpha, job.objective.beta);
    if tex.rerandomize {
        let rng = ChaCha8Rng::seed_from_u64(job.seed);
        objective = objective.with_target_provider(Box::new(Redraw { rng, sources }));
    }
    let start = noise_image(shape, &range, job.seed).map_err(as_config)?;
    let run = minimize(&mut objective, &start, &opt)?;
    finish(&job, run, out_image, out_trace)
}

/// Writes a histogram table per layer plus all Gram matrices as one
/// array container.
pub fn gram_stats_cmd(config: &Path, ov: &Overrides) -> Result<StatsReport> {
    let job = load_job(config, ov)?;
    let stats = job.stats.clone().unwrap_or_else(StatsSection::default);
    let path = stats
        .image
        .clone()
        .or_else(|| job.images.content.clone())
        .ok_or_else(|| config_err("no image: set [stats] image or [images] content"))?;
    let dir = ov
        .output
        .clone()
        .or_else(|| job.output.dir.clone())
        .ok_or_else(|| config_err("no output directory: set [output] dir or pass --output"))?;
    let net = build_network(&job)?;
    let layers = if stats.layers.is_empty() {
        net.config().conv_shapes().into_iter().map(|c| c.name).collect()
    } else {
        stats.layers.clone()
    };
    check_layers(net.config(), layers.iter().map(String::as_str))?;
    if stats.bins == 0 {
        return Err(config_err("[stats] bins must be positive"));
    }

    let raw = resized(read_image(&path, "stats")?, job.images.size)?;
    let img = image::preprocess(&raw, &job.mean()).map_err(as_config)?;
    let cache = net.forward(&img, &layers)?;
    fs::create_dir_all(&dir).map_err(gramstyle::Error::from)?;
    let mut arrays = Vec::new();
    let mut rows = Vec::new();
    for layer in &layers {
        let g = gram(cache.feature(layer)?);
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(CliError::Failed(format!("non-finite Gram matrix at `{layer}`")));
        }
        let st = gram_stats(&g, stats.bins, stats.tau)?;
        fs::write(dir.join(format!("{layer}.csv")), st.to_table()).map_err(gramstyle::Error::from)?;
        arrays.push(StyleTarget::Global(g).to_array(layer.as_str()));
        rows.push((layer.clone(), st));
    }
    write_arrays(dir.join("grams.gfg"), &arrays)?;
    Ok(StatsReport { layers: rows, dir })
}

/// Compares analytic and finite-difference gradients for each loss kind on
/// random images.
pub fn gradcheck(config: &Path, ov: &Overrides) -> Result<CheckReport> {
    let job = load_job(config, ov)?;
    let gc = job.gradcheck.clone().unwrap_or_else(GradcheckSection::default);
    let kinds = gc.kinds.iter().map(|k| CheckKind::parse(k)).collect::<Result<Vec<_>>>()?;
    if gc.samples == 0 || !(gc.eps > 0.0) {
        return Err(config_err("[gradcheck] needs samples > 0 and eps > 0"));
    }
    let net = build_network(&job)?;
    check_layers(net.config(), gc.layers.iter().map(String::as_str))?;
    let shape = Shape3::new(net.config().input_channels, gc.height, gc.width);
    let range = PixelRange::from_mean(&job.mean());
    let noise = |offset: u64| noise_image(shape, &range, job.seed.wrapping_add(offset)).map_err(as_config);
    let (x, content, style) = (noise(0)?, noise(1)?, noise(2)?);
    let check = |p: &dyn Problem| grad_check(p, &x, gc.eps, gc.samples, job.seed);

    let mut rows = Vec::new();
    if gc.hook == Some(HookName::Quadratic) {
        // Small offsets keep the loss, and with it the roundoff in the
        // difference quotient, small relative to the gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
        let mut near = content.clone();
        near.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.01..0.01));
        let report = grad_check(&Quadratic { center: content }, &near, gc.eps, gc.samples, job.seed)?;
        rows.push(("quadratic".to_string(), report));
        return Ok(CheckReport { rows, threshold: gc.threshold });
    }
    for kind in kinds {
        let objective = kind_objective(&net, &gc.layers, kind, &content, &style)?;
        let report = match gc.hook {
            Some(HookName::Corrupted) => check(&ScaledGradient { inner: objective, factor: gc.corruption })?,
            _ => check(&objective)?,
        };
        rows.push((kind.label(), report));
    }
    Ok(CheckReport { rows, threshold: gc.threshold })
}

fn kind_objective(
    net: &Arc<Network>,
    layers: &[String],
    kind: CheckKind,
    content: &Tensor3,
    style: &Tensor3,
) -> Result<Objective> {
    let names: Vec<&str> = layers.iter().map(String::as_str).collect();
    let partition = match kind {
        CheckKind::Content => LayerPartition::equal(&names, &[]),
        CheckKind::Style(k) => LayerPartition::equal(&[], &names.iter().map(|&l| (l, k)).collect::<Vec<_>>()),
    };
    Objective::build(net.clone(), partition, Some(content), Some(style)).map_err(as_config)
}
