//! Pixel-space minimization: starting images, L-BFGS with a strong Wolfe
//! line search, an Adam fallback for non-stationary objectives, and
//! finite-difference gradient checks.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

/// Loss, gradient and per-term breakdown at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Tensor3,
    pub terms: Vec<f64>,
}

/// Something [`minimize`] and [`grad_check`] can work on.
pub trait Problem {
    fn shape(&self) -> Shape3;

    fn term_labels(&self) -> Vec<String>;

    fn evaluate(&self, x: &Tensor3) -> Result<Evaluation>;

    /// False when the objective changes between iterations.
    fn is_stationary(&self) -> bool {
        true
    }

    /// Called before each first-order iteration.
    fn advance(&mut self, _iteration: usize) -> Result<()> {
        Ok(())
    }

    /// Identifies the linear piece of a piecewise-smooth objective that `x`
    /// falls in; `None` if the objective is smooth.
    fn activation_signature(&self, _x: &Tensor3) -> Result<Option<u64>> {
        Ok(None)
    }
}

/// `||x - center||^2`, a problem with a known minimizer.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub center: Tensor3,
}

impl Problem for Quadratic {
    fn shape(&self) -> Shape3 {
        self.center.shape()
    }

    fn term_labels(&self) -> Vec<String> {
        vec!["quadratic".into()]
    }

    fn evaluate(&self, x: &Tensor3) -> Result<Evaluation> {
        let mut grad = x.clone();
        grad.add_scaled(&self.center, -1.0)?;
        let loss = grad.norm_sq();
        grad.scale(2.0);
        Ok(Evaluation { loss, grad, terms: vec![loss] })
    }
}

/// Wraps a problem and scales its analytic gradient; used to make sure
/// gradient checks actually catch broken gradients.
#[derive(Debug)]
pub struct ScaledGradient<P> {
    pub inner: P,
    pub factor: f64,
}

impl<P: Problem> Problem for ScaledGradient<P> {
    fn shape(&self) -> Shape3 {
        self.inner.shape()
    }

    fn term_labels(&self) -> Vec<String> {
        self.inner.term_labels()
    }

    fn evaluate(&self, x: &Tensor3) -> Result<Evaluation> {
        let mut e = self.inner.evaluate(x)?;
        e.grad.scale(self.factor);
        Ok(e)
    }

    fn activation_signature(&self, x: &Tensor3) -> Result<Option<u64>> {
        self.inner.activation_signature(x)
    }
}

/// Per-channel box in which pixels are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelRange {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl PixelRange {
    /// `[-mean, 255 - mean]` per channel: the image of `[0, 255]` under mean
    /// subtraction.
    pub fn from_mean(mean: &[f64]) -> Self {
        Self { low: mean.iter().map(|m| -m).collect(), high: mean.iter().map(|m| 255.0 - m).collect() }
    }

    pub fn uniform(channels: usize, low: f64, high: f64) -> Self {
        Self { low: vec![low; channels], high: vec![high; channels] }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.low.len() != channels || self.high.len() != channels {
            return Err(Error::Config(format!("pixel range must list {channels} channels")));
        }
        if self.low.iter().zip(&self.high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("pixel range needs low < high on every channel".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, t: &mut Tensor3) {
        let plane = t.shape().plane_len();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = v.clamp(self.low[c], self.high[c]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Noise { seed: u64 },
    Content,
    Style,
}

/// Starting image. Content and style modes copy their image; noise is
/// i.i.d. uniform over `range`.
pub fn init_image(mode: InitMode, content: &Tensor3, style: Option<&Tensor3>, range: &PixelRange) -> Result<Tensor3> {
    match mode {
        InitMode::Content => Ok(content.clone()),
        InitMode::Style => {
            let style = style.ok_or_else(|| Error::Config("style initialization needs a style image".into()))?;
            if style.shape() != content.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "style initialization needs a style image of the content size ({}), got {}",
                    content.shape(),
                    style.shape()
                )));
            }
            Ok(style.clone())
        }
        InitMode::Noise { seed } => noise_image(content.shape(), range, seed),
    }
}

pub fn noise_image(shape: Shape3, range: &PixelRange, seed: u64) -> Result<Tensor3> {
    range.validate(shape.channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor3::from_fn(shape, |c, _, _| rng.random_range(range.low[c]..range.high[c])))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Lbfgs { memory: usize, c1: f64, c2: f64 },
    Adam { step: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Method {
    pub fn lbfgs() -> Self {
        Method::Lbfgs { memory: 10, c1: 1e-4, c2: 0.9 }
    }

    pub fn adam(step: f64) -> Self {
        Method::Adam { step, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub max_iterations: usize,
    pub method: Method,
    pub clamp: Option<PixelRange>,
    /// Stop once the relative loss change over `window` iterations drops
    /// below this.
    pub tolerance: f64,
    pub window: usize,
    /// Record every k-th iteration in the trace (the first and last are
    /// always recorded).
    pub trace_every: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { max_iterations: 500, method: Method::lbfgs(), clamp: None, tolerance: 1e-7, window: 10, trace_every: 1 }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Lbfgs { memory, c1, c2 } => {
                if memory == 0 {
                    return Err(Error::Config("L-BFGS memory must be at least 1".into()));
                }
                if !(0.0 < c1 && c1 < c2 && c2 < 1.0) {
                    return Err(Error::Config(format!("Wolfe constants need 0 < c1 < c2 < 1, got {c1}, {c2}")));
                }
            }
            Method::Adam { step, beta1, beta2, eps } => {
                if !(step > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return Err(Error::Config("Adam needs step > 0, betas in [0, 1) and eps > 0".into()));
                }
            }
        }
        if self.trace_every == 0 {
            return Err(Error::Config("trace interval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    Converged,
    ZeroGradient,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub terms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptRun {
    pub image: Tensor3,
    pub trace: Vec<TraceRow>,
    pub term_labels: Vec<String>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Loss at every accepted iterate, starting with the initial image.
    pub accepted_losses: Vec<f64>,
}

impl OptRun {
    pub fn final_loss(&self) -> f64 {
        *self.accepted_losses.last().expect("run has at least the initial loss")
    }

    pub fn initial_loss(&self) -> f64 {
        self.accepted_losses[0]
    }

    /// `iteration,total,<term...>` header followed by one row per record.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,total");
        for l in &self.term_labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for row in &self.trace {
            write!(s, "{},{}", row.iteration, row.loss).unwrap();
            for t in &row.terms {
                write!(s, ",{t}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn checked(problem: &dyn Problem, x: &Tensor3) -> Result<Evaluation> {
    let e = problem.evaluate(x)?;
    if !e.loss.is_finite() {
        let labels = problem.term_labels();
        let culprit = e
            .terms
            .iter()
            .position(|t| !t.is_finite())
            .and_then(|i| labels.get(i).cloned())
            .unwrap_or_else(|| "total loss".into());
        return Err(Error::NonFinite(format!("loss term `{culprit}`")));
    }
    if let Some((c, y, x)) = e.grad.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient at channel {c}, row {y}, col {x}")));
    }
    Ok(e)
}

struct Recorder {
    every: usize,
    trace: Vec<TraceRow>,
    accepted: Vec<f64>,
}

impl Recorder {
    fn accept(&mut self, iteration: usize, e: &Evaluation) {
        self.accepted.push(e.loss);
        if iteration % self.every == 0 {
            self.trace.push(TraceRow { iteration, loss: e.loss, terms: e.terms.clone() });
        }
    }

    fn finish(&mut self, iteration: usize, e: &Evaluation) {
        if self.trace.last().map(|r| r.iteration) != Some(iteration) {
            self.trace.push(TraceRow { iteration, loss: e.loss, terms: e.terms.clone() });
        }
    }

    fn stalled(&self, window: usize, tolerance: f64) -> bool {
        let n = self.accepted.len();
        if n <= window {
            return false;
        }
        let old = self.accepted[n - 1 - window];
        let new = self.accepted[n - 1];
        (old - new).abs() <= tolerance * old.abs().max(f64::MIN_POSITIVE)
    }
}

/// Minimizes `problem` starting from `init`, projecting onto the clamp box
/// after every step.
pub fn minimize(problem: &mut dyn Problem, init: &Tensor3, cfg: &OptConfig) -> Result<OptRun> {
    cfg.validate()?;
    init.expect_shape(problem.shape(), "initial image")?;
    if let Some(r) = &cfg.clamp {
        r.validate(init.channels())?;
    }
    match cfg.method {
        Method::Lbfgs { memory, c1, c2 } => {
            if !problem.is_stationary() {
                return Err(Error::Config(
                    "L-BFGS needs a fixed objective; targets regenerated every iteration require the adam method"
                        .into(),
                ));
            }
            lbfgs(problem, init, cfg, memory, c1, c2)
        }
        Method::Adam { step, beta1, beta2, eps } => adam(problem, init, cfg, step, beta1, beta2, eps),
    }
}

fn project(x: &mut Tensor3, cfg: &OptConfig) {
    if let Some(r) = &cfg.clamp {
        r.clamp(x);
    }
}

struct Point {
    x: Tensor3,
    e: Evaluation,
}

fn lbfgs(
    problem: &mut dyn Problem,
    init: &Tensor3,
    cfg: &OptConfig,
    memory: usize,
    c1: f64,
    c2: f64,
) -> Result<OptRun> {
    let problem: &dyn Problem = problem;
    let mut x = init.clone();
    project(&mut x, cfg);
    let mut cur = Point { e: checked(problem, &x)?, x };
    let mut evaluations = 1;
    let mut rec = Recorder { every: cfg.trace_every, trace: Vec::new(), accepted: Vec::new() };
    rec.accept(0, &cur.e);

    let mut history: VecDeque<(Tensor3, Tensor3, f64)> = VecDeque::with_capacity(memory);
    let mut termination = Termination::MaxIterations;
    let mut iteration = 0;

    if cur.e.grad.max_abs() == 0.0 {
        termination = Termination::ZeroGradient;
    }
    while termination == Termination::MaxIterations && iteration < cfg.max_iterations {
        let mut dir = two_loop(&cur.e.grad, &history);
        let mut slope = cur.e.grad.dot(&dir)?;
        if !(slope < 0.0) {
            history.clear();
            dir = cur.e.grad.map(|g| -g);
            slope = -cur.e.grad.norm_sq();
        }
        let first_step = if history.is_empty() { 1.0 / cur.e.grad.max_abs() } else { 1.0 };

        let search = LineSearch { problem, cfg, origin: &cur, dir: &dir, slope, c1, c2 };
        let (next, evals) = search.run(first_step)?;
        evaluations += evals;
        let Some(next) = next else {
            if history.is_empty() {
                termination = Termination::LineSearchFailed;
                break;
            }
            // stale curvature; retry once from steepest descent
            history.clear();
            continue;
        };

        iteration += 1;
        let mut s = next.x.clone();
        s.add_scaled(&cur.x, -1.0)?;
        let mut y = next.e.grad.clone();
        y.add_scaled(&cur.e.grad, -1.0)?;
        let sy = s.dot(&y)?;
        if sy > 1e-12 * s.norm_sq().sqrt() * y.norm_sq().sqrt() && sy > 0.0 {
            if history.len() == memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        cur = next;
        rec.accept(iteration, &cur.e);

        if cur.e.grad.max_abs() == 0.0 {
            termination = Termination::ZeroGradient;
        } else if cur.e.loss == 0.0 || rec.stalled(cfg.window, cfg.tolerance) {
            termination = Termination::Converged;
        }
    }
    rec.finish(iteration, &cur.e);
    Ok(OptRun {
        image: cur.x,
        trace: rec.trace,
        term_labels: problem.term_labels(),
        iterations: iteration,
        evaluations,
        termination,
        accepted_losses: rec.accepted,
    })
}

/// `-H g` from the stored curvature pairs.
fn two_loop(grad: &Tensor3, history: &VecDeque<(Tensor3, Tensor3, f64)>) -> Tensor3 {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q).expect("same shape");
        q.add_scaled(y, -a).expect("same shape");
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = s.dot(y).expect("same shape") / y.norm_sq();
        q.scale(gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q).expect("same shape");
        q.add_scaled(s, a - b).expect("same shape");
    }
    q.scale(-1.0);
    q
}

struct LineSearch<'a> {
    problem: &'a dyn Problem,
    cfg: &'a OptConfig,
    origin: &'a Point,
    dir: &'a Tensor3,
    slope: f64,
    c1: f64,
    c2: f64,
}

struct Trial {
    step: f64,
    point: Point,
    slope: f64,
}

const MAX_BRACKET: usize = 25;
const MAX_ZOOM: usize = 25;

impl LineSearch<'_> {
    fn trial(&self, step: f64) -> Result<Trial> {
        let mut x = self.origin.x.clone();
        x.add_scaled(self.dir, step)?;
        project(&mut x, self.cfg);
        let e = checked(self.problem, &x)?;
        let slope = e.grad.dot(self.dir)?;
        Ok(Trial { step, point: Point { x, e }, slope })
    }

    fn armijo(&self, t: &Trial) -> bool {
        t.point.e.loss <= self.origin.e.loss + self.c1 * t.step * self.slope && t.point.e.loss < self.origin.e.loss
    }

    fn curvature(&self, t: &Trial) -> bool {
        t.slope.abs() <= -self.c2 * self.slope
    }

    /// Strong Wolfe search. Returns the accepted point, if any, and the
    /// number of evaluations spent.
    fn run(&self, first_step: f64) -> Result<(Option<Point>, usize)> {
        let mut evals = 0;
        let mut prev: Option<Trial> = None;
        let mut step = first_step;
        for i in 0..MAX_BRACKET {
            let t = self.trial(step)?;
            evals += 1;
            let prev_loss = prev.as_ref().map_or(self.origin.e.loss, |p| p.point.e.loss);
            if !self.armijo(&t) || (i > 0 && t.point.e.loss >= prev_loss) {
                let (p, n) = self.zoom(prev, (t.step, t.point.e.loss, t.slope))?;
                return Ok((p, evals + n));
            }
            if self.curvature(&t) {
                return Ok((Some(t.point), evals));
            }
            if t.slope >= 0.0 {
                let hi =
                    prev.as_ref().map_or((0.0, self.origin.e.loss, self.slope), |p| (p.step, p.point.e.loss, p.slope));
                let (p, n) = self.zoom(Some(t), hi)?;
                return Ok((p, evals + n));
            }
            step *= 4.0;
            prev = Some(t);
        }
        // never bracketed; the last trial still decreased the loss
        Ok((prev.map(|t| t.point), evals))
    }

    /// `lo` satisfies the sufficient-decrease condition (or is the origin
    /// when `None`); the minimizer lies between `lo` and `hi`.
    fn zoom(&self, lo: Option<Trial>, hi: (f64, f64, f64)) -> Result<(Option<Point>, usize)> {
        let origin = (0.0, self.origin.e.loss, self.slope);
        let mut lo = lo;
        let mut hi_v = hi;
        let mut evals = 0;
        for _ in 0..MAX_ZOOM {
            let lo_v = lo.as_ref().map_or(origin, |t| (t.step, t.point.e.loss, t.slope));
            let step = interpolate(lo_v, hi_v);
            if (step - lo_v.0).abs() <= f64::EPSILON * lo_v.0.abs().max(hi_v.0.abs()) {
                break;
            }
            let t = self.trial(step)?;
            evals += 1;
            if !self.armijo(&t) || t.point.e.loss >= lo_v.1 {
                hi_v = (t.step, t.point.e.loss, t.slope);
                continue;
            }
            if self.curvature(&t) {
                return Ok((Some(t.point), evals));
            }
            if t.slope * (hi_v.0 - lo_v.0) >= 0.0 {
                hi_v = lo_v;
            }
            lo = Some(t);
        }
        Ok((lo.map(|t| t.point), evals))
    }
}

/// Minimizer of the cubic through two (step, value, slope) triples,
/// safeguarded to the middle 80% of the interval.
fn interpolate(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    let (x0, f0, g0) = a;
    let (x1, f1, g1) = b;
    let lo = x0.min(x1);
    let hi = x0.max(x1);
    let margin = 0.1 * (hi - lo);
    let bisect = 0.5 * (x0 + x1);
    let d1 = g0 + g1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = d1 * d1 - g0 * g1;
    if !(disc >= 0.0) {
        return bisect;
    }
    let d2 = (x1 - x0).signum() * disc.sqrt();
    let x = x1 - (x1 - x0) * (g1 + d2 - d1) / (g1 - g0 + 2.0 * d2);
    if x.is_finite() && x >= lo + margin && x <= hi - margin {
        x
    } else {
        bisect
    }
}

#[allow(clippy::too_many_arguments)]
fn adam(
    problem: &mut dyn Problem,
    init: &Tensor3,
    cfg: &OptConfig,
    step: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<OptRun> {
    let mut x = init.clone();
    project(&mut x, cfg);
    let mut e = checked(problem, &x)?;
    let mut evaluations = 1;
    let mut rec = Recorder { every: cfg.trace_every, trace: Vec::new(), accepted: Vec::new() };
    rec.accept(0, &e);
    let mut m = Tensor3::zeros(x.shape());
    let mut v = Tensor3::zeros(x.shape());
    let mut termination = Termination::MaxIterations;
    let mut iteration = 0;
    if e.grad.max_abs() == 0.0 && problem.is_stationary() {
        termination = Termination::ZeroGradient;
    }
    while termination == Termination::MaxIterations && iteration < cfg.max_iterations {
        iteration += 1;
        let (b1t, b2t) = (1.0 - beta1.powi(iteration as i32), 1.0 - beta2.powi(iteration as i32));
        for (((xi, mi), vi), g) in x.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(e.grad.data()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            *xi -= step * (*mi / b1t) / ((*vi / b2t).sqrt() + eps);
        }
        project(&mut x, cfg);
        problem.advance(iteration)?;
        e = checked(problem, &x)?;
        evaluations += 1;
        rec.accept(iteration, &e);
        if problem.is_stationary() && (e.loss == 0.0 || rec.stalled(cfg.window, cfg.tolerance)) {
            termination = Termination::Converged;
        }
    }
    rec.finish(iteration, &e);
    Ok(OptRun {
        image: x,
        trace: rec.trace,
        term_labels: problem.term_labels(),
        iterations: iteration,
        evaluations,
        termination,
        accepted_losses: rec.accepted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate (channel, row, col) with the largest error.
    pub worst: (usize, usize, usize),
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU or
    /// max-pool switch.
    pub skipped: usize,
}

/// Compares the analytic gradient with central differences at `samples`
/// random coordinates.
///
/// The error at a coordinate is `|analytic - numeric| / max(|analytic|,
/// |numeric|, floor)` with `floor = 1e-8 * max |gradient|`, so entries that
/// are numerically zero do not dominate. Coordinates whose perturbation
/// changes the problem's activation signature are redrawn.
pub fn grad_check(
    problem: &dyn Problem,
    image: &Tensor3,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) || samples == 0 {
        return Err(Error::InvalidArgument("gradient check needs eps > 0 and at least one sample".into()));
    }
    let base = problem.evaluate(image)?;
    let base_sig = problem.activation_signature(image)?;
    let floor = (1e-8 * base.grad.max_abs()).max(f64::MIN_POSITIVE);
    let shape = image.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0, 0), checked: 0, skipped: 0 };
    let budget = samples * 20;
    let mut attempts = 0;
    while report.checked < samples && attempts < budget {
        attempts += 1;
        let idx = rng.random_range(0..shape.len());
        let mut plus = image.clone();
        plus.data_mut()[idx] += eps;
        let mut minus = image.clone();
        minus.data_mut()[idx] -= eps;
        if base_sig.is_some()
            && (problem.activation_signature(&plus)? != base_sig || problem.activation_signature(&minus)? != base_sig)
        {
            report.skipped += 1;
            continue;
        }
        // divide by the step actually taken, which differs from 2 eps once
        // x + eps is rounded
        let step = plus.data()[idx] - minus.data()[idx];
        let numeric = (problem.evaluate(&plus)?.loss - problem.evaluate(&minus)?.loss) / step;
        let analytic = base.grad.data()[idx];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if report.checked == 0 || err > report.max_rel_error {
            let plane = shape.plane_len();
            report.max_rel_error = err;
            report.worst = (idx / plane, (idx % plane) / shape.width, idx % shape.width);
        }
        report.checked += 1;
    }
    if report.checked == 0 {
        return Err(Error::InvalidArgument("every sampled coordinate crossed an activation switch; lower eps".into()));
    }
    Ok(report)
}
