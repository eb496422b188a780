//! Style and content statistics of a feature map, their losses, and the
//! exact gradients of those losses with respect to the feature map.
//!
//! Every style loss shares the normalization `1 / (4 N^2 M^2)` where `N` is
//! the filter count and `M` the number of spatial positions of the layer.
//! Gradients are the analytic derivatives of the implemented losses. When
//! the target is symmetric they reduce to the familiar
//! `1 / (N^2 M^2) * sum_j (G - A)_ij F_j` form.

use crate::error::{shape_err, Error, Result};
use crate::format::NamedArray;
use crate::tensor::{compensated_sum, full_xcorr_auto, valid_xcorr, Matrix, Shape3, Tensor3};

/// Per-position pairwise statistic, `N x N x H x W`, indexed `(i, j, y, x)`.
///
/// Holds both the pixelwise Gram `F_i(p) F_j(p)` and its decay-weighted
/// windowed (localized) version.
#[derive(Debug, Clone, PartialEq)]
pub struct GramField {
    filters: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GramField {
    pub fn zeros(filters: usize, height: usize, width: usize) -> Self {
        Self { filters, height, width, data: vec![0.0; filters * filters * height * width] }
    }

    pub fn new(filters: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != filters * filters * height * width {
            return shape_err(format!(
                "gram field {filters}x{filters}x{height}x{width} needs {} values, got {}",
                filters * filters * height * width,
                data.len()
            ));
        }
        Ok(Self { filters, height, width, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.filters, self.filters, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> f64 {
        self.data[((i * self.filters + j) * self.height + y) * self.width + x]
    }

    /// The `H x W` plane for the pair `(i, j)`.
    pub fn pair(&self, i: usize, j: usize) -> &[f64] {
        let n = self.height * self.width;
        let start = (i * self.filters + j) * n;
        &self.data[start..start + n]
    }

    fn pair_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let n = self.height * self.width;
        let start = (i * self.filters + j) * n;
        &mut self.data[start..start + n]
    }
}

fn layer_sizes(f: &Tensor3) -> Result<(f64, f64)> {
    let s = f.shape();
    if s.is_empty() {
        return Err(Error::InvalidArgument(format!("empty feature map {s}")));
    }
    Ok((s.channels as f64, s.plane_len() as f64))
}

/// `G_ij = <F_i, F_j>` summed over all spatial positions.
pub fn gram(f: &Tensor3) -> Matrix {
    let n = f.channels();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        let fi = f.plane(i);
        for j in i..n {
            let v: f64 = fi.iter().zip(f.plane(j)).map(|(a, b)| a * b).sum();
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

fn check_gram_target(f: &Tensor3, a: &Matrix) -> Result<()> {
    let n = f.channels();
    if a.dims() != (n, n) {
        return shape_err(format!("gram target is {:?}, layer has {n} filters", a.dims()));
    }
    Ok(())
}

/// `1 / (4 N^2 M^2) * ||gram(F) - A||_F^2`
pub fn gram_loss(f: &Tensor3, a: &Matrix) -> Result<f64> {
    gram_loss_and_grad(f, a).map(|(l, _)| l)
}

pub fn gram_loss_grad(f: &Tensor3, a: &Matrix) -> Result<Tensor3> {
    gram_loss_and_grad(f, a).map(|(_, g)| g)
}

pub fn gram_loss_and_grad(f: &Tensor3, a: &Matrix) -> Result<(f64, Tensor3)> {
    check_gram_target(f, a)?;
    let (n, m) = layer_sizes(f)?;
    let g = gram(f);
    let nf = f.channels();
    let diff = Matrix::from_fn(nf, nf, |i, j| g.at(i, j) - a.at(i, j));
    let loss = diff.frobenius_sq() / (4.0 * n * n * m * m);
    let scale = 1.0 / (n * n * m * m);
    let mut grad = Tensor3::zeros(f.shape());
    for i in 0..nf {
        let out = grad.plane_mut(i);
        for j in 0..nf {
            let c = 0.5 * (diff.at(i, j) + diff.at(j, i)) * scale;
            if c == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(f.plane(j)) {
                *o += c * v;
            }
        }
    }
    Ok((loss, grad))
}

/// Per-filter full autocorrelation planes, `N x (2H-1) x (2W-1)`.
pub fn spatial_gram(f: &Tensor3) -> Tensor3 {
    let s = f.shape();
    let (oh, ow) = (2 * s.height.max(1) - 1, 2 * s.width.max(1) - 1);
    let mut out = Tensor3::zeros(Shape3::new(s.channels, oh, ow));
    if s.plane_len() == 0 {
        return out;
    }
    for c in 0..s.channels {
        let plane = f.plane_matrix(c);
        let auto = full_xcorr_auto(&plane, &plane).expect("equal planes");
        out.plane_mut(c).copy_from_slice(auto.data());
    }
    out
}

fn check_spatial_target(f: &Tensor3, a: &Tensor3) -> Result<()> {
    let s = f.shape();
    let want = Shape3::new(s.channels, 2 * s.height - 1, 2 * s.width - 1);
    if a.shape() != want {
        return shape_err(format!(
            "spatial target is {}, features {s} need {want}; resize content and style images to the same dimensions",
            a.shape()
        ));
    }
    Ok(())
}

pub fn spatial_loss(f: &Tensor3, a: &Tensor3) -> Result<f64> {
    spatial_loss_and_grad(f, a).map(|(l, _)| l)
}

pub fn spatial_loss_grad(f: &Tensor3, a: &Tensor3) -> Result<Tensor3> {
    spatial_loss_and_grad(f, a).map(|(_, g)| g)
}

/// Loss `1 / (4 N^2 M^2) * sum_i ||G_i - A_i||^2` over autocorrelation planes.
///
/// The gradient for filter `i` is the valid correlation of the
/// symmetrized residual `(G - A)_i` against `F_i`, read back in reverse.
pub fn spatial_loss_and_grad(f: &Tensor3, a: &Tensor3) -> Result<(f64, Tensor3)> {
    let (n, m) = layer_sizes(f)?;
    check_spatial_target(f, a)?;
    let g = spatial_gram(f);
    let s = f.shape();
    let (gh, gw) = (g.height(), g.width());
    let mut loss = 0.0;
    let mut grad = Tensor3::zeros(s);
    let scale = 1.0 / (2.0 * n * n * m * m);
    for c in 0..s.channels {
        let diff: Vec<f64> = g.plane(c).iter().zip(a.plane(c)).map(|(x, y)| x - y).collect();
        loss += compensated_sum(diff.iter().map(|d| d * d));
        // residual plus its 180-degree rotation
        let sym: Vec<f64> = diff.iter().zip(diff.iter().rev()).map(|(x, y)| x + y).collect();
        let sym = Matrix::new(gh, gw, sym)?;
        let corr = valid_xcorr(&sym, &f.plane_matrix(c))?;
        for (o, v) in grad.plane_mut(c).iter_mut().zip(corr.data().iter().rev()) {
            *o = scale * v;
        }
    }
    Ok((loss / (4.0 * n * n * m * m), grad))
}

/// `G_ij(p) = F_i(p) F_j(p)` at every position.
pub fn pixelwise_gram(f: &Tensor3) -> GramField {
    let s = f.shape();
    let mut out = GramField::zeros(s.channels, s.height, s.width);
    for i in 0..s.channels {
        for j in 0..s.channels {
            let fi = f.plane(i);
            let fj = f.plane(j);
            for ((o, a), b) in out.pair_mut(i, j).iter_mut().zip(fi).zip(fj) {
                *o = a * b;
            }
        }
    }
    out
}

/// `1 / (1 + dx^2 + dy^2)`
pub fn decay_weight(dx: i64, dy: i64) -> f64 {
    1.0 / (1 + dx * dx + dy * dy) as f64
}

/// Decay-weighted window sum `out(p) = sum_{|d|_inf <= s} w(d) plane(p + d)`,
/// with out-of-range positions contributing nothing. The centre term is
/// accumulated first so `s = 0` reproduces the input bit for bit.
fn window_filter(plane: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let mut out = plane.to_vec();
    if radius == 0 {
        return out;
    }
    let r = radius as i64;
    let (h, w) = (height as i64, width as i64);
    for y in 0..h {
        for x in 0..w {
            let mut acc = out[(y * w + x) as usize];
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if (dx == 0 && dy == 0) || xx < 0 || xx >= w {
                        continue;
                    }
                    acc += decay_weight(dx, dy) * plane[(yy * w + xx) as usize];
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Decay-weighted windowed correlations around every position. Offsets
/// falling outside the map contribute zero.
pub fn localized_gram(f: &Tensor3, radius: usize) -> GramField {
    let mut field = pixelwise_gram(f);
    if radius == 0 {
        // the window is just the centre, weighted by w(0, 0) = 1
        return field;
    }
    let (h, w) = (field.height, field.width);
    for i in 0..field.filters {
        for j in 0..field.filters {
            let filtered = window_filter(field.pair(i, j), h, w, radius);
            field.pair_mut(i, j).copy_from_slice(&filtered);
        }
    }
    field
}

fn check_field_target(f: &Tensor3, a: &GramField) -> Result<()> {
    let s = f.shape();
    let want = [s.channels, s.channels, s.height, s.width];
    if a.dims() != want {
        return shape_err(format!(
            "field target is {:?}, features need {want:?}; resize content and style images to the same dimensions",
            a.dims()
        ));
    }
    Ok(())
}

pub fn pixelwise_loss(f: &Tensor3, a: &GramField) -> Result<f64> {
    localized_loss_and_grad(f, a, 0).map(|(l, _)| l)
}

pub fn pixelwise_loss_grad(f: &Tensor3, a: &GramField) -> Result<Tensor3> {
    localized_loss_and_grad(f, a, 0).map(|(_, g)| g)
}

pub fn localized_loss(f: &Tensor3, a: &GramField, radius: usize) -> Result<f64> {
    localized_loss_and_grad(f, a, radius).map(|(l, _)| l)
}

pub fn localized_loss_grad(f: &Tensor3, a: &GramField, radius: usize) -> Result<Tensor3> {
    localized_loss_and_grad(f, a, radius).map(|(_, g)| g)
}

/// Loss `1 / (4 N^2 M^2) * sum_{i,j,p} (G_ij(p) - A_ij(p))^2` for the
/// localized Gram of window `radius` (`0` is the pixelwise Gram).
///
/// The window sum is self-adjoint (symmetric weights, zero outside), so the
/// gradient filters the symmetrized residual with the same window and
/// contracts it against `F`.
pub fn localized_loss_and_grad(f: &Tensor3, a: &GramField, radius: usize) -> Result<(f64, Tensor3)> {
    let (n, m) = layer_sizes(f)?;
    check_field_target(f, a)?;
    let g = localized_gram(f, radius);
    let s = f.shape();
    let nf = s.channels;
    let loss = compensated_sum(g.data.iter().zip(&a.data).map(|(x, y)| (x - y) * (x - y))) / (4.0 * n * n * m * m);

    let scale = 1.0 / (n * n * m * m);
    let mut grad = Tensor3::zeros(s);
    for i in 0..nf {
        for j in i..nf {
            let sym: Vec<f64> = g
                .pair(i, j)
                .iter()
                .zip(a.pair(i, j))
                .zip(g.pair(j, i).iter().zip(a.pair(j, i)))
                .map(|((gij, aij), (gji, aji))| 0.5 * ((gij - aij) + (gji - aji)))
                .collect();
            let weighted = window_filter(&sym, s.height, s.width, radius);
            for (o, (wv, fj)) in grad.plane_mut(i).iter_mut().zip(weighted.iter().zip(f.plane(j))) {
                *o += scale * wv * fj;
            }
            if i != j {
                for (o, (wv, fi)) in grad.plane_mut(j).iter_mut().zip(weighted.iter().zip(f.plane(i))) {
                    *o += scale * wv * fi;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// `1 / (2 N M) * ||F - P||^2`
pub fn content_loss(f: &Tensor3, p: &Tensor3) -> Result<f64> {
    content_loss_and_grad(f, p).map(|(l, _)| l)
}

pub fn content_loss_grad(f: &Tensor3, p: &Tensor3) -> Result<Tensor3> {
    content_loss_and_grad(f, p).map(|(_, g)| g)
}

pub fn content_loss_and_grad(f: &Tensor3, p: &Tensor3) -> Result<(f64, Tensor3)> {
    if f.shape() != p.shape() {
        return shape_err(format!("content target is {}, features are {}", p.shape(), f.shape()));
    }
    let (n, m) = layer_sizes(f)?;
    let mut grad = f.clone();
    grad.add_scaled(p, -1.0)?;
    let loss = grad.norm_sq() / (2.0 * n * m);
    grad.scale(1.0 / (n * m));
    Ok((loss, grad))
}

/// Which style statistic a style-layer entry matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StyleKind {
    Global,
    Spatial,
    Pixelwise,
    Localized { radius: usize },
}

impl StyleKind {
    /// Kinds whose statistic depends on the feature map's spatial size.
    pub fn is_spatial(self) -> bool {
        !matches!(self, StyleKind::Global)
    }

    pub fn label(self) -> String {
        match self {
            StyleKind::Global => "global".into(),
            StyleKind::Spatial => "spatial".into(),
            StyleKind::Pixelwise => "pixelwise".into(),
            StyleKind::Localized { radius } => format!("localized{radius}"),
        }
    }
}

/// A style target for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum StyleTarget {
    Global(Matrix),
    Spatial(Tensor3),
    Pixelwise(GramField),
    Localized { radius: usize, field: GramField },
}

impl StyleTarget {
    pub fn from_features(kind: StyleKind, f: &Tensor3) -> Self {
        match kind {
            StyleKind::Global => StyleTarget::Global(gram(f)),
            StyleKind::Spatial => StyleTarget::Spatial(spatial_gram(f)),
            StyleKind::Pixelwise => StyleTarget::Pixelwise(pixelwise_gram(f)),
            StyleKind::Localized { radius } => StyleTarget::Localized { radius, field: localized_gram(f, radius) },
        }
    }

    pub fn kind(&self) -> StyleKind {
        match self {
            StyleTarget::Global(_) => StyleKind::Global,
            StyleTarget::Spatial(_) => StyleKind::Spatial,
            StyleTarget::Pixelwise(_) => StyleKind::Pixelwise,
            StyleTarget::Localized { radius, .. } => StyleKind::Localized { radius: *radius },
        }
    }

    /// Checks that this target can be compared with features of `shape`.
    pub fn check(&self, shape: Shape3) -> Result<()> {
        let probe = Tensor3::zeros(Shape3::new(shape.channels, shape.height.max(1), shape.width.max(1)));
        match self {
            StyleTarget::Global(a) => check_gram_target(&probe, a),
            StyleTarget::Spatial(a) => check_spatial_target(&probe, a),
            StyleTarget::Pixelwise(a) | StyleTarget::Localized { field: a, .. } => check_field_target(&probe, a),
        }
    }

    pub fn loss_and_grad(&self, f: &Tensor3) -> Result<(f64, Tensor3)> {
        match self {
            StyleTarget::Global(a) => gram_loss_and_grad(f, a),
            StyleTarget::Spatial(a) => spatial_loss_and_grad(f, a),
            StyleTarget::Pixelwise(a) => localized_loss_and_grad(f, a, 0),
            StyleTarget::Localized { radius, field } => localized_loss_and_grad(f, field, *radius),
        }
    }

    pub fn to_array(&self, name: impl Into<String>) -> NamedArray {
        let (dims, values) = match self {
            StyleTarget::Global(a) => (vec![a.rows(), a.cols()], a.data().to_vec()),
            StyleTarget::Spatial(a) => {
                let s = a.shape();
                (vec![s.channels, s.height, s.width], a.data().to_vec())
            }
            StyleTarget::Pixelwise(a) | StyleTarget::Localized { field: a, .. } => (a.dims().to_vec(), a.data.clone()),
        };
        NamedArray { name: name.into(), dims, values }
    }
}
