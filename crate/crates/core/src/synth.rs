//! Synthetic Gram targets and Gram histograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Gram target that is zero except for one symmetric pair of entries.
pub fn one_hot_gram(n: usize, i: usize, j: usize, magnitude: f64) -> Result<Matrix> {
    if i >= n || j >= n {
        return Err(Error::InvalidArgument(format!("entry ({i}, {j}) outside a {n}x{n} gram")));
    }
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidArgument(format!("one-hot magnitude must be positive, got {magnitude}")));
    }
    let mut m = Matrix::zeros(n, n);
    m.set(i, j, magnitude);
    m.set(j, i, magnitude);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGramSpec {
    pub n: usize,
    /// Fraction of entries the mask zeroes out.
    pub sparsity: f64,
    /// Standard deviation of the Gaussian before taking absolute values.
    pub sigma: f64,
    pub seed: u64,
}

impl SparseGramSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::InvalidArgument(format!("sparsity {} outside [0, 1]", self.sparsity)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// `|N(0, sigma^2)|` entries, symmetrized as `(M + M^T) / 2`, under a
/// symmetric Bernoulli zero-one mask that keeps each upper-triangle entry
/// with probability `1 - sparsity`.
pub fn random_sparse_gram(spec: &SparseGramSpec) -> Result<Matrix> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.sigma).expect("validated sigma");
    let raw = Matrix::from_fn(n, n, |_, _| normal.sample(&mut rng).abs());
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let keep = rng.random::<f64>() >= spec.sparsity;
            if keep {
                let v = 0.5 * (raw.at(i, j) + raw.at(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    /// `bins + 1` edges over `[0, max |entry|]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub zero_fraction: f64,
    pub max_abs: f64,
    pub mean_abs: f64,
}

impl GramStats {
    /// One `bin_lo,bin_hi,count` line per bin after a header.
    pub fn to_table(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[b], self.edges[b + 1], c));
        }
        s
    }
}

/// Histogram of `|G_ij|` plus the fraction of entries with `|G_ij| <= tau`.
pub fn gram_stats(g: &Matrix, bins: usize, tau: f64) -> Result<GramStats> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let abs: Vec<f64> = g.data().iter().map(|v| v.abs()).collect();
    let total = abs.len();
    let max_abs = abs.iter().copied().fold(0.0, f64::max);
    let mean_abs = if total == 0 { 0.0 } else { abs.iter().sum::<f64>() / total as f64 };
    let top = if max_abs > 0.0 { max_abs } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|b| top * b as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in &abs {
        let b = ((v / top) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let zeros = abs.iter().filter(|&&v| v <= tau).count();
    let zero_fraction = if total == 0 { 1.0 } else { zeros as f64 / total as f64 };
    Ok(GramStats { edges, counts, zero_fraction, max_abs, mean_abs })
}
