//! Brute-force oracles and random fixtures shared by the integration tests.
#![allow(dead_code)]

use gramstyle::style::decay_weight;
use gramstyle::tensor::{Kernel, Matrix, PoolMode, Shape3, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape3, scale: f64) -> Tensor3 {
    Tensor3::from_fn(shape, |_, _, _| rng.random_range(-scale..scale))
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn rand_kernel(rng: &mut ChaCha8Rng, o: usize, i: usize, kh: usize, kw: usize) -> Kernel {
    let data = (0..o * i * kh * kw).map(|_| rng.random_range(-1.0..1.0)).collect();
    Kernel::new(o, i, kh, kw, data).unwrap()
}

/// Direct convolution with symmetric zero padding `pad`.
pub fn conv_oracle(input: &Tensor3, k: &Kernel, bias: &[f64], stride: usize, pad: usize) -> Tensor3 {
    let (h, w) = (input.height() as isize, input.width() as isize);
    let oh = (input.height() + 2 * pad - k.kh) / stride + 1;
    let ow = (input.width() + 2 * pad - k.kw) / stride + 1;
    let mut out = Tensor3::zeros(Shape3::new(k.out_channels, oh, ow));
    for o in 0..k.out_channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o];
                for i in 0..k.in_channels {
                    for ky in 0..k.kh {
                        for kx in 0..k.kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (x * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                acc += k.at(o, i, ky, kx) * input.at(i, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                out.set(o, y, x, acc);
            }
        }
    }
    out
}

/// Autocorrelation by scattering every pair product to its offset cell.
pub fn xcorr_full_oracle(a: &Matrix, b: &Matrix) -> Matrix {
    let (h, w) = a.dims();
    let mut out = Matrix::zeros(2 * h - 1, 2 * w - 1);
    for y1 in 0..h {
        for x1 in 0..w {
            for y2 in 0..h {
                for x2 in 0..w {
                    let u = y2 + h - 1 - y1;
                    let v = x2 + w - 1 - x1;
                    out.set(u, v, out.at(u, v) + a.at(y1, x1) * b.at(y2, x2));
                }
            }
        }
    }
    out
}

pub fn valid_xcorr_oracle(big: &Matrix, small: &Matrix) -> Matrix {
    let (bh, bw) = big.dims();
    let (sh, sw) = small.dims();
    Matrix::from_fn(bh - sh + 1, bw - sw + 1, |u, v| {
        let mut acc = 0.0;
        for i in 0..sh {
            for j in 0..sw {
                acc += big.at(u + i, v + j) * small.at(i, j);
            }
        }
        acc
    })
}

pub fn pool_oracle(input: &Tensor3, mode: PoolMode, size: usize, stride: usize) -> Tensor3 {
    let oh = (input.height() - size) / stride + 1;
    let ow = (input.width() - size) / stride + 1;
    Tensor3::from_fn(Shape3::new(input.channels(), oh, ow), |c, y, x| {
        let window = (0..size).flat_map(|dy| (0..size).map(move |dx| (dy, dx)));
        let vals: Vec<f64> = window.map(|(dy, dx)| input.at(c, y * stride + dy, x * stride + dx)).collect();
        match mode {
            PoolMode::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            PoolMode::Average => vals.iter().sum::<f64>() / vals.len() as f64,
        }
    })
}

/// Localized Gram straight from its windowed-sum definition, as
/// `[i][j][y][x]` nested vectors.
pub fn localized_oracle(f: &Tensor3, s: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
    let (n, h, w) = (f.channels(), f.height() as i64, f.width() as i64);
    let s = s as i64;
    let mut out = vec![vec![vec![vec![0.0; w as usize]; h as usize]; n]; n];
    for i in 0..n {
        for j in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in -s..=s {
                        for dx in -s..=s {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || yy >= h || xx < 0 || xx >= w {
                                continue;
                            }
                            let (yy, xx) = (yy as usize, xx as usize);
                            acc += decay_weight(dx, dy) * f.at(i, yy, xx) * f.at(j, yy, xx);
                        }
                    }
                    out[i][j][y as usize][x as usize] = acc;
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst `|a - n| / max(|a|, |n|, floor)` between an analytic gradient and
/// central differences of `f`, over every coordinate of `x`.
pub fn fd_max_rel_error(x: &Tensor3, analytic: &Tensor3, eps: f64, mut f: impl FnMut(&Tensor3) -> f64) -> f64 {
    let floor = 1e-8 * analytic.max_abs().max(1e-30);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| m.at(r, c)).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| a[r][c] * a[r][c])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}
