mod common;

use common::*;
use gramstyle::style::*;
use gramstyle::tensor::{Matrix, Shape3, Tensor3};
use proptest::prelude::*;
use rand::Rng;

/// Gram loss evaluated entry by entry from the formula.
fn gram_loss_oracle(f: &Tensor3, a: &Matrix) -> f64 {
    let n = f.channels();
    let m = f.height() * f.width();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g: f64 = f.plane(i).iter().zip(f.plane(j)).map(|(x, y)| x * y).sum();
            sum += (g - a.at(i, j)).powi(2);
        }
    }
    sum / (4.0 * (n * n * m * m) as f64)
}

fn rand_sym(r: &mut rand_chacha::ChaCha8Rng, n: usize, scale: f64) -> Matrix {
    let m = Matrix::from_fn(n, n, |_, _| r.random_range(-scale..scale));
    Matrix::from_fn(n, n, |i, j| 0.5 * (m.at(i, j) + m.at(j, i)))
}

#[test]
fn gram_examples() {
    let f = Tensor3::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(gram(&f).data(), &[5.0, 11.0, 11.0, 25.0]);
    assert!(gram(&Tensor3::zeros(Shape3::new(3, 2, 2))).data().iter().all(|&v| v == 0.0));
    let one = Tensor3::new(1, 2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    assert_eq!(gram(&one).data(), &[one.norm_sq()]);
}

#[test]
fn gram_loss_examples() {
    let f = Tensor3::new(1, 1, 1, vec![1.0]).unwrap();
    assert_eq!(gram_loss(&f, &Matrix::zeros(1, 1)).unwrap(), 0.25);
    let f = Tensor3::new(1, 1, 1, vec![1.7]).unwrap();
    let g = gram_loss_grad(&f, &Matrix::zeros(1, 1)).unwrap();
    assert!((g.data()[0] - 1.7f64.powi(3)).abs() < 1e-12);
    let mut r = rng(30);
    let f = rand_tensor(&mut r, Shape3::new(3, 4, 5), 1.0);
    let own = gram(&f);
    assert_eq!(gram_loss(&f, &own).unwrap(), 0.0);
    assert!(gram_loss_grad(&f, &own).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(gram_loss(&f, &Matrix::zeros(2, 2)).is_err());
}

#[test]
fn gram_loss_matches_formula_oracle() {
    let mut r = rng(31);
    for _ in 0..20 {
        let shape = Shape3::new(r.random_range(1..5), 3, 4);
        let f = rand_tensor(&mut r, shape, 2.0);
        let a = rand_sym(&mut r, f.channels(), 3.0);
        let got = gram_loss(&f, &a).unwrap();
        let want = gram_loss_oracle(&f, &a);
        assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn gram_gradient_matches_finite_differences() {
    let mut r = rng(32);
    let f = rand_tensor(&mut r, Shape3::new(3, 6, 6), 1.0);
    let a = rand_sym(&mut r, 3, 4.0);
    let grad = gram_loss_grad(&f, &a).unwrap();
    let err = fd_max_rel_error(&f, &grad, 1e-5, |x| gram_loss(x, &a).unwrap());
    assert!(err < 1e-6, "{err}");
    // a non-symmetric target exercises the symmetrized residual
    let skew = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
    let grad = gram_loss_grad(&f, &skew).unwrap();
    let err = fd_max_rel_error(&f, &grad, 1e-5, |x| gram_loss(x, &skew).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn spatial_examples() {
    let f = Tensor3::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
    assert_eq!(spatial_gram(&f).data(), &[1.0, 2.0, 1.0]);
    let f = Tensor3::zeros(Shape3::new(4, 8, 8));
    let s = spatial_gram(&f);
    assert_eq!(s.shape(), Shape3::new(4, 15, 15));
    assert!(s.data().iter().all(|&v| v == 0.0));
    let mut r = rng(33);
    let f = rand_tensor(&mut r, Shape3::new(2, 5, 5), 1.0);
    let own = spatial_gram(&f);
    assert_eq!(spatial_loss(&f, &own).unwrap(), 0.0);
    assert!(spatial_loss_grad(&f, &own).unwrap().data().iter().all(|&v| v == 0.0));
    let err = spatial_loss(&f, &Tensor3::zeros(Shape3::new(2, 9, 8))).unwrap_err();
    assert!(err.to_string().contains("resize"));
}

#[test]
fn spatial_gradient_matches_finite_differences() {
    let mut r = rng(34);
    let f = rand_tensor(&mut r, Shape3::new(2, 5, 5), 1.0);
    let a = rand_tensor(&mut r, Shape3::new(2, 9, 9), 3.0);
    let grad = spatial_loss_grad(&f, &a).unwrap();
    assert_eq!(grad.shape(), f.shape());
    let err = fd_max_rel_error(&f, &grad, 1e-5, |x| spatial_loss(x, &a).unwrap());
    assert!(err < 1e-6, "{err}");
    let f = rand_tensor(&mut r, Shape3::new(3, 4, 6), 1.0);
    let a = spatial_gram(&rand_tensor(&mut r, f.shape(), 1.0));
    let grad = spatial_loss_grad(&f, &a).unwrap();
    let err = fd_max_rel_error(&f, &grad, 1e-5, |x| spatial_loss(x, &a).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn pixelwise_matches_loop_oracle() {
    let mut r = rng(35);
    for _ in 0..50 {
        let shape = Shape3::new(r.random_range(1..4), 3, 4);
        let f = rand_tensor(&mut r, shape, 1.0);
        let g = pixelwise_gram(&f);
        for i in 0..f.channels() {
            for j in 0..f.channels() {
                for y in 0..3 {
                    for x in 0..4 {
                        assert!((g.at(i, j, y, x) - f.at(i, y, x) * f.at(j, y, x)).abs() < 1e-12);
                        assert_eq!(g.at(i, j, y, x), g.at(j, i, y, x));
                    }
                }
            }
        }
    }
    let f = Tensor3::new(2, 1, 1, vec![2.0, 3.0]).unwrap();
    assert_eq!(pixelwise_gram(&f).at(0, 1, 0, 0), 6.0);
}

#[test]
fn localized_matches_loop_oracle() {
    let mut r = rng(36);
    for case in 0..60 {
        let s = case % 4;
        let shape = Shape3::new(r.random_range(1..4), r.random_range(1..6), r.random_range(1..6));
        let f = rand_tensor(&mut r, shape, 1.0);
        let g = localized_gram(&f, s);
        let want = localized_oracle(&f, s);
        let [n, _, h, w] = g.dims();
        for i in 0..n {
            for j in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        assert!((g.at(i, j, y, x) - want[i][j][y][x]).abs() < 1e-12, "case {case}");
                    }
                }
            }
        }
    }
}

#[test]
fn localized_reduces_to_pixelwise() {
    let mut r = rng(37);
    for _ in 0..20 {
        let f = rand_tensor(&mut r, Shape3::new(3, 4, 5), 2.0);
        assert_eq!(localized_gram(&f, 0).data(), pixelwise_gram(&f).data());
        let a = pixelwise_gram(&rand_tensor(&mut r, f.shape(), 1.0));
        assert_eq!(localized_loss(&f, &a, 0).unwrap(), pixelwise_loss(&f, &a).unwrap());
    }
    assert_eq!(decay_weight(0, 0), 1.0);
    assert_eq!(decay_weight(1, 0), 0.5);
    assert_eq!(decay_weight(1, 1), 1.0 / 3.0);
}

#[test]
fn field_gradients_match_finite_differences() {
    let mut r = rng(38);
    let f = rand_tensor(&mut r, Shape3::new(3, 4, 4), 1.0);
    let a = pixelwise_gram(&rand_tensor(&mut r, f.shape(), 1.0));
    let grad = pixelwise_loss_grad(&f, &a).unwrap();
    let err = fd_max_rel_error(&f, &grad, 1e-5, |x| pixelwise_loss(x, &a).unwrap());
    assert!(err < 1e-6, "pixelwise {err}");
    for s in 0..3 {
        let a = localized_gram(&rand_tensor(&mut r, f.shape(), 1.0), s);
        let grad = localized_loss_grad(&f, &a, s).unwrap();
        let err = fd_max_rel_error(&f, &grad, 1e-5, |x| localized_loss(x, &a, s).unwrap());
        assert!(err < 1e-6, "localized {s}: {err}");
    }
}

#[test]
fn pixelwise_single_pixel_reduces_to_gram() {
    let f = Tensor3::new(1, 1, 1, vec![0.9]).unwrap();
    let a = GramField::new(1, 1, 1, vec![0.2]).unwrap();
    let g = Matrix::new(1, 1, vec![0.2]).unwrap();
    assert_eq!(pixelwise_loss_grad(&f, &a).unwrap().data(), gram_loss_grad(&f, &g).unwrap().data());
    let own = pixelwise_gram(&f);
    assert_eq!(pixelwise_loss(&f, &own).unwrap(), 0.0);
}

#[test]
fn content_loss_cases() {
    let mut r = rng(39);
    let f = rand_tensor(&mut r, Shape3::new(3, 5, 4), 1.0);
    let p = rand_tensor(&mut r, f.shape(), 1.0);
    assert_eq!(content_loss(&f, &f).unwrap(), 0.0);
    let grad = content_loss_grad(&f, &p).unwrap();
    let err = fd_max_rel_error(&f, &grad, 1e-5, |x| content_loss(x, &p).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn style_target_round_trip() {
    let mut r = rng(40);
    let f = rand_tensor(&mut r, Shape3::new(2, 3, 3), 1.0);
    for kind in [StyleKind::Global, StyleKind::Spatial, StyleKind::Pixelwise, StyleKind::Localized { radius: 2 }] {
        let t = StyleTarget::from_features(kind, &f);
        assert_eq!(t.kind(), kind);
        t.check(f.shape()).unwrap();
        let (loss, grad) = t.loss_and_grad(&f).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }
}

fn feature_map() -> impl Strategy<Value = Tensor3> {
    (1usize..=16, 1usize..6, 1usize..6, any::<u64>()).prop_map(|(n, h, w, seed)| {
        let mut r = rng(seed);
        rand_tensor(&mut r, Shape3::new(n, h, w), 1.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gram_is_symmetric_psd(f in feature_map()) {
        let g = gram(&f);
        prop_assert_eq!(&g, &g.transpose());
        let min = symmetric_eigenvalues(&g).into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-10 * g.trace(), "min eigenvalue {min}");
    }

    #[test]
    fn spatial_centre_is_gram_diagonal(f in feature_map()) {
        let g = gram(&f);
        let s = spatial_gram(&f);
        let (ch, cw) = (f.height() - 1, f.width() - 1);
        for i in 0..f.channels() {
            prop_assert!((s.at(i, ch, cw) - g.at(i, i)).abs() <= 1e-10 * g.at(i, i).max(1.0));
            for u in 0..s.height() {
                for v in 0..s.width() {
                    let mirror = s.at(i, s.height() - 1 - u, s.width() - 1 - v);
                    prop_assert!((s.at(i, u, v) - mirror).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_own_statistics(f in feature_map(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let other = rand_tensor(&mut r, f.shape(), 1.0);
        for kind in [StyleKind::Global, StyleKind::Spatial, StyleKind::Pixelwise, StyleKind::Localized { radius: 1 }] {
            let target = StyleTarget::from_features(kind, &other);
            prop_assert!(target.loss_and_grad(&f).unwrap().0 >= 0.0);
            prop_assert_eq!(StyleTarget::from_features(kind, &f).loss_and_grad(&f).unwrap().0, 0.0);
        }
    }

    #[test]
    fn field_symmetry(f in feature_map(), s in 0usize..3) {
        let g = localized_gram(&f, s);
        let n = f.channels();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(g.pair(i, j), g.pair(j, i));
            }
            prop_assert!(g.pair(i, i).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn jacobi_oracle_sanity() {
    let m = Matrix::new(3, 3, vec![2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]).unwrap();
    let mut ev = symmetric_eigenvalues(&m);
    ev.sort_by(f64::total_cmp);
    let want = [2.0 - 2f64.sqrt(), 2.0, 2.0 + 2f64.sqrt()];
    assert!(max_abs_diff(&ev, &want) < 1e-12);
}
