//! Logit and loss curvature of piecewise-linear networks at kink-free
//! points. Single-layer models satisfy both properties; ReLU networks with
//! a hidden layer do not, because each logit is bilinear in the weights of
//! consecutive layers.

use proptest::collection::vec;
use proptest::prelude::*;
use subcurve::autodiff::{fd_hessian, fd_logit_hessian, min_abs_preactivation, DEFAULT_DENSE_CAP};
use subcurve::data::Examples;
use subcurve::diagnostics::gauss_newton_hessian;
use subcurve::linalg::DenseMatrix;
use subcurve::model::{init_params, Activation, ModelSpec};

fn spec(hidden: Option<usize>) -> ModelSpec {
    match hidden {
        Some(h) => ModelSpec::new(vec![3, h, 3], Activation::Relu).unwrap(),
        None => ModelSpec::linear(3, 3),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logit_hessian_vanishes_away_from_kinks(
        hidden in proptest::option::of(2usize..6), seed in any::<u64>(), x in vec(-2.0f64..2.0, 3), k in 0usize..3,
    ) {
        let spec = spec(hidden);
        let params = init_params(&spec, seed);
        let inputs = DenseMatrix::from_rows(std::slice::from_ref(&x)).unwrap();
        prop_assume!(min_abs_preactivation(&spec, &params, &inputs).unwrap() > 1e-3);
        let h = fd_logit_hessian(&spec, &params, &x, k, 1e-6, DEFAULT_DENSE_CAP).unwrap();
        prop_assert!(h.max_abs() < 1e-5, "max |∂²z/∂θ²| = {:.3e}", h.max_abs());
    }

    #[test]
    fn gauss_newton_equals_hessian_away_from_kinks(
        hidden in proptest::option::of(2usize..6), seed in any::<u64>(),
        xs in vec(-2.0f64..2.0, 12), ys in vec(0usize..3, 4), n in 1usize..=4,
    ) {
        let spec = spec(hidden);
        let params = init_params(&spec, seed);
        let inputs = DenseMatrix::from_row_major(n, 3, xs[..3 * n].to_vec()).unwrap();
        prop_assume!(min_abs_preactivation(&spec, &params, &inputs).unwrap() > 1e-3);
        let batch = Examples::new(inputs, ys[..n].to_vec()).unwrap();
        let fd = fd_hessian(&spec, &params, &batch, 1e-5, DEFAULT_DENSE_CAP).unwrap();
        let gn = gauss_newton_hessian(&spec, &params, &batch).unwrap();
        let rel = fd.sub(&gn).unwrap().max_abs() / fd.max_abs();
        prop_assert!(rel < 1e-4, "relative |fd - GN|_inf = {:.3e}", rel);
    }
}
