//! Browser bindings for the demo page in `www/`. Every export returns a JSON
//! string; the plain functions underneath are what the native tests call.

use serde_json::{json, Value};
use subcurve::autodiff::{batch_logit_gradients, forward_batch};
use subcurve::data::{generate_blobs, BlobSpec, Dataset};
use subcurve::diagnostics::{
    class_gradients, expected_random_cosine, gauss_newton_hessian, quadratic_closed_form, quadratic_gd_trajectory,
    subspace_overlap, QuadraticProblem,
};
use subcurve::linalg::sym_eig;
use subcurve::model::{init_params, Activation, ModelSpec};
use subcurve::optimizers::{train_epoch, Method, MomentumPlacement, OptimizerConfig, TrainState};
use wasm_bindgen::prelude::*;

fn to_js(r: subcurve::Result<Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

/// Gradient descent on a random SPD quadratic at `eta = eta_scale / λ_max`.
pub fn quadratic(dim: usize, eta_scale: f64, steps: usize, seed: u64) -> subcurve::Result<Value> {
    let p = QuadraticProblem::random(dim, 0.1, 10.0, seed)?;
    let lmax = p.max_eigenvalue()?;
    let theta0 = vec![1.0; dim];
    let eta = eta_scale / lmax;
    Ok(json!({
        "lambda_max": lmax,
        "eta": eta,
        "distances": quadratic_gd_trajectory(&p, &theta0, eta, steps)?,
        "closed_form": quadratic_closed_form(&p, &theta0, eta, steps)?,
    }))
}

fn blobs(classes: usize, seed: u64) -> subcurve::Result<Dataset> {
    generate_blobs(&BlobSpec { classes, per_class: 60, dim: 6, mean_scale: 3.0, sigma: 1.0, seed })
}

fn demo_model(classes: usize) -> subcurve::Result<ModelSpec> {
    ModelSpec::new(vec![6, 16, classes], Activation::Relu)
}

fn optimizer(method: Method, eta: f64) -> OptimizerConfig {
    OptimizerConfig { method, eta, momentum_applies_to: MomentumPlacement::ProjectedOnly, ..OptimizerConfig::default() }
}

/// Trains `method` from a fixed initialisation; returns the model spec, the
/// final state and the per-epoch full-data loss and accuracy.
fn fit(data: &Dataset, method: Method, eta: f64, epochs: usize, seed: u64) -> subcurve::Result<(ModelSpec, TrainState, Value)> {
    let spec = demo_model(data.class_count)?;
    let cfg = optimizer(method, eta);
    let mut state = TrainState::new(&spec, init_params(&spec, seed), &cfg)?;
    let (mut losses, mut accs) = (Vec::new(), Vec::new());
    let mut diverged = None;
    for epoch in 0..epochs {
        let res = train_epoch(&spec, data, &cfg, &mut state, 16, seed ^ ((epoch as u64 + 1) << 20), None);
        if let Some(e) = res.failure {
            diverged = Some(e.to_string());
            break;
        }
        let f = forward_batch(&spec, &state.params, &data.examples)?;
        losses.push(f.mean_loss);
        accs.push(f.accuracy());
    }
    let curve = json!({ "loss": losses, "accuracy": accs, "diverged": diverged });
    Ok((spec, state, curve))
}

/// SGD and the quasi-Newton method from the same initialisation on a blobs
/// problem.
pub fn compare(classes: usize, eta: f64, epochs: usize, seed: u64) -> subcurve::Result<Value> {
    let data = blobs(classes, seed)?;
    let (_, _, sgd) = fit(&data, Method::Sgd, eta, epochs, seed)?;
    let (_, _, qn) = fit(&data, Method::QuasiNewton, eta, epochs, seed)?;
    Ok(json!({ "sgd": sgd, "quasi_newton": qn }))
}

/// Trains briefly, then compares the class gradients with the top
/// Gauss-Newton eigenvectors.
pub fn overlap(classes: usize, epochs: usize, seed: u64) -> subcurve::Result<Value> {
    let data = blobs(classes, seed)?;
    let (spec, state, _) = fit(&data, Method::QuasiNewton, 0.05, epochs, seed)?;
    let eig = sym_eig(&gauss_newton_hessian(&spec, &state.params, &data.examples)?)?;
    let lg = batch_logit_gradients(&spec, &state.params, &data.examples)?;
    let grads: Vec<Vec<f64>> = class_gradients(&lg, &data.examples.labels, classes).into_iter().flatten().collect();
    let report = subspace_overlap(&grads, &eig, 1e-6)?;
    let n = spec.param_count();
    Ok(json!({
        "params": n,
        "cosines": report.cosine_matrix,
        "assignment": report.assignment,
        "score": report.assignment_score,
        "combined_rank": report.combined_rank,
        "random_cosine": expected_random_cosine(n),
        "eigenvalues": eig.eigenvalues.iter().take(2 * classes).collect::<Vec<_>>(),
    }))
}

#[wasm_bindgen]
pub fn quadratic_demo(dim: usize, eta_scale: f64, steps: usize, seed: u32) -> Result<String, JsError> {
    to_js(quadratic(dim, eta_scale, steps, seed.into()))
}

#[wasm_bindgen]
pub fn compare_demo(classes: usize, eta: f64, epochs: usize, seed: u32) -> Result<String, JsError> {
    to_js(compare(classes, eta, epochs, seed.into()))
}

#[wasm_bindgen]
pub fn overlap_demo(classes: usize, epochs: usize, seed: u32) -> Result<String, JsError> {
    to_js(overlap(classes, epochs, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_crosses_the_boundary() {
        let stable = quadratic(5, 1.9, 100, 3).unwrap();
        let d = stable["distances"].as_array().unwrap();
        assert!(d.last().unwrap().as_f64().unwrap() < d[0].as_f64().unwrap());
        let unstable = quadratic(5, 2.1, 200, 3).unwrap();
        let d = unstable["distances"].as_array().unwrap();
        assert!(d.last().unwrap().as_f64().unwrap() > 1e3 * d[0].as_f64().unwrap());
    }

    #[test]
    fn both_methods_learn() {
        let v = compare(3, 0.05, 10, 1).unwrap();
        for m in ["sgd", "quasi_newton"] {
            assert!(v[m]["diverged"].is_null());
            assert!(v[m]["accuracy"].as_array().unwrap().last().unwrap().as_f64().unwrap() > 0.8, "{m}");
        }
    }

    #[test]
    fn overlap_reports_a_square_matrix() {
        let v = overlap(3, 5, 2).unwrap();
        assert_eq!(v["cosines"].as_array().unwrap().len(), 3);
        let score = v["score"].as_f64().unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&score));
        assert!(score > v["random_cosine"].as_f64().unwrap());
    }

    #[test]
    fn bad_inputs_are_errors() {
        assert!(quadratic(0, 1.9, 10, 1).is_err());
        assert!(quadratic(3, 1.9, 0, 1).is_err());
        assert!(compare(0, 0.1, 2, 0).is_err());
        assert!(compare(3, -0.1, 2, 0).is_err());
        assert!(compare(3, f64::NAN, 2, 0).is_err());
        assert!(overlap(0, 2, 0).is_err());
    }
}
