//! WebAssembly bindings for the browser demo in `www/`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// RGBA pixels of an L-shape; `occluded` blacks out one random rectangle.
#[wasm_bindgen]
pub fn render_l(
    size: usize,
    orientation: f64,
    hue: f64,
    leg_fraction: f64,
    hue_noise_std: f64,
    occluded: bool,
    seed: u64,
) -> Result<Vec<u8>, JsError> {
    demo::render_rgba(
        size,
        orientation,
        hue,
        leg_fraction,
        hue_noise_std,
        occluded,
        seed,
    )
    .map_err(js)
}

/// Fused prototype per class as `[mx, my, vx, vy]` runs.
#[wasm_bindgen]
pub fn fuse_prototypes(
    means: &[f64],
    variances: &[f64],
    shots: usize,
    sigma_eps_sq: f64,
) -> Result<Vec<f64>, JsError> {
    demo::fuse(means, variances, shots, sigma_eps_sq).map_err(js)
}

/// RGBA posterior map over the embedding plane.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn posterior_map(
    means: &[f64],
    variances: &[f64],
    shots: usize,
    sigma_eps_sq: f64,
    query_variance: f64,
    width: usize,
    height: usize,
    extent: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<u8>, JsError> {
    demo::posterior_map(
        means,
        variances,
        shots,
        sigma_eps_sq,
        query_variance,
        width,
        height,
        extent,
        samples,
        seed,
    )
    .map_err(js)
}
