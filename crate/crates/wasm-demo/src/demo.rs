//! The demo's operations as plain Rust, so they run and test natively.

use spe_core::corruption::{occlude, OcclusionPolicy};
use spe_core::dataset::ImageShape;
use spe_core::gaussian::DiagonalGaussian;
use spe_core::prototype::{form_prototype, Prototype};
use spe_core::rng;
use spe_core::sampler::{naive_posterior, standard_normal_noise};
use spe_core::synthetic::{render, SyntheticSpec};

/// Display colour of each episode class in the posterior map.
pub const CLASS_COLORS: [[f64; 3]; 4] = [
    [230.0, 85.0, 60.0],
    [60.0, 140.0, 230.0],
    [80.0, 190.0, 100.0],
    [235.0, 190.0, 50.0],
];

const STREAM_RENDER: u64 = 1;
const STREAM_POSTERIOR: u64 = 2;

fn to_rgba(pixels: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() / 3 * 4);
    for px in pixels.chunks_exact(3) {
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    out
}

/// Renders one L-shape as `size * size` RGBA bytes, optionally with the
/// whole image occluded by one random rectangle.
pub fn render_rgba(
    size: usize,
    orientation: f64,
    hue: f64,
    leg_fraction: f64,
    hue_noise_std: f64,
    occluded: bool,
    seed: u64,
) -> Result<Vec<u8>, String> {
    let spec = SyntheticSpec {
        image_size: size,
        ..SyntheticSpec::default()
    };
    let mut r = rng::stream(seed, &[STREAM_RENDER]);
    let noise = (hue_noise_std > 0.0).then_some(hue_noise_std);
    let mut pixels =
        render(&spec, orientation, hue, leg_fraction, noise, &mut r).map_err(|e| e.to_string())?;
    if occluded {
        let shape = ImageShape {
            height: size,
            width: size,
            channels: 3,
        };
        occlude(
            &mut pixels,
            shape,
            &OcclusionPolicy::corrupt_all(size),
            &mut r,
        )
        .map_err(|e| e.to_string())?;
    }
    Ok(to_rgba(&pixels))
}

/// Builds 2-D prototypes from class-major support embeddings.
/// `means` and `variances` hold `classes * shots * 2` values.
pub fn prototypes(
    means: &[f64],
    variances: &[f64],
    shots: usize,
    sigma_eps_sq: f64,
) -> Result<Vec<Prototype>, String> {
    if shots == 0 || means.is_empty() || !means.len().is_multiple_of(2 * shots) {
        return Err("means must hold classes * shots * 2 values".into());
    }
    if variances.len() != means.len() {
        return Err("variances must match means in length".into());
    }
    means
        .chunks(2 * shots)
        .zip(variances.chunks(2 * shots))
        .enumerate()
        .map(|(c, (m, v))| {
            let support = m
                .chunks(2)
                .zip(v.chunks(2))
                .map(|(mu, var)| DiagonalGaussian::new(mu.to_vec(), var.to_vec()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            form_prototype(&support, sigma_eps_sq, c).map_err(|e| e.to_string())
        })
        .collect()
}

/// Per class: fused mean and class-conditional variance, flattened as
/// `[mx, my, vx, vy]`.
pub fn fuse(
    means: &[f64],
    variances: &[f64],
    shots: usize,
    sigma_eps_sq: f64,
) -> Result<Vec<f64>, String> {
    let protos = prototypes(means, variances, shots, sigma_eps_sq)?;
    Ok(protos
        .iter()
        .flat_map(|p| {
            [
                p.mean()[0],
                p.mean()[1],
                p.inflated_variance[0],
                p.inflated_variance[1],
            ]
        })
        .collect())
}

/// Colours a `width * height` grid over `[-extent, extent]²` by the
/// Monte-Carlo class posterior of a query centred at each cell, with
/// isotropic `query_variance`. Returns RGBA bytes, top row first.
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
) -> Result<Vec<u8>, String> {
    let protos = prototypes(means, variances, shots, sigma_eps_sq)?;
    if protos.len() > CLASS_COLORS.len() {
        return Err(format!(
            "at most {} classes can be coloured",
            CLASS_COLORS.len()
        ));
    }
    if width == 0 || height == 0 || !(extent > 0.0) {
        return Err("grid size and extent must be positive".into());
    }
    let mut r = rng::stream(seed, &[STREAM_POSTERIOR]);
    let noise = standard_normal_noise(&mut r, samples.max(1), 2);
    let mut out = Vec::with_capacity(width * height * 4);
    for row in 0..height {
        let y = extent - (row as f64 + 0.5) / height as f64 * 2.0 * extent;
        for col in 0..width {
            let x = -extent + (col as f64 + 0.5) / width as f64 * 2.0 * extent;
            let query = DiagonalGaussian::isotropic(vec![x, y], query_variance)
                .map_err(|e| e.to_string())?;
            let probs = naive_posterior(&query, &protos, &noise)
                .map_err(|e| e.to_string())?
                .probs();
            let mut rgb = [0.0; 3];
            for (p, color) in probs.iter().zip(&CLASS_COLORS) {
                for k in 0..3 {
                    rgb[k] += p * color[k];
                }
            }
            out.extend(rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
            out.push(255);
        }
    }
    Ok(out)
}
