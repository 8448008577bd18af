//! Class posteriors `p(y | x, S)` for a Gaussian query embedding.
//!
//! The posterior integrates the prototype softmax `p(y | z, S)` against the
//! query's embedding density `p(z | x)`. It has no closed form, so it is
//! estimated by one of:
//!
//! * the naive sampler, averaging the softmax over draws `z ~ p(z | x)`;
//! * the intersection sampler, which factors `N(z; x) N(z; y)` into a constant
//!   times the intersection Gaussian and draws `z` from the latter. Only the
//!   target class needs to be sampled, which makes single-sample training work;
//! * tensor-product trapezoidal quadrature (one or two dimensions), used as a
//!   ground-truth oracle.
//!
//! Everything is computed in log space.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{log_sum_exp, Tensor, Var};
use crate::encoder::EmbeddingNodes;
use crate::error::{Result, SpeError};
use crate::gaussian::{product_identity_factor, DiagonalGaussian, LN_2PI};
use crate::prototype::{Prototype, PrototypeNodes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorMethod {
    Naive,
    Intersection,
    Quadrature,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub log_probs: Vec<f64>,
    pub sample_count: usize,
    pub method: PosteriorMethod,
}

impl ClassPosterior {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        argmax(&self.log_probs)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Naive,
    Intersection,
}

impl SamplerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerKind::Naive => "naive",
            SamplerKind::Intersection => "intersection",
        }
    }
}

impl FromStr for SamplerKind {
    type Err = SpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(SamplerKind::Naive),
            "intersection" => Ok(SamplerKind::Intersection),
            other => Err(SpeError::invalid(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub method: SamplerKind,
    pub samples_per_query: usize,
}

impl Default for SamplerConfig {
    /// Intersection sampling with a single sample per query.
    fn default() -> Self {
        Self {
            method: SamplerKind::Intersection,
            samples_per_query: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_query == 0 {
            return Err(SpeError::invalid("samples_per_query must be at least 1"));
        }
        Ok(())
    }
}

/// Draws `count` standard-normal vectors of length `dim`.
pub fn standard_normal_noise(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Precomputed class densities `N(·; μ_c, σ̂²_c)` for repeated evaluation.
struct ClassDensities {
    dim: usize,
    means: Vec<f64>,
    inv_var: Vec<f64>,
    log_norm: Vec<f64>,
}

impl ClassDensities {
    fn new(prototypes: &[Prototype], dim: usize) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(SpeError::Empty("prototype list"));
        }
        let mut means = Vec::with_capacity(prototypes.len() * dim);
        let mut inv_var = Vec::with_capacity(prototypes.len() * dim);
        let mut log_norm = Vec::with_capacity(prototypes.len());
        for p in prototypes {
            SpeError::dims(dim, p.dim())?;
            means.extend_from_slice(p.mean());
            inv_var.extend(p.inflated_variance.iter().map(|v| 1.0 / v));
            log_norm.push(
                -0.5 * p
                    .inflated_variance
                    .iter()
                    .map(|v| LN_2PI + v.ln())
                    .sum::<f64>(),
            );
        }
        Ok(Self {
            dim,
            means,
            inv_var,
            log_norm,
        })
    }

    fn classes(&self) -> usize {
        self.log_norm.len()
    }

    fn log_densities(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (c, o) in out.iter_mut().enumerate() {
            let mut quad = 0.0;
            let means = &self.means[c * d..(c + 1) * d];
            let inv_var = &self.inv_var[c * d..(c + 1) * d];
            for ((zk, m), iv) in z.iter().zip(means).zip(inv_var) {
                let diff = zk - m;
                quad += diff * diff * iv;
            }
            *o = self.log_norm[c] - 0.5 * quad;
        }
    }
}

/// Streaming `ln Σ exp` accumulator.
#[derive(Debug, Clone, Copy)]
struct LogSumAcc {
    max: f64,
    sum: f64,
}

impl LogSumAcc {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// `ln p(y | z, S)` for every prototype: the log-density of `z` under each
/// `N(μ_y, σ̂²_y)`, normalized across classes.
pub fn conditional_log_softmax(z: &[f64], prototypes: &[Prototype]) -> Result<Vec<f64>> {
    let dens = ClassDensities::new(prototypes, z.len())?;
    let mut out = vec![0.0; dens.classes()];
    dens.log_densities(z, &mut out);
    let norm = log_sum_exp(&out);
    out.iter_mut().for_each(|v| *v -= norm);
    Ok(out)
}

/// Deterministic posterior evaluated at a point embedding (the prototypical
/// network's classifier when the prototypes carry unit variance).
pub fn deterministic_posterior(z: &[f64], prototypes: &[Prototype]) -> Result<ClassPosterior> {
    Ok(ClassPosterior {
        log_probs: conditional_log_softmax(z, prototypes)?,
        sample_count: 1,
        method: PosteriorMethod::Deterministic,
    })
}

/// Monte-Carlo average of `p(y | z, S)` over `z = μ_x + σ_x ∘ u` for each
/// noise vector `u`.
pub fn naive_posterior(
    x: &DiagonalGaussian,
    prototypes: &[Prototype],
    noise: &[Vec<f64>],
) -> Result<ClassPosterior> {
    if noise.is_empty() {
        return Err(SpeError::invalid("naive sampler needs at least one sample"));
    }
    let dens = ClassDensities::new(prototypes, x.dim())?;
    let classes = dens.classes();
    let mut accs = vec![LogSumAcc::new(); classes];
    let mut logd = vec![0.0; classes];
    let mut z = vec![0.0; x.dim()];
    let sd: Vec<f64> = x.variance().iter().map(|v| v.sqrt()).collect();
    for u in noise {
        SpeError::dims(x.dim(), u.len())?;
        for k in 0..z.len() {
            z[k] = x.mean()[k] + sd[k] * u[k];
        }
        dens.log_densities(&z, &mut logd);
        let norm = log_sum_exp(&logd);
        for (acc, l) in accs.iter_mut().zip(&logd) {
            acc.push(l - norm);
        }
    }
    let ln_s = (noise.len() as f64).ln();
    Ok(ClassPosterior {
        log_probs: accs.iter().map(|a| a.value() - ln_s).collect(),
        sample_count: noise.len(),
        method: PosteriorMethod::Naive,
    })
}

/// Intersection-sampler estimate of `ln p(target | x, S)`.
///
/// With `(N(μ_xy, σ²_xy), c) = product_identity_factor(x, target)` the
/// posterior equals `exp(c) · E_{z ~ N(μ_xy, σ²_xy)}[1 / Σ_c N(z; μ_c, σ̂²_c)]`;
/// the expectation is replaced by an average over the noise draws.
pub fn intersection_posterior(
    x: &DiagonalGaussian,
    prototypes: &[Prototype],
    target: usize,
    noise: &[Vec<f64>],
) -> Result<f64> {
    if target >= prototypes.len() {
        return Err(SpeError::invalid(format!(
            "target class {target} out of range for {} prototypes",
            prototypes.len()
        )));
    }
    if noise.is_empty() {
        return Err(SpeError::invalid(
            "intersection sampler needs at least one sample",
        ));
    }
    let dens = ClassDensities::new(prototypes, x.dim())?;
    let (intersection, log_prefactor) =
        product_identity_factor(x, &prototypes[target].predictive())?;
    let mut acc = LogSumAcc::new();
    let mut logd = vec![0.0; dens.classes()];
    for u in noise {
        let z = intersection.sample(u)?;
        dens.log_densities(&z, &mut logd);
        acc.push(-log_sum_exp(&logd));
    }
    Ok(log_prefactor + acc.value() - (noise.len() as f64).ln())
}

/// Integration grid for [`quadrature_posterior`]: `points_per_axis` nodes
/// spanning `±half_width_sd` query standard deviations on every axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureGrid {
    pub points_per_axis: usize,
    pub half_width_sd: f64,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self {
            points_per_axis: 201,
            half_width_sd: 8.0,
        }
    }
}

/// Reference posterior by tensor-product trapezoidal quadrature; only for
/// embeddings of dimension one or two.
pub fn quadrature_posterior(
    x: &DiagonalGaussian,
    prototypes: &[Prototype],
    grid: QuadratureGrid,
) -> Result<ClassPosterior> {
    let d = x.dim();
    if d > 2 {
        return Err(SpeError::invalid(format!(
            "quadrature oracle supports at most 2 dimensions, got {d}"
        )));
    }
    if grid.points_per_axis < 3 {
        return Err(SpeError::invalid("quadrature grid needs at least 3 points"));
    }
    let dens = ClassDensities::new(prototypes, d)?;
    let n = grid.points_per_axis;
    // Per-axis nodes and log(weight · 1-D Gaussian density).
    let axes: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
        .map(|k| {
            let sd = x.variance()[k].sqrt();
            let lo = x.mean()[k] - grid.half_width_sd * sd;
            let h = 2.0 * grid.half_width_sd * sd / (n - 1) as f64;
            let nodes: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
            let logw = nodes
                .iter()
                .enumerate()
                .map(|(i, z)| {
                    let edge = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                    let diff = z - x.mean()[k];
                    (edge * h).ln()
                        - 0.5 * (LN_2PI + x.variance()[k].ln() + diff * diff / x.variance()[k])
                })
                .collect();
            (nodes, logw)
        })
        .collect();

    let classes = dens.classes();
    let mut accs = vec![LogSumAcc::new(); classes];
    let mut logd = vec![0.0; classes];
    let mut z = vec![0.0; d];
    let total = n.pow(d as u32);
    for flat in 0..total {
        let mut rest = flat;
        let mut logw = 0.0;
        for (k, (nodes, weights)) in axes.iter().enumerate() {
            let i = rest % n;
            rest /= n;
            z[k] = nodes[i];
            logw += weights[i];
        }
        dens.log_densities(&z, &mut logd);
        let norm = log_sum_exp(&logd);
        for (acc, l) in accs.iter_mut().zip(&logd) {
            acc.push(logw + l - norm);
        }
    }
    let mut log_probs: Vec<f64> = accs.iter().map(LogSumAcc::value).collect();
    let norm = log_sum_exp(&log_probs);
    log_probs.iter_mut().for_each(|v| *v -= norm);
    Ok(ClassPosterior {
        log_probs,
        sample_count: total,
        method: PosteriorMethod::Quadrature,
    })
}

/// `Σ_k ln N(z_k; mean_k, var_k)` over the last axis after broadcasting all
/// three inputs to `shape`.
fn log_density_nodes<'t>(
    z: Var<'t>,
    mean: Var<'t>,
    variance: Var<'t>,
    shape: &[usize],
) -> Result<Var<'t>> {
    let z = z.broadcast(shape)?;
    let mean = mean.broadcast(shape)?;
    let variance = variance.broadcast(shape)?;
    let quad = z.sub(mean)?.square()?.hadamard(variance.reciprocal()?)?;
    let terms = quad.add(variance.log()?)?.offset(LN_2PI)?;
    Ok(terms.sum(Some(shape.len() - 1))?.mul(-0.5)?)
}

fn one_hot(targets: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; targets.len() * classes];
    for (q, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(SpeError::invalid(format!(
                "target class {t} out of range for {classes} prototypes"
            )));
        }
        data[q * classes + t] = 1.0;
    }
    Ok(Tensor::matrix(targets.len(), classes, data)?)
}

/// Mean over queries of `-ln p̂(target | x, S)`, recorded on the tape.
///
/// `noise` holds `queries * samples_per_query * d` standard normals laid out
/// as `[query][sample][axis]`; it is frozen input, so the loss is a
/// deterministic, differentiable function of the embeddings and prototypes.
pub fn training_loss<'t>(
    queries: EmbeddingNodes<'t>,
    prototypes: PrototypeNodes<'t>,
    targets: &[usize],
    config: &SamplerConfig,
    noise: &[f64],
) -> Result<Var<'t>> {
    config.validate()?;
    let tape = queries.mean.tape();
    let [q, d] = queries.mean.shape()[..] else {
        return Err(SpeError::invalid("query embeddings must be a matrix"));
    };
    SpeError::dims(q, targets.len())?;
    let classes = prototypes.mean.shape()[0];
    let s = config.samples_per_query;
    SpeError::dims(q * s * d, noise.len())?;
    let onehot = tape.constant(one_hot(targets, classes)?)?;
    let u = tape.constant(Tensor::new(vec![q, s, d], noise.to_vec())?)?;
    let sample_shape = [q, s, classes, d];

    let log_p = match config.method {
        SamplerKind::Intersection => {
            let mu_t = onehot.matmul(prototypes.mean)?;
            let var_t = onehot.matmul(prototypes.inflated_variance)?;
            let prec_x = queries.variance.reciprocal()?;
            let prec_t = var_t.reciprocal()?;
            let var_xy = prec_x.add(prec_t)?.reciprocal()?;
            let mu_xy =
                var_xy.hadamard(prec_x.hadamard(queries.mean)?.add(prec_t.hadamard(mu_t)?)?)?;
            let prefactor =
                log_density_nodes(queries.mean, mu_t, queries.variance.add(var_t)?, &[q, d])?;
            let z = mu_xy.reshape(&[q, 1, d])?.broadcast(&[q, s, d])?.add(
                var_xy
                    .sqrt()?
                    .reshape(&[q, 1, d])?
                    .broadcast(&[q, s, d])?
                    .hadamard(u)?,
            )?;
            let logd = log_density_nodes(
                z.reshape(&[q, s, 1, d])?,
                prototypes.mean,
                prototypes.inflated_variance,
                &sample_shape,
            )?;
            let inv_denominator = logd.log_sum_exp()?.neg()?;
            prefactor
                .add(inv_denominator.log_sum_exp()?)?
                .offset(-(s as f64).ln())?
        }
        SamplerKind::Naive => {
            let z = queries
                .mean
                .reshape(&[q, 1, d])?
                .broadcast(&[q, s, d])?
                .add(
                    queries
                        .variance
                        .sqrt()?
                        .reshape(&[q, 1, d])?
                        .broadcast(&[q, s, d])?
                        .hadamard(u)?,
                )?;
            let logd = log_density_nodes(
                z.reshape(&[q, s, 1, d])?,
                prototypes.mean,
                prototypes.inflated_variance,
                &sample_shape,
            )?;
            let norm = logd
                .log_sum_exp()?
                .reshape(&[q, s, 1])?
                .broadcast(&[q, s, classes])?;
            let log_softmax = logd.sub(norm)?;
            let pick = onehot
                .reshape(&[q, 1, classes])?
                .broadcast(&[q, s, classes])?;
            let target_log_p = log_softmax.hadamard(pick)?.sum(Some(2))?;
            target_log_p.log_sum_exp()?.offset(-(s as f64).ln())?
        }
    };
    Ok(log_p.sum(None)?.mul(-1.0 / q as f64)?)
}

/// Prototypical-network loss: cross-entropy of the softmax over
/// `ln N(z; μ_c, I)` evaluated at the query means.
pub fn pn_training_loss<'t>(
    query_means: Var<'t>,
    prototypes: PrototypeNodes<'t>,
    targets: &[usize],
) -> Result<Var<'t>> {
    let tape = query_means.tape();
    let [q, d] = query_means.shape()[..] else {
        return Err(SpeError::invalid("query embeddings must be a matrix"));
    };
    SpeError::dims(q, targets.len())?;
    let classes = prototypes.mean.shape()[0];
    let onehot = tape.constant(one_hot(targets, classes)?)?;
    let logd = log_density_nodes(
        query_means.reshape(&[q, 1, d])?,
        prototypes.mean,
        prototypes.inflated_variance,
        &[q, classes, d],
    )?;
    let norm = logd
        .log_sum_exp()?
        .reshape(&[q, 1])?
        .broadcast(&[q, classes])?;
    let picked = logd.sub(norm)?.hadamard(onehot)?;
    Ok(picked.sum(None)?.mul(-1.0 / q as f64)?)
}
