//! Class prototypes formed from support embeddings.
//!
//! Each support instance `i` is modelled as the prototype plus isotropic noise
//! of variance `σ²ε`, so the prototype posterior is the product of the
//! support Gaussians with variances inflated by `σ²ε`. The classifier then
//! uses the prototype with its variance inflated once more.

use std::ops::Range;

use crate::autodiff::{concat, Tensor, Var};
use crate::encoder::EmbeddingNodes;
use crate::error::{Result, SpeError};
use crate::gaussian::{product, DiagonalGaussian};

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub posterior: DiagonalGaussian,
    /// `posterior.variance + σ²ε`, fixed when the prototype is formed.
    pub inflated_variance: Vec<f64>,
}

impl Prototype {
    pub fn dim(&self) -> usize {
        self.posterior.dim()
    }

    pub fn mean(&self) -> &[f64] {
        self.posterior.mean()
    }

    /// `N(μ_y, σ̂²_y)`, the class-conditional density used for classification.
    pub fn predictive(&self) -> DiagonalGaussian {
        DiagonalGaussian::new(self.mean().to_vec(), self.inflated_variance.clone())
            .expect("prototype parameters are validated on construction")
    }
}

/// Confidence-weighted prototype: the product of `N(μ_i, σ²_i + σ²ε)` over
/// the support set.
pub fn form_prototype(
    support: &[DiagonalGaussian],
    sigma_eps_sq: f64,
    class_id: usize,
) -> Result<Prototype> {
    if support.is_empty() {
        return Err(SpeError::Empty("prototype support set"));
    }
    if !(sigma_eps_sq >= 0.0) || !sigma_eps_sq.is_finite() {
        return Err(SpeError::invalid(format!(
            "sigma_eps_sq must be a finite non-negative number, got {sigma_eps_sq}"
        )));
    }
    let inflated = support
        .iter()
        .map(|g| g.inflated(sigma_eps_sq))
        .collect::<Result<Vec<_>>>()?;
    let posterior = product(&inflated)?;
    let inflated_variance = posterior
        .variance()
        .iter()
        .map(|v| v + sigma_eps_sq)
        .collect();
    Ok(Prototype {
        class_id,
        posterior,
        inflated_variance,
    })
}

/// Prototypical-network prototype: the unweighted mean of the support
/// embeddings with unit variance, so the classifier reduces to a softmax over
/// negative half squared distances.
pub fn form_pn_prototype(support_means: &[Vec<f64>], class_id: usize) -> Result<Prototype> {
    let first = support_means
        .first()
        .ok_or(SpeError::Empty("prototype support set"))?;
    let d = first.len();
    let mut mean = vec![0.0; d];
    for m in support_means {
        SpeError::dims(d, m.len())?;
        mean.iter_mut().zip(m).for_each(|(acc, v)| *acc += v);
    }
    let n = support_means.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    Ok(Prototype {
        class_id,
        posterior: DiagonalGaussian::new(mean, vec![1.0; d])?,
        inflated_variance: vec![1.0; d],
    })
}

/// Prototypes recorded on a tape, stacked class-major as `[classes, d]`.
#[derive(Debug, Clone, Copy)]
pub struct PrototypeNodes<'t> {
    pub mean: Var<'t>,
    pub inflated_variance: Var<'t>,
}

/// Differentiable counterpart of [`form_prototype`] for every class at once.
/// `groups[c]` are the rows of `support` that belong to class `c`.
pub fn form_prototypes_on_tape<'t>(
    support: EmbeddingNodes<'t>,
    groups: &[Range<usize>],
    sigma_eps_sq: Var<'t>,
) -> Result<PrototypeNodes<'t>> {
    let d = support.mean.shape()[1];
    let mut means = Vec::with_capacity(groups.len());
    let mut variances = Vec::with_capacity(groups.len());
    for rows in groups {
        let k = rows.len();
        if k == 0 {
            return Err(SpeError::Empty("prototype support set"));
        }
        let mu = support.mean.slice(0, rows.start, rows.end)?;
        let var = support.variance.slice(0, rows.start, rows.end)?;
        let precision = var.add(sigma_eps_sq.broadcast(&[k, d])?)?.reciprocal()?;
        let post_var = precision.sum(Some(0))?.reciprocal()?;
        let post_mean = post_var.hadamard(precision.hadamard(mu)?.sum(Some(0))?)?;
        let inflated = post_var.add(sigma_eps_sq.broadcast(&[d])?)?;
        means.push(post_mean.reshape(&[1, d])?);
        variances.push(inflated.reshape(&[1, d])?);
    }
    Ok(PrototypeNodes {
        mean: concat(&means, 0)?,
        inflated_variance: concat(&variances, 0)?,
    })
}

/// Differentiable counterpart of [`form_pn_prototype`]; the variance node is a
/// constant of ones.
pub fn form_pn_prototypes_on_tape<'t>(
    support_means: Var<'t>,
    groups: &[Range<usize>],
) -> Result<PrototypeNodes<'t>> {
    let d = support_means.shape()[1];
    let mut means = Vec::with_capacity(groups.len());
    for rows in groups {
        if rows.is_empty() {
            return Err(SpeError::Empty("prototype support set"));
        }
        let mu = support_means
            .slice(0, rows.start, rows.end)?
            .sum(Some(0))?
            .mul(1.0 / rows.len() as f64)?;
        means.push(mu.reshape(&[1, d])?);
    }
    let mean = concat(&means, 0)?;
    let inflated_variance = mean
        .tape()
        .constant(Tensor::filled(vec![groups.len(), d], 1.0))?;
    Ok(PrototypeNodes {
        mean,
        inflated_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    fn g(mean: &[f64], var: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn single_support_prototype() {
        let p = form_prototype(&[g(&[0.4, -1.0], &[0.3, 2.0])], 0.1, 7).unwrap();
        assert_eq!(p.class_id, 7);
        assert_eq!(p.mean(), &[0.4, -1.0]);
        assert!((p.posterior.variance()[0] - 0.4).abs() < 1e-15);
        assert!((p.inflated_variance[0] - 0.5).abs() < 1e-15);
        assert!((p.inflated_variance[1] - 2.2).abs() < 1e-15);
    }

    #[test]
    fn equal_confidence_average() {
        let p = form_prototype(&[g(&[0.0], &[1.0]), g(&[2.0], &[1.0])], 0.0, 0).unwrap();
        assert!((p.mean()[0] - 1.0).abs() < 1e-15);
        assert!((p.posterior.variance()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn confident_instance_dominates() {
        let p = form_prototype(&[g(&[0.0], &[0.1]), g(&[2.0], &[10.0])], 0.0, 0).unwrap();
        // Precision-weighted mean: (0/0.1 + 2/10) / (1/0.1 + 1/10) = 0.2 / 10.1.
        let expected = (0.0 / 0.1 + 2.0 / 10.0) / (1.0 / 0.1 + 1.0 / 10.0);
        assert!((p.mean()[0] - expected).abs() < 1e-15);
        assert!((p.mean()[0] - 0.0198).abs() < 1e-4);
    }

    #[test]
    fn errors_on_empty_support() {
        assert!(form_prototype(&[], 0.1, 0).is_err());
        assert!(form_pn_prototype(&[], 0).is_err());
        assert!(form_prototype(&[g(&[0.0], &[1.0])], f64::NAN, 0).is_err());
    }

    #[test]
    fn pn_prototype_is_unweighted_mean() {
        let single = form_pn_prototype(&[vec![0.3, 0.7]], 1).unwrap();
        assert_eq!(single.mean(), &[0.3, 0.7]);
        let mid = form_pn_prototype(&[vec![0.0, 0.0], vec![2.0, 2.0]], 1).unwrap();
        assert_eq!(mid.mean(), &[1.0, 1.0]);
        assert_eq!(mid.inflated_variance, vec![1.0, 1.0]);
        let swapped = form_pn_prototype(&[vec![2.0, 2.0], vec![0.0, 0.0]], 1).unwrap();
        assert_eq!(mid, swapped);
    }

    #[test]
    fn huge_variance_instance_has_no_influence() {
        let base = vec![g(&[0.5, 1.0], &[0.2, 0.4]), g(&[-0.5, 2.0], &[0.3, 0.1])];
        let mut with_noise = base.clone();
        with_noise.push(g(&[40.0, -40.0], &[1e8, 1e8]));
        let a = form_prototype(&base, 0.05, 0).unwrap();
        let b = form_prototype(&with_noise, 0.05, 0).unwrap();
        for i in 0..2 {
            assert!((a.mean()[i] - b.mean()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn tape_prototypes_match_direct_formation() {
        let support = [
            g(&[0.1, 0.2], &[0.5, 0.7]),
            g(&[1.0, -0.3], &[0.2, 1.5]),
            g(&[-2.0, 0.0], &[0.9, 0.1]),
        ];
        let sigma_eps = 0.3;
        let tape = Tape::new();
        let mean = tape
            .leaf(
                Tensor::matrix(
                    3,
                    2,
                    support.iter().flat_map(|s| s.mean().to_vec()).collect(),
                )
                .unwrap(),
            )
            .unwrap();
        let variance = tape
            .leaf(
                Tensor::matrix(
                    3,
                    2,
                    support.iter().flat_map(|s| s.variance().to_vec()).collect(),
                )
                .unwrap(),
            )
            .unwrap();
        let eps = tape.leaf(Tensor::scalar(sigma_eps)).unwrap();
        let nodes =
            form_prototypes_on_tape(EmbeddingNodes { mean, variance }, &[0..2, 2..3], eps).unwrap();
        let expected = [
            form_prototype(&support[0..2], sigma_eps, 0).unwrap(),
            form_prototype(&support[2..3], sigma_eps, 1).unwrap(),
        ];
        let (m, v) = (nodes.mean.value(), nodes.inflated_variance.value());
        for (c, p) in expected.iter().enumerate() {
            for k in 0..2 {
                assert!((m.data()[c * 2 + k] - p.mean()[k]).abs() < 1e-14);
                assert!((v.data()[c * 2 + k] - p.inflated_variance[k]).abs() < 1e-14);
            }
        }
        let pn = form_pn_prototypes_on_tape(mean, &[0..2, 2..3]).unwrap();
        let expected_pn = [0.55, -0.05, -2.0, 0.0];
        for (a, b) in pn.mean.value().data().iter().zip(expected_pn) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(pn.inflated_variance.value().data(), &[1.0; 4]);
    }

    fn support_strategy() -> impl Strategy<Value = Vec<DiagonalGaussian>> {
        prop::collection::vec(
            (
                prop::collection::vec(-3.0f64..3.0, 2),
                prop::collection::vec(0.01f64..3.0, 2),
            )
                .prop_map(|(m, v)| DiagonalGaussian::new(m, v).unwrap()),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn variance_shrinks_as_support_grows(support in support_strategy(), eps in 0.001f64..1.0) {
            let mut prev: Option<Prototype> = None;
            for n in 1..=support.len() {
                let p = form_prototype(&support[..n], eps, 0).unwrap();
                if let Some(prev) = &prev {
                    for i in 0..2 {
                        prop_assert!(p.posterior.variance()[i] <= prev.posterior.variance()[i]);
                    }
                }
                prop_assert!(p.inflated_variance.iter().zip(p.posterior.variance()).all(|(a, b)| a > b));
                prev = Some(p);
            }
        }

        #[test]
        fn precision_is_sum_of_inflated_precisions(support in support_strategy(), eps in 0.001f64..1.0) {
            let p = form_prototype(&support, eps, 0).unwrap();
            for i in 0..2 {
                let expected: f64 = support.iter().map(|s| 1.0 / (s.variance()[i] + eps)).sum();
                prop_assert!((1.0 / p.posterior.variance()[i] - expected).abs() <= 1e-12 * expected);
            }
        }

        #[test]
        fn equal_variances_reduce_to_pn_mean(
            means in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..6),
            var in 0.01f64..3.0,
            eps in 0.001f64..1.0,
        ) {
            let support: Vec<_> = means.iter().map(|m| g(m, &[var, var])).collect();
            let spe = form_prototype(&support, eps, 0).unwrap();
            let pn = form_pn_prototype(&means, 0).unwrap();
            for i in 0..2 {
                prop_assert!((spe.mean()[i] - pn.mean()[i]).abs() < 1e-12);
            }
        }
    }
}
