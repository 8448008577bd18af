//! Episode sampling: a handful of classes, a few labelled support instances
//! per class and held-out queries to classify against them.

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::corruption::{occlude, OcclusionPolicy};
use crate::dataset::Dataset;
use crate::error::{Result, SpeError};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    /// Classes per episode.
    pub ways: usize,
    /// Support instances per class.
    pub shots: usize,
    pub queries_per_class: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 4,
            shots: 2,
            queries_per_class: 5,
        }
    }
}

impl EpisodeSpec {
    pub fn support_count(&self) -> usize {
        self.ways * self.shots
    }

    pub fn query_count(&self) -> usize {
        self.ways * self.queries_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots == 0 || self.queries_per_class == 0 {
            return Err(SpeError::invalid(
                "episodes need at least 2 ways, 1 shot and 1 query per class",
            ));
        }
        Ok(())
    }

    /// Checks that `dataset` can supply episodes of this shape.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        self.validate()?;
        let need = self.shots + self.queries_per_class;
        let usable = dataset
            .class_indices()
            .iter()
            .filter(|g| g.len() >= need)
            .count();
        if usable < self.ways {
            return Err(SpeError::InsufficientData(format!(
                "{} ways with {need} instances each requested, but only {usable} classes qualify",
                self.ways
            )));
        }
        Ok(())
    }
}

/// Dataset indices making up one episode. Episode class `c` is dataset label
/// `classes[c]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    /// `(dataset index, episode class)` pairs.
    pub queries: Vec<(usize, usize)>,
}

impl Episode {
    pub fn targets(&self) -> Vec<usize> {
        self.queries.iter().map(|&(_, c)| c).collect()
    }
}

/// Samples classes without replacement, then per class `shots` support and
/// `queries_per_class` query instances without replacement.
pub fn sample_episode(
    dataset: &Dataset,
    spec: &EpisodeSpec,
    rng: &mut impl Rng,
) -> Result<Episode> {
    spec.check_dataset(dataset)?;
    let need = spec.shots + spec.queries_per_class;
    let groups = dataset.class_indices();
    let eligible: Vec<usize> = (0..groups.len())
        .filter(|&c| groups[c].len() >= need)
        .collect();
    let mut classes: Vec<usize> = eligible.choose_multiple(rng, spec.ways).copied().collect();
    classes.sort_unstable();
    let mut support = Vec::with_capacity(spec.ways);
    let mut queries = Vec::with_capacity(spec.query_count());
    for (c, &label) in classes.iter().enumerate() {
        let mut picked: Vec<usize> = groups[label].choose_multiple(rng, need).copied().collect();
        picked.shuffle(rng);
        support.push(picked[..spec.shots].to_vec());
        queries.extend(picked[spec.shots..].iter().map(|&i| (i, c)));
    }
    Ok(Episode {
        classes,
        support,
        queries,
    })
}

/// Episode inputs ready for an encoder: support rows first (class-major),
/// then query rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInputs {
    pub rows: Vec<Vec<f32>>,
    pub support_groups: Vec<Range<usize>>,
    pub query_start: usize,
    pub targets: Vec<usize>,
}

impl EpisodeInputs {
    pub fn row_refs(&self) -> Vec<&[f32]> {
        self.rows.iter().map(Vec::as_slice).collect()
    }

    pub fn query_count(&self) -> usize {
        self.rows.len() - self.query_start
    }
}

/// Copies the episode's inputs and applies the occlusion policies. Each row
/// is occluded with its own stream derived from `seed`, so the result does
/// not depend on evaluation order.
pub fn materialize(
    dataset: &Dataset,
    episode: &Episode,
    support_policy: &OcclusionPolicy,
    query_policy: &OcclusionPolicy,
    seed: u64,
) -> Result<EpisodeInputs> {
    let shape = dataset.image_shape();
    for policy in [support_policy, query_policy] {
        if policy.is_active() {
            policy.validate(shape)?;
        }
    }
    let mut rows = Vec::new();
    let mut support_groups = Vec::with_capacity(episode.support.len());
    let corrupt =
        |idx: usize, tag: u64, slot: usize, policy: &OcclusionPolicy| -> Result<Vec<f32>> {
            let mut row = dataset.input(idx).to_vec();
            if let (true, Some(shape)) = (policy.is_active(), shape) {
                let mut r = rng::stream(seed, &[tag, slot as u64]);
                occlude(&mut row, shape, policy, &mut r)?;
            }
            Ok(row)
        };
    for members in &episode.support {
        let start = rows.len();
        for &idx in members {
            let slot = rows.len();
            rows.push(corrupt(
                idx,
                rng::TAG_SUPPORT_OCCLUSION,
                slot,
                support_policy,
            )?);
        }
        support_groups.push(start..rows.len());
    }
    let query_start = rows.len();
    for (qi, &(idx, _)) in episode.queries.iter().enumerate() {
        rows.push(corrupt(idx, rng::TAG_QUERY_OCCLUSION, qi, query_policy)?);
    }
    Ok(EpisodeInputs {
        rows,
        support_groups,
        query_start,
        targets: episode.targets(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DataMode;
    use crate::synthetic::{generate_dataset, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn data() -> Dataset {
        generate_dataset(&SyntheticSpec::default(), 20, 1, DataMode::Features).unwrap()
    }

    #[test]
    fn default_episode_shape() {
        let ds = data();
        let ep = sample_episode(
            &ds,
            &EpisodeSpec::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 8);
        assert_eq!(ep.queries.len(), 20);
        for (c, members) in ep.support.iter().enumerate() {
            assert!(members.iter().all(|&i| ds.label(i) == ep.classes[c]));
        }
        for &(i, c) in &ep.queries {
            assert_eq!(ds.label(i), ep.classes[c]);
        }
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = data();
        let spec = EpisodeSpec::default();
        let a = sample_episode(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_episode(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn support_and_queries_are_disjoint() {
        let ds = data();
        let spec = EpisodeSpec::default();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let ep = sample_episode(&ds, &spec, &mut r).unwrap();
            let support: HashSet<usize> = ep.support.iter().flatten().copied().collect();
            assert_eq!(support.len(), 8);
            let queries: HashSet<usize> = ep.queries.iter().map(|q| q.0).collect();
            assert_eq!(queries.len(), 20);
            assert!(support.is_disjoint(&queries));
        }
    }

    #[test]
    fn insufficient_data_is_reported() {
        let ds = generate_dataset(&SyntheticSpec::default(), 5, 1, DataMode::Features).unwrap();
        let err = sample_episode(
            &ds,
            &EpisodeSpec::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(SpeError::InsufficientData(_))));
        let five_way = EpisodeSpec {
            ways: 5,
            shots: 1,
            queries_per_class: 1,
        };
        assert!(sample_episode(&ds, &five_way, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn materialize_orders_rows_and_occludes_deterministically() {
        let spec = SyntheticSpec {
            image_size: 16,
            ..SyntheticSpec::default()
        };
        let ds = generate_dataset(&spec, 10, 2, DataMode::Pixels).unwrap();
        let ep = sample_episode(
            &ds,
            &EpisodeSpec::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let clean = OcclusionPolicy::clean(16);
        let inputs = materialize(&ds, &ep, &clean, &clean, 0).unwrap();
        assert_eq!(inputs.support_groups, vec![0..2, 2..4, 4..6, 6..8]);
        assert_eq!(inputs.query_start, 8);
        assert_eq!(inputs.rows[0], ds.input(ep.support[0][0]));
        assert_eq!(inputs.rows[8], ds.input(ep.queries[0].0));

        let corrupt = OcclusionPolicy::corrupt_all(16);
        let a = materialize(&ds, &ep, &corrupt, &clean, 5).unwrap();
        let b = materialize(&ds, &ep, &corrupt, &clean, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows[8..], inputs.rows[8..]);
        let darkened = (0..8).filter(|&i| a.rows[i] != inputs.rows[i]).count();
        assert!(darkened > 0);
        let feature_ds = data();
        let fep = sample_episode(
            &feature_ds,
            &EpisodeSpec::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(materialize(&feature_ds, &fep, &corrupt, &clean, 0).is_err());
    }
}
