//! Episodic evaluation, paired model comparison, uncertainty sweeps and
//! embedding export.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::corruption::{OcclusionMode, OcclusionPolicy};
use crate::dataset::{DataMode, Dataset, NoiseFlags};
use crate::encoder::{EncoderModel, ModelKind};
use crate::episode::{materialize, sample_episode, EpisodeInputs, EpisodeSpec};
use crate::error::{Result, SpeError};
use crate::gaussian::DiagonalGaussian;
use crate::prototype::{form_pn_prototype, form_prototype, Prototype};
use crate::rng;
use crate::sampler::{deterministic_posterior, naive_posterior, standard_normal_noise};
use crate::synthetic::{feature_vector, render, Latent, SyntheticSpec, NUM_CLASSES};

pub const DEFAULT_EVAL_SAMPLES: usize = 200;
pub const DEFAULT_EVAL_EPISODES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub spec: EpisodeSpec,
    pub support_policy: OcclusionPolicy,
    pub query_policy: OcclusionPolicy,
    /// Naive-sampler draws per query for stochastic models.
    pub eval_samples: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn clean(unit_size: usize, seed: u64) -> Self {
        Self {
            episodes: DEFAULT_EVAL_EPISODES,
            spec: EpisodeSpec::default(),
            support_policy: OcclusionPolicy::clean(unit_size),
            query_policy: OcclusionPolicy::clean(unit_size),
            eval_samples: DEFAULT_EVAL_SAMPLES,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.eval_samples == 0 {
            return Err(SpeError::invalid(
                "episodes and eval_samples must be at least 1",
            ));
        }
        self.spec.validate()
    }

    /// `support=<mode>,query=<mode>`.
    pub fn regime(&self) -> String {
        format!(
            "support={},query={}",
            self.support_policy.mode, self.query_policy.mode
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_kind: ModelKind,
    pub config: EvalConfig,
    pub mean_accuracy: f64,
    pub std_error: f64,
    pub per_episode_accuracy: Vec<f64>,
}

/// Sample mean and standard error of the mean.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "model_kind = {}", self.model_kind.as_str());
        let _ = writeln!(out, "regime = {}", c.regime());
        let _ = writeln!(out, "episodes = {}", c.episodes);
        let _ = writeln!(out, "ways = {}", c.spec.ways);
        let _ = writeln!(out, "shots = {}", c.spec.shots);
        let _ = writeln!(out, "queries_per_class = {}", c.spec.queries_per_class);
        let _ = writeln!(out, "eval_samples = {}", c.eval_samples);
        let _ = writeln!(
            out,
            "support_probability = {}",
            c.support_policy.per_unit_probability
        );
        let _ = writeln!(
            out,
            "query_probability = {}",
            c.query_policy.per_unit_probability
        );
        let _ = writeln!(out, "unit_size = {}", c.support_policy.unit_size);
        let _ = writeln!(out, "seed = {}", c.seed);
        let _ = writeln!(out, "mean_accuracy = {:.6}", self.mean_accuracy);
        let _ = writeln!(out, "std_error = {:.6}", self.std_error);
        out.push_str("\n[per_episode_accuracy]\n");
        for (i, a) in self.per_episode_accuracy.iter().enumerate() {
            let _ = writeln!(out, "{i} {a:.6}");
        }
        out
    }
}

/// Embeds every row of an episode.
fn encode_rows(model: &EncoderModel, inputs: &EpisodeInputs) -> Result<Vec<DiagonalGaussian>> {
    inputs.rows.iter().map(|r| model.encode(r)).collect()
}

/// Prototypes for an episode's support rows using the model's own rule.
pub fn episode_prototypes(
    model: &EncoderModel,
    embeddings: &[DiagonalGaussian],
    inputs: &EpisodeInputs,
) -> Result<Vec<Prototype>> {
    inputs
        .support_groups
        .iter()
        .enumerate()
        .map(|(c, rows)| match model.kind {
            ModelKind::Spe => {
                form_prototype(&embeddings[rows.clone()], model.sigma_epsilon_sq(), c)
            }
            ModelKind::Pn => {
                let means: Vec<Vec<f64>> = embeddings[rows.clone()]
                    .iter()
                    .map(|g| g.mean().to_vec())
                    .collect();
                form_pn_prototype(&means, c)
            }
        })
        .collect()
}

/// Predicted episode class of every query. Stochastic models use the naive
/// sampler with `eval_samples` draws from a per-query stream of `noise_seed`;
/// prototypical networks classify their point embeddings directly.
pub fn predict_episode(
    model: &EncoderModel,
    inputs: &EpisodeInputs,
    eval_samples: usize,
    noise_seed: u64,
) -> Result<Vec<usize>> {
    let embeddings = encode_rows(model, inputs)?;
    let prototypes = episode_prototypes(model, &embeddings, inputs)?;
    let d = model.embed_dim();
    embeddings[inputs.query_start..]
        .iter()
        .enumerate()
        .map(|(qi, x)| {
            let posterior = match model.kind {
                ModelKind::Spe => {
                    let mut r = rng::stream(noise_seed, &[rng::TAG_SAMPLER_NOISE, qi as u64]);
                    let noise = standard_normal_noise(&mut r, eval_samples, d);
                    naive_posterior(x, &prototypes, &noise)?
                }
                ModelKind::Pn => deterministic_posterior(x.mean(), &prototypes)?,
            };
            Ok(posterior.predicted())
        })
        .collect()
}

pub fn episode_accuracy(
    model: &EncoderModel,
    inputs: &EpisodeInputs,
    eval_samples: usize,
    noise_seed: u64,
) -> Result<f64> {
    let predicted = predict_episode(model, inputs, eval_samples, noise_seed)?;
    let correct = predicted
        .iter()
        .zip(&inputs.targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / predicted.len() as f64)
}

/// Episode `e` of an evaluation run: its index draw, its occlusions and its
/// sampler noise all come from streams derived from `(seed, e)`, so two
/// models evaluated with the same config see identical episodes.
pub fn evaluation_episode(
    dataset: &Dataset,
    config: &EvalConfig,
    e: usize,
) -> Result<(EpisodeInputs, u64)> {
    let episode_seed = rng::derive_seed(config.seed, &[rng::TAG_EPISODE, e as u64]);
    let mut r = rng::stream(episode_seed, &[]);
    let episode = sample_episode(dataset, &config.spec, &mut r)?;
    let inputs = materialize(
        dataset,
        &episode,
        &config.support_policy,
        &config.query_policy,
        episode_seed,
    )?;
    Ok((inputs, episode_seed))
}

fn check_model_data(model: &EncoderModel, dataset: &Dataset) -> Result<()> {
    if model.config.input_dim != dataset.input_dim {
        return Err(SpeError::invalid(format!(
            "model expects {} inputs but the dataset provides {}",
            model.config.input_dim, dataset.input_dim
        )));
    }
    Ok(())
}

pub fn evaluate(
    model: &EncoderModel,
    dataset: &Dataset,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    check_model_data(model, dataset)?;
    config.spec.check_dataset(dataset)?;
    let per_episode_accuracy = (0..config.episodes)
        .into_par_iter()
        .map(|e| {
            let (inputs, seed) = evaluation_episode(dataset, config, e)?;
            episode_accuracy(model, &inputs, config.eval_samples, seed)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean_accuracy, std_error) = mean_and_std_error(&per_episode_accuracy);
    Ok(EvalReport {
        model_kind: model.kind,
        config: config.clone(),
        mean_accuracy,
        std_error,
        per_episode_accuracy,
    })
}

/// Two models evaluated on the same episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedComparison {
    pub first: EvalReport,
    pub second: EvalReport,
    /// Per-episode `first - second` accuracy.
    pub deltas: Vec<f64>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign-test p-value for "first beats second".
    pub sign_test_p: f64,
}

/// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`; ties are dropped.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 || wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial parameters");
    b.sf(wins as u64 - 1)
}

pub fn compare(
    first: &EncoderModel,
    second: &EncoderModel,
    dataset: &Dataset,
    config: &EvalConfig,
) -> Result<PairedComparison> {
    let a = evaluate(first, dataset, config)?;
    let b = evaluate(second, dataset, config)?;
    Ok(pair_reports(a, b))
}

pub fn pair_reports(first: EvalReport, second: EvalReport) -> PairedComparison {
    let deltas: Vec<f64> = first
        .per_episode_accuracy
        .iter()
        .zip(&second.per_episode_accuracy)
        .map(|(a, b)| a - b)
        .collect();
    let wins = deltas.iter().filter(|&&d| d > 0.0).count();
    let losses = deltas.iter().filter(|&&d| d < 0.0).count();
    let ties = deltas.len() - wins - losses;
    PairedComparison {
        sign_test_p: sign_test_p(wins, losses),
        first,
        second,
        deltas,
        wins,
        losses,
        ties,
    }
}

impl PairedComparison {
    pub fn mean_delta(&self) -> f64 {
        mean_and_std_error(&self.deltas).0
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (mean, se) = mean_and_std_error(&self.deltas);
        let _ = writeln!(out, "regime = {}", self.first.config.regime());
        let _ = writeln!(out, "episodes = {}", self.deltas.len());
        let _ = writeln!(out, "first_kind = {}", self.first.model_kind.as_str());
        let _ = writeln!(out, "second_kind = {}", self.second.model_kind.as_str());
        let _ = writeln!(out, "first_mean_accuracy = {:.6}", self.first.mean_accuracy);
        let _ = writeln!(out, "first_std_error = {:.6}", self.first.std_error);
        let _ = writeln!(
            out,
            "second_mean_accuracy = {:.6}",
            self.second.mean_accuracy
        );
        let _ = writeln!(out, "second_std_error = {:.6}", self.second.std_error);
        let _ = writeln!(out, "mean_delta = {mean:.6}");
        let _ = writeln!(out, "delta_std_error = {se:.6}");
        let _ = writeln!(out, "wins = {}", self.wins);
        let _ = writeln!(out, "losses = {}", self.losses);
        let _ = writeln!(out, "ties = {}", self.ties);
        let _ = writeln!(out, "sign_test_p = {:.6e}", self.sign_test_p);
        out.push_str("\n[per_episode]\n# episode first second delta\n");
        for (i, d) in self.deltas.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i} {:.6} {:.6} {d:.6}",
                self.first.per_episode_accuracy[i], self.second.per_episode_accuracy[i]
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Level = per-pixel hue-noise standard deviation in degrees.
    Hue,
    /// Level = leg length as a fraction of the full leg.
    Leg,
}

impl SweepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepKind::Hue => "hue",
            SweepKind::Leg => "leg",
        }
    }

    /// Level that leaves the input uncorrupted.
    pub fn baseline_level(&self) -> f64 {
        match self {
            SweepKind::Hue => 0.0,
            SweepKind::Leg => 1.0,
        }
    }
}

impl std::str::FromStr for SweepKind {
    type Err = SpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hue" => Ok(SweepKind::Hue),
            "leg" => Ok(SweepKind::Leg),
            other => Err(SpeError::invalid(format!(
                "unknown sweep kind `{other}` (expected hue or leg)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub level: f64,
    /// Mean predicted variance per embedding axis.
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub embed_dim: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level");
        for k in 0..self.embed_dim {
            let _ = write!(out, ",var_axis{}", k + 1);
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}", row.level);
            for v in &row.variance {
                let _ = write!(out, ",{v:.9e}");
            }
            out.push('\n');
        }
        out
    }

    /// Axis whose variance grows most from the first to the last level.
    pub fn most_responsive_axis(&self) -> Option<usize> {
        let (first, last) = (self.rows.first()?, self.rows.last()?);
        let rise: Vec<f64> = (0..self.embed_dim)
            .map(|k| last.variance[k] - first.variance[k])
            .collect();
        Some(crate::sampler::argmax(&rise))
    }

    /// Hue sweep property: the responsive axis increases strictly from level
    /// to level (rows must be sorted by increasing noise) and the other axis
    /// rises by less than half as much.
    pub fn verify_hue(&self) -> std::result::Result<(), String> {
        if self.embed_dim != 2 {
            return Err("hue-sweep verification needs a 2-D model".into());
        }
        if self.rows.len() < 4 {
            return Err(format!("need at least 4 levels, got {}", self.rows.len()));
        }
        let axis = self.most_responsive_axis().unwrap_or(0);
        let other = 1 - axis;
        for w in self.rows.windows(2) {
            if !(w[1].variance[axis] > w[0].variance[axis]) {
                return Err(format!(
                    "axis {} variance not increasing between levels {} and {}: {} -> {}",
                    axis + 1,
                    w[0].level,
                    w[1].level,
                    w[0].variance[axis],
                    w[1].variance[axis]
                ));
            }
        }
        let first = &self.rows[0];
        let last = &self.rows[self.rows.len() - 1];
        let rise = last.variance[axis] - first.variance[axis];
        let other_rise = last.variance[other] - first.variance[other];
        if !(other_rise < 0.5 * rise) {
            return Err(format!(
                "axis {} rose by {other_rise}, not less than half of axis {}'s rise {rise}",
                other + 1,
                axis + 1
            ));
        }
        Ok(())
    }

    /// Leg sweep property: every axis at the shortest-leg level exceeds the
    /// baseline row.
    pub fn verify_leg(&self) -> std::result::Result<(), String> {
        let base = self
            .rows
            .iter()
            .find(|r| r.level == SweepKind::Leg.baseline_level())
            .ok_or("leg sweep needs the 1.0 baseline level")?;
        let shortest = self
            .rows
            .iter()
            .min_by(|a, b| a.level.total_cmp(&b.level))
            .ok_or("empty sweep")?;
        for k in 0..self.embed_dim {
            if !(shortest.variance[k] > base.variance[k]) {
                return Err(format!(
                    "axis {} variance at leg {} ({}) does not exceed baseline ({})",
                    k + 1,
                    shortest.level,
                    shortest.variance[k],
                    base.variance[k]
                ));
            }
        }
        Ok(())
    }

    pub fn verify(&self) -> std::result::Result<(), String> {
        match self.kind {
            SweepKind::Hue => self.verify_hue(),
            SweepKind::Leg => self.verify_leg(),
        }
    }
}

/// Renders each class's central stimulus at every noise level and records
/// the model's mean predicted variance per axis. Each (level, class, sample)
/// cell renders from its own stream of `seed`.
pub fn uncertainty_sweep(
    model: &EncoderModel,
    spec: &SyntheticSpec,
    mode: DataMode,
    kind: SweepKind,
    levels: &[f64],
    samples_per_level: usize,
    seed: u64,
) -> Result<SweepTable> {
    if model.embed_dim() != 2 {
        return Err(SpeError::invalid(format!(
            "uncertainty sweeps need a 2-D model, this one has {} dimensions",
            model.embed_dim()
        )));
    }
    if samples_per_level == 0 {
        return Err(SpeError::invalid("samples_per_level must be at least 1"));
    }
    let rows = levels
        .iter()
        .enumerate()
        .map(|(li, &level)| {
            let noise = match kind {
                SweepKind::Hue if level < 0.0 => {
                    return Err(SpeError::invalid("hue-noise levels must be non-negative"));
                }
                SweepKind::Hue => NoiseFlags {
                    hue_noise_std: (level > 0.0).then_some(level),
                    leg_fraction: 1.0,
                },
                SweepKind::Leg => NoiseFlags {
                    hue_noise_std: None,
                    leg_fraction: level,
                },
            };
            let cells: Vec<(usize, usize)> = (0..NUM_CLASSES)
                .flat_map(|c| (0..samples_per_level).map(move |s| (c, s)))
                .collect();
            let variances = cells
                .into_par_iter()
                .map(|(c, s)| {
                    let (orientation, hue) = spec.class_center(c);
                    let input = match mode {
                        DataMode::Pixels => {
                            let mut r =
                                rng::stream(seed, &[rng::TAG_SWEEP, li as u64, c as u64, s as u64]);
                            render(
                                spec,
                                orientation,
                                hue,
                                noise.leg_fraction,
                                noise.hue_noise_std,
                                &mut r,
                            )?
                        }
                        DataMode::Features => {
                            feature_vector(Latent { orientation, hue }, &noise).to_vec()
                        }
                    };
                    Ok(model.encode(&input)?.variance().to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            let n = variances.len() as f64;
            let mut mean = vec![0.0; 2];
            for v in &variances {
                mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n);
            }
            Ok(SweepRow {
                level,
                variance: mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        kind,
        embed_dim: 2,
        rows,
    })
}

/// Writes one CSV row per instance: id, label, latent orientation and hue,
/// then the embedding mean and variance per axis.
pub fn export_embeddings(
    model: &EncoderModel,
    dataset: &Dataset,
    out: &mut impl Write,
) -> Result<()> {
    check_model_data(model, dataset)?;
    let d = model.embed_dim();
    let mut header = String::from("id,label,orientation,hue");
    for k in 0..d {
        let _ = write!(header, ",mu{}", k + 1);
    }
    for k in 0..d {
        let _ = write!(header, ",var{}", k + 1);
    }
    writeln!(out, "{header}")?;
    let embeddings = (0..dataset.len())
        .into_par_iter()
        .map(|i| model.encode(dataset.input(i)))
        .collect::<Result<Vec<_>>>()?;
    for (i, g) in embeddings.iter().enumerate() {
        let l = dataset.latents[i];
        let mut line = format!("{i},{},{},{}", dataset.labels[i], l.orientation, l.hue);
        for v in g.mean().iter().chain(g.variance()) {
            let _ = write!(line, ",{v:.9e}");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parses the occlusion regime name used on the command line.
pub fn policy_for(mode: OcclusionMode, probability: f64, unit_size: usize) -> OcclusionPolicy {
    match mode {
        OcclusionMode::Clean => OcclusionPolicy::clean(unit_size),
        OcclusionMode::Corrupt => OcclusionPolicy {
            per_unit_probability: probability,
            unit_size,
            mode,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synthetic::generate_dataset;

    fn feature_model(kind: ModelKind, seed: u64) -> EncoderModel {
        EncoderModel::init(EncoderConfig::mlp(4, vec![16], 2), kind, 8, 0.01, seed).unwrap()
    }

    fn features() -> Dataset {
        generate_dataset(&SyntheticSpec::default(), 40, 3, DataMode::Features).unwrap()
    }

    #[test]
    fn std_error_matches_hand_computation() {
        let (m, se) = mean_and_std_error(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sign_test_matches_binomial_tail() {
        // P(X >= 9 | n = 10) = 11 / 1024.
        assert!((sign_test_p(9, 1) - 11.0 / 1024.0).abs() < 1e-12);
        assert!((sign_test_p(5, 5) - 638.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test_p(0, 0), 1.0);
        assert_eq!(sign_test_p(0, 5), 1.0);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let ds = features();
        let cfg = EvalConfig {
            episodes: 1000,
            eval_samples: 20,
            ..EvalConfig::clean(64, 1)
        };
        let report = evaluate(&feature_model(ModelKind::Spe, 5), &ds, &cfg).unwrap();
        let mean = report.per_episode_accuracy.iter().sum::<f64>() / 1000.0;
        assert_eq!(mean, report.mean_accuracy);
        assert!(report.mean_accuracy < 0.75, "{}", report.mean_accuracy);
    }

    #[test]
    fn evaluation_is_deterministic_and_thread_independent() {
        let ds = features();
        let cfg = EvalConfig {
            episodes: 50,
            ..EvalConfig::clean(64, 2)
        };
        let model = feature_model(ModelKind::Spe, 1);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let three = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let a = one.install(|| evaluate(&model, &ds, &cfg).unwrap());
        let b = three.install(|| evaluate(&model, &ds, &cfg).unwrap());
        assert_eq!(a, b);
        assert!(a.to_text().contains("regime = support=clean,query=clean"));
    }

    #[test]
    fn paired_comparison_of_a_model_with_itself_is_all_ties() {
        let ds = features();
        let cfg = EvalConfig {
            episodes: 30,
            ..EvalConfig::clean(64, 3)
        };
        let m = feature_model(ModelKind::Pn, 4);
        let cmp = compare(&m, &m, &ds, &cfg).unwrap();
        assert_eq!(cmp.ties, 30);
        assert_eq!(cmp.sign_test_p, 1.0);
    }

    #[test]
    fn sweep_shapes_and_errors() {
        let spec = SyntheticSpec::default();
        let m = feature_model(ModelKind::Spe, 6);
        let t =
            uncertainty_sweep(&m, &spec, DataMode::Features, SweepKind::Hue, &[], 4, 0).unwrap();
        assert_eq!(t.to_csv(), "level,var_axis1,var_axis2\n");
        let t = uncertainty_sweep(
            &m,
            &spec,
            DataMode::Features,
            SweepKind::Leg,
            &[1.0, 0.1],
            2,
            0,
        )
        .unwrap();
        assert_eq!(t.rows.len(), 2);
        let three = EncoderModel::init(
            EncoderConfig::mlp(4, vec![8], 3),
            ModelKind::Spe,
            8,
            0.01,
            0,
        )
        .unwrap();
        assert!(uncertainty_sweep(
            &three,
            &spec,
            DataMode::Features,
            SweepKind::Hue,
            &[0.0],
            1,
            0
        )
        .is_err());
    }

    #[test]
    fn hue_verification_logic() {
        let row = |level: f64, a: f64, b: f64| SweepRow {
            level,
            variance: vec![a, b],
        };
        let good = SweepTable {
            kind: SweepKind::Hue,
            embed_dim: 2,
            rows: vec![
                row(0.0, 0.1, 0.2),
                row(18.0, 0.1, 0.4),
                row(36.0, 0.12, 0.6),
                row(54.0, 0.15, 0.9),
            ],
        };
        assert!(good.verify().is_ok());
        let mut flat = good.clone();
        flat.rows[2].variance[1] = 0.3;
        assert!(flat.verify().is_err());
        let mut both = good.clone();
        both.rows[3].variance[0] = 0.6;
        assert!(both.verify().is_err());
    }

    #[test]
    fn export_has_one_row_per_instance() {
        let ds = features();
        let m = feature_model(ModelKind::Spe, 7);
        let mut a = Vec::new();
        export_embeddings(&m, &ds, &mut a).unwrap();
        let mut b = Vec::new();
        export_embeddings(&m, &ds, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,label,orientation,hue,mu1,mu2,var1,var2");
        assert_eq!(lines.len(), ds.len() + 1);
        for line in &lines[1..] {
            let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert!(cols[6] > 0.0 && cols[7] > 0.0);
        }
    }
}
