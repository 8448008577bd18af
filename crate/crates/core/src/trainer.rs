//! Episodic training loop with a step-halving learning-rate schedule,
//! validation-based model selection and early stopping.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::corruption::OcclusionPolicy;
use crate::dataset::Dataset;
use crate::encoder::{EncoderModel, ModelKind};
use crate::episode::{materialize, sample_episode, EpisodeInputs, EpisodeSpec};
use crate::error::{Result, SpeError};
use crate::eval::{episode_accuracy, mean_and_std_error, DEFAULT_EVAL_SAMPLES};
use crate::prototype::{form_pn_prototypes_on_tape, form_prototypes_on_tape};
use crate::rng;
use crate::sampler::{pn_training_loss, standard_normal_noise, training_loss, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Heavy-ball momentum.
    Sgd { momentum: f64 },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Optimizer {
    type Err = SpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::sgd()),
            "adam" => Ok(Optimizer::adam()),
            other => Err(SpeError::invalid(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            ))),
        }
    }
}

/// Per-parameter optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    optimizer: Optimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, parameter_count: usize) -> Self {
        Self {
            optimizer,
            first: vec![0.0; parameter_count],
            second: match optimizer {
                Optimizer::Sgd { .. } => Vec::new(),
                Optimizer::Adam { .. } => vec![0.0; parameter_count],
            },
            steps: 0,
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        SpeError::dims(self.first.len(), params.len())?;
        SpeError::dims(params.len(), grad.len())?;
        self.steps += 1;
        match self.optimizer {
            Optimizer::Sgd { momentum } => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grad) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub halve_every_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub episodes_per_epoch: usize,
    pub validation_episodes: usize,
    /// Naive-sampler draws per query during validation.
    pub eval_samples: usize,
    pub sampler: SamplerConfig,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub gamma0: f64,
    pub support_policy: OcclusionPolicy,
    pub query_policy: OcclusionPolicy,
}

impl TrainerConfig {
    /// Schedule defaults; the occlusion policies default to clean with the
    /// given unit size.
    pub fn new(learning_rate: f64, unit_size: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            halve_every_epochs: 50,
            patience: 10,
            max_epochs: 200,
            episodes_per_epoch: 100,
            validation_episodes: 100,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            sampler: SamplerConfig::default(),
            optimizer: Optimizer::adam(),
            seed,
            gamma0: crate::encoder::DEFAULT_GAMMA0,
            support_policy: OcclusionPolicy::clean(unit_size),
            query_policy: OcclusionPolicy::clean(unit_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(SpeError::invalid(
                "learning_rate must be finite and non-negative",
            ));
        }
        if self.halve_every_epochs == 0 || self.patience == 0 {
            return Err(SpeError::invalid(
                "halve_every_epochs and patience must be positive",
            ));
        }
        if self.episodes_per_epoch == 0 || self.validation_episodes == 0 || self.eval_samples == 0 {
            return Err(SpeError::invalid(
                "episodes_per_epoch, validation_episodes and eval_samples must be positive",
            ));
        }
        self.sampler.validate()
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let halvings = (epoch.saturating_sub(1) / self.halve_every_epochs) as i32;
        self.learning_rate * 0.5f64.powi(halvings)
    }
}

/// Loss on one materialized episode, and its gradient in
/// [`EncoderModel::parameters`] order. `noise` feeds the sampler and must
/// hold `queries * samples_per_query * embed_dim` standard normals.
pub fn loss_and_gradient(
    model: &EncoderModel,
    inputs: &EpisodeInputs,
    sampler: &SamplerConfig,
    noise: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let params = model.register(&tape)?;
    let rows = inputs.row_refs();
    let emb = model.forward(&tape, &params, &rows)?;
    let n = rows.len();
    let support_mean = emb.mean.slice(0, 0, inputs.query_start)?;
    let query_mean = emb.mean.slice(0, inputs.query_start, n)?;
    let loss = match model.kind {
        ModelKind::Spe => {
            let support = crate::encoder::EmbeddingNodes {
                mean: support_mean,
                variance: emb.variance.slice(0, 0, inputs.query_start)?,
            };
            let queries = crate::encoder::EmbeddingNodes {
                mean: query_mean,
                variance: emb.variance.slice(0, inputs.query_start, n)?,
            };
            let protos = form_prototypes_on_tape(
                support,
                &inputs.support_groups,
                params.sigma_epsilon_sq()?,
            )?;
            training_loss(queries, protos, &inputs.targets, sampler, noise)?
        }
        ModelKind::Pn => {
            let protos = form_pn_prototypes_on_tape(support_mean, &inputs.support_groups)?;
            pn_training_loss(query_mean, protos, &inputs.targets)?
        }
    };
    let value = loss.item();
    if !value.is_finite() {
        return Err(SpeError::Numerical(format!(
            "non-finite training loss {value} (gamma {}, sigma_eps_sq {})",
            model.gamma,
            model.sigma_epsilon_sq()
        )));
    }
    let grads = tape.backward(loss)?;
    let grad = params.flat_gradient(&grads);
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(SpeError::Numerical(format!(
            "non-finite gradient at parameter {i} (loss {value})"
        )));
    }
    Ok((value, grad))
}

/// Sampler noise for one training episode.
pub fn training_noise(
    model: &EncoderModel,
    inputs: &EpisodeInputs,
    sampler: &SamplerConfig,
    seed: u64,
) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::TAG_SAMPLER_NOISE]);
    standard_normal_noise(
        &mut r,
        inputs.query_count() * sampler.samples_per_query,
        model.embed_dim(),
    )
    .into_iter()
    .flatten()
    .collect()
}

/// One optimizer update on one episode; returns the pre-update loss.
pub fn train_step(
    model: &mut EncoderModel,
    state: &mut OptimizerState,
    inputs: &EpisodeInputs,
    sampler: &SamplerConfig,
    noise: &[f64],
    learning_rate: f64,
) -> Result<f64> {
    let (loss, grad) = loss_and_gradient(model, inputs, sampler, noise)?;
    let mut params = model.parameters();
    state.step(&mut params, &grad, learning_rate)?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(SpeError::Numerical("parameters became non-finite".into()));
    }
    model.set_parameters(&params)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub episodes_seen: usize,
    pub learning_rate: f64,
    pub mean_train_loss: f64,
    pub val_accuracy: f64,
    pub gamma: f64,
    pub sigma_eps_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str =
    "epoch,episodes_seen,learning_rate,mean_train_loss,val_accuracy,gamma,sigma_eps_sq";

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:e},{:.9},{:.6},{:.9},{:.9e}",
                r.epoch,
                r.episodes_seen,
                r.learning_rate,
                r.mean_train_loss,
                r.val_accuracy,
                r.gamma,
                r.sigma_eps_sq
            );
        }
        out
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_accuracy).reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: EncoderModel,
    pub log: TrainingLog,
    /// Epoch whose parameters were kept (0 means the initial model).
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
}

/// Mean episodic accuracy on a fixed set of validation episodes (the same
/// episodes every epoch, derived from `seed`).
pub fn validation_accuracy(
    model: &EncoderModel,
    episodes: &[(EpisodeInputs, u64)],
    eval_samples: usize,
) -> Result<f64> {
    let acc = episodes
        .par_iter()
        .map(|(inputs, seed)| episode_accuracy(model, inputs, eval_samples, *seed))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_std_error(&acc).0)
}

fn build_episodes(
    dataset: &Dataset,
    spec: &EpisodeSpec,
    support_policy: &OcclusionPolicy,
    query_policy: &OcclusionPolicy,
    base: u64,
    tag: u64,
    indices: std::ops::Range<usize>,
) -> Result<Vec<(EpisodeInputs, u64)>> {
    indices
        .into_par_iter()
        .map(|e| {
            let seed = rng::derive_seed(base, &[tag, e as u64]);
            let episode = sample_episode(dataset, spec, &mut rng::stream(seed, &[]))?;
            let inputs = materialize(dataset, &episode, support_policy, query_policy, seed)?;
            Ok((inputs, seed))
        })
        .collect()
}

/// Trains `model` on episodes drawn from `train`, validating after every
/// epoch on fixed, unoccluded episodes from `validation`.
///
/// The learning rate halves every `halve_every_epochs` epochs. Training stops
/// after `patience` epochs without a strict improvement in validation
/// accuracy, and the parameters from the best epoch are returned. Every
/// episode is drawn from a stream derived from the config seed and the
/// episode's global index, so results do not depend on the thread count.
pub fn fit(
    model: EncoderModel,
    train: &Dataset,
    validation: &Dataset,
    spec: &EpisodeSpec,
    config: &TrainerConfig,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<FitResult> {
    config.validate()?;
    let mut log = TrainingLog::default();
    if config.max_epochs == 0 {
        return Ok(FitResult {
            model,
            log,
            best_epoch: 0,
            best_val_accuracy: None,
        });
    }
    spec.check_dataset(train)?;
    spec.check_dataset(validation)?;
    let clean = OcclusionPolicy::clean(config.support_policy.unit_size);
    let val_episodes = build_episodes(
        validation,
        spec,
        &clean,
        &clean,
        config.seed,
        rng::TAG_VALIDATION,
        0..config.validation_episodes,
    )?;

    let mut model = model;
    let mut state = OptimizerState::new(config.optimizer, model.parameter_count());
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut episodes_seen = 0;

    for epoch in 1..=config.max_epochs {
        let lr = config.learning_rate_at(epoch);
        let start = episodes_seen;
        let batch = build_episodes(
            train,
            spec,
            &config.support_policy,
            &config.query_policy,
            config.seed,
            rng::TAG_TRAIN,
            start..start + config.episodes_per_epoch,
        )?;
        let mut loss_sum = 0.0;
        for (inputs, seed) in &batch {
            let noise = training_noise(&model, inputs, &config.sampler, *seed);
            loss_sum += train_step(&mut model, &mut state, inputs, &config.sampler, &noise, lr)?;
        }
        episodes_seen += batch.len();
        let val_accuracy = validation_accuracy(&model, &val_episodes, config.eval_samples)?;
        let row = LogRow {
            epoch,
            episodes_seen,
            learning_rate: lr,
            mean_train_loss: loss_sum / batch.len() as f64,
            val_accuracy,
            gamma: model.gamma,
            sigma_eps_sq: model.sigma_epsilon_sq(),
        };
        on_epoch(&row);
        log.rows.push(row);
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(FitResult {
        model: best,
        log,
        best_epoch,
        best_val_accuracy: Some(best_acc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DataMode;
    use crate::encoder::EncoderConfig;
    use crate::sampler::SamplerKind;
    use crate::synthetic::{generate_dataset, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data() -> Dataset {
        generate_dataset(&SyntheticSpec::default(), 50, 8, DataMode::Features).unwrap()
    }

    fn model(kind: ModelKind, seed: u64) -> EncoderModel {
        EncoderModel::init(EncoderConfig::mlp(4, vec![32], 2), kind, 8, 0.01, seed).unwrap()
    }

    fn episode(ds: &Dataset, seed: u64) -> EpisodeInputs {
        let ep = sample_episode(
            ds,
            &EpisodeSpec::default(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let clean = OcclusionPolicy::clean(64);
        materialize(ds, &ep, &clean, &clean, seed).unwrap()
    }

    #[test]
    fn learning_rate_halves_on_schedule() {
        let cfg = TrainerConfig::new(1e-3, 64, 0);
        assert_eq!(cfg.learning_rate_at(1), 1e-3);
        assert_eq!(cfg.learning_rate_at(50), 1e-3);
        assert_eq!(cfg.learning_rate_at(51), 5e-4);
        assert_eq!(cfg.learning_rate_at(101), 2.5e-4);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = data();
        for opt in [Optimizer::sgd(), Optimizer::adam()] {
            let mut m = model(ModelKind::Spe, 1);
            let before = m.clone();
            let mut state = OptimizerState::new(opt, m.parameter_count());
            let inputs = episode(&ds, 0);
            let sampler = SamplerConfig::default();
            let noise = training_noise(&m, &inputs, &sampler, 0);
            train_step(&mut m, &mut state, &inputs, &sampler, &noise, 0.0).unwrap();
            assert_eq!(m, before);
        }
    }

    #[test]
    fn initial_loss_is_near_ln_four() {
        let ds = data();
        let mut total = 0.0;
        for seed in 0..20 {
            let m = model(ModelKind::Spe, seed);
            let inputs = episode(&ds, seed);
            let sampler = SamplerConfig::default();
            let noise = training_noise(&m, &inputs, &sampler, seed);
            total += loss_and_gradient(&m, &inputs, &sampler, &noise).unwrap().0;
        }
        let mean = total / 20.0;
        assert!((mean - 4f64.ln()).abs() < 0.7, "{mean}");
    }

    #[test]
    fn one_step_reduces_loss_on_average() {
        // Paired over fresh models: count how often the same episode's loss
        // falls after one update.
        let ds = data();
        let mut wins = 0;
        let mut losses = 0;
        for seed in 0..20 {
            let mut m = model(ModelKind::Spe, 100 + seed);
            let inputs = episode(&ds, seed);
            let sampler = SamplerConfig::default();
            let noise = training_noise(&m, &inputs, &sampler, seed);
            let mut state = OptimizerState::new(Optimizer::sgd(), m.parameter_count());
            let before = train_step(&mut m, &mut state, &inputs, &sampler, &noise, 1e-2).unwrap();
            let after = loss_and_gradient(&m, &inputs, &sampler, &noise).unwrap().0;
            if after < before {
                wins += 1;
            } else if after > before {
                losses += 1;
            }
        }
        assert!(
            crate::eval::sign_test_p(wins, losses) < 0.05,
            "{wins} vs {losses}"
        );
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = data();
        let m = model(ModelKind::Spe, 3);
        let cfg = TrainerConfig {
            max_epochs: 0,
            ..TrainerConfig::new(1e-3, 64, 0)
        };
        let fit = fit(m.clone(), &ds, &ds, &EpisodeSpec::default(), &cfg, |_| {}).unwrap();
        assert_eq!(fit.model, m);
        assert!(fit.log.rows.is_empty());
        assert_eq!(fit.log.to_csv(), format!("{LOG_HEADER}\n"));
    }

    #[test]
    fn fit_is_deterministic_and_learns_features() {
        let ds = data();
        let (train, val) = ds.stratified_split(0.8, 0).unwrap();
        let cfg = TrainerConfig {
            max_epochs: 6,
            halve_every_epochs: 2,
            episodes_per_epoch: 40,
            validation_episodes: 40,
            eval_samples: 50,
            optimizer: Optimizer::adam(),
            ..TrainerConfig::new(1e-2, 64, 5)
        };
        let run = || {
            fit(
                model(ModelKind::Spe, 9),
                &train,
                &val,
                &EpisodeSpec::default(),
                &cfg,
                |_| {},
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let lrs: Vec<f64> = a.log.rows.iter().map(|r| r.learning_rate).collect();
        assert_eq!(&lrs[..4], &[1e-2, 1e-2, 5e-3, 5e-3]);
        assert!(
            a.best_val_accuracy.unwrap() > 0.6,
            "{:?}",
            a.best_val_accuracy
        );
        assert!(a
            .log
            .rows
            .iter()
            .all(|r| r.sigma_eps_sq > 0.0 && r.gamma.is_finite()));
    }

    #[test]
    fn pn_and_naive_paths_train() {
        let ds = data();
        for (kind, method) in [
            (ModelKind::Pn, SamplerKind::Intersection),
            (ModelKind::Spe, SamplerKind::Naive),
        ] {
            let mut m = model(kind, 2);
            let sampler = SamplerConfig {
                method,
                samples_per_query: 4,
            };
            let inputs = episode(&ds, 1);
            let noise = training_noise(&m, &inputs, &sampler, 1);
            let mut state = OptimizerState::new(Optimizer::sgd(), m.parameter_count());
            let loss = train_step(&mut m, &mut state, &inputs, &sampler, &noise, 1e-3).unwrap();
            assert!(loss.is_finite());
        }
    }
}
