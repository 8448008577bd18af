//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use clap::{ArgMatches, CommandFactory};
use spe_core::dataset::{DataMode, Dataset};
use spe_core::encoder::{EncoderConfig, EncoderModel, Pooling};
use spe_core::episode::EpisodeSpec;
use spe_core::eval::{
    compare, evaluate, export_embeddings, policy_for, uncertainty_sweep, EvalConfig, EvalReport,
    PairedComparison, SweepKind,
};
use spe_core::manifest::{join_list, Manifest};
use spe_core::sampler::SamplerConfig;
use spe_core::synthetic::{generate_dataset, SyntheticSpec};
use spe_core::trainer::{fit, TrainerConfig};

use crate::config::{
    config_path_for_file, replay_args, resolved_config, write_config, RUN_CONFIG_FILE,
};
use crate::error::{CliError, CliResult};
use crate::{Cli, Command, EpisodeArgs, EvalArgs, ExportArgs, GenDataArgs, SweepArgs, TrainArgs};

/// Default hue-noise levels in degrees of per-pixel hue standard deviation.
pub const DEFAULT_HUE_LEVELS: [f64; 5] = [0.0, 15.0, 30.0, 45.0, 60.0];
/// Default leg lengths as a fraction of the full leg.
pub const DEFAULT_LEG_LEVELS: [f64; 4] = [1.0, 0.7, 0.4, 0.1];

/// Log file written next to a trained model.
pub const TRAINING_LOG_FILE: &str = "log.csv";

pub fn dispatch(cli: Cli, matches: &ArgMatches) -> CliResult<()> {
    let (name, sub) = matches
        .subcommand()
        .ok_or_else(|| CliError::Config("missing command".into()))?;
    if let Command::Replay(args) = &cli.command {
        let m = Manifest::read(&args.config)?;
        let argv = replay_args(&m)?;
        let replayed = Cli::command()
            .try_get_matches_from(argv)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let replayed_cli = <Cli as clap::FromArgMatches>::from_arg_matches(&replayed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        return dispatch(replayed_cli, &replayed);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
    let config = resolved_config(name, sub, cli.threads)?;
    pool.install(|| match cli.command {
        Command::GenData(a) => gen_data(&a, config),
        Command::Train(a) => train(&a, config),
        Command::Eval(a) => eval(&a, config),
        Command::Sweep(a) => sweep(&a, config),
        Command::ExportEmbeddings(a) => export(&a, config),
        Command::Replay(_) => unreachable!("handled above"),
    })
}

fn episode_spec(a: &EpisodeArgs) -> EpisodeSpec {
    EpisodeSpec {
        ways: a.ways,
        shots: a.shots,
        queries_per_class: a.queries,
    }
}

fn resolve_unit(requested: usize, dataset: &Dataset) -> usize {
    match (requested, dataset.image_shape()) {
        (0, Some(shape)) => shape.height,
        (u, _) => u,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn gen_data(a: &GenDataArgs, config: Manifest) -> CliResult<()> {
    let spec = SyntheticSpec {
        image_size: a.image_size,
        noisy_fraction: a.noisy_fraction,
        ..SyntheticSpec::default()
    };
    let mode = if a.feature_mode {
        DataMode::Features
    } else {
        DataMode::Pixels
    };
    let dataset = generate_dataset(&spec, a.per_class, a.seed, mode)?;
    dataset.save(&a.out)?;
    write_config(&config, &a.out.join(RUN_CONFIG_FILE))?;
    let noisy = dataset.noise.iter().filter(|n| n.is_noisy()).count();
    println!(
        "wrote {} {} instances ({} classes x {}, {noisy} noisy) with seed {} to {}",
        dataset.len(),
        mode,
        dataset.num_classes(),
        a.per_class,
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs, mut config: Manifest) -> CliResult<()> {
    let dataset = Dataset::load(&a.data)?;
    if !(0.0..1.0).contains(&a.val_fraction) || a.val_fraction == 0.0 {
        return Err(CliError::Config("--val-fraction must lie in (0, 1)".into()));
    }
    let (train_set, val_set) = dataset.stratified_split(1.0 - a.val_fraction, a.seed)?;
    let unit = resolve_unit(a.unit_size, &dataset);
    config.set("unit-size", unit);

    let mut encoder = EncoderConfig::mlp(dataset.input_dim, a.hidden.clone(), a.dim);
    match dataset.image_shape() {
        Some(shape) if a.pool > 1 => {
            encoder.pooling = Some(Pooling {
                height: shape.height,
                width: shape.width,
                channels: shape.channels,
                factor: a.pool,
                mode: a.pool_mode,
            });
        }
        _ => {
            config.set("pool", 1);
        }
    }
    let spec = episode_spec(&a.episode);
    let model = EncoderModel::init(encoder, a.model, spec.support_count(), a.gamma0, a.seed)?;
    let policy = policy_for(a.occlusion, a.corruption_prob, unit);
    let trainer = TrainerConfig {
        halve_every_epochs: a.halve_every,
        patience: a.patience,
        max_epochs: a.max_epochs,
        episodes_per_epoch: a.episodes_per_epoch,
        validation_episodes: a.validation_episodes,
        eval_samples: a.eval_samples,
        sampler: SamplerConfig {
            method: a.sampler,
            samples_per_query: a.samples,
        },
        optimizer: a.optimizer,
        gamma0: a.gamma0,
        support_policy: policy,
        query_policy: policy,
        ..TrainerConfig::new(a.lr, unit, a.seed)
    };
    let result = fit(model, &train_set, &val_set, &spec, &trainer, |row| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  val {:.4}  sigma_eps^2 {:.4}",
            row.epoch, row.learning_rate, row.mean_train_loss, row.val_accuracy, row.sigma_eps_sq
        );
    })?;
    result.model.save(&a.out)?;
    write_file(
        &a.out.join(TRAINING_LOG_FILE),
        result.log.to_csv().as_bytes(),
    )?;
    write_config(&config, &a.out.join(RUN_CONFIG_FILE))?;
    match result.best_val_accuracy {
        Some(acc) => println!(
            "trained {} model: best validation accuracy {acc:.4} at epoch {} of {}; saved to {}",
            a.model.as_str(),
            result.best_epoch,
            result.log.rows.len(),
            a.out.display()
        ),
        None => println!(
            "saved untrained {} model to {}",
            a.model.as_str(),
            a.out.display()
        ),
    }
    Ok(())
}

fn verify_report(report: &EvalReport) -> Result<(), String> {
    let all_valid = report
        .per_episode_accuracy
        .iter()
        .all(|a| (0.0..=1.0).contains(a));
    if !all_valid || !report.mean_accuracy.is_finite() || !report.std_error.is_finite() {
        return Err("episode accuracies must be finite and within [0, 1]".into());
    }
    if report.per_episode_accuracy.len() != report.config.episodes {
        return Err("report does not cover every episode".into());
    }
    Ok(())
}

/// Corrupt support: the first model must win with sign-test p < 0.01.
/// Clean support: it must not trail the second by more than 0.02.
fn verify_comparison(c: &PairedComparison) -> Result<(), String> {
    verify_report(&c.first)?;
    verify_report(&c.second)?;
    if c.first.config.support_policy.is_active() {
        if c.mean_delta() <= 0.0 || c.sign_test_p >= 0.01 {
            return Err(format!(
                "corrupt-support advantage not shown: mean delta {:.4}, sign-test p {:.3e}",
                c.mean_delta(),
                c.sign_test_p
            ));
        }
    } else if c.mean_delta() < -0.02 {
        return Err(format!(
            "first model trails by {:.4} on clean support",
            -c.mean_delta()
        ));
    }
    Ok(())
}

fn eval(a: &EvalArgs, mut config: Manifest) -> CliResult<()> {
    let model = EncoderModel::load(&a.model_path)?;
    let dataset = Dataset::load(&a.data)?;
    let unit = resolve_unit(a.unit_size, &dataset);
    config.set("unit-size", unit);
    let cfg = EvalConfig {
        episodes: a.episodes,
        spec: episode_spec(&a.episode),
        support_policy: policy_for(a.support, a.corruption_prob, unit),
        query_policy: policy_for(a.query, a.corruption_prob, unit),
        eval_samples: a.eval_samples,
        seed: a.seed,
    };
    let verdict = match &a.compare {
        None => {
            let report = evaluate(&model, &dataset, &cfg)?;
            write_file(&a.out, report.to_text().as_bytes())?;
            println!(
                "{} {}: accuracy {:.4} +/- {:.4} over {} episodes",
                report.model_kind.as_str(),
                cfg.regime(),
                report.mean_accuracy,
                report.std_error,
                cfg.episodes
            );
            verify_report(&report)
        }
        Some(other_path) => {
            let other = EncoderModel::load(other_path)?;
            let c = compare(&model, &other, &dataset, &cfg)?;
            write_file(&a.out, c.to_text().as_bytes())?;
            println!(
                "{}: {} {:.4} vs {} {:.4}, mean delta {:+.4}, wins {} losses {} ties {}, sign-test p {:.3e}",
                cfg.regime(),
                c.first.model_kind.as_str(),
                c.first.mean_accuracy,
                c.second.model_kind.as_str(),
                c.second.mean_accuracy,
                c.mean_delta(),
                c.wins,
                c.losses,
                c.ties,
                c.sign_test_p
            );
            verify_comparison(&c)
        }
    };
    write_config(&config, &config_path_for_file(&a.out))?;
    if a.verify {
        verdict.map_err(CliError::Verification)?;
        println!("verify: ok");
    }
    Ok(())
}

/// Recovers the data layout a model was trained on from its input size.
fn model_data_layout(model: &EncoderModel) -> CliResult<(SyntheticSpec, DataMode)> {
    let spec = SyntheticSpec::default();
    let n = model.config.input_dim;
    if let Some(p) = model.config.pooling {
        return Ok((
            SyntheticSpec {
                image_size: p.height,
                ..spec
            },
            DataMode::Pixels,
        ));
    }
    if n == 4 {
        return Ok((spec, DataMode::Features));
    }
    let side = ((n / 3) as f64).sqrt().round() as usize;
    if side * side * 3 == n {
        return Ok((
            SyntheticSpec {
                image_size: side,
                ..spec
            },
            DataMode::Pixels,
        ));
    }
    Err(CliError::Config(format!(
        "model input size {n} matches neither feature vectors nor square RGB images"
    )))
}

fn parse_levels(raw: Option<&str>, kind: SweepKind) -> CliResult<Vec<f64>> {
    match raw {
        None => Ok(match kind {
            SweepKind::Hue => DEFAULT_HUE_LEVELS.to_vec(),
            SweepKind::Leg => DEFAULT_LEG_LEVELS.to_vec(),
        }),
        Some(s) if s.trim().is_empty() => Ok(Vec::new()),
        Some(s) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad level `{v}`")))
            })
            .collect(),
    }
}

fn sweep(a: &SweepArgs, mut config: Manifest) -> CliResult<()> {
    let model = EncoderModel::load(&a.model_path)?;
    let (spec, mode) = model_data_layout(&model)?;
    let levels = parse_levels(a.levels.as_deref(), a.kind)?;
    config.set("levels", join_list(&levels));
    let table = uncertainty_sweep(
        &model,
        &spec,
        mode,
        a.kind,
        &levels,
        a.samples_per_level,
        a.seed,
    )?;
    write_file(&a.out, table.to_csv().as_bytes())?;
    write_config(&config, &config_path_for_file(&a.out))?;
    println!(
        "{} sweep over {} levels written to {}",
        a.kind.as_str(),
        levels.len(),
        a.out.display()
    );
    if a.verify {
        table.verify().map_err(CliError::Verification)?;
        println!("verify: ok");
    }
    Ok(())
}

fn export(a: &ExportArgs, config: Manifest) -> CliResult<()> {
    let model = EncoderModel::load(&a.model_path)?;
    let dataset = Dataset::load(&a.data)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let file = File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut out = BufWriter::new(file);
    export_embeddings(&model, &dataset, &mut out)?;
    out.flush().map_err(|e| CliError::io(&a.out, e))?;
    write_config(&config, &config_path_for_file(&a.out))?;
    println!(
        "exported {} embeddings to {}",
        dataset.len(),
        a.out.display()
    );
    Ok(())
}
