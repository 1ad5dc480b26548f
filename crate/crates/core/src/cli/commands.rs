use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::*;
use crate::attribution::{integrated_gradients, integrated_gradients_auto, phi_archive, render_map};
use crate::data::{ingest, split, synth_generate, write_dataset, DatasetSplit, IngestOptions, Sample, SplitSamples, SynthConfig, METADATA_FILE};
use crate::evaluation::{aggregate, one_tailed_t_test, pr_points, roc_points, write_curve, MeanCi, MetricsReport};
use crate::hyperopt::{search, training_objective, write_trial_log, SearchSpace};
use crate::model::{predict_proba, Model, ModelSpec};
use crate::training::{fit, multi_run, test_report, write_epoch_log, RunOutcome, RunResult, TrainConfig};
use crate::transfer::{load_with_new_head, WeightArchive};

pub(super) fn dispatch(command: Command) -> CliResult<i32> {
    match command {
        Command::SynthData(a) => synth_data(&a),
        Command::Pretrain(a) => run_experiment(&a, Phase::Pretrain),
        Command::Train(a) => run_experiment(&a, Phase::Train),
        Command::Finetune(a) => run_experiment(&a, Phase::Finetune),
        Command::Evaluate(a) => evaluate(&a),
        Command::Curves(a) => curves(&a),
        Command::Attribute(a) => attribute(&a),
        Command::Compare(a) => compare(&a),
        Command::Search(a) => hyper_search(&a),
    }
}

/// Creates `dir`, refusing a non-empty one unless `overwrite` is set.
fn prepare_dir(dir: &Path, overwrite: bool) -> CliResult<()> {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() && !overwrite {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty; pass --overwrite to reuse it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn synth_config(variant: Variant, image_size: usize) -> SynthConfig {
    let base = match variant {
        Variant::Target => SynthConfig::default(),
        Variant::Source => SynthConfig::source_variant(),
    };
    SynthConfig { image_size, ..base }
}

fn synth_data(args: &SynthArgs) -> CliResult<i32> {
    if let Ok(mut entries) = std::fs::read_dir(&args.out) {
        if entries.next().is_some() {
            return Err(CliError::Usage(format!("{} exists and is not empty", args.out.display())));
        }
    }
    let samples = synth_generate(
        args.n,
        args.positive_fraction,
        args.seed,
        &synth_config(args.variant, args.image_size),
    )?;
    write_dataset(&args.out, &samples)?;
    println!("{}", args.out.join(METADATA_FILE).display());
    Ok(EXIT_OK)
}

fn load_dir(dir: &Path, height: usize, width: usize) -> CliResult<Vec<Sample>> {
    Ok(ingest(
        &dir.join("images"),
        &dir.join(METADATA_FILE),
        &IngestOptions { height, width },
    )?)
}

fn load_samples(cfg: &ExperimentConfig) -> CliResult<Vec<Sample>> {
    match (&cfg.data.dir, &cfg.synth) {
        (Some(dir), _) => load_dir(dir, cfg.data.height, cfg.data.width),
        (None, Some(s)) => {
            if cfg.data.height != cfg.data.width {
                return Err(CliError::Usage("synthetic images are square; set data.height == data.width".into()));
            }
            Ok(synth_generate(s.n, s.positive_fraction, s.seed, &synth_config(s.variant, cfg.data.height))?)
        }
        (None, None) => Err(CliError::Usage("no data source".into())),
    }
}

fn model_spec(cfg: &ExperimentConfig) -> CliResult<ModelSpec> {
    Ok(match &cfg.model.spec {
        Some(path) => ModelSpec::read(path)?,
        None => ModelSpec::standard(&cfg.model.standard, cfg.data.height, cfg.data.width)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Pretrain,
    Train,
    Finetune,
}

#[derive(Serialize)]
struct RunSummary {
    run: usize,
    seed: u64,
    stopped_epoch: usize,
    best_epoch: usize,
}

fn run_experiment(args: &RunArgs, phase: Phase) -> CliResult<i32> {
    let mut cfg = ExperimentConfig::resolve(args)?;
    let seed = cfg.validate()?;
    cfg.train.seed = seed;
    let archive = match (phase, &cfg.transfer.archive) {
        (Phase::Finetune, None) => {
            return Err(CliError::Usage("finetune requires --from-archive".into()));
        }
        (Phase::Finetune, Some(path)) => Some(WeightArchive::read(path)?),
        (_, Some(_)) => {
            return Err(CliError::Usage("only finetune takes a transfer archive".into()));
        }
        (_, None) => None,
    };
    let n_runs = cfg.n_runs.unwrap_or(if phase == Phase::Pretrain { 1 } else { 10 });
    if n_runs == 0 {
        return Err(CliError::Usage("n_runs must be at least 1".into()));
    }
    let out = cfg.output.dir.clone().expect("validated");

    let samples = load_samples(&cfg)?;
    let spec = model_spec(&cfg)?;
    let partition = split(&samples, seed)?;
    let data = partition.materialize(&samples)?;
    let policy = cfg.augment.enabled.then(|| cfg.augment.policy.clone());

    prepare_dir(&out, args.overwrite)?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_file(&out.join("spec.toml"), spec.to_toml().as_bytes())?;
    write_json(&out.join("split.json"), &partition)?;

    let outcomes = if n_runs == 1 {
        vec![single_run(&spec, &data, &cfg.train, policy.as_ref(), archive.as_ref())]
    } else {
        multi_run(&spec, &data, &cfg.train, policy.as_ref(), n_runs, archive.as_ref())?
    };

    let mut reports = Vec::new();
    let mut first_error = None;
    for outcome in outcomes {
        let dir = out.join(format!("run_{:02}", outcome.run));
        prepare_dir(&dir, true)?;
        match outcome.result {
            Ok((result, report)) => {
                write_file(&dir.join("weights.lsnbw"), &result.best_weights.to_bytes())?;
                write_epoch_log(&dir.join("epoch_log.jsonl"), &result.epoch_log)?;
                write_json(
                    &dir.join("run.json"),
                    &RunSummary {
                        run: outcome.run,
                        seed: outcome.seed,
                        stopped_epoch: result.stopped_epoch,
                        best_epoch: result.best_epoch,
                    },
                )?;
                let path = dir.join("report.json");
                write_json(&path, &report)?;
                println!("{}", path.display());
                if phase == Phase::Pretrain && outcome.run == 0 {
                    let path = out.join("pretrained.lsnbw");
                    write_file(&path, &result.best_weights.to_bytes())?;
                    println!("{}", path.display());
                }
                reports.push(report);
            }
            Err(e) => {
                eprintln!("run {} failed: {e}", outcome.run);
                first_error.get_or_insert(e);
            }
        }
    }
    if reports.len() >= 2 {
        let path = out.join("aggregate.json");
        write_json(&path, &aggregate(&reports)?)?;
        println!("{}", path.display());
    }
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(EXIT_OK),
    }
}

fn single_run(
    spec: &ModelSpec,
    data: &SplitSamples,
    config: &TrainConfig,
    policy: Option<&crate::data::AugmentationPolicy>,
    archive: Option<&WeightArchive>,
) -> RunOutcome {
    let result = (|| -> crate::Result<(RunResult, MetricsReport)> {
        let mut model = match archive {
            Some(a) => load_with_new_head(a, spec.clone(), config.seed)?,
            None => Model::build(spec.clone(), config.seed)?,
        };
        let result = fit(&mut model, &data.train, &data.valid, config, policy)?;
        let report = test_report(&model, &data.test)?;
        Ok((result, report))
    })();
    RunOutcome {
        run: 0,
        seed: config.seed,
        result,
    }
}

/// Loads the model and the samples selected by `--split`/`--partition`.
fn eval_inputs(args: &EvalArgs) -> CliResult<(Model, Vec<Sample>)> {
    let spec = ModelSpec::read(&args.model_spec)?;
    let model = WeightArchive::read(&args.archive)?.to_model(spec.clone())?;
    let [_, h, w] = spec.input_shape;
    let samples = load_dir(&args.data, h, w)?;
    let samples = match &args.split {
        None => samples,
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let partition: DatasetSplit =
                serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            let data = partition.materialize(&samples)?;
            match args.partition {
                Partition::Train => data.train,
                Partition::Valid => data.valid,
                Partition::Test => data.test,
            }
        }
    };
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()).into());
    }
    Ok((model, samples))
}

fn evaluate(args: &EvalArgs) -> CliResult<i32> {
    if args.out.exists() && !args.overwrite {
        return Err(CliError::Usage(format!(
            "{} exists; pass --overwrite to replace it",
            args.out.display()
        )));
    }
    let (model, samples) = eval_inputs(args)?;
    let report = test_report(&model, &samples)?;
    write_json(&args.out, &report)?;
    println!("{}", args.out.display());
    Ok(EXIT_OK)
}

fn curves(args: &EvalArgs) -> CliResult<i32> {
    let (model, samples) = eval_inputs(args)?;
    let scores = predict_proba(&model, &samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    prepare_dir(&args.out, args.overwrite)?;
    let roc = args.out.join("roc.csv");
    write_curve(&roc, "fpr", "tpr", &roc_points(&scores, &labels)?)?;
    let pr = args.out.join("pr.csv");
    write_curve(&pr, "recall", "precision", &pr_points(&scores, &labels)?)?;
    println!("{}\n{}", roc.display(), pr.display());
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct AttributionSummary {
    id: String,
    label: u8,
    steps_used: usize,
    output_delta: f64,
    completeness_gap: f64,
    relative_gap: f64,
    map: String,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn attribute(args: &AttributeArgs) -> CliResult<i32> {
    let (model, mut samples) = eval_inputs(&args.eval)?;
    if let Some(limit) = args.limit {
        samples.truncate(limit);
    }
    let out = &args.eval.out;
    prepare_dir(out, args.eval.overwrite)?;
    let mut summary = Vec::new();
    for sample in &samples {
        let map = match args.steps {
            Some(steps) => integrated_gradients(&model, sample, steps, None, args.target.into())?,
            None => integrated_gradients_auto(&model, sample, None, args.target.into())?,
        };
        let stem = file_stem(&sample.id);
        let pgm = format!("{stem}.pgm");
        render_map(&map, args.mode.into())?.write_pgm(&out.join(&pgm))?;
        phi_archive(&map)?.write(&out.join(format!("{stem}.phi.lsnbw")))?;
        summary.push(AttributionSummary {
            id: sample.id.clone(),
            label: sample.label,
            steps_used: map.steps_used,
            output_delta: map.output_delta,
            completeness_gap: map.completeness_gap,
            relative_gap: map.relative_gap(),
            map: pgm,
        });
    }
    let path = out.join("attribution_summary.json");
    write_json(&path, &summary)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

/// Values of `metric` from every `run_*/report.json` under `dir`.
fn run_metric(dir: &Path, metric: &str) -> CliResult<Vec<f64>> {
    let mut reports: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("run_")))
        .map(|p| p.join("report.json"))
        .filter(|p| p.is_file())
        .collect();
    reports.sort();
    if reports.len() < 2 {
        return Err(Error::Data(format!(
            "{} holds {} run reports; at least 2 are needed",
            dir.display(),
            reports.len()
        ))
        .into());
    }
    reports
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            value
                .get(metric)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::Schema(format!("{} has no numeric `{metric}`", path.display())).into())
        })
        .collect()
}

fn compare(args: &CompareArgs) -> CliResult<i32> {
    let a = run_metric(&args.a, &args.metric)?;
    let b = run_metric(&args.b, &args.metric)?;
    let (ca, cb) = (MeanCi::of(&a)?, MeanCi::of(&b)?);
    let sig = one_tailed_t_test(&a, &b)?;
    println!("metric: {}", args.metric);
    println!("a: {:.4} ± {:.4} (n={}) {}", ca.mean, ca.half_width_95, a.len(), args.a.display());
    println!("b: {:.4} ± {:.4} (n={}) {}{}", cb.mean, cb.half_width_95, b.len(), args.b.display(), sig.stars());
    println!(
        "welch t = {:.4}, df = {:.2}, one-tailed p (b > a) = {:.6}",
        sig.t_statistic, sig.degrees_freedom, sig.p_one_tailed
    );
    Ok(if sig.p_one_tailed < 0.05 { EXIT_OK } else { EXIT_NOT_SIGNIFICANT })
}

fn hyper_search(args: &SearchArgs) -> CliResult<i32> {
    let cfg = ExperimentConfig::resolve(&args.run)?;
    let seed = cfg.validate()?;
    if args.trial_epochs == 0 {
        return Err(CliError::Usage("--trial-epochs must be at least 1".into()));
    }
    let out = cfg.output.dir.clone().expect("validated");
    let samples = load_samples(&cfg)?;
    let data = split(&samples, seed)?.materialize(&samples)?;
    let base_train = TrainConfig {
        seed,
        max_epochs: args.trial_epochs,
        ..cfg.train.clone()
    };
    let policy = cfg.augment.enabled.then(|| cfg.augment.policy.clone());
    prepare_dir(&out, args.run.overwrite)?;
    let objective = training_objective(&data, &cfg.model.standard, &base_train, policy.as_ref());
    let ranked = search(&SearchSpace::default(), args.budget, seed, objective)?;
    let log = out.join("trials.jsonl");
    write_trial_log(&log, &ranked)?;
    let ranking = out.join("ranking.json");
    write_json(&ranking, &ranked)?;
    println!("{}\n{}", log.display(), ranking.display());
    Ok(EXIT_OK)
}
