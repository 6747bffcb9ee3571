mod error;
mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sigzsl::dataset::{load_sigds, save_sigds, sieve_by_snr, split_dataset, Corpus, DatasetSplit, SplitSpec};
use sigzsl::discriminator::{DiscriminatorConfig, MetricKind, Tag, DEFAULT_SHRINKAGE};
use sigzsl::loss::LossWeights;
use sigzsl::metrics::REPORT_CSV_HEADER;
use sigzsl::net::{init_params, load_checkpoint, save_checkpoint, ArchConfig, ModelParams};
use sigzsl::synth::{generate_dataset, ChannelConfig, ModulationType, SynthConfig};
use sigzsl::train::{
    evaluate_cluster, evaluate_softmax, fit, write_history_csv, AccuracyReport, LabeledFrames, Silent, TrainConfig,
};
use sigzsl::zsl::{lambda_grid, presentation_order, run_discrimination, sweep, ZslInputs};

use error::CliError;
use manifest::{unix_now, RunManifest};

#[derive(Parser)]
#[command(name = "sigzsl", version, about = "Zero-shot modulation recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled I/Q corpus
    Gen(GenArgs),
    /// Train on the known classes of a corpus
    Train(TrainArgs),
    /// Softmax and nearest-center accuracy on the known test set
    Eval(EvalArgs),
    /// Run known/unknown discrimination over the mixed test set
    Discriminate(DiscriminateArgs),
    /// Repeat discrimination over a lambda1 grid
    Sweep(SweepArgs),
    /// Re-run the command recorded in a manifest
    Replay(ReplayArgs),
}

#[derive(Args)]
struct GenArgs {
    /// "all" or a comma-separated list of modulation names
    #[arg(long, default_value = "all")]
    classes: String,
    #[arg(long)]
    frames_per_class: usize,
    /// SNR values in dB: "start:end:step" or a comma-separated list
    #[arg(long, default_value = "2:40:2")]
    snr: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable Rayleigh fading (taps keep their RMS gains)
    #[arg(long)]
    no_fading: bool,
    /// Largest sample-clock offset in ppm
    #[arg(long, default_value_t = 50.0)]
    clock_ppm: f64,
    /// Largest carrier offset in cycles per sample; 0 disables it
    #[arg(long, default_value_t = 0.0)]
    cfo: f64,
    /// Keep the faded frame power instead of rescaling each frame to unit power
    #[arg(long)]
    raw_power: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DataArgs {
    /// SIGDS corpus
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated classes withheld from training
    #[arg(long, default_value = "")]
    unknown: String,
    /// Drop records below this SNR (dB) before splitting
    #[arg(long, allow_hyphen_values = true)]
    min_snr: Option<i16>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    center_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_ct: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_r: f64,
    /// Epochs without validation improvement before stopping; 0 never stops
    #[arg(long, default_value_t = 25)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_ce: bool,
    #[arg(long)]
    no_ct: bool,
    #[arg(long)]
    no_r: bool,
    /// Use 1 + n_j as the center-step denominator
    #[arg(long)]
    classic_center_update: bool,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "mahalanobis")]
    metric: MetricKind,
    #[arg(long, default_value_t = DEFAULT_SHRINKAGE)]
    shrinkage: f64,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DiscriminationArgs {
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    /// Seed of the test-set presentation order
    #[arg(long, default_value_t = 0)]
    order_seed: u64,
    /// Refresh known centers with accepted samples
    #[arg(long)]
    update_known: bool,
    /// Fit covariances for unknown labels with more than t members
    #[arg(long)]
    unknown_covariance: bool,
}

#[derive(Args, Serialize)]
struct DiscriminateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    disc: DiscriminationArgs,
    #[arg(long)]
    lambda1: f64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    disc: DiscriminationArgs,
    /// lambda1 grid as "start:end:step"
    #[arg(long, default_value = "0.05:1.0:0.05")]
    grid: String,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Arguments as recorded in a manifest: everything except `--out`.
fn recorded_args(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            out.push(a.clone());
        }
    }
    out
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn parse_snr(spec: &str) -> Result<Vec<i32>, CliError> {
    let bad = || CliError::Usage(format!("bad SNR specification {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let values: Vec<i32> = if parts.len() == 3 {
        let [a, b, s] = [parts[0], parts[1], parts[2]].map(|p| p.trim().parse::<i32>());
        let (a, b, s) = (a.map_err(|_| bad())?, b.map_err(|_| bad())?, s.map_err(|_| bad())?);
        if s <= 0 || a > b {
            return Err(bad());
        }
        (a..=b).step_by(s as usize).collect()
    } else if parts.len() == 1 {
        spec.split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    } else {
        return Err(bad());
    };
    if values.is_empty() {
        return Err(bad());
    }
    Ok(values)
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("bad grid specification {spec:?}"));
    let p: Vec<f64> = spec
        .split(':')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let grid = match p[..] {
        [a, b, s] => lambda_grid(a, b, s),
        _ => return Err(bad()),
    };
    if grid.is_empty() {
        return Err(CliError::Usage(format!("grid {spec:?} is empty")));
    }
    Ok(grid)
}

fn parse_classes(spec: &str) -> Result<Vec<ModulationType>, CliError> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(ModulationType::ALL.to_vec());
    }
    Ok(spec
        .split(',')
        .map(|s| s.trim().parse::<ModulationType>())
        .collect::<Result<_, _>>()?)
}

/// Matches user-supplied names against the corpus table, tolerating case
/// and `-`/`_` differences.
fn resolve_unknown(corpus: &Corpus, spec: &str) -> Result<Vec<String>, CliError> {
    let norm = |v: &str| v.to_ascii_uppercase().replace(['-', '_'], "");
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            corpus
                .class_names
                .iter()
                .find(|c| *c == name || norm(c) == norm(name))
                .cloned()
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "class {name:?} is not in the corpus (classes: {})",
                        corpus.class_names.join(", ")
                    ))
                })
        })
        .collect()
}

fn load_split(args: &DataArgs) -> Result<DatasetSplit, CliError> {
    let corpus = load_sigds(&args.data).map_err(|e| CliError::Data(format!("{}: {e}", args.data.display())))?;
    let corpus = sieve_by_snr(&corpus, args.min_snr);
    let unknown = resolve_unknown(&corpus, &args.unknown)?;
    let spec = SplitSpec::withholding(&corpus, &unknown, args.split_seed);
    let split = split_dataset(&corpus, &spec)?;
    log::info!(
        "split: {} train, {} validation, {} known test, {} unknown test",
        split.train.len(),
        split.val_known.len(),
        split.test_known.len(),
        split.test_unknown.len()
    );
    Ok(split)
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

struct Run<'a> {
    dir: &'a Path,
    outputs: Vec<String>,
}

impl Run<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.dir.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(name, text.as_bytes())
    }
}

fn cmd_gen(args: &GenArgs, run: &mut Run) -> Result<serde_json::Value, CliError> {
    let classes = parse_classes(&args.classes)?;
    let snrs = parse_snr(&args.snr)?;
    let synth = SynthConfig {
        normalize_received: !args.raw_power,
        ..SynthConfig::default()
    };
    let mut channel = ChannelConfig::standard(0);
    channel.rayleigh_fading = !args.no_fading;
    channel.clock_offset_ppm = args.clock_ppm;
    channel.max_carrier_offset = args.cfo;
    let corpus = generate_dataset(&classes, args.frames_per_class, &snrs, &synth, &channel, args.seed)?;
    save_sigds(&corpus, &run.dir.join("corpus.sigds"))?;
    run.outputs.push("corpus.sigds".into());
    log::info!("wrote {} frames", corpus.len());
    Ok(serde_json::json!({
        "classes": classes.iter().map(|c| c.name()).collect::<Vec<_>>(),
        "frames_per_class": args.frames_per_class,
        "snr_db": snrs,
        "seed": args.seed,
        "synth": synth,
        "channel": channel,
    }))
}

fn cmd_train(args: &TrainArgs, run: &mut Run) -> Result<serde_json::Value, CliError> {
    let split = load_split(&args.data)?;
    let known = split.known_classes;
    let arch = ArchConfig::new(split.class_names()[..known].to_vec());
    let config = TrainConfig {
        batch_size: args.batch_size,
        learning_rate: args.lr,
        center_rate: args.center_rate,
        weights: LossWeights {
            lambda_ct: args.lambda_ct,
            lambda_r: args.lambda_r,
            ce_on: !args.no_ce,
            ct_on: !args.no_ct,
            r_on: !args.no_r,
        },
        max_epochs: args.epochs,
        seed: args.seed,
        patience: args.patience,
        classic_center_update: args.classic_center_update,
    };
    config.validate()?;
    let mut model = init_params(&arch, args.seed)?;
    model.centers.alpha = args.center_rate;
    let train = LabeledFrames::from_corpus(&split.train);
    let val = LabeledFrames::from_corpus(&split.val_known);
    let outcome = fit(model, &train, &val, &config, &mut Silent)?;
    save_checkpoint(&outcome.best, &run.dir.join("model.sr2c"))?;
    run.outputs.push("model.sr2c".into());
    let mut history = Vec::new();
    write_history_csv(&outcome.history, &mut history)?;
    run.write("history.csv", &history)?;
    log::info!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    Ok(serde_json::json!({
        "data": &args.data,
        "train": config,
        "ce_on": config.weights.ce_on,
        "ct_on": config.weights.ct_on,
        "r_on": config.weights.r_on,
        "architecture": arch,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
    }))
}

#[derive(Serialize)]
struct EvalReport {
    classes: Vec<String>,
    metric: MetricKind,
    softmax: AccuracyReport,
    cluster: AccuracyReport,
}

fn cmd_eval(args: &EvalArgs, run: &mut Run) -> Result<serde_json::Value, CliError> {
    let split = load_split(&args.data)?;
    let model = load_model(&args.model.model)?;
    let inputs = ZslInputs::prepare(&model, &split, args.model.shrinkage)?;
    let test = LabeledFrames::from_corpus(&split.test_known);
    let softmax = evaluate_softmax(&model, &test)?;
    let cluster = evaluate_cluster(&model, &test, &inputs.stats, args.model.metric)?;
    let classes = split.class_names()[..split.known_classes].to_vec();
    let counts = split.test_known.class_counts();
    let mut csv = String::from("method,class,samples,accuracy\n");
    for (method, report) in [("softmax", &softmax), ("cluster", &cluster)] {
        for (c, acc) in report.per_class.iter().enumerate() {
            let acc = acc.map_or("NA".to_string(), |v| v.to_string());
            csv += &format!("{method},{},{},{acc}\n", classes[c], counts[c]);
        }
        csv += &format!("{method},macro,{},{}\n", report.samples, report.macro_accuracy);
    }
    run.write("eval.csv", csv.as_bytes())?;
    log::info!(
        "softmax accuracy {:.4}, cluster accuracy {:.4}",
        softmax.macro_accuracy,
        cluster.macro_accuracy
    );
    run.json(
        "eval.json",
        &EvalReport {
            classes,
            metric: args.model.metric,
            softmax,
            cluster,
        },
    )?;
    Ok(serde_json::json!({ "data": &args.data, "model": &args.model }))
}

fn discrimination_config(model: &ModelArgs, disc: &DiscriminationArgs, lambda1: f64) -> DiscriminatorConfig {
    DiscriminatorConfig {
        lambda1,
        lambda2: disc.lambda2,
        metric: model.metric,
        update_known: disc.update_known,
        shrinkage: model.shrinkage,
        unknown_covariance: disc.unknown_covariance,
    }
}

fn zsl_inputs(data: &DataArgs, model: &ModelArgs) -> Result<ZslInputs, CliError> {
    let split = load_split(data)?;
    if split.test_unknown.is_empty() {
        log::warn!("no unknown test samples: running open-set rejection only");
    }
    let params = load_model(&model.model)?;
    Ok(ZslInputs::prepare(&params, &split, model.shrinkage)?)
}

fn tag_name(tag: Tag) -> String {
    match tag {
        Tag::Known(k) => format!("K{k}"),
        Tag::Unknown(u) => sigzsl::discriminator::unknown_label_name(u),
        Tag::Novel => "new".into(),
    }
}

fn cmd_discriminate(args: &DiscriminateArgs, run: &mut Run) -> Result<serde_json::Value, CliError> {
    let inputs = zsl_inputs(&args.data, &args.model)?;
    let config = discrimination_config(&args.model, &args.disc, args.lambda1);
    config.validate()?;
    let order = presentation_order(inputs.features.len(), args.disc.order_seed);
    let result = run_discrimination(&inputs, &config, &order)?;
    run.json("report.json", &result.report)?;
    run.write(
        "report.csv",
        format!("{REPORT_CSV_HEADER}\n{}\n", result.report.csv_row()).as_bytes(),
    )?;
    run.json("registry.json", &result.registry)?;
    let mut csv = String::from("position,sample,truth,tag,d1,d2,theta1,theta2\n");
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
    for (pos, (i, p)) in result.predictions.iter().enumerate() {
        csv += &format!(
            "{pos},{i},{},{},{},{},{},{}\n",
            inputs.class_names[inputs.truth[*i]],
            tag_name(p.tag),
            p.d1,
            opt(p.d2),
            p.theta1,
            opt(p.theta2)
        );
    }
    run.write("predictions.csv", csv.as_bytes())?;
    log::info!(
        "TKR {:?} TUR {:?} WTR {:?}, {} unknown labels",
        result.report.tkr,
        result.report.tur,
        result.report.wtr,
        result.report.discovered_labels
    );
    Ok(
        serde_json::json!({ "data": &args.data, "model": &args.model, "discrimination": config, "order_seed": args.disc.order_seed }),
    )
}

fn cmd_sweep(args: &SweepArgs, run: &mut Run) -> Result<serde_json::Value, CliError> {
    let grid = parse_grid(&args.grid)?;
    let inputs = zsl_inputs(&args.data, &args.model)?;
    let base = discrimination_config(&args.model, &args.disc, grid[0]);
    base.validate()?;
    let order = presentation_order(inputs.features.len(), args.disc.order_seed);
    let (reports, interval) = sweep(&inputs, &base, &grid, &order)?;
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for r in &reports {
        csv += &r.csv_row();
        csv.push('\n');
    }
    run.write("sweep.csv", csv.as_bytes())?;
    run.json("sweep.json", &reports)?;
    run.json("interval.json", &interval)?;
    log::info!(
        "discrimination interval width {} over {:?}",
        interval.width,
        interval.ranges
    );
    Ok(
        serde_json::json!({ "data": &args.data, "model": &args.model, "discrimination": base, "grid": grid, "order_seed": args.disc.order_seed }),
    )
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("SIGZSL_THREADS") {
        Err(_) => Ok(rayon::current_num_threads()),
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("SIGZSL_THREADS must be a positive integer, got {v:?}")))?;
            // a second call within one process (replay) keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(rayon::current_num_threads())
        }
    }
}

/// Parses and runs one command line (without the program name).
fn run(argv: &[String]) -> Result<(), CliError> {
    let cli = match Cli::try_parse_from(std::iter::once("sigzsl".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    let threads = threads()?;
    if let Command::Replay(r) = &cli.command {
        let m = RunManifest::read(&r.manifest)?;
        let mut args = m.args.clone();
        args.push("--out".into());
        args.push(r.out.display().to_string());
        return run(&args);
    }
    let out = match &cli.command {
        Command::Gen(a) => &a.out,
        Command::Train(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Discriminate(a) => &a.out,
        Command::Sweep(a) => &a.out,
        Command::Replay(_) => unreachable!(),
    };
    prepare_out(out)?;
    let started = unix_now();
    let mut run = Run {
        dir: out,
        outputs: Vec::new(),
    };
    let (config, input) = match &cli.command {
        Command::Gen(a) => (cmd_gen(a, &mut run)?, None),
        Command::Train(a) => (cmd_train(a, &mut run)?, Some(&a.data)),
        Command::Eval(a) => (cmd_eval(a, &mut run)?, Some(&a.data)),
        Command::Discriminate(a) => (cmd_discriminate(a, &mut run)?, Some(&a.data)),
        Command::Sweep(a) => (cmd_sweep(a, &mut run)?, Some(&a.data)),
        Command::Replay(_) => unreachable!(),
    };
    let mut inputs = Vec::new();
    if let Some(d) = input {
        inputs.push(RunManifest::input(&d.data)?);
    }
    let model = match &cli.command {
        Command::Eval(a) => Some(&a.model.model),
        Command::Discriminate(a) => Some(&a.model.model),
        Command::Sweep(a) => Some(&a.model.model),
        _ => None,
    };
    if let Some(m) = model {
        inputs.push(RunManifest::input(m)?);
    }
    let args = recorded_args(argv);
    RunManifest {
        command: args.first().cloned().unwrap_or_default(),
        args,
        config,
        inputs,
        outputs: run.outputs,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        threads,
        started_unix: started,
        finished_unix: unix_now(),
    }
    .write(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprint!(
                    "{}",
                    if m.ends_with('\n') {
                        m.clone()
                    } else {
                        format!("error: {m}\n")
                    }
                ),
                _ => eprintln!("error: {e}"),
            }
            let _ = std::io::stderr().flush();
            ExitCode::from(e.exit_code())
        }
    }
}
