//! `redf` subcommands.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use redf_core::config::KEYS;
use redf_core::data::{generate_synthetic, Dataset, SynthSpec};
use redf_core::pipeline::{columns, forecast_only, rem_ad_score, score, split_validation, Trainer};
use redf_core::{Config, RedF};

use crate::checkpoint;
use crate::csv::{self, write};
use crate::error::{Result, RunError};
use crate::meta::RunMeta;
use crate::report::{evaluate, LabelledScores, ThresholdSplit};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SCORES: &str = "scores.csv";
pub const VAL_SCORES: &str = "val_scores.csv";
pub const METRICS: &str = "metrics.json";
pub const AD_SCORES: &str = "ad_scores.csv";
pub const AD_VAL_SCORES: &str = "ad_val_scores.csv";
pub const AD_METRICS: &str = "ad_metrics.json";
pub const FORECASTS: &str = "forecasts.csv";
pub const FORECAST_METRICS: &str = "forecast_metrics.json";

fn out_arg() -> Arg {
    Arg::new("out").long("out").value_name("DIR").default_value(".").help("Output directory")
}

fn data_arg() -> Arg {
    Arg::new("data").long("data").value_name("DIR").required(true).help("Dataset directory with train.csv, test.csv, test_label.csv")
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint").long("checkpoint").value_name("FILE").help("Checkpoint file [default: <out>/checkpoint.bin]")
}

fn ratio_args() -> [Arg; 2] {
    [
        Arg::new("anomaly_ratio").long("anomaly_ratio").value_name("PCT").help("Percent of pooled scores flagged [default: from checkpoint or 1.0]"),
        Arg::new("threshold-split")
            .long("threshold-split")
            .value_name("SPLIT")
            .value_parser(["pooled", "val-only"])
            .default_value("pooled")
            .help("Scores used to set the threshold"),
    ]
}

fn key_args() -> Vec<Arg> {
    KEYS.iter().map(|k| Arg::new(*k).long(*k).value_name("VALUE").help_heading("Configuration")).collect()
}

fn flag(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).action(ArgAction::SetTrue).help(help).help_heading("Ablations")
}

pub fn command() -> Command {
    Command::new("redf")
        .about("Anomaly prediction by contrasting forecasts of observed and purified windows")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth")
                .about("Write a synthetic dataset with anomaly precursors")
                .arg(Arg::new("out").long("out").value_name("DIR").required(true).help("Dataset directory to create"))
                .arg(Arg::new("seed").long("seed").value_name("N").default_value("0"))
                .arg(Arg::new("channels").long("channels").value_name("C").default_value("4"))
                .arg(Arg::new("train-len").long("train-len").value_name("T").default_value("10000"))
                .arg(Arg::new("test-len").long("test-len").value_name("T").default_value("10000"))
                .arg(Arg::new("events").long("events").value_name("N").default_value("20"))
                .arg(Arg::new("lead").long("lead").value_name("P").default_value("32"))
                .arg(Arg::new("alpha").long("alpha").value_name("A").default_value("0.3"))
                .arg(Arg::new("noise").long("noise").value_name("SIGMA").default_value("0.1")),
        )
        .subcommand(
            Command::new("train")
                .about("Jointly train reconstruction and forecasting models")
                .arg(data_arg())
                .arg(out_arg())
                .arg(Arg::new("config").long("config").value_name("FILE").help("Flat `key = value` configuration file"))
                .args(key_args())
                .arg(flag("no-msp", "Train without auxiliary multi-series heads"))
                .arg(flag("no-contrastive-loss", "Drop the dual-stream contrastive term"))
                .arg(flag("no-graph", "Unmasked inter-channel attention"))
                .arg(flag("detach-purified", "Stop gradients from the forecaster into the reconstruction"))
                .arg(Arg::new("mask-mode").long("mask-mode").value_name("MODE").value_parser(["binary", "soft"]).help_heading("Ablations")),
        )
        .subcommand(
            Command::new("score")
                .about("Score the test split and the validation tail")
                .arg(data_arg())
                .arg(out_arg())
                .arg(checkpoint_arg())
                .arg(Arg::new("score_stride").long("score_stride").value_name("STEPS").help("Window stride [default: from checkpoint]")),
        )
        .subcommand(
            Command::new("eval")
                .about("Threshold scores and compute affiliation metrics")
                .arg(out_arg())
                .arg(Arg::new("scores").long("scores").value_name("DIR").help("Directory holding scores.csv [default: <out>]"))
                .args(ratio_args()),
        )
        .subcommand(
            Command::new("forecast")
                .about("Main-stream forecasts with MSE and MAE on the test split")
                .arg(data_arg())
                .arg(out_arg())
                .arg(checkpoint_arg()),
        )
        .subcommand(
            Command::new("ad-score")
                .about("Reconstruction-only anomaly detection")
                .arg(data_arg())
                .arg(out_arg())
                .arg(checkpoint_arg())
                .args(ratio_args()),
        )
}

/// Parse `argv`, run one command and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("redf: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("synth", s)) => synth(s),
        Some(("train", s)) => train(s),
        Some(("score", s)) => score_cmd(s),
        Some(("eval", s)) => eval(s),
        Some(("forecast", s)) => forecast(s),
        Some(("ad-score", s)) => ad_score(s),
        _ => Err(RunError::Usage("unknown subcommand".into())),
    }
}

fn path(m: &ArgMatches, key: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(key).expect("argument has a default or is required"))
}

fn parsed<T: std::str::FromStr>(m: &ArgMatches, key: &str) -> Result<T> {
    let raw = m.get_one::<String>(key).expect("argument has a default");
    raw.parse().map_err(|_| RunError::Usage(format!("--{key}: cannot parse `{raw}`")))
}

fn checkpoint_path(m: &ArgMatches) -> PathBuf {
    m.get_one::<String>("checkpoint").map_or_else(|| path(m, "out").join(CHECKPOINT), PathBuf::from)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Merge this command's metadata into `<dir>/run_meta.json`, keyed by command.
fn record(dir: &Path, meta: RunMeta) -> Result<()> {
    let file = dir.join("run_meta.json");
    let mut all = match fs::read_to_string(&file) {
        Ok(text) => match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(serde_json::Value::Object(map)) => map,
            _ => serde_json::Map::new(),
        },
        Err(_) => serde_json::Map::new(),
    };
    all.insert(meta.command.clone(), serde_json::to_value(&meta)?);
    write(&file, &to_json(&serde_json::Value::Object(all))?)
}

#[derive(Serialize)]
struct EventEcho {
    kind: &'static str,
    start: usize,
    duration: usize,
    magnitude: f64,
    channels: Vec<usize>,
    precursor: &'static str,
}

#[derive(Serialize)]
struct SpecEcho {
    channels: usize,
    train_len: usize,
    test_len: usize,
    periods: Vec<f64>,
    noise_sigma: f64,
    lead: usize,
    alpha: f64,
    seed: u64,
    events: Vec<EventEcho>,
}

fn synth(m: &ArgMatches) -> Result<()> {
    let out = path(m, "out");
    let mut spec = SynthSpec::with_events(
        parsed(m, "channels")?,
        parsed(m, "train-len")?,
        parsed(m, "test-len")?,
        parsed(m, "events")?,
        parsed(m, "lead")?,
        parsed(m, "alpha")?,
        parsed(m, "seed")?,
    );
    spec.noise_sigma = parsed(m, "noise")?;
    spec.validate().map_err(|e| RunError::Usage(e.to_string()))?;
    let ds = generate_synthetic(&spec)?;
    csv::write_dataset(&out, &ds)?;
    let echo = SpecEcho {
        channels: spec.channels,
        train_len: spec.train_len,
        test_len: spec.test_len,
        periods: spec.periods.clone(),
        noise_sigma: spec.noise_sigma,
        lead: spec.lead,
        alpha: spec.alpha,
        seed: spec.seed,
        events: spec
            .events
            .iter()
            .map(|e| EventEcho {
                kind: e.kind.as_str(),
                start: e.start,
                duration: e.duration,
                magnitude: e.magnitude,
                channels: e.channels.clone(),
                precursor: e.precursor.as_str(),
            })
            .collect(),
    };
    write(&out.join("spec.json"), &to_json(&echo)?)?;
    let cfg = Config { num_channels: spec.channels, seed: spec.seed, ..Config::default() };
    let meta = RunMeta::new("synth", &cfg, &[&out.join("spec.json")])?;
    record(&out, meta)?;
    eprintln!("wrote {} ({} channels, {} + {} steps, {} events)", out.display(), spec.channels, spec.train_len, spec.test_len, spec.events.len());
    Ok(())
}

fn dataset_inputs(dir: &Path) -> [PathBuf; 3] {
    [dir.join(csv::TRAIN), dir.join(csv::TEST), dir.join(csv::LABELS)]
}

/// Defaults, then the config file, then `--key value` flags, then ablation switches.
pub fn training_config(m: &ArgMatches, channels: usize) -> Result<Config> {
    let mut cfg = Config::default();
    let mut explicit = m.get_one::<String>("num_channels").is_some();
    if let Some(file) = m.get_one::<String>("config") {
        let text = fs::read_to_string(file).map_err(|e| RunError::io(Path::new(file), e))?;
        cfg.apply_kv_text(&text)?;
        explicit |= text.lines().any(|l| l.split('=').next().is_some_and(|k| k.trim() == "num_channels"));
    }
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if m.get_flag("no-msp") {
        cfg.msp_count = 0;
    }
    if m.get_flag("no-contrastive-loss") {
        cfg.lambda_contra = 0.0;
    }
    if m.get_flag("no-graph") {
        cfg.use_graph = false;
    }
    if m.get_flag("detach-purified") {
        cfg.detach_purified = true;
    }
    if let Some(mode) = m.get_one::<String>("mask-mode") {
        cfg.mask_mode = mode.parse()?;
    }
    if explicit && cfg.num_channels != channels {
        return Err(RunError::Data(format!("configuration has {} channels, dataset has {channels}", cfg.num_channels)));
    }
    cfg.num_channels = channels;
    cfg.validate()?;
    Ok(cfg)
}

fn train(m: &ArgMatches) -> Result<()> {
    let data = path(m, "data");
    let out = path(m, "out");
    let ds = csv::load_dataset(&data)?;
    let cfg = training_config(m, ds.channels())?;
    let (model, log) = fit(&cfg, &ds, |l| {
        eprintln!(
            "epoch {:>3}  rem {:.6}  pred {:.6}  contra {:.6}  total {:.6}",
            l.epoch, l.losses.rem, l.losses.pred, l.losses.contra, l.losses.total
        )
    })?;
    checkpoint::save(&out.join(CHECKPOINT), &model)?;
    write(&out.join(TRAIN_LOG), &train_log_csv(&log))?;
    let inputs = dataset_inputs(&data);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let mut meta = RunMeta::new("train", &cfg, &refs)?;
    meta = meta.with("checkpoint_blob", crate::meta::blob_hash(&checkpoint::encode(&model)));
    record(&out, meta)
}

/// Train on the first `1 - val_fraction` of the train split.
pub fn fit<F: FnMut(&redf_core::pipeline::EpochLog)>(cfg: &Config, ds: &Dataset, on_epoch: F) -> Result<(RedF, Vec<redf_core::pipeline::EpochLog>)> {
    let (fit_len, _) = split_validation(ds.train_len, cfg.val_fraction);
    let series = columns(&ds.train, ds.channels(), ds.train_len, 0, fit_len);
    Ok(Trainer::new(cfg.clone(), series, fit_len)?.fit(on_epoch)?)
}

pub fn train_log_csv(log: &[redf_core::pipeline::EpochLog]) -> String {
    let mut out = String::from("epoch,L_rem,L_pred,L_contra,total\n");
    for l in log {
        let _ = writeln!(out, "{},{},{},{},{}", l.epoch, l.losses.rem, l.losses.pred, l.losses.contra, l.losses.total);
    }
    out
}

fn load_model(m: &ArgMatches, ds: &Dataset) -> Result<(RedF, PathBuf)> {
    let ckpt = checkpoint_path(m);
    let model = checkpoint::load(&ckpt)?;
    if model.config.num_channels != ds.channels() {
        return Err(RunError::Data(format!("checkpoint expects {} channels, dataset has {}", model.config.num_channels, ds.channels())));
    }
    Ok((model, ckpt))
}

/// Validation tail of the train split, with timesteps relative to the train split.
fn validation(model: &RedF, ds: &Dataset) -> (Vec<f64>, usize, usize) {
    let (fit_len, val_len) = split_validation(ds.train_len, model.config.val_fraction);
    (columns(&ds.train, ds.channels(), ds.train_len, fit_len, ds.train_len), val_len, fit_len)
}

fn score_cmd(m: &ArgMatches) -> Result<()> {
    let data = path(m, "data");
    let out = path(m, "out");
    let ds = csv::load_dataset(&data)?;
    let (mut model, ckpt) = load_model(m, &ds)?;
    if m.get_one::<String>("score_stride").is_some() {
        model.config.score_stride = parsed(m, "score_stride")?;
        model.config.validate()?;
    }
    let (val, val_len, offset) = validation(&model, &ds);
    let span = model.config.lookback + model.config.horizon;
    let val_scores = if val_len >= span { score(&model, &val, val_len, offset)? } else { Default::default() };
    let test_scores = score(&model, &ds.test, ds.test_len, 0)?;
    let labelled = LabelledScores::new(&test_scores, &ds.test_labels)?;
    write(&out.join(SCORES), &labelled.to_csv())?;
    write(&out.join(VAL_SCORES), &val_scores_csv(&val_scores))?;
    let mut inputs: Vec<PathBuf> = dataset_inputs(&data).into();
    inputs.push(ckpt);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    record(&out, RunMeta::new("score", &model.config, &refs)?)?;
    eprintln!("scored {} test and {} validation steps", test_scores.len(), val_scores.len());
    Ok(())
}

fn val_scores_csv(s: &redf_core::pipeline::AnomalyScoreSeries) -> String {
    let mut out = String::from("timestep,score\n");
    for (t, v) in s.timesteps.iter().zip(&s.scores) {
        let _ = writeln!(out, "{t},{v}");
    }
    out
}

fn read_val_scores(file: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(file).map_err(|e| RunError::io(file, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| RunError::Data(format!("{}: malformed row `{l}`", file.display())))
        })
        .collect()
}

fn ratio(m: &ArgMatches, fallback: f64) -> Result<(f64, ThresholdSplit)> {
    let r = if m.get_one::<String>("anomaly_ratio").is_some() { parsed(m, "anomaly_ratio")? } else { fallback };
    if !(r > 0.0 && r < 100.0) {
        return Err(RunError::Usage(format!("anomaly_ratio must lie in (0, 100), got {r}")));
    }
    Ok((r, m.get_one::<String>("threshold-split").expect("has default").parse()?))
}

/// Ratio recorded at training time, if a checkpoint sits next to the scores.
fn checkpoint_ratio(dir: &Path) -> f64 {
    checkpoint::load(&dir.join(CHECKPOINT)).map_or(Config::default().anomaly_ratio, |m| m.config.anomaly_ratio)
}

fn eval(m: &ArgMatches) -> Result<()> {
    let out = path(m, "out");
    let dir = m.get_one::<String>("scores").map_or_else(|| out.clone(), PathBuf::from);
    let (scores_file, val_file) = (dir.join(SCORES), dir.join(VAL_SCORES));
    let text = fs::read_to_string(&scores_file).map_err(|e| RunError::Data(format!("{}: {e} (run `redf score` first)", scores_file.display())))?;
    let test = LabelledScores::from_csv(&text, &scores_file.display().to_string())?;
    let val = read_val_scores(&val_file)?;
    let (r, split) = ratio(m, checkpoint_ratio(&dir))?;
    let report = evaluate(&val, &test, r, split)?;
    write(&out.join(METRICS), &to_json(&report)?)?;
    let cfg = Config { anomaly_ratio: r, ..Config::default() };
    record(&out, RunMeta::new("eval", &cfg, &[&scores_file, &val_file])?.with("threshold_split", split.as_str()))?;
    eprintln!("aff-F1 {:.4} (precision {:.4}, recall {:.4}) at threshold {:.6}", report.aff_f1, report.aff_precision, report.aff_recall, report.threshold);
    Ok(())
}

#[derive(Serialize)]
struct ForecastSummary {
    mse: f64,
    mae: f64,
    windows: usize,
    horizon: usize,
}

fn forecast(m: &ArgMatches) -> Result<()> {
    let data = path(m, "data");
    let out = path(m, "out");
    let ds = csv::load_dataset(&data)?;
    let (model, ckpt) = load_model(m, &ds)?;
    let f = forecast_only(&model, &ds.test, ds.test_len, 0)?;
    let mut text = String::from("origin,channel,step,value\n");
    for (origin, block) in f.origins.iter().zip(&f.values) {
        for c in 0..f.channels {
            for h in 0..f.horizon {
                let _ = writeln!(text, "{origin},{},{h},{}", ds.channel_names[c], block[c * f.horizon + h]);
            }
        }
    }
    write(&out.join(FORECASTS), &text)?;
    let summary = ForecastSummary { mse: f.mse, mae: f.mae, windows: f.origins.len(), horizon: f.horizon };
    write(&out.join(FORECAST_METRICS), &to_json(&summary)?)?;
    let mut inputs: Vec<PathBuf> = dataset_inputs(&data).into();
    inputs.push(ckpt);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    record(&out, RunMeta::new("forecast", &model.config, &refs)?)?;
    eprintln!("forecast MSE {:.6} MAE {:.6} over {} windows", f.mse, f.mae, f.origins.len());
    Ok(())
}

fn ad_score(m: &ArgMatches) -> Result<()> {
    let data = path(m, "data");
    let out = path(m, "out");
    let ds = csv::load_dataset(&data)?;
    let (model, ckpt) = load_model(m, &ds)?;
    let (val, val_len, offset) = validation(&model, &ds);
    let val_scores = if val_len >= model.config.lookback { rem_ad_score(&model, &val, val_len, offset)? } else { Default::default() };
    let test_scores = rem_ad_score(&model, &ds.test, ds.test_len, 0)?;
    let labelled = LabelledScores::new(&test_scores, &ds.test_labels)?;
    write(&out.join(AD_SCORES), &labelled.to_csv())?;
    write(&out.join(AD_VAL_SCORES), &val_scores_csv(&val_scores))?;
    let (r, split) = ratio(m, model.config.anomaly_ratio)?;
    let report = evaluate(&val_scores.scores, &labelled, r, split)?;
    write(&out.join(AD_METRICS), &to_json(&report)?)?;
    let mut inputs: Vec<PathBuf> = dataset_inputs(&data).into();
    inputs.push(ckpt);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    record(&out, RunMeta::new("ad-score", &model.config, &refs)?.with("window", model.config.lookback))?;
    eprintln!("reconstruction-only aff-F1 {:.4} with window {}", report.aff_f1, model.config.lookback);
    Ok(())
}
