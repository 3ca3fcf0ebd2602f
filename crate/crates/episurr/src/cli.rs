//! Command-line interface. Settings come from flags, then an optional JSON
//! config file, then defaults; flags win.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use episurr_core::bundle::BundleSpec;
use episurr_core::fit::{fit, forecast, FitConfig, FitResult, InitStrategy};
use episurr_core::gradcheck::{self, GradCheckReport, Scope};
use episurr_core::models::{ModelDef, ModelId, ParamVec};
use episurr_core::net::{NetConfig, OutputMode, SurrogateNet};
use episurr_core::obs::{ObservationSeries, Split};
use episurr_core::optim::OptimizerKind;
use episurr_core::oracle::{integrate_dense, sample_observations, DEFAULT_STEP};
use episurr_core::train::{ablate_output_mode, train, Ablation, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::csvio;
use crate::data::{self, CountryConfig, RawSeries, TimeMap};
use crate::manifest::RunManifest;

pub const OUT_DIR_ENV: &str = "EPISURR_OUT_DIR";

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for numerical failures (NaN, divergence, failed gradient check).
pub const EXIT_NUMERICAL: u8 = 3;

/// Marks an error as a numerical failure.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<NumericalFailure>().is_some()
            || e.downcast_ref::<episurr_core::Error>().is_some_and(episurr_core::Error::is_numerical)
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

#[derive(Debug, Parser)]
#[command(name = "episurr", version, about = "Neural ODE surrogates for SIR/SIRP epidemics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a surrogate on the ODE residual over a bundle.
    Train(TrainArgs),
    /// Integrate the ODE and sample synthetic observations.
    Synth(SynthArgs),
    /// Fit initial conditions and parameters to observations.
    Fit(FitArgs),
    /// Extend a fit past the surrogate's time range.
    Forecast(ForecastArgs),
    /// Compare analytic derivatives with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train softmax and identity output layers on paired seeds.
    Ablate(AblateArgs),
}

/// Settings shared by `train` and `ablate`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// `sir` or `sirp`; defaults to the bundle preset's model.
    #[arg(long)]
    pub model: Option<String>,
    /// Bundle preset (`standard`, `reduced`, `covid`) or path to a bundle JSON file.
    #[arg(long)]
    pub bundle: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// `softmax` or `identity`.
    #[arg(long)]
    pub output_mode: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Collocation points per iteration.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Time jitter half-width; half the grid spacing by default.
    #[arg(long)]
    pub perturbation: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `adam` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    #[arg(long)]
    pub validation_draws: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub settings: TrainSettings,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the loss every N iterations (0 disables).
    #[arg(long)]
    pub progress_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub i0: Option<f64>,
    #[arg(long)]
    pub r0: Option<f64>,
    #[arg(long)]
    pub p0: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Observation CSV (`t,split,<compartments>`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Raw cumulative counts CSV (`date,confirmed,recovered,deaths`).
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Country preset for `--raw`: switzerland, spain, italy.
    #[arg(long)]
    pub country: Option<String>,
    /// Country config JSON for `--raw`.
    #[arg(long)]
    pub country_config: Option<PathBuf>,
    #[arg(long)]
    pub series_start: Option<NaiveDate>,
    #[arg(long)]
    pub time_unit_days: Option<f64>,
    /// Observed compartments to fit, comma separated (e.g. `I` or `I,R`).
    #[arg(long, value_delimiter = ',')]
    pub mask: Option<Vec<String>>,
    /// `center`, `random` or `user`.
    #[arg(long)]
    pub init: Option<String>,
    /// Starting values for `--init user`, in fitter order.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub init_values: Option<Vec<f64>>,
    /// Quantities held fixed, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pin: Option<Vec<String>>,
    /// `NAME=VALUE` starting values, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub set: Option<Vec<String>>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds to fit.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Concurrent fits.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Forecast horizon in model time.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `fit_result.json` written by `fit`.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// `net`, `loss`, `inverse` or `all`.
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub configs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Perturb the analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    pub corrupt: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub settings: TrainSettings,
    /// Paired seeds, starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Overlays the flags on the config file. A run manifest is accepted as a
/// config file: its `resolved_config` is used.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let mut base = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            match v.get("resolved_config") {
                Some(r) => r.clone(),
                None => v,
            }
        }
        None => serde_json::Value::Object(Default::default()),
    };
    let obj = base.as_object_mut().ok_or_else(|| anyhow!("config file must hold a JSON object"))?;
    if let serde_json::Value::Object(f) = serde_json::to_value(flags)? {
        for (k, v) in f {
            if !v.is_null() {
                obj.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).context("invalid configuration")
}

fn out_dir(flag: &Option<PathBuf>, command: &str) -> PathBuf {
    match flag {
        Some(p) => p.clone(),
        None => match std::env::var_os(OUT_DIR_ENV) {
            Some(d) => PathBuf::from(d).join(command),
            None => PathBuf::from("episurr-out").join(command),
        },
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn parse_model(s: &str) -> Result<ModelId> {
    ModelId::parse(s).ok_or_else(|| anyhow!("unknown model `{s}` (expected sir or sirp)"))
}

fn parse_output_mode(s: &str) -> Result<OutputMode> {
    match s {
        "softmax" => Ok(OutputMode::Softmax),
        "identity" => Ok(OutputMode::Identity),
        _ => bail!("unknown output mode `{s}` (expected softmax or identity)"),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => bail!("unknown optimizer `{s}` (expected adam or sgd)"),
    }
}

/// Bundle preset name or JSON file; returns the preset's model when known.
fn load_bundle(spec: &str) -> Result<(Option<ModelId>, BundleSpec)> {
    if let Some((m, b)) = BundleSpec::preset(spec) {
        return Ok((Some(m), b));
    }
    let p = Path::new(spec);
    ensure!(p.exists(), "bundle `{spec}` is neither a preset (standard, reduced, covid) nor a file");
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    Ok((None, serde_json::from_str(&text).with_context(|| format!("parsing bundle {}", p.display()))?))
}

/// Fully resolved training setup.
struct TrainPlan {
    model: ModelDef,
    bundle: BundleSpec,
    net: NetConfig,
    config: TrainConfig,
}

fn resolve_train(s: &mut TrainSettings) -> Result<TrainPlan> {
    let bundle_name = s.bundle.get_or_insert_with(|| "standard".into()).clone();
    let (preset_model, bundle) = load_bundle(&bundle_name)?;
    let model = match (&s.model, preset_model) {
        (Some(m), _) => parse_model(m)?,
        (None, Some(m)) => m,
        (None, None) => bail!("--model is required with a bundle file"),
    };
    s.model = Some(model.name().into());
    let model = ModelDef::new(model);
    bundle.validate(&model)?;
    let defaults = TrainConfig::default();
    let net = NetConfig::for_model(&model)
        .with_hidden(*s.layers.get_or_insert(2), *s.width.get_or_insert(64))
        .with_output_mode(parse_output_mode(s.output_mode.get_or_insert_with(|| "softmax".into()))?);
    net.validate()?;
    let config = TrainConfig {
        n_collocation: *s.batch.get_or_insert(defaults.n_collocation),
        iterations: *s.iters.get_or_insert(defaults.iterations),
        learning_rate: *s.lr.get_or_insert(defaults.learning_rate),
        perturbation_scale: s.perturbation,
        seed: *s.seed.get_or_insert(defaults.seed),
        optimizer: parse_optimizer(s.optimizer.get_or_insert_with(|| "adam".into()))?,
        lr_decay: *s.lr_decay.get_or_insert(defaults.lr_decay),
        lr_decay_every: *s.lr_decay_every.get_or_insert(defaults.lr_decay_every),
        validation_draws: *s.validation_draws.get_or_insert(defaults.validation_draws),
    };
    config.validate(&bundle)?;
    Ok(TrainPlan { model, bundle, net, config })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn numerical(e: episurr_core::Error) -> anyhow::Error {
    if e.is_numerical() {
        anyhow::Error::new(NumericalFailure(e.to_string()))
    } else {
        anyhow::Error::new(e)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T, manifest: &mut RunManifest) -> Result<()> {
    fs::write(path, crate::json::to_string(value)?).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let mut a: TrainArgs = merge(&args, args.config.as_deref())?;
    let plan = resolve_train(&mut a.settings)?;
    let dir = out_dir(&a.out, "train");
    a.out = Some(dir.clone());
    let every = *a.progress_every.get_or_insert((plan.config.iterations / 20).max(1));
    prepare_out(&dir)?;

    let mut manifest = RunManifest::new("train", serde_json::to_value(&a)?, plan.config.seed);
    if let Some(b) = a.settings.bundle.as_deref().filter(|b| Path::new(b).exists()) {
        manifest.input(Path::new(b))?;
    }
    let t0 = Instant::now();
    let (net, mut report) = train(&plan.model, &plan.bundle, &plan.net, &plan.config, &mut |i, l| {
        if every > 0 && (i % every == 0 || i + 1 == plan.config.iterations) {
            eprintln!("iter {i:>6}  loss {l:.6e}  {:.1}s", t0.elapsed().as_secs_f64());
        }
    })
    .map_err(numerical)?;
    report.wall_time_secs = Some(t0.elapsed().as_secs_f64());

    let ckpt = Checkpoint::from_net(&net, &plan.bundle, plan.config.seed)?;
    let ckpt_path = dir.join("checkpoint.json");
    ckpt.save(&ckpt_path)?;
    manifest.output(&ckpt_path)?;
    let loss_path = dir.join("loss.csv");
    csvio::write_loss(&loss_path, &report.loss_trace)?;
    manifest.output(&loss_path)?;
    write_json(&dir.join("train_report.json"), &report, &mut manifest)?;
    manifest.wall_time_secs = start.elapsed().as_secs_f64();
    manifest.write(&dir)?;
    println!(
        "final loss {:.6e}, max abs error vs RK4 over {} draws {:.4e}",
        report.final_loss, report.validation_draws, report.validation_max_abs_error
    );
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let start = Instant::now();
    let mut a: SynthArgs = merge(&args, args.config.as_deref())?;
    let model = ModelDef::new(parse_model(a.model.get_or_insert_with(|| "sir".into()))?);
    let mut free = vec![*a.i0.get_or_insert(0.3), *a.r0.get_or_insert(0.2)];
    if model.id == ModelId::Sirp {
        free.push(*a.p0.get_or_insert(0.0));
    } else {
        ensure!(a.p0.is_none(), "--p0 applies only to the sirp model");
    }
    let theta = ParamVec::new(*a.beta.get_or_insert(0.6), *a.gamma.get_or_insert(0.4));
    ensure!(theta.beta >= 0.0 && theta.gamma >= 0.0, "beta and gamma must be non-negative");
    let t_end = *a.t_end.get_or_insert(20.0);
    ensure!(t_end > 0.0, "--t-end must be positive");
    let n = *a.n_points.get_or_insert(20);
    let noise = *a.noise.get_or_insert(0.0);
    let seed = *a.seed.get_or_insert(0);
    let frac = *a.train_fraction.get_or_insert(0.8);
    ensure!(frac > 0.0 && frac < 1.0, "--train-fraction must lie in (0, 1)");
    let z0 = model.full_state(&free);
    model.validate_state(&z0, 0.0)?;
    let dir = out_dir(&a.out, "synth");
    a.out = Some(dir.clone());
    prepare_out(&dir)?;

    let truth = integrate_dense(&model, &z0, theta, t_end, DEFAULT_STEP)?;
    let obs = sample_observations(&truth, n, noise, seed)?.with_chronological_split(frac);
    let mut manifest = RunManifest::new("synth", serde_json::to_value(&a)?, seed);
    let obs_path = dir.join("observations.csv");
    csvio::write_observations(&obs_path, &obs)?;
    manifest.output(&obs_path)?;
    let truth_path = dir.join("truth.csv");
    csvio::write_trajectory(&truth_path, &truth)?;
    manifest.output(&truth_path)?;
    manifest.wall_time_secs = start.elapsed().as_secs_f64();
    manifest.write(&dir)?;
    println!(
        "{} points ({} train, {} validation), max conservation error {:.2e}",
        obs.len(),
        obs.indices(Split::Train).len(),
        obs.indices(Split::Validation).len(),
        truth.max_conservation_error()
    );
    Ok(())
}

/// Fit output file: headline numbers plus the full result for `forecast`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutput {
    pub model: ModelId,
    /// Every compartment's initial value (including derived `S0`) and the parameters.
    pub fitted: BTreeMap<String, f64>,
    pub r0: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seed: u64,
    pub init: InitStrategy,
    pub trace_file: String,
    #[serde(default)]
    pub country: Option<String>,
    #[serde(default)]
    pub time_map: Option<TimeMap>,
    /// `beta` and `gamma` per day when a calendar mapping is known.
    #[serde(default)]
    pub per_day: Option<BTreeMap<String, f64>>,
    pub result: FitResult,
}

impl FitOutput {
    fn new(r: &FitResult, country: Option<String>, time_map: Option<TimeMap>) -> Self {
        let model = ModelDef::new(r.model);
        let mut fitted: BTreeMap<String, f64> = model
            .compartments()
            .iter()
            .zip(&r.z0)
            .map(|(c, v)| (format!("{c}0"), *v))
            .collect();
        fitted.insert("beta".into(), r.theta.beta);
        fitted.insert("gamma".into(), r.theta.gamma);
        let per_day = time_map.map(|m| {
            BTreeMap::from([("beta".to_string(), m.per_day(r.theta.beta)), ("gamma".to_string(), m.per_day(r.theta.gamma))])
        });
        FitOutput {
            model: r.model,
            fitted,
            r0: r.r0,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            seed: r.seed,
            init: r.init.clone(),
            trace_file: "loss.csv".into(),
            country,
            time_map,
            per_day,
            result: r.clone(),
        }
    }
}

struct FitData {
    obs: ObservationSeries,
    country: Option<String>,
    time_map: Option<TimeMap>,
    /// Starting values taken from the data (pinned by default for country data).
    data_init: Vec<(String, f64)>,
}

fn load_fit_data(a: &FitArgs, t_max: f64, manifest: &mut RunManifest) -> Result<FitData> {
    match (&a.data, &a.raw) {
        (Some(path), None) => {
            manifest.input(path)?;
            Ok(FitData { obs: csvio::read_observations(path)?, country: None, time_map: None, data_init: Vec::new() })
        }
        (None, Some(path)) => {
            manifest.input(path)?;
            let mut cfg = match (&a.country, &a.country_config) {
                (Some(name), None) => CountryConfig::by_name(name).ok_or_else(|| anyhow!("unknown country preset `{name}`"))?,
                (None, Some(p)) => {
                    manifest.input(p)?;
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing country config {}", p.display()))?
                }
                _ => bail!("--raw needs exactly one of --country or --country-config"),
            };
            if a.series_start.is_some() {
                cfg.series_start = a.series_start;
            }
            if a.time_unit_days.is_some() {
                cfg.time_unit_days = a.time_unit_days;
            }
            let raw = RawSeries::read_csv(path)?;
            let prepared = data::prepare(&raw, &cfg, t_max)?;
            for w in &prepared.warnings {
                eprintln!("warning: {w}");
            }
            let first = |name: &str| prepared.obs.get(name).map(|s| s.values[0]).unwrap_or(0.0);
            let data_init = vec![("I0".to_string(), first("I")), ("R0".to_string(), first("R"))];
            Ok(FitData { obs: prepared.obs, country: Some(cfg.name), time_map: Some(prepared.time_map), data_init })
        }
        _ => bail!("give exactly one of --data or --raw"),
    }
}

fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let f = &f;
                s.spawn(move || {
                    (j..items.len()).step_by(jobs).map(|i| (i, f(&items[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn out_of_range_hint(e: episurr_core::Error) -> anyhow::Error {
    match e {
        episurr_core::Error::OutOfRange { .. } => anyhow::Error::new(e).context(
            "observations fall outside the surrogate's trained time range; remap with --time-unit-days / --series-start or retrain with a longer range",
        ),
        other => numerical(other),
    }
}

/// Writes all artifacts of one fit into `dir`.
fn write_fit(dir: &Path, net: &SurrogateNet, data: &FitData, r: &FitResult, horizon: f64, manifest: &mut RunManifest) -> Result<()> {
    prepare_out(dir)?;
    let out = FitOutput::new(r, data.country.clone(), data.time_map);
    write_json(&dir.join("fit_result.json"), &out, manifest)?;
    let loss = dir.join("loss.csv");
    csvio::write_loss(&loss, &r.loss_trace)?;
    manifest.output(&loss)?;
    let fitted = dir.join("fitted.csv");
    csvio::write_trajectory(&fitted, &r.trajectory)?;
    manifest.output(&fitted)?;
    let fc = forecast(r, net, horizon, episurr_core::fit::FORECAST_STEP)?;
    let fc_path = dir.join("forecast.csv");
    csvio::write_trajectory(&fc_path, &fc)?;
    manifest.output(&fc_path)?;
    let plot = dir.join("plot_data.csv");
    csvio::write_plot_data(&plot, &data.obs, r, &fc)?;
    manifest.output(&plot)?;
    Ok(())
}

pub fn cmd_fit(args: FitArgs) -> Result<()> {
    let start = Instant::now();
    let mut a: FitArgs = merge(&args, args.config.as_deref())?;
    let ckpt_path = a.checkpoint.clone().ok_or_else(|| anyhow!("--checkpoint is required"))?;
    let (net, ckpt) = Checkpoint::load_net(&ckpt_path, None)?;
    let model = net.model_def();
    let bundle = ckpt.bundle_spec.clone();
    let seed = *a.seed.get_or_insert(0);
    let mut manifest = RunManifest::new("fit", serde_json::Value::Null, seed);
    manifest.input(&ckpt_path)?;
    let mut data = load_fit_data(&a, bundle.t_max(), &mut manifest)?;
    if let Some(mask) = &a.mask {
        let names: Vec<&str> = mask.iter().map(String::as_str).collect();
        data.obs = data.obs.restrict(&names)?;
    }

    let seeds = *a.seeds.get_or_insert(1);
    ensure!(seeds >= 1, "--seeds must be at least 1");
    let jobs = *a.jobs.get_or_insert(1);
    let init = match a.init.get_or_insert_with(|| if seeds > 1 { "random".into() } else { "center".into() }).as_str() {
        "center" => InitStrategy::BundleCenter,
        "random" => InitStrategy::RandomInBundle,
        "user" => InitStrategy::UserSupplied(a.init_values.clone().ok_or_else(|| anyhow!("--init user needs --init-values"))?),
        other => bail!("unknown init `{other}` (expected center, random or user)"),
    };
    let mut overrides = data.data_init.clone();
    for kv in a.set.iter().flatten() {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects NAME=VALUE, got `{kv}`"))?;
        let v: f64 = v.parse().with_context(|| format!("--set {k}: `{v}` is not a number"))?;
        overrides.retain(|(name, _)| !name.eq_ignore_ascii_case(k));
        overrides.push((k.to_string(), v));
    }
    let pinned = a
        .pin
        .get_or_insert_with(|| data.data_init.iter().map(|(k, _)| k.clone()).collect())
        .clone();
    let base = FitConfig {
        iterations: *a.iters.get_or_insert(FitConfig::default().iterations),
        learning_rate: *a.lr.get_or_insert(FitConfig::default().learning_rate),
        seed,
        init,
        pinned,
        overrides,
        ..FitConfig::default()
    };
    let last_t = data.obs.times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let horizon = *a.horizon.get_or_insert(last_t.max(bundle.t_max()));
    let dir = out_dir(&a.out, "fit");
    a.out = Some(dir.clone());
    manifest.resolved_config = serde_json::to_value(&a)?;
    prepare_out(&dir)?;

    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| seed + k).collect();
    let results = par_map(&seed_list, jobs, |&s| fit(&net, &model, &bundle, &data.obs, &FitConfig { seed: s, ..base.clone() }));
    let results = results.into_iter().collect::<Result<Vec<_>, _>>().map_err(out_of_range_hint)?;

    if results.len() == 1 {
        write_fit(&dir, &net, &data, &results[0], horizon, &mut manifest)?;
    } else {
        for r in &results {
            write_fit(&dir.join(format!("seed_{}", r.seed)), &net, &data, r, horizon, &mut manifest)?;
        }
        let summary = FitSummary::new(&results);
        write_json(&dir.join("summary.json"), &summary, &mut manifest)?;
    }
    for r in &results {
        let named: Vec<String> = r.quantities.iter().zip(&r.fitted).map(|(q, v)| format!("{q}={v:.5}")).collect();
        println!(
            "seed {}: {}  beta/gamma={:.4}  train {:.3e}  val {}",
            r.seed,
            named.join(" "),
            r.r0,
            r.train_loss,
            r.val_loss.map_or("-".into(), |v| format!("{v:.3e}"))
        );
    }
    if results.len() > 1 {
        println!("median beta/gamma {:.4}", median(results.iter().map(|r| r.r0).collect()));
    }
    manifest.wall_time_secs = start.elapsed().as_secs_f64();
    manifest.write(&dir)?;
    Ok(())
}

/// Medians across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub seeds: Vec<u64>,
    pub median: BTreeMap<String, f64>,
    pub median_r0: f64,
    pub median_train_loss: f64,
    pub median_val_loss: Option<f64>,
}

impl FitSummary {
    pub fn new(results: &[FitResult]) -> Self {
        let mut med = BTreeMap::new();
        for (i, q) in results[0].quantities.iter().enumerate() {
            med.insert(q.clone(), median(results.iter().map(|r| r.fitted[i]).collect()));
        }
        let vals: Option<Vec<f64>> = results.iter().map(|r| r.val_loss).collect();
        FitSummary {
            seeds: results.iter().map(|r| r.seed).collect(),
            median: med,
            median_r0: median(results.iter().map(|r| r.r0).collect()),
            median_train_loss: median(results.iter().map(|r| r.train_loss).collect()),
            median_val_loss: vals.map(median),
        }
    }
}

pub fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let start = Instant::now();
    let mut a: ForecastArgs = merge(&args, args.config.as_deref())?;
    let ckpt_path = a.checkpoint.clone().ok_or_else(|| anyhow!("--checkpoint is required"))?;
    let fit_path = a.fit.clone().ok_or_else(|| anyhow!("--fit is required"))?;
    let (net, _) = Checkpoint::load_net(&ckpt_path, None)?;
    let text = fs::read_to_string(&fit_path).with_context(|| format!("reading {}", fit_path.display()))?;
    let fit_out: FitOutput = serde_json::from_str(&text).with_context(|| format!("parsing {}", fit_path.display()))?;
    ensure!(fit_out.model == net.model, "fit is for {}, checkpoint is {}", fit_out.model, net.model);
    let horizon = a.horizon.ok_or_else(|| anyhow!("--horizon is required"))?;
    let step = *a.step.get_or_insert(episurr_core::fit::FORECAST_STEP);
    let dir = out_dir(&a.out, "forecast");
    a.out = Some(dir.clone());
    prepare_out(&dir)?;
    let mut manifest = RunManifest::new("forecast", serde_json::to_value(&a)?, fit_out.seed);
    manifest.input(&ckpt_path)?;
    manifest.input(&fit_path)?;
    let traj = forecast(&fit_out.result, &net, horizon, step)?;
    let path = dir.join("forecast.csv");
    csvio::write_trajectory(&path, &traj)?;
    manifest.output(&path)?;
    manifest.wall_time_secs = start.elapsed().as_secs_f64();
    manifest.write(&dir)?;
    println!("wrote {} ({} points to t = {})", path.display(), traj.len(), traj.t_end());
    Ok(())
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut a: GradcheckArgs = merge(&args, args.config.as_deref())?;
    let scopes = match a.scope.get_or_insert_with(|| "all".into()).as_str() {
        "all" => vec![Scope::Net, Scope::Loss, Scope::Inverse],
        s => vec![Scope::parse(s).ok_or_else(|| anyhow!("unknown scope `{s}` (expected net, loss, inverse or all)"))?],
    };
    let configs = *a.configs.get_or_insert(100);
    let seed = *a.seed.get_or_insert(0);
    let corrupt = *a.corrupt.get_or_insert(false);
    let reports: Vec<GradCheckReport> = scopes
        .iter()
        .map(|&s| gradcheck::run(s, configs, seed, corrupt))
        .collect::<Result<_, _>>()?;
    for r in &reports {
        println!(
            "{:<8} max relative error {:.3e} over {} configs (tolerance {:.0e}) {}",
            r.scope.name(),
            r.max_rel_error,
            r.configs,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(r) = reports.iter().find(|r| !r.passed) {
        return Err(NumericalFailure(format!(
            "{} gradient check failed: {:.3e} >= {:.0e} (config {})",
            r.scope.name(),
            r.max_rel_error,
            r.tolerance,
            r.worst_config
        ))
        .into());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRecord {
    pub seed: u64,
    pub softmax_final_loss: f64,
    pub identity_final_loss: f64,
    pub softmax_lower: bool,
    pub softmax_range_violations: usize,
    pub identity_range_violations: usize,
}

pub fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let start = Instant::now();
    let mut a: AblateArgs = merge(&args, args.config.as_deref())?;
    let plan = resolve_train(&mut a.settings)?;
    let seeds = *a.seeds.get_or_insert(5);
    let jobs = *a.jobs.get_or_insert(1);
    let dir = out_dir(&a.out, "ablate");
    a.out = Some(dir.clone());
    prepare_out(&dir)?;
    let mut manifest = RunManifest::new("ablate", serde_json::to_value(&a)?, plan.config.seed);
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| plan.config.seed + k).collect();
    let runs = par_map(&seed_list, jobs, |&s| {
        ablate_output_mode(&plan.model, &plan.bundle, &plan.net, &TrainConfig { seed: s, ..plan.config.clone() })
    });
    let runs: Vec<Ablation> = runs.into_iter().collect::<Result<_, _>>().map_err(numerical)?;
    let mut records = Vec::new();
    for (s, r) in seed_list.iter().zip(&runs) {
        for (mode, run) in [("softmax", &r.softmax), ("identity", &r.identity)] {
            let p = dir.join(format!("loss_{mode}_seed{s}.csv"));
            csvio::write_loss(&p, &run.report.loss_trace)?;
            manifest.output(&p)?;
        }
        let rec = AblationRecord {
            seed: *s,
            softmax_final_loss: r.softmax.report.final_loss,
            identity_final_loss: r.identity.report.final_loss,
            softmax_lower: r.softmax_lower(),
            softmax_range_violations: r.softmax.range_violations,
            identity_range_violations: r.identity.range_violations,
        };
        println!(
            "seed {s}: softmax {:.4e}  identity {:.4e}  softmax lower: {}  identity range violations: {}",
            rec.softmax_final_loss, rec.identity_final_loss, rec.softmax_lower, rec.identity_range_violations
        );
        records.push(rec);
    }
    let wins = records.iter().filter(|r| r.softmax_lower).count();
    println!("softmax lower in {wins} of {} seeds", records.len());
    write_json(&dir.join("ablation.json"), &records, &mut manifest)?;
    manifest.wall_time_secs = start.elapsed().as_secs_f64();
    manifest.write(&dir)?;
    Ok(())
}
