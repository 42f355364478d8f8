//! Command-line pipeline: ingest -> covariates -> fit -> trim-refit ->
//! diagnose -> forecast -> evaluate, plus synthetic-data generation and a
//! single-population mode.

use clap::{Parser, Subcommand};
use mortcast::baselines::{lee_carter_fit, lee_carter_forecast, li_lee_fit, li_lee_forecast};
use mortcast::covariates::{attach_covariates, compute_covariates, kct_csv, kt_csv, ModelFrame};
use mortcast::data::{build_panel, parse_hmd_mx, synth_panel, to_hmd_mx_text, SynthSpec};
use mortcast::diagnostics::{
    acf_csv, decile_sd_csv, qq_csv, qq_points, residual_acf, residuals_vs_fitted,
    residuals_vs_fitted_csv,
};
use mortcast::eval::{compare, mse, split, EvalReport, MseRow, Scale};
use mortcast::forecast::{covariate_series_csv, forecast_asdr, forecast_covariates, forecast_csv};
use mortcast::reml::{fit_panel, trim_refit, FittedModel, RemlOptions};
use mortcast::{Gender, ModelSpec, MortalityPanel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    version: u32,
    /// Directory holding per-country Mx files named `<CODE>.Mx_1x1.txt`.
    data_dir: PathBuf,
    countries: Vec<String>,
    year_min: i32,
    year_max: i32,
    /// Last training year; later years are held out.
    cutoff: i32,
    split_age: u32,
    omega: u32,
    k_main: usize,
    k_fs: usize,
    shrink_eps: f64,
    trim_threshold: f64,
    min_retained: f64,
    horizon: usize,
    out_dir: PathBuf,
    /// "multi" (one joint model) or "single" (one model per population).
    mode: String,
    seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            data_dir: "data".into(),
            countries: vec!["AUT".into(), "CZE".into()],
            year_min: 1961,
            year_max: 2019,
            cutoff: 2010,
            split_age: 40,
            omega: 100,
            k_main: 10,
            k_fs: 8,
            shrink_eps: 0.1,
            trim_threshold: 0.1,
            min_retained: 0.5,
            horizon: 9,
            out_dir: "out".into(),
            mode: "multi".into(),
            seed: 1,
        }
    }
}

impl RunConfig {
    /// Field-level validation; the returned string names the bad field.
    fn validate(&self) -> Result<(), String> {
        if self.version != CONFIG_VERSION {
            return Err(format!(
                "version: expected {CONFIG_VERSION}, found {}",
                self.version
            ));
        }
        if self.countries.is_empty() {
            return Err("countries: must not be empty".into());
        }
        if self.year_min >= self.year_max {
            return Err(format!(
                "year_min/year_max: need year_min < year_max, got {}..{}",
                self.year_min, self.year_max
            ));
        }
        if self.cutoff < self.year_min || self.cutoff >= self.year_max {
            return Err(format!(
                "cutoff: {} is not inside the year range {}..{}",
                self.cutoff, self.year_min, self.year_max
            ));
        }
        if self.split_age >= self.omega {
            return Err(format!(
                "split_age: {} must be below omega {}",
                self.split_age, self.omega
            ));
        }
        if self.k_main < 3 || self.k_fs < 3 {
            return Err("k_main/k_fs: basis dimensions must be at least 3".into());
        }
        if !(self.shrink_eps > 0.0) {
            return Err("shrink_eps: must be positive".into());
        }
        if !(self.trim_threshold > 0.0) {
            return Err("trim_threshold: must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.min_retained) {
            return Err("min_retained: must be in [0, 1]".into());
        }
        if self.horizon < 1 {
            return Err("horizon: must be at least 1".into());
        }
        if self.mode != "multi" && self.mode != "single" {
            return Err(format!("mode: expected \"multi\" or \"single\", found {:?}", self.mode));
        }
        Ok(())
    }
}

#[derive(Parser)]
#[command(
    name = "mortcast",
    about = "Mortality modelling and forecasting pipeline",
    after_help = "All settings live in a JSON config (see `mortcast config`); the flags below \
override individual fields. The config path can also be set via MORTCAST_CONFIG."
)]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true, env = "MORTCAST_CONFIG")]
    config: Option<PathBuf>,
    /// Override: model mode, "multi" or "single".
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Override: last training year.
    #[arg(long, global = true)]
    cutoff: Option<i32>,
    /// Override: forecast horizon in years.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Override: comma-separated country codes.
    #[arg(long, global = true, value_delimiter = ',')]
    countries: Option<Vec<String>>,
    /// Override: output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-population work (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override: RNG seed for synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default config to stdout.
    Config,
    /// Generate synthetic Mx files into the data directory.
    Synth,
    /// Parse Mx files and write the combined panel CSV.
    Ingest,
    /// Fit the model(s) on the training years, trim, and refit.
    Fit,
    /// Residual diagnostics (ACF, QQ, residuals-vs-fitted) for fitted models.
    Diagnose,
    /// Forecast covariates and death rates past the training range.
    Forecast,
    /// Compare forecasts against held-out data and baselines.
    Evaluate,
    /// Full pipeline: ingest, fit, diagnose, forecast, evaluate.
    RunAll,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] mortcast::data::DataError),
    #[error(transparent)]
    Covariate(#[from] mortcast::covariates::CovariateError),
    #[error(transparent)]
    Fit(#[from] mortcast::reml::FitError),
    #[error(transparent)]
    Design(#[from] mortcast::design::DesignError),
    #[error(transparent)]
    Diagnostics(#[from] mortcast::diagnostics::DiagnosticsError),
    #[error(transparent)]
    Forecast(#[from] mortcast::forecast::ForecastError),
    #[error(transparent)]
    Baseline(#[from] mortcast::baselines::BaselineError),
    #[error(transparent)]
    Eval(#[from] mortcast::eval::EvalError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => serde_json::from_str::<RunConfig>(&read_file(path)?)
            .map_err(|e| CliError::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(mode) = &cli.mode {
        config.mode = mode.clone();
    }
    if let Some(cutoff) = cli.cutoff {
        config.cutoff = cutoff;
    }
    if let Some(horizon) = cli.horizon {
        config.horizon = horizon;
    }
    if let Some(countries) = &cli.countries {
        config.countries = countries.clone();
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().map_err(CliError::Config)?;
    Ok(config)
}

/// One fitting unit: the whole panel in multi mode, one country-gender
/// sub-panel in single mode.
struct Population {
    label: String,
    panel: MortalityPanel,
    spec: ModelSpec,
}

fn populations(config: &RunConfig, panel: &MortalityPanel) -> Vec<Population> {
    if config.mode == "multi" {
        return vec![Population {
            label: "multi".into(),
            panel: panel.clone(),
            spec: ModelSpec::multi_population(config.k_main, config.k_fs, config.shrink_eps),
        }];
    }
    let mut out = Vec::new();
    for country in &panel.countries {
        for gender in Gender::ALL {
            let records: Vec<_> = panel
                .records
                .iter()
                .filter(|r| r.country == *country && r.gender == gender)
                .cloned()
                .collect();
            if records.is_empty() {
                continue;
            }
            out.push(Population {
                label: format!("{country}_{gender}"),
                panel: MortalityPanel {
                    records,
                    countries: vec![country.clone()],
                    omega: panel.omega,
                    year_min: panel.year_min,
                    year_max: panel.year_max,
                    excluded_cells: 0,
                },
                spec: ModelSpec::single_population(config.k_fs),
            });
        }
    }
    out
}

fn panel_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("panel.csv")
}

fn model_path(config: &RunConfig, label: &str) -> PathBuf {
    config.out_dir.join(format!("model_{label}.json"))
}

fn cmd_synth(config: &RunConfig) -> Result<(), CliError> {
    let countries: Vec<&str> = config.countries.iter().map(|s| s.as_str()).collect();
    let n_years = (config.year_max - config.year_min + 1) as usize;
    let spec = SynthSpec::hmd_like(&countries, config.year_min, n_years, config.omega);
    let panel = synth_panel(&spec, config.seed)?;
    for country in &config.countries {
        let path = config.data_dir.join(format!("{country}.Mx_1x1.txt"));
        write_file(&path, &to_hmd_mx_text(&panel, country))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ingest(config: &RunConfig) -> Result<MortalityPanel, CliError> {
    let mut tables = Vec::new();
    for country in &config.countries {
        let path = config.data_dir.join(format!("{country}.Mx_1x1.txt"));
        tables.push(parse_hmd_mx(country, &read_file(&path)?)?);
    }
    let panel = build_panel(&tables, config.year_min..=config.year_max, 0..=config.omega)?;
    write_file(&panel_path(config), &panel.to_csv())?;
    println!(
        "panel: {} records, {} countries, ages 0..={}, years {}..={}, {} cells excluded",
        panel.n(),
        panel.countries.len(),
        panel.omega,
        panel.year_min,
        panel.year_max,
        panel.excluded_cells
    );
    Ok(panel)
}

fn load_panel(config: &RunConfig) -> Result<MortalityPanel, CliError> {
    let path = panel_path(config);
    if path.exists() {
        Ok(MortalityPanel::from_csv(&read_file(&path)?)?)
    } else {
        cmd_ingest(config)
    }
}

fn training_frame(
    config: &RunConfig,
    pop: &Population,
) -> Result<(MortalityPanel, ModelFrame), CliError> {
    let (train, _) = split(&pop.panel, config.cutoff)?;
    let cov = compute_covariates(&train, config.split_age)?;
    let frame = attach_covariates(&train, &cov)?;
    Ok((train, frame))
}

fn cmd_fit(config: &RunConfig, panel: &MortalityPanel) -> Result<Vec<FittedModel>, CliError> {
    let opts = RemlOptions::default();
    let mut log = String::new();
    let mut models = Vec::new();
    for pop in populations(config, panel) {
        let started = Instant::now();
        let (train, frame) = training_frame(config, &pop)?;
        let initial = fit_panel(&train, &pop.spec, config.split_age, &opts)?;
        let model = trim_refit(
            &initial,
            &frame,
            config.trim_threshold,
            config.min_retained,
            &opts,
        )?;
        let elapsed = started.elapsed();
        write_file(&model_path(config, &pop.label), &model.to_json()?)?;
        write_file(
            &config.out_dir.join(format!("kt_{}.csv", pop.label)),
            &kt_csv(&model.covariates),
        )?;
        write_file(
            &config.out_dir.join(format!("kct_{}.csv", pop.label)),
            &kct_csv(&model.covariates),
        )?;
        let trim = model.trim.as_ref().expect("trim metadata");
        log.push_str(&format!(
            "[{}] n_train {}, retained {:.4} ({} of {}), scale {:.6e}, \
             REML iterations {} (converged {}), fit time {:.1}s\n",
            pop.label,
            model.n_train,
            trim.retained_fraction,
            trim.n_retained,
            trim.n_before,
            model.scale,
            model.iterations,
            model.converged,
            elapsed.as_secs_f64()
        ));
        log.push_str(&format!("[{}] edf by term:\n", pop.label));
        for (term, edf) in &model.edf_by_term {
            log.push_str(&format!("    {term:<40} {edf:8.2}\n"));
        }
        println!(
            "fit {}: retained {:.1}%, {} iterations, {:.1}s",
            pop.label,
            100.0 * trim.retained_fraction,
            model.iterations,
            elapsed.as_secs_f64()
        );
        models.push(model);
    }
    write_file(&config.out_dir.join("run_log.txt"), &log)?;
    Ok(models)
}

fn load_models(config: &RunConfig, panel: &MortalityPanel) -> Result<Vec<(Population, FittedModel)>, CliError> {
    let mut out = Vec::new();
    for pop in populations(config, panel) {
        let model = FittedModel::from_json(&read_file(&model_path(config, &pop.label))?)?;
        out.push((pop, model));
    }
    Ok(out)
}

fn cmd_diagnose(config: &RunConfig, panel: &MortalityPanel) -> Result<(), CliError> {
    for (pop, model) in load_models(config, panel)? {
        let (_, frame) = training_frame(config, &pop)?;
        // Diagnostics describe the model the pipeline ships: residuals of
        // the trimmed refit over the retained cells.
        let dropped: std::collections::BTreeSet<(String, Gender, u32, i32)> = model
            .trim
            .as_ref()
            .map(|t| {
                t.dropped
                    .iter()
                    .map(|d| (d.country.clone(), d.gender, d.age, d.year))
                    .collect()
            })
            .unwrap_or_default();
        let rows: Vec<_> = frame
            .rows
            .iter()
            .filter(|r| !dropped.contains(&(r.country.clone(), r.gender, r.age, r.year)))
            .cloned()
            .collect();
        let fitted = model.predict(&rows)?;
        let residuals: Vec<f64> = rows.iter().zip(&fitted).map(|(r, f)| r.y - f).collect();
        let acf = residual_acf(&rows, &residuals, 10)?;
        let qq = qq_points(&residuals)?;
        let rvf = residuals_vs_fitted(&fitted, &residuals)?;
        let dir = &config.out_dir;
        write_file(&dir.join(format!("acf_{}.csv", pop.label)), &acf_csv(&acf))?;
        write_file(&dir.join(format!("qq_{}.csv", pop.label)), &qq_csv(&qq))?;
        write_file(
            &dir.join(format!("resid_fitted_{}.csv", pop.label)),
            &residuals_vs_fitted_csv(&rvf),
        )?;
        write_file(
            &dir.join(format!("resid_decile_sd_{}.csv", pop.label)),
            &decile_sd_csv(&rvf),
        )?;
        println!("diagnose {}: acf lag-1 {:.4}, {} residuals", pop.label, acf[1], rows.len());
    }
    Ok(())
}

fn cmd_forecast(config: &RunConfig, panel: &MortalityPanel) -> Result<(), CliError> {
    for (pop, model) in load_models(config, panel)? {
        let fc = forecast_asdr(&model, &pop.panel, config.horizon, None)?;
        write_file(
            &config.out_dir.join(format!("forecast_{}.csv", pop.label)),
            &forecast_csv(&fc),
        )?;
        let extended = forecast_covariates(&model.covariates, config.horizon)?;
        write_file(
            &config.out_dir.join(format!("kt_forecast_{}.csv", pop.label)),
            &covariate_series_csv("kt", &extended.kt),
        )?;
        println!(
            "forecast {}: {} cells over {} years",
            pop.label,
            fc.records.len(),
            config.horizon
        );
    }
    Ok(())
}

/// Read a forecast CSV back into (country, gender, age, year) -> log rate.
fn read_forecast(path: &Path) -> Result<BTreeMap<(String, Gender, u32, i32), f64>, CliError> {
    let text = read_file(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 6 {
            continue;
        }
        let gender = Gender::parse(f[1]).ok_or_else(|| {
            CliError::Config(format!("{}: bad gender {:?}", path.display(), f[1]))
        })?;
        out.insert(
            (
                f[0].to_string(),
                gender,
                f[2].parse().unwrap_or(0),
                f[3].parse().unwrap_or(0),
            ),
            f[4].parse().unwrap_or(f64::NAN),
        );
    }
    Ok(out)
}

fn cmd_evaluate(config: &RunConfig, panel: &MortalityPanel) -> Result<EvalReport, CliError> {
    let (train, test) = split(panel, config.cutoff)?;
    // GAMM predictions come from the forecast files; baselines are fitted
    // here from the same training split.
    let mut gamm: BTreeMap<(String, Gender, u32, i32), f64> = BTreeMap::new();
    for pop in populations(config, panel) {
        let path = config.out_dir.join(format!("forecast_{}.csv", pop.label));
        gamm.extend(read_forecast(&path)?);
    }
    let baseline_name = if config.mode == "multi" { "LL" } else { "LC" };
    let mut baseline: BTreeMap<(String, Gender, u32, i32), f64> = BTreeMap::new();
    if config.mode == "multi" && train.countries.len() >= 2 {
        for gender in Gender::ALL {
            let fit = li_lee_fit(&train, gender)?;
            for ((country, age, year), lr) in li_lee_forecast(&fit, config.horizon)? {
                baseline.insert((country, gender, age, year), lr);
            }
        }
    } else {
        for country in &train.countries {
            for gender in Gender::ALL {
                let fit = lee_carter_fit(&train, country, gender)?;
                for ((age, year), lr) in lee_carter_forecast(&fit, config.horizon)? {
                    baseline.insert((country.clone(), gender, age, year), lr);
                }
            }
        }
    }
    let mut rows = Vec::new();
    for country in &panel.countries {
        for gender in Gender::ALL {
            let actual: Vec<&mortcast::PanelRecord> = test
                .records
                .iter()
                .filter(|r| r.country == *country && r.gender == gender)
                .collect();
            if actual.is_empty() {
                continue;
            }
            let actual_logs: Vec<f64> = actual.iter().map(|r| r.log_rate).collect();
            for (name, table) in [("GAMM", &gamm), (baseline_name, &baseline)] {
                let mut preds = Vec::with_capacity(actual.len());
                for r in &actual {
                    let key = (r.country.clone(), r.gender, r.age, r.year);
                    match table.get(&key) {
                        Some(&lr) => preds.push(lr),
                        None => {
                            return Err(CliError::Eval(mortcast::eval::EvalError::Misaligned {
                                key: format!("{name}: {country}/{gender}/{}/{}", r.age, r.year),
                            }))
                        }
                    }
                }
                for scale in [Scale::Rate, Scale::Log] {
                    rows.push(MseRow {
                        country: country.clone(),
                        gender,
                        model: name.to_string(),
                        scale,
                        train_mse: None,
                        test_mse: mse(&actual_logs, &preds, scale)?,
                    });
                }
            }
        }
    }
    let report = compare(rows, "GAMM")?;
    write_file(
        &config.out_dir.join("report.csv"),
        &mortcast::eval::report_csv(&report),
    )?;
    let mut table = mortcast::eval::report_table(&report, Scale::Rate);
    table.push('\n');
    table.push_str(&mortcast::eval::report_table(&report, Scale::Log));
    write_file(&config.out_dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(report)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .ok();
    }
    if matches!(cli.command, Command::Config) {
        println!(
            "{}",
            serde_json::to_string_pretty(&RunConfig::default())?
        );
        return Ok(());
    }
    let config = load_config(cli)?;
    match cli.command {
        Command::Config => unreachable!(),
        Command::Synth => cmd_synth(&config),
        Command::Ingest => cmd_ingest(&config).map(|_| ()),
        Command::Fit => {
            let panel = load_panel(&config)?;
            cmd_fit(&config, &panel).map(|_| ())
        }
        Command::Diagnose => {
            let panel = load_panel(&config)?;
            cmd_diagnose(&config, &panel)
        }
        Command::Forecast => {
            let panel = load_panel(&config)?;
            cmd_forecast(&config, &panel)
        }
        Command::Evaluate => {
            let panel = load_panel(&config)?;
            cmd_evaluate(&config, &panel).map(|_| ())
        }
        Command::RunAll => {
            let panel = cmd_ingest(&config)?;
            cmd_fit(&config, &panel)?;
            cmd_diagnose(&config, &panel)?;
            cmd_forecast(&config, &panel)?;
            cmd_evaluate(&config, &panel).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: invalid config: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
