//! `robustmeta` command-line front end.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 the fit hit the
//! iteration cap (the report is still written).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use robustmeta::diagnostics::detect_outliers;
use robustmeta::fit::{fit_nmeta_auto, fit_tmeta_auto, fit_tmeta_regression_auto, FitResult};
use robustmeta::io::{load_csv, write_csv};
use robustmeta::model::{Dataset, FitOptions, NU_MAX};
use robustmeta::report::{
    format_comparison_table, render_svg, write_breakdown_csv, write_comparison_csv,
    write_forest_csv, write_weights_csv, FitReportJson,
};
use robustmeta::selection::{compare_models, with_intercept};
use robustmeta::simulate::{
    breakdown_experiment, inject_outliers, null_weight_study, sample_dataset, set_study_s2,
    ContaminationSpec, SimConfig,
};
use robustmeta::specfun::Probability;

const SEED_ENV: &str = "ROBUSTMETA_SEED";

#[derive(Parser)]
#[command(
    name = "robustmeta",
    version,
    about = "Robust t random-effects meta-analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct FitFlags {
    /// Significance level of the outlier rule.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Relative log-likelihood change that stops the iteration.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Degrees of freedom above this are reported as infinite.
    #[arg(long, default_value_t = NU_MAX)]
    nu_max: f64,
}

impl FitFlags {
    fn options(&self) -> Result<FitOptions> {
        let options = FitOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            nu_max: self.nu_max,
            ..FitOptions::default()
        };
        options.validate()?;
        Ok(options)
    }

    fn alpha(&self) -> Result<Probability> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!("--alpha must lie in (0, 1), got {}", self.alpha);
        }
        Ok(Probability::new(self.alpha)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Normal,
    T,
    /// t meta-regression on the `x_` columns (an intercept is added unless
    /// a constant column is present).
    TRegression,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write the full report.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "t")]
        model: ModelArg,
        #[command(flatten)]
        flags: FitFlags,
        /// Report destination; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
    },
    /// Fit the t model and classify studies as outliers.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: FitFlags,
        /// Directory for forest.csv, weights.csv and plots.svg.
        #[arg(long)]
        plot_data: Option<PathBuf>,
        /// Destination of the JSON outlier report.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare the normal and t models (and the regression) by BIC.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: FitFlags,
        /// Table destination: JSON for a `.json` extension, CSV otherwise.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the experiments listed in a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fit {
            data,
            model,
            flags,
            output,
            format,
        } => cmd_fit(&data, model, &flags, output.as_deref(), format),
        Command::Detect {
            data,
            flags,
            plot_data,
            output,
        } => cmd_detect(&data, &flags, plot_data.as_deref(), output.as_deref()),
        Command::Compare {
            data,
            flags,
            output,
        } => cmd_compare(&data, &flags, output.as_deref()),
        Command::Simulate { config, out } => cmd_simulate(&config, &out),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    load_csv(path).with_context(|| format!("reading {}", path.display()))
}

fn exit_for(fit: &FitResult) -> ExitCode {
    if fit.converged {
        ExitCode::SUCCESS
    } else {
        eprintln!(
            "warning: no convergence within {} iterations",
            fit.iterations
        );
        ExitCode::from(2)
    }
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match output {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn fit_model(
    data: &Dataset,
    model: ModelArg,
    options: &FitOptions,
) -> Result<(Dataset, FitResult)> {
    Ok(match model {
        ModelArg::Normal => (data.clone(), fit_nmeta_auto(data, options)?),
        ModelArg::T => (data.clone(), fit_tmeta_auto(data, options)?),
        ModelArg::TRegression => {
            let cov = data
                .covariates
                .as_ref()
                .context("--model t-regression needs x_ covariate columns")?;
            let mut design = data.clone();
            design.covariates = Some(with_intercept(cov));
            let fit = fit_tmeta_regression_auto(&design, options)?;
            (design, fit)
        }
    })
}

fn cmd_fit(
    path: &Path,
    model: ModelArg,
    flags: &FitFlags,
    output: Option<&Path>,
    format: FormatArg,
) -> Result<ExitCode> {
    let options = flags.options()?;
    let alpha = flags.alpha()?;
    let data = load(path)?;
    let (data, fit) = fit_model(&data, model, &options)?;
    let outliers = detect_outliers(&data, &fit, alpha)?;
    let report = FitReportJson::new(&data, &fit, &outliers);
    let bytes = match format {
        FormatArg::Json => report.to_json()?.into_bytes(),
        FormatArg::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            buf
        }
    };
    emit(output, &bytes)?;
    Ok(exit_for(&fit))
}

fn cmd_detect(
    path: &Path,
    flags: &FitFlags,
    plot_dir: Option<&Path>,
    output: Option<&Path>,
) -> Result<ExitCode> {
    let options = flags.options()?;
    let alpha = flags.alpha()?;
    let data = load(path)?;
    let fit = fit_tmeta_auto(&data, &options)?;
    let report = detect_outliers(&data, &fit, alpha)?;

    if let Some(dir) = plot_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_forest_csv(&data, fs::File::create(dir.join("forest.csv"))?)?;
        write_weights_csv(&report, fs::File::create(dir.join("weights.csv"))?)?;
        fs::write(dir.join("plots.svg"), render_svg(&data, &report))?;
    }
    if let Some(path) = output {
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        emit(Some(path), text.as_bytes())?;
    }
    println!(
        "nu = {}; critical weight = {:.6}; outliers: {{{}}}",
        fit.theta.nu,
        report.critical_tau,
        report.outlier_ids().join(", ")
    );
    Ok(exit_for(&fit))
}

fn cmd_compare(path: &Path, flags: &FitFlags, output: Option<&Path>) -> Result<ExitCode> {
    let options = flags.options()?;
    let data = load(path)?;
    let rows = compare_models(&data, &options)?;
    print!("{}", format_comparison_table(&rows));
    if let Some(path) = output {
        let bytes = if path.extension().is_some_and(|e| e == "json") {
            let mut text = serde_json::to_string_pretty(&rows)?;
            text.push('\n');
            text.into_bytes()
        } else {
            let mut buf = Vec::new();
            write_comparison_csv(&rows, &mut buf)?;
            buf
        };
        emit(Some(path), &bytes)?;
    }
    if rows.iter().any(|r| r.error.is_none() && !r.converged) {
        eprintln!("warning: at least one fit did not converge");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    experiments: Vec<Experiment>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct S2Override {
    id: String,
    s2: f64,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Experiment {
    /// Draw one dataset; writes `<name>.csv`.
    Sample { name: String, config: SimConfig },
    /// Append outliers to a dataset (path relative to the config file) and
    /// optionally override within-study variances; writes `<name>.csv`.
    Inject {
        name: String,
        data: PathBuf,
        contamination: ContaminationSpec,
        seed: u64,
        #[serde(default)]
        set_s2: Vec<S2Override>,
    },
    /// Contamination grid; writes the long-format `<name>.csv`.
    Breakdown {
        name: String,
        base: SimConfig,
        magnitudes: Vec<f64>,
        fractions: Vec<f64>,
        replicates: usize,
        seed: u64,
    },
    /// Weight-law check on one simulated dataset; writes `<name>.json`.
    NullWeight {
        name: String,
        config: SimConfig,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_alpha() -> f64 {
    0.05
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            Ok(Some(v.trim().parse().with_context(|| {
                format!("{SEED_ENV}={v:?} is not a u64")
            })?))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        bail!("experiment name {name:?} must be a plain file stem");
    }
    Ok(())
}

fn cmd_simulate(config_path: &Path, out: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let config: SimulateConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", config_path.display()))?;
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let seed = seed_override()?;
    let options = FitOptions::default();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    for experiment in config.experiments {
        match experiment {
            Experiment::Sample { name, mut config } => {
                check_name(&name)?;
                config.seed = seed.unwrap_or(config.seed);
                let data = sample_dataset(&config)?;
                let dest = out.join(format!("{name}.csv"));
                write_csv(&data, &dest)?;
                println!(
                    "sample {name}: {} studies -> {}",
                    data.len(),
                    dest.display()
                );
            }
            Experiment::Inject {
                name,
                data,
                contamination,
                seed: own_seed,
                set_s2,
            } => {
                check_name(&name)?;
                let source = load(&base_dir.join(&data))?;
                let mut modified =
                    inject_outliers(&source, &contamination, seed.unwrap_or(own_seed))?;
                for o in &set_s2 {
                    modified = set_study_s2(&modified, &o.id, o.s2)?;
                }
                let dest = out.join(format!("{name}.csv"));
                write_csv(&modified, &dest)?;
                println!(
                    "inject {name}: {} -> {} studies -> {}",
                    source.len(),
                    modified.len(),
                    dest.display()
                );
            }
            Experiment::Breakdown {
                name,
                mut base,
                magnitudes,
                fractions,
                replicates,
                seed: own_seed,
            } => {
                check_name(&name)?;
                let run_seed = seed.unwrap_or(own_seed);
                base.seed = seed.unwrap_or(base.seed);
                let rows = breakdown_experiment(
                    &base,
                    &magnitudes,
                    &fractions,
                    replicates,
                    run_seed,
                    &options,
                )?;
                let dest = out.join(format!("{name}.csv"));
                write_breakdown_csv(&rows, fs::File::create(&dest)?)?;
                println!(
                    "breakdown {name}: {} cells x {replicates} replicates, {} rows -> {}",
                    fractions.len() * magnitudes.len(),
                    rows.len(),
                    dest.display()
                );
            }
            Experiment::NullWeight {
                name,
                mut config,
                alpha,
            } => {
                check_name(&name)?;
                config.seed = seed.unwrap_or(config.seed);
                let summary = null_weight_study(&config, Probability::new(alpha)?, &options)?;
                let dest = out.join(format!("{name}.json"));
                let mut text = serde_json::to_string_pretty(&summary)?;
                text.push('\n');
                fs::write(&dest, text)?;
                let ks = |k: Option<robustmeta::simulate::KsResult>| {
                    k.map_or("n/a".to_string(), |k| {
                        format!("D={:.4} p={:.4}", k.statistic, k.p_value)
                    })
                };
                println!(
                    "null_weight {name}: nu_hat = {}, weights {}, distances {}, flag rate {:.4} -> {}",
                    summary.nu_hat,
                    ks(summary.ks_weights),
                    ks(summary.ks_distances),
                    summary.flag_rate,
                    dest.display()
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
