use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::json;

use skloc::anneal::{estimate_log_z, AnnealConfig};
use skloc::diagnostics::{
    coupled_wasserstein_values, covariance_frobenius_values, delta_diag_scaling, ensemble_stat,
    magnetization_error_values, successive_ratios, wedge_concentration_stat, EnsembleParams, Statistic,
};
use skloc::oracle::{Oracle, SpinConfig, Wedge};
use skloc::pipeline::{write_outputs, write_samples, OutputFormat, Pipeline, PipelineConfig};
use skloc::walk::run_walk;
use skloc::SkInstance;

#[derive(Parser, Debug)]
#[command(name = "skloc", version, about = "Stochastic-localization sampler for the SK model")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => OutputFormat::Json,
            Format::Csv => OutputFormat::Csv,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a GOE instance file.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        beta: f64,
    },
    /// Run the sampler described by --config.
    Sample,
    /// Exact log-partition, magnetization and covariance by enumeration.
    Oracle {
        #[arg(long, default_value = "instance.json")]
        instance: PathBuf,
        /// `zeros`, a comma-separated list, or `@file.json` with a JSON array.
        #[arg(long, default_value = "zeros")]
        tilt: String,
        /// Restrict to the Hamming ball of this radius around sign(tilt).
        #[arg(long)]
        radius: Option<usize>,
    },
    /// Standalone wedge walk from sign(tilt).
    Walk {
        #[arg(long, default_value = "instance.json")]
        instance: PathBuf,
        #[arg(long, default_value = "zeros")]
        tilt: String,
        #[arg(long)]
        radius: usize,
        #[arg(long)]
        steps: usize,
    },
    /// Annealed estimate of the wedge-restricted partition function.
    EstimateZ {
        #[arg(long, default_value = "instance.json")]
        instance: PathBuf,
        #[arg(long, default_value = "zeros")]
        tilt: String,
        #[arg(long)]
        radius: usize,
    },
    /// Monte-Carlo diagnostics.
    Diagnose {
        #[command(subcommand)]
        probe: Probe,
    },
}

#[derive(clap::Args, Debug, Clone)]
struct PathArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 0.05)]
    eta: f64,
    #[arg(long, default_value_t = 1)]
    disorders: usize,
    #[arg(long, default_value_t = 20)]
    trajectories: usize,
    /// Also write per-trial values as CSV here.
    #[arg(long)]
    values: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Probe {
    /// Frobenius error of the TAP covariance.
    Covariance(PathArgs),
    /// Squared error of the TAP magnetization.
    Magnetization(PathArgs),
    /// Coupled distance between exact and algorithmic dynamics.
    Wasserstein(PathArgs),
    /// Sign disagreement of the terminal tilt.
    Wedge {
        #[arg(long, default_value_t = 4.0)]
        t: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Diagonal-control norm across sizes.
    DeltaDiag {
        #[arg(long, value_delimiter = ',', default_value = "100,400,1600")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 0.3)]
        beta: f64,
        #[arg(long, default_value_t = 0.5)]
        m_scale: f64,
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn config<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn runtime<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Runtime(e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn parse_tilt(arg: &str, n: usize) -> anyhow::Result<DVector<f64>> {
    let values: Vec<f64> = if arg == "zeros" {
        vec![0.0; n]
    } else if let Some(path) = arg.strip_prefix('@') {
        let text = fs::read_to_string(path).with_context(|| format!("reading tilt file {path}"))?;
        serde_json::from_str(&text).with_context(|| format!("parsing tilt file {path}"))?
    } else {
        arg.split(',')
            .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad tilt entry {t:?}")))
            .collect::<anyhow::Result<_>>()?
    };
    if values.len() != n {
        return Err(anyhow!("tilt has {} entries but the instance has {n} spins", values.len()));
    }
    Ok(DVector::from_vec(values))
}

fn load_instance(path: &Path) -> anyhow::Result<SkInstance> {
    SkInstance::load(path).with_context(|| format!("loading instance {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Gen { n, beta } => {
            let inst = config(SkInstance::generate(n, beta, seed.unwrap_or(0)).map_err(Into::into))?;
            let text = runtime(serde_json::to_string_pretty(&inst.to_file_repr()))?;
            runtime(emit(Some(out.unwrap_or(Path::new("instance.json"))), &text))
        }
        Command::Oracle { instance, tilt, radius } => {
            let inst = config(load_instance(&instance))?;
            let y = config(parse_tilt(&tilt, inst.n()))?;
            let wedge = match radius {
                Some(k) => Some(config(Wedge::new(SpinConfig::sign_of(y.as_slice()), k).map_err(Into::into))?),
                None => None,
            };
            let s = runtime(Oracle::default().summary(&inst, &y, wedge.as_ref()))?;
            let report = json!({
                "n": inst.n(),
                "beta": inst.beta(),
                "log_z": s.log_z,
                "magnetization": s.magnetization.as_slice(),
                "covariance": s.covariance.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            });
            runtime(emit(out, &format!("{:#}\n", report)))
        }
        Command::Walk { instance, tilt, radius, steps } => {
            let inst = config(load_instance(&instance))?;
            let y = config(parse_tilt(&tilt, inst.n()))?;
            let start = SpinConfig::sign_of(y.as_slice());
            let wedge = config(Wedge::new(start.clone(), radius).map_err(Into::into))?;
            let end = runtime(run_walk(&inst, &y, &wedge, &start, steps, seed.unwrap_or(0)))?;
            let report = json!({
                "start": start.to_string(),
                "end": end.to_string(),
                "spins": end.spins(),
                "steps": steps,
                "radius": radius,
            });
            runtime(emit(out, &format!("{:#}\n", report)))
        }
        Command::EstimateZ { instance, tilt, radius } => {
            let inst = config(load_instance(&instance))?;
            let y = config(parse_tilt(&tilt, inst.n()))?;
            let anneal: AnnealConfig = match &cli.config {
                Some(p) => config(read_json(p))?,
                None => AnnealConfig::default(),
            };
            config(anneal.validate().map_err(Into::into))?;
            let wedge = config(Wedge::new(SpinConfig::sign_of(y.as_slice()), radius).map_err(Into::into))?;
            let est = runtime(estimate_log_z(&inst, &y, &wedge, &anneal, seed.unwrap_or(0)))?;
            let exact = Oracle::default().log_partition(&inst, &y, Some(&wedge)).ok();
            let report = json!({
                "log_z": est.log_z,
                "exact_log_z": exact,
                "estimate": est,
            });
            runtime(emit(out, &format!("{:#}\n", report)))
        }
        Command::Sample => {
            let path = config(cli.config.clone().ok_or_else(|| anyhow!("sample needs --config")))?;
            let text = config(fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())))?;
            let mut cfg = config(
                PipelineConfig::from_json(&text).map_err(|e| anyhow!("{}: {e}", path.display())),
            )?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = cli.format {
                cfg.format = f.into();
            }
            if let Some(o) = out {
                cfg.output = Some(o.to_path_buf());
            }
            let format = cfg.format;
            let target = cfg.output.clone();
            let pipeline = config(Pipeline::new(cfg).map_err(Into::into))?;
            let run = runtime(pipeline.run())?;
            match target {
                Some(p) => {
                    let tel = runtime(write_outputs(&p, &run, format))?;
                    log::info!("telemetry written to {}", tel.display());
                }
                None => runtime(write_samples(std::io::stdout().lock(), &run, format))?,
            }
            if !run.telemetry.failures.is_empty() {
                log::warn!("{} of {} samples failed", run.telemetry.failures.len(), run.telemetry.requested);
            }
            Ok(())
        }
        Command::Diagnose { probe } => diagnose(probe, seed.unwrap_or(0), out),
    }
}

fn path_stat(
    name: &str,
    a: &PathArgs,
    seed: u64,
    probe: fn(&SkInstance, f64, f64, usize, u64) -> skloc::Result<Vec<f64>>,
) -> Result<Statistic, Failure> {
    if a.n == 0 || !(0.0..0.5).contains(&a.beta) {
        return Err(Failure::Config(anyhow!("need n > 0 and beta in [0, 1/2)")));
    }
    let p = EnsembleParams {
        n: a.n,
        beta: a.beta,
        t: a.t,
        eta: a.eta,
        disorders: a.disorders,
        trajectories: a.trajectories,
        seed,
    };
    runtime(ensemble_stat(name, &p, probe))
}

fn diagnose(probe: Probe, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let (stat, values_path) = match probe {
        Probe::Covariance(a) => (path_stat("covariance_frobenius", &a, seed, covariance_frobenius_values)?, a.values),
        Probe::Magnetization(a) => (path_stat("magnetization_error", &a, seed, magnetization_error_values)?, a.values),
        Probe::Wasserstein(a) => (path_stat("coupled_wasserstein", &a, seed, coupled_wasserstein_values)?, a.values),
        Probe::Wedge { t, n, trials } => {
            let r = runtime(wedge_concentration_stat(t, n, trials, seed))?;
            return runtime(emit(out, &format!("{}\n", runtime(serde_json::to_string_pretty(&r))?)));
        }
        Probe::DeltaDiag { ns, beta, m_scale, trials } => {
            let points = runtime(delta_diag_scaling(&ns, beta, m_scale, trials, seed))?;
            let report = json!({ "points": points, "ratios": successive_ratios(&points) });
            return runtime(emit(out, &format!("{:#}\n", report)));
        }
    };
    if let Some(p) = values_path {
        let f = runtime(fs::File::create(&p))?;
        runtime(stat.write_csv(std::io::BufWriter::new(f)))?;
    }
    runtime(emit(out, &format!("{}\n", runtime(stat.to_json())?)))
}
