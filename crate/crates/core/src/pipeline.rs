//! The end-to-end sampler: a rejection-sampled terminal tilt from the
//! localization dynamics, rounded to a wedge center, then a wedge walk.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anneal::{estimate_log_z, log_density_ratio, AnnealConfig};
use crate::dynamics::{default_eta, default_horizon, run_trajectory, DynamicsConfig};
use crate::error::{invalid, Result};
use crate::instance::SkInstance;
use crate::oracle::{SpinConfig, Wedge};
use crate::rejection::{accept_loop, calibrate_adaptive, AcceptanceTelemetry, Calibration, RejectionConfig};
use crate::rng::{derive_seed, substream, tags};
use crate::solver::SolverConfig;
use crate::walk::{default_walk_steps, default_wedge_radius, run_walk};

/// Where the disorder comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSource {
    Generate { n: usize, beta: f64, seed: u64 },
    File { path: PathBuf },
}

impl InstanceSource {
    pub fn load(&self) -> Result<SkInstance> {
        match self {
            InstanceSource::Generate { n, beta, seed } => SkInstance::generate(*n, *beta, *seed),
            InstanceSource::File { path } => SkInstance::load(path),
        }
    }
}

/// Horizon and step of the localization dynamics. Missing values are
/// derived from the error targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSettings {
    pub horizon: Option<f64>,
    pub eta: Option<f64>,
    pub eps_target: f64,
    pub eps_disc: f64,
    pub solver: SolverConfig,
}

impl Default for DynamicsSettings {
    fn default() -> Self {
        Self {
            horizon: None,
            eta: None,
            eps_target: 0.05,
            eps_disc: 0.1,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

fn default_wedge_eps() -> f64 {
    0.5
}

fn default_c_walk() -> f64 {
    1.0
}

fn default_walk_eps() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub instance: InstanceSource,
    #[serde(default)]
    pub seed: u64,
    pub num_samples: usize,
    #[serde(default)]
    pub dynamics: DynamicsSettings,
    #[serde(default)]
    pub rejection: RejectionConfig,
    #[serde(default)]
    pub anneal: AnnealConfig,
    /// Wedge radius is `ceil(wedge_eps * n)`.
    #[serde(default = "default_wedge_eps")]
    pub wedge_eps: f64,
    /// Walk steps after rounding; `None` uses `ceil(c_walk n ln(4n / walk_eps^2))`.
    #[serde(default)]
    pub walk_steps: Option<usize>,
    #[serde(default = "default_c_walk")]
    pub c_walk: f64,
    #[serde(default = "default_walk_eps")]
    pub walk_eps: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact JSON form, without the output path.
    pub fn hash(&self) -> Result<String> {
        let compact = serde_json::to_string(&Self {
            output: None,
            ..self.clone()
        })?;
        Ok(format!("{:x}", Sha256::digest(compact.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics.solver.validate()?;
        self.rejection.validate()?;
        self.anneal.validate()?;
        if let InstanceSource::Generate { n, beta, .. } = &self.instance {
            if *n == 0 {
                return Err(invalid("instance size must be positive"));
            }
            if !(0.0..0.5).contains(beta) {
                return Err(invalid(format!("beta = {beta} is outside [0, 1/2)")));
            }
        }
        if !(self.wedge_eps > 0.0 && self.wedge_eps <= 1.0) {
            return Err(invalid("wedge_eps must lie in (0, 1]"));
        }
        if !(self.c_walk > 0.0 && self.walk_eps > 0.0) {
            return Err(invalid("c_walk and walk_eps must be positive"));
        }
        let d = &self.dynamics;
        if !(d.eps_target > 0.0 && d.eps_disc > 0.0) {
            return Err(invalid("error targets must be positive"));
        }
        if d.horizon.is_some_and(|h| !(h >= 0.0 && h.is_finite())) {
            return Err(invalid("horizon must be finite and non-negative"));
        }
        if d.eta.is_some_and(|e| !(e > 0.0)) {
            return Err(invalid("eta must be positive"));
        }
        Ok(())
    }
}

/// Busy time per stage, summed over jobs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub trajectory: f64,
    pub annealing: f64,
    pub walk: f64,
    pub other: f64,
}

impl StageTimes {
    fn merge(&mut self, o: &StageTimes) {
        self.trajectory += o.trajectory;
        self.annealing += o.annealing;
        self.walk += o.walk;
        self.other += o.other;
    }

    pub fn sum(&self) -> f64 {
        self.trajectory + self.annealing + self.walk + self.other
    }
}

/// A weighted terminal tilt.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub y: DVector<f64>,
    pub m: DVector<f64>,
    pub w: f64,
    pub log_z_hat: f64,
    pub log_weight: f64,
    pub center: SpinConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub sigma: SpinConfig,
    pub center: SpinConfig,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub config_hash: String,
    pub n: usize,
    pub beta: f64,
    pub horizon: f64,
    pub eta: f64,
    pub wedge_radius: usize,
    pub walk_steps: usize,
    pub spectral_event: bool,
    pub calibration: Calibration,
    pub acceptance: AcceptanceTelemetry,
    pub requested: usize,
    pub emitted: usize,
    pub failures: Vec<SampleFailure>,
    pub stage_secs: StageTimes,
    /// Busy time over all jobs, including calibration.
    pub total_secs: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub samples: Vec<SampleRecord>,
    pub telemetry: Telemetry,
}

/// A validated configuration bound to its instance.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    inst: SkInstance,
    hash: String,
    horizon: f64,
    eta: f64,
    radius: usize,
    walk_steps: usize,
    spectral_event: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let inst = cfg.instance.load()?;
        Self::with_instance(cfg, inst)
    }

    /// Uses `inst` in place of the configured source.
    pub fn with_instance(cfg: PipelineConfig, inst: SkInstance) -> Result<Self> {
        cfg.validate()?;
        let n = inst.n();
        let d = &cfg.dynamics;
        let horizon = d.horizon.unwrap_or_else(|| default_horizon(d.eps_target));
        let eta_max = d
            .eta
            .unwrap_or_else(|| default_eta(n, horizon.max(f64::MIN_POSITIVE), inst.gamma(), d.eps_disc));
        let eta = DynamicsConfig::fitted(horizon, eta_max, d.solver.clone(), 0)?.eta;
        let spectral_event = inst.check_spectral_event()?;
        if !spectral_event {
            log::warn!(
                "beta ||A|| exceeds 1 - gamma for this instance; the TAP estimates carry no guarantee"
            );
        }
        Ok(Self {
            hash: cfg.hash()?,
            radius: default_wedge_radius(n, cfg.wedge_eps),
            walk_steps: cfg
                .walk_steps
                .unwrap_or_else(|| default_walk_steps(n, cfg.c_walk, cfg.walk_eps)),
            horizon,
            eta,
            spectral_event,
            inst,
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn instance(&self) -> &SkInstance {
        &self.inst
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn wedge_radius(&self) -> usize {
        self.radius
    }

    pub fn walk_steps(&self) -> usize {
        self.walk_steps
    }

    pub fn spectral_event(&self) -> bool {
        self.spectral_event
    }

    fn dynamics(&self, noise_seed: u64) -> DynamicsConfig {
        DynamicsConfig {
            horizon: self.horizon,
            eta: self.eta,
            solver: self.cfg.dynamics.solver.clone(),
            noise_seed,
        }
    }

    /// One trajectory and its combined weight `exp(w_T) R2(y_T)`.
    pub fn propose(&self, seed: u64, times: &mut StageTimes) -> Result<Proposal> {
        let t0 = Instant::now();
        let state = run_trajectory(&self.inst, &self.dynamics(derive_seed(seed, tags::TRAJECTORY)))?;
        let t1 = Instant::now();
        times.trajectory += (t1 - t0).as_secs_f64();
        let center = SpinConfig::sign_of(state.y.as_slice());
        let wedge = Wedge::new(center.clone(), self.radius)?;
        let est = estimate_log_z(&self.inst, &state.y, &wedge, &self.cfg.anneal, seed)?;
        let t2 = Instant::now();
        times.annealing += (t2 - t1).as_secs_f64();
        let mag = state.magnetization()?;
        let log_weight = state.w + log_density_ratio(&self.inst, &state.y, &mag, est.log_z)?;
        times.other += t2.elapsed().as_secs_f64();
        if !log_weight.is_finite() {
            return Err(invalid(format!("proposal log weight {log_weight} is not finite")));
        }
        Ok(Proposal {
            y: state.y,
            m: mag.values().clone(),
            w: state.w,
            log_z_hat: est.log_z,
            log_weight,
            center,
        })
    }

    /// Calibrates the rejection constants from fresh proposals.
    pub fn calibrate(&self, times: &mut StageTimes) -> Result<(Calibration, Vec<f64>)> {
        let stream = derive_seed(self.cfg.seed, tags::CALIBRATION);
        calibrate_adaptive(
            |i| Ok(self.propose(derive_seed(stream, i as u64), times)?.log_weight),
            &self.cfg.rejection,
        )
    }

    /// Sample `index`: accept a tilt, round it, walk inside the wedge.
    pub fn draw(
        &self,
        index: usize,
        calibration: &Calibration,
        times: &mut StageTimes,
        telemetry: &mut AcceptanceTelemetry,
    ) -> Result<SampleRecord> {
        let proposals = derive_seed(derive_seed(self.cfg.seed, tags::PROPOSAL), index as u64);
        let mut accept_rng = substream(derive_seed(self.cfg.seed, tags::ACCEPT), index as u64);
        let before = telemetry.attempts;
        let accepted = accept_loop(
            |a| self.propose(derive_seed(proposals, a as u64), times),
            |p| p.log_weight,
            calibration,
            &mut accept_rng,
            self.cfg.rejection.max_attempts,
            telemetry,
        )?;
        let t0 = Instant::now();
        let wedge = Wedge::new(accepted.center.clone(), self.radius)?;
        let walk_seed = derive_seed(derive_seed(self.cfg.seed, tags::WALK), index as u64);
        let sigma = run_walk(&self.inst, &accepted.y, &wedge, &accepted.center, self.walk_steps, walk_seed)?;
        times.walk += t0.elapsed().as_secs_f64();
        Ok(SampleRecord {
            index,
            sigma,
            center: accepted.center,
            attempts: telemetry.attempts - before,
        })
    }

    /// Calibrates, then draws every requested sample. Per-sample failures are
    /// recorded and the batch continues; a calibration failure aborts.
    pub fn run(&self) -> Result<PipelineRun> {
        let wall = Instant::now();
        let mut times = StageTimes::default();
        let t0 = Instant::now();
        let (calibration, _) = self.calibrate(&mut times)?;
        let mut total = t0.elapsed().as_secs_f64();
        times.other += (total - times.sum()).max(0.0);

        let jobs: Vec<_> = (0..self.cfg.num_samples)
            .into_par_iter()
            .map(|s| {
                let start = Instant::now();
                let mut t = StageTimes::default();
                let mut tel = AcceptanceTelemetry::new();
                let out = self.draw(s, &calibration, &mut t, &mut tel);
                let busy = start.elapsed().as_secs_f64();
                t.other += (busy - t.sum()).max(0.0);
                (out, t, tel, busy)
            })
            .collect();

        let mut acceptance = AcceptanceTelemetry::new();
        let mut samples = Vec::new();
        let mut failures = Vec::new();
        for (s, (out, t, tel, busy)) in jobs.into_iter().enumerate() {
            times.merge(&t);
            acceptance.merge(&tel);
            total += busy;
            match out {
                Ok(r) => samples.push(r),
                Err(e) => {
                    log::warn!("sample {s} failed: {e}");
                    failures.push(SampleFailure {
                        index: s,
                        error: e.to_string(),
                    });
                }
            }
        }
        let telemetry = Telemetry {
            config_hash: self.hash.clone(),
            n: self.inst.n(),
            beta: self.inst.beta(),
            horizon: self.horizon,
            eta: self.eta,
            wedge_radius: self.radius,
            walk_steps: self.walk_steps,
            spectral_event: self.spectral_event,
            calibration,
            acceptance,
            requested: self.cfg.num_samples,
            emitted: samples.len(),
            failures,
            stage_secs: times,
            total_secs: total,
            wall_secs: wall.elapsed().as_secs_f64(),
        };
        Ok(PipelineRun { samples, telemetry })
    }
}

/// Runs the configured pipeline.
pub fn sample(cfg: &PipelineConfig) -> Result<PipelineRun> {
    Pipeline::new(cfg.clone())?.run()
}

/// Bit `i` of the output (little-endian within bytes) is set when `sigma_i = -1`.
pub fn pack_bits(sigma: &SpinConfig) -> Vec<u8> {
    let mut out = vec![0u8; sigma.len().div_ceil(8)];
    for (i, &s) in sigma.spins().iter().enumerate() {
        if s < 0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<SpinConfig> {
    if bytes.len() != n.div_ceil(8) {
        return Err(invalid(format!("{} bytes cannot hold exactly {n} spins", bytes.len())));
    }
    SpinConfig::new(
        (0..n)
            .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { -1 } else { 1 })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFile {
    pub config_hash: String,
    pub n: usize,
    pub samples: Vec<String>,
}

impl SampleFile {
    pub fn decode(&self) -> Result<Vec<SpinConfig>> {
        self.samples
            .iter()
            .map(|s| {
                let bytes = BASE64
                    .decode(s)
                    .map_err(|e| invalid(format!("bad base64 sample: {e}")))?;
                unpack_bits(&bytes, self.n)
            })
            .collect()
    }
}

pub fn write_samples<W: Write>(mut out: W, run: &PipelineRun, format: OutputFormat) -> Result<()> {
    let hash = &run.telemetry.config_hash;
    match format {
        OutputFormat::Csv => {
            writeln!(out, "# config_hash={hash}")?;
            for r in &run.samples {
                let line: Vec<String> = r.sigma.spins().iter().map(|s| s.to_string()).collect();
                writeln!(out, "{}", line.join(","))?;
            }
        }
        OutputFormat::Json => {
            let file = SampleFile {
                config_hash: hash.clone(),
                n: run.telemetry.n,
                samples: run.samples.iter().map(|r| BASE64.encode(pack_bits(&r.sigma))).collect(),
            };
            serde_json::to_writer_pretty(&mut out, &file)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Parses the CSV sample format back into configurations and the hash.
pub fn read_csv_samples(text: &str) -> Result<(String, Vec<SpinConfig>)> {
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .ok_or_else(|| invalid("missing config hash header"))?
        .to_string();
    let samples = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let spins = l
                .split(',')
                .map(|t| t.trim().parse::<i8>().map_err(|e| invalid(format!("bad spin {t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            SpinConfig::new(spins)
        })
        .collect::<Result<_>>()?;
    Ok((hash, samples))
}

/// Writes the samples to `path` and the telemetry next to it as `<path>.telemetry.json`.
pub fn write_outputs(path: &Path, run: &PipelineRun, format: OutputFormat) -> Result<PathBuf> {
    let file = std::fs::File::create(path)?;
    write_samples(std::io::BufWriter::new(file), run, format)?;
    let mut tel_path = path.as_os_str().to_owned();
    tel_path.push(".telemetry.json");
    let tel_path = PathBuf::from(tel_path);
    std::fs::write(&tel_path, serde_json::to_string_pretty(&run.telemetry)?)?;
    Ok(tel_path)
}
