//! Experiment configuration, dispatch and output persistence for the
//! `homog` command line tool.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::json;

use crate::dynamics::{
    invariant_density_ulam, start_orbit, InitialMeasure, MapKind, MapSpec, Observable, DEFAULT_BURNIN,
};
use crate::error::{Error, Result};
use crate::fastslow::{
    euler_maruyama, homogenization_compare, simulate_fastslow, Diffusion, Drift, FastSlowSpec, NoiseKind, SDESpec,
};
use crate::io::{fmt_f64, sha256_hex, write_atomic, Csv};
use crate::rng::StreamKey;
use crate::semiflow::{
    flow_coeffs_tower, flow_iterated_integrals, flow_scaling, flow_wip_check, FlowObservable, FlowState, Roof,
    SuspensionSpec, DEFAULT_DT_FRACTION,
};
use crate::stats::{
    direct_coeffs, green_kubo, moment_table, scaling_exponent, CoefficientEstimate, IteratedStats, MomentOptions,
};
use crate::tower::{
    build_induced, centered_observable, hypothesis_diagnostics, tower_coefficients, ulam_p, InvariantMean,
    DEFAULT_TAU_CAP,
};
use crate::wip::{drift_check, marginal_normality, sample_paths, uniform_grid, TestReport};

/// Environment variable that overrides the worker count.
pub const WORKERS_ENV: &str = "HOMOG_WORKERS";
/// Exit code for a statistical gate that did not pass.
pub const EXIT_GATE: i32 = 4;
/// Name of the completion marker written after all other outputs.
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Orbit,
    Density,
    Tower,
    Decompose,
    Coeffs,
    Moments,
    Wip,
    Fastslow,
    Semiflow,
}

impl Command {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(json!(s)).map_err(|_| Error::config("subcommand", format!("unknown subcommand `{s}`")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Orbit => "orbit",
            Command::Density => "density",
            Command::Tower => "tower",
            Command::Decompose => "decompose",
            Command::Coeffs => "coeffs",
            Command::Moments => "moments",
            Command::Wip => "wip",
            Command::Fastslow => "fastslow",
            Command::Semiflow => "semiflow",
        }
    }
}

/// A decimal given either as a JSON number or as a string.
fn decimal<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Num(x)) => Ok(Some(x)),
        Some(Raw::Str(s)) => s.trim().parse().map(Some).map_err(serde::de::Error::custom),
    }
}

/// A list of counts given as a JSON array or a string like `"1e3,1e4"`.
fn count_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<usize>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        List(Vec<f64>),
        Str(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Str(s)) => parse_counts(&s).map(Some).map_err(serde::de::Error::custom),
        Some(Raw::List(v)) => v.into_iter().map(count).collect::<Result<Vec<_>>>().map(Some).map_err(serde::de::Error::custom),
    }
}

fn count(x: f64) -> Result<usize> {
    if !(x >= 1.0 && x.fract() == 0.0 && x < 1e18) {
        return Err(Error::config("n", format!("{x} is not a positive integer")));
    }
    Ok(x as usize)
}

/// Parse `"1e3,1e4,100"` into counts.
pub fn parse_counts(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::config("n", format!("cannot parse `{t}`"))).and_then(count))
        .collect()
}

/// Parse `"0.5,1,2"` into decimals.
pub fn parse_decimals(field: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|t| t.trim().parse::<f64>().map_err(|_| Error::config(field, format!("cannot parse `{t}`")))).collect()
}

/// All settings of one run. Every field is optional in the JSON file;
/// command line flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub subcommand: Option<Command>,
    pub map: Option<String>,
    #[serde(deserialize_with = "decimal")]
    pub gamma: Option<f64>,
    #[serde(deserialize_with = "decimal")]
    pub p: Option<f64>,
    #[serde(deserialize_with = "decimal")]
    pub eta: Option<f64>,
    pub obs: Option<String>,
    #[serde(deserialize_with = "count_list")]
    pub n: Option<Vec<usize>>,
    pub q: Option<Vec<f64>>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub initial: Option<String>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub allow_high_q: Option<bool>,
    pub bins: Option<usize>,
    pub tau_cap: Option<u32>,
    pub orbit_len: Option<usize>,
    pub max_lag: Option<usize>,
    pub grid: Option<usize>,
    #[serde(deserialize_with = "decimal")]
    pub x0: Option<f64>,
    pub drift: Option<String>,
    pub noise: Option<String>,
    pub xi: Option<Vec<f64>>,
    #[serde(deserialize_with = "decimal")]
    pub sde_sigma: Option<f64>,
    #[serde(deserialize_with = "decimal")]
    pub h: Option<f64>,
    pub roof: Option<String>,
    #[serde(deserialize_with = "decimal")]
    pub c0: Option<f64>,
    #[serde(deserialize_with = "decimal")]
    pub t1: Option<f64>,
    pub t: Option<Vec<f64>>,
    #[serde(deserialize_with = "decimal")]
    pub dt: Option<f64>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f.clone(); } )*
    };
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: &ExperimentConfig) -> Self {
        overlay!(
            self, top, subcommand, map, gamma, p, eta, obs, n, q, samples, seed, initial, out, workers, allow_high_q,
            bins, tau_cap, orbit_len, max_lag, grid, x0, drift, noise, xi, sde_sigma, h, roof, c0, t1, t, dt
        );
        self
    }

    pub fn command(&self) -> Result<Command> {
        self.subcommand.ok_or_else(|| Error::config("subcommand", "missing"))
    }

    pub fn map_spec(&self) -> Result<MapSpec> {
        let kind = MapKind::parse(self.map.as_deref().unwrap_or("lsv"))?;
        let gamma = if kind == MapKind::Lsv { Some(self.gamma.unwrap_or(0.25)) } else { self.gamma };
        MapSpec::from_parts(kind, gamma, self.p, self.eta)
    }

    pub fn obs_name(&self) -> &str {
        self.obs.as_deref().unwrap_or("linear")
    }

    pub fn n_grid(&self) -> Result<Vec<usize>> {
        let n = self.n.clone().unwrap_or_else(|| vec![1000]);
        if n.is_empty() {
            return Err(Error::config("n", "empty list"));
        }
        Ok(n)
    }

    pub fn n_single(&self) -> Result<usize> {
        Ok(*self.n_grid()?.last().unwrap())
    }

    pub fn samples(&self) -> Result<usize> {
        positive("samples", self.samples.unwrap_or(1000))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn initial(&self) -> Result<InitialMeasure> {
        InitialMeasure::parse(self.initial.as_deref().unwrap_or("mu"))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn bins(&self) -> Result<usize> {
        positive("bins", self.bins.unwrap_or(crate::tower::DEFAULT_TOWER_BINS))
    }

    pub fn tau_cap(&self) -> Result<u32> {
        Ok(positive("tau_cap", self.tau_cap.unwrap_or(DEFAULT_TAU_CAP) as usize)? as u32)
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        Ok(uniform_grid(positive("grid", self.grid.unwrap_or(10))?))
    }

    /// Worker count: `HOMOG_WORKERS`, then the config, then all cores.
    pub fn worker_count(&self) -> Result<Option<usize>> {
        if let Ok(s) = std::env::var(WORKERS_ENV) {
            let w = s.trim().parse::<usize>().map_err(|_| Error::config("workers", format!("{WORKERS_ENV}=`{s}`")))?;
            return Ok(Some(positive("workers", w)?));
        }
        self.workers.map(|w| positive("workers", w)).transpose()
    }

    /// Cross-field checks run before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.command()?;
        self.map_spec()?.validate()?;
        self.n_grid()?;
        self.samples()?;
        self.initial()?;
        self.bins()?;
        self.tau_cap()?;
        self.grid()?;
        self.worker_count()?;
        if let Some(q) = &self.q {
            if q.is_empty() || q.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::config("q", "exponents must be positive"));
            }
        }
        Ok(())
    }
}

fn positive(field: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::config(field, "must be at least 1"));
    }
    Ok(v)
}

/// One output file and its checksum.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub version: String,
    pub wall_time_s: f64,
    pub gate_passed: bool,
    pub files: Vec<ManifestEntry>,
}

impl RunManifest {
    /// Exit code of the run: 0, or the gate code when a statistical check failed.
    pub fn exit_code(&self) -> i32 {
        if self.gate_passed {
            0
        } else {
            EXIT_GATE
        }
    }
}

/// Collects outputs and their checksums.
struct Outputs {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
    gate: bool,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: String) -> Result<()> {
        write_atomic(&self.dir, name, contents.as_bytes())?;
        self.files.push(ManifestEntry { name: name.into(), sha256: sha256_hex(contents.as_bytes()), bytes: contents.len() });
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }

    fn report(&mut self, name: &str, rep: &TestReport) -> Result<()> {
        self.gate &= rep.passed;
        self.json(name, rep)
    }
}

/// Run the configured experiment in a pool of the configured size. Outputs
/// go to the output directory; the manifest is written last.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = config.worker_count()? {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(|| run_inner(config))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let dir = cfg.out_dir();
    // a stale manifest would mark a failed rerun as complete
    let stale = dir.join(MANIFEST_NAME);
    if stale.exists() {
        std::fs::remove_file(&stale)?;
    }
    let mut out = Outputs { dir, files: Vec::new(), gate: true };
    match cfg.command()? {
        Command::Orbit => orbit(cfg, &mut out)?,
        Command::Density => density(cfg, &mut out)?,
        Command::Tower => tower(cfg, &mut out)?,
        Command::Decompose => decompose(cfg, &mut out)?,
        Command::Coeffs => coeffs(cfg, &mut out)?,
        Command::Moments => moments(cfg, &mut out)?,
        Command::Wip => wip(cfg, &mut out)?,
        Command::Fastslow => fastslow(cfg, &mut out)?,
        Command::Semiflow => semiflow(cfg, &mut out)?,
    }
    let manifest = RunManifest {
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        wall_time_s: start.elapsed().as_secs_f64(),
        gate_passed: out.gate,
        files: out.files.clone(),
    };
    let mut s = serde_json::to_string_pretty(&manifest)?;
    s.push('\n');
    write_atomic(&out.dir, MANIFEST_NAME, s.as_bytes())?;
    Ok(manifest)
}

fn orbit(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.map_spec()?;
    let v = centered_observable(&spec, cfg.obs_name())?;
    let n = cfg.n_single()?;
    let key = StreamKey::new(cfg.seed());
    let mut orbit = start_orbit(&spec, cfg.initial()?, DEFAULT_BURNIN, &key, 0);
    if let Some(x0) = cfg.x0 {
        if !spec.contains(x0) {
            return Err(Error::config("x0", format!("{x0} is outside the map domain")));
        }
        orbit = crate::dynamics::Orbit::new(&spec, x0, key.stream(0, crate::rng::Purpose::Orbit));
    }
    let d = v.dim();
    let mut header = vec!["k".to_string(), "x".to_string()];
    header.extend((0..d).map(|k| format!("v{k}")));
    let mut csv = Csv::new(&header);
    let mut stats = IteratedStats::new(d);
    let mut buf = vec![0.0; d];
    for k in 0..n {
        v.eval(orbit.x(), &mut buf);
        stats.push(&buf);
        let mut row = vec![k.to_string(), fmt_f64(orbit.x())];
        row.extend(buf.iter().map(|x| fmt_f64(*x)));
        csv.row(&row);
        orbit.advance();
    }
    out.write("orbit.csv", csv.finish())?;
    out.json(
        "sums.json",
        &json!({ "n": n, "observable": v.name(), "S": stats.s, "SS": stats.ss, "Q": stats.q, "pair_residual": stats.pair_residual() }),
    )
}

fn density(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.map_spec()?;
    let bins = cfg.bins()?;
    let dens = invariant_density_ulam(&spec, bins)?;
    let mut csv = Csv::new(&["bin_left", "bin_right", "density"]);
    for i in 0..dens.bins() {
        let (a, b) = dens.bin_edges(i);
        csv.row(&[fmt_f64(a), fmt_f64(b), fmt_f64(dens.mass[i] / dens.width())]);
    }
    out.write("density.csv", csv.finish())?;
    let v = Observable::preset(cfg.obs_name())?;
    let ulam_mean = dens.integrate(v.dim(), |x, o| v.eval(x, o));
    let mean = InvariantMean::new(&spec, bins)?.mean(&v);
    out.json(
        "density.json",
        &json!({ "bins": bins, "residual": dens.residual, "iterations": dens.iterations,
                 "observable": v.name(), "mean_ulam": ulam_mean, "mean": mean }),
    )
}

fn tower(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.map_spec()?;
    let scheme = build_induced(&spec, cfg.tau_cap()?)?;
    let t = ulam_p(&scheme, cfg.bins()?)?;
    let mut csv = Csv::new(&["tau", "left", "right", "muY_mass"]);
    for (c, m) in t.cylinder_rows() {
        csv.row(&[c.tau.to_string(), fmt_f64(c.left), fmt_f64(c.right), fmt_f64(m)]);
    }
    out.write("cylinders.csv", csv.finish())?;
    out.json(
        "tower.json",
        &json!({ "bins": t.bins(), "lambda": t.lambda, "tau_bar": t.tau_bar, "tail_mass": t.tail_mass,
                 "p_one_residual": t.p_one_residual, "mu_residual": t.mu_residual,
                 "cylinders": t.cylinder_mass.len() }),
    )
}

fn decompose(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.map_spec()?;
    let v = centered_observable(&spec, cfg.obs_name())?;
    let tc = tower_coefficients(&spec, &v, cfg.bins()?, cfg.tau_cap()?)?;
    out.write("decomposition.csv", tc.decomposition.to_csv(&tc.tower))?;
    let q_grid = cfg.q.clone().unwrap_or_else(|| vec![0.1, 0.5, 1.0, 2.0, 5.0]);
    let diag = hypothesis_diagnostics(
        &tc.tower,
        &tc.decomposition,
        &q_grid,
        &cfg.n_grid()?,
        cfg.samples()?,
        &StreamKey::new(cfg.seed()),
    )?;
    let mut csv = Csv::new(&["q", "tail"]);
    for (q, t) in diag.q_grid.iter().zip(&diag.tail) {
        csv.row(&[fmt_f64(*q), fmt_f64(*t)]);
    }
    out.write("diagnostics.csv", csv.finish())?;
    let dc = &tc.decomposition;
    out.json(
        "decompose.json",
        &json!({ "observable": v.name(), "offset": v.offset(), "series_terms": dc.k,
                 "residual_kernel": dc.residual_kernel, "residual_series": dc.residual_series,
                 "identity_residual": dc.identity_residual, "phi_norm": dc.phi_norm,
                 "estimate": tc.estimate, "diagnostics": diag }),
    )
}

/// Reference `(Σ, E)`: the tower where the map has an inducing scheme, the
/// direct estimator otherwise.
fn reference_coeffs(cfg: &ExperimentConfig, spec: &MapSpec, v: &Observable) -> Result<CoefficientEstimate> {
    match spec.kind() {
        MapKind::Lsv | MapKind::Doubling => Ok(tower_coefficients(spec, v, cfg.bins()?, cfg.tau_cap()?)?.estimate),
        MapKind::Quadratic => {
            direct_coeffs(spec, v, cfg.n_single()?, cfg.samples()?.max(1000), &StreamKey::new(cfg.seed()).derive(7))
        }
    }
}

fn coeffs(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.map_spec()?;
    let v = centered_observable(&spec, cfg.obs_name())?;
    let key = StreamKey::new(cfg.seed());
    let n = cfg.n_single()?;
    let mut all = vec![direct_coeffs(&spec, &v, n, cfg.samples()?, &key)?];
    let orbit_len = cfg.orbit_len.unwrap_or(1_000_000);
    let lag = cfg.max_lag.unwrap_or((orbit_len / 1000).max(1));
    all.push(green_kubo(&spec, &v, lag, orbit_len, &key.derive(1))?);
    if matches!(spec.kind(), MapKind::Lsv | MapKind::Doubling) {
        all.push(tower_coefficients(&spec, &v, cfg.bins()?, cfg.tau_cap()?)?.estimate);
    }
    out.write("coeffs.csv", CoefficientEstimate::to_csv(&all))?;
    let agree: Vec<bool> = all.iter().skip(1).map(|e| e.agrees_with(&all[0], 3.0)).collect();
    out.json("coeffs.json", &json!({ "observable": v.name(), "estimates": all, "agree_with_direct": agree }))
}

fn moments(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.map_spec()?;
    let v = centered_observable(&spec, cfg.obs_name())?;
    let q = cfg.q.clone().unwrap_or_else(|| vec![2.0]);
    let opts = MomentOptions { allow_high_q: cfg.allow_high_q.unwrap_or(false), ..Default::default() };
    let table = moment_table(&spec, &v, &cfg.n_grid()?, &q, cfg.samples()?, cfg.initial()?, cfg.seed(), &opts)?;
    out.write("moments.csv", table.to_csv())?;
    let (fits, note) = if table.n_grid.len() >= 4 {
        (scaling_exponent(&table)?, None)
    } else {
        (Vec::new(), Some("scaling fits need at least 4 n values spanning two decades"))
    };
    out.json("scaling.json", &json!({ "observable": v.name(), "skipped": table.skipped, "fits": fits, "note": note }))
}

fn wip(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.map_spec()?;
    let v = centered_observable(&spec, cfg.obs_name())?;
    let ens = sample_paths(&spec, &v, cfg.n_single()?, cfg.samples()?, &cfg.grid()?, cfg.initial()?, cfg.seed())?;
    let target = reference_coeffs(cfg, &spec, &v)?;
    let mut rep = marginal_normality(&ens, &target.sigma, &target.sigma_stderr)?;
    rep.merge(drift_check(&ens, &target.e, &target.e_stderr)?);
    rep.name = "wip".into();
    rep.notes.push(format!("targets from the {} estimator", target.method.name()));
    out.write("ensemble.csv", ens.to_csv())?;
    out.report("report.json", &rep)?;
    out.json("targets.json", &target)
}

fn fastslow(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.map_spec()?;
    let v = Observable::preset(cfg.obs_name())?;
    let drift = Drift::parse(cfg.drift.as_deref().unwrap_or("linear(-1)"))?;
    let noise = NoiseKind::parse(cfg.noise.as_deref().unwrap_or("additive"))?;
    let xi = cfg.xi.clone().unwrap_or_else(|| vec![0.0; v.dim()]);
    let fs = FastSlowSpec::new(drift.clone(), noise.clone(), v.clone(), xi.clone())?.center(&spec, -10.0, 10.0)?;
    let grid = cfg.grid()?;
    let n = cfg.n_single()?;
    let samples = cfg.samples()?;
    let fast = simulate_fastslow(&fs, &spec, n, samples, &grid, cfg.initial()?, cfg.seed())?;
    // limiting SDE: the given drift with σ = √Σ unless set explicitly
    let sigma = match cfg.sde_sigma {
        Some(s) => s,
        None => {
            if noise != NoiseKind::Additive || v.dim() != 1 {
                return Err(Error::config("sde_sigma", "required unless the noise is additive and scalar"));
            }
            let centered = InvariantMean::new(&spec, cfg.bins()?)?.center(v.clone())?;
            reference_coeffs(cfg, &spec, &centered)?.sigma[0].sqrt()
        }
    };
    let diffusion = match noise {
        NoiseKind::Product => Diffusion::Multiplicative { rows: 1, cols: 1, matrix: vec![sigma] },
        _ => Diffusion::scalar(sigma),
    };
    if xi.len() != 1 {
        return Err(Error::config("xi", "the reference SDE is scalar"));
    }
    let sde = SDESpec::new(drift, diffusion, cfg.h.unwrap_or(1e-3), xi, "drift as configured; diffusion √Σ")?;
    let em = euler_maruyama(&sde, 1.0, samples, &grid, cfg.seed().wrapping_add(1))?;
    let rep = homogenization_compare(&fast, &em)?;
    out.write("fastslow.csv", fast.to_csv())?;
    out.write("sde.csv", em.to_csv())?;
    out.json("sde.json", &sde)?;
    out.report("report.json", &rep)
}

fn semiflow(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let base = cfg.map_spec()?;
    let roof = Roof::parse(cfg.roof.as_deref().unwrap_or("affine(0.5)"))?;
    let susp = SuspensionSpec::new(base, roof, cfg.c0.unwrap_or(0.1))?;
    let v = FlowObservable::preset(cfg.obs_name())?.centered(&susp)?;
    let coeffs = flow_coeffs_tower(&susp, &v, cfg.bins()?)?;
    let n = cfg.n_single()? as f64;
    let (rep, ens) = flow_wip_check(&susp, &v, &coeffs, n, cfg.samples()?, &cfg.grid()?, cfg.seed())?;
    let x0 = cfg.x0.unwrap_or(0.3);
    let state = FlowState::new(&susp, x0, 0.0)?;
    let dt = cfg.dt.unwrap_or(susp.h_inf * DEFAULT_DT_FRACTION);
    let traj = flow_iterated_integrals(&susp, &v, state, cfg.t1.unwrap_or(10.0), dt)?;
    let t_values = cfg.t.clone().unwrap_or_else(|| vec![1e1, 1e2, 1e3, 1e4]);
    let scaling = flow_scaling(&susp, &v, &t_values, cfg.samples()?, cfg.seed().wrapping_add(1))?;
    out.write("flow_ensemble.csv", ens.to_csv())?;
    out.write("trajectory.csv", traj.to_csv())?;
    out.write("flow_scaling.csv", scaling.to_csv())?;
    out.json("flow_coeffs.json", &coeffs)?;
    out.json("flow_scaling.json", &scaling)?;
    out.report("report.json", &rep)
}
