//! Configuration, experiment runners and result files.
//!
//! Every output file carries the crate version and a hash of the effective
//! configuration. CSV files start with `# spinlat <version> config=<hash>`
//! followed by a header row.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::coarse::{bad_box_scan, BadBoxPoint, SideRule};
use crate::currents::{run_corpus, IdentityReport};
use crate::error::{Error, Result};
use crate::gibbs::{wsm_gap, GapEstimate, McmcOptions, WsmMethod};
use crate::graphical::{evolve, sample_arrivals, Observable, PerturbationDetector, RecordOptions};
use crate::influence::{fit_decay, survival_scan, DecayFit, DependenceMethod, SurvivalPoint};
use crate::lattice::{offset_position, Boundary, Geometry, SpinConfig};
use crate::rates::{checkerboard_perturbation, glauber_rates, uniformization_rate, CouplingKernel, RateFamily};
use crate::seeding::replica_seed;
use crate::stats::mean_stderr;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Simulate,
    Wsm,
    Survival,
    Stability,
    Identities,
    Badbox,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::Wsm => "wsm",
            Kind::Survival => "survival",
            Kind::Stability => "stability",
            Kind::Identities => "identities",
            Kind::Badbox => "badbox",
        }
    }

    pub fn parse(s: &str) -> Result<Kind> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| Error::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub dim: usize,
    pub side: usize,
    /// Defaults to the coupling range.
    pub range: Option<usize>,
    #[serde(default = "periodic")]
    pub boundary: Boundary,
}

fn periodic() -> Boundary {
    Boundary::Periodic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub offset: Vec<i64>,
    pub j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub beta: f64,
    #[serde(default)]
    pub h: f64,
    /// Nearest-neighbor coupling, used when `couplings` is absent.
    #[serde(default = "unit")]
    pub j: f64,
    /// One offset of each `±` pair; the kernel is symmetrized.
    pub couplings: Option<Vec<CouplingSpec>>,
    /// Checkerboard perturbation strength.
    #[serde(default)]
    pub delta: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Start {
    #[default]
    Plus,
    Minus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub t_end: f64,
    /// Sample times; defaults to `[t_end]`.
    pub samples: Option<Vec<f64>>,
    #[serde(default)]
    pub start: Start,
    /// Run the checkerboard-perturbed family instead of the Glauber one.
    #[serde(default)]
    pub perturbed: bool,
    /// Write the update log of replica 0.
    #[serde(default)]
    pub events: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsmSpec {
    pub sides: Vec<usize>,
    #[serde(default = "transfer")]
    pub method: WsmMethod,
    pub mcmc: Option<McmcOptions>,
}

fn transfer() -> WsmMethod {
    WsmMethod::Transfer
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalSpec {
    pub horizons: Vec<f64>,
    #[serde(default = "sandwich")]
    pub method: DependenceMethod,
}

fn sandwich() -> DependenceMethod {
    DependenceMethod::Sandwich
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySpec {
    pub horizons: Vec<f64>,
    /// Replicas for the perturbed-family survival estimate; defaults to the
    /// run's replica count.
    pub survival_replicas: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitiesSpec {
    #[serde(default = "corpus_size")]
    pub graphs: usize,
    #[serde(default = "corpus_vertices")]
    pub max_vertices: usize,
}

fn corpus_size() -> usize {
    120
}

fn corpus_vertices() -> usize {
    6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BadboxSpec {
    pub scales: Vec<f64>,
    pub tau0: f64,
    #[serde(default = "linear")]
    pub side_rule: SideRule,
    #[serde(default = "sandwich")]
    pub method: DependenceMethod,
}

fn linear() -> SideRule {
    SideRule::Linear
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<Kind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub format: Format,
    pub geometry: Option<GeometrySpec>,
    pub model: Option<ModelSpec>,
    pub simulate: Option<SimulateSpec>,
    pub wsm: Option<WsmSpec>,
    pub survival: Option<SurvivalSpec>,
    pub stability: Option<StabilitySpec>,
    pub identities: Option<IdentitiesSpec>,
    pub badbox: Option<BadboxSpec>,
}

fn default_replicas() -> usize {
    1000
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fixes the kind, checking it against the file.
    pub fn resolve(mut self, kind: Kind) -> Result<Self> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(Error::Config(format!("config is for '{}', not '{}'", k.name(), kind.name())));
            }
        }
        self.kind = Some(kind);
        let missing = |s: &str| Error::Config(format!("experiment '{}' needs a [{s}] section", kind.name()));
        let need_model = !matches!(kind, Kind::Identities);
        if need_model && self.model.is_none() {
            return Err(missing("model"));
        }
        if matches!(kind, Kind::Simulate | Kind::Survival | Kind::Stability) && self.geometry.is_none() {
            return Err(missing("geometry"));
        }
        let present = match kind {
            Kind::Simulate => self.simulate.is_some(),
            Kind::Wsm => self.wsm.is_some(),
            Kind::Survival => self.survival.is_some(),
            Kind::Stability => self.stability.is_some(),
            Kind::Identities => true,
            Kind::Badbox => self.badbox.is_some(),
        };
        if !present {
            return Err(missing(kind.name()));
        }
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be positive".into()));
        }
        Ok(self)
    }

    fn model(&self) -> &ModelSpec {
        self.model.as_ref().expect("checked by resolve")
    }
}

impl ModelSpec {
    pub fn kernel(&self, dim: usize) -> Result<CouplingKernel> {
        match &self.couplings {
            Some(list) => CouplingKernel::symmetrized(dim, list.iter().map(|c| (c.offset.clone(), c.j)).collect()),
            None => Ok(CouplingKernel::nearest_neighbor(dim, self.j)),
        }
    }
}

/// Glauber family and its checkerboard perturbation on `geom`.
pub fn model_rates(model: &ModelSpec, geom: &Geometry) -> Result<(RateFamily, RateFamily)> {
    let kernel = model.kernel(geom.dim())?;
    if model.delta == 0.0 {
        let c = glauber_rates(&kernel, model.h, model.beta, geom)?;
        return Ok((c.clone(), c));
    }
    let cr = checkerboard_perturbation(&kernel, model.h, model.beta, model.delta, geom)?;
    Ok((cr.c0, cr.c1))
}

fn build_geometry(spec: &GeometrySpec, model: &ModelSpec) -> Result<Geometry> {
    let range = spec.range.unwrap_or(model.kernel(spec.dim)?.range().max(1));
    Geometry::cube(spec.dim, spec.side, range, spec.boundary)
}

/// Where results go and how they are stamped.
pub struct Output {
    dir: PathBuf,
    format: Format,
    stamp: String,
    config_hash: String,
    files: Vec<String>,
    recipes: Vec<Value>,
}

impl Output {
    pub fn new(dir: &Path, format: Format, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Output {
            dir: dir.to_path_buf(),
            format,
            stamp: format!("# spinlat {VERSION} config={config_hash}"),
            config_hash: config_hash.to_string(),
            files: Vec::new(),
            recipes: Vec::new(),
        })
    }

    /// Writes a table as CSV or as a JSON array of row objects.
    pub fn table(&mut self, name: &str, columns: &[&str], rows: &[Vec<Value>]) -> Result<String> {
        let file = match self.format {
            Format::Csv => {
                let mut text = format!("{}\n{}\n", self.stamp, columns.join(","));
                for row in rows {
                    let cells: Vec<String> = row.iter().map(csv_cell).collect();
                    text.push_str(&cells.join(","));
                    text.push('\n');
                }
                let file = format!("{name}.csv");
                fs::write(self.dir.join(&file), text)?;
                file
            }
            Format::Json => {
                let objects: Vec<Value> = rows
                    .iter()
                    .map(|row| Value::Object(columns.iter().map(|c| c.to_string()).zip(row.iter().cloned()).collect()))
                    .collect();
                return self.json(name, &Value::Array(objects));
            }
        };
        self.files.push(file.clone());
        Ok(file)
    }

    /// Writes `{version, config_hash, data}`.
    pub fn json(&mut self, name: &str, data: &Value) -> Result<String> {
        let file = format!("{name}.json");
        let body = json!({ "version": VERSION, "config_hash": self.config_hash, "data": data });
        fs::write(self.dir.join(&file), serde_json::to_string_pretty(&body).expect("json serializes") + "\n")?;
        self.files.push(file.clone());
        Ok(file)
    }

    pub fn recipe(&mut self, file: &str, x: &str, y: &str, yerr: Option<&str>, logy: bool) {
        self.recipes.push(json!({ "file": file, "x": x, "y": y, "yerr": yerr, "logy": logy }));
    }

    fn finish(mut self, config: &ExperimentConfig) -> Result<Vec<String>> {
        let recipes = Value::Array(std::mem::take(&mut self.recipes));
        self.json("plot_recipe", &recipes)?;
        let manifest = json!({
            "kind": config.kind.map(Kind::name),
            "seed": config.seed,
            "replicas": config.replicas,
            "format": config.format,
            "files": self.files,
        });
        self.json("manifest", &manifest)?;
        Ok(self.files)
    }
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Number as a JSON value; non-finite values become strings so they survive
/// both output formats.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

/// What a run produced.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOutcome {
    pub kind: Kind,
    pub config_hash: String,
    pub files: Vec<String>,
    /// Overall verdict for experiments that check something.
    pub pass: Option<bool>,
    pub summary: Value,
}

/// Runs a resolved configuration and writes its outputs into `out`.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let kind = config.kind.ok_or_else(|| Error::Config("experiment kind not set".into()))?;
    let hash = config.hash();
    let mut output = Output::new(out, config.format, &hash)?;
    let (pass, summary) = match kind {
        Kind::Simulate => run_simulate(config, &mut output)?,
        Kind::Wsm => run_wsm(config, &mut output)?,
        Kind::Survival => run_survival(config, &mut output)?,
        Kind::Stability => run_stability(config, &mut output)?,
        Kind::Identities => run_identities(config, &mut output)?,
        Kind::Badbox => run_badbox(config, &mut output)?,
    };
    let files = output.finish(config)?;
    Ok(RunOutcome {
        kind,
        config_hash: hash,
        files,
        pass,
        summary,
    })
}

fn fit_value(fit: &Result<DecayFit>) -> Value {
    match fit {
        Ok(f) => json!({
            "c": num(f.c), "tau": num(f.tau), "se_c": num(f.se_c), "se_tau": num(f.se_tau),
            "r2": num(f.r2), "points": f.points, "dropped_zeros": f.dropped_zeros, "flat": f.flat,
        }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn run_simulate(config: &ExperimentConfig, out: &mut Output) -> Result<(Option<bool>, Value)> {
    let spec = config.simulate.as_ref().expect("checked by resolve");
    let model = config.model();
    let geom = Arc::new(build_geometry(config.geometry.as_ref().expect("checked"), model)?);
    let (c0, c1) = model_rates(model, &geom)?;
    let c = if spec.perturbed { &c1 } else { &c0 };
    let lambda = uniformization_rate(&[&c0, &c1]);
    let mut times = spec.samples.clone().unwrap_or_else(|| vec![spec.t_end]);
    times.sort_by(f64::total_cmp);
    if times.iter().any(|&t| t < 0.0 || t > spec.t_end) {
        return Err(Error::Config("sample times must lie in [0, t_end]".into()));
    }
    let detector = PerturbationDetector::new(&c0, &c1, lambda)?;
    let n = geom.n_sites();
    let start = match spec.start {
        Start::Plus => SpinConfig::all_plus(n),
        Start::Minus => SpinConfig::all_minus(n),
    };
    let runs = (0..config.replicas)
        .into_par_iter()
        .map(|i| {
            let stream = sample_arrivals(geom.clone(), lambda, (0.0, spec.t_end), replica_seed(config.seed, "simulate", i as u64))?;
            let rec = RecordOptions {
                log_events: spec.events && i == 0,
                sample_times: times.clone(),
                observables: vec![Observable::Magnetization],
                perturbation: Some(&detector),
            };
            evolve(start.clone(), c, &stream, &rec).map(|(_, r)| r)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<Value>> = runs
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.samples.iter().map(move |s| vec![json!(i), num(s.time), json!(s.observable), num(s.value)]))
        .collect();
    let file = out.table("samples", &["replica", "time", "observable", "value"], &rows)?;
    out.recipe(&file, "time", "value", None, false);
    if spec.events {
        let ev: Vec<Vec<Value>> = runs[0]
            .events
            .iter()
            .map(|e| vec![num(e.time), json!(e.site), json!(e.old), json!(e.new), num(e.mark), json!(e.perturbation)])
            .collect();
        out.table("events", &["time", "site", "old", "new", "mark", "perturbation"], &ev)?;
    }
    let mut rates_csv = Vec::new();
    c.write_csv(&mut rates_csv)?;
    fs::write(out.dir.join("rates.csv"), format!("{}\n{}", out.stamp, String::from_utf8_lossy(&rates_csv)))?;
    out.files.push("rates.csv".into());
    let means: Vec<Value> = times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let vals: Vec<f64> = runs.iter().map(|r| r.samples[k].value).collect();
            let (m, se) = mean_stderr(&vals);
            json!({ "time": num(t), "magnetization": num(m), "stderr": num(se) })
        })
        .collect();
    let summary = json!({ "lambda": num(lambda), "replicas": config.replicas, "magnetization": means });
    out.json("summary", &summary)?;
    Ok((None, summary))
}

fn run_wsm(config: &ExperimentConfig, out: &mut Output) -> Result<(Option<bool>, Value)> {
    let spec = config.wsm.as_ref().expect("checked by resolve");
    let model = config.model();
    let dim = config.geometry.as_ref().map_or(1, |g| g.dim);
    // β is absorbed into the couplings and the field
    let kernel = model.kernel(dim)?.scaled(model.beta);
    let h = model.beta * model.h;
    let mcmc = spec.mcmc.unwrap_or_default();
    let gaps = spec
        .sides
        .iter()
        .map(|&side| wsm_gap(dim, side, &kernel, h, spec.method, mcmc, replica_seed(config.seed, "wsm", side as u64)))
        .collect::<Result<Vec<GapEstimate>>>()?;
    let rows: Vec<Vec<Value>> = gaps
        .iter()
        .map(|g| vec![json!(g.side), num(g.gap), num(g.stderr), json!(spec.method.name())])
        .collect();
    let file = out.table("wsm", &["side", "gap", "stderr", "method"], &rows)?;
    out.recipe(&file, "side", "gap", Some("stderr"), true);
    let fit = fit_decay(&gaps.iter().map(|g| (g.side as f64, g.gap, g.stderr)).collect::<Vec<_>>());
    out.json("fit", &fit_value(&fit))?;
    Ok((None, json!({ "gaps": rows, "fit": fit_value(&fit) })))
}

fn survival_rows(points: &[SurvivalPoint]) -> Vec<Vec<Value>> {
    points
        .iter()
        .map(|p| vec![num(p.t), num(p.p_hat), num(p.stderr), json!(p.method.name()), json!(p.replicas)])
        .collect()
}

fn run_survival(config: &ExperimentConfig, out: &mut Output) -> Result<(Option<bool>, Value)> {
    let spec = config.survival.as_ref().expect("checked by resolve");
    let model = config.model();
    let geom = build_geometry(config.geometry.as_ref().expect("checked"), model)?;
    let (c0, _) = model_rates(model, &geom)?;
    let points = survival_scan(&c0, &geom, &spec.horizons, config.replicas, spec.method, config.seed)?;
    let file = out.table("survival", &["t", "p_hat", "stderr", "method", "replicas"], &survival_rows(&points))?;
    out.recipe(&file, "t", "p_hat", Some("stderr"), true);
    let fit = fit_decay(&points.iter().map(|p| (p.t, p.p_hat, p.stderr)).collect::<Vec<_>>());
    out.json("fit", &fit_value(&fit))?;
    Ok((None, json!({ "points": survival_rows(&points), "fit": fit_value(&fit) })))
}

/// Gap between the `+` and `−` starts at one time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapPoint {
    pub t: f64,
    pub m_plus: f64,
    pub se_plus: f64,
    pub m_minus: f64,
    pub se_minus: f64,
    pub gap: f64,
    pub gap_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationaryEstimate {
    pub observable: String,
    pub plus: f64,
    pub se_plus: f64,
    pub minus: f64,
    pub se_minus: f64,
}

/// Empirical mixing summary of a rate family.
#[derive(Clone, Debug, Serialize)]
pub struct MixingReport {
    pub epsilon: f64,
    pub lambda: f64,
    pub series: Vec<GapPoint>,
    pub gap_fit: Value,
    pub survival: Vec<SurvivalPoint>,
    pub survival_fit: Value,
    /// Estimates at the last horizon.
    pub stationary: Vec<StationaryEstimate>,
    /// `μ̂⁺ ≥ μ̂⁻` within three standard errors for every observable.
    pub ordered: bool,
}

impl MixingReport {
    /// Whether successive gaps never rise by more than three combined
    /// standard errors.
    pub fn monotone_within_noise(&self) -> bool {
        self.series
            .windows(2)
            .all(|w| w[1].gap <= w[0].gap + 3.0 * (w[0].gap_stderr.powi(2) + w[1].gap_stderr.powi(2)).sqrt())
    }
}

/// Energy per site `−(1/N) Σ_x Σ_{o>0} J_o σ_x σ_{x+o}`.
pub fn energy_density(config: &SpinConfig, geom: &Geometry, kernel: &CouplingKernel) -> f64 {
    let slots: Vec<(usize, f64)> = kernel
        .positive_half()
        .map(|(off, j)| (offset_position(geom.dim(), geom.range(), off).expect("offset within range"), *j))
        .collect();
    let mut e = 0.0;
    for x in 0..geom.n_sites() {
        let sx = f64::from(config.get(x));
        for &(p, j) in &slots {
            let y = geom.slots(x)[p];
            let sy = if y == crate::lattice::EXTERIOR {
                f64::from(geom.boundary().exterior_spin().unwrap_or(0))
            } else {
                f64::from(config.get(y as usize))
            };
            e -= j * sx * sy;
        }
    }
    e / geom.n_sites() as f64
}

/// Evolves the perturbed family from the all-plus and all-minus starts on
/// shared streams and summarizes the approach to stationarity.
#[allow(clippy::too_many_arguments)]
pub fn stability_experiment(
    kernel: &CouplingKernel,
    h: f64,
    beta: f64,
    delta: f64,
    geom: &Geometry,
    horizons: &[f64],
    replicas: usize,
    survival_replicas: usize,
    seed: u64,
) -> Result<MixingReport> {
    let cr = checkerboard_perturbation(kernel, h, beta, delta, geom)?;
    let (c0, c1) = (&cr.c0, &cr.c1);
    if !c0.is_attractive().0 {
        return Err(Error::NotAttractive("stability needs attractive unperturbed rates".into()));
    }
    let mut times: Vec<f64> = horizons.to_vec();
    times.sort_by(f64::total_cmp);
    let top = times.last().copied().unwrap_or(0.0);
    let garc = Arc::new(geom.clone());
    let n = geom.n_sites();
    let per = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let stream = sample_arrivals(garc.clone(), cr.lambda, (0.0, top), replica_seed(seed, "stability", i as u64))?;
            let rec = RecordOptions {
                sample_times: times.clone(),
                observables: vec![Observable::Magnetization],
                ..RecordOptions::default()
            };
            let (fp, rp) = evolve(SpinConfig::all_plus(n), c1, &stream, &rec)?;
            let (fm, rm) = evolve(SpinConfig::all_minus(n), c1, &stream, &rec)?;
            let mp: Vec<f64> = rp.samples.iter().map(|s| s.value).collect();
            let mm: Vec<f64> = rm.samples.iter().map(|s| s.value).collect();
            Ok((mp, mm, energy_density(&fp, geom, kernel), energy_density(&fm, geom, kernel)))
        })
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<GapPoint> = times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let plus: Vec<f64> = per.iter().map(|r| r.0[k]).collect();
            let minus: Vec<f64> = per.iter().map(|r| r.1[k]).collect();
            let diff: Vec<f64> = per.iter().map(|r| r.0[k] - r.1[k]).collect();
            let ((mp, sp), (mm, sm), (g, sg)) = (mean_stderr(&plus), mean_stderr(&minus), mean_stderr(&diff));
            GapPoint {
                t,
                m_plus: mp,
                se_plus: sp,
                m_minus: mm,
                se_minus: sm,
                gap: g,
                gap_stderr: sg,
            }
        })
        .collect();
    let last = series.last().cloned();
    let energy_plus: Vec<f64> = per.iter().map(|r| r.2).collect();
    let energy_minus: Vec<f64> = per.iter().map(|r| r.3).collect();
    let (ep, sep) = mean_stderr(&energy_plus);
    let (em, sem) = mean_stderr(&energy_minus);
    let mut stationary = Vec::new();
    if let Some(l) = &last {
        stationary.push(StationaryEstimate {
            observable: "magnetization".into(),
            plus: l.m_plus,
            se_plus: l.se_plus,
            minus: l.m_minus,
            se_minus: l.se_minus,
        });
        // energy is order-reversing in no particular direction; reported, not ordered
        stationary.push(StationaryEstimate {
            observable: "energy_density".into(),
            plus: ep,
            se_plus: sep,
            minus: em,
            se_minus: sem,
        });
    }
    let ordered = series.iter().all(|p| p.m_plus >= p.m_minus - 3.0 * (p.se_plus.powi(2) + p.se_minus.powi(2)).sqrt());
    let gap_fit = fit_value(&fit_decay(&series.iter().map(|p| (p.t, p.gap, p.gap_stderr)).collect::<Vec<_>>()));
    let survival = survival_scan(c1, geom, &times, survival_replicas, DependenceMethod::Overapprox, replica_seed(seed, "stability/survival", 0))?;
    let survival_fit = fit_value(&fit_decay(&survival.iter().map(|p| (p.t, p.p_hat, p.stderr)).collect::<Vec<_>>()));
    Ok(MixingReport {
        epsilon: cr.epsilon,
        lambda: cr.lambda,
        series,
        gap_fit,
        survival,
        survival_fit,
        stationary,
        ordered,
    })
}

fn run_stability(config: &ExperimentConfig, out: &mut Output) -> Result<(Option<bool>, Value)> {
    let spec = config.stability.as_ref().expect("checked by resolve");
    let model = config.model();
    let geom = build_geometry(config.geometry.as_ref().expect("checked"), model)?;
    let kernel = model.kernel(geom.dim())?;
    let report = stability_experiment(
        &kernel,
        model.h,
        model.beta,
        model.delta,
        &geom,
        &spec.horizons,
        config.replicas,
        spec.survival_replicas.unwrap_or(config.replicas),
        config.seed,
    )?;
    let rows: Vec<Vec<Value>> = report
        .series
        .iter()
        .map(|p| vec![num(p.t), num(p.m_plus), num(p.se_plus), num(p.m_minus), num(p.se_minus), num(p.gap), num(p.gap_stderr)])
        .collect();
    let file = out.table("stability", &["t", "m_plus", "se_plus", "m_minus", "se_minus", "gap", "gap_stderr"], &rows)?;
    out.recipe(&file, "t", "gap", Some("gap_stderr"), true);
    let sfile = out.table("survival", &["t", "p_hat", "stderr", "method", "replicas"], &survival_rows(&report.survival))?;
    out.recipe(&sfile, "t", "p_hat", Some("stderr"), true);
    let value = serde_json::to_value(&report).map_err(|e| Error::Invalid(e.to_string()))?;
    out.json("report", &value)?;
    Ok((Some(report.ordered), value))
}

fn run_identities(config: &ExperimentConfig, out: &mut Output) -> Result<(Option<bool>, Value)> {
    let spec = config.identities.clone().unwrap_or(IdentitiesSpec {
        graphs: corpus_size(),
        max_vertices: corpus_vertices(),
    });
    let reports: Vec<IdentityReport> = run_corpus(spec.graphs, spec.max_vertices, config.seed)?;
    let all = reports.iter().all(|r| r.pass);
    let value = serde_json::to_value(&reports).map_err(|e| Error::Invalid(e.to_string()))?;
    out.json("identities", &value)?;
    let failed = reports.iter().filter(|r| !r.pass).count();
    Ok((Some(all), json!({ "reports": reports.len(), "failed": failed })))
}

fn run_badbox(config: &ExperimentConfig, out: &mut Output) -> Result<(Option<bool>, Value)> {
    let spec = config.badbox.as_ref().expect("checked by resolve");
    let model = config.model();
    let dim = config.geometry.as_ref().map_or(1, |g| g.dim);
    let kernel = model.kernel(dim)?;
    let range = kernel.range().max(1);
    // rates are built on a small even torus; the environments reuse them
    let probe = Geometry::cube(dim, 2 * (2 * range + 1), range, Boundary::Periodic)?;
    let (c0, c1) = model_rates(model, &probe)?;
    let points: Vec<BadBoxPoint> =
        bad_box_scan(dim, &spec.scales, spec.tau0, spec.side_rule, &c0, &c1, config.replicas, spec.method, config.seed)?;
    let rows: Vec<Vec<Value>> = points
        .iter()
        .map(|p| {
            vec![
                num(p.n_scale),
                json!(p.m),
                json!(p.l_box),
                num(p.epsilon),
                num(p.p_bad),
                num(p.stderr),
                num(p.event1_frac),
                num(p.event2_frac),
                num(p.event3_frac),
            ]
        })
        .collect();
    let file = out.table(
        "badbox",
        &["N", "M", "L_box", "epsilon", "p_bad", "stderr", "event1_frac", "event2_frac", "event3_frac"],
        &rows,
    )?;
    out.recipe(&file, "N", "p_bad", Some("stderr"), true);
    let fit = fit_decay(&points.iter().map(|p| (p.n_scale, p.p_bad, p.stderr)).collect::<Vec<_>>());
    out.json("fit", &fit_value(&fit))?;
    Ok((None, json!({ "points": rows, "fit": fit_value(&fit) })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_schema_errors() {
        let e = ExperimentConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn missing_section_is_schema_error() {
        let c = ExperimentConfig::from_toml("seed = 1\n[model]\nbeta = 0.3\n").unwrap();
        assert!(matches!(c.clone().resolve(Kind::Survival), Err(Error::Config(_))));
        let c = ExperimentConfig::from_toml("kind = \"wsm\"\n[model]\nbeta = 0.3\n[wsm]\nsides = [4]\n").unwrap();
        assert!(matches!(c.clone().resolve(Kind::Badbox), Err(Error::Config(_))));
        assert!(c.resolve(Kind::Wsm).is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml("seed = 1\n").unwrap();
        let b = ExperimentConfig::from_toml("seed = 2\n").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::from_toml("seed = 1\n").unwrap().hash());
    }

    #[test]
    fn energy_density_of_uniform_states() {
        let g = Geometry::cube(2, 4, 1, Boundary::Periodic).unwrap();
        let k = CouplingKernel::nearest_neighbor(2, 1.0);
        assert_eq!(energy_density(&SpinConfig::all_plus(16), &g, &k), -2.0);
        let checker = SpinConfig::from_spins(&(0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 1 } else { -1 }).collect::<Vec<_>>());
        assert_eq!(energy_density(&checker, &g, &k), 2.0);
    }

    #[test]
    fn stability_at_time_zero_has_gap_two() {
        let g = Geometry::cube(2, 6, 1, Boundary::Periodic).unwrap();
        let k = CouplingKernel::nearest_neighbor(2, 1.0);
        let r = stability_experiment(&k, 0.0, 0.3, 0.02, &g, &[0.0, 1.0], 20, 10, 1).unwrap();
        assert_eq!(r.series[0].gap, 2.0);
        assert!(r.ordered);
    }

    #[test]
    fn unperturbed_gap_matches_twice_survival() {
        let g = Geometry::cube(1, 16, 1, Boundary::Periodic).unwrap();
        let k = CouplingKernel::nearest_neighbor(1, 1.0);
        let r = stability_experiment(&k, 0.0, 0.3, 0.0, &g, &[1.0], 4000, 1, 2).unwrap();
        let c = glauber_rates(&k, 0.0, 0.3, &g).unwrap();
        let p = &survival_scan(&c, &g, &[1.0], 4000, DependenceMethod::Sandwich, 3).unwrap()[0];
        let gap = &r.series[0];
        let se = (gap.gap_stderr.powi(2) + (2.0 * p.stderr).powi(2)).sqrt();
        assert!((gap.gap - 2.0 * p.p_hat).abs() < 4.0 * se, "gap {} vs 2p {}", gap.gap, 2.0 * p.p_hat);
    }
}
