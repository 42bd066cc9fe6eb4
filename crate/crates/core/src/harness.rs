//! Study orchestration: training snapshots, offline builds for a range of `N`,
//! test-set evaluation, statistics and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::Mesh;
use crate::ocp::{builtin_case, group_norm, solve, CaseName, FieldGroup, NewtonOptions, OcpDefinition, OcpError, TruthSolution};
use crate::quadrature::{build_rule, CcWeighting, Distribution1D, ProductDistribution, QuadratureError, QuadratureRule, RuleKind};
use crate::rom::{project_offline, solve_online, OnlineMode, ReducedBases, ReducedModel, ReducedSolution, RomError};
use crate::wpod::{pod_partitioned, PodBasis, PodError, PodFormulation, PodOptions, SnapshotSet};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training solve failed: {0}")]
    Training(OcpError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Pod(#[from] PodError),
    #[error(transparent)]
    Rom(#[from] RomError),
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Where the mesh comes from: a structured analog with `cells × cells` squares, or a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    #[serde(default = "default_cells")]
    pub cells: usize,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_cells() -> usize {
    32
}

impl Default for MeshSpec {
    fn default() -> Self {
        Self {
            cells: default_cells(),
            path: None,
        }
    }
}

impl MeshSpec {
    pub fn build(&self, case: CaseName) -> Result<Mesh, HarnessError> {
        match &self.path {
            Some(p) => Ok(Mesh::load(p)?),
            None => Ok(case.analog_mesh(self.cells)?),
        }
    }
}

/// Law of one parameter component, resolved against the case's parameter box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistSpec {
    Uniform,
    Beta { a: f64, b: f64 },
    Loguniform,
}

impl std::str::FromStr for DistSpec {
    type Err = String;

    /// `uniform`, `beta:a:b` or `loguniform`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["uniform"] => Ok(DistSpec::Uniform),
            ["loguniform"] => Ok(DistSpec::Loguniform),
            ["beta", a, b] => {
                let a = a.parse().map_err(|_| format!("bad beta shape `{a}`"))?;
                let b = b.parse().map_err(|_| format!("bad beta shape `{b}`"))?;
                Ok(DistSpec::Beta { a, b })
            }
            _ => Err(format!("unknown distribution `{s}` (uniform|beta:a:b|loguniform)")),
        }
    }
}

impl DistSpec {
    pub fn resolve(&self, (lo, hi): (f64, f64)) -> Result<Distribution1D, QuadratureError> {
        match *self {
            DistSpec::Uniform => Distribution1D::uniform(lo, hi),
            DistSpec::Beta { a, b } => Distribution1D::beta(a, b, lo, hi),
            DistSpec::Loguniform => Distribution1D::loguniform(lo, hi),
        }
    }
}

/// Product law over the case's box; one spec is broadcast to all components.
pub fn resolve_distribution(specs: &[DistSpec], parameter_box: &[(f64, f64)]) -> Result<ProductDistribution, HarnessError> {
    let specs: Vec<DistSpec> = match specs.len() {
        0 => vec![DistSpec::Uniform; parameter_box.len()],
        1 => vec![specs[0]; parameter_box.len()],
        n if n == parameter_box.len() => specs.to_vec(),
        n => {
            return Err(HarnessError::Config(format!(
                "{n} distributions given for {} parameters",
                parameter_box.len()
            )))
        }
    };
    let comps = specs
        .iter()
        .zip(parameter_box)
        .map(|(s, &b)| s.resolve(b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProductDistribution::new(comps)?)
}

/// JSON study configuration. Every key except `case` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub case: CaseName,
    #[serde(default)]
    pub mesh: MeshSpec,
    /// Empty means uniform in every component.
    #[serde(default)]
    pub distribution: Vec<DistSpec>,
    #[serde(default = "default_rule")]
    pub training_rule: RuleKind,
    /// Node count for sampled rules, nodes per dimension for tensor rules.
    #[serde(default = "default_size")]
    pub training_size: usize,
    #[serde(default)]
    pub cc_weighting: CcWeighting,
    #[serde(default = "default_size")]
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_values")]
    pub n_values: Vec<usize>,
    #[serde(default = "default_true")]
    pub aggregated: bool,
    #[serde(default)]
    pub pod: PodFormulation,
    #[serde(default)]
    pub nl_mode: OnlineMode,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub newton: NewtonOptions,
    #[serde(default)]
    pub pod_options: PodOptions,
    /// Time truth and reduced solves at test points (sequential).
    #[serde(default = "default_true")]
    pub timing: bool,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_rule() -> RuleKind {
    RuleKind::MonteCarlo
}
fn default_size() -> usize {
    100
}
fn default_n_values() -> Vec<usize> {
    (1..=20).collect()
}
fn default_true() -> bool {
    true
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

impl StudyConfig {
    pub fn new(case: CaseName) -> Self {
        serde_json::from_value(serde_json::json!({ "case": case })).expect("defaults deserialize")
    }

    /// Small profile: 30 training points, 20 test points.
    pub fn smoke(case: CaseName) -> Self {
        Self {
            training_size: 30,
            test_size: 20,
            ..Self::new(case)
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.training_size == 0 || self.test_size == 0 {
            return Err(HarnessError::Config("training and test sizes must be at least 1".into()));
        }
        if self.n_values.contains(&0) {
            return Err(HarnessError::Config("N values must be at least 1".into()));
        }
        if self.mesh.path.is_none() && self.mesh.cells == 0 {
            return Err(HarnessError::Config("mesh needs at least one cell".into()));
        }
        Ok(())
    }

    /// Seed of the test sample; a separate stream from any training draw.
    pub fn test_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}

/// Builds the case, applying overrides.
pub fn build_definition(cfg: &StudyConfig) -> Result<OcpDefinition, HarnessError> {
    let mesh = cfg.mesh.build(cfg.case)?;
    let mut def = builtin_case(cfg.case, &mesh)?;
    if let Some(a) = cfg.alpha {
        if !(a > 0.0) {
            return Err(HarnessError::Config(format!("alpha must be positive, got {a}")));
        }
        def.alpha = a;
    }
    Ok(def)
}

pub fn training_rule(cfg: &StudyConfig, dist: &ProductDistribution) -> Result<QuadratureRule, HarnessError> {
    Ok(build_rule(cfg.training_rule, dist, cfg.training_size, cfg.seed, cfg.cc_weighting)?)
}

pub fn test_sample(cfg: &StudyConfig, dist: &ProductDistribution) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.test_seed());
    (0..cfg.test_size).map(|_| dist.sample(&mut rng)).collect()
}

/// Relative errors at one test parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub n: usize,
    pub mu: Vec<f64>,
    pub e_y: f64,
    pub e_u: f64,
    pub e_p: f64,
    pub e_j: f64,
    /// Fields whose truth norm was zero, so the error is absolute.
    pub absolute: Vec<String>,
    pub speedup: Option<f64>,
}

fn relative(diff: f64, reference: f64, name: &str, absolute: &mut Vec<String>) -> f64 {
    if reference > 0.0 {
        diff / reference
    } else {
        absolute.push(name.to_string());
        diff
    }
}

/// Errors in the field norms of `def`; `J` error is `|J − J_N| / |J|`.
pub fn compute_relative_errors(
    def: &OcpDefinition,
    n: usize,
    truth: &TruthSolution,
    reduced: &ReducedSolution,
) -> ErrorRecord {
    let mut absolute = Vec::new();
    let mut err = |g: FieldGroup, t: &[f64], r: &[f64], name: &str| {
        let d: Vec<f64> = t.iter().zip(r).map(|(a, b)| a - b).collect();
        relative(group_norm(def, g, &d), group_norm(def, g, t), name, &mut absolute)
    };
    let e_y = err(FieldGroup::State, &truth.y, &reduced.y, "y");
    let e_u = err(FieldGroup::Control, &truth.u, &reduced.u, "u");
    let e_p = err(FieldGroup::Adjoint, &truth.p, &reduced.p, "p");
    let e_j = relative(
        (truth.objective - reduced.objective).abs(),
        truth.objective.abs(),
        "J",
        &mut absolute,
    );
    ErrorRecord {
        n,
        mu: truth.mu.clone(),
        e_y,
        e_u,
        e_p,
        e_j,
        absolute,
        speedup: None,
    }
}

/// Mean and unbiased standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Relative errors below this are roundoff; exact zeros would otherwise dominate log means.
pub const ERROR_FLOOR: f64 = f64::EPSILON;

/// `log10` of an error clamped at `ERROR_FLOOR`.
pub fn log10_error(e: f64) -> f64 {
    e.max(ERROR_FLOOR).log10()
}

pub const FIELDS: [&str; 4] = ["y", "u", "p", "J"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean_log10: f64,
    pub std_log10: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupStats {
    pub avg: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NSummary {
    pub n: usize,
    pub system_size: usize,
    /// In `FIELDS` order.
    pub fields: Vec<FieldStats>,
    pub speedup: Option<SpeedupStats>,
    pub failures: usize,
}

impl NSummary {
    pub fn field(&self, name: &str) -> FieldStats {
        let i = FIELDS.iter().position(|f| *f == name).expect("known field");
        self.fields[i]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub n: usize,
    pub mu: Vec<f64>,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub truth_dims: (usize, usize, usize),
    pub training_nodes: usize,
    pub training_note: String,
    /// Per field: `(group, name, eigenvalues)`.
    pub eigenvalues: Vec<(FieldGroup, String, Vec<f64>)>,
    pub summaries: Vec<NSummary>,
    pub records: Vec<ErrorRecord>,
    pub failures: Vec<Failure>,
    pub test_truth_failures: Vec<Failure>,
}

impl StudyReport {
    pub fn summary(&self, n: usize) -> Option<&NSummary> {
        self.summaries.iter().find(|s| s.n == n)
    }
}

/// Snapshot sets per field, in layout order (state, control, adjoint).
pub fn snapshot_sets(def: &OcpDefinition, solutions: &[TruthSolution], weights: &[f64]) -> Result<Vec<SnapshotSet>, HarnessError> {
    let mut sets = Vec::new();
    for g in [FieldGroup::State, FieldGroup::Control, FieldGroup::Adjoint] {
        for f in def.layout.group(g) {
            let cols: Vec<Vec<f64>> = solutions.iter().map(|s| f.slice(s.group(g)).to_vec()).collect();
            sets.push(SnapshotSet::new(&cols, weights.to_vec(), f.norm.clone())?);
        }
    }
    Ok(sets)
}

/// Parallel truth solves at the rule nodes; the first failure aborts.
pub fn training_snapshots(def: &OcpDefinition, rule: &QuadratureRule, opts: &NewtonOptions) -> Result<Vec<TruthSolution>, HarnessError> {
    rule.nodes
        .par_iter()
        .map(|mu| solve(def, mu, opts))
        .collect::<Result<Vec<_>, _>>()
        .map_err(HarnessError::Training)
}

/// Weighted POD per field with up to `n_max` modes each.
pub fn field_bases(
    def: &OcpDefinition,
    sets: &[SnapshotSet],
    n_max: usize,
    pod: PodFormulation,
    opts: &PodOptions,
) -> Result<Vec<PodBasis>, HarnessError> {
    let n = vec![n_max; def.layout.state.len() + def.layout.control.len() + def.layout.adjoint.len()];
    Ok(pod_partitioned(sets, &n, pod, opts)?)
}

/// Truncates each field basis to `n` and builds the reduced bases.
pub fn bases_at(def: &OcpDefinition, pods: &[PodBasis], n: usize, aggregated: bool) -> Result<ReducedBases, HarnessError> {
    let ns = def.layout.state.len();
    let nc = def.layout.control.len();
    let take = |r: std::ops::Range<usize>| -> Vec<DMatrix<f64>> { pods[r].iter().map(|b| b.truncate(n).vectors).collect() };
    Ok(ReducedBases::new(
        def,
        take(0..ns),
        take(ns..ns + nc),
        take(ns + nc..pods.len()),
        aggregated,
    )?)
}

/// Training solves, POD and projection with `n` modes per field.
pub fn build_offline(cfg: &StudyConfig, def: &OcpDefinition, n: usize) -> Result<(ReducedModel, Vec<PodBasis>), HarnessError> {
    let dist = resolve_distribution(&cfg.distribution, &def.parameter_box)?;
    let rule = training_rule(cfg, &dist)?;
    let train = training_snapshots(def, &rule, &cfg.newton)?;
    let sets = snapshot_sets(def, &train, &rule.weights)?;
    let pods = field_bases(def, &sets, n, cfg.pod, &cfg.pod_options)?;
    let bases = bases_at(def, &pods, n, cfg.aggregated)?;
    Ok((project_offline(def, bases, cfg.nl_mode)?, pods))
}

fn timed_truth(def: &OcpDefinition, mu: &[f64], opts: &NewtonOptions) -> (Result<TruthSolution, OcpError>, f64) {
    let t0 = Instant::now();
    let r = solve(def, mu, opts);
    (r, t0.elapsed().as_secs_f64())
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport, HarnessError> {
    cfg.validate()?;
    let def = build_definition(cfg)?;
    run_study_with(cfg, &def)
}

/// As `run_study` with an already built problem.
pub fn run_study_with(cfg: &StudyConfig, def: &OcpDefinition) -> Result<StudyReport, HarnessError> {
    cfg.validate()?;
    let dist = resolve_distribution(&cfg.distribution, &def.parameter_box)?;
    let rule = training_rule(cfg, &dist)?;
    log::info!("{}: {} training nodes ({})", def.name, rule.len(), rule.note);
    let train = training_snapshots(def, &rule, &cfg.newton)?;
    let sets = snapshot_sets(def, &train, &rule.weights)?;
    let n_max = cfg.n_values.iter().copied().max().unwrap_or(0);
    let pods = field_bases(def, &sets, n_max.max(1), cfg.pod, &cfg.pod_options)?;
    let names: Vec<(FieldGroup, String)> = [FieldGroup::State, FieldGroup::Control, FieldGroup::Adjoint]
        .iter()
        .flat_map(|&g| def.layout.group(g).iter().map(move |f| (g, f.name.clone())))
        .collect();
    let eigenvalues = names
        .into_iter()
        .zip(&pods)
        .map(|((g, n), b)| (g, n, b.eigenvalues.clone()))
        .collect();

    let test_mu = test_sample(cfg, &dist);
    let mut truths: Vec<Option<(TruthSolution, f64)>> = Vec::with_capacity(test_mu.len());
    let mut test_truth_failures = Vec::new();
    if cfg.timing {
        if let Some(mu) = test_mu.first() {
            let _ = solve(def, mu, &cfg.newton);
        }
        for mu in &test_mu {
            match timed_truth(def, mu, &cfg.newton) {
                (Ok(s), t) => truths.push(Some((s, t))),
                (Err(e), _) => {
                    test_truth_failures.push(Failure { n: 0, mu: mu.clone(), message: e.to_string() });
                    truths.push(None);
                }
            }
        }
    } else {
        let solved: Vec<_> = test_mu.par_iter().map(|mu| solve(def, mu, &cfg.newton)).collect();
        for (mu, r) in test_mu.iter().zip(solved) {
            match r {
                Ok(s) => truths.push(Some((s, 0.0))),
                Err(e) => {
                    test_truth_failures.push(Failure { n: 0, mu: mu.clone(), message: e.to_string() });
                    truths.push(None);
                }
            }
        }
    }

    let mut summaries = Vec::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &n in &cfg.n_values {
        let bases = bases_at(def, &pods, n, cfg.aggregated)?;
        let model = project_offline(def, bases, cfg.nl_mode)?;
        let online = |mu: &[f64]| solve_online(&model, Some(def), mu, &cfg.newton);
        let results: Vec<Option<Result<ReducedSolution, RomError>>> = if cfg.timing {
            if let Some(mu) = test_mu.first() {
                let _ = online(mu);
            }
            truths.iter().zip(&test_mu).map(|(t, mu)| t.as_ref().map(|_| online(mu))).collect()
        } else {
            truths
                .par_iter()
                .zip(&test_mu)
                .map(|(t, mu)| t.as_ref().map(|_| online(mu)))
                .collect()
        };
        let mut recs = Vec::new();
        let mut fails = 0;
        for ((t, mu), r) in truths.iter().zip(&test_mu).zip(results) {
            let Some((truth, truth_time)) = t else { continue };
            match r.expect("solved where truth exists") {
                Ok(red) => {
                    let mut rec = compute_relative_errors(def, n, truth, &red);
                    if cfg.timing {
                        rec.speedup = Some(truth_time / red.online_time.max(1e-9));
                    }
                    recs.push(rec);
                }
                Err(e) => {
                    fails += 1;
                    failures.push(Failure { n, mu: mu.clone(), message: e.to_string() });
                }
            }
        }
        summaries.push(summarize(n, model.system_size(), &recs, fails));
        records.extend(recs);
    }

    Ok(StudyReport {
        config: cfg.clone(),
        truth_dims: def.dims(),
        training_nodes: rule.len(),
        training_note: rule.note.clone(),
        eigenvalues,
        summaries,
        records,
        failures,
        test_truth_failures,
    })
}

pub fn summarize(n: usize, system_size: usize, recs: &[ErrorRecord], failures: usize) -> NSummary {
    let stat = |f: fn(&ErrorRecord) -> f64| {
        let logs: Vec<f64> = recs.iter().map(|r| log10_error(f(r))).collect();
        let (mean_log10, std_log10) = mean_std(&logs);
        FieldStats { mean_log10, std_log10 }
    };
    let fields = vec![stat(|r| r.e_y), stat(|r| r.e_u), stat(|r| r.e_p), stat(|r| r.e_j)];
    let s: Vec<f64> = recs.iter().filter_map(|r| r.speedup).collect();
    let speedup = (!s.is_empty()).then(|| {
        let (avg, std) = mean_std(&s);
        SpeedupStats {
            avg,
            min: s.iter().copied().fold(f64::INFINITY, f64::min),
            max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            std,
        }
    });
    NSummary {
        n,
        system_size,
        fields,
        speedup,
        failures,
    }
}

fn num(v: f64) -> String {
    format!("{v:.10e}")
}

/// Writes `errors.csv`, `speedup.csv`, `eigenvalues.csv`, `records.csv` and `manifest.json`.
/// Everything except `speedup.csv` depends only on the configuration.
pub fn emit_results(report: &StudyReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<(), HarnessError> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };

    let mut errors = String::from("N,field,mean_log10,std_log10\n");
    for s in &report.summaries {
        for (f, st) in FIELDS.iter().zip(&s.fields) {
            writeln!(errors, "{},{},{},{}", s.n, f, num(st.mean_log10), num(st.std_log10)).unwrap();
        }
    }
    put("errors.csv", errors)?;

    let mut speedup = String::from("N,avg,min,max,std\n");
    for s in &report.summaries {
        if let Some(sp) = s.speedup {
            writeln!(speedup, "{},{:.3},{:.3},{:.3},{:.3}", s.n, sp.avg, sp.min, sp.max, sp.std).unwrap();
        }
    }
    put("speedup.csv", speedup)?;

    let mut eig = String::from("group,field,index,eigenvalue\n");
    for (g, name, vals) in &report.eigenvalues {
        for (i, v) in vals.iter().enumerate() {
            writeln!(eig, "{},{},{},{}", serde_json::to_string(g)?.trim_matches('"'), name, i + 1, num(*v)).unwrap();
        }
    }
    put("eigenvalues.csv", eig)?;

    let mut rec = String::from("N,mu,e_y,e_u,e_p,e_J,absolute\n");
    for r in &report.records {
        let mu: Vec<String> = r.mu.iter().map(|m| format!("{m:.12e}")).collect();
        writeln!(
            rec,
            "{},{},{},{},{},{},{}",
            r.n,
            mu.join(";"),
            num(r.e_y),
            num(r.e_u),
            num(r.e_p),
            num(r.e_j),
            r.absolute.join(";")
        )
        .unwrap();
    }
    put("records.csv", rec)?;

    let manifest = serde_json::json!({
        "config": report.config,
        "truth_dims": report.truth_dims,
        "training_nodes": report.training_nodes,
        "training_note": report.training_note,
        "system_sizes": report.summaries.iter().map(|s| (s.n, s.system_size)).collect::<Vec<_>>(),
        "reduced_failures": report.failures,
        "test_truth_failures": report.test_truth_failures,
        "timing_note": "speedup-index = truth solve time / reduced solve time; machine dependent",
    });
    put("manifest.json", serde_json::to_string_pretty(&manifest)?)?;
    Ok(written)
}
