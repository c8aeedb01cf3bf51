//! Experiment harness: convergence study, structural counts and the crane
//! benchmark, with CSV/JSON writers and property checks.

use std::f64::consts::FRAC_PI_3;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{CollocationScheme, PointFamily};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::integrator::{convergence_study, ConvergenceRow, Method};
use crate::model::library::ForcedOscillator;
use crate::model::{make_crane_ocp, CraneParams, Ivp};
use crate::nlpsolve::{objective_error, solve, SolveOptions, SolveStatus};
use crate::transcribe::{transcribe, Blocks, ClosedFormCounts};

/// Default generator seed.
pub const DEFAULT_SEED: u64 = 20_240_917;

/// Errors are floored here before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-16;

/// One transcription to run: method, point family and number of points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub family: PointFamily,
    pub d: usize,
}

impl RunConfig {
    pub fn new(method: Method, family: PointFamily, d: usize) -> Self {
        Self { method, family, d }
    }

    /// `method-family-d`, e.g. `pc-gauss-3`.
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.method, self.family, self.d)
    }

    pub fn scheme(&self) -> Result<CollocationScheme> {
        CollocationScheme::new(self.family, self.d)
    }
}

impl std::fmt::Display for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// Every method and family at `d ∈ {2, 3}`.
pub fn default_configs() -> Vec<RunConfig> {
    let mut out = Vec::new();
    for d in [2, 3] {
        for family in [PointFamily::RadauIIA, PointFamily::GaussLegendre] {
            for method in [Method::Standard, Method::PositionBased] {
                out.push(RunConfig::new(method, family, d));
            }
        }
    }
    out
}

/// Published geometric-mean objective errors on the crane batch, used as
/// one-decade targets.
pub const BASELINE_ERRORS: [(Method, PointFamily, usize, f64); 8] = [
    (Method::Standard, PointFamily::RadauIIA, 2, 4.5e-2),
    (Method::Standard, PointFamily::GaussLegendre, 2, 3.0e-3),
    (Method::Standard, PointFamily::RadauIIA, 3, 1.2e-3),
    (Method::Standard, PointFamily::GaussLegendre, 3, 5.6e-5),
    (Method::PositionBased, PointFamily::RadauIIA, 2, 2.5e-3),
    (Method::PositionBased, PointFamily::GaussLegendre, 2, 2.7e-3),
    (Method::PositionBased, PointFamily::RadauIIA, 3, 4.6e-4),
    (Method::PositionBased, PointFamily::GaussLegendre, 3, 6.3e-5),
];

pub fn baseline_error(cfg: RunConfig) -> Option<f64> {
    BASELINE_ERRORS
        .iter()
        .find(|(m, f, d, _)| *m == cfg.method && *f == cfg.family && *d == cfg.d)
        .map(|e| e.3)
}

/// Initial crane configuration `(r0, θ0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub r0: f64,
    #[serde(rename = "theta0")]
    pub theta0: f64,
}

/// Sampling box for `(r0, θ0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceBox {
    pub r0: [f64; 2],
    pub theta0: [f64; 2],
}

impl Default for InstanceBox {
    fn default() -> Self {
        Self {
            r0: [-3.0, 3.0],
            theta0: [-FRAC_PI_3, FRAC_PI_3],
        }
    }
}

impl InstanceBox {
    pub fn contains(&self, inst: &Instance) -> bool {
        (self.r0[0]..=self.r0[1]).contains(&inst.r0) && (self.theta0[0]..=self.theta0[1]).contains(&inst.theta0)
    }
}

/// Draws `n` instances uniformly from the box with ChaCha8 seeded by `seed`.
pub fn sample_instances(seed: u64, n: usize, bx: &InstanceBox) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Instance {
            r0: rng.gen_range(bx.r0[0]..=bx.r0[1]),
            theta0: rng.gen_range(bx.theta0[0]..=bx.theta0[1]),
        })
        .collect()
}

/// Crane batch configuration, read from JSON.
///
/// Crane parameters sit at the top level (`r_min`, `r_max`, `T`, `beta`, `a`,
/// `N`); an explicit `instances` list replaces sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_instances: usize,
    #[serde(rename = "box")]
    pub instance_box: InstanceBox,
    #[serde(flatten)]
    pub crane: CraneParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<Instance>>,
    pub configs: Vec<RunConfig>,
    pub reference: RunConfig,
    pub solver: SolveOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            n_instances: 200,
            instance_box: InstanceBox::default(),
            crane: CraneParams::default(),
            instances: None,
            configs: default_configs(),
            reference: RunConfig::new(Method::Standard, PointFamily::GaussLegendre, 5),
            solver: SolveOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 {
            return Err(Error::Config("n_instances must be at least 1".into()));
        }
        let bx = &self.instance_box;
        for (name, [lo, hi]) in [("r0", bx.r0), ("theta0", bx.theta0)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("box bounds for {name} must be finite and ordered")));
            }
        }
        if let Some(list) = &self.instances {
            if list.is_empty() {
                return Err(Error::Config("instances list is empty".into()));
            }
        }
        if self.configs.is_empty() {
            return Err(Error::Config("no configurations to run".into()));
        }
        for c in self.configs.iter().chain(std::iter::once(&self.reference)) {
            c.scheme()?;
        }
        self.crane.validate()?;
        self.solver.validate()
    }

    /// The explicit instance list, or `n_instances` seeded draws.
    pub fn instances(&self) -> Vec<Instance> {
        match &self.instances {
            Some(list) => list.clone(),
            None => sample_instances(self.seed, self.n_instances, &self.instance_box),
        }
    }
}

/// One solve of one instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CraneRow {
    pub instance: usize,
    pub config: RunConfig,
    pub objective: f64,
    /// `v − v_ref`; `None` when either solve failed.
    pub error: Option<f64>,
    pub iterations: usize,
    /// `None` for untimed reference solves.
    pub ms_per_iter: Option<f64>,
    /// Solver status, or `error` when the solve could not start.
    pub status: String,
}

impl CraneRow {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal.as_str()
    }
}

/// Per-configuration aggregate over the batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub config: RunConfig,
    pub solved: usize,
    pub failures: usize,
    pub geomean_abs_error: Option<f64>,
    pub mean_ms_per_iter: Option<f64>,
    pub mean_iterations: Option<f64>,
    pub baseline_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraneBatch {
    pub instances: Vec<Instance>,
    pub reference: Vec<CraneRow>,
    pub rows: Vec<CraneRow>,
    pub summary: Vec<SummaryRow>,
    pub kkt_tol: f64,
}

struct Outcome {
    objective: f64,
    iterations: usize,
    ms_per_iter: f64,
    status: String,
}

fn solve_instance(inst: Instance, cfg: RunConfig, crane: CraneParams, opts: &SolveOptions) -> Outcome {
    let run = || -> Result<Outcome> {
        let ocp = make_crane_ocp(inst.r0, inst.theta0, crane)?;
        let scheme = cfg.scheme()?;
        let nlp = transcribe(&ocp, cfg.method, &scheme)?;
        let guess = nlp.initial_guess();
        let rep = solve(&nlp, &guess, opts)?;
        Ok(Outcome {
            objective: rep.objective,
            iterations: rep.iterations,
            ms_per_iter: rep.ms_per_iter,
            status: rep.status.as_str().to_string(),
        })
    };
    run().unwrap_or(Outcome {
        objective: f64::NAN,
        iterations: 0,
        ms_per_iter: f64::NAN,
        status: "error".into(),
    })
}

/// Geometric mean of `|e|`, each floored at [`LOG_FLOOR`].
pub fn geometric_mean_abs(errors: &[f64]) -> Option<f64> {
    if errors.is_empty() {
        return None;
    }
    let s: f64 = errors.iter().map(|e| e.abs().max(LOG_FLOOR).ln()).sum();
    Some((s / errors.len() as f64).exp())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Solves every instance with the reference (untimed, on `exec`) and then
/// every configuration (timed, serially), and aggregates per configuration.
pub fn run_crane_batch(cfg: &ExperimentConfig, exec: Execution) -> Result<CraneBatch> {
    cfg.validate()?;
    let instances = cfg.instances();
    let indexed: Vec<(usize, Instance)> = instances.iter().copied().enumerate().collect();
    let opts = SolveOptions {
        record_log: false,
        ..cfg.solver
    };

    let reference: Vec<CraneRow> = exec::map(exec, &indexed, |&(i, inst)| {
        let out = solve_instance(inst, cfg.reference, cfg.crane, &opts);
        let ok = out.status == SolveStatus::Optimal.as_str();
        CraneRow {
            instance: i,
            config: cfg.reference,
            objective: out.objective,
            error: ok.then(|| objective_error(out.objective, out.objective)),
            iterations: out.iterations,
            ms_per_iter: None,
            status: out.status,
        }
    });

    let mut rows = Vec::with_capacity(instances.len() * cfg.configs.len());
    for &(i, inst) in &indexed {
        let v_ref = reference[i].is_optimal().then_some(reference[i].objective);
        for &c in &cfg.configs {
            let out = solve_instance(inst, c, cfg.crane, &opts);
            let ok = out.status == SolveStatus::Optimal.as_str();
            rows.push(CraneRow {
                instance: i,
                config: c,
                objective: out.objective,
                error: v_ref.filter(|_| ok).map(|r| objective_error(out.objective, r)),
                iterations: out.iterations,
                ms_per_iter: out.ms_per_iter.is_finite().then_some(out.ms_per_iter),
                status: out.status,
            });
        }
    }

    let summary = cfg
        .configs
        .iter()
        .map(|&c| {
            let mine: Vec<&CraneRow> = rows.iter().filter(|r| r.config == c).collect();
            let solved: Vec<&&CraneRow> = mine.iter().filter(|r| r.is_optimal()).collect();
            let errors: Vec<f64> = mine.iter().filter_map(|r| r.error).collect();
            let times: Vec<f64> = solved.iter().filter_map(|r| r.ms_per_iter).collect();
            let iters: Vec<f64> = solved.iter().map(|r| r.iterations as f64).collect();
            SummaryRow {
                config: c,
                solved: solved.len(),
                failures: mine.len() - solved.len(),
                geomean_abs_error: geometric_mean_abs(&errors),
                mean_ms_per_iter: mean(&times),
                mean_iterations: mean(&iters),
                baseline_error: baseline_error(c),
            }
        })
        .collect();

    Ok(CraneBatch {
        instances,
        reference,
        rows,
        summary,
        kkt_tol: opts.kkt_tol,
    })
}

fn opt_float(v: Option<f64>, fmt: impl Fn(f64) -> String) -> String {
    v.map(fmt).unwrap_or_default()
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

/// Per-solve CSV: reference rows first, then configured rows.
pub fn write_crane_csv<W: Write>(batch: &CraneBatch, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record([
        "instance",
        "method",
        "d",
        "family",
        "objective",
        "error",
        "iterations",
        "ms_per_iter",
        "status",
    ])?;
    for r in batch.reference.iter().chain(&batch.rows) {
        w.write_record([
            r.instance.to_string(),
            r.config.method.to_string(),
            r.config.d.to_string(),
            r.config.family.to_string(),
            if r.objective.is_finite() { r.objective.to_string() } else { String::new() },
            opt_float(r.error, |e| format!("{e:e}")),
            r.iterations.to_string(),
            opt_float(r.ms_per_iter, |t| format!("{t:.6}")),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-configuration aggregates in the same method/family/d layout.
pub fn write_summary_csv<W: Write>(batch: &CraneBatch, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record([
        "method",
        "d",
        "family",
        "geomean_abs_error",
        "mean_ms_per_iter",
        "mean_iterations",
        "solved",
        "failures",
        "baseline_error",
    ])?;
    for s in &batch.summary {
        w.write_record([
            s.config.method.to_string(),
            s.config.d.to_string(),
            s.config.family.to_string(),
            opt_float(s.geomean_abs_error, |e| format!("{e:e}")),
            opt_float(s.mean_ms_per_iter, |t| format!("{t:.6}")),
            opt_float(s.mean_iterations, |n| format!("{n:.2}")),
            s.solved.to_string(),
            s.failures.to_string(),
            opt_float(s.baseline_error, |e| format!("{e:e}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter points `(label, log10 |error|, ms_per_iter)` for every successful
/// configured solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub label: String,
    pub log10_abs_error: f64,
    pub ms_per_iter: f64,
}

pub fn pareto_points(batch: &CraneBatch) -> Vec<ParetoPoint> {
    batch
        .rows
        .iter()
        .filter_map(|r| {
            let e = r.error?;
            let t = r.ms_per_iter?;
            Some(ParetoPoint {
                label: r.config.label(),
                log10_abs_error: e.abs().max(LOG_FLOOR).log10(),
                ms_per_iter: t,
            })
        })
        .collect()
}

pub fn write_pareto_csv<W: Write>(points: &[ParetoPoint], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["label", "log10_abs_error", "ms_per_iter"])?;
    for p in points {
        w.write_record([p.label.clone(), format!("{:.6}", p.log10_abs_error), format!("{:.6}", p.ms_per_iter)])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Thresholds for [`crane_checks`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CraneThresholds {
    /// Minimum fraction of instances that must reach the KKT tolerance.
    pub solved_fraction: f64,
    /// Allowed `|v_PC − v_SC|` at `d = 3`.
    pub method_gap: f64,
    /// Allowed ratio to the baseline geometric mean, either way.
    pub baseline_factor: f64,
}

impl Default for CraneThresholds {
    fn default() -> Self {
        Self {
            solved_fraction: 0.95,
            method_gap: 1e-2,
            baseline_factor: 10.0,
        }
    }
}

fn summary_for(batch: &CraneBatch, c: RunConfig) -> Option<&SummaryRow> {
    batch.summary.iter().find(|s| s.config == c)
}

/// Batch-level properties: solve rate, SC/PC agreement at `d = 3`, error
/// decrease with `d`, closeness to the baseline errors and PC being cheaper
/// per iteration. Checks whose configurations are absent are skipped.
pub fn crane_checks(batch: &CraneBatch, th: CraneThresholds) -> Vec<Check> {
    let mut checks = Vec::new();
    let n = batch.instances.len();

    for s in &batch.summary {
        let frac = s.solved as f64 / n as f64;
        checks.push(Check::new(
            format!("solved {}", s.config),
            frac >= th.solved_fraction,
            format!("{}/{} reach KKT {:e}", s.solved, n, batch.kkt_tol),
        ));
    }

    for family in [PointFamily::RadauIIA, PointFamily::GaussLegendre] {
        let sc = RunConfig::new(Method::Standard, family, 3);
        let pc = RunConfig::new(Method::PositionBased, family, 3);
        if summary_for(batch, sc).is_none() || summary_for(batch, pc).is_none() {
            continue;
        }
        let mut worst: f64 = 0.0;
        let mut compared = 0;
        for i in 0..n {
            let pick = |c| batch.rows.iter().find(|r| r.instance == i && r.config == c && r.is_optimal());
            if let (Some(a), Some(b)) = (pick(sc), pick(pc)) {
                worst = worst.max((a.objective - b.objective).abs());
                compared += 1;
            }
        }
        checks.push(Check::new(
            format!("sc/pc agree {family}-3"),
            compared > 0 && worst <= th.method_gap,
            format!("max |v_pc - v_sc| = {worst:.3e} over {compared} instances"),
        ));
    }

    for method in [Method::Standard, Method::PositionBased] {
        for family in [PointFamily::RadauIIA, PointFamily::GaussLegendre] {
            let lo = summary_for(batch, RunConfig::new(method, family, 2)).and_then(|s| s.geomean_abs_error);
            let hi = summary_for(batch, RunConfig::new(method, family, 3)).and_then(|s| s.geomean_abs_error);
            if let (Some(e2), Some(e3)) = (lo, hi) {
                checks.push(Check::new(
                    format!("error decreases {method}-{family}"),
                    e3 < e2,
                    format!("d=2 {e2:.3e} -> d=3 {e3:.3e}"),
                ));
            }
        }
    }

    for s in &batch.summary {
        if let (Some(e), Some(b)) = (s.geomean_abs_error, s.baseline_error) {
            let ratio = e / b;
            checks.push(Check::new(
                format!("baseline {}", s.config),
                ratio <= th.baseline_factor && ratio >= 1.0 / th.baseline_factor,
                format!("geomean {e:.3e} vs {b:.1e} (ratio {ratio:.2})"),
            ));
        }
    }

    for s in batch.summary.iter().filter(|s| s.config.method == Method::PositionBased) {
        let sc = RunConfig::new(Method::Standard, s.config.family, s.config.d);
        let pair = summary_for(batch, sc).and_then(|o| o.mean_ms_per_iter).zip(s.mean_ms_per_iter);
        if let Some((t_sc, t_pc)) = pair {
            checks.push(Check::new(
                format!("pc cheaper {}-{}", s.config.family, s.config.d),
                t_pc < t_sc,
                format!("pc {t_pc:.4} ms/it vs sc {t_sc:.4} ms/it"),
            ));
        }
    }
    checks
}

/// Structural counts of the transcribed crane next to the closed forms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureReport {
    pub method: Method,
    pub family: PointFamily,
    pub d: usize,
    #[serde(rename = "N")]
    pub intervals: usize,
    pub beta: f64,
    pub n_var: usize,
    pub n_constraints: usize,
    pub jac_nnz: usize,
    pub blocks: Blocks,
    pub closed_form: ClosedFormCounts,
    #[serde(rename = "match")]
    pub matches: bool,
    pub assumption_violated: bool,
}

/// Transcribes the crane at the origin and compares counts with the closed
/// forms. `beta0` removes rope friction so the model is velocity independent.
pub fn structure_report(
    crane: CraneParams,
    method: Method,
    family: PointFamily,
    d: usize,
    beta0: bool,
) -> Result<StructureReport> {
    let params = CraneParams {
        beta: if beta0 { 0.0 } else { crane.beta },
        ..crane
    };
    let ocp = make_crane_ocp(0.0, 0.0, params)?;
    let scheme = CollocationScheme::new(family, d)?;
    let nlp = transcribe(&ocp, method, &scheme)?;
    let counts = nlp.structure_counts();
    let cf = nlp.closed_form();
    Ok(StructureReport {
        method,
        family,
        d,
        intervals: params.intervals,
        beta: params.beta,
        n_var: counts.n_var,
        n_constraints: counts.n_constraints,
        jac_nnz: counts.jac_nnz,
        blocks: counts.blocks,
        closed_form: cf,
        matches: counts.n_var == cf.n_var && counts.n_constraints == cf.n_constraints && counts.jac_nnz == cf.jac_nnz,
        assumption_violated: counts.assumption_violated,
    })
}

/// Allowed distance between a fitted slope and the expected order.
pub const SLOPE_TOLERANCE: f64 = 0.3;

/// Convergence of SC and PC on `q̈ + q = cos t`, `q(0) = q̇(0) = 0`, `t ∈ [0, 10]`.
pub fn run_convergence(
    d_list: &[usize],
    families: &[PointFamily],
    n_list: &[usize],
    exec: Execution,
) -> Result<Vec<ConvergenceRow>> {
    if d_list.is_empty() || families.is_empty() || n_list.is_empty() {
        return Err(Error::Config("d, family and N lists must be non-empty".into()));
    }
    if n_list.contains(&0) {
        return Err(Error::Config("N must be at least 1".into()));
    }
    let mut configs = Vec::new();
    for &family in families {
        for &d in d_list {
            let scheme = CollocationScheme::new(family, d)?;
            for method in [Method::Standard, Method::PositionBased] {
                configs.push((method, scheme.clone()));
            }
        }
    }
    let ode = ForcedOscillator;
    let ivp = Ivp::new(&ode, vec![0.0], vec![0.0], 10.0, n_list[0])?;
    convergence_study(
        &ivp,
        |t| {
            let (q, v) = ForcedOscillator::exact(t);
            (vec![q], vec![v])
        },
        &configs,
        n_list,
        exec,
    )
}

/// One check per configuration with a fitted slope; configurations whose
/// slope could not be fitted are not checked.
pub fn slope_checks(rows: &[ConvergenceRow]) -> Vec<Check> {
    let mut seen: Vec<(Method, PointFamily, usize)> = Vec::new();
    let mut checks = Vec::new();
    for r in rows {
        let key = (r.method, r.family, r.d);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        if let Some(s) = r.slope {
            let expected = r.family.expected_order(r.d) as f64;
            checks.push(Check::new(
                format!("slope {}-{}-{}", r.method, r.family, r.d),
                (s - expected).abs() <= SLOPE_TOLERANCE,
                format!("fitted {s:.3}, expected {expected}"),
            ));
        }
    }
    checks
}
