//! Model problems with trusted solutions, convergence studies and the
//! invariant suite.
//!
//! Oracles are ranked: closed form, then the Richardson-extrapolated fine
//! reference, then the solver under test.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{build_kernel_system, lagrange_basis, NodeSet};
use crate::coeffs::{adams_coefficients, rbf_coefficients, unipc_coefficients};
use crate::error::{invalid, Error, Result};
use crate::quadrature::{
    gauss_legendre, integral_exp_const, integral_exp_gaussian, integral_exp_gaussian_quadrature,
    integral_exp_monomial, IntegralRequest, QuadratureOptions,
};
use crate::sampler::{
    sample, CountingEvaluator, Method, ModelEvaluator, ShapeSchedule, SolverConfig,
};
use crate::schedule::{build_time_grid, sigma_of_lambda, NoiseSchedule, Spacing};
use crate::shapeopt::{generate_target_set, optimize_shape_parameters, SearchSpec};

/// Richardson levels used by [`reference_solve`].
pub const REFERENCE_LEVELS: usize = 5;
/// Agreement required between the two most extrapolated reference values.
pub const REFERENCE_TOLERANCE: f64 = 1e-9;
/// Default base resolution of the fine reference.
pub const DEFAULT_REFERENCE_RESOLUTION: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExactKind {
    ClosedForm,
    FineReference,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemModel {
    /// `x_hat = v`.
    Constant(Vec<f64>),
    /// `x_hat = sum_k c_k lambda^k`, one dimension.
    Polynomial(Vec<f64>),
    /// `x_hat = sin(omega lambda)`, one dimension.
    Sine { omega: f64 },
    /// `x_hat = a x + b`, one dimension.
    Linear { a: f64, b: f64 },
    /// `x_hat = A x + b` in two dimensions.
    LinearSystem { a: [[f64; 2]; 2], b: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestProblem {
    pub name: String,
    pub description: String,
    pub model: ProblemModel,
}

impl TestProblem {
    pub fn constant(v: Vec<f64>) -> Self {
        TestProblem {
            name: "constant".into(),
            description: "x_hat = v, integrated exactly by every method".into(),
            model: ProblemModel::Constant(v),
        }
    }

    pub fn polynomial(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty()
            || coefficients.len() > crate::quadrature::MAX_MONOMIAL_DEGREE + 1
        {
            return Err(invalid("polynomial degree must be between 0 and 12"));
        }
        Ok(TestProblem {
            name: "polynomial".into(),
            description: format!("x_hat = q(lambda), degree {}", coefficients.len() - 1),
            model: ProblemModel::Polynomial(coefficients),
        })
    }

    pub fn sine(omega: f64) -> Self {
        TestProblem {
            name: "sine".into(),
            description: format!("x_hat = sin({omega} lambda)"),
            model: ProblemModel::Sine { omega },
        }
    }

    pub fn linear(a: f64, b: f64) -> Self {
        TestProblem {
            name: "linear".into(),
            description: format!("x_hat = {a} x + {b}"),
            model: ProblemModel::Linear { a, b },
        }
    }

    /// Two coupled modes with eigenvalues -0.5 and -3.
    pub fn stiff() -> Self {
        TestProblem {
            name: "stiff".into(),
            description: "x_hat = A x + b, A with eigenvalues -0.5 and -3".into(),
            model: ProblemModel::LinearSystem {
                a: [[-0.5, 1.0], [0.0, -3.0]],
                b: [0.3, -0.2],
            },
        }
    }

    pub fn exact_kind(&self) -> ExactKind {
        match self.model {
            ProblemModel::Linear { .. } | ProblemModel::LinearSystem { .. } => {
                ExactKind::FineReference
            }
            _ => ExactKind::ClosedForm,
        }
    }

    /// Closed-form solution from `lambda_start` to `lambda_end`, when one exists.
    pub fn exact_solution(
        &self,
        lambda_start: f64,
        lambda_end: f64,
        x_t: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        let ratio = sigma_of_lambda(lambda_end) / sigma_of_lambda(lambda_start);
        let s1 = sigma_of_lambda(lambda_end);
        let integrals: Vec<f64> = match &self.model {
            ProblemModel::Constant(v) => {
                let k = integral_exp_const(lambda_start, lambda_end);
                v.iter().map(|c| c * k).collect()
            }
            ProblemModel::Polynomial(c) => {
                let mut total = 0.0;
                for (k, ck) in c.iter().enumerate() {
                    total += ck * integral_exp_monomial(lambda_start, lambda_end, k)?;
                }
                vec![total]
            }
            ProblemModel::Sine { omega } => {
                let w = *omega;
                let f = |l: f64| l.exp() * ((w * l).sin() - w * (w * l).cos()) / (1.0 + w * w);
                vec![f(lambda_end) - f(lambda_start)]
            }
            _ => return Ok(None),
        };
        Ok(Some(
            x_t.iter()
                .zip(&integrals)
                .map(|(x, i)| ratio * x + s1 * i)
                .collect(),
        ))
    }
}

impl ModelEvaluator for TestProblem {
    fn dim(&self) -> usize {
        match &self.model {
            ProblemModel::Constant(v) => v.len(),
            ProblemModel::LinearSystem { .. } => 2,
            _ => 1,
        }
    }

    fn evaluate(&self, x: &[f64], lambda: f64) -> Vec<f64> {
        match &self.model {
            ProblemModel::Constant(v) => v.clone(),
            ProblemModel::Polynomial(c) => {
                vec![c.iter().rev().fold(0.0, |acc, ck| acc * lambda + ck)]
            }
            ProblemModel::Sine { omega } => vec![(omega * lambda).sin()],
            ProblemModel::Linear { a, b } => vec![a * x[0] + b],
            ProblemModel::LinearSystem { a, b } => vec![
                a[0][0] * x[0] + a[0][1] * x[1] + b[0],
                a[1][0] * x[0] + a[1][1] * x[1] + b[1],
            ],
        }
    }
}

/// The five standard problems.
pub fn builtin_problems() -> Vec<TestProblem> {
    vec![
        TestProblem::constant(vec![0.5, -1.25]),
        TestProblem::polynomial(vec![1.0, -0.5, 0.25]).expect("degree 2 is valid"),
        TestProblem::sine(3.0),
        TestProblem::linear(-0.5, 1.0),
        TestProblem::stiff(),
    ]
}

pub fn problem_by_name(name: &str) -> Result<TestProblem> {
    builtin_problems()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| invalid(format!("unknown problem `{name}`")))
}

/// Fixed starting point used by studies.
pub fn default_x_t(dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| if k % 2 == 0 { 1.0 } else { -0.5 })
        .collect()
}

/// Standard-normal starting point drawn from a seeded stream.
pub fn seeded_x_t(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// Explicit Euler in `y = x / sigma`, where `dy/dlambda = e^lambda x_hat`.
fn euler_y_chart<M: ModelEvaluator + ?Sized>(
    model: &M,
    l0: f64,
    l1: f64,
    x_t: &[f64],
    n: usize,
) -> Vec<f64> {
    let dl = (l1 - l0) / n as f64;
    let mut y: Vec<f64> = x_t.iter().map(|x| x / sigma_of_lambda(l0)).collect();
    for k in 0..n {
        let l = l0 + dl * k as f64;
        let s = sigma_of_lambda(l);
        let x: Vec<f64> = y.iter().map(|v| s * v).collect();
        let f = model.evaluate(&x, l);
        let e = l.exp();
        for (yv, fv) in y.iter_mut().zip(&f) {
            *yv += dl * e * fv;
        }
    }
    let s1 = sigma_of_lambda(l1);
    y.iter().map(|v| s1 * v).collect()
}

/// Fine reference over the schedule's full lambda range: Euler at
/// `R, 2R, ..., 16R` steps and a full Richardson table. The two most
/// extrapolated values must agree to [`REFERENCE_TOLERANCE`] (relative to
/// the larger of 1 and the solution norm).
pub fn reference_solve<M: ModelEvaluator + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    resolution: usize,
) -> Result<Vec<f64>> {
    if resolution < 10 {
        return Err(invalid("reference resolution must be at least 10"));
    }
    let (l0, l1) = schedule.lambda_range();
    let levels: Vec<Vec<f64>> = (0..REFERENCE_LEVELS)
        .into_par_iter()
        .map(|k| euler_y_chart(model, l0, l1, x_t, resolution << k))
        .collect();
    let mut table = vec![levels];
    for j in 1..REFERENCE_LEVELS {
        let prev = &table[j - 1];
        let factor = (1u64 << j) as f64 - 1.0;
        let next: Vec<Vec<f64>> = (1..prev.len())
            .map(|k| {
                prev[k]
                    .iter()
                    .zip(&prev[k - 1])
                    .map(|(fine, coarse)| fine + (fine - coarse) / factor)
                    .collect()
            })
            .collect();
        table.push(next);
    }
    let best = table[REFERENCE_LEVELS - 1][0].clone();
    let runner_up = table[REFERENCE_LEVELS - 2]
        .last()
        .expect("two entries")
        .clone();
    if !best.iter().all(|v| v.is_finite()) {
        return Err(Error::Oracle("reference solution is not finite".into()));
    }
    let gap = l2_distance(&best, &runner_up);
    let scale = l2_norm(&best).max(1.0);
    if gap > REFERENCE_TOLERANCE * scale {
        return Err(Error::Oracle(format!(
            "reference extrapolants disagree by {gap:e} at resolution {resolution}"
        )));
    }
    Ok(best)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `||x - reference||`, divided by `||reference||` when that is nonzero.
pub fn relative_error(x: &[f64], reference: &[f64]) -> f64 {
    let d = l2_distance(x, reference);
    let n = l2_norm(reference);
    if n > 0.0 {
        d / n
    } else {
        d
    }
}

/// Best available solution: closed form first, otherwise the fine reference.
pub fn trusted_solution(
    problem: &TestProblem,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    resolution: usize,
) -> Result<Vec<f64>> {
    let (l0, l1) = schedule.lambda_range();
    match problem.exact_solution(l0, l1, x_t)? {
        Some(x) => Ok(x),
        None => reference_solve(problem, schedule, x_t, resolution),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub m: usize,
    pub h_max: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub problem: String,
    pub method: String,
    pub order: usize,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `ln error` against `ln h_max` over the three
    /// finest grids. NaN when one of those errors is zero.
    pub slope: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    problem: String,
    method: String,
    p: usize,
    #[serde(rename = "M")]
    m: usize,
    h_max: f64,
    error: f64,
    slope: f64,
}

impl ConvergenceReport {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRow {
                problem: self.problem.clone(),
                method: self.method.clone(),
                p: self.order,
                m: r.m,
                h_max: r.h_max,
                error: r.error,
                slope: self.slope,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let headers = rd.headers()?.clone();
        let expected = ["problem", "method", "p", "M", "h_max", "error", "slope"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::Parse(format!("unexpected header {headers:?}")));
        }
        let rows: Vec<CsvRow> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        let first = rows
            .first()
            .ok_or_else(|| Error::Parse("report has no rows".into()))?;
        Ok(ConvergenceReport {
            problem: first.problem.clone(),
            method: first.method.clone(),
            order: first.p,
            slope: first.slope,
            rows: rows
                .iter()
                .map(|r| ConvergenceRow {
                    m: r.m,
                    h_max: r.h_max,
                    error: r.error,
                })
                .collect(),
        })
    }
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Runs `cfg` at every `M` in `m_list` and fits the tail order.
pub fn convergence_study(
    problem: &TestProblem,
    cfg: &SolverConfig,
    m_list: &[usize],
    schedule: &NoiseSchedule,
    spacing: Spacing,
) -> Result<ConvergenceReport> {
    if m_list.len() < 3 || m_list.windows(2).any(|w| w[0] >= w[1]) || m_list[0] == 0 {
        return Err(invalid(
            "M list must hold at least three increasing positive entries",
        ));
    }
    let x_t = default_x_t(problem.dim());
    let resolution = DEFAULT_REFERENCE_RESOLUTION.max(10 * m_list[m_list.len() - 1]);
    let reference = trusted_solution(problem, schedule, &x_t, resolution)?;
    let rows = m_list
        .par_iter()
        .map(|&m| {
            let grid = build_time_grid(schedule, m, spacing)?;
            let run = match &cfg.method {
                Method::Rbf(s) if s.entries.len() != m => {
                    let log_gamma = s
                        .entries
                        .iter()
                        .find_map(|e| e.log_gamma_pred.and_then(|v| v.log_gamma()));
                    let mut c = cfg.clone();
                    c.method = match log_gamma {
                        Some(g) => Method::Rbf(ShapeSchedule::uniform(m, cfg.order, g)),
                        None => Method::Adams,
                    };
                    c
                }
                _ => cfg.clone(),
            };
            let out = sample(problem, &grid, &run, &x_t)?;
            let error = relative_error(&out.x, &reference);
            if !error.is_finite() {
                return Err(Error::NonFinite { step: m });
            }
            Ok(ConvergenceRow {
                m,
                h_max: grid.h_max(),
                error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tail = &rows[rows.len() - 3..];
    let slope = if tail.iter().all(|r| r.error > 0.0) {
        let x: Vec<f64> = tail.iter().map(|r| r.h_max.ln()).collect();
        let y: Vec<f64> = tail.iter().map(|r| r.error.ln()).collect();
        fit_slope(&x, &y)
    } else {
        f64::NAN
    };
    Ok(ConvergenceReport {
        problem: problem.name.clone(),
        method: cfg.method.name().to_string(),
        order: cfg.order,
        rows,
        slope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub module: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Machine-readable outcome of the invariant suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<CheckResult>,
    pub passed: usize,
    pub failed: usize,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a report and checks that its tallies agree with its checks.
    pub fn from_json(s: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(s)?;
        let passed = r.checks.iter().filter(|c| c.passed).count();
        if passed != r.passed || r.checks.len() - passed != r.failed {
            return Err(Error::Parse(
                "report tallies do not match its checks".into(),
            ));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteOptions {
    /// Restrict to one module.
    pub only: Option<String>,
    /// Fault injection: shift every coefficient sum before the summation check.
    pub perturb_summation: bool,
}

pub const SUITE_MODULES: [&str; 7] = [
    "schedule",
    "basis",
    "quadrature",
    "coeffs",
    "sampler",
    "shapeopt",
    "harness",
];

type Check = fn(&SuiteOptions) -> std::result::Result<String, String>;

fn checks() -> Vec<(&'static str, &'static str, Check)> {
    vec![
        ("schedule", "time_lambda_round_trip", check_round_trip),
        ("schedule", "grid_monotone", check_grid_monotone),
        ("basis", "partition_of_unity", check_partition_of_unity),
        ("basis", "kernel_symmetry", check_kernel_symmetry),
        ("quadrature", "closed_form_vs_quadrature", check_routes),
        ("coeffs", "summation_condition", check_summation),
        ("coeffs", "golden_adams", check_golden_adams),
        ("coeffs", "unipc_equals_adams", check_unipc),
        ("sampler", "constant_model_exactness", check_constant_model),
        ("sampler", "first_order_is_euler", check_first_order),
        ("sampler", "nfe_counter", check_nfe),
        ("shapeopt", "never_worse_than_adams", check_dominance),
        ("harness", "reference_oracle", check_reference),
    ]
}

/// Runs every registered check (or one module's) and tallies the results.
pub fn run_invariant_suite(opts: &SuiteOptions) -> Result<Report> {
    if let Some(m) = &opts.only {
        if !SUITE_MODULES.contains(&m.as_str()) {
            return Err(invalid(format!("unknown module `{m}`")));
        }
    }
    let selected: Vec<_> = checks()
        .into_iter()
        .filter(|(m, _, _)| opts.only.as_deref().is_none_or(|o| o == *m))
        .collect();
    let results: Vec<CheckResult> = selected
        .par_iter()
        .map(|(module, name, f)| {
            let (passed, detail) = match f(opts) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                module: module.to_string(),
                name: name.to_string(),
                passed,
                detail,
            }
        })
        .collect();
    let passed = results.iter().filter(|c| c.passed).count();
    Ok(Report {
        failed: results.len() - passed,
        passed,
        checks: results,
    })
}

type CheckOutcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

fn check_round_trip(_: &SuiteOptions) -> CheckOutcome {
    let schedules = [
        NoiseSchedule::default(),
        NoiseSchedule::vp_cosine(0.008, 0.9946).map_err(e2s)?,
    ];
    let mut worst = 0.0f64;
    for s in &schedules {
        for k in 0..=50 {
            let t = (s.t_min() + (s.t_max() - s.t_min()) * k as f64 / 50.0).min(s.t_max());
            let back = s.t_of_lambda(s.lambda_of_t(t).map_err(e2s)?).map_err(e2s)?;
            worst = worst.max((back - t).abs());
        }
    }
    ensure(worst < 1e-9, || format!("worst round-trip error {worst:e}"))?;
    Ok(format!("worst round-trip error {worst:e}"))
}

fn check_grid_monotone(_: &SuiteOptions) -> CheckOutcome {
    let s = NoiseSchedule::default();
    for spacing in [Spacing::UniformLambda, Spacing::UniformT] {
        for m in [1, 7, 50] {
            let g = build_time_grid(&s, m, spacing).map_err(e2s)?;
            ensure(g.lambdas().windows(2).all(|w| w[0] < w[1]), || {
                format!("lambda not increasing, M={m}")
            })?;
            ensure(g.times().windows(2).all(|w| w[0] > w[1]), || {
                format!("t not decreasing, M={m}")
            })?;
        }
    }
    Ok("lambda increasing and t decreasing".into())
}

fn random_nodes(rng: &mut ChaCha8Rng, p: usize) -> (Vec<f64>, f64, f64) {
    let lo: f64 = rng.random_range(-4.0..4.0);
    let h: f64 = rng.random_range(0.05..0.5);
    let mut nodes = vec![lo];
    for _ in 1..p {
        let last = *nodes.last().expect("nonempty");
        nodes.push(last - h * rng.random_range(0.5..1.5));
    }
    (nodes, lo, lo + h)
}

fn check_partition_of_unity(_: &SuiteOptions) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for p in 2..=5 {
        let (nodes, lo, hi) = random_nodes(&mut rng, p);
        let ns = NodeSet::new(nodes, hi - lo).map_err(e2s)?;
        for _ in 0..100 {
            let l = rng.random_range(ns.nodes()[p - 1]..hi);
            let s: f64 = (0..p)
                .map(|j| lagrange_basis(&ns, j, l))
                .sum::<Result<f64>>()
                .map_err(e2s)?;
            worst = worst.max((s - 1.0).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("worst deviation {worst:e}"))?;
    Ok(format!("worst deviation {worst:e}"))
}

fn check_kernel_symmetry(_: &SuiteOptions) -> CheckOutcome {
    let ns = NodeSet::new(vec![0.0, -0.1, -0.25, -0.3], 0.1).map_err(e2s)?;
    let sys = build_kernel_system(&ns, 1.3, true).map_err(e2s)?;
    let a = sys.matrix();
    for i in 0..a.dim() {
        for j in 0..a.dim() {
            ensure(a.get(i, j) == a.get(j, i), || {
                format!("asymmetric at ({i}, {j})")
            })?;
        }
    }
    Ok("kernel matrix symmetric".into())
}

fn check_routes(_: &SuiteOptions) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rule = gauss_legendre(64).map_err(e2s)?;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let lo: f64 = rng.random_range(-5.0..5.0);
        let h: f64 = rng.random_range(0.05..0.5);
        let g: f64 = rng.random_range(0.3f64.ln()..20f64.ln()).exp();
        let c = lo - h * rng.random_range(-1.0..4.0);
        let req = IntegralRequest::new(lo, lo + h, c, g, h).map_err(e2s)?;
        let v = integral_exp_gaussian(&req, &QuadratureOptions::default())
            .map_err(e2s)?
            .value;
        let q = integral_exp_gaussian_quadrature(&req, &rule);
        if q > 0.0 {
            worst = worst.max((v - q).abs() / q);
        }
    }
    ensure(worst <= 1e-10, || format!("worst relative gap {worst:e}"))?;
    Ok(format!("worst relative gap {worst:e}"))
}

fn check_summation(opts: &SuiteOptions) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = rng.random_range(1..=5);
        let (nodes, lo, hi) = random_nodes(&mut rng, p);
        let g = rng.random_range(-2.0..2.0f64).exp();
        let ns = NodeSet::new(nodes, hi - lo).map_err(e2s)?;
        let c = rbf_coefficients(&ns, lo, hi, g, true).map_err(e2s)?;
        let target = integral_exp_const(lo, hi);
        let mut s = c.sum();
        if opts.perturb_summation {
            s *= 1.0 + 1e-6;
        }
        worst = worst.max((s - target).abs() / target.abs());
    }
    ensure(worst <= 1e-10, || {
        format!("worst relative violation {worst:e}")
    })?;
    Ok(format!("worst relative violation {worst:e}"))
}

fn check_golden_adams(_: &SuiteOptions) -> CheckOutcome {
    let ns = NodeSet::new(vec![0.0, -0.1, -0.2], 0.1).map_err(e2s)?;
    let c = adams_coefficients(&ns, 0.0, 0.1).map_err(e2s)?;
    let e = 0.1f64.exp();
    let want = [78.0 * e - 86.0, 180.0 - 163.0 * e, 86.0 * e - 95.0];
    let gap = c
        .values()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(gap <= 1e-10, || format!("gap {gap:e}"))?;
    Ok(format!("gap {gap:e}"))
}

fn check_unipc(_: &SuiteOptions) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = rng.random_range(1..=4);
        let (nodes, lo, hi) = random_nodes(&mut rng, p);
        let ns = NodeSet::new(nodes, hi - lo).map_err(e2s)?;
        let a = adams_coefficients(&ns, lo, hi).map_err(e2s)?;
        let u = unipc_coefficients(&ns, lo, hi).map_err(e2s)?;
        for (x, y) in a.values().iter().zip(u.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("worst gap {worst:e}"))?;
    Ok(format!("worst gap {worst:e}"))
}

fn all_methods(m: usize, p: usize) -> Vec<SolverConfig> {
    vec![
        SolverConfig::euler(),
        SolverConfig::adams(p),
        SolverConfig::new(p, Method::Equal),
        SolverConfig::new(p, Method::Rbf(ShapeSchedule::uniform(m, p, -1.0))),
        SolverConfig::new(p, Method::Rbf(ShapeSchedule::uniform(m, p, 1.0))),
    ]
}

fn check_constant_model(_: &SuiteOptions) -> CheckOutcome {
    let problem = TestProblem::constant(vec![0.5, -1.25]);
    let s = NoiseSchedule::default();
    let x_t = default_x_t(2);
    let exact = trusted_solution(&problem, &s, &x_t, DEFAULT_REFERENCE_RESOLUTION).map_err(e2s)?;
    let mut worst = 0.0f64;
    for m in [1, 5, 20] {
        let g = build_time_grid(&s, m, Spacing::UniformLambda).map_err(e2s)?;
        for p in [1, 3] {
            for cfg in all_methods(m, p) {
                let out = sample(&problem, &g, &cfg, &x_t).map_err(e2s)?;
                worst = worst.max(l2_distance(&out.x, &exact));
            }
        }
    }
    ensure(worst <= 1e-10, || format!("worst error {worst:e}"))?;
    Ok(format!("worst error {worst:e}"))
}

fn check_first_order(_: &SuiteOptions) -> CheckOutcome {
    let problem = TestProblem::linear(-0.5, 1.0);
    let g = build_time_grid(&NoiseSchedule::default(), 12, Spacing::UniformLambda).map_err(e2s)?;
    let euler = sample(&problem, &g, &SolverConfig::euler(), &[0.7]).map_err(e2s)?;
    for cfg in [
        SolverConfig::adams(1).predictor_only(),
        SolverConfig::new(1, Method::Rbf(ShapeSchedule::uniform(12, 1, 0.0))).predictor_only(),
    ] {
        let out = sample(&problem, &g, &cfg, &[0.7]).map_err(e2s)?;
        ensure(out.x == euler.x, || {
            format!("{} differs from Euler", cfg.method.name())
        })?;
    }
    Ok("identical to Euler".into())
}

fn check_nfe(_: &SuiteOptions) -> CheckOutcome {
    let problem = TestProblem::sine(3.0);
    let counted = CountingEvaluator::new(&problem);
    let g = build_time_grid(&NoiseSchedule::default(), 17, Spacing::UniformLambda).map_err(e2s)?;
    let out = sample(&counted, &g, &SolverConfig::adams(3), &[1.0]).map_err(e2s)?;
    ensure(out.nfe == 17 && counted.count() == 17, || {
        format!("nfe {} counted {}", out.nfe, counted.count())
    })?;
    Ok("17 evaluations for 17 steps".into())
}

fn check_dominance(_: &SuiteOptions) -> CheckOutcome {
    let problem = TestProblem::linear(-0.5, 1.0);
    let s = NoiseSchedule::default();
    let batch = generate_target_set(&problem, &s, 100, 8, 14).map_err(e2s)?;
    let mut plan = SearchSpec::new(batch);
    plan.resolution = 9;
    let g = build_time_grid(&s, 5, Spacing::UniformLambda).map_err(e2s)?;
    let out =
        optimize_shape_parameters(&problem, &g, &SolverConfig::adams(3), &plan).map_err(e2s)?;
    for st in &out.steps {
        ensure(st.loss <= st.adams_loss, || {
            format!("step {} loses to Adams", st.i)
        })?;
    }
    Ok(format!("final MSE {:e}", out.final_mse))
}

fn check_reference(_: &SuiteOptions) -> CheckOutcome {
    let s = NoiseSchedule::default();
    let problem = TestProblem::polynomial(vec![1.0, -0.5, 0.25]).map_err(e2s)?;
    let x_t = [0.3];
    let (l0, l1) = s.lambda_range();
    let exact = problem
        .exact_solution(l0, l1, &x_t)
        .map_err(e2s)?
        .expect("closed form");
    let r1 = reference_solve(&problem, &s, &x_t, 1000).map_err(e2s)?;
    let r2 = reference_solve(&problem, &s, &x_t, 1000).map_err(e2s)?;
    ensure(r1 == r2, || "reference is not deterministic".into())?;
    let gap = (r1[0] - exact[0]).abs();
    ensure(gap <= 1e-10, || format!("reference gap {gap:e}"))?;
    Ok(format!("reference gap {gap:e}"))
}
