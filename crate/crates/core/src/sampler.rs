//! Multistep predictor-corrector sampling loop.
//!
//! Starting from `x_T` at `t_0 = T`, each step `i` predicts
//! `x_{i+1} = (sigma_{i+1} / sigma_i) x_i + sigma_{i+1} c^T X` from the most
//! recent evaluations, evaluates the model at the prediction, and (except on
//! the final step) corrects with the new evaluation included. One model call
//! per step, so a run over `M` steps costs exactly `M` evaluations.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::basis::NodeSet;
use crate::coeffs::{
    adams_coefficients, coefficient_magnitude_ratio, equal_coefficients, euler_coefficients,
    rbf_coefficients_with, CoefficientVector, Provenance,
};
use crate::error::{invalid, Error, Result};
use crate::quadrature::QuadratureOptions;
use crate::schedule::TimeGrid;

/// Highest supported order.
pub const MAX_ORDER: usize = 8;

/// Default log-gamma at and above which the Adams coefficients are used.
pub const DEFAULT_ADAMS_THRESHOLD: f64 = 2.0;

/// Data-prediction model `x_hat(x, lambda)`.
pub trait ModelEvaluator: Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, x: &[f64], lambda: f64) -> Vec<f64>;

    /// Whether concurrent calls are allowed.
    fn concurrent(&self) -> bool {
        true
    }
}

impl<M: ModelEvaluator + ?Sized> ModelEvaluator for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn evaluate(&self, x: &[f64], lambda: f64) -> Vec<f64> {
        (**self).evaluate(x, lambda)
    }

    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

/// Adapts a closure into a [`ModelEvaluator`].
pub struct FnModel<F> {
    dim: usize,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnModel { dim, f }
    }
}

impl<F> ModelEvaluator for FnModel<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &[f64], lambda: f64) -> Vec<f64> {
        (self.f)(x, lambda)
    }
}

/// Counts calls to the wrapped model.
pub struct CountingEvaluator<M> {
    inner: M,
    count: AtomicUsize,
}

impl<M: ModelEvaluator> CountingEvaluator<M> {
    pub fn new(inner: M) -> Self {
        CountingEvaluator {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: ModelEvaluator> ModelEvaluator for CountingEvaluator<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn evaluate(&self, x: &[f64], lambda: f64) -> Vec<f64> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(x, lambda)
    }

    fn concurrent(&self) -> bool {
        self.inner.concurrent()
    }
}

/// One shape-parameter slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeValue {
    LogGamma(f64),
    Adams,
}

impl ShapeValue {
    /// Applies the fallback threshold.
    pub fn resolve(self, threshold: f64) -> ShapeValue {
        match self {
            ShapeValue::LogGamma(g) if g >= threshold => ShapeValue::Adams,
            v => v,
        }
    }

    pub fn log_gamma(self) -> Option<f64> {
        match self {
            ShapeValue::LogGamma(g) => Some(g),
            ShapeValue::Adams => None,
        }
    }
}

impl Serialize for ShapeValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ShapeValue::LogGamma(g) => s.serialize_f64(*g),
            ShapeValue::Adams => s.serialize_str("adams"),
        }
    }
}

impl<'de> Deserialize<'de> for ShapeValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(g) if g.is_finite() => Ok(ShapeValue::LogGamma(g)),
            Raw::Num(g) => Err(de::Error::custom(format!("non-finite log gamma {g}"))),
            Raw::Str(s) if s == "adams" => Ok(ShapeValue::Adams),
            Raw::Str(s) => Err(de::Error::custom(format!(
                "expected a number or \"adams\", got \"{s}\""
            ))),
        }
    }
}

/// How the predictor and corrector shape parameters were searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeMode {
    #[default]
    SplitJoint,
    SplitIndependent,
    Shared,
}

impl std::str::FromStr for ShapeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split-joint" => Ok(ShapeMode::SplitJoint),
            "split-independent" => Ok(ShapeMode::SplitIndependent),
            "shared" => Ok(ShapeMode::Shared),
            other => Err(invalid(format!("unknown shape mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ShapeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeMode::SplitJoint => "split-joint",
            ShapeMode::SplitIndependent => "split-independent",
            ShapeMode::Shared => "shared",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub i: usize,
    pub log_gamma_pred: Option<ShapeValue>,
    pub log_gamma_corr: Option<ShapeValue>,
}

/// Per-step shape parameters in log space. Missing slots mean Adams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSchedule {
    pub nfe: usize,
    pub order: usize,
    pub mode: ShapeMode,
    pub threshold: f64,
    pub entries: Vec<ShapeEntry>,
}

impl ShapeSchedule {
    /// Every slot empty.
    pub fn empty(nfe: usize, order: usize) -> Self {
        ShapeSchedule {
            nfe,
            order,
            mode: ShapeMode::default(),
            threshold: DEFAULT_ADAMS_THRESHOLD,
            entries: (0..nfe)
                .map(|i| ShapeEntry {
                    i,
                    log_gamma_pred: None,
                    log_gamma_corr: None,
                })
                .collect(),
        }
    }

    /// The same `log_gamma` in every slot that is ever used: predictor for
    /// `i >= 1` and corrector for `i <= M - 2`.
    pub fn uniform(nfe: usize, order: usize, log_gamma: f64) -> Self {
        let mut s = ShapeSchedule::empty(nfe, order);
        s.mode = ShapeMode::Shared;
        for e in &mut s.entries {
            if e.i >= 1 {
                e.log_gamma_pred = Some(ShapeValue::LogGamma(log_gamma));
            }
            if e.i + 2 <= nfe {
                e.log_gamma_corr = Some(ShapeValue::LogGamma(log_gamma));
            }
        }
        s
    }

    pub fn pred(&self, i: usize) -> ShapeValue {
        self.slot(i, |e| e.log_gamma_pred)
    }

    pub fn corr(&self, i: usize) -> ShapeValue {
        self.slot(i, |e| e.log_gamma_corr)
    }

    fn slot(&self, i: usize, f: impl Fn(&ShapeEntry) -> Option<ShapeValue>) -> ShapeValue {
        self.entries
            .get(i)
            .and_then(f)
            .unwrap_or(ShapeValue::Adams)
            .resolve(self.threshold)
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.entries.len() != m {
            return Err(invalid(format!(
                "shape schedule has {} entries but the grid has {m} steps",
                self.entries.len()
            )));
        }
        if self.entries.iter().enumerate().any(|(k, e)| e.i != k) {
            return Err(invalid(
                "shape schedule entries must be indexed 0..M in order",
            ));
        }
        if !self.threshold.is_finite() {
            return Err(invalid("shape schedule threshold must be finite"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Rbf(ShapeSchedule),
    Adams,
    Equal,
    Euler,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Rbf(_) => "rbf",
            Method::Adams => "adams",
            Method::Equal => "equal",
            Method::Euler => "euler",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Warmup {
    /// Order grows as `min(p, i + 1)`.
    #[default]
    Ramp,
    /// First order until `p` evaluations exist, then order `p`.
    None,
}

/// Width scale used by the corrector's Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectorWidth {
    /// `h_i`, the width of the step being corrected.
    #[default]
    Current,
    /// `h_{i+1}`, falling back to `h_i` on the last step.
    Next,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub order: usize,
    pub method: Method,
    pub use_corrector: bool,
    pub include_constant: bool,
    pub warmup: Warmup,
    pub lower_order_final: bool,
    pub corrector_width: CorrectorWidth,
    pub quadrature: QuadratureOptions,
    pub record_trace: bool,
}

impl SolverConfig {
    pub fn new(order: usize, method: Method) -> Self {
        SolverConfig {
            order,
            method,
            use_corrector: true,
            include_constant: true,
            warmup: Warmup::Ramp,
            lower_order_final: false,
            corrector_width: CorrectorWidth::Current,
            quadrature: QuadratureOptions::default(),
            record_trace: false,
        }
    }

    pub fn adams(order: usize) -> Self {
        SolverConfig::new(order, Method::Adams)
    }

    /// First-order exponential integrator (DDIM); never corrects.
    pub fn euler() -> Self {
        let mut c = SolverConfig::new(1, Method::Euler);
        c.use_corrector = false;
        c
    }

    pub fn predictor_only(mut self) -> Self {
        self.use_corrector = false;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_ORDER).contains(&self.order) {
            return Err(invalid(format!(
                "order p = {} outside 1..={MAX_ORDER}",
                self.order
            )));
        }
        if matches!(self.method, Method::Euler) && self.order != 1 {
            return Err(invalid("the Euler method is first order; use p = 1"));
        }
        Ok(())
    }

    fn corrects(&self) -> bool {
        self.use_corrector && !matches!(self.method, Method::Euler)
    }
}

/// Effective predictor order at step `i` of an `m`-step run. The corrector
/// at the same step uses one more node.
pub fn effective_order(cfg: &SolverConfig, m: usize, i: usize) -> usize {
    let available = i + 1;
    let mut p = match cfg.warmup {
        Warmup::Ramp => cfg.order.min(available),
        Warmup::None => {
            if available >= cfg.order {
                cfg.order
            } else {
                1
            }
        }
    };
    if cfg.lower_order_final {
        p = p.min(m - i);
    }
    p.max(1)
}

/// Past evaluations, most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationHistory {
    capacity: usize,
    entries: VecDeque<(f64, Vec<f64>)>,
}

impl EvaluationHistory {
    pub fn new(capacity: usize) -> Self {
        EvaluationHistory {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    /// Adds an evaluation at a `lambda` above every stored one.
    pub fn push(&mut self, lambda: f64, value: Vec<f64>) -> Result<()> {
        if let Some((last, _)) = self.entries.front() {
            if !(lambda > *last) {
                return Err(invalid(
                    "history lambdas must increase along the trajectory",
                ));
            }
        }
        self.entries.push_front((lambda, value));
        self.entries.truncate(self.capacity);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn lambda(&self, k: usize) -> f64 {
        self.entries[k].0
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.entries[k].1
    }
}

/// Per-step trace record. Only the documented keys are serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub i: usize,
    pub t: f64,
    pub lambda: f64,
    pub method: String,
    pub gamma_pred: Option<f64>,
    pub gamma_corr: Option<f64>,
    pub coeffs: Vec<f64>,
    pub cmr: Vec<f64>,
    pub x_norm: f64,
    #[serde(skip)]
    pub corr_coeffs: Option<Vec<f64>>,
    #[serde(skip)]
    pub corr_provenance: Option<Provenance>,
    #[serde(skip)]
    pub pred_provenance: Option<Provenance>,
    #[serde(skip)]
    pub x_pred: Vec<f64>,
    #[serde(skip)]
    pub x_corr: Option<Vec<f64>>,
}

/// Writes one JSON object per line.
pub fn write_trace(trace: &[StepRecord], mut out: impl Write) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Mutable state of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// Corrected sample at `t_i`.
    pub x: Vec<f64>,
    pub history: EvaluationHistory,
    /// Index `i` of the current time `t_i`.
    pub step: usize,
    pub trace: Vec<StepRecord>,
}

impl SolverState {
    /// State at `t_0` once the first evaluation is known.
    pub fn new(
        cfg: &SolverConfig,
        grid: &TimeGrid,
        x_t: Vec<f64>,
        first_eval: Vec<f64>,
    ) -> Result<Self> {
        let mut history = EvaluationHistory::new(cfg.order + 1);
        history.push(grid.lambdas()[0], first_eval)?;
        Ok(SolverState {
            x: x_t,
            history,
            step: 0,
            trace: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Predictor,
    Corrector,
}

/// Coefficients for one stage of step `i`, optionally forcing the shape value
/// (RBF method only). Singular RBF systems fall back to Adams.
pub fn select_coefficients(
    cfg: &SolverConfig,
    stage: Stage,
    i: usize,
    nodes: &NodeSet,
    lo: f64,
    hi: f64,
    shape: Option<ShapeValue>,
) -> Result<CoefficientVector> {
    match &cfg.method {
        Method::Euler => euler_coefficients(lo, hi),
        Method::Equal => equal_coefficients(nodes.len(), lo, hi),
        Method::Adams => adams_coefficients(nodes, lo, hi),
        Method::Rbf(sched) => {
            let value = shape
                .map(|v| v.resolve(sched.threshold))
                .unwrap_or_else(|| match stage {
                    Stage::Predictor => sched.pred(i),
                    Stage::Corrector => sched.corr(i),
                });
            match value {
                ShapeValue::Adams => adams_coefficients(nodes, lo, hi),
                ShapeValue::LogGamma(g) => {
                    match rbf_coefficients_with(
                        nodes,
                        lo,
                        hi,
                        g.exp(),
                        cfg.include_constant,
                        &cfg.quadrature,
                    ) {
                        Err(Error::Singular { .. }) => adams_coefficients(nodes, lo, hi),
                        other => other,
                    }
                }
            }
        }
    }
}

/// Predictor node set for step `i`: `lambda_i, lambda_{i-1}, ...`.
pub fn predictor_nodes(cfg: &SolverConfig, grid: &TimeGrid, i: usize) -> Result<NodeSet> {
    let p = effective_order(cfg, grid.steps(), i);
    let lam = grid.lambdas();
    NodeSet::new((0..p).map(|k| lam[i - k]).collect(), grid.widths()[i])
}

/// Corrector node set for step `i`: `lambda_{i+1}, lambda_i, ...`.
pub fn corrector_nodes(cfg: &SolverConfig, grid: &TimeGrid, i: usize) -> Result<NodeSet> {
    let p = effective_order(cfg, grid.steps(), i);
    let lam = grid.lambdas();
    let width = match cfg.corrector_width {
        CorrectorWidth::Current => grid.widths()[i],
        CorrectorWidth::Next => *grid.widths().get(i + 1).unwrap_or(&grid.widths()[i]),
    };
    NodeSet::new((0..=p).map(|k| lam[i + 1 - k]).collect(), width)
}

/// `(sigma_{i+1} / sigma_i) x + sigma_{i+1} sum_j c_j data_j`.
pub fn exponential_update(
    grid: &TimeGrid,
    i: usize,
    x: &[f64],
    c: &CoefficientVector,
    data: &[&[f64]],
) -> Vec<f64> {
    let s = grid.sigmas();
    let ratio = s[i + 1] / s[i];
    let mut acc = vec![0.0; x.len()];
    c.apply(data, &mut acc);
    x.iter()
        .zip(&acc)
        .map(|(xv, a)| ratio * xv + s[i + 1] * a)
        .collect()
}

fn check_finite(v: &[f64], step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

pub fn predictor_step(
    state: &SolverState,
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, CoefficientVector)> {
    predictor_step_with(state, grid, cfg, None)
}

pub fn predictor_step_with(
    state: &SolverState,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    shape: Option<ShapeValue>,
) -> Result<(Vec<f64>, CoefficientVector)> {
    let i = state.step;
    let nodes = predictor_nodes(cfg, grid, i)?;
    if state.history.len() < nodes.len() {
        return Err(Error::InsufficientHistory {
            needed: nodes.len(),
            available: state.history.len(),
        });
    }
    let lam = grid.lambdas();
    let c = select_coefficients(cfg, Stage::Predictor, i, &nodes, lam[i], lam[i + 1], shape)?;
    let data: Vec<&[f64]> = (0..nodes.len()).map(|k| state.history.value(k)).collect();
    let x = exponential_update(grid, i, &state.x, &c, &data);
    check_finite(&x, i)?;
    Ok((x, c))
}

pub fn corrector_step(
    state: &SolverState,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    new_eval: &[f64],
) -> Result<(Vec<f64>, CoefficientVector)> {
    corrector_step_with(state, grid, cfg, new_eval, None)
}

pub fn corrector_step_with(
    state: &SolverState,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    new_eval: &[f64],
    shape: Option<ShapeValue>,
) -> Result<(Vec<f64>, CoefficientVector)> {
    let i = state.step;
    let nodes = corrector_nodes(cfg, grid, i)?;
    if state.history.len() + 1 < nodes.len() {
        return Err(Error::InsufficientHistory {
            needed: nodes.len() - 1,
            available: state.history.len(),
        });
    }
    let lam = grid.lambdas();
    let c = select_coefficients(cfg, Stage::Corrector, i, &nodes, lam[i], lam[i + 1], shape)?;
    let mut data: Vec<&[f64]> = vec![new_eval];
    data.extend((0..nodes.len() - 1).map(|k| state.history.value(k)));
    let x = exponential_update(grid, i, &state.x, &c, &data);
    check_finite(&x, i)?;
    Ok((x, c))
}

/// Moves the state to `t_{i+1}` after a corrector (or skipped corrector).
pub fn advance(
    state: &mut SolverState,
    grid: &TimeGrid,
    x_next: Vec<f64>,
    new_eval: Vec<f64>,
) -> Result<()> {
    state
        .history
        .push(grid.lambdas()[state.step + 1], new_eval)?;
    state.x = x_next;
    state.step += 1;
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds a trace record for step `i`.
pub fn step_record(
    grid: &TimeGrid,
    i: usize,
    pred: &CoefficientVector,
    x_pred: &[f64],
    corr: Option<(&CoefficientVector, &[f64])>,
) -> StepRecord {
    let gamma = |p: Provenance| match p {
        Provenance::Rbf { gamma, .. } => Some(gamma),
        _ => None,
    };
    let x_out = corr.map(|(_, x)| x).unwrap_or(x_pred);
    StepRecord {
        i,
        t: grid.times()[i + 1],
        lambda: grid.lambdas()[i + 1],
        method: pred.provenance().name().to_string(),
        gamma_pred: gamma(pred.provenance()),
        gamma_corr: corr.and_then(|(c, _)| gamma(c.provenance())),
        coeffs: pred.values().to_vec(),
        cmr: coefficient_magnitude_ratio(pred).unwrap_or_default(),
        x_norm: norm(x_out),
        corr_coeffs: corr.map(|(c, _)| c.values().to_vec()),
        corr_provenance: corr.map(|(c, _)| c.provenance()),
        pred_provenance: Some(pred.provenance()),
        x_pred: x_pred.to_vec(),
        x_corr: corr.map(|(_, x)| x.to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub x: Vec<f64>,
    pub nfe: usize,
    pub trace: Vec<StepRecord>,
}

/// Runs the sampler from `x_t` at `t_0` to `t_M`.
pub fn sample<M: ModelEvaluator + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    x_t: &[f64],
) -> Result<SampleOutput> {
    cfg.validate()?;
    if let Method::Rbf(s) = &cfg.method {
        s.validate(grid.steps())?;
    }
    if x_t.len() != model.dim() {
        return Err(invalid(format!(
            "x_T has dimension {} but the model expects {}",
            x_t.len(),
            model.dim()
        )));
    }
    let counted = CountingEvaluator::new(model);
    let mut nfe = 0usize;
    let mut eval = |x: &[f64], lambda: f64, step: usize| -> Result<Vec<f64>> {
        nfe += 1;
        let v = counted.evaluate(x, lambda);
        if v.len() != x.len() {
            return Err(invalid("model returned a vector of the wrong dimension"));
        }
        check_finite(&v, step)?;
        Ok(v)
    };
    let m = grid.steps();
    let first = eval(x_t, grid.lambdas()[0], 0)?;
    let mut state = SolverState::new(cfg, grid, x_t.to_vec(), first)?;
    let corrects = cfg.corrects();
    loop {
        let i = state.step;
        let (x_pred, c_pred) = predictor_step(&state, grid, cfg)?;
        if i + 1 == m {
            if cfg.record_trace {
                state
                    .trace
                    .push(step_record(grid, i, &c_pred, &x_pred, None));
            }
            let expected = nfe;
            if counted.count() != expected || expected != m {
                return Err(Error::CounterMismatch {
                    expected: m,
                    counted: counted.count(),
                });
            }
            return Ok(SampleOutput {
                x: x_pred,
                nfe: expected,
                trace: state.trace,
            });
        }
        let e = eval(&x_pred, grid.lambdas()[i + 1], i + 1)?;
        let (x_next, c_corr) = if corrects {
            let (x, c) = corrector_step(&state, grid, cfg, &e)?;
            (x, Some(c))
        } else {
            (x_pred.clone(), None)
        };
        if cfg.record_trace {
            let corr = c_corr.as_ref().map(|c| (c, x_next.as_slice()));
            state
                .trace
                .push(step_record(grid, i, &c_pred, &x_pred, corr));
        }
        advance(&mut state, grid, x_next, e)?;
    }
}
