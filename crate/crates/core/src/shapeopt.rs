//! Per-step grid search for the shape parameters.
//!
//! The batch is advanced in lockstep exactly as [`sample`](crate::sampler::sample)
//! would advance it. After the evaluation at `t_{i+1}` every candidate
//! `(gamma_corr[i], gamma_pred[i+1])` is scored by the two-step prediction
//! `x_pred[i+2]` against the forward-diffused target at `t_{i+2}`. The scores
//! reuse cached evaluations only.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sampler::{
    advance, corrector_step_with, predictor_nodes, predictor_step_with, sample,
    select_coefficients, CountingEvaluator, Method, ModelEvaluator, ShapeEntry, ShapeSchedule,
    SolverConfig, SolverState, Stage,
};
pub use crate::sampler::{ShapeMode, ShapeValue, DEFAULT_ADAMS_THRESHOLD};
use crate::schedule::{build_time_grid, NoiseSchedule, Spacing, TimeGrid};

pub const DEFAULT_RESOLUTION: usize = 33;
pub const DEFAULT_LOG_GAMMA_RANGE: (f64, f64) = (-2.0, 2.0);
pub const DEFAULT_BATCH: usize = 128;
pub const MIN_REFERENCE_NFE: usize = 100;
/// Relative loss difference below which two candidates tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPair {
    pub x0_target: Vec<f64>,
    pub xt_target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpec {
    pub log_gamma_range: (f64, f64),
    pub resolution: usize,
    pub mode: ShapeMode,
    /// Keep the Adams marker on each axis. When unset, grid points at or
    /// above the threshold are dropped instead of mapped to the marker.
    pub include_adams_candidate: bool,
    pub threshold: f64,
    pub batch: Vec<TargetPair>,
}

impl SearchSpec {
    pub fn new(batch: Vec<TargetPair>) -> Self {
        SearchSpec {
            log_gamma_range: DEFAULT_LOG_GAMMA_RANGE,
            resolution: DEFAULT_RESOLUTION,
            mode: ShapeMode::SplitJoint,
            include_adams_candidate: true,
            threshold: DEFAULT_ADAMS_THRESHOLD,
            batch,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let (lo, hi) = self.log_gamma_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(format!("log gamma range [{lo}, {hi}] is empty")));
        }
        if self.resolution < 2 {
            return Err(invalid("resolution must be at least 2"));
        }
        if self.batch.is_empty() {
            return Err(invalid("target batch is empty"));
        }
        for pair in &self.batch {
            if pair.x0_target.len() != dim || pair.xt_target.len() != dim {
                return Err(invalid(format!(
                    "target pair dimension differs from model dimension {dim}"
                )));
            }
            if !pair
                .x0_target
                .iter()
                .chain(&pair.xt_target)
                .all(|v| v.is_finite())
            {
                return Err(invalid("target pair is not finite"));
            }
        }
        Ok(())
    }

    /// Candidate values for one axis, in ascending order with the Adams
    /// marker (if any) last.
    pub fn axis(&self) -> Vec<ShapeValue> {
        let (lo, hi) = self.log_gamma_range;
        let n = self.resolution;
        let mut out: Vec<ShapeValue> = Vec::with_capacity(n + 1);
        let mut has_adams = false;
        for k in 0..n {
            let g = if k + 1 == n {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            };
            match ShapeValue::LogGamma(g).resolve(self.threshold) {
                ShapeValue::Adams if !self.include_adams_candidate => {}
                ShapeValue::Adams if has_adams => {}
                ShapeValue::Adams => has_adams = true,
                v => out.push(v),
            }
        }
        if self.include_adams_candidate {
            out.push(ShapeValue::Adams);
        }
        out
    }
}

/// `alpha_t x0 + sigma_t xT`.
pub fn intermediate_target(
    schedule: &NoiseSchedule,
    pair: &TargetPair,
    t: f64,
) -> Result<Vec<f64>> {
    let (a, s) = schedule.alpha_sigma(t)?;
    Ok(diffuse(pair, a, s))
}

fn diffuse(pair: &TargetPair, alpha: f64, sigma: f64) -> Vec<f64> {
    pair.x0_target
        .iter()
        .zip(&pair.xt_target)
        .map(|(x0, xt)| alpha * x0 + sigma * xt)
        .collect()
}

/// Reference solver used to build targets: third-order Adams
/// predictor-corrector on a uniform-lambda grid.
pub fn reference_config() -> SolverConfig {
    SolverConfig::adams(3)
}

/// Draws `n_pairs` standard-normal `x_T` and pairs each with the sample
/// produced by the reference solver at `reference_nfe` steps.
pub fn generate_target_set<M: ModelEvaluator + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    reference_nfe: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<TargetPair>> {
    if reference_nfe < MIN_REFERENCE_NFE {
        return Err(invalid(format!(
            "reference NFE {reference_nfe} is below {MIN_REFERENCE_NFE}"
        )));
    }
    if n_pairs == 0 {
        return Err(invalid("n_pairs must be positive"));
    }
    let grid = build_time_grid(schedule, reference_nfe, Spacing::UniformLambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let noises: Vec<Vec<f64>> = (0..n_pairs)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let cfg = reference_config();
    let run = |xt: &Vec<f64>| -> Result<TargetPair> {
        let out = sample(model, &grid, &cfg, xt)?;
        Ok(TargetPair {
            x0_target: out.x,
            xt_target: xt.clone(),
        })
    };
    if model.concurrent() {
        noises.par_iter().map(run).collect()
    } else {
        noises.iter().map(run).collect()
    }
}

/// `x_pred[i+2]` from the corrector at step `i` followed by the predictor at
/// step `i + 1`. Uses only the history and `new_eval` (the evaluation at
/// `t_{i+1}`).
pub fn composite_two_step_prediction(
    state: &SolverState,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    new_eval: &[f64],
    gamma_corr: ShapeValue,
    gamma_pred: ShapeValue,
) -> Result<Vec<f64>> {
    if state.step + 2 > grid.steps() {
        return Err(invalid(format!(
            "step {} has no two-step successor on a {}-step grid",
            state.step,
            grid.steps()
        )));
    }
    let (x_corr, _) = corrector_step_with(state, grid, cfg, new_eval, Some(gamma_corr))?;
    let mut next = state.clone();
    advance(&mut next, grid, x_corr, new_eval.to_vec())?;
    let (x_pred, _) = predictor_step_with(&next, grid, cfg, Some(gamma_pred))?;
    Ok(x_pred)
}

/// Outcome of the search at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSearch {
    pub i: usize,
    pub pairs_evaluated: usize,
    pub log_gamma_corr: ShapeValue,
    pub log_gamma_pred: ShapeValue,
    /// Batch MSE of the chosen pair at `t_{i+2}`.
    pub loss: f64,
    /// Batch MSE of the Adams pair from the same state.
    pub adams_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimization {
    pub schedule: ShapeSchedule,
    pub steps: Vec<StepSearch>,
    /// Batch MSE of the final sample against the target at `t_M`.
    pub final_mse: f64,
    pub nfe: usize,
}

/// Mean squared error over the batch and dimensions.
pub fn batch_mse(xs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let n: usize = xs.iter().map(Vec::len).sum();
    let s: f64 = xs
        .iter()
        .zip(targets)
        .map(|(x, t)| x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    s / n.max(1) as f64
}

/// Final-sample MSE of `cfg` over the batch against the targets at `t_M`.
pub fn batch_final_mse<M: ModelEvaluator + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    batch: &[TargetPair],
) -> Result<f64> {
    let m = grid.steps();
    let run = |pair: &TargetPair| sample(model, grid, cfg, &pair.xt_target).map(|o| o.x);
    let xs: Vec<Vec<f64>> = if model.concurrent() {
        batch.par_iter().map(run).collect::<Result<_>>()?
    } else {
        batch.iter().map(run).collect::<Result<_>>()?
    };
    let targets: Vec<Vec<f64>> = batch
        .iter()
        .map(|p| diffuse(p, grid.alphas()[m], grid.sigmas()[m]))
        .collect();
    Ok(batch_mse(&xs, &targets))
}

/// Tie-break rank: the Adams marker first, then larger log gamma.
fn rank(v: ShapeValue) -> f64 {
    match v {
        ShapeValue::Adams => f64::INFINITY,
        ShapeValue::LogGamma(g) => g,
    }
}

fn prefer(a: (ShapeValue, ShapeValue), b: (ShapeValue, ShapeValue)) -> bool {
    let both = |p: (ShapeValue, ShapeValue)| p.0 == ShapeValue::Adams && p.1 == ShapeValue::Adams;
    if both(a) != both(b) {
        return both(a);
    }
    (rank(a.0), rank(a.1)) > (rank(b.0), rank(b.1))
}

/// Per-candidate cache for one step.
struct StepCache {
    /// `x_corr` per batch element, per corrector candidate.
    corr: Vec<Option<Vec<Vec<f64>>>>,
    /// Unscaled predictor sums per batch element, per predictor candidate.
    pred: Vec<Option<Vec<Vec<f64>>>>,
}

/// Runs the search and returns the schedule with its diagnostics.
pub fn optimize_shape_parameters<M: ModelEvaluator + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    plan: &SearchSpec,
) -> Result<Optimization> {
    let d = model.dim();
    plan.validate(d)?;
    let m = grid.steps();
    if m < 3 {
        return Err(invalid(format!("shape optimization needs M >= 3, got {m}")));
    }
    if !cfg.use_corrector {
        return Err(invalid("shape optimization needs the corrector enabled"));
    }
    let mut schedule = ShapeSchedule::empty(m, cfg.order);
    schedule.mode = plan.mode;
    schedule.threshold = plan.threshold;
    let mut cfg = cfg.clone();
    cfg.method = Method::Rbf(schedule.clone());
    cfg.validate()?;

    let axis = plan.axis();
    let counted = CountingEvaluator::new(model);
    let eval_all = |xs: &[Vec<f64>], lambda: f64, step: usize| -> Result<Vec<Vec<f64>>> {
        let f = |x: &Vec<f64>| {
            let v = counted.evaluate(x, lambda);
            if v.len() != d || !v.iter().all(|x| x.is_finite()) {
                Err(Error::NonFinite { step })
            } else {
                Ok(v)
            }
        };
        if counted.concurrent() {
            xs.par_iter().map(f).collect()
        } else {
            xs.iter().map(f).collect()
        }
    };

    let lam = grid.lambdas();
    let x_t: Vec<Vec<f64>> = plan.batch.iter().map(|p| p.xt_target.clone()).collect();
    let first = eval_all(&x_t, lam[0], 0)?;
    let mut states = x_t
        .into_iter()
        .zip(first)
        .map(|(x, e)| SolverState::new(&cfg, grid, x, e))
        .collect::<Result<Vec<_>>>()?;
    let mut steps = Vec::with_capacity(m.saturating_sub(1));

    for i in 0..m {
        let preds = states
            .iter()
            .map(|s| predictor_step_with(s, grid, &cfg, Some(schedule.pred(i))).map(|(x, _)| x))
            .collect::<Result<Vec<_>>>()?;
        if i + 1 == m {
            let targets: Vec<Vec<f64>> = plan
                .batch
                .iter()
                .map(|p| diffuse(p, grid.alphas()[m], grid.sigmas()[m]))
                .collect();
            let expected = m * plan.batch.len();
            if counted.count() != expected {
                return Err(Error::CounterMismatch {
                    expected,
                    counted: counted.count(),
                });
            }
            return Ok(Optimization {
                schedule,
                steps,
                final_mse: batch_mse(&preds, &targets),
                nfe: counted.count(),
            });
        }
        let evals = eval_all(&preds, lam[i + 1], i + 1)?;
        let search = search_step(
            &states,
            &evals,
            grid,
            &cfg,
            plan,
            &axis,
            schedule.pred(i),
            i,
        )?;
        schedule.entries[i].log_gamma_corr = Some(search.log_gamma_corr);
        schedule.entries[i + 1].log_gamma_pred = Some(search.log_gamma_pred);
        steps.push(search.clone());
        for (state, e) in states.iter_mut().zip(evals) {
            let (x, _) = corrector_step_with(state, grid, &cfg, &e, Some(search.log_gamma_corr))?;
            advance(state, grid, x, e)?;
        }
    }
    unreachable!("the loop returns on its final step")
}

#[allow(clippy::too_many_arguments)]
fn search_step(
    states: &[SolverState],
    evals: &[Vec<f64>],
    grid: &TimeGrid,
    cfg: &SolverConfig,
    plan: &SearchSpec,
    axis: &[ShapeValue],
    previous_pred: ShapeValue,
    i: usize,
) -> Result<StepSearch> {
    let (alpha, sigma) = (grid.alphas()[i + 2], grid.sigmas()[i + 2]);
    let targets: Vec<Vec<f64>> = plan
        .batch
        .iter()
        .map(|p| diffuse(p, alpha, sigma))
        .collect();
    let n_entries: usize = targets.iter().map(Vec::len).sum::<usize>().max(1);
    let energy = targets.iter().flatten().map(|v| v * v).sum::<f64>() / n_entries as f64;

    // The Adams marker is scored even when it is not a candidate.
    let mut values: Vec<ShapeValue> = axis.to_vec();
    if !values.contains(&ShapeValue::Adams) {
        values.push(ShapeValue::Adams);
    }
    if !values.contains(&previous_pred) {
        values.push(previous_pred);
    }
    let cache = build_cache(states, evals, grid, cfg, &values, i)?;
    let index = |v: ShapeValue| {
        values
            .iter()
            .position(|&w| w == v)
            .expect("value is cached")
    };

    let ratio = grid.sigmas()[i + 2] / grid.sigmas()[i + 1];
    let s_next = grid.sigmas()[i + 2];
    let counter = AtomicUsize::new(0);
    let loss = |gc: ShapeValue, gp: ShapeValue, count: bool| -> f64 {
        if count {
            counter.fetch_add(1, Ordering::Relaxed);
        }
        let (Some(xc), Some(acc)) = (&cache.corr[index(gc)], &cache.pred[index(gp)]) else {
            return f64::NAN;
        };
        let mut total = 0.0;
        for b in 0..targets.len() {
            for k in 0..targets[b].len() {
                let x = ratio * xc[b][k] + s_next * acc[b][k];
                let r = x - targets[b][k];
                total += r * r;
            }
        }
        total / n_entries as f64
    };

    let pick = |pairs: &[(ShapeValue, ShapeValue)]| -> Option<((ShapeValue, ShapeValue), f64)> {
        let losses: Vec<f64> = pairs
            .par_iter()
            .map(|&(gc, gp)| loss(gc, gp, true))
            .collect();
        let best = losses
            .iter()
            .copied()
            .filter(|l| l.is_finite())
            .fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return None;
        }
        let tol = TIE_TOLERANCE * best.max(energy);
        let mut chosen: Option<((ShapeValue, ShapeValue), f64)> = None;
        for (&pair, &l) in pairs.iter().zip(&losses) {
            if !(l.is_finite() && l <= best + tol) {
                continue;
            }
            match chosen {
                Some((c, _)) if !prefer(pair, c) => {}
                _ => chosen = Some((pair, l)),
            }
        }
        chosen
    };

    let none_finite = || Error::NonFinite { step: i };
    let (pair, l) = match plan.mode {
        ShapeMode::SplitJoint => {
            let pairs: Vec<_> = axis
                .iter()
                .flat_map(|&gc| axis.iter().map(move |&gp| (gc, gp)))
                .collect();
            pick(&pairs).ok_or_else(none_finite)?
        }
        ShapeMode::Shared => {
            let pairs: Vec<_> = axis.iter().map(|&g| (g, g)).collect();
            pick(&pairs).ok_or_else(none_finite)?
        }
        ShapeMode::SplitIndependent => {
            let held = previous_pred;
            let pairs: Vec<_> = axis.iter().map(|&gc| (gc, held)).collect();
            let ((gc, _), _) = pick(&pairs).ok_or_else(none_finite)?;
            let pairs: Vec<_> = axis.iter().map(|&gp| (gc, gp)).collect();
            pick(&pairs).ok_or_else(none_finite)?
        }
    };
    Ok(StepSearch {
        i,
        pairs_evaluated: counter.load(Ordering::Relaxed),
        log_gamma_corr: pair.0,
        log_gamma_pred: pair.1,
        loss: l,
        adams_loss: loss(ShapeValue::Adams, ShapeValue::Adams, false),
    })
}

fn build_cache(
    states: &[SolverState],
    evals: &[Vec<f64>],
    grid: &TimeGrid,
    cfg: &SolverConfig,
    values: &[ShapeValue],
    i: usize,
) -> Result<StepCache> {
    let lam = grid.lambdas();
    let pred_nodes = predictor_nodes(cfg, grid, i + 1)?;
    let corr = values
        .par_iter()
        .map(|&gc| {
            states
                .iter()
                .zip(evals)
                .map(|(s, e)| corrector_step_with(s, grid, cfg, e, Some(gc)).map(|(x, _)| x))
                .collect::<Result<Vec<_>>>()
                .ok()
        })
        .collect();
    let pred = values
        .par_iter()
        .map(|&gp| {
            let c = select_coefficients(
                cfg,
                Stage::Predictor,
                i + 1,
                &pred_nodes,
                lam[i + 1],
                lam[i + 2],
                Some(gp),
            )
            .ok()?;
            let sums = states
                .iter()
                .zip(evals)
                .map(|(s, e)| {
                    let mut data: Vec<&[f64]> = vec![e.as_slice()];
                    data.extend((0..c.len() - 1).map(|k| s.history.value(k)));
                    let mut acc = vec![0.0; e.len()];
                    c.apply(&data, &mut acc);
                    acc
                })
                .collect();
            Some(sums)
        })
        .collect();
    Ok(StepCache { corr, pred })
}

/// Element-wise mean in log space. Any Adams marker at a slot wins.
pub fn batch_average_schedules(schedules: &[ShapeSchedule]) -> Result<ShapeSchedule> {
    let first = schedules
        .first()
        .ok_or_else(|| invalid("no schedules to average"))?;
    let n = first.entries.len();
    if schedules
        .iter()
        .any(|s| s.entries.len() != n || s.nfe != first.nfe || s.order != first.order)
    {
        return Err(invalid("schedules to average have mismatched shapes"));
    }
    let average = |slot: &dyn Fn(&ShapeEntry) -> Option<ShapeValue>,
                   i: usize|
     -> Result<Option<ShapeValue>> {
        let vals: Vec<Option<ShapeValue>> = schedules.iter().map(|s| slot(&s.entries[i])).collect();
        if vals.iter().all(Option::is_none) {
            return Ok(None);
        }
        if vals.iter().any(Option::is_none) {
            return Err(invalid(format!(
                "slot {i} is set in some schedules but not others"
            )));
        }
        if vals.contains(&Some(ShapeValue::Adams)) {
            return Ok(Some(ShapeValue::Adams));
        }
        let sum: f64 = vals.iter().flatten().filter_map(|v| v.log_gamma()).sum();
        Ok(Some(ShapeValue::LogGamma(sum / vals.len() as f64)))
    };
    let entries = (0..n)
        .map(|i| {
            Ok(ShapeEntry {
                i,
                log_gamma_pred: average(&|e| e.log_gamma_pred, i)?,
                log_gamma_corr: average(&|e| e.log_gamma_corr, i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapeSchedule {
        entries,
        ..first.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{corrector_step, predictor_step, FnModel};

    fn grid(m: usize) -> TimeGrid {
        build_time_grid(&NoiseSchedule::default(), m, Spacing::UniformLambda).unwrap()
    }

    fn linear() -> FnModel<impl Fn(&[f64], f64) -> Vec<f64> + Sync> {
        FnModel::new(1, |x: &[f64], _| vec![-0.5 * x[0] + 1.0])
    }

    fn smooth() -> FnModel<impl Fn(&[f64], f64) -> Vec<f64> + Sync> {
        FnModel::new(2, |x: &[f64], l: f64| {
            vec![0.3 * x[0] + (2.0 * l).sin(), -0.2 * x[1] + 0.1 * l]
        })
    }

    fn targets<M: ModelEvaluator>(model: &M, n: usize, seed: u64) -> Vec<TargetPair> {
        generate_target_set(model, &NoiseSchedule::default(), 120, n, seed).unwrap()
    }

    #[test]
    fn axis_has_33_entries_with_adams_last() {
        let plan = SearchSpec::new(vec![]);
        let axis = plan.axis();
        assert_eq!(axis.len(), 33);
        assert_eq!(axis[0], ShapeValue::LogGamma(-2.0));
        assert_eq!(axis[31], ShapeValue::LogGamma(1.875));
        assert_eq!(axis[32], ShapeValue::Adams);
        let mut no_adams = plan.clone();
        no_adams.include_adams_candidate = false;
        assert_eq!(no_adams.axis().len(), 32);
        assert!(!no_adams.axis().contains(&ShapeValue::Adams));
    }

    #[test]
    fn intermediate_target_matches_scalar_recomputation() {
        let sched = NoiseSchedule::default();
        let pair = TargetPair {
            x0_target: vec![1.0, -2.0],
            xt_target: vec![0.5, 0.25],
        };
        let t = 0.5;
        let (a, s) = sched.alpha_sigma(t).unwrap();
        let v = intermediate_target(&sched, &pair, t).unwrap();
        assert_eq!(v, vec![a * 1.0 + s * 0.5, a * -2.0 + s * 0.25]);
        let top = intermediate_target(&sched, &pair, sched.t_max()).unwrap();
        assert!((top[0] - 0.5).abs() < 0.01);
        assert!(intermediate_target(&sched, &pair, 2.0).is_err());
    }

    #[test]
    fn target_set_is_deterministic_and_exact_for_constant_model() {
        let model = FnModel::new(2, |_: &[f64], _| vec![0.3, -0.7]);
        let sched = NoiseSchedule::default();
        let a = generate_target_set(&model, &sched, 100, 3, 9).unwrap();
        let b = generate_target_set(&model, &sched, 100, 3, 9).unwrap();
        assert_eq!(a, b);
        let (l0, l1) = sched.lambda_range();
        let (s0, s1) = (
            crate::schedule::sigma_of_lambda(l0),
            crate::schedule::sigma_of_lambda(l1),
        );
        for p in &a {
            for k in 0..2 {
                let v = [0.3, -0.7][k];
                let want = s1 / s0 * p.xt_target[k] + s1 * v * (l1.exp() - l0.exp());
                assert!((p.x0_target[k] - want).abs() < 1e-10);
            }
        }
        assert!(generate_target_set(&model, &sched, 99, 3, 9).is_err());
    }

    #[test]
    fn composite_matches_step_functions_and_adams_dispatch() {
        let g = grid(6);
        let model = smooth();
        let mut cfg = SolverConfig::new(3, Method::Rbf(ShapeSchedule::empty(6, 3)));
        let x_t = vec![0.4, -1.1];
        let mut state =
            SolverState::new(&cfg, &g, x_t.clone(), model.evaluate(&x_t, g.lambdas()[0])).unwrap();
        for _ in 0..2 {
            let (xp, _) = predictor_step(&state, &g, &cfg).unwrap();
            let e = model.evaluate(&xp, g.lambdas()[state.step + 1]);
            let (xc, _) = corrector_step(&state, &g, &cfg, &e).unwrap();
            advance(&mut state, &g, xc, e).unwrap();
        }
        let (xp, _) = predictor_step(&state, &g, &cfg).unwrap();
        let e = model.evaluate(&xp, g.lambdas()[3]);
        let via_rbf = composite_two_step_prediction(
            &state,
            &g,
            &cfg,
            &e,
            ShapeValue::Adams,
            ShapeValue::Adams,
        )
        .unwrap();
        cfg.method = Method::Adams;
        let via_adams = composite_two_step_prediction(
            &state,
            &g,
            &cfg,
            &e,
            ShapeValue::LogGamma(0.0),
            ShapeValue::LogGamma(0.0),
        )
        .unwrap();
        assert_eq!(via_rbf, via_adams);
    }

    #[test]
    fn composite_is_exact_for_constant_model() {
        let g = grid(5);
        let v = [0.6];
        let cfg = SolverConfig::new(2, Method::Rbf(ShapeSchedule::empty(5, 2)));
        let x_t = vec![1.5];
        let state = SolverState::new(&cfg, &g, x_t.clone(), v.to_vec()).unwrap();
        let (s, l) = (g.sigmas(), g.lambdas());
        let exact = s[2] / s[0] * x_t[0] + s[2] * v[0] * (l[2].exp() - l[0].exp());
        for gc in [-2.0, 0.0, 1.5] {
            for gp in [-1.0, 0.7] {
                let x = composite_two_step_prediction(
                    &state,
                    &g,
                    &cfg,
                    &v,
                    ShapeValue::LogGamma(gc),
                    ShapeValue::LogGamma(gp),
                )
                .unwrap();
                assert!((x[0] - exact).abs() < 1e-12);
            }
        }
        let mut late = state.clone();
        late.step = 4;
        assert!(composite_two_step_prediction(
            &late,
            &g,
            &cfg,
            &v,
            ShapeValue::Adams,
            ShapeValue::Adams
        )
        .is_err());
    }

    #[test]
    fn split_joint_counts_1089_pairs_and_never_loses_to_adams() {
        let model = linear();
        let plan = SearchSpec::new(targets(&model, 8, 1));
        let g = grid(5);
        let out = optimize_shape_parameters(&model, &g, &SolverConfig::adams(3), &plan).unwrap();
        assert_eq!(out.steps.len(), 4);
        for s in &out.steps {
            assert_eq!(s.pairs_evaluated, 1089);
            assert!(s.loss <= s.adams_loss, "{s:?}");
        }
        assert_eq!(out.nfe, 5 * 8);
        assert_eq!(out.steps.last().unwrap().loss, out.final_mse);
        for e in &out.schedule.entries {
            for v in [e.log_gamma_pred, e.log_gamma_corr].into_iter().flatten() {
                if let ShapeValue::LogGamma(x) = v {
                    assert!((-2.0..=2.0).contains(&x));
                }
            }
        }
        assert!(out.schedule.entries[0].log_gamma_pred.is_none());
        assert!(out.schedule.entries[4].log_gamma_corr.is_none());
    }

    #[test]
    fn sampler_reproduces_optimizer_trajectory() {
        let model = smooth();
        let batch = targets(&model, 4, 2);
        let plan = SearchSpec::new(batch.clone());
        let g = grid(6);
        let cfg = SolverConfig::adams(2);
        let out = optimize_shape_parameters(&model, &g, &cfg, &plan).unwrap();
        let run = SolverConfig::new(2, Method::Rbf(out.schedule.clone()));
        let xs: Vec<Vec<f64>> = batch
            .iter()
            .map(|p| sample(&model, &g, &run, &p.xt_target).unwrap().x)
            .collect();
        let tg: Vec<Vec<f64>> = batch
            .iter()
            .map(|p| diffuse(p, g.alphas()[6], g.sigmas()[6]))
            .collect();
        assert_eq!(batch_mse(&xs, &tg), out.final_mse);
        assert_eq!(
            batch_final_mse(&model, &g, &run, &batch).unwrap(),
            out.final_mse
        );
    }

    #[test]
    fn constant_model_picks_adams_everywhere() {
        let model = FnModel::new(1, |_: &[f64], _| vec![0.25]);
        let plan = SearchSpec::new(targets(&model, 3, 4));
        let out =
            optimize_shape_parameters(&model, &grid(4), &SolverConfig::adams(3), &plan).unwrap();
        for s in &out.steps {
            assert_eq!(
                (s.log_gamma_corr, s.log_gamma_pred),
                (ShapeValue::Adams, ShapeValue::Adams)
            );
        }
    }

    #[test]
    fn modes_count_their_candidates() {
        let model = linear();
        let mut plan = SearchSpec::new(targets(&model, 4, 3));
        plan.resolution = 9;
        let g = grid(4);
        plan.mode = ShapeMode::Shared;
        let shared = optimize_shape_parameters(&model, &g, &SolverConfig::adams(2), &plan).unwrap();
        assert!(shared
            .steps
            .iter()
            .all(|s| s.pairs_evaluated == 9 && s.log_gamma_corr == s.log_gamma_pred));
        assert_eq!(shared.schedule.mode, ShapeMode::Shared);
        plan.mode = ShapeMode::SplitIndependent;
        let ind = optimize_shape_parameters(&model, &g, &SolverConfig::adams(2), &plan).unwrap();
        assert!(ind.steps.iter().all(|s| s.pairs_evaluated == 18));
    }

    #[test]
    fn optimization_is_deterministic() {
        let model = smooth();
        let mut plan = SearchSpec::new(targets(&model, 5, 11));
        plan.resolution = 11;
        let g = grid(5);
        let a = optimize_shape_parameters(&model, &g, &SolverConfig::adams(3), &plan).unwrap();
        let b = optimize_shape_parameters(&model, &g, &SolverConfig::adams(3), &plan).unwrap();
        assert_eq!(a.schedule, b.schedule);
        assert_eq!(a.final_mse, b.final_mse);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let model = linear();
        let g = grid(4);
        let cfg = SolverConfig::adams(2);
        assert!(optimize_shape_parameters(&model, &g, &cfg, &SearchSpec::new(vec![])).is_err());
        let mut plan = SearchSpec::new(targets(&model, 2, 0));
        plan.log_gamma_range = (1.0, 1.0);
        assert!(optimize_shape_parameters(&model, &g, &cfg, &plan).is_err());
        let plan = SearchSpec::new(targets(&model, 2, 0));
        assert!(optimize_shape_parameters(&model, &grid(2), &cfg, &plan).is_err());
        assert!(
            optimize_shape_parameters(&model, &g, &cfg.clone().predictor_only(), &plan).is_err()
        );
    }

    #[test]
    fn averaging_policy() {
        let a = ShapeSchedule::uniform(3, 2, 0.0);
        let b = ShapeSchedule::uniform(3, 2, 2.0 - 1e-9);
        assert_eq!(
            batch_average_schedules(std::slice::from_ref(&a)).unwrap(),
            a
        );
        let avg = batch_average_schedules(&[a.clone(), b]).unwrap();
        match avg.entries[1].log_gamma_pred {
            Some(ShapeValue::LogGamma(g)) => assert!((g - 1.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        let mut c = a.clone();
        c.entries[1].log_gamma_pred = Some(ShapeValue::Adams);
        let avg = batch_average_schedules(&[a.clone(), a.clone(), c]).unwrap();
        assert_eq!(avg.entries[1].log_gamma_pred, Some(ShapeValue::Adams));
        assert_eq!(avg.entries[0].log_gamma_pred, None);
        assert!(batch_average_schedules(&[a, ShapeSchedule::uniform(4, 2, 0.0)]).is_err());
        assert!(batch_average_schedules(&[]).is_err());
    }
}
