use std::io::Write;

use rbf_solver::basis::NodeSet;
use rbf_solver::coeffs::{
    adams_coefficients, coefficient_magnitude_ratio, equal_coefficients, euler_coefficients,
    rbf_coefficients, unipc_coefficients, CoefficientVector,
};
use rbf_solver::harness::{
    convergence_study, problem_by_name, relative_error, run_invariant_suite, seeded_x_t,
    trusted_solution, SuiteOptions, TestProblem, DEFAULT_REFERENCE_RESOLUTION,
};
use rbf_solver::sampler::{
    sample, write_trace, Method, ModelEvaluator, ShapeSchedule, SolverConfig,
};
use rbf_solver::schedule::{build_time_grid, NoiseSchedule, Spacing, Table};
use rbf_solver::shapeopt::{
    batch_final_mse, generate_target_set, optimize_shape_parameters, SearchSpec, ShapeMode,
    DEFAULT_BATCH,
};

use crate::args::{
    parse_list, parse_pair, parse_sweep, CoeffsArgs, Command, ConvergeArgs, FileConfig,
    OptimizeArgs, SampleArgs, ScheduleArgs, SolverArgs, VerifyArgs,
};
use crate::{sink, CliError};

pub fn dispatch(cmd: Command, file: &FileConfig, seed: u64) -> Result<(), CliError> {
    match cmd {
        Command::Coeffs(a) => coeffs(a, file),
        Command::Sample(a) => sample_cmd(a, file, seed),
        Command::Converge(a) => converge(a, file),
        Command::Optimize(a) => optimize(a, file, seed),
        Command::Verify(a) => verify(a, file),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn schedule(args: &ScheduleArgs, file: &FileConfig) -> Result<(NoiseSchedule, Spacing), CliError> {
    let name = args.schedule.clone().or_else(|| file.schedule.clone());
    let schedule = match name.as_deref() {
        None | Some("vp-linear") => NoiseSchedule::default(),
        Some("vp-cosine") => NoiseSchedule::vp_cosine(0.008, 0.9946)?,
        Some(path) => NoiseSchedule::tabulated(
            Table::from_csv_path(path).map_err(|e| usage(format!("schedule `{path}`: {e}")))?,
        ),
    };
    let spacing = match args.spacing.clone().or_else(|| file.spacing.clone()) {
        Some(s) => s.parse()?,
        None => Spacing::default(),
    };
    Ok((schedule, spacing))
}

fn file_log_gamma(file: &FileConfig) -> Result<Option<String>, CliError> {
    match &file.log_gamma {
        None => Ok(None),
        Some(serde_json::Value::Number(n)) => Ok(Some(n.to_string())),
        Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(usage(format!(
            "log_gamma must be a number or a sweep string, got {other}"
        ))),
    }
}

fn solver_config(args: &SolverArgs, file: &FileConfig, m: usize) -> Result<SolverConfig, CliError> {
    let method = args
        .method
        .clone()
        .or_else(|| file.method.clone())
        .unwrap_or_else(|| "adams".into());
    let default_p = if method == "euler" { 1 } else { 3 };
    let p = args.p.or(file.p).unwrap_or(default_p);
    let method = match method.as_str() {
        "adams" => Method::Adams,
        "equal" => Method::Equal,
        "euler" => Method::Euler,
        "rbf" => {
            if let Some(path) = args.shape.as_ref().or(file.shape.as_ref()) {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    usage(format!(
                        "cannot read shape schedule {}: {e}",
                        path.display()
                    ))
                })?;
                Method::Rbf(ShapeSchedule::from_json(&text)?)
            } else {
                let g = match args.log_gamma {
                    Some(g) => g,
                    None => match file_log_gamma(file)? {
                        Some(s) => s
                            .parse()
                            .map_err(|_| usage(format!("log_gamma `{s}` is not a number")))?,
                        None => return Err(usage("the rbf method needs --log-gamma or --shape")),
                    },
                };
                Method::Rbf(ShapeSchedule::uniform(m, p, g))
            }
        }
        other => return Err(usage(format!("unknown method `{other}`"))),
    };
    let mut cfg = if matches!(method, Method::Euler) {
        let mut c = SolverConfig::euler();
        c.order = p;
        c
    } else {
        SolverConfig::new(p, method)
    };
    cfg.use_corrector &= !args.no_corrector && file.corrector.unwrap_or(true);
    cfg.include_constant = !args.no_constant && file.constant.unwrap_or(true);
    cfg.validate()?;
    Ok(cfg)
}

fn problem(
    name: Option<&String>,
    file: &FileConfig,
    default: &str,
) -> Result<TestProblem, CliError> {
    let name = name
        .or(file.problem.as_ref())
        .map(String::as_str)
        .unwrap_or(default);
    Ok(problem_by_name(name)?)
}

fn fmt_row(cells: &[String]) -> String {
    cells.join(",")
}

fn coeffs(a: CoeffsArgs, file: &FileConfig) -> Result<(), CliError> {
    let [lo, hi] = match (&a.interval, &file.interval) {
        (Some(s), _) => parse_pair(s, "interval")?,
        (None, Some(v)) => *v,
        (None, None) => return Err(usage("coeffs needs --interval lo,hi")),
    };
    if !(hi > lo) {
        return Err(usage("interval must satisfy lo < hi"));
    }
    let nodes: Vec<f64> = match (&a.nodes, &file.nodes) {
        (Some(s), _) => parse_list(s, "nodes")?,
        (None, Some(v)) => v.clone(),
        (None, None) => {
            let p =
                a.p.or(file.p)
                    .ok_or_else(|| usage("coeffs needs --nodes or --p with --step"))?;
            let step = a.step.or(file.step).unwrap_or(hi - lo);
            (0..p).map(|k| lo - step * k as f64).collect()
        }
    };
    let nodes = NodeSet::new(nodes, hi - lo)?;
    let sweep = match a
        .log_gamma
        .clone()
        .map(Some)
        .unwrap_or(file_log_gamma(file)?)
    {
        Some(s) => Some(parse_sweep(&s)?),
        None => None,
    };
    let method = a
        .method
        .clone()
        .or_else(|| file.method.clone())
        .unwrap_or_else(|| {
            if sweep.is_some() {
                "rbf".into()
            } else {
                "adams".into()
            }
        });
    let include_constant = !a.no_constant && file.constant.unwrap_or(true);

    let mut rows: Vec<(Option<f64>, CoefficientVector)> = Vec::new();
    match method.as_str() {
        "rbf" => {
            let sweep = sweep.ok_or_else(|| usage("the rbf method needs --log-gamma"))?;
            for g in sweep {
                rows.push((
                    Some(g),
                    rbf_coefficients(&nodes, lo, hi, g.exp(), include_constant)?,
                ));
            }
        }
        "adams" => rows.push((None, adams_coefficients(&nodes, lo, hi)?)),
        "unipc" => rows.push((None, unipc_coefficients(&nodes, lo, hi)?)),
        "equal" => rows.push((None, equal_coefficients(nodes.len(), lo, hi)?)),
        "euler" => {
            if nodes.len() != 1 {
                return Err(usage("the euler method takes a single node"));
            }
            rows.push((None, euler_coefficients(lo, hi)?));
        }
        other => return Err(usage(format!("unknown method `{other}`"))),
    }

    let p = nodes.len();
    let mut out = sink(a.output.as_ref().or(file.output.as_ref()))?;
    let mut header = vec!["log_gamma".to_string()];
    header.extend((0..p).map(|k| format!("c_{k}")));
    header.push("sum".into());
    header.extend((0..p).map(|k| format!("cmr_{k}")));
    writeln!(out, "{}", fmt_row(&header))?;
    for (g, c) in rows {
        let mut cells = vec![g.map(|g| g.to_string()).unwrap_or_default()];
        cells.extend(c.values().iter().map(f64::to_string));
        cells.push(c.sum().to_string());
        cells.extend(coefficient_magnitude_ratio(&c)?.iter().map(f64::to_string));
        writeln!(out, "{}", fmt_row(&cells))?;
    }
    Ok(())
}

fn sample_cmd(a: SampleArgs, file: &FileConfig, seed: u64) -> Result<(), CliError> {
    let problem = problem(a.problem.as_ref(), file, "sine")?;
    let m = a.m.or(file.m).unwrap_or(20);
    let (schedule, spacing) = schedule(&a.schedule, file)?;
    let mut cfg = solver_config(&a.solver, file, m)?;
    let trace_path = a.trace.as_ref().or(file.trace.as_ref());
    cfg.record_trace = trace_path.is_some();
    let grid = build_time_grid(&schedule, m, spacing)?;
    let x_t = seeded_x_t(problem.dim(), seed);
    let out = sample(&problem, &grid, &cfg, &x_t)?;
    let reference = trusted_solution(
        &problem,
        &schedule,
        &x_t,
        DEFAULT_REFERENCE_RESOLUTION.max(10 * m),
    )?;
    let error = relative_error(&out.x, &reference);
    if let Some(path) = trace_path {
        write_trace(&out.trace, sink(Some(path))?)?;
    }
    let mut stdout = sink(None)?;
    writeln!(stdout, "problem,method,p,M,nfe,error")?;
    writeln!(
        stdout,
        "{},{},{},{},{},{}",
        problem.name,
        cfg.method.name(),
        cfg.order,
        m,
        out.nfe,
        error
    )?;
    Ok(())
}

fn converge(a: ConvergeArgs, file: &FileConfig) -> Result<(), CliError> {
    let problem = problem(a.problem.as_ref(), file, "sine")?;
    let m_list: Vec<usize> = match (&a.m_list, &file.m_list) {
        (Some(s), _) => parse_list(s, "M list")?,
        (None, Some(v)) => v.clone(),
        (None, None) => vec![10, 20, 40, 80, 160],
    };
    if m_list.len() < 3 || m_list.windows(2).any(|w| w[0] >= w[1]) || m_list[0] == 0 {
        return Err(usage(
            "M list must hold at least three increasing positive entries",
        ));
    }
    if a.solver.shape.is_some() || file.shape.is_some() {
        return Err(usage(
            "converge takes a uniform --log-gamma, not a shape schedule",
        ));
    }
    let (schedule, spacing) = schedule(&a.schedule, file)?;
    let cfg = solver_config(&a.solver, file, m_list[0])?;
    let report = convergence_study(&problem, &cfg, &m_list, &schedule, spacing)?;
    report.write_csv(sink(a.output.as_ref().or(file.output.as_ref()))?)?;
    Ok(())
}

fn optimize(a: OptimizeArgs, file: &FileConfig, seed: u64) -> Result<(), CliError> {
    let problem = problem(a.problem.as_ref(), file, "linear")?;
    let p = a.p.or(file.p).unwrap_or(3);
    let m = a.m.or(file.m).unwrap_or(10);
    let (schedule, spacing) = schedule(&a.schedule, file)?;
    let batch_size = a.batch.or(file.batch).unwrap_or(DEFAULT_BATCH);
    let reference_nfe = a.reference_nfe.or(file.reference_nfe).unwrap_or(200);
    let targets = generate_target_set(&problem, &schedule, reference_nfe, batch_size, seed)?;
    let mut plan = SearchSpec::new(targets.clone());
    if let Some(mode) = a.mode.as_ref().or(file.mode.as_ref()) {
        plan.mode = mode.parse::<ShapeMode>()?;
    }
    if let Some(r) = a.resolution.or(file.resolution) {
        plan.resolution = r;
    }
    if let Some(s) = &a.range {
        let [lo, hi] = parse_pair(s, "range")?;
        plan.log_gamma_range = (lo, hi);
    } else if let Some([lo, hi]) = file.range {
        plan.log_gamma_range = (lo, hi);
    }
    plan.include_adams_candidate = !a.no_adams_candidate && file.adams_candidate.unwrap_or(true);

    let grid = build_time_grid(&schedule, m, spacing)?;
    let adams = SolverConfig::adams(p);
    let opt = optimize_shape_parameters(&problem, &grid, &adams, &plan)?;
    let adams_mse = batch_final_mse(&problem, &grid, &adams, &targets)?;
    let tuned_mse = batch_final_mse(
        &problem,
        &grid,
        &SolverConfig::new(p, Method::Rbf(opt.schedule.clone())),
        &targets,
    )?;

    let mut out = sink(a.output.as_ref().or(file.output.as_ref()))?;
    writeln!(out, "{}", opt.schedule.to_json()?)?;
    out.flush()?;
    let pairs: Vec<usize> = opt.steps.iter().map(|s| s.pairs_evaluated).collect();
    eprintln!(
        "mode={} pairs_per_step={pairs:?} nfe={} adams_mse={adams_mse:e} optimized_mse={tuned_mse:e}",
        plan.mode, opt.nfe
    );
    if tuned_mse > adams_mse {
        return Err(CliError::Runtime(format!(
            "optimized MSE {tuned_mse:e} exceeds the Adams MSE {adams_mse:e}"
        )));
    }
    Ok(())
}

fn verify(a: VerifyArgs, file: &FileConfig) -> Result<(), CliError> {
    let opts = SuiteOptions {
        only: a.only.clone().or_else(|| file.only.clone()),
        perturb_summation: false,
    };
    let report = run_invariant_suite(&opts)?;
    let mut stdout = sink(None)?;
    for c in &report.checks {
        writeln!(
            stdout,
            "{} {}/{}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.module,
            c.name,
            c.detail
        )?;
    }
    writeln!(stdout, "{} passed, {} failed", report.passed, report.failed)?;
    if let Some(path) = a.json.as_ref().or(file.json.as_ref()) {
        let mut f = sink(Some(path))?;
        writeln!(f, "{}", report.to_json()?)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} invariant checks failed",
            report.failed
        )))
    }
}
