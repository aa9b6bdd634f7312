//! Noise schedules, the `t <-> lambda` bijection and timestep grids.
//!
//! All schedules here are variance preserving, so `alpha^2 + sigma^2 = 1` and
//! both are functions of `lambda = ln(alpha / sigma)` alone.

use std::f64::consts::FRAC_PI_2;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default ratio `t_min / T`.
pub const DEFAULT_T_MIN_RATIO: f64 = 1e-3;

/// `sigma(lambda) = 1 / sqrt(1 + e^{2 lambda})` without overflow.
pub fn sigma_of_lambda(lambda: f64) -> f64 {
    if lambda > 0.0 {
        let e = (-2.0 * lambda).exp();
        (-lambda).exp() / (1.0 + e).sqrt()
    } else {
        1.0 / (1.0 + (2.0 * lambda).exp()).sqrt()
    }
}

/// `alpha(lambda) = sigma(-lambda)`.
pub fn alpha_of_lambda(lambda: f64) -> f64 {
    sigma_of_lambda(-lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// `lambda(t) = lambda_max - (lambda_max - lambda_min) t / T`.
    VpLinearLogSnr {
        lambda_min: f64,
        lambda_max: f64,
    },
    /// `alpha_t = cos(theta_t) / cos(theta_0)` with
    /// `theta_t = (pi / 2) (t + s) / (1 + s)`.
    VpCosine {
        s: f64,
    },
    Tabulated(Table),
}

/// Monotone piecewise-cubic table of `lambda` against increasing `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    t: Vec<f64>,
    lambda: Vec<f64>,
    slope: Vec<f64>,
}

impl Table {
    /// `t` strictly increasing, `lambda` strictly decreasing.
    pub fn new(t: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        if t.len() != lambda.len() || t.len() < 2 {
            return Err(invalid(
                "a tabulated schedule needs at least two (t, lambda) rows",
            ));
        }
        if t.iter().chain(&lambda).any(|v| !v.is_finite()) {
            return Err(invalid("tabulated schedule contains non-finite values"));
        }
        if t[0] <= 0.0 {
            return Err(invalid("tabulated times must be positive"));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("tabulated times must be strictly increasing"));
        }
        if lambda.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid(
                "tabulated lambda must be strictly decreasing down the file",
            ));
        }
        let slope = pchip_slopes(&t, &lambda);
        Ok(Table { t, lambda, slope })
    }

    /// Reads a `t,lambda` CSV with a header row.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            t: f64,
            lambda: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "lambda" {
            return Err(Error::Parse(format!(
                "expected header `t,lambda`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut t = Vec::new();
        let mut lambda = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            t.push(row.t);
            lambda.push(row.lambda);
        }
        Table::new(t, lambda)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Table::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.t.len();
        let k = match self.t.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(k) => return self.lambda[k],
            Err(k) => k.clamp(1, n - 1) - 1,
        };
        let h = self.t[k + 1] - self.t[k];
        let s = (x - self.t[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.lambda[k]
            + h10 * h * self.slope[k]
            + h01 * self.lambda[k + 1]
            + h11 * h * self.slope[k + 1]
    }
}

/// Fritsch-Carlson slopes for a monotone Hermite interpolant.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let v = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if v * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && v.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            v
        }
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// A noise schedule restricted to `[t_min, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_min: f64,
    t_max: f64,
}

impl NoiseSchedule {
    pub fn vp_linear_logsnr(lambda_min: f64, lambda_max: f64, t_max: f64) -> Result<Self> {
        if !(lambda_min < lambda_max) || !lambda_min.is_finite() || !lambda_max.is_finite() {
            return Err(invalid(format!(
                "need finite lambda_min < lambda_max, got ({lambda_min}, {lambda_max})"
            )));
        }
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(invalid(format!("T must be positive, got {t_max}")));
        }
        Ok(NoiseSchedule {
            kind: ScheduleKind::VpLinearLogSnr {
                lambda_min,
                lambda_max,
            },
            t_min: DEFAULT_T_MIN_RATIO * t_max,
            t_max,
        })
    }

    pub fn vp_cosine(s: f64, t_max: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(invalid(format!(
                "cosine offset s must lie in (0, 1), got {s}"
            )));
        }
        if !(t_max > 0.0) || FRAC_PI_2 * (t_max + s) / (1.0 + s) >= FRAC_PI_2 {
            return Err(invalid(format!(
                "T = {t_max} must be positive and keep alpha_T > 0"
            )));
        }
        Ok(NoiseSchedule {
            kind: ScheduleKind::VpCosine { s },
            t_min: DEFAULT_T_MIN_RATIO * t_max,
            t_max,
        })
    }

    /// Domain is the span of the table.
    pub fn tabulated(table: Table) -> Self {
        let t_min = table.t[0];
        let t_max = *table.t.last().unwrap();
        NoiseSchedule {
            kind: ScheduleKind::Tabulated(table),
            t_min,
            t_max,
        }
    }

    /// Overrides the lower end of the domain.
    pub fn with_t_min(mut self, t_min: f64) -> Result<Self> {
        let lo = match &self.kind {
            ScheduleKind::Tabulated(tab) => tab.t[0],
            _ => 0.0,
        };
        if !(t_min > lo || (t_min == lo && lo > 0.0)) || t_min >= self.t_max {
            return Err(invalid(format!(
                "t_min = {t_min} must lie in ({lo}, {}) ",
                self.t_max
            )));
        }
        self.t_min = t_min;
        Ok(self)
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "t",
                value: t,
                lo: self.t_min,
                hi: self.t_max,
            })
        }
    }

    fn lambda_unchecked(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::VpLinearLogSnr {
                lambda_min,
                lambda_max,
            } => lambda_max - (lambda_max - lambda_min) * t / self.t_max,
            ScheduleKind::VpCosine { s } => {
                let th = FRAC_PI_2 * (t + s) / (1.0 + s);
                let th0 = FRAC_PI_2 * s / (1.0 + s);
                th.cos().ln() - 0.5 * ((th - th0).sin() * (th + th0).sin()).ln()
            }
            ScheduleKind::Tabulated(tab) => tab.eval(t),
        }
    }

    /// `(lambda(T), lambda(t_min))`.
    pub fn lambda_range(&self) -> (f64, f64) {
        (
            self.lambda_unchecked(self.t_max),
            self.lambda_unchecked(self.t_min),
        )
    }

    pub fn lambda_of_t(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.lambda_unchecked(t))
    }

    pub fn t_of_lambda(&self, lambda: f64) -> Result<f64> {
        let (lo, hi) = self.lambda_range();
        if !(lambda >= lo && lambda <= hi) {
            return Err(Error::Domain {
                what: "lambda",
                value: lambda,
                lo,
                hi,
            });
        }
        if lambda == lo {
            return Ok(self.t_max);
        }
        if lambda == hi {
            return Ok(self.t_min);
        }
        let t = match &self.kind {
            ScheduleKind::VpLinearLogSnr {
                lambda_min,
                lambda_max,
            } => (lambda_max - lambda) / (lambda_max - lambda_min) * self.t_max,
            ScheduleKind::VpCosine { s } => {
                let th0 = FRAC_PI_2 * s / (1.0 + s);
                let a = alpha_of_lambda(lambda);
                let sg = sigma_of_lambda(lambda);
                let (s0, c0) = th0.sin_cos();
                let th = (s0 * s0 + c0 * c0 * sg * sg).sqrt().atan2(c0 * a);
                th * (1.0 + s) / FRAC_PI_2 - s
            }
            ScheduleKind::Tabulated(_) => self.bisect(lambda),
        };
        Ok(t.clamp(self.t_min, self.t_max))
    }

    /// Bisection on the decreasing map `t -> lambda(t)`.
    pub fn bisect(&self, lambda: f64) -> f64 {
        let (mut a, mut b) = (self.t_min, self.t_max);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if self.lambda_unchecked(m) > lambda {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let l = self.lambda_of_t(t)?;
        Ok((alpha_of_lambda(l), sigma_of_lambda(l)))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::vp_linear_logsnr(-5.0, 5.0, 1.0).expect("valid default schedule")
    }
}

/// Grid spacing rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    #[default]
    UniformLambda,
    UniformT,
}

impl std::str::FromStr for Spacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-lambda" | "uniform-λ" => Ok(Spacing::UniformLambda),
            "uniform-t" => Ok(Spacing::UniformT),
            other => Err(invalid(format!("unknown spacing `{other}`"))),
        }
    }
}

/// `M + 1` decreasing times with cached `lambda`, `alpha`, `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    lambdas: Vec<f64>,
    widths: Vec<f64>,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl TimeGrid {
    /// Builds a grid from explicit times, which must start at or below `T`,
    /// lie in the domain and strictly decrease.
    pub fn from_times(schedule: &NoiseSchedule, times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(invalid("a time grid needs at least one step"));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("grid times must be strictly decreasing"));
        }
        let lambdas = times
            .iter()
            .map(|&t| schedule.lambda_of_t(t))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(times, lambdas)
    }

    /// Builds a grid directly in half-log-SNR, without a schedule. Times are
    /// set to the step index reversed, so `times[i] = M - i`.
    pub fn from_lambdas(lambdas: Vec<f64>) -> Result<Self> {
        let m = lambdas.len().saturating_sub(1);
        let times = (0..=m).map(|i| (m - i) as f64).collect();
        Self::from_parts(times, lambdas)
    }

    fn from_parts(times: Vec<f64>, lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.len() < 2 {
            return Err(invalid("a time grid needs at least one step"));
        }
        if lambdas.iter().any(|l| !l.is_finite()) {
            return Err(invalid("grid lambdas must be finite"));
        }
        let widths: Vec<f64> = lambdas.windows(2).map(|w| w[1] - w[0]).collect();
        if widths.iter().any(|&h| !(h > 0.0)) {
            return Err(invalid("grid lambdas must be strictly increasing"));
        }
        let alphas = lambdas.iter().map(|&l| alpha_of_lambda(l)).collect();
        let sigmas = lambdas.iter().map(|&l| sigma_of_lambda(l)).collect();
        Ok(TimeGrid {
            times,
            lambdas,
            widths,
            alphas,
            sigmas,
        })
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.widths.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn h_max(&self) -> f64 {
        self.widths.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn build_time_grid(schedule: &NoiseSchedule, m: usize, spacing: Spacing) -> Result<TimeGrid> {
    if m == 0 {
        return Err(invalid("step count M must be at least 1"));
    }
    let (t_max, t_min) = (schedule.t_max(), schedule.t_min());
    let mut times = Vec::with_capacity(m + 1);
    match spacing {
        Spacing::UniformT => {
            for i in 0..=m {
                times.push(t_max - (t_max - t_min) * i as f64 / m as f64);
            }
        }
        Spacing::UniformLambda => {
            let (l0, l1) = schedule.lambda_range();
            for i in 0..=m {
                let l = (l0 + (l1 - l0) * i as f64 / m as f64).clamp(l0, l1);
                times.push(schedule.t_of_lambda(l)?);
            }
        }
    }
    times[0] = t_max;
    times[m] = t_min;
    TimeGrid::from_times(schedule, times)
}

pub fn lambda_of_t(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    schedule.lambda_of_t(t)
}

pub fn t_of_lambda(schedule: &NoiseSchedule, lambda: f64) -> Result<f64> {
    schedule.t_of_lambda(lambda)
}

pub fn alpha_sigma(schedule: &NoiseSchedule, t: f64) -> Result<(f64, f64)> {
    schedule.alpha_sigma(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cosine() -> NoiseSchedule {
        NoiseSchedule::vp_cosine(0.008, 0.9946).unwrap()
    }

    fn table() -> NoiseSchedule {
        let t: Vec<f64> = (1..=11).map(|k| 0.1 * k as f64 - 0.05).collect();
        let l: Vec<f64> = t
            .iter()
            .map(|&x: &f64| 4.0 - 8.0 * x - 0.5 * (3.0 * x).sin())
            .collect();
        NoiseSchedule::tabulated(Table::new(t, l).unwrap())
    }

    fn all() -> Vec<NoiseSchedule> {
        vec![NoiseSchedule::default(), cosine(), table()]
    }

    #[test]
    fn linear_midpoint_and_endpoints() {
        let s = NoiseSchedule::vp_linear_logsnr(-4.0, 6.0, 2.0).unwrap();
        assert_eq!(s.lambda_of_t(1.0).unwrap(), 1.0);
        let l = s.lambda_of_t(s.t_min()).unwrap();
        let (_, sigma) = s.alpha_sigma(s.t_min()).unwrap();
        assert!((sigma - 1.0 / (1.0 + (2.0 * l).exp()).sqrt()).abs() < 1e-15);
        let (a, sg) = s.alpha_sigma(2.0).unwrap();
        assert!(a < sg && a > 0.0);
        assert!(s.lambda_of_t(2.5).is_err());
        assert!(s.lambda_of_t(0.0).is_err());
    }

    #[test]
    fn zero_lambda_gives_equal_alpha_sigma() {
        let s = NoiseSchedule::default();
        let t = s.t_of_lambda(0.0).unwrap();
        let (a, sg) = s.alpha_sigma(t).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((a - r).abs() < 1e-15 && (sg - r).abs() < 1e-15);
    }

    #[test]
    fn table_nodes_are_exact() {
        let s = table();
        let ScheduleKind::Tabulated(tab) = s.kind() else {
            unreachable!()
        };
        for (&t, &l) in tab.times().iter().zip(tab.lambdas()) {
            assert_eq!(s.lambda_of_t(t).unwrap(), l);
        }
    }

    #[test]
    fn table_csv_round_trip() {
        let csv = "t,lambda\n0.1,3.0\n0.5,0.5\n0.9,-2.0\n";
        let tab = Table::from_csv_reader(csv.as_bytes()).unwrap();
        assert_eq!(tab.times(), &[0.1, 0.5, 0.9]);
        assert!(Table::from_csv_reader("t,lambda\n0.1,3.0\n0.5,3.5\n".as_bytes()).is_err());
        assert!(Table::from_csv_reader("0.1,3.0\n0.5,1.0\n".as_bytes()).is_err());
    }

    #[test]
    fn cosine_inverse_matches_bisection() {
        let s = cosine();
        let (lo, hi) = s.lambda_range();
        for k in 1..50 {
            let l = lo + (hi - lo) * k as f64 / 50.0;
            let t = s.t_of_lambda(l).unwrap();
            assert!((t - s.bisect(l)).abs() < 1e-10);
        }
    }

    #[test]
    fn cosine_matches_textbook_form() {
        let s = cosine();
        for &t in &[0.01, 0.3, 0.7, 0.99] {
            let th = FRAC_PI_2 * (t + 0.008) / 1.008;
            let th0 = FRAC_PI_2 * 0.008 / 1.008;
            let a = th.cos() / th0.cos();
            let want = (a / (1.0 - a * a).sqrt()).ln();
            assert!((s.lambda_of_t(t).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_examples() {
        let s = NoiseSchedule::default();
        let g = build_time_grid(&s, 1, Spacing::UniformLambda).unwrap();
        assert_eq!(g.times(), &[s.t_max(), s.t_min()]);
        let g = build_time_grid(&s, 4, Spacing::UniformLambda).unwrap();
        let h0 = g.widths()[0];
        assert!(g.widths().iter().all(|h| (h - h0).abs() < 1e-12));
        assert!(build_time_grid(&s, 0, Spacing::UniformT).is_err());

        // Uniform t on the cosine schedule: recompute lambda at the uniform times.
        let c = cosine();
        let g = build_time_grid(&c, 4, Spacing::UniformT).unwrap();
        let dt = (c.t_max() - c.t_min()) / 4.0;
        let lam: Vec<f64> = (0..=4)
            .map(|i| {
                let t = c.t_max() - dt * i as f64;
                let th = FRAC_PI_2 * (t + 0.008) / 1.008;
                let th0 = FRAC_PI_2 * 0.008 / 1.008;
                let a = th.cos() / th0.cos();
                (a / (1.0 - a * a).sqrt()).ln()
            })
            .collect();
        let widths: Vec<f64> = lam.windows(2).map(|w| w[1] - w[0]).collect();
        for (a, b) in g.widths().iter().zip(&widths) {
            assert!((a - b).abs() < 1e-9);
        }
        // Not monotone: lambda is steep at both ends of the cosine schedule.
        let w = g.widths();
        assert!(w[0] > w[1] && w[1] > w[2] && w[2] < w[3]);
    }

    #[test]
    fn spacing_parses() {
        assert_eq!("uniform-t".parse::<Spacing>().unwrap(), Spacing::UniformT);
        assert!("log".parse::<Spacing>().is_err());
    }

    proptest! {
        #[test]
        fn lambda_is_decreasing(k in 0usize..3, u in 0.0f64..1.0, v in 0.0f64..1.0) {
            let s = &all()[k];
            let (t1, t2) = (u.min(v), u.max(v));
            prop_assume!(t2 - t1 > 1e-9);
            let map = |x: f64| s.t_min() + x * (s.t_max() - s.t_min());
            prop_assert!(s.lambda_of_t(map(t1)).unwrap() > s.lambda_of_t(map(t2)).unwrap());
        }

        #[test]
        fn round_trip(k in 0usize..3, u in 0.0f64..1.0) {
            let s = &all()[k];
            let t = s.t_min() + u * (s.t_max() - s.t_min());
            let back = s.t_of_lambda(s.lambda_of_t(t).unwrap()).unwrap();
            prop_assert!((back - t).abs() <= 1e-12 * s.t_max());
            let (a, sg) = s.alpha_sigma(t).unwrap();
            prop_assert!(a > 0.0 && sg > 0.0);
            prop_assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
        }

        #[test]
        fn grid_widths_sum(k in 0usize..3, m in 1usize..60, uniform_t in any::<bool>()) {
            let s = &all()[k];
            let sp = if uniform_t { Spacing::UniformT } else { Spacing::UniformLambda };
            let g = build_time_grid(s, m, sp).unwrap();
            let (l0, l1) = s.lambda_range();
            let sum: f64 = g.widths().iter().sum();
            prop_assert!((sum - (l1 - l0)).abs() < 1e-12 * (l1 - l0).max(1.0));
            prop_assert!(g.times().windows(2).all(|w| w[1] < w[0]));
        }
    }
}
