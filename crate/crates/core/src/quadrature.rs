//! Exponentially weighted integrals over one step `[lo, hi]` in half-log-SNR.
//!
//! The Gaussian integral
//! `I = int_lo^hi exp(t) exp(-((t - c) / w)^2) dt` with `w = gamma * width`
//! is available in closed form through the error function and by
//! Gauss-Legendre quadrature. Completing the square gives
//! `I = (w sqrt(pi) / 2) exp(c + w^2 / 4) [erf(a) - erf(b)]` with
//! `m = c + w^2 / 2`, `a = (hi - m) / w`, `b = (lo - m) / w`. When both `a` and
//! `b` lie on one side of zero the erf difference is rewritten as a ratio of
//! `erfc` values and the whole product is composed in log space.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::basis::NodeSet;
use crate::error::{invalid, Result};
use crate::special::{erf, ln_erfcx};

pub const DEFAULT_GL_ORDER: usize = 32;
pub const MIN_GL_ORDER: usize = 2;
pub const MAX_GL_ORDER: usize = 128;
pub const MAX_MONOMIAL_DEGREE: usize = 12;

/// Decimal digits the closed form may lose before it is flagged as degraded.
pub const DEGRADED_DIGITS: f64 = 8.0;

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `int_lo^hi f(t) dt` by the affine map onto `[-1, 1]`.
    pub fn integrate(&self, lo: f64, hi: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mid + half * x))
            .sum::<f64>()
    }
}

fn compute_rule(n: usize) -> QuadratureRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-15 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    QuadratureRule { nodes, weights }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Cached `n`-point Gauss-Legendre rule, `2 <= n <= 128`.
pub fn gauss_legendre(n: usize) -> Result<Arc<QuadratureRule>> {
    if !(MIN_GL_ORDER..=MAX_GL_ORDER).contains(&n) {
        return Err(invalid(format!(
            "quadrature order {n} outside {MIN_GL_ORDER}..={MAX_GL_ORDER}"
        )));
    }
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<QuadratureRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    Ok(guard
        .entry(n)
        .or_insert_with(|| Arc::new(compute_rule(n)))
        .clone())
}

/// `e^hi - e^lo`, evaluated as `-expm1(lo - hi) e^hi`.
pub fn integral_exp_const(lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return 0.0;
    }
    -(lo - hi).exp_m1() * hi.exp()
}

/// One Gaussian integral over a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegralRequest {
    pub lo: f64,
    pub hi: f64,
    pub center: f64,
    pub gamma: f64,
    pub width: f64,
}

impl IntegralRequest {
    pub fn new(lo: f64, hi: f64, center: f64, gamma: f64, width: f64) -> Result<Self> {
        let req = IntegralRequest {
            lo,
            hi,
            center,
            gamma,
            width,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(invalid(format!(
                "interval [{}, {}] is empty",
                self.lo, self.hi
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(invalid(format!(
                "width must be positive, got {}",
                self.width
            )));
        }
        if !self.center.is_finite() {
            return Err(invalid("center must be finite"));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.gamma * self.width
    }

    fn integrand(&self, t: f64) -> f64 {
        let z = (t - self.center) / self.scale();
        (t - z * z).exp()
    }
}

/// Closed-form value together with its precision diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedForm {
    pub value: f64,
    /// More than [`DEGRADED_DIGITS`] digits were lost in the erfc difference.
    pub degraded: bool,
}

/// Closed-form Gaussian integral. See the module documentation.
pub fn integral_exp_gaussian_closed(req: &IntegralRequest) -> ClosedForm {
    let IntegralRequest {
        lo, hi, center: c, ..
    } = *req;
    let w = req.scale();
    let m = c + 0.5 * w * w;
    let a = (hi - m) / w;
    let b = (lo - m) / w;
    let ln_pref = (0.5 * w * SQRT_PI).ln();
    let f = |t: f64| {
        let z = (t - c) / w;
        t - z * z
    };
    // Both tails on one side: I = pref * exp(f(edge)) * erfcx(x_near) * (1 - exp(d)).
    let one_sided = |x_near: f64, x_far: f64, edge: f64| {
        let le_near = ln_erfcx(x_near);
        let le_far = ln_erfcx(x_far);
        let diff = (hi - lo) / w;
        let quad = diff * (x_far + x_near);
        let d = -quad + le_far - le_near;
        let scale = quad.abs() + le_far.abs() + le_near.abs();
        let degraded = d == 0.0 || (scale / d.abs()).log10() > DEGRADED_DIGITS;
        let value = (ln_pref + f(edge) + le_near + (-d.exp_m1()).ln()).exp();
        ClosedForm {
            value,
            degraded: degraded || !value.is_finite(),
        }
    };
    if b >= 0.0 {
        one_sided(b, a, lo)
    } else if a <= 0.0 {
        one_sided(-a, -b, hi)
    } else {
        let value = (ln_pref + c + 0.25 * w * w).exp() * (erf(a) + erf(-b));
        ClosedForm {
            value,
            degraded: !value.is_finite(),
        }
    }
}

/// Gauss-Legendre route.
pub fn integral_exp_gaussian_quadrature(req: &IntegralRequest, rule: &QuadratureRule) -> f64 {
    rule.integrate(req.lo, req.hi, |t| req.integrand(t))
}

/// Integration route selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Route {
    /// Closed form, switching to quadrature when the result is degraded.
    #[default]
    Auto,
    ClosedForm,
    GaussLegendre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureOptions {
    pub route: Route,
    pub gl_order: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions {
            route: Route::Auto,
            gl_order: DEFAULT_GL_ORDER,
        }
    }
}

/// Value of one integral and whether the closed form was abandoned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegralValue {
    pub value: f64,
    pub degraded: bool,
    pub used_quadrature: bool,
}

pub fn integral_exp_gaussian(
    req: &IntegralRequest,
    opts: &QuadratureOptions,
) -> Result<IntegralValue> {
    req.validate()?;
    match opts.route {
        Route::GaussLegendre => Ok(IntegralValue {
            value: integral_exp_gaussian_quadrature(req, &*gauss_legendre(opts.gl_order)?),
            degraded: false,
            used_quadrature: true,
        }),
        Route::ClosedForm => {
            let cf = integral_exp_gaussian_closed(req);
            Ok(IntegralValue {
                value: cf.value,
                degraded: cf.degraded,
                used_quadrature: false,
            })
        }
        Route::Auto => {
            let cf = integral_exp_gaussian_closed(req);
            if cf.degraded {
                Ok(IntegralValue {
                    value: integral_exp_gaussian_quadrature(req, &*gauss_legendre(opts.gl_order)?),
                    degraded: true,
                    used_quadrature: true,
                })
            } else {
                Ok(IntegralValue {
                    value: cf.value,
                    degraded: false,
                    used_quadrature: false,
                })
            }
        }
    }
}

/// `int_lo^hi e^t t^k dt` from the antiderivative
/// `e^t sum_{m=0}^{k} (-1)^m k!/(k-m)! t^(k-m)`.
pub fn integral_exp_monomial(lo: f64, hi: f64, k: usize) -> Result<f64> {
    if k > MAX_MONOMIAL_DEGREE {
        return Err(invalid(format!(
            "monomial degree {k} exceeds {MAX_MONOMIAL_DEGREE}"
        )));
    }
    if k == 0 {
        return Ok(integral_exp_const(lo, hi));
    }
    let poly = |t: f64| {
        let mut acc = 0.0;
        let mut coef = 1.0;
        for m in 0..=k {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * coef * t.powi((k - m) as i32);
            coef *= (k - m) as f64;
        }
        acc
    };
    Ok(hi.exp() * poly(hi) - lo.exp() * poly(lo))
}

/// Integral vector for a node set, with `l_const` appended when
/// `include_constant` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralVector {
    pub values: Vec<f64>,
    /// Number of entries whose closed form was flagged as degraded.
    pub degraded: usize,
}

pub fn build_integral_vector(
    nodes: &NodeSet,
    lo: f64,
    hi: f64,
    gamma: f64,
    include_constant: bool,
    opts: &QuadratureOptions,
) -> Result<IntegralVector> {
    let mut values = Vec::with_capacity(nodes.len() + 1);
    let mut degraded = 0;
    for &center in nodes.nodes() {
        let req = IntegralRequest::new(lo, hi, center, gamma, nodes.width_scale())?;
        let v = integral_exp_gaussian(&req, opts)?;
        degraded += usize::from(v.degraded);
        values.push(v.value);
    }
    if include_constant {
        values.push(integral_exp_const(lo, hi));
    }
    Ok(IntegralVector { values, degraded })
}
