//! Per-step solver coefficients `c` such that the update is
//! `x_{i+1} = (sigma_{i+1} / sigma_i) x_i + sigma_{i+1} sum_j c_j X_j`.

use serde::{Deserialize, Serialize};

use crate::basis::{build_kernel_system, NodeSet, SINGULAR_CONDITION};
use crate::error::{invalid, Error, Result};
use crate::linalg::{Lu, Matrix};
use crate::quadrature::{
    build_integral_vector, gauss_legendre, integral_exp_const, QuadratureOptions,
};

/// How a coefficient vector was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Provenance {
    Rbf {
        gamma: f64,
        include_constant: bool,
    },
    Adams,
    Equal,
    Euler,
    #[serde(rename = "unipc")]
    UniPc,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::Rbf { .. } => "rbf",
            Provenance::Adams => "adams",
            Provenance::Equal => "equal",
            Provenance::Euler => "euler",
            Provenance::UniPc => "unipc",
        }
    }

    /// Whether the summation condition is guaranteed.
    pub fn sums_to_const(&self) -> bool {
        !matches!(
            self,
            Provenance::Rbf {
                include_constant: false,
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    values: Vec<f64>,
    lo: f64,
    hi: f64,
    provenance: Provenance,
}

impl CoefficientVector {
    pub fn new(values: Vec<f64>, lo: f64, hi: f64, provenance: Provenance) -> Self {
        CoefficientVector {
            values,
            lo,
            hi,
            provenance,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `|sum(c) - (e^hi - e^lo)| / (e^hi - e^lo)`.
    pub fn summation_error(&self) -> f64 {
        let k = integral_exp_const(self.lo, self.hi);
        (self.sum() - k).abs() / k.abs()
    }

    /// `sum_j c_j X_j` accumulated into `out`.
    pub fn apply(&self, data: &[&[f64]], out: &mut [f64]) {
        for (c, x) in self.values.iter().zip(data) {
            for (o, v) in out.iter_mut().zip(x.iter()) {
                *o += c * v;
            }
        }
    }
}

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if hi > lo && lo.is_finite() && hi.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!(
            "interval [{lo}, {hi}] is empty or non-finite"
        )))
    }
}

pub fn rbf_coefficients(
    nodes: &NodeSet,
    lo: f64,
    hi: f64,
    gamma: f64,
    include_constant: bool,
) -> Result<CoefficientVector> {
    rbf_coefficients_with(
        nodes,
        lo,
        hi,
        gamma,
        include_constant,
        &QuadratureOptions::default(),
    )
}

/// Solves `Phi^T c = l` and keeps the `p` evaluation coefficients.
/// A singular kernel is returned as [`Error::Singular`]; substitution is the
/// caller's decision.
pub fn rbf_coefficients_with(
    nodes: &NodeSet,
    lo: f64,
    hi: f64,
    gamma: f64,
    include_constant: bool,
    opts: &QuadratureOptions,
) -> Result<CoefficientVector> {
    check_interval(lo, hi)?;
    let provenance = Provenance::Rbf {
        gamma,
        include_constant,
    };
    if nodes.len() == 1 && include_constant {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid(format!(
                "gamma must be positive and finite, got {gamma}"
            )));
        }
        return Ok(CoefficientVector::new(
            vec![integral_exp_const(lo, hi)],
            lo,
            hi,
            provenance,
        ));
    }
    let sys = build_kernel_system(nodes, gamma, include_constant)?;
    let l = build_integral_vector(nodes, lo, hi, gamma, include_constant, opts)?;
    let mut c = sys.solve_transpose(&l.values);
    c.truncate(nodes.len());
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            condition: sys.condition(),
        });
    }
    Ok(CoefficientVector::new(c, lo, hi, provenance))
}

/// `m_k = int_0^1 e^{h (r - 1)} r^k dr` for `k < n`.
fn exp_moments(h: f64, n: usize) -> Vec<f64> {
    if h > 2.0 * n as f64 {
        // Integration by parts, m_k = (1 - k m_{k-1}) / h, stable for h > k.
        let mut m = Vec::with_capacity(n);
        m.push(-(-h).exp_m1() / h);
        for k in 1..n {
            let prev = m[k - 1];
            m.push((1.0 - k as f64 * prev) / h);
        }
        return m;
    }
    // e^{-h} sum_j h^j / (j! (j + k + 1)), all terms positive.
    let scale = (-h).exp();
    (0..n)
        .map(|k| {
            let mut term = 1.0;
            let mut sum = 1.0 / (k as f64 + 1.0);
            for j in 1..10_000 {
                term *= h / j as f64;
                let add = term / (j + k + 1) as f64;
                sum += add;
                if add <= 1e-17 * sum {
                    break;
                }
            }
            scale * sum
        })
        .collect()
}

/// Integral of the Lagrange interpolant through `nodes` against `e^lambda`
/// over `[lo, hi]`, via a Vandermonde system in `r = (lambda - lo) / (hi - lo)`.
pub fn adams_coefficients(nodes: &NodeSet, lo: f64, hi: f64) -> Result<CoefficientVector> {
    check_interval(lo, hi)?;
    let p = nodes.len();
    if p == 1 {
        return Ok(CoefficientVector::new(
            vec![integral_exp_const(lo, hi)],
            lo,
            hi,
            Provenance::Adams,
        ));
    }
    let h = hi - lo;
    let r: Vec<f64> = nodes.nodes().iter().map(|&x| (x - lo) / h).collect();
    let v = Matrix::from_fn(p, |j, k| r[j].powi(k as i32));
    let lu = Lu::factor(&v)?;
    let cond = lu.condition_estimate();
    if !(cond <= SINGULAR_CONDITION) {
        return Err(Error::Singular { condition: cond });
    }
    let m = exp_moments(h, p);
    let scale = h * hi.exp();
    let c = lu
        .solve_transpose(&m)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Ok(CoefficientVector::new(c, lo, hi, Provenance::Adams))
}

/// All `p` coefficients equal to `(e^hi - e^lo) / p`.
pub fn equal_coefficients(p: usize, lo: f64, hi: f64) -> Result<CoefficientVector> {
    check_interval(lo, hi)?;
    if p == 0 {
        return Err(invalid("order p must be at least 1"));
    }
    let v = integral_exp_const(lo, hi) / p as f64;
    Ok(CoefficientVector::new(
        vec![v; p],
        lo,
        hi,
        Provenance::Equal,
    ))
}

/// The single first-order coefficient `e^hi - e^lo`.
pub fn euler_coefficients(lo: f64, hi: f64) -> Result<CoefficientVector> {
    check_interval(lo, hi)?;
    Ok(CoefficientVector::new(
        vec![integral_exp_const(lo, hi)],
        lo,
        hi,
        Provenance::Euler,
    ))
}

/// Adams coefficients recomputed through the `psi`/`phi` reformulation of the
/// unified predictor-corrector framework. Requires `nodes[0] == lo`.
///
/// With `r_j = (lambda_j - lo) / h` and `r_0 = 0`, the unknowns `a_1..a_{p-1}`
/// solve `sum_j a_j (h r_j)^k = phi_k(h)` for `k = 1..p-1`, where
/// `phi_k = h^k k! psi_{k+1}`, then `a_0 = phi_0 - sum a_j` and
/// `c_k = e^hi h a_k`.
pub fn unipc_coefficients(nodes: &NodeSet, lo: f64, hi: f64) -> Result<CoefficientVector> {
    check_interval(lo, hi)?;
    if nodes.nodes()[0] != lo {
        return Err(invalid(
            "the first node must coincide with the interval start",
        ));
    }
    let p = nodes.len();
    let h = hi - lo;
    let rule = gauss_legendre(64)?;
    // psi_{k+1}(h) = int_0^1 e^{(r-1) h} r^k / k! dr
    let mut phi = Vec::with_capacity(p);
    let mut fact = 1.0;
    for k in 0..p {
        if k > 0 {
            fact *= k as f64;
        }
        let psi = rule.integrate(0.0, 1.0, |r| ((r - 1.0) * h).exp() * r.powi(k as i32)) / fact;
        phi.push(h.powi(k as i32) * fact * psi);
    }
    let mut a = vec![0.0; p];
    if p > 1 {
        let d: Vec<f64> = nodes.nodes()[1..].iter().map(|&x| x - lo).collect();
        let sys = Matrix::from_fn(p - 1, |k, j| d[j].powi(k as i32 + 1));
        let sol = Lu::factor(&sys)?.solve(&phi[1..]);
        a[1..].copy_from_slice(&sol);
    }
    a[0] = phi[0] - a[1..].iter().sum::<f64>();
    let scale = hi.exp() * h;
    Ok(CoefficientVector::new(
        a.into_iter().map(|v| v * scale).collect(),
        lo,
        hi,
        Provenance::UniPc,
    ))
}

/// `|c_j| / sum_k |c_k|`.
pub fn coefficient_magnitude_ratio(c: &CoefficientVector) -> Result<Vec<f64>> {
    let total: f64 = c.values.iter().map(|v| v.abs()).sum();
    if !(total > 0.0) {
        return Err(invalid("coefficient vector is identically zero"));
    }
    Ok(c.values.iter().map(|v| v.abs() / total).collect())
}
