//! Gaussian radial basis interpolation with an optional constant term, and the
//! Lagrange basis used by the Adams path.

use crate::error::{invalid, Error, Result};
use crate::linalg::{Lu, Matrix};

/// Largest number of nodes accepted by [`NodeSet`].
pub const MAX_NODES: usize = 12;

/// Condition number above which a kernel or Vandermonde system is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e14;

/// Interpolation nodes in half-log-SNR, most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    nodes: Vec<f64>,
    width_scale: f64,
}

impl NodeSet {
    /// Nodes must be finite and strictly decreasing; `width_scale` is the
    /// step width `h` that scales the Gaussian.
    pub fn new(nodes: Vec<f64>, width_scale: f64) -> Result<Self> {
        if nodes.is_empty() || nodes.len() > MAX_NODES {
            return Err(invalid(format!(
                "node count {} outside 1..={MAX_NODES}",
                nodes.len()
            )));
        }
        if !(width_scale > 0.0 && width_scale.is_finite()) {
            return Err(invalid(format!(
                "width scale must be positive, got {width_scale}"
            )));
        }
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(invalid("nodes must be finite"));
        }
        if nodes.windows(2).any(|w| w[0] <= w[1]) {
            return Err(invalid(
                "nodes must be distinct and strictly decreasing (most recent first)",
            ));
        }
        Ok(NodeSet { nodes, width_scale })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn width_scale(&self) -> f64 {
        self.width_scale
    }
}

/// `exp(-((lambda - center) / (gamma h))^2)`.
pub fn gaussian_basis(lambda: f64, center: f64, gamma: f64, h: f64) -> Result<f64> {
    if !(gamma > 0.0) || !(h > 0.0) {
        return Err(invalid(format!(
            "gamma and h must be positive (gamma = {gamma}, h = {h})"
        )));
    }
    let z = (lambda - center) / (gamma * h);
    Ok((-z * z).exp())
}

/// Factorized kernel matrix for one node set and shape parameter.
#[derive(Debug, Clone)]
pub struct KernelSystem {
    phi: Matrix,
    lu: Lu,
    gamma: f64,
    include_constant: bool,
    condition: f64,
    nodes: NodeSet,
}

/// Assembles and factorizes the kernel matrix. With `include_constant` the
/// Gaussian block is bordered by a row and column of ones with a zero corner.
pub fn build_kernel_system(
    nodes: &NodeSet,
    gamma: f64,
    include_constant: bool,
) -> Result<KernelSystem> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid(format!(
            "gamma must be positive and finite, got {gamma}"
        )));
    }
    let p = nodes.len();
    let n = if include_constant { p + 1 } else { p };
    let h = nodes.width_scale();
    let x = nodes.nodes();
    let phi = Matrix::from_fn(n, |r, c| match (r < p, c < p) {
        (true, true) => {
            let z = (x[r] - x[c]) / (gamma * h);
            (-z * z).exp()
        }
        (false, false) => 0.0,
        _ => 1.0,
    });
    let lu = Lu::factor(&phi)?;
    let condition = lu.condition_estimate();
    if !(condition <= SINGULAR_CONDITION) {
        return Err(Error::Singular { condition });
    }
    Ok(KernelSystem {
        phi,
        lu,
        gamma,
        include_constant,
        condition,
        nodes: nodes.clone(),
    })
}

impl KernelSystem {
    pub fn matrix(&self) -> &Matrix {
        &self.phi
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn include_constant(&self) -> bool {
        self.include_constant
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn nodes(&self) -> &NodeSet {
        &self.nodes
    }

    pub fn dim(&self) -> usize {
        self.phi.dim()
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.lu.solve(rhs)
    }

    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        self.lu.solve_transpose(rhs)
    }
}

/// Fitted interpolant `R(lambda) = sum_j w_j phi_j(lambda) + w_const`.
#[derive(Debug, Clone)]
pub struct RbfInterpolant {
    weights: Vec<Vec<f64>>,
    constant: Option<Vec<f64>>,
    nodes: NodeSet,
    gamma: f64,
}

/// Solves `Phi W = X` for the weights, one column per data component.
pub fn solve_interpolation_weights(
    sys: &KernelSystem,
    values: &[Vec<f64>],
) -> Result<RbfInterpolant> {
    let p = sys.nodes.len();
    if values.len() != p {
        return Err(invalid(format!(
            "expected {p} data vectors, got {}",
            values.len()
        )));
    }
    let d = values[0].len();
    if values.iter().any(|v| v.len() != d) {
        return Err(invalid("data vectors differ in dimension"));
    }
    let n = sys.dim();
    let mut weights = vec![vec![0.0; d]; p];
    let mut constant = sys.include_constant.then(|| vec![0.0; d]);
    let mut rhs = vec![0.0; n];
    for k in 0..d {
        for j in 0..p {
            rhs[j] = values[j][k];
        }
        if n > p {
            rhs[p] = 0.0;
        }
        let w = sys.solve(&rhs);
        for j in 0..p {
            weights[j][k] = w[j];
        }
        if let Some(c) = constant.as_mut() {
            c[k] = w[p];
        }
    }
    Ok(RbfInterpolant {
        weights,
        constant,
        nodes: sys.nodes.clone(),
        gamma: sys.gamma,
    })
}

impl RbfInterpolant {
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn constant_weight(&self) -> Option<&[f64]> {
        self.constant.as_deref()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn evaluate(&self, lambda: f64) -> Vec<f64> {
        let h = self.nodes.width_scale();
        let mut out = match &self.constant {
            Some(c) => c.clone(),
            None => vec![0.0; self.weights[0].len()],
        };
        for (w, &center) in self.weights.iter().zip(self.nodes.nodes()) {
            let z = (lambda - center) / (self.gamma * h);
            let phi = (-z * z).exp();
            for (o, wk) in out.iter_mut().zip(w) {
                *o += wk * phi;
            }
        }
        out
    }
}

pub fn evaluate_interpolant(interp: &RbfInterpolant, lambda: f64) -> Vec<f64> {
    interp.evaluate(lambda)
}

/// `l_j(lambda) = prod_{k != j} (lambda - x_k) / (x_j - x_k)`.
pub fn lagrange_basis(nodes: &NodeSet, j: usize, lambda: f64) -> Result<f64> {
    let x = nodes.nodes();
    if j >= x.len() {
        return Err(invalid(format!(
            "basis index {j} out of range for {} nodes",
            x.len()
        )));
    }
    Ok(x.iter()
        .enumerate()
        .filter(|&(k, _)| k != j)
        .map(|(_, &xk)| (lambda - xk) / (x[j] - xk))
        .product())
}

/// Polynomial interpolant of `values` through the nodes, evaluated at `lambda`.
pub fn lagrange_interpolate(nodes: &NodeSet, values: &[Vec<f64>], lambda: f64) -> Result<Vec<f64>> {
    if values.len() != nodes.len() {
        return Err(invalid("one data vector per node required"));
    }
    let mut out = vec![0.0; values[0].len()];
    for (j, v) in values.iter().enumerate() {
        let l = lagrange_basis(nodes, j, lambda)?;
        for (o, vk) in out.iter_mut().zip(v) {
            *o += l * vk;
        }
    }
    Ok(out)
}
