//! Central-difference gradient verification.
//!
//! The analytic backward passes are checked against numeric derivatives of
//! the forward maps only, so the two routes stay independent.

use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::DetRng;
use crate::tensor::Tensor4;

/// Default perturbation for fp64 central differences.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Differences below this count as exact agreement (covers true zero
/// gradients, where a relative measure would be meaningless).
pub const ABS_FLOOR: f64 = 1e-9;

/// Relative disagreement between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Numeric gradient of `f` with respect to every element of `t`.
pub fn numeric_grad_tensor<F>(t: &Tensor4, eps: f64, mut f: F) -> Result<Tensor4>
where
    F: FnMut(&Tensor4) -> Result<f64>,
{
    let (b, c, h, w) = t.dims();
    let mut grad = Tensor4::zeros(b, c, h, w);
    let mut probe = t.clone();
    for i in 0..t.len() {
        let orig = t.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Numeric derivative of `f` with respect to element `idx` of parameter
/// `name` in the store.
pub fn numeric_grad_param<F>(
    store: &mut ParamStore,
    name: &str,
    idx: usize,
    eps: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let orig = store.value(name).data()[idx];
    store.value_mut(name).data_mut()[idx] = orig + eps;
    let fp = f(store)?;
    store.value_mut(name).data_mut()[idx] = orig - eps;
    let fm = f(store)?;
    store.value_mut(name).data_mut()[idx] = orig;
    Ok((fp - fm) / (2.0 * eps))
}

/// Worst relative disagreement over two gradient fields.
pub fn max_rel_err(analytic: &Tensor4, numeric: &Tensor4) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Fixed random projection used as a scalar loss for gradient checks:
/// L(t) = sum(t * G) with G drawn once from the given seed.
pub fn projection(dims: (usize, usize, usize, usize), seed: u64) -> Tensor4 {
    let mut rng = DetRng::new(seed);
    let mut g = Tensor4::zeros(dims.0, dims.1, dims.2, dims.3);
    for v in g.data_mut() {
        *v = rng.uniform(-1.0, 1.0);
    }
    g
}

/// One line of a gradient-check report.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Aggregate of one gradient-check run.
#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn push(&mut self, name: impl Into<String>, max_rel_err: f64, tolerance: f64) {
        self.lines.push(CheckLine {
            name: name.into(),
            max_rel_err,
            tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.lines.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    /// Names of the failing checks.
    pub fn failures(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter(|l| !l.passed())
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&format!(
                "{}  max_rel_err {:.3e}  tol {:.0e}  {}\n",
                l.name,
                l.max_rel_err,
                l.tolerance,
                if l.passed() { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}
