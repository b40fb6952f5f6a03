//! Central-difference gradient oracle and the analytic-vs-numeric check.

use rand::seq::index;

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::seed::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element of `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            tolerance: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn param(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Compares backpropagated gradients against central differences.
///
/// `build` must record the same computation for every parameter set it is
/// given: dropout has to be disabled or frozen. Every parameter reachable from
/// the loss is checked on up to `max_coords` seeded coordinates.
pub fn grad_check<F>(params: &ParamStore, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    let (graph, loss) = build(params)?;
    if graph.is_stochastic() {
        return Err(Error::StochasticGraph);
    }
    let grads = graph.backward(loss)?;
    drop(graph);

    let eval = |p: &ParamStore| -> Result<f64> {
        let (g, l) = build(p)?;
        Ok(g.value(l).item())
    };

    let mut probe = params.clone();
    let mut rng = stream_rng(cfg.seed, Stream::GradCheck, 0);
    let mut checks = Vec::with_capacity(grads.len());
    for (name, analytic) in &grads {
        let n = analytic.numel();
        let mut coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, cfg.max_coords).into_vec()
        };
        coords.sort_unstable();

        let mut max_rel = 0.0f64;
        for &i in &coords {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + cfg.eps;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - cfg.eps;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            max_rel = max_rel.max(relative_error(analytic.data()[i], numeric));
        }
        checks.push(ParamCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: max_rel,
            grad_norm: analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }

    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err <= cfg.tolerance,
        params: checks,
        max_rel_err,
        tolerance: cfg.tolerance,
    })
}
