//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Below this magnitude a gradient coordinate is compared absolutely rather
/// than relatively (both analytic and numeric values are at roundoff level).
pub const GRAD_FLOOR: f64 = 1e-6;

/// One sampled coordinate of a gradient check.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares the tape gradient of `f` against `(f(θ+h) − f(θ−h)) / 2h` on
/// `samples` coordinates drawn uniformly over all entries of `params`.
pub fn grad_samples<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<GradSample>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let grads: Vec<Tensor> = ids.iter().map(|&id| g.grad(id)).collect();
    drop(g);

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut param = 0;
        while flat >= work[param].numel() {
            flat -= work[param].numel();
            param += 1;
        }
        let orig = work[param].data()[flat];
        work[param].data_mut()[flat] = orig + step;
        let plus = eval(&work)?;
        work[param].data_mut()[flat] = orig - step;
        let minus = eval(&work)?;
        work[param].data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads[param].data()[flat];
        out.push(GradSample {
            param,
            index: flat,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}

/// Maximum relative error over the sampled coordinates.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let s = grad_samples(f, params, step, samples, seed)?;
    Ok(s.iter().map(|s| s.rel_error).fold(0.0, f64::max))
}
