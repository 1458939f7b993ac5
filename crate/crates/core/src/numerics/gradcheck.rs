//! Central finite-difference verification of graph gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, DiffArray, Graph, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the
    /// checked tensors.
    pub max_rel_err: f64,
    /// Number of scalar coordinates perturbed.
    pub coords: usize,
}

impl GradCheck {
    fn merge(self, rel: f64, coords: usize) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(rel),
            coords: self.coords + coords,
        }
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

fn scalar_loss<F>(inputs: &[(Vec<usize>, Vec<f64>)], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[DiffArray]) -> Result<DiffArray>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(s, v)| g.variable(s, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let l = build(&mut g, &vars)?;
    Ok(g.item(l))
}

/// Compares backward gradients of the scalar built by `build` against
/// central differences with step `eps`, for every coordinate of every input.
pub fn check_inputs<F>(inputs: &[(Vec<usize>, Vec<f64>)], eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[DiffArray]) -> Result<DiffArray>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(s, v)| g.variable(s, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let l = build(&mut g, &vars)?;
    g.backward(l)?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        coords: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map_or_else(|| vec![0.0; inputs[k].1.len()], <[f64]>::to_vec);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].1.len() {
            let x = inputs[k].1[i];
            probe[k].1[i] = x + eps;
            let up = scalar_loss(&probe, &build)?;
            probe[k].1[i] = x - eps;
            let down = scalar_loss(&probe, &build)?;
            probe[k].1[i] = x;
            numeric.push((up - down) / (2.0 * eps));
        }
        report = report.merge(rel_err(&analytic, &numeric), numeric.len());
    }
    Ok(report)
}

/// Same check over every trainable tensor of a parameter set.
pub fn check_params<F>(params: &ParamSet<f64>, eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>, &Bound) -> Result<DiffArray>,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let l = build(&mut g, p, &b)?;
        Ok(g.item(l))
    };
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let l = build(&mut g, params, &bound)?;
    g.backward(l)?;
    let mut work = params.clone();
    work.zero_grads();
    work.accumulate_grads(&g, &bound);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        coords: 0,
    };
    let names: Vec<String> = params.iter().filter(|t| t.trainable).map(|t| t.name.clone()).collect();
    let mut probe = params.clone();
    for name in names {
        let analytic = work.require(&name)?.grad.clone();
        let n = analytic.len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let x = params.require(&name)?.values[i];
            probe.require_mut(&name)?.values[i] = x + eps;
            let up = eval(&probe)?;
            probe.require_mut(&name)?.values[i] = x - eps;
            let down = eval(&probe)?;
            probe.require_mut(&name)?.values[i] = x;
            numeric.push((up - down) / (2.0 * eps));
        }
        report = report.merge(rel_err(&analytic, &numeric), n);
    }
    if report.coords == 0 {
        return Err(Error::invalid("no trainable coordinates to check"));
    }
    Ok(report)
}

/// `Σ out ⊙ R` with a seeded random `R`, so the check covers the whole
/// Jacobian rather than one direction of it.
pub fn project(g: &mut Graph<f64>, out: DiffArray, seed: u64) -> Result<DiffArray> {
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = g.constant(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}
