//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Gradients smaller than this (times `max(1, |loss|)`) are compared in
/// absolute terms: round-off in a central difference grows with the loss.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Which coordinates to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// `count` coordinates drawn uniformly without replacement.
    Sample { count: usize, seed: u64 },
}

/// `|a − n| / max(|a|, |n|, floor · max(1, |loss|))`.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = RELATIVE_ERROR_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Anything that owns one or more 64-bit parameter stores.
pub trait Parameterized {
    fn param_stores(&mut self) -> Vec<&mut ParamStore<f64>>;
}

impl Parameterized for ParamStore<f64> {
    fn param_stores(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![self]
    }
}

impl<A: Parameterized, B: Parameterized> Parameterized for (A, B) {
    fn param_stores(&mut self) -> Vec<&mut ParamStore<f64>> {
        let mut v = self.0.param_stores();
        v.extend(self.1.param_stores());
        v
    }
}

fn value_at<M: Parameterized>(model: &mut M, (s, p, i): (usize, usize, usize)) -> f64 {
    model.param_stores()[s].params()[p].value.data()[i]
}

fn set_value<M: Parameterized>(model: &mut M, (s, p, i): (usize, usize, usize), v: f64) {
    model.param_stores().swap_remove(s).params_mut()[p].value.data_mut()[i] = v;
}

/// Compare reverse-mode gradients of the scalar built by `f` against
/// `(f(θ+εe) − f(θ−εe)) / 2ε`, returning the largest relative error.
///
/// `f` must be a deterministic function of the parameter values (reseed any
/// RNG it uses on every call).
pub fn grad_check<M, F>(model: &mut M, mut f: F, eps: f64, coords: Coords) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut M, &mut Graph<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::arg("grad_check", "eps must be positive"));
    }
    for store in model.param_stores() {
        store.zero_grad();
    }
    let loss_value = {
        let mut g = Graph::new();
        let loss = f(model, &mut g)?;
        let grads = g.backward(loss)?;
        for store in model.param_stores() {
            store.accumulate_grads(&g, &grads);
        }
        g.value(loss).item()
    };

    let offsets: Vec<(usize, usize, usize)> = model
        .param_stores()
        .iter()
        .enumerate()
        .flat_map(|(s, store)| {
            store
                .params()
                .iter()
                .enumerate()
                .flat_map(move |(p, param)| (0..param.value.len()).map(move |i| (s, p, i)))
        })
        .collect();
    let chosen: Vec<(usize, usize, usize)> = match coords {
        Coords::All => offsets,
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = count.min(offsets.len());
            let mut idx = sample(&mut rng, offsets.len(), count).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| offsets[i]).collect()
        }
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for c in chosen {
        let (s, p, i) = c;
        let analytic = model.param_stores()[s].params()[p].grad.data()[i];
        let orig = value_at(model, c);
        set_value(model, c, orig + eps);
        let plus = eval_loss(&mut f, model)?;
        set_value(model, c, orig - eps);
        let minus = eval_loss(&mut f, model)?;
        set_value(model, c, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic, numeric, loss_value);
        report.coords_checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((model.param_stores()[s].params()[p].name.clone(), i));
        }
    }
    Ok(report)
}

fn eval_loss<M, F>(f: &mut F, model: &mut M) -> Result<f64>
where
    F: FnMut(&mut M, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(model, &mut g)?;
    Ok(g.value(loss).item())
}
