//! Finite-difference checks of parameter gradients for anything built on a
//! [`Session`]. Inputs under test can be registered as parameters too.

use hg_tensor::check::{rel_error, FD_STEP};
use hg_tensor::Var;

use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};

/// One scalar coordinate of one parameter.
pub type Coord = (ParamId, usize);

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub coords: Vec<Coord>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl ParamCheck {
    pub fn rel_error(&self) -> f64 {
        rel_error(&self.analytic, &self.numeric)
    }

    /// Largest per-coordinate error, relative to the larger magnitude of the
    /// pair (absolute below `floor`).
    pub fn max_coord_error(&self, floor: f64) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Every scalar coordinate of every parameter in `store`.
pub fn all_coords(store: &ParamStore) -> Vec<Coord> {
    store
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect()
}

/// Compares the backward pass of `f` with central differences at `coords`.
/// `f` must build a scalar loss.
pub fn check_params<F>(store: &ParamStore, coords: &[Coord], f: F) -> Result<ParamCheck>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::new(store, true);
    let loss = f(&mut s)?;
    let grads = s.param_grads(loss)?;
    let analytic = coords.iter().map(|&(id, i)| grads.get(id)[i]).collect();

    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::new(st, false);
        let out = f(&mut s)?;
        Ok(s.g.value(out).item())
    };
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + FD_STEP;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - FD_STEP;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(ParamCheck {
        coords: coords.to_vec(),
        analytic,
        numeric,
    })
}
