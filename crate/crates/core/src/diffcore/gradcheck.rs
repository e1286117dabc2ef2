//! Central finite-difference check of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

/// Per-probe outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar `f` against central
/// differences on `probes` randomly chosen scalar parameters.
///
/// `f` must be deterministic (dropout off). The store's gradients are left
/// zeroed.
pub fn grad_check<F>(f: F, store: &mut ParameterStore, probes: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, store);
    let analytic: Vec<_> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grads();

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok(t.value(l).item())
    };

    let total = store.n_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: Vec::with_capacity(probes),
    };
    if total == 0 {
        return Ok(report);
    }
    let ids: Vec<_> = store.ids().collect();
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= store.value(ids[which]).len() {
            flat -= store.value(ids[which]).len();
            which += 1;
        }
        let id = ids[which];
        let orig = store.value(id).as_slice()[flat];
        store.value_mut(id).as_mut_slice()[flat] = orig + FD_STEP;
        let up = eval(store)?;
        store.value_mut(id).as_mut_slice()[flat] = orig - FD_STEP;
        let down = eval(store)?;
        store.value_mut(id).as_mut_slice()[flat] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[id.index()].as_slice()[flat];
        let err = rel_error(a, numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        report.probes.push(Probe {
            param: store.param(id).name.clone(),
            index: flat,
            analytic: a,
            numeric,
            rel_error: err,
        });
    }
    Ok(report)
}
