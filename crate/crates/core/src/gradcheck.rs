//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::Gradients;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central difference half-step.
    pub step: f64,
    pub tolerance: f64,
    /// Parameters larger than this are subsampled to exactly this many
    /// coordinates.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            max_coords_per_param: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub per_param: Vec<ParamCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients from `loss_fn` against central differences
/// of its loss. The store is restored coordinate by coordinate.
pub fn gradient_check<F>(
    store: &mut ParameterStore,
    mut loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<(f64, Gradients)>,
{
    let (_, grads) = loss_fn(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();

    let mut per_param = Vec::with_capacity(ids.len());
    let mut worst = (f64::NEG_INFINITY, String::new(), 0usize, 0.0, 0.0);
    let mut checked = 0;
    for id in ids {
        let analytic = grads.dense(store, id);
        let numel = analytic.len();
        let coords: Vec<usize> = if numel <= opts.max_coords_per_param {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let name = store.get(id).name.clone();
        let mut pc = ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for &j in &coords {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + opts.step;
            let plus = loss_fn(store).map(|r| r.0);
            store.get_mut(id).value.data_mut()[j] = orig - opts.step;
            let minus = loss_fn(store).map(|r| r.0);
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let err = relative_error(analytic[j], numeric);
            if err > pc.max_rel_error {
                pc.max_rel_error = err;
                pc.worst_index = j;
            }
            if err > worst.0 {
                worst = (err, name.clone(), j, analytic[j], numeric);
            }
        }
        checked += coords.len();
        per_param.push(pc);
    }
    let max_rel_error = worst.0.max(0.0);
    Ok(GradCheckReport {
        max_rel_error,
        worst_param: worst.1,
        worst_index: worst.2,
        worst_analytic: worst.3,
        worst_numeric: worst.4,
        checked,
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
        per_param,
    })
}
