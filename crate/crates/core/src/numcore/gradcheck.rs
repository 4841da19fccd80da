//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Parameterized;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Parameters with more coordinates than this are checked on a seeded
    /// random subset of this size.
    pub max_coords_per_param: usize,
    /// Gradients smaller than this are compared on an absolute scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_coords_per_param: usize::MAX,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the gradients that `loss_fn` accumulates into `model` against
/// central differences. `loss_fn` must return the loss and add its
/// gradient into the parameter grad buffers. Grad buffers are zeroed on
/// return.
pub fn grad_check<M, F>(model: &mut M, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized + ?Sized,
    F: FnMut(&mut M) -> Result<f64>,
{
    model.zero_grads();
    loss_fn(model)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.data().to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        passed: true,
    };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let len = grads.len();
        let coords: Vec<usize> = if len > opts.max_coords_per_param {
            let mut c = sample(&mut rng, len, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..len).collect()
        };
        for i in coords {
            let orig = model.params_mut()[pi].1.value.data()[i];
            model.params_mut()[pi].1.value.data_mut()[i] = orig + opts.eps;
            let plus = loss_fn(model)?;
            model.params_mut()[pi].1.value.data_mut()[i] = orig - opts.eps;
            let minus = loss_fn(model)?;
            model.params_mut()[pi].1.value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(grads[i], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = grads[i];
                report.numeric = numeric;
            }
        }
    }
    model.zero_grads();
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
