//! Central finite-difference verification of analytic gradients.

use rand::Rng;
use serde::Serialize;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::rng::rng_from;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step per coordinate.
    pub step: f64,
    /// Coordinates probed per parameter tensor (all of them if smaller).
    pub coords_per_param: usize,
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so that coordinates
    /// whose true gradient is ~0 are judged by absolute error.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, coords_per_param: 6, tol: 1e-4, denom_floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
    pub per_param: Vec<ParamCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the analytic gradient returned by `loss` with central differences
/// on a seeded subset of every trainable coordinate of `store`.
pub fn finite_diff_check<F>(store: &ParamStore, loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, ParamGrads)>,
{
    let (_, grads) = loss(store)?;
    let mut rng = rng_from(opts.seed, &[0x6772_6164]);
    let mut probe = store.clone();
    let mut per_param = Vec::new();
    let mut total = 0;
    let mut worst: f64 = 0.0;
    for i in 0..store.len() {
        let id = ParamId(i);
        let entry = store.entry(id);
        if entry.frozen {
            continue;
        }
        let n = entry.value.len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            (0..opts.coords_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        let mut check = ParamCheck { name: entry.name.clone(), coords: coords.len(), max_rel_err: 0.0, max_abs_grad: 0.0 };
        for c in coords {
            let original = store.get(id).data()[c];
            probe.get_mut(id).data_mut()[c] = original + opts.step;
            let (up, _) = loss(&probe)?;
            probe.get_mut(id).data_mut()[c] = original - opts.step;
            let (down, _) = loss(&probe)?;
            probe.get_mut(id).data_mut()[c] = original;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite(format!("loss at probe of {}[{c}]", entry.name)));
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
            let err = relative_error(analytic, numeric, opts.denom_floor);
            check.max_rel_err = check.max_rel_err.max(err);
            check.max_abs_grad = check.max_abs_grad.max(analytic.abs());
            total += 1;
        }
        worst = worst.max(check.max_rel_err);
        per_param.push(check);
    }
    Ok(GradCheckReport { max_rel_err: worst, coords_checked: total, tol: opts.tol, passed: worst < opts.tol, per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Bind, Graph, Tensor};

    fn sum_sq(store: &ParamStore) -> Result<(f64, ParamGrads)> {
        let mut g = Graph::new();
        let w = g.param(Bind::trainable(store), ParamId(0));
        let sq = g.square(w);
        let s = g.sum(sq);
        let grads = g.backward(s);
        Ok((g.scalar(s), g.param_grads(&grads, store)))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::filled(1, 5, 1.0), false);
        let report = finite_diff_check(&store, sum_sq, GradCheckOptions::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-8);
        assert_eq!(report.per_param[0].max_abs_grad, 2.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::filled(1, 3, 0.5), false);
        let report = finite_diff_check(
            &store,
            |s| Ok((4.0, ParamGrads::empty(s.len()))),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::filled(1, 3, 1.0), false);
        let report = finite_diff_check(
            &store,
            |s| {
                let (v, mut g) = sum_sq(s)?;
                g.scale(1.1);
                Ok((v, g))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn kl_gradient_wrt_q_mean() {
        use crate::numerics::gaussian::kl_diag_var;
        let mut store = ParamStore::new();
        store.add("mu_q", Tensor::row_vector(&[0.3, -1.2, 0.8]), false);
        let report = finite_diff_check(
            &store,
            |s| {
                let mut g = Graph::new();
                let mq = g.param(Bind::trainable(s), ParamId(0));
                let mp = g.constant_row(&[0.1, 0.4, -0.5]);
                let sp = g.constant_row(&[0.5, 1.0, 2.0]);
                let sq = g.constant_row(&[1.5, 0.7, 0.9]);
                let kl = kl_diag_var(&mut g, mp, sp, mq, sq);
                let grads = g.backward(kl);
                Ok((g.scalar(kl), g.param_grads(&grads, s)))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
