use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::par::par_map;

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `build` against central finite differences
/// over every coordinate of the parameters in `ids`.
///
/// `build` must be a pure function of the parameter values (fix any noise
/// before calling).
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var> + Sync,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        tape.backward(loss)?.into_param_grads()
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let per_param = par_map(ids, |&id| -> Result<(f64, usize, usize)> {
        let mut local = store.clone();
        let n = local.value(id).len();
        let mut worst = (0.0f64, 0usize);
        for i in 0..n {
            let orig = local.value(id).data()[i];
            local.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let fp = eval(&local)?;
            local.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let fm = eval(&local)?;
            local.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[id.index()]
                .as_ref()
                .map_or(0.0, |g| g.data()[i]);
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, i);
            }
        }
        Ok((worst.0, worst.1, n))
    });

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (&id, r) in ids.iter().zip(per_param) {
        let (e, idx, n) = r?;
        report.checked += n;
        if report.worst.is_none() || e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((store.get(id).name.clone(), idx));
        }
    }
    Ok(report)
}

/// Same as [`check_params`] over every parameter in the store.
pub fn check_all<F>(store: &ParamStore, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var> + Sync,
{
    let ids: Vec<_> = store.ids().collect();
    check_params(store, &ids, build)
}
