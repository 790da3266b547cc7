use super::{ParamStore, Tape, Var};
use crate::error::{invalid, Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub entries: usize,
}

fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Perturbs every parameter entry by `+-step` and returns the largest
/// `|analytic - numeric| / max(|numeric|, 1e-8)` over all entries.
pub fn finite_diff_check<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let analytic = tape.backward(out, store)?.into_params();

    let mut probe = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        entries: 0,
    };
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let fp = eval_scalar(&f, &probe)?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let fm = eval_scalar(&f, &probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "function value at parameter {:?} index {j}",
                    store.name(id)
                )));
            }
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[id.index()].data()[j];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.entries += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((store.name(id).to_string(), j));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
