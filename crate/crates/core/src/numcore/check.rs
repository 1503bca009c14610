use crate::error::{Error, Result};
use crate::numcore::{load_store, to_store, ParamStore, Parameters};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares the gradients stored in `params` against central differences of
/// `loss_fn`.
///
/// `loss_fn` receives a copy of the store with one entry perturbed by `±eps`.
pub fn check_gradient<F>(mut loss_fn: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid("eps", format!("{eps} outside [1e-7, 1e-3]")));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    for name in &names {
        let n = params.get(name).map_or(0, |e| e.value.len());
        for idx in 0..n {
            let original = params.get(name).unwrap().value.as_slice()[idx];
            let analytic = params.get(name).unwrap().grad.as_slice()[idx];

            work.get_mut(name).unwrap().value.as_mut_slice()[idx] = original + eps;
            let plus = eval(&mut loss_fn, &work, name)?;
            work.get_mut(name).unwrap().value.as_mut_slice()[idx] = original - eps;
            let minus = eval(&mut loss_fn, &work, name)?;
            work.get_mut(name).unwrap().value.as_mut_slice()[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

fn eval<F>(loss_fn: &mut F, store: &ParamStore, name: &str) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let v = loss_fn(store)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: format!("loss while perturbing {name}"),
            index: 0,
        });
    }
    Ok(v)
}

/// Gradient check for a typed model: `grads` holds the analytic gradient of
/// `loss` at `model`.
pub fn check_model_gradient<P, F>(
    model: &P,
    grads: &P,
    mut loss: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let store = to_store(model, Some(grads))?;
    let mut scratch = model.clone();
    check_gradient(
        |s| {
            load_store(&mut scratch, s)?;
            loss(&scratch)
        },
        &store,
        eps,
    )
}
