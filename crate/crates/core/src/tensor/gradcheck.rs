use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all entries of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries: usize,
    /// `(analytic, numeric)` for every checked entry, in parameter order.
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    /// Entries violating `|a − n| <= rtol·max(|a|, |n|) + atol`.
    pub fn violations(&self, rtol: f64, atol: f64) -> usize {
        self.pairs
            .iter()
            .filter(|(a, n)| (a - n).abs() > rtol * a.abs().max(n.abs()) + atol)
            .count()
    }

    /// Largest `max(|a|, |n|)` among entries whose relative error exceeds `rtol`.
    pub fn largest_failing_magnitude(&self, rtol: f64) -> Option<f64> {
        self.pairs
            .iter()
            .filter(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8) >= rtol)
            .map(|(a, n)| a.abs().max(n.abs()))
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }
}

fn eval<F>(params: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok(v[0])
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `eps`, over every entry of every parameter in `params`.
///
/// `f` must be deterministic. Parameters are restored before returning.
pub fn grad_check<F>(params: &mut ParamStore<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var>,
{
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        if tape.value(out).len() != 1 {
            return Err(Error::contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        let grads = tape.backward(out)?;
        params
            .ids()
            .map(|id| {
                let g = grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; params.get(id).len()]);
                (id, g)
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries: 0,
        pairs: Vec::new(),
    };
    for (id, grad) in analytic {
        for (k, &a) in grad.iter().enumerate() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(params, &f);
            params.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(params, &f);
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries += 1;
            report.pairs.push((a, numeric));
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), k));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
