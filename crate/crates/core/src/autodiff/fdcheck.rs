use serde::Serialize;

use super::{AutodiffError, Graph, ParameterSet, Var};

/// Settings for [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct FdConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter, evenly strided.
    pub max_entries_per_param: Option<usize>,
    /// Added to every analytic gradient entry before comparison. Only
    /// useful for demonstrating that a broken gradient is caught.
    pub analytic_perturbation: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { eps: 1e-5, tol: 1e-6, max_entries_per_param: None, analytic_perturbation: 0.0 }
    }
}

impl FdConfig {
    pub fn with_tol(tol: f64) -> Self {
        FdConfig { tol, ..Default::default() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FdParamResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub loss: f64,
    pub per_param: Vec<FdParamResult>,
    pub passed: bool,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// The relative error of each entry is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_difference_check<E, F>(params: &ParameterSet, cfg: &FdConfig, loss: F) -> Result<FdReport, E>
where
    E: From<AutodiffError>,
    F: Fn(&mut Graph<'_>) -> Result<Var, E>,
{
    let (value, analytic) = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        let value = g.scalar(l)?;
        (value, g.backward(l)?.parameters(&g))
    };

    let eval = |ps: &ParameterSet| -> Result<f64, E> {
        let mut g = Graph::new(ps);
        let l = loss(&mut g)?;
        Ok(g.scalar(l)?)
    };

    let mut probe = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    for (pidx, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.len();
        let stride = match cfg.max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let grad = analytic.by_index(pidx).expect("same layout").1;
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = tensor.data()[i];
            let mut at = |offset: f64| -> Result<f64, E> {
                probe.tensor_at_mut(pidx).data_mut()[i] = orig + offset;
                let v = eval(&probe);
                probe.tensor_at_mut(pidx).data_mut()[i] = orig;
                match v {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) | Err(_) => Err(AutodiffError::NonFiniteProbe { param: name.to_string(), index: i, offset }.into()),
                }
            };
            let plus = at(cfg.eps)?;
            let minus = at(-cfg.eps)?;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = grad.data()[i] + cfg.analytic_perturbation;
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > worst || checked == 0 {
                worst = rel;
                worst_index = i;
            }
            checked += 1;
        }
        per_param.push(FdParamResult {
            name: name.to_string(),
            checked,
            max_rel_err: worst,
            worst_index,
            passed: worst <= cfg.tol,
        });
    }
    let passed = per_param.iter().all(|r| r.passed);
    Ok(FdReport { loss: value, per_param, passed })
}
