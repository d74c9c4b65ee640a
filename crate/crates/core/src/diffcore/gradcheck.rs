use super::graph::{Gradients, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};

/// Finite-difference gradient check settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step, within `[1e-8, 1e-4]`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Hold piecewise-linear activations on the branches taken at the
    /// unperturbed point, so probes never straddle a kink.
    pub freeze_branches: bool,
    /// Restrict the check to these parameters; all when `None`.
    pub only: Option<Vec<ParamId>>,
    /// Combine central differences at `step` and `step / 2` by one Richardson
    /// step, cancelling the second-order truncation term. Useful with larger
    /// steps when some adjoints are small enough for roundoff to dominate.
    pub extrapolate: bool,
    /// Entries whose analytic and numeric magnitudes both fall below this are
    /// compared by absolute rather than relative error.
    pub absolute_below: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-6,
            tolerance: 1e-6,
            freeze_branches: true,
            only: None,
            extrapolate: false,
            absolute_below: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Function value at the unperturbed point.
    pub value: f64,
    pub analytic: Gradients,
    /// Finite-difference estimates; zero for entries outside `only`.
    pub numeric: Gradients,
    pub passed: bool,
}

impl GradCheckReport {
    /// Absolute error a central difference at `step` can carry from rounding
    /// the function value alone, with a generous constant.
    pub fn roundoff_allowance(&self, step: f64) -> f64 {
        32.0 * f64::EPSILON * self.value.abs().max(1.0) / step
    }

    /// Largest `|a - n| / (tolerance * max(|a|, |n|) + allowance)` over all
    /// entries; at most 1 when every entry meets the relative tolerance up to
    /// the absolute allowance.
    pub fn worst_ratio(&self, tolerance: f64, allowance: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, n) in self.analytic.iter().zip(self.numeric.iter()) {
            for (&a, &n) in a.iter().zip(n) {
                let bound = tolerance * a.abs().max(n.abs()) + allowance;
                worst = worst.max((a - n).abs() / bound);
            }
        }
        worst
    }
}

/// Error measure: relative when either magnitude reaches 1e-8, absolute below.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    gradient_error_with_floor(analytic, numeric, 1e-8)
}

fn gradient_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}

/// Compares recorded adjoints of a scalar function against central differences
/// for every selected parameter entry.
///
/// `f` rebuilds the forward pass on the graph it is handed and returns the
/// scalar output. It must be deterministic.
pub fn check_gradients<F>(
    params: &mut ParamSet,
    cfg: &GradCheck,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&cfg.step) {
        return Err(Error::Oracle(format!(
            "step {} outside [1e-8, 1e-4]",
            cfg.step
        )));
    }

    let (analytic, pattern, value) = {
        let mut g = if cfg.freeze_branches {
            Graph::recording(params)
        } else {
            Graph::with_params(params)
        };
        let out = f(&mut g)?;
        let value = g.scalar(out);
        if !value.is_finite() {
            return Err(Error::Oracle(format!("non-finite function value {value}")));
        }
        let pattern = g.branch_pattern();
        (g.backward(out)?, pattern, value)
    };

    let ids: Vec<ParamId> = match &cfg.only {
        Some(ids) => ids.clone(),
        None => params.ids().collect(),
    };

    let mut eval = |params: &ParamSet| -> Result<f64> {
        let mut g = if cfg.freeze_branches {
            Graph::replaying(params, pattern.clone())
        } else {
            Graph::with_params(params)
        };
        let out = f(&mut g)?;
        if !g.replay_consistent() {
            return Err(Error::Oracle(
                "forward pass changed structure between evaluations".into(),
            ));
        }
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::Oracle(format!("non-finite function value {v}")));
        }
        Ok(v)
    };

    let mut numeric_all = Gradients::zeros_like(params);
    let mut max_error = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for id in ids {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).values()[k];
            let mut central = |h: f64| -> Result<f64> {
                params.get_mut(id).values_mut()[k] = orig + h;
                let up = eval(params);
                params.get_mut(id).values_mut()[k] = orig - h;
                let down = eval(params);
                params.get_mut(id).values_mut()[k] = orig;
                Ok((up? - down?) / (2.0 * h))
            };
            let numeric = if cfg.extrapolate {
                let coarse = central(cfg.step)?;
                let fine = central(cfg.step / 2.0)?;
                (4.0 * fine - coarse) / 3.0
            } else {
                central(cfg.step)?
            };
            let err = gradient_error_with_floor(analytic.get(id)[k], numeric, cfg.absolute_below);
            if err > max_error || worst.is_none() {
                max_error = err;
                worst = Some((params.name(id).to_string(), k));
            }
            numeric_all.get_mut(id)[k] = numeric;
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_error,
        worst,
        checked,
        passed: max_error < cfg.tolerance,
        value,
        analytic,
        numeric: numeric_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn square_at_three() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![3.0]));
        let report = check_gradients(&mut ps, &GradCheck::default(), |g| {
            let x = g.param(id);
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(report.analytic.get(id), &[6.0]);
        assert!(report.max_error < 1e-8, "{}", report.max_error);
        assert!(report.passed);
    }

    #[test]
    fn step_out_of_range_rejected() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![3.0]));
        let cfg = GradCheck {
            step: 1e-2,
            ..GradCheck::default()
        };
        let r = check_gradients(&mut ps, &cfg, |g| {
            let x = g.param(id);
            Ok(g.sum(x))
        });
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    #[test]
    fn non_finite_function_rejected() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![f64::INFINITY]));
        let r = check_gradients(&mut ps, &GradCheck::default(), |g| {
            let x = g.param(id);
            Ok(g.sum(x))
        });
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    #[test]
    fn extrapolation_cancels_truncation() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![0.7]));
        let cfg = GradCheck {
            step: 1e-4,
            extrapolate: true,
            ..GradCheck::default()
        };
        let report = check_gradients(&mut ps, &cfg, |g| {
            let x = g.param(id);
            let t = g.tanh(x);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(report.max_error < 1e-10, "{}", report.max_error);
    }

    #[test]
    fn error_measure_switches_to_absolute() {
        assert_eq!(gradient_error(1e-10, 2e-10), 1e-10);
        assert!((gradient_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
