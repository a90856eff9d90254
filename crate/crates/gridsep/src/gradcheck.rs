//! Central-difference gradient verification.
//!
//! The caller supplies the parameter tensors and a closure that rebuilds the
//! computation from scratch and returns the scalar loss (plus analytic
//! gradients when asked). The harness perturbs individual elements, compares
//! (f(x+h) − f(x−h)) / 2h against the tape's gradient, and reports the worst
//! relative error. Used both by unit tests and the `verify` subcommand.

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Cap on probed elements per parameter (strided subsample above this).
    pub max_probes_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tol: 1e-4, max_probes_per_param: 64 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub probes: usize,
    pub max_rel_err: f64,
    /// "param_index[element]" of the worst probe.
    pub worst: String,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} probes, max rel err {:.3e} (tol {:.1e}, worst {}) -> {}",
            self.label,
            self.probes,
            self.max_rel_err,
            self.tol,
            self.worst,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Verify analytic gradients against central differences.
///
/// `eval(values, want_grads)` must rebuild the computation from `values`
/// (aligned with `params`) and return the loss; when `want_grads` is true it
/// also returns one gradient tensor per parameter, in order.
pub fn grad_check<F>(
    label: &str,
    params: &[Tensor<f64>],
    mut eval: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (_, grads) = eval(params, true)?;
    assert_eq!(grads.len(), params.len(), "eval returned wrong gradient count");

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut probes = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        if n == 0 {
            continue;
        }
        let stride = n.div_ceil(cfg.max_probes_per_param).max(1);
        let mut idx = 0;
        while idx < n {
            let x0 = param.data()[idx];
            work[pi].data_mut()[idx] = x0 + cfg.step;
            let (lp, _) = eval(&work, false)?;
            work[pi].data_mut()[idx] = x0 - cfg.step;
            let (lm, _) = eval(&work, false)?;
            work[pi].data_mut()[idx] = x0;
            let fd = (lp - lm) / (2.0 * cfg.step);
            let an = grads[pi].data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            probes += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{pi}[{idx}] fd={fd:.6e} an={an:.6e}");
            }
            idx += stride;
        }
    }
    Ok(GradCheckReport { label: label.to_string(), probes, max_rel_err: max_rel, worst, tol: cfg.tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Per-primitive gradient checks live in `verify::gradcheck_suite`; these
    // tests cover the harness itself with a loss whose gradient is known.
    fn quadratic_eval(
        scale: f64,
    ) -> impl FnMut(&[Tensor<f64>], bool) -> Result<(f64, Vec<Tensor<f64>>)> {
        // loss = Σ x²; `scale` ≠ 1 fakes a wrong analytic gradient
        move |vals, want| {
            let x = &vals[0];
            let loss: f64 = x.data().iter().map(|v| v * v).sum();
            let grads = if want {
                let g = x.data().iter().map(|v| scale * 2.0 * v).collect();
                vec![Tensor::from_vec(x.shape(), g)?]
            } else {
                Vec::new()
            };
            Ok((loss, grads))
        }
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let p = Tensor::from_vec(&[4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let r = grad_check("quad", &[p], quadratic_eval(1.0), &GradCheckConfig::default())
            .unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.probes, 4);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        let p = Tensor::from_vec(&[4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let r = grad_check("quad", &[p], quadratic_eval(1.01), &GradCheckConfig::default())
            .unwrap();
        assert!(!r.passed(), "{r}");
        assert!(r.max_rel_err > 5e-3, "{r}");
    }

    #[test]
    fn probing_is_strided_above_the_cap() {
        let vals: Vec<f64> = (0..100).map(|k| 0.01 * k as f64 - 0.7).collect();
        let p = Tensor::from_vec(&[100], vals).unwrap();
        let cfg = GradCheckConfig { max_probes_per_param: 10, ..Default::default() };
        let r = grad_check("quad", &[p], quadratic_eval(1.0), &cfg).unwrap();
        assert_eq!(r.probes, 10);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn zero_probes_never_pass() {
        let r = GradCheckReport {
            label: "empty".into(),
            probes: 0,
            max_rel_err: 0.0,
            worst: "-".into(),
            tol: 1e-4,
        };
        assert!(!r.passed());
    }
}
