use std::collections::BTreeMap;

use super::{Bindings, DiffError, Graph, Tensor};

/// Central-difference gradient `(f(x + h e_k) - f(x - h e_k)) / 2h`.
pub fn finite_diff<F>(mut f: F, point: &Tensor, h: f64) -> Result<Tensor, DiffError>
where
    F: FnMut(&Tensor) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(DiffError::BadStep(h));
    }
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for k in 0..point.len() {
        let x0 = point.data()[k];
        probe.data_mut()[k] = x0 + h;
        let up = f(&probe);
        probe.data_mut()[k] = x0 - h;
        let down = f(&probe);
        probe.data_mut()[k] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(DiffError::NonFiniteProbe { coordinate: k });
        }
        grad.data_mut()[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error with the `max(|a|, |b|, 1e-12)` denominator.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Outcome of comparing reverse-mode gradients with finite differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: BTreeMap<String, Tensor>,
    pub numeric: BTreeMap<String, Tensor>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Leaf and flat index where `max_rel_error` was observed.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Entries whose absolute difference is below this are counted as exact.
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            abs_tol: 1e-9,
            rel_tol: 1e-4,
        }
    }
}

impl GradCheck {
    pub fn run(&self, graph: &Graph, bindings: &Bindings) -> Result<GradReport, DiffError> {
        let analytic = graph.backward(bindings)?;
        let mut numeric = BTreeMap::new();
        let mut max_rel_error = 0.0f64;
        let mut max_abs_error = 0.0f64;
        let mut worst = None;

        for (name, grad) in &analytic {
            let point = bindings
                .get(name)
                .ok_or_else(|| DiffError::Unbound(name.clone()))?;
            let mut scratch = bindings.clone();
            let mut failure = None;
            let fd = finite_diff(
                |x| {
                    scratch.insert(name.clone(), x.clone());
                    match graph.forward(&scratch) {
                        Ok(v) => v,
                        Err(e) => {
                            failure.get_or_insert(e);
                            f64::NAN
                        }
                    }
                },
                point,
                self.step,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            let fd = fd?;
            for (i, (&a, &b)) in grad.data().iter().zip(fd.data()).enumerate() {
                max_abs_error = max_abs_error.max((a - b).abs());
                if (a - b).abs() <= self.abs_tol {
                    continue;
                }
                let r = rel_error(a, b);
                if r > max_rel_error {
                    max_rel_error = r;
                    worst = Some((name.clone(), i));
                }
            }
            numeric.insert(name.clone(), fd);
        }

        Ok(GradReport {
            analytic,
            numeric,
            max_rel_error,
            max_abs_error,
            worst,
            tolerance: self.rel_tol,
            pass: max_rel_error <= self.rel_tol,
        })
    }
}

/// Gradient check with the default finite-difference step.
pub fn gradcheck(
    graph: &Graph,
    bindings: &Bindings,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<GradReport, DiffError> {
    GradCheck {
        abs_tol,
        rel_tol,
        ..GradCheck::default()
    }
    .run(graph, bindings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff(|x| x.data()[0] * x.data()[0], &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff(|_| 4.2, &Tensor::vector(vec![1.0, -2.0, 0.5]), 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_names_coordinate() {
        let err = finite_diff(
            |x| {
                if x.data()[1] > 1.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            },
            &Tensor::vector(vec![0.0, 1.0]),
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::NonFiniteProbe { coordinate: 1 }));
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff(|_| 0.0, &Tensor::scalar(0.0), 0.0).is_err());
        assert!(finite_diff(|_| 0.0, &Tensor::scalar(0.0), -1.0).is_err());
    }

    #[test]
    fn polynomial_passes_and_skewed_adjoint_fails() {
        // f(x, y) = sum(x * x * y) + sum(x)
        let mut g = Graph::new();
        let x = g.leaf("x");
        let y = g.leaf("y");
        let xx = g.mul(x, x);
        let xxy = g.mul(xx, y);
        let a = g.sum(xxy);
        let b = g.sum(x);
        let out = g.add(a, b);
        g.set_output(out);
        let bindings: Bindings = [
            ("x".to_string(), Tensor::vector(vec![0.3, -1.2, 2.0])),
            ("y".to_string(), Tensor::vector(vec![1.5, 0.7, -0.4])),
        ]
        .into_iter()
        .collect();
        let report = gradcheck(&g, &bindings, 1e-9, 1e-4).unwrap();
        assert!(report.pass, "max rel {}", report.max_rel_error);

        g.skew_adjoint(xx, 1.01);
        let report = gradcheck(&g, &bindings, 1e-9, 1e-4).unwrap();
        assert!(!report.pass);
    }
}
