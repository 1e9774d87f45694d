//! Gradient checking against central finite differences. The numeric
//! gradient is built purely from forward evaluations, so it validates the
//! reverse sweep without sharing any of its code.

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Default probe step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` w.r.t. every entry of every
/// parameter. `f` must be deterministic in the parameters (fix RNG seeds
/// before evaluating).
pub fn central_difference<F>(params: &ParamSet, mut f: F, step: f64) -> Vec<Tensor>
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let numel = params.get(idx).tensor.numel();
        let mut grad = vec![0.0; numel];
        for j in 0..numel {
            let orig = probe.get(idx).tensor.values()[j];
            probe.get_mut(idx).tensor.values_mut()[j] = orig + step;
            let plus = f(&probe);
            probe.get_mut(idx).tensor.values_mut()[j] = orig - step;
            let minus = f(&probe);
            probe.get_mut(idx).tensor.values_mut()[j] = orig;
            grad[j] = (plus - minus) / (2.0 * step);
        }
        out.push(Tensor::new(params.get(idx).tensor.shape().to_vec(), grad).unwrap());
    }
    out
}

/// Central-difference gradient of `f` w.r.t. a single tensor input.
pub fn central_difference_tensor<F>(input: &Tensor, mut f: F, step: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = input.clone();
    let mut grad = vec![0.0; input.numel()];
    for j in 0..input.numel() {
        let orig = probe.values()[j];
        probe.values_mut()[j] = orig + step;
        let plus = f(&probe);
        probe.values_mut()[j] = orig - step;
        let minus = f(&probe);
        probe.values_mut()[j] = orig;
        grad[j] = (plus - minus) / (2.0 * step);
    }
    Tensor::new(input.shape().to_vec(), grad).unwrap()
}

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Parameter index and flat element index of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    /// |analytic - numeric| of the worst entry.
    pub abs_err: f64,
    /// abs_err / max(|analytic|, |numeric|) of the worst entry.
    pub rel_err: f64,
    /// Entries that failed the tolerance.
    pub failures: usize,
    pub checked: usize,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

/// Tolerance rule: an entry passes when
/// |a - n| <= max(rel * max(|a|, |n|), abs).
pub fn compare_gradients(
    analytic: &[Tensor],
    numeric: &[Tensor],
    rel: f64,
    abs: f64,
) -> GradReport {
    let mut report = GradReport {
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        abs_err: 0.0,
        rel_err: 0.0,
        failures: 0,
        checked: 0,
    };
    let mut worst_score = -1.0f64;
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.values().iter().zip(n.values()).enumerate() {
            report.checked += 1;
            let abs_err = (av - nv).abs();
            let scale = av.abs().max(nv.abs());
            let tol = (rel * scale).max(abs);
            let score = abs_err / tol;
            if score > worst_score {
                worst_score = score;
                report.worst = Some((pi, j));
                report.analytic = av;
                report.numeric = nv;
                report.abs_err = abs_err;
                report.rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
            }
            if abs_err > tol {
                report.failures += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn finite_differences_recover_quadratic_gradient() {
        // f(p) = sum(p^2); df/dp = 2p.
        let mut set = ParamSet::new();
        set.insert("p", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        let numeric = central_difference(
            &set,
            |ps| ps.get(0).tensor.values().iter().map(|x| x * x).sum(),
            FD_STEP,
        );
        let expect = [2.0, -4.0, 1.0];
        for (g, e) in numeric[0].values().iter().zip(expect) {
            assert!((g - e).abs() < 1e-8, "{g} vs {e}");
        }
    }

    #[test]
    fn tape_backward_agrees_with_finite_differences_on_composite() {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::matrix(2, 2, vec![0.3, -0.7, 0.9, 0.1]).unwrap())
            .unwrap();
        set.insert("b", Tensor::vector(vec![0.05, -0.2])).unwrap();

        let eval = |ps: &ParamSet| {
            let mut tape = Tape::new();
            let bind = ps.bind(&mut tape);
            let x = tape.leaf(Tensor::matrix(1, 2, vec![0.4, 1.3]).unwrap());
            let wx = tape.matmul(x, bind.node(0)).unwrap();
            let wx = tape.reshape(wx, &[2]).unwrap();
            let z = tape.add(wx, bind.node(1)).unwrap();
            let s = tape.softmax(z).unwrap();
            let t = tape.tanh(s);
            let out = tape.sum(t);
            tape.scalar_value(out).unwrap()
        };

        let numeric = central_difference(&set, eval, FD_STEP);

        let mut tape = Tape::new();
        let bind = set.bind(&mut tape);
        let x = tape.leaf(Tensor::matrix(1, 2, vec![0.4, 1.3]).unwrap());
        let wx = tape.matmul(x, bind.node(0)).unwrap();
        let wx = tape.reshape(wx, &[2]).unwrap();
        let z = tape.add(wx, bind.node(1)).unwrap();
        let s = tape.softmax(z).unwrap();
        let t = tape.tanh(s);
        let out = tape.sum(t);
        let grads = tape.backward(out).unwrap();
        let analytic = bind.gradients(&set, &grads);

        let report = compare_gradients(&analytic, &numeric, 1e-4, 1e-7);
        assert!(report.ok(), "{report:?}");
    }
}
