//! Central finite differences, used as an independent oracle for the
//! hand-written backward passes.

use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Relative error between two gradient tensors, measured on the whole
/// tensor: `|a - n|_2 / max(|a|_2, |n|_2)`. Tensors that are both
/// (numerically) zero compare as equal.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.sum_sq().sqrt().max(numeric.sum_sq().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Numerical gradient of `f` with respect to parameter `index`.
pub fn numeric_param_grad(
    store: &ParamStore<f64>,
    index: usize,
    h: f64,
    f: &dyn Fn(&ParamStore<f64>) -> f64,
) -> Tensor<f64> {
    let mut probe = store.clone();
    let base = store.value(index).clone();
    let mut grad = Tensor::zeros(base.shape());
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[k] += h;
        probe.set(index, plus);
        let fp = f(&probe);
        let mut minus = base.clone();
        minus.data_mut()[k] -= h;
        probe.set(index, minus);
        let fm = f(&probe);
        grad.data_mut()[k] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Numerical gradient of `f` with respect to a free tensor argument.
pub fn numeric_grad(x: &Tensor<f64>, h: f64, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[k] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Outcome of checking every trainable parameter of a store.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> (String, f64) {
        self.per_param
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
    }
}

/// Compare `analytic` (one entry per parameter) against finite differences
/// of `f` for every trainable parameter.
pub fn check_store(
    store: &ParamStore<f64>,
    analytic: &[Option<Tensor<f64>>],
    h: f64,
    f: &dyn Fn(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut per_param = Vec::new();
    for i in 0..store.len() {
        if !store.is_trainable(i) {
            continue;
        }
        let numeric = numeric_param_grad(store, i, h, f);
        let a = analytic[i]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(numeric.shape()));
        per_param.push((store.name(i).to_string(), relative_error(&a, &numeric)));
    }
    GradCheckReport { per_param }
}
