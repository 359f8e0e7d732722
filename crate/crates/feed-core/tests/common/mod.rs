//! Shared helpers for the integration suites: a central finite-difference
//! oracle that is independent of the reverse-mode path it checks.

use feed_core::nn::ParamStore;
use feed_core::GradientMap;

/// Central finite differences of `loss` with respect to every parameter in
/// the store. The loss closure must be a pure function of the store.
pub fn finite_difference_grads(
    params: &ParamStore<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
    h: f64,
) -> GradientMap {
    let mut grads = GradientMap::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let base = params.get(&name).unwrap().detached();
        let mut grad = vec![0.0; base.numel()];
        for i in 0..base.numel() {
            let mut plus = params.clone();
            let mut t = base.detached();
            t.data_mut()[i] += h;
            plus.insert(name.clone(), t);
            let up = loss(&plus);

            let mut minus = params.clone();
            let mut t = base.detached();
            t.data_mut()[i] -= h;
            minus.insert(name.clone(), t);
            let down = loss(&minus);

            grad[i] = (up - down) / (2.0 * h);
        }
        grads.insert(
            name,
            feed_core::Tensor::from_vec(base.shape().to_vec(), grad).unwrap(),
        );
    }
    grads
}

/// Largest relative error between analytic and numeric gradients.
/// Relative error uses `max(|a|, |n|, 1.0)` as the scale so tiny gradients
/// compare absolutely.
pub fn max_relative_error(analytic: &GradientMap, numeric: &GradientMap) -> f64 {
    let mut worst = 0.0f64;
    for (name, a) in analytic.iter() {
        let n = numeric
            .get(name)
            .unwrap_or_else(|| panic!("missing numeric gradient for {name}"));
        for (av, nv) in a.data().iter().zip(n.data()) {
            let scale = av.abs().max(nv.abs()).max(1.0);
            worst = worst.max((av - nv).abs() / scale);
        }
    }
    worst
}
