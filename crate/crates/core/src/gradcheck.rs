//! Central finite-difference checks of analytic parameter gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
    pub elements: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `build` against central
/// differences with step `eps` for every trainable parameter in `store`.
pub fn check_gradients<F>(store: &ParamStore, eps: f64, floor: f64, build: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok(g.value(loss).data()[0])
    };
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let mut g = Graph::new();
        let loss = build(&mut g, &analytic)?;
        if g.value(loss).len() != 1 {
            return Err(Error::State("gradient check needs a scalar".into()));
        }
        let grads = g.backward(loss)?;
        grads.accumulate_into(&mut analytic)?;
    }
    let mut out = Vec::new();
    for (name, param) in analytic.iter().filter(|(_, p)| p.trainable) {
        let mut probe = store.clone();
        let mut worst = 0.0f64;
        let mut max_grad = 0.0f64;
        for i in 0..param.value.len() {
            let orig = probe.value(name)?.data()[i];
            probe.get_mut(name)?.value.data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.value.data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = param.grad.data()[i];
            worst = worst.max(relative_error(a, numeric, floor));
            max_grad = max_grad.max(a.abs());
        }
        out.push(GradCheck {
            name: name.to_string(),
            max_rel_err: worst,
            max_abs_grad: max_grad,
            elements: param.value.len(),
        });
    }
    Ok(out)
}
