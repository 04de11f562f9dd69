//! Central finite-difference probes for verifying backward rules.

use crate::graph::{Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradProbe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares `∂f/∂inputs[i][j]` from the tape with a central difference of
/// step `eps` at every `(i, j)` in `probes`.
pub fn probe_gradients<T, F>(inputs: &[Tensor<T>], probes: &[(usize, usize)], eps: f64, f: F) -> Vec<GradProbe>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Var<'g, T>,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&g, &vars);
        let grads = g.backward(loss);
        vars.iter().map(|v| grads.of(*v)).collect::<Vec<_>>()
    };
    let eval = |inputs: &[Tensor<T>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).value().item().to_f64().unwrap()
    };
    probes
        .iter()
        .map(|&(i, j)| {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[j] += lit::<T>(eps);
            minus[i].data_mut()[j] -= lit::<T>(eps);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            GradProbe { input: i, index: j, analytic: analytic[i].data()[j].to_f64().unwrap(), numeric }
        })
        .collect()
}
