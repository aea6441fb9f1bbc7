use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Analytic vs central-difference comparison for each parameter tensor.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `max_j |analytic_j − numeric_j| / max(‖analytic‖∞, ‖numeric‖∞)` per parameter.
    pub per_param: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `loss_fn` against central differences with
/// step `eps`. The error for a parameter is measured relative to its largest
/// gradient entry, which keeps near-zero entries from dominating.
pub fn gradcheck<F>(params: &[Tensor], eps: f64, loss_fn: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(&format!("p{i}"), p, true))
        .collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = (0..params.len())
        .map(|i| grads.get(&format!("p{i}")).cloned().expect("registered parameter"))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let l = loss_fn(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut work = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut num = Tensor::zeros(params[i].shape());
        for j in 0..params[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            num.data_mut()[j] = (up - down) / (2.0 * eps);
        }
        numeric.push(num);
    }

    let per_param = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let scale = a.max_abs().max(n.max_abs()).max(1e-12);
            let diff = a
                .data()
                .iter()
                .zip(n.data())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            diff / scale
        })
        .collect();
    Ok(GradcheckReport {
        per_param,
        analytic,
        numeric,
    })
}
