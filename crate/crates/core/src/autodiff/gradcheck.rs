//! Central-difference gradient verification.

use ndarray::ArrayD;

use super::{Graph, Var};

/// Analytic gradients of a scalar-valued function of `inputs`.
pub fn analytic_grads<F>(f: &F, inputs: &[ArrayD<f64>]) -> (f64, Vec<ArrayD<f64>>)
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| g.leaf(std::sync::Arc::new(x.clone())))
        .collect();
    let out = f(&g, &vars);
    assert_eq!(out.value().len(), 1, "gradcheck requires a scalar output");
    let val = out.scalar();
    let mut grads = out.backward();
    let out_grads = vars
        .iter()
        .map(|v| {
            grads
                .take(v)
                .unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()))
        })
        .collect();
    (val, out_grads)
}

fn eval<F>(f: &F, inputs: &[ArrayD<f64>]) -> f64
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| g.leaf(std::sync::Arc::new(x.clone())))
        .collect();
    f(&g, &vars).scalar()
}

/// Central-difference gradients, one forward pair per scalar entry.
pub fn numeric_grads<F>(f: &F, inputs: &[ArrayD<f64>], eps: f64) -> Vec<ArrayD<f64>>
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = ArrayD::zeros(inputs[i].raw_dim());
        let n = inputs[i].len();
        for j in 0..n {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += eps;
            minus[i].as_slice_mut().unwrap()[j] -= eps;
            let fj = (eval(f, &plus) - eval(f, &minus)) / (2.0 * eps);
            grad.as_slice_mut().unwrap()[j] = fj;
        }
        out.push(grad);
    }
    out
}

/// Maximum relative error between analytic and numeric gradients.
/// The denominator is floored to avoid blowing up near-zero entries.
pub fn max_relative_error(
    analytic: &[ArrayD<f64>],
    numeric: &[ArrayD<f64>],
    floor: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.iter().zip(n.iter()) {
            let denom = av.abs().max(nv.abs()).max(floor);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Convenience wrapper: check a scalar function's gradients against central
/// differences and return the worst relative error.
pub fn check<F>(f: F, inputs: &[ArrayD<f64>], eps: f64, floor: f64) -> f64
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let (_, analytic) = analytic_grads(&f, inputs);
    let numeric = numeric_grads(&f, inputs, eps);
    max_relative_error(&analytic, &numeric, floor)
}
