use super::{Graph, Tensor, TensorError, Var};

/// Maximum relative error between reverse-mode and central-difference
/// gradients of a scalar function of one tensor.
///
/// Per coordinate the error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(eps > 0.0) {
        return Err(TensorError::contract("grad_check", "eps must be positive"));
    }
    let evaluate = |inputs: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var), TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vars)?;
        if let Some(err) = g.first_non_finite() {
            return Err(err);
        }
        if g.value(out).numel() != 1 {
            return Err(TensorError::contract(
                "grad_check",
                format!("function must be scalar-valued, got {:?}", g.value(out).shape()),
            ));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = evaluate(inputs, true)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let base = inputs[k].data()[i];
            probe[k].data_mut()[i] = base + eps;
            let (gp, _, op) = evaluate(&probe, false)?;
            probe[k].data_mut()[i] = base - eps;
            let (gm, _, om) = evaluate(&probe, false)?;
            probe[k].data_mut()[i] = base;
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
