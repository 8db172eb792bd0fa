use super::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over probed coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            coords_checked: 0,
        }
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let err = if analytic.is_finite() && numeric.is_finite() {
            (analytic - numeric).abs() / numeric.abs().max(1.0)
        } else {
            f64::INFINITY
        };
        self.coords_checked += 1;
        if err > self.max_rel_error || (err.is_infinite() && self.worst.is_none()) {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), idx));
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tol
    }
}

/// Up to `limit` evenly spaced indices in `0..n`.
fn probe_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < n => (0..l).map(|k| k * n / l).collect(),
        _ => (0..n).collect(),
    }
}

fn eval_scalar<F, E>(params: &ParamStore, f: &F) -> f64
where
    F: Fn(&mut Graph) -> Result<Var, E>,
{
    let mut g = Graph::new(params);
    match f(&mut g) {
        Ok(v) => g.value(v).item(),
        Err(_) => f64::NAN,
    }
}

/// Compares backward-pass gradients of every trainable parameter against
/// central differences with the given `step`. `max_per_param` caps how
/// many coordinates of each tensor are probed.
pub fn finite_difference_check<F, E>(
    params: &ParamStore,
    f: F,
    step: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph) -> Result<Var, E>,
    E: From<TensorError>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        g.backward(loss)?.into_params()
    };
    let mut report = GradCheckReport::new();
    let mut probe = params.clone();
    let ids: Vec<ParamId> = params.trainable_ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        for idx in probe_indices(n, max_per_param) {
            let orig = params.get(id).data()[idx];
            probe.get_mut(id).data_mut()[idx] = orig + step;
            let plus = eval_scalar(&probe, &f);
            probe.get_mut(id).data_mut()[idx] = orig - step;
            let minus = eval_scalar(&probe, &f);
            probe.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[idx]);
            report.record(params.name(id), idx, a, numeric);
        }
    }
    Ok(report)
}

/// Like [`finite_difference_check`] but differentiates with respect to
/// graph inputs built from `inputs`.
pub fn finite_difference_wrt<F, E>(
    params: &ParamStore,
    inputs: &[Tensor],
    f: F,
    step: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let build = |g: &mut Graph, ins: &[Tensor]| -> Result<(Var, Vec<Var>), E> {
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(g, &vars)?;
        Ok((out, vars))
    };
    let mut g = Graph::new(params);
    let (loss, vars) = build(&mut g, inputs)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::new();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        for idx in 0..inputs[k].numel() {
            let orig = inputs[k].data()[idx];
            let eval = |v: f64, probe: &mut Vec<Tensor>| {
                probe[k].data_mut()[idx] = v;
                let mut g = Graph::new(params);
                let r = build(&mut g, probe).map(|(l, _)| g.value(l).item());
                r.unwrap_or(f64::NAN)
            };
            let plus = eval(orig + step, &mut probe);
            let minus = eval(orig - step, &mut probe);
            probe[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads.wrt(*var).map_or(0.0, |t| t.data()[idx]);
            report.record(&format!("input{k}"), idx, a, numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut p = ParamStore::new();
        let w = p.insert("w", Tensor::row(&[0.3, -1.2, 2.0]), true);
        let report = finite_difference_check::<_, TensorError>(
            &p,
            |g| {
                let x = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]));
                let wv = g.param(w);
                g.matmul(wv, x)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 3);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn probe_indices_are_spread() {
        assert_eq!(probe_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(probe_indices(3, Some(5)), vec![0, 1, 2]);
    }
}
