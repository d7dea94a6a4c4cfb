use super::graph::{Graph, Var};
use super::params::{GradStore, ParamStore};
use super::tensor::Tensor;
use super::TensorError;

/// One leaf element whose analytic and numeric derivatives disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub leaf: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub offenders: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.offenders.is_empty()
    }
}

/// Compares reverse-mode gradients of `build` with central differences of step `h`.
///
/// `build` receives a fresh graph plus one leaf per entry of `leaves` and must
/// return a scalar. Error is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(leaves: &[Tensor<f64>], build: F, h: f64, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(leaves[li].shape());
        let analytic = grads.get(v).unwrap_or(&zeros).clone();
        for e in 0..leaves[li].numel() {
            let orig = leaves[li].data()[e];
            probe[li].data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[li].data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[li].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > eps {
                report.offenders.push(GradMismatch { leaf: li, element: e, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    Ok(report)
}

/// Like [`grad_check`] but perturbs parameters of `store` in place. Checks at
/// most `per_param` evenly spaced elements of each parameter.
pub fn store_grad_check<F>(
    store: &mut ParamStore<f64>,
    build: F,
    h: f64,
    eps: f64,
    per_param: usize,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut analytic = GradStore::zeros_like(store);
    analytic.accumulate_graph(&g, &grads, store);

    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut report = GradCheckReport::default();
    for id in 0..store.len() {
        let n = store.tensor(id).numel();
        let stride = (n / per_param.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = store.tensor(id).data()[e];
            store.tensor_mut(id).data_mut()[e] = orig + h;
            let plus = eval(store)?;
            store.tensor_mut(id).data_mut()[e] = orig - h;
            let minus = eval(store)?;
            store.tensor_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).data()[e];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > eps {
                report.offenders.push(GradMismatch { leaf: id, element: e, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    Ok(report)
}
