use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::optim::ParameterSet;
use crate::tensor::Tensor;

/// Central finite-difference step. Balances truncation and cancellation in
/// 64-bit arithmetic.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor: components with both gradients below this magnitude
/// are compared against the floor instead of each other.
const REL_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max relative error per parameter tensor
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&String, &f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
    }
}

/// A loss defined as a graph-building closure over bound parameters.
pub trait LossBuilder {
    fn build(&self, graph: &mut Graph, params: &BTreeMap<String, Var>) -> Var;
}

impl<F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Var> LossBuilder for F {
    fn build(&self, graph: &mut Graph, params: &BTreeMap<String, Var>) -> Var {
        self(graph, params)
    }
}

fn bind(graph: &mut Graph, params: &ParameterSet) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), graph.param(t.clone())))
        .collect()
}

fn eval_loss(loss: &impl LossBuilder, params: &ParameterSet) -> f64 {
    let mut graph = Graph::new();
    let vars = bind(&mut graph, params);
    let root = loss.build(&mut graph, &vars);
    graph.value(root).item()
}

/// Compare reverse-mode gradients of `loss` against central finite
/// differences over every element of every parameter.
///
/// The loss closure must be a deterministic function of the parameters;
/// this is verified by evaluating it twice and requiring bitwise equality.
pub fn grad_check(
    loss: &impl LossBuilder,
    params: &ParameterSet,
    tol: f64,
) -> Result<GradCheckReport> {
    let v1 = eval_loss(loss, params);
    let v2 = eval_loss(loss, params);
    if v1.to_bits() != v2.to_bits() {
        return Err(NumericsError::Harness(format!(
            "loss is not deterministic: {v1:?} vs {v2:?}"
        )));
    }

    // reverse-mode pass
    let mut graph = Graph::new();
    let vars = bind(&mut graph, params);
    let root = loss.build(&mut graph, &vars);
    let grads = graph.backward(root)?;

    let mut per_param = BTreeMap::new();
    let mut work = params.clone();
    for (name, tensor) in params.iter() {
        let analytic = grads
            .get(vars[name])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let mut max_err: f64 = 0.0;
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = eval_loss(loss, &work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = eval_loss(loss, &work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let denom = a.abs().max(fd.abs()).max(REL_FLOOR);
            max_err = max_err.max((a - fd).abs() / denom);
        }
        per_param.insert(name.clone(), max_err);
    }
    let max_rel_err = per_param.values().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}
