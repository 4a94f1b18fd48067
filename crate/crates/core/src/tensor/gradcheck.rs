//! Central-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

const FLOOR: f64 = 1e-12;

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::Precondition(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    Ok(())
}

fn scalar(graph: &Graph, id: NodeId) -> Result<f64> {
    let v = graph.value(id);
    if v.numel() != 1 {
        return Err(Error::Precondition(format!(
            "computation must return a scalar, got dims {:?}",
            v.dims()
        )));
    }
    Ok(v.data()[0])
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Largest relative disagreement between the backward pass and central
/// differences, over every element of `input`.
pub fn grad_check<F>(computation: F, input: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    check_epsilon(epsilon)?;
    if input.numel() == 0 {
        return Err(Error::Precondition("grad_check on a zero-size tensor".into()));
    }
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(input.dims(), data)?)?;
        let out = computation(&mut g, x)?;
        scalar(&g, out)
    };

    let mut graph = Graph::new();
    let mut leaf = Tensor::new(input.dims(), input.data().to_vec())?;
    leaf.set_requires_grad(true);
    let x = graph.input(leaf)?;
    let out = computation(&mut graph, x)?;
    scalar(&graph, out)?;
    graph.backward(out)?;
    let analytic = graph
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let mut worst = 0.0_f64;
    for i in 0..input.numel() {
        let mut plus = input.data().to_vec();
        plus[i] += epsilon;
        let mut minus = input.data().to_vec();
        minus[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same as [`grad_check`], but perturbs every optimizable parameter of
/// `store` instead of an input tensor.
pub fn grad_check_params<F>(computation: F, store: &ParamStore, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    check_epsilon(epsilon)?;
    let mut graph = Graph::new();
    let out = computation(&mut graph, store)?;
    scalar(&graph, out)?;
    graph.backward(out)?;
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    graph.accumulate_param_grads(&mut with_grads)?;

    let mut probe = store.clone();
    let mut worst = 0.0_f64;
    for (id, p) in store.iter() {
        if !p.is_optimized() {
            continue;
        }
        let analytic = with_grads
            .value(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        for (i, &grad) in analytic.iter().enumerate() {
            let original = p.value.data()[i];
            let mut run = |v: f64| -> Result<f64> {
                probe.value_mut(id).data_mut()[i] = v;
                let mut g = Graph::new();
                let out = computation(&mut g, &probe)?;
                scalar(&g, out)
            };
            let up = run(original + epsilon)?;
            let down = run(original - epsilon)?;
            probe.value_mut(id).data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad, numeric));
        }
    }
    Ok(worst)
}
