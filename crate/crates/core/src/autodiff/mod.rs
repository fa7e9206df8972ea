//! Minimal reverse-mode autodiff: tensors, parameter vectors and the
//! per-sample gradient loop used as the exact influence oracle.

pub mod counters;
mod graph;
mod params;

pub use graph::{Graph, NodeId, Tensor};
pub use params::{axpy_params, sgd_step, GradVector, ParamTensors, ParamVector, Segment, SegmentLayout};

use crate::data::Batch;
use crate::error::{Error, Result};

/// Gradient of the mean of `loss_fn`'s per-sample losses over `batch`.
pub fn batch_mean_grad<F>(params: &ParamVector, batch: &Batch, loss_fn: F) -> Result<GradVector>
where
    F: for<'g> Fn(&ParamTensors<'g>, &Batch) -> Result<Tensor<'g>>,
{
    let graph = Graph::new();
    let bound = params.attach(&graph);
    let losses = loss_fn(&bound, batch)?;
    check_arity(&losses, batch.len())?;
    graph.backward(&losses.mean(), &bound)
}

/// One gradient per sample, each from its own single-sample backward pass.
///
/// `loss_fn` maps a batch to a `[B]` tensor of per-sample losses; it is
/// called once per sample on a batch of one.
pub fn per_sample_grads<F>(params: &ParamVector, batch: &Batch, loss_fn: F) -> Result<Vec<GradVector>>
where
    F: for<'g> Fn(&ParamTensors<'g>, &Batch) -> Result<Tensor<'g>>,
{
    if batch.is_empty() {
        return Err(Error::Data("per-sample gradients of an empty batch".into()));
    }
    (0..batch.len())
        .map(|i| {
            let single = batch.select(&[i]);
            let graph = Graph::new();
            let bound = params.attach(&graph);
            let losses = loss_fn(&bound, &single)?;
            check_arity(&losses, 1)?;
            graph.backward(&losses.sum(), &bound)
        })
        .collect()
}

fn check_arity(losses: &Tensor<'_>, expected: usize) -> Result<()> {
    let got = losses.values().len();
    if losses.shape().len() != 1 || got != expected {
        return Err(Error::Arity { expected, got });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
