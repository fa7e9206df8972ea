use ndarray::{arr2, ArrayD, IxDyn};
use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::losses::{ce_hard, Reduction};
use crate::models::{Activation, ClassifierSpec};
use crate::rng::keyed_rng;

fn pv(tag: &str, segs: &[(&str, &[usize], Vec<f64>)]) -> ParamVector {
    ParamVector::new(
        tag,
        segs.iter()
            .map(|(n, s, v)| Segment::new(*n, ArrayD::from_shape_vec(IxDyn(s), v.clone()).unwrap()))
            .collect(),
    )
    .unwrap()
}

#[test]
fn square_gradient() {
    let theta = pv("p", &[("t", &[1], vec![3.0])]);
    let graph = Graph::new();
    let bound = theta.attach(&graph);
    let t = &bound.tensors()[0];
    let loss = t.mul(t).sum();
    let g = graph.backward(&loss, &bound).unwrap();
    assert_eq!(g.flatten(), vec![6.0]);
}

#[test]
fn constant_loss_is_disconnected() {
    let theta = pv("p", &[("t", &[1], vec![3.0])]);
    let graph = Graph::new();
    let bound = theta.attach(&graph);
    let loss = Tensor::scalar(2.0);
    assert!(matches!(graph.backward(&loss, &bound), Err(Error::Disconnected(_))));
}

#[test]
fn partially_disconnected_is_error() {
    let theta = pv("p", &[("a", &[1], vec![1.0]), ("b", &[1], vec![2.0])]);
    let graph = Graph::new();
    let bound = theta.attach(&graph);
    let loss = bound.tensors()[0].scale(2.0).sum();
    assert!(matches!(graph.backward(&loss, &bound), Err(Error::Disconnected(_))));
}

#[test]
fn graph_is_single_use() {
    let theta = pv("p", &[("t", &[1], vec![3.0])]);
    let graph = Graph::new();
    let bound = theta.attach(&graph);
    let loss = bound.tensors()[0].mul(&bound.tensors()[0]).sum();
    graph.backward(&loss, &bound).unwrap();
    assert!(graph.is_consumed());
    assert!(matches!(graph.backward(&loss, &bound), Err(Error::GraphConsumed)));
}

#[test]
fn non_scalar_loss_is_shape_error() {
    let theta = pv("p", &[("t", &[2], vec![1.0, 2.0])]);
    let graph = Graph::new();
    let bound = theta.attach(&graph);
    let loss = bound.tensors()[0].scale(2.0);
    assert!(matches!(graph.backward(&loss, &bound), Err(Error::Shape(_))));
}

#[test]
fn detached_tensor_carries_no_gradient() {
    let theta = pv("p", &[("t", &[1], vec![3.0])]);
    let graph = Graph::new();
    let bound = theta.attach(&graph);
    let t = &bound.tensors()[0];
    // d/dt [t * stop(t)] = stop(t) = 3
    let loss = t.mul(&t.detach()).sum();
    let g = graph.backward(&loss, &bound).unwrap();
    assert_eq!(g.flatten(), vec![3.0]);
}

fn toy_batch(seed: u64, n: usize, d: usize, c: usize) -> Batch {
    use rand::Rng;
    let mut rng = keyed_rng(seed, 99);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels = (0..n).map(|i| (i * 7 + seed as usize) % c).collect();
    Batch::new(ndarray::Array2::from_shape_vec((n, d), x).unwrap(), labels, (0..n as u64).collect()).unwrap()
}

fn ce_loss<'g>(spec: &ClassifierSpec, p: &ParamTensors<'g>, b: &Batch) -> crate::Result<Tensor<'g>> {
    let x = Tensor::constant(b.features.clone().into_dyn());
    let logits = spec.forward(p, &x)?;
    ce_hard(&b.labels, &logits.softmax_rows(1.0), Reduction::PerSample)
}

fn loss_value(spec: &ClassifierSpec, params: &ParamVector, b: &Batch) -> f64 {
    ce_loss(spec, &params.detached(), b).unwrap().mean().item()
}

#[test]
fn mlp_gradient_matches_central_differences() {
    for (seed, act) in [(1, Activation::Tanh), (2, Activation::Relu), (3, Activation::Tanh)] {
        let mut spec = ClassifierSpec::mlp(3, &[5, 4], 3);
        spec.activation = act;
        let params = spec.init_params("net", &mut keyed_rng(seed, 1)).unwrap();
        let batch = toy_batch(seed, 6, 3, 3);
        let g = batch_mean_grad(&params, &batch, |p, b| ce_loss(&spec, p, b)).unwrap();
        let flat = params.flatten();
        let h = 1e-5;
        let fd: Vec<f64> = (0..flat.len())
            .map(|k| {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[k] += h;
                minus[k] -= h;
                let lp = loss_value(&spec, &params.unflatten(&plus).unwrap(), &batch);
                let lm = loss_value(&spec, &params.unflatten(&minus).unwrap(), &batch);
                (lp - lm) / (2.0 * h)
            })
            .collect();
        let an = g.flatten();
        let diff: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-6, "seed {seed}: rel err {}", diff / norm);
    }
}

#[test]
fn per_sample_grads_are_consistent() {
    let spec = ClassifierSpec::mlp(3, &[4], 2);
    let params = spec.init_params("net", &mut keyed_rng(5, 1)).unwrap();
    let batch = toy_batch(5, 5, 3, 2);

    let single = batch.select(&[2]);
    let ps = per_sample_grads(&params, &single, |p, b| ce_loss(&spec, p, b)).unwrap();
    let bm = batch_mean_grad(&params, &single, |p, b| ce_loss(&spec, p, b)).unwrap();
    assert_eq!(ps.len(), 1);
    assert_eq!(ps[0], bm);

    let all = per_sample_grads(&params, &batch, |p, b| ce_loss(&spec, p, b)).unwrap();
    let mean = GradVector::mean(&all).unwrap();
    let batch_grad = batch_mean_grad(&params, &batch, |p, b| ce_loss(&spec, p, b)).unwrap();
    let err = mean.add_scaled(&batch_grad, -1.0).unwrap().norm();
    assert!(err < 1e-10, "{err}");

    let twins = batch.select(&[1, 1]);
    let tg = per_sample_grads(&params, &twins, |p, b| ce_loss(&spec, p, b)).unwrap();
    assert_eq!(tg[0], tg[1]);
}

#[test]
fn per_sample_arity_and_empty_errors() {
    let spec = ClassifierSpec::mlp(3, &[4], 2);
    let params = spec.init_params("net", &mut keyed_rng(5, 1)).unwrap();
    let batch = toy_batch(5, 3, 3, 2);
    assert!(matches!(
        per_sample_grads(&params, &batch, |p, b| Ok(ce_loss(&spec, p, b)?.mean())),
        Err(Error::Arity { .. })
    ));
    let empty = batch.select(&[]);
    assert!(per_sample_grads(&params, &empty, |p, b| ce_loss(&spec, p, b)).is_err());
}

#[test]
fn per_sample_grads_are_deterministic() {
    let spec = ClassifierSpec::mlp(3, &[4], 2);
    let params = spec.init_params("net", &mut keyed_rng(8, 1)).unwrap();
    let batch = toy_batch(8, 4, 3, 2);
    let a = per_sample_grads(&params, &batch, |p, b| ce_loss(&spec, p, b)).unwrap();
    let b = per_sample_grads(&params, &batch, |p, b| ce_loss(&spec, p, b)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.flatten(), y.flatten());
    }
}

#[test]
fn sgd_and_axpy_examples() {
    let theta = pv("p", &[("a", &[2], vec![1.0, 2.0])]);
    let g = GradVector::from_segments(vec![Segment::new("a", ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, 0.5]).unwrap())]);
    assert_eq!(sgd_step(&theta, &g, 2.0).unwrap().flatten(), vec![0.0, 1.0]);
    assert_eq!(sgd_step(&theta, &g, 0.0).unwrap().flatten(), theta.flatten());
    assert!(sgd_step(&theta, &g, -1.0).is_err());
    assert!(sgd_step(&theta, &g, f64::NAN).is_err());
    assert_eq!(axpy_params(&theta, &g, 2.0).unwrap().flatten(), vec![2.0, 3.0]);
    let bad = GradVector::from_segments(vec![Segment::new("b", ArrayD::zeros(IxDyn(&[2])))]);
    assert!(matches!(sgd_step(&theta, &bad, 1.0), Err(Error::Congruence(_))));
    assert!(sgd_step(&theta, &g, 1.0).unwrap().version() > theta.version());
}

#[test]
fn grad_vector_algebra() {
    let a = GradVector::from_segments(vec![Segment::new("x", ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, 4.0]).unwrap())]);
    let b = GradVector::from_segments(vec![Segment::new("x", ArrayD::from_shape_vec(IxDyn(&[2]), vec![-4.0, 3.0]).unwrap())]);
    assert_eq!(a.norm(), 5.0);
    assert_eq!(a.dot(&b).unwrap(), 0.0);
    assert_eq!(a.cosine(&a).unwrap(), 1.0);
    assert!(a.scaled(0.0).is_zero());
    assert_eq!(a.add_scaled(&b, 1.0).unwrap().flatten(), vec![-1.0, 7.0]);
}

#[test]
fn tensor_ops_forward_values() {
    let x = Tensor::constant(arr2(&[[1.0, 2.0], [3.0, -1.0]]).into_dyn());
    let sm = x.softmax_rows(1.0).to_vec();
    assert!((sm[0] + sm[1] - 1.0).abs() < 1e-15);
    assert!((sm[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert_eq!(x.relu().to_vec(), vec![1.0, 2.0, 3.0, 0.0]);
    assert_eq!(x.sum_rows().to_vec(), vec![3.0, 2.0]);
    assert_eq!(x.mean_rows().to_vec(), vec![1.5, 1.0]);
    assert_eq!(x.gather_rows(&[1, 0]).to_vec(), vec![2.0, 3.0]);
    assert_eq!(x.mean().item(), 1.25);
}

proptest! {
    #[test]
    fn flatten_unflatten_roundtrip(values in prop::collection::vec(-1e6f64..1e6, 7)) {
        let theta = pv("p", &[("a", &[2, 2], vec![0.0; 4]), ("b", &[3], vec![0.0; 3])]);
        let back = theta.unflatten(&values).unwrap();
        prop_assert_eq!(back.flatten(), values.clone());
        let again = ParamVector::from_layout("q", &theta.layout(), &values).unwrap();
        prop_assert_eq!(again, back);
    }
}

#[test]
fn unflatten_rejects_wrong_length() {
    let theta = pv("p", &[("a", &[2], vec![0.0; 2])]);
    assert!(theta.unflatten(&[1.0]).is_err());
}
