use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{Graph, Tensor};
use crate::error::{Error, Result};

/// One named block of parameters (a weight matrix or a bias vector).
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub value: ArrayD<f64>,
}

impl Segment {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        Segment {
            name: name.into(),
            value,
        }
    }

    fn bits_eq(&self, other: &Segment) -> bool {
        self.name == other.name
            && self.value.shape() == other.value.shape()
            && self
                .value
                .iter()
                .zip(other.value.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Name and shape of a segment, used by checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub name: String,
    pub shape: Vec<usize>,
}

/// All trainable parameters of one model, in a fixed segment order.
///
/// `tag` names the owner ("teacher" or "student") for pass accounting;
/// `version` increases by one on every update so trainers can prove which
/// parameters a computation saw.
#[derive(Debug, Clone)]
pub struct ParamVector {
    tag: String,
    version: u64,
    segments: Vec<Segment>,
}

/// Gradient with the same segment structure as the [`ParamVector`] it
/// differentiates.
#[derive(Debug, Clone)]
pub struct GradVector {
    segments: Vec<Segment>,
}

/// Parameters lifted into tensors, attached to a graph or detached.
pub struct ParamTensors<'g> {
    tag: String,
    names: Vec<String>,
    tensors: Vec<Tensor<'g>>,
}

impl PartialEq for ParamVector {
    /// Bitwise equality of all segments; tag and version are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.bits_eq(b))
    }
}

impl PartialEq for GradVector {
    fn eq(&self, other: &Self) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.bits_eq(b))
    }
}

fn layouts_match(a: &[Segment], b: &[Segment]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Congruence(format!(
            "{} segments vs {} segments",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name || x.value.shape() != y.value.shape() {
            return Err(Error::Congruence(format!(
                "segment `{}` {:?} vs `{}` {:?}",
                x.name,
                x.value.shape(),
                y.name,
                y.value.shape()
            )));
        }
    }
    Ok(())
}

fn flatten(segments: &[Segment]) -> Vec<f64> {
    segments
        .iter()
        .flat_map(|s| s.value.iter().copied())
        .collect()
}

fn unflatten(template: &[Segment], flat: &[f64]) -> Result<Vec<Segment>> {
    let total: usize = template.iter().map(|s| s.value.len()).sum();
    if flat.len() != total {
        return Err(Error::Shape(format!(
            "flat vector has {} values, layout needs {}",
            flat.len(),
            total
        )));
    }
    let mut offset = 0;
    template
        .iter()
        .map(|s| {
            let n = s.value.len();
            let value = ArrayD::from_shape_vec(s.value.raw_dim(), flat[offset..offset + n].to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?;
            offset += n;
            Ok(Segment {
                name: s.name.clone(),
                value,
            })
        })
        .collect()
}

impl ParamVector {
    pub fn new(tag: impl Into<String>, segments: Vec<Segment>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &segments {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Shape(format!("duplicate segment name `{}`", s.name)));
            }
        }
        Ok(ParamVector {
            tag: tag.into(),
            version: 0,
            segments,
        })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn layout(&self) -> Vec<SegmentLayout> {
        self.segments
            .iter()
            .map(|s| SegmentLayout {
                name: s.name.clone(),
                shape: s.value.shape().to_vec(),
            })
            .collect()
    }

    /// `|θ|`, the number of scalar parameters.
    pub fn total_dim(&self) -> usize {
        self.segments.iter().map(|s| s.value.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.segments)
    }

    /// Rebuilds a vector with this layout from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        Ok(ParamVector {
            tag: self.tag.clone(),
            version: self.version,
            segments: unflatten(&self.segments, flat)?,
        })
    }

    pub fn from_layout(tag: impl Into<String>, layout: &[SegmentLayout], flat: &[f64]) -> Result<Self> {
        let template: Vec<Segment> = layout
            .iter()
            .map(|l| Segment::new(l.name.clone(), ArrayD::zeros(IxDyn(&l.shape))))
            .collect();
        ParamVector::new(tag, unflatten(&template, flat)?)
    }

    pub fn zeros_grad(&self) -> GradVector {
        GradVector {
            segments: self
                .segments
                .iter()
                .map(|s| Segment::new(s.name.clone(), ArrayD::zeros(s.value.raw_dim())))
                .collect(),
        }
    }

    pub fn check_congruent(&self, grad: &GradVector) -> Result<()> {
        layouts_match(&self.segments, &grad.segments)
    }

    /// SHA-256 over segment names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.segments {
            h.update(s.name.as_bytes());
            for d in s.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in s.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers every segment as a differentiable leaf of `graph`.
    pub fn attach<'g>(&self, graph: &'g Graph) -> ParamTensors<'g> {
        ParamTensors {
            tag: self.tag.clone(),
            names: self.segments.iter().map(|s| s.name.clone()).collect(),
            tensors: self
                .segments
                .iter()
                .map(|s| graph.leaf(s.value.clone()))
                .collect(),
        }
    }

    /// Constant tensors for a gradient-free forward pass.
    pub fn detached<'g>(&self) -> ParamTensors<'g> {
        ParamTensors {
            tag: self.tag.clone(),
            names: self.segments.iter().map(|s| s.name.clone()).collect(),
            tensors: self
                .segments
                .iter()
                .map(|s| Tensor::constant(s.value.clone()))
                .collect(),
        }
    }

    fn combine(&self, direction: &GradVector, scale: f64) -> Result<ParamVector> {
        self.check_congruent(direction)?;
        let segments = self
            .segments
            .iter()
            .zip(&direction.segments)
            .map(|(p, d)| {
                let mut value = p.value.clone();
                value.zip_mut_with(&d.value, |a, &b| *a += scale * b);
                Segment::new(p.name.clone(), value)
            })
            .collect();
        Ok(ParamVector {
            tag: self.tag.clone(),
            version: self.version + 1,
            segments,
        })
    }
}

/// `params − lr·grad`. The input is left untouched; `lr = 0` reproduces it
/// bit-exactly.
pub fn sgd_step(params: &ParamVector, grad: &GradVector, lr: f64) -> Result<ParamVector> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Domain(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    params.combine(grad, -lr)
}

/// `params + scale·direction`.
pub fn axpy_params(params: &ParamVector, direction: &GradVector, scale: f64) -> Result<ParamVector> {
    params.combine(direction, scale)
}

impl GradVector {
    pub fn from_segments(segments: Vec<Segment>) -> Self {
        GradVector { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_dim(&self) -> usize {
        self.segments.iter().map(|s| s.value.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.segments)
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        Ok(GradVector {
            segments: unflatten(&self.segments, flat)?,
        })
    }

    pub fn check_congruent(&self, other: &GradVector) -> Result<()> {
        layouts_match(&self.segments, &other.segments)
    }

    pub fn dot(&self, other: &GradVector) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .segments
            .iter()
            .zip(&other.segments)
            .map(|(a, b)| a.value.iter().zip(b.value.iter()).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.value.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Cosine similarity; 0 when either vector is zero.
    pub fn cosine(&self, other: &GradVector) -> Result<f64> {
        let d = self.dot(other)?;
        let n = self.norm() * other.norm();
        Ok(if n == 0.0 { 0.0 } else { d / n })
    }

    pub fn is_zero(&self) -> bool {
        self.segments.iter().all(|s| s.value.iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().all(|s| s.value.iter().all(|v| v.is_finite()))
    }

    pub fn scaled(&self, c: f64) -> GradVector {
        GradVector {
            segments: self
                .segments
                .iter()
                .map(|s| Segment::new(s.name.clone(), &s.value * c))
                .collect(),
        }
    }

    /// `self + c·other`.
    pub fn add_scaled(&self, other: &GradVector, c: f64) -> Result<GradVector> {
        self.check_congruent(other)?;
        Ok(GradVector {
            segments: self
                .segments
                .iter()
                .zip(&other.segments)
                .map(|(a, b)| {
                    let mut value = a.value.clone();
                    value.zip_mut_with(&b.value, |x, &y| *x += c * y);
                    Segment::new(a.name.clone(), value)
                })
                .collect(),
        })
    }

    /// Element-wise mean of congruent gradients.
    pub fn mean(grads: &[GradVector]) -> Result<GradVector> {
        let first = grads
            .first()
            .ok_or_else(|| Error::Data("mean of zero gradients".into()))?;
        let mut acc = first.clone();
        for g in &grads[1..] {
            acc = acc.add_scaled(g, 1.0)?;
        }
        Ok(acc.scaled(1.0 / grads.len() as f64))
    }
}

impl<'g> ParamTensors<'g> {
    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<'g>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}
