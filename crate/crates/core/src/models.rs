//! MLP classifiers used as teacher and student.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{counters, ParamTensors, ParamVector, Segment, SegmentLayout, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// He-normal weights, zero biases.
    SeededHe,
    /// Like `SeededHe` but the output layer starts at exactly zero.
    ZerosHead,
    /// Parameters copied from another classifier (see [`Classifier::copy_of`]).
    CopyOf,
}

fn default_bias() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub init: Init,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

impl ClassifierSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        ClassifierSpec {
            input_dim,
            hidden: hidden.to_vec(),
            num_classes,
            activation: Activation::Relu,
            init: Init::SeededHe,
            bias: true,
        }
    }

    /// Default teacher: two hidden layers of 64.
    pub fn default_teacher(input_dim: usize, num_classes: usize) -> Self {
        Self::mlp(input_dim, &[64, 64], num_classes)
    }

    /// Default student: one hidden layer of 16.
    pub fn default_student(input_dim: usize, num_classes: usize) -> Self {
        Self::mlp(input_dim, &[16], num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Shape(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.num_classes);
        w
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn layout(&self) -> Vec<SegmentLayout> {
        let w = self.widths();
        let mut out = Vec::new();
        for l in 0..self.num_layers() {
            out.push(SegmentLayout {
                name: format!("fc{l}.weight"),
                shape: vec![w[l], w[l + 1]],
            });
            if self.bias {
                out.push(SegmentLayout {
                    name: format!("fc{l}.bias"),
                    shape: vec![w[l + 1]],
                });
            }
        }
        out
    }

    pub fn init_params(&self, tag: &str, rng: &mut ChaCha8Rng) -> Result<ParamVector> {
        self.validate()?;
        let w = self.widths();
        let last = self.num_layers() - 1;
        let mut segments = Vec::new();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (w[l], w[l + 1]);
            let zero = l == last && self.init == Init::ZerosHead;
            let std = (2.0 / fan_in as f64).sqrt();
            let values: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    if zero {
                        0.0
                    } else {
                        std * z
                    }
                })
                .collect();
            segments.push(Segment::new(
                format!("fc{l}.weight"),
                ArrayD::from_shape_vec(IxDyn(&[fan_in, fan_out]), values)
                    .map_err(|e| Error::Shape(e.to_string()))?,
            ));
            if self.bias {
                segments.push(Segment::new(
                    format!("fc{l}.bias"),
                    ArrayD::zeros(IxDyn(&[fan_out])),
                ));
            }
        }
        ParamVector::new(tag, segments)
    }

    /// Logits `[B, C]` for features `[B, d]` under `params`.
    ///
    /// Differentiable with respect to `params` when they are attached.
    pub fn forward<'g>(&self, params: &ParamTensors<'g>, features: &Tensor<'g>) -> Result<Tensor<'g>> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape(format!(
                "features {:?} do not match input dim {}",
                shape, self.input_dim
            )));
        }
        let per_layer = if self.bias { 2 } else { 1 };
        if params.len() != self.num_layers() * per_layer {
            return Err(Error::Shape(format!(
                "{} parameter segments for a {}-layer network",
                params.len(),
                self.num_layers()
            )));
        }
        counters::record_forward(params.tag());
        let tensors = params.tensors();
        let mut h = features.clone();
        for l in 0..self.num_layers() {
            h = h.matmul(&tensors[l * per_layer]);
            if self.bias {
                h = h.add_bias(&tensors[l * per_layer + 1]);
            }
            if l + 1 < self.num_layers() {
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        Ok(h)
    }
}

/// A classifier: architecture plus its current parameters.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub params: ParamVector,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, tag: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.init == Init::CopyOf {
            return Err(Error::Shape("copy-of initialisation needs a source; use Classifier::copy_of".into()));
        }
        let params = spec.init_params(tag, rng)?;
        Ok(Classifier { spec, params })
    }

    pub fn from_params(spec: ClassifierSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if params.layout() != spec.layout() {
            return Err(Error::Shape("parameters do not match the classifier spec".into()));
        }
        Ok(Classifier { spec, params })
    }

    /// Same architecture and bit-identical parameters as `source`, under a new tag.
    pub fn copy_of(source: &Classifier, tag: &str) -> Self {
        let mut spec = source.spec.clone();
        spec.init = Init::CopyOf;
        Classifier {
            spec,
            params: source.params.clone().with_tag(tag),
        }
    }

    pub fn tag(&self) -> &str {
        self.params.tag()
    }

    /// Logits under this classifier's parameters, attached or detached.
    pub fn logits<'g>(&self, params: &ParamTensors<'g>, features: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.spec.forward(params, features)
    }

    /// Detached logits.
    pub fn forward_logits(&self, features: &Array2<f64>) -> Result<Tensor<'static>> {
        let x = Tensor::constant(features.clone().into_dyn());
        self.spec.forward(&self.params.detached(), &x)
    }

    /// Row-wise `softmax(logits / temperature)`, detached.
    pub fn predict_probs(&self, features: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
        check_temperature(temperature)?;
        let logits = self.forward_logits(features)?;
        to_matrix(&logits.softmax_rows(temperature))
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<usize>> {
        let logits = to_matrix(&self.forward_logits(features)?)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

pub fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive, got {temperature}")))
    }
}

pub fn to_matrix(t: &Tensor<'_>) -> Result<Array2<f64>> {
    t.values()
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))
}

const MAGIC: &[u8; 8] = b"LGTMCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ClassifierSpec,
    pub seed: u64,
    pub step: u64,
    pub tag: String,
    pub segments: Vec<SegmentLayout>,
}

/// Writes `MAGIC | u64 header length | JSON header | little-endian f64 values`.
pub fn save_checkpoint(path: &Path, model: &Classifier, seed: u64, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        seed,
        step,
        tag: model.tag().to_string(),
        segments: model.params.layout(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params.total_dim());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Classifier, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let data = &bytes[16 + hlen..];
    if data.len() % 8 != 0 {
        return Err(Error::Checkpoint("value block is not a multiple of 8 bytes".into()));
    }
    let flat: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::from_layout(header.tag.clone(), &header.segments, &flat)?;
    let model = Classifier::from_params(header.spec.clone(), params)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    #[test]
    fn zeros_head_gives_zero_logits() {
        let mut spec = ClassifierSpec::mlp(3, &[5], 4);
        spec.init = Init::ZerosHead;
        let m = Classifier::new(spec, "s", &mut keyed_rng(1, 0)).unwrap();
        let x = Array2::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f64 - 4.0);
        let logits = m.forward_logits(&x).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_gives_empty_logits() {
        let m = Classifier::new(ClassifierSpec::mlp(3, &[5], 4), "s", &mut keyed_rng(1, 0)).unwrap();
        let logits = m.forward_logits(&Array2::zeros((0, 3))).unwrap();
        assert_eq!(logits.shape(), &[0, 4]);
    }

    #[test]
    fn wrong_input_dim_is_shape_error() {
        let m = Classifier::new(ClassifierSpec::mlp(3, &[], 2), "s", &mut keyed_rng(1, 0)).unwrap();
        assert!(matches!(m.forward_logits(&Array2::zeros((2, 4))), Err(Error::Shape(_))));
    }

    #[test]
    fn num_classes_below_two_rejected() {
        let spec = ClassifierSpec::mlp(3, &[], 1);
        assert!(Classifier::new(spec, "s", &mut keyed_rng(1, 0)).is_err());
    }

    #[test]
    fn probs_analytic_and_limits() {
        let spec = ClassifierSpec::mlp(1, &[], 2);
        let params = ParamVector::new(
            "s",
            vec![
                Segment::new("fc0.weight", ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.0, 3f64.ln()]).unwrap()),
                Segment::new("fc0.bias", ArrayD::zeros(IxDyn(&[2]))),
            ],
        )
        .unwrap();
        let m = Classifier::from_params(spec, params).unwrap();
        let x = Array2::from_elem((1, 1), 1.0);
        let p = m.predict_probs(&x, 1.0).unwrap();
        assert!((p[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((p[[0, 1]] - 0.75).abs() < 1e-15);
        let hot = m.predict_probs(&(x.clone() * 50.0), 1e6).unwrap();
        assert!((hot[[0, 0]] - hot[[0, 1]]).abs() <= 1e-3);
        assert!(matches!(m.predict_probs(&x, 0.0), Err(Error::Domain(_))));
        assert!(matches!(m.predict_probs(&x, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn equal_logits_give_uniform_rows() {
        let mut spec = ClassifierSpec::mlp(2, &[3], 5);
        spec.init = Init::ZerosHead;
        let m = Classifier::new(spec, "s", &mut keyed_rng(2, 0)).unwrap();
        let p = m.predict_probs(&Array2::from_elem((3, 2), 0.7), 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn copy_of_predicts_identically() {
        let t = Classifier::new(ClassifierSpec::mlp(3, &[8], 3), "teacher", &mut keyed_rng(3, 0)).unwrap();
        let s = Classifier::copy_of(&t, "student");
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        assert_eq!(t.predict_probs(&x, 1.0).unwrap(), s.predict_probs(&x, 1.0).unwrap());
        assert_eq!(s.tag(), "student");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Classifier::new(ClassifierSpec::mlp(3, &[4], 2), "teacher", &mut keyed_rng(5, 0)).unwrap();
        save_checkpoint(&path, &m, 5, 12).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.spec, m.spec);
        assert_eq!(header.step, 12);
        assert_eq!(header.seed, 5);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"LGTMCKPT");
    }
}
