//! Symmetric per-channel int8 weight quantization.
//!
//! Codes live in `[-127, 127]` with a zero point of 0. For channel `c`,
//! `scale_c = max|w_c| / 127` (1 for an all-zero channel) and
//! `q = round_half_even(w / scale_c)`, where the quotient uses the stored f32
//! scale so the reconstruction bound holds against what is written to disk.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, StoredTensor};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const QMAX: i8 = 127;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    /// Channel axis; `scales.len() == shape[axis]`.
    pub axis: usize,
    pub values: Vec<i8>,
    pub scales: Vec<f32>,
}

/// Elements between consecutive channel steps along `axis`.
fn inner_stride(shape: &[usize], axis: usize) -> usize {
    shape[axis + 1..].iter().product()
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Index {
            what: "quantization axis",
            index: axis,
            bound: shape.len(),
        });
    }
    Ok(())
}

impl QuantizedTensor {
    pub fn num_channels(&self) -> usize {
        self.shape[self.axis]
    }

    pub fn channel_of(&self, flat: usize) -> usize {
        (flat / inner_stride(&self.shape, self.axis)) % self.num_channels()
    }

    /// Exact reconstruction `q·scale` (the product fits an f64 mantissa).
    pub fn value(&self, flat: usize) -> f64 {
        self.values[flat] as f64 * self.scales[self.channel_of(flat)] as f64
    }

    /// Payload bytes: one per code plus four per scale.
    pub fn byte_size(&self) -> usize {
        self.values.len() + 4 * self.scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_axis(&self.shape, self.axis)?;
        if self.values.len() != self.shape.iter().product::<usize>()
            || self.scales.len() != self.shape[self.axis]
        {
            return Err(Error::Format(format!(
                "quantized tensor of shape {:?} holds {} codes and {} scales",
                self.shape,
                self.values.len(),
                self.scales.len()
            )));
        }
        if self.values.contains(&i8::MIN) {
            return Err(Error::Format(
                "code -128 is outside the symmetric range".into(),
            ));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Format(format!("invalid scale {s}")));
        }
        Ok(())
    }
}

/// One scale per channel along `axis`.
pub fn channel_scales(t: &Tensor<f32>, axis: usize) -> Result<Vec<f32>> {
    check_axis(t.shape(), axis)?;
    if !t.is_finite() {
        return Err(Error::NonFinite("tensor to quantize".into()));
    }
    let channels = t.shape()[axis];
    let stride = inner_stride(t.shape(), axis);
    let mut maxabs = vec![0f32; channels];
    for (i, &v) in t.data().iter().enumerate() {
        let c = (i / stride) % channels;
        maxabs[c] = maxabs[c].max(v.abs());
    }
    Ok(maxabs
        .into_iter()
        .map(|m| {
            if m == 0.0 {
                1.0
            } else {
                (m as f64 / QMAX as f64) as f32
            }
        })
        .collect())
}

/// Quantizes against caller-supplied scales.
pub fn quantize_with_scales(
    t: &Tensor<f32>,
    axis: usize,
    scales: &[f32],
) -> Result<QuantizedTensor> {
    check_axis(t.shape(), axis)?;
    if !t.is_finite() {
        return Err(Error::NonFinite("tensor to quantize".into()));
    }
    let channels = t.shape()[axis];
    let stride = inner_stride(t.shape(), axis);
    let values = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = scales[(i / stride) % channels] as f64;
            (v as f64 / s)
                .round_ties_even()
                .clamp(-(QMAX as f64), QMAX as f64) as i8
        })
        .collect();
    let q = QuantizedTensor {
        shape: t.shape().to_vec(),
        axis,
        values,
        scales: scales.to_vec(),
    };
    q.validate()?;
    Ok(q)
}

pub fn quantize_per_channel(t: &Tensor<f32>, axis: usize) -> Result<QuantizedTensor> {
    let scales = channel_scales(t, axis)?;
    quantize_with_scales(t, axis, &scales)
}

/// Single-scale baseline, stored with that scale repeated on every channel.
pub fn quantize_per_tensor(t: &Tensor<f32>, axis: usize) -> Result<QuantizedTensor> {
    check_axis(t.shape(), axis)?;
    if !t.is_finite() {
        return Err(Error::NonFinite("tensor to quantize".into()));
    }
    let m = t.data().iter().fold(0f32, |m, v| m.max(v.abs()));
    let scale = if m == 0.0 {
        1.0
    } else {
        (m as f64 / QMAX as f64) as f32
    };
    quantize_with_scales(t, axis, &vec![scale; t.shape()[axis]])
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    let data = (0..q.values.len()).map(|i| q.value(i) as f32).collect();
    Tensor::new(q.shape.clone(), data).expect("validated shape")
}

/// Which tensors of a checkpoint get quantized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantPolicy {
    /// Every 2-D matrix outside the embeddings.
    Default,
    None,
    Explicit(Vec<String>),
}

impl QuantPolicy {
    /// `default`, `none`, or a comma-separated list of tensor names.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "default" => Ok(Self::Default),
            "none" => Ok(Self::None),
            "" => Err(Error::InvalidArgument("empty quantization policy".into())),
            list => Ok(Self::Explicit(
                list.split(',').map(|n| n.trim().to_string()).collect(),
            )),
        }
    }

    pub fn targets(&self, ckpt: &Checkpoint) -> Result<Vec<String>> {
        match self {
            Self::Default => Ok(ckpt
                .tensors
                .iter()
                .filter(|(n, t)| t.shape().len() == 2 && !n.starts_with("embeddings."))
                .map(|(n, _)| n.clone())
                .collect()),
            Self::None => Ok(Vec::new()),
            Self::Explicit(names) => {
                for n in names {
                    if !ckpt.tensors.iter().any(|(m, _)| m == n) {
                        return Err(Error::InvalidArgument(format!(
                            "unknown tensor {n:?} in quantization policy"
                        )));
                    }
                }
                Ok(names.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDecision {
    pub name: String,
    pub quantized: bool,
    pub bytes_before: usize,
    pub bytes_after: usize,
}

/// Published size figures kept next to ours for comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSizes {
    pub full_model_mb: f64,
    pub truncated_mb: f64,
    pub overall_reduction_percent: f64,
    pub quantization_reduction_percent: f64,
    pub accuracy_drop_percent: f64,
}

impl Default for ReferenceSizes {
    fn default() -> Self {
        Self {
            full_model_mb: 420.0,
            truncated_mb: 42.63,
            overall_reduction_percent: 92.76,
            quantization_reduction_percent: 28.74,
            accuracy_drop_percent: 0.02,
        }
    }
}

/// Full-size encoder (analytic fp32), truncated model and quantized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeComparison {
    pub full_model_bytes: u64,
    pub truncated_bytes: u64,
    pub quantized_bytes: u64,
    pub reference: ReferenceSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizationReport {
    pub policy: QuantPolicy,
    pub tensors: Vec<TensorDecision>,
    pub payload_bytes_before: usize,
    pub payload_bytes_after: usize,
    /// Whole container, header included.
    pub file_bytes_before: usize,
    pub file_bytes_after: usize,
    pub size_reduction_percent: f64,
    /// Only the tensors the policy selected.
    pub quantized_bytes_before: usize,
    pub quantized_bytes_after: usize,
    pub quantized_reduction_percent: f64,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
    /// `(after - before)·100`.
    pub accuracy_delta_points: Option<f64>,
    pub sizes: SizeComparison,
}

impl QuantizationReport {
    pub fn with_accuracy(mut self, before: f64, after: f64) -> Self {
        self.accuracy_before = Some(before);
        self.accuracy_after = Some(after);
        self.accuracy_delta_points = Some((after - before) * 100.0);
        self
    }
}

fn reduction(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before as f64 - after as f64) / before as f64
    }
}

/// Quantizes the selected matrices along their last (output-channel) axis.
/// Everything else is copied unchanged.
pub fn quantize_model(
    ckpt: &Checkpoint,
    policy: &QuantPolicy,
) -> Result<(Checkpoint, QuantizationReport)> {
    let targets = policy.targets(ckpt)?;
    let mut out = ckpt.clone();
    let mut decisions = Vec::with_capacity(out.tensors.len());
    for (name, t) in &mut out.tensors {
        let bytes_before = t.byte_size();
        let quantized = targets.contains(name);
        if quantized {
            if let StoredTensor::F32(w) = t {
                let axis = w.rank() - 1;
                *t = StoredTensor::I8(quantize_per_channel(w, axis)?);
            }
        }
        decisions.push(TensorDecision {
            name: name.clone(),
            quantized,
            bytes_before,
            bytes_after: t.byte_size(),
        });
    }
    // policy none leaves the checkpoint byte-identical, metadata included
    if policy != &QuantPolicy::None {
        if let serde_json::Value::Object(m) = &mut out.metadata {
            m.insert("quantization".into(), serde_json::to_value(policy)?);
        } else {
            out.metadata = serde_json::json!({ "quantization": policy });
        }
    }
    let file_bytes_before = ckpt.to_bytes()?.len();
    let file_bytes_after = out.to_bytes()?.len();
    let (qb, qa) = decisions
        .iter()
        .filter(|d| d.quantized)
        .fold((0, 0), |(b, a), d| (b + d.bytes_before, a + d.bytes_after));
    let full = ModelConfig::bert_base(ckpt.config.num_classes).count_params() * 4;
    let report = QuantizationReport {
        policy: policy.clone(),
        payload_bytes_before: ckpt.payload_bytes(),
        payload_bytes_after: out.payload_bytes(),
        file_bytes_before,
        file_bytes_after,
        size_reduction_percent: reduction(file_bytes_before, file_bytes_after),
        quantized_bytes_before: qb,
        quantized_bytes_after: qa,
        quantized_reduction_percent: reduction(qb, qa),
        accuracy_before: None,
        accuracy_after: None,
        accuracy_delta_points: None,
        sizes: SizeComparison {
            full_model_bytes: full,
            truncated_bytes: file_bytes_before as u64,
            quantized_bytes: file_bytes_after as u64,
            reference: ReferenceSizes::default(),
        },
        tensors: decisions,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let t = Tensor::new(vec![1, 2], vec![0.5f32, -1.0]).unwrap();
        let q = quantize_per_channel(&t, 0).unwrap();
        assert_eq!(q.values, vec![64, -127]);
        assert!((q.scales[0] - 1.0 / 127.0).abs() < 1e-9);
        let back = dequantize(&q);
        assert!((back.data()[0] - 0.503_937).abs() < 1e-6);
        assert_eq!(back.data()[1], -1.0);

        let zero = quantize_per_channel(&Tensor::<f32>::zeros(&[2, 3]), 1).unwrap();
        assert_eq!(zero.scales, vec![1.0; 3]);
        assert!(zero.values.iter().all(|&v| v == 0));

        for s in [1e-6f32, 0.37, 5.0, 3e4] {
            let t = Tensor::new(vec![1], vec![127.0 * s]).unwrap();
            assert_eq!(quantize_per_channel(&t, 0).unwrap().values, vec![127]);
        }
    }

    #[test]
    fn channels_follow_the_axis() {
        // columns along axis 1 are the output channels of an [in×out] matrix
        let t = Tensor::new(vec![2, 2], vec![1.0f32, 10.0, -2.0, 5.0]).unwrap();
        let q = quantize_per_channel(&t, 1).unwrap();
        assert_eq!(
            q.scales,
            vec![(2.0f64 / 127.0) as f32, (10.0f64 / 127.0) as f32]
        );
        assert_eq!(q.values, vec![64, 127, -127, 64]);
        let rows = quantize_per_channel(&t, 0).unwrap();
        assert_eq!(rows.values, vec![13, 127, -51, 127]);
    }

    #[test]
    fn rejects_bad_input() {
        let t = Tensor::new(vec![2], vec![1.0f32, f32::NAN]).unwrap();
        assert!(quantize_per_channel(&t, 0).is_err());
        assert!(quantize_per_channel(&Tensor::<f32>::zeros(&[2]), 1).is_err());
    }
}
