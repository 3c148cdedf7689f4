//! BERT-style encoder classifier.
//!
//! Token and position embeddings feed `num_layers` post-norm encoder blocks
//! (masked multi-head self-attention and a GELU feed-forward network, each
//! with residual + layer norm). The final hidden state of the CLS position
//! goes through a linear head; softmax lives in the loss and in reporting.
//! There are no segment embeddings and no pooler.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{AttentionSpec, Real, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

/// Parameter count of the published truncated model, for comparison only.
pub const PUBLISHED_PARAM_COUNT: u64 = 11_174_415;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// The base configuration: 4 layers, H=256, A=4, FFN=1024, S=512,
    /// V=5000, dropout 0.1, 15 classes.
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 256,
            heads: 4,
            intermediate: 1024,
            seq_len: 512,
            vocab_size: 5000,
            num_classes: 15,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: L=2, H=64, A=2, FFN=256, S=64, V=512.
    pub fn mini(num_classes: usize) -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            heads: 2,
            intermediate: 256,
            seq_len: 64,
            vocab_size: 512,
            num_classes,
            dropout: 0.1,
        }
    }

    /// Full-size BERT-base shape (without segment embeddings or pooler).
    pub fn bert_base(num_classes: usize) -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            heads: 12,
            intermediate: 3072,
            seq_len: 512,
            vocab_size: 30_522,
            num_classes,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "H mod A != 0 (H={}, A={})",
                self.hidden, self.heads
            )));
        }
        if self.intermediate != 4 * self.hidden {
            return Err(Error::Config(format!(
                "FFN != 4H (FFN={}, H={})",
                self.intermediate, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden, self.intermediate);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![self.vocab_size, h]),
            ("embeddings.position".to_string(), vec![self.seq_len, h]),
            ("embeddings.ln.gain".to_string(), vec![h]),
            ("embeddings.ln.bias".to_string(), vec![h]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            for proj in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.{proj}.weight")), vec![h, h]));
                out.push((p(&format!("attn.{proj}.bias")), vec![h]));
            }
            out.push((p("attn.ln.gain"), vec![h]));
            out.push((p("attn.ln.bias"), vec![h]));
            out.push((p("ffn.up.weight"), vec![h, f]));
            out.push((p("ffn.up.bias"), vec![f]));
            out.push((p("ffn.down.weight"), vec![f, h]));
            out.push((p("ffn.down.bias"), vec![h]));
            out.push((p("ffn.ln.gain"), vec![h]));
            out.push((p("ffn.ln.bias"), vec![h]));
        }
        out.push(("classifier.weight".to_string(), vec![h, self.num_classes]));
        out.push(("classifier.bias".to_string(), vec![self.num_classes]));
        out
    }

    /// Closed-form parameter count.
    pub fn count_params(&self) -> u64 {
        let [l, h, f, s, v, c] = [
            self.num_layers,
            self.hidden,
            self.intermediate,
            self.seq_len,
            self.vocab_size,
            self.num_classes,
        ]
        .map(|x| x as u64);
        let per_layer = 4 * (h * h + h) + 2 * 2 * h + h * f + f + f * h + h;
        v * h + s * h + 2 * h + l * per_layer + h * c + c
    }
}

// Parameter indices within `ModelWeights::tensors`.
const TOKEN_EMB: usize = 0;
const POS_EMB: usize = 1;
const EMB_LN: usize = 2;
const LAYER_BASE: usize = 4;
const PER_LAYER: usize = 16;
const Q: usize = 0;
const K: usize = 2;
const V: usize = 4;
const O: usize = 6;
const ATTN_LN: usize = 8;
const UP: usize = 10;
const DOWN: usize = 12;
const FFN_LN: usize = 14;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f32> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

fn truncated_normal<R: Rng>(rng: &mut R, dist: &Normal<f64>, bound: f64) -> f64 {
    loop {
        let x = dist.sample(rng);
        if x.abs() <= bound {
            return x;
        }
    }
}

impl<T: Real> ModelWeights<T> {
    /// Matrices and embeddings ~ N(0, 0.02²) truncated at ±2σ; biases 0;
    /// layer-norm gains 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if shape.len() == 2 {
                    let n = shape[0] * shape[1];
                    let data = (0..n)
                        .map(|_| T::of(truncated_normal(&mut rng, &dist, 2.0 * INIT_STD)))
                        .collect();
                    Tensor::new(shape, data)
                } else if name.ends_with(".gain") {
                    Ok(Tensor::filled(&shape, T::one()))
                } else {
                    Ok(Tensor::zeros(&shape))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds weights from `(name, tensor)` pairs, validating names and
    /// shapes against `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in shapes.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn to_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub training: bool,
    /// Drop trailing columns that are padding in every row of the batch.
    pub trim_padding: bool,
    /// In the last layer, only compute the CLS query row.
    pub cls_only_last_layer: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            training: true,
            trim_padding: true,
            cls_only_last_layer: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            ..Self::train()
        }
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Attention node of each layer; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

/// Encoder forward pass over `params` (as returned by
/// [`ModelWeights::to_tape`]). Returns `B×C` logits.
pub fn forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &[Var],
    cfg: &ModelConfig,
    batch: &[&LabeledExample],
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<ForwardOutput> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let b = batch.len();
    let len = |e: &LabeledExample| e.token_ids.len().min(e.attention_mask.len());
    let t = if opts.trim_padding {
        batch
            .iter()
            .map(|e| {
                e.attention_mask[..len(e)]
                    .iter()
                    .rposition(|&m| m != 0)
                    .map_or(1, |p| p + 1)
            })
            .max()
            .unwrap()
    } else {
        batch.iter().map(|e| len(e)).max().unwrap()
    };
    if t == 0 || t > cfg.seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {t} not in 1..={}",
            cfg.seq_len
        )));
    }
    let mut ids = Vec::with_capacity(b * t);
    let mut mask = Vec::with_capacity(b * t);
    for e in batch {
        for j in 0..t {
            let (id, m) = if j < len(e) {
                (e.token_ids[j] as usize, e.attention_mask[j])
            } else {
                (0, 0)
            };
            if id >= cfg.vocab_size {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    bound: cfg.vocab_size,
                });
            }
            ids.push(id);
            mask.push(m);
        }
    }
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
    let p = |i: usize| params[i];

    let tok = tape.gather_rows(p(TOKEN_EMB), &ids)?;
    let pos = tape.gather_rows(p(POS_EMB), &positions)?;
    let x = tape.add(tok, pos)?;
    let x = tape.layer_norm(x, p(EMB_LN), p(EMB_LN + 1), LAYER_NORM_EPS)?;
    let mut x = tape.dropout(x, cfg.dropout, opts.training, rng)?;

    let mut attention = Vec::with_capacity(cfg.num_layers);
    let mut cls_collapsed = false;
    for l in 0..cfg.num_layers {
        let base = LAYER_BASE + l * PER_LAYER;
        let w = |o: usize| params[base + o];
        let last = l + 1 == cfg.num_layers;
        let k = tape.linear(x, w(K), w(K + 1))?;
        let v = tape.linear(x, w(V), w(V + 1))?;
        let (xq, q_len) = if last && opts.cls_only_last_layer {
            cls_collapsed = true;
            (tape.gather_rows(x, &cls_rows)?, 1)
        } else {
            (x, t)
        };
        let q = tape.linear(xq, w(Q), w(Q + 1))?;
        let ctx = tape.attention(
            q,
            k,
            v,
            AttentionSpec {
                batch: b,
                q_len,
                kv_len: t,
                heads: cfg.heads,
                key_mask: mask.clone(),
            },
        )?;
        attention.push(ctx);
        let a = tape.linear(ctx, w(O), w(O + 1))?;
        let a = tape.dropout(a, cfg.dropout, opts.training, rng)?;
        let h = tape.add(xq, a)?;
        let h = tape.layer_norm(h, w(ATTN_LN), w(ATTN_LN + 1), LAYER_NORM_EPS)?;
        let f = tape.linear(h, w(UP), w(UP + 1))?;
        let f = tape.gelu(f)?;
        let f = tape.linear(f, w(DOWN), w(DOWN + 1))?;
        let f = tape.dropout(f, cfg.dropout, opts.training, rng)?;
        let y = tape.add(h, f)?;
        x = tape.layer_norm(y, w(FFN_LN), w(FFN_LN + 1), LAYER_NORM_EPS)?;
    }
    let cls = if cls_collapsed {
        x
    } else {
        tape.gather_rows(x, &cls_rows)?
    };
    let head = LAYER_BASE + cfg.num_layers * PER_LAYER;
    let logits = tape.linear(cls, params[head], params[head + 1])?;
    Ok(ForwardOutput { logits, attention })
}

/// Row-wise argmax; ties resolve to the lower class id.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Inference logits for a batch.
pub fn logits<T: Real>(weights: &ModelWeights<T>, batch: &[&LabeledExample]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let params = weights.to_tape(&mut tape, false);
    let mut rng = rng_for(0, &[]);
    let out = forward(
        &mut tape,
        &params,
        &weights.config,
        batch,
        ForwardOptions::eval(),
        &mut rng,
    )?;
    Ok(tape.value(out.logits).clone())
}

pub fn predict<T: Real>(
    weights: &ModelWeights<T>,
    batch: &[&LabeledExample],
) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(weights, batch)?))
}

/// Result of one forward/backward pass over a batch.
pub struct Step<T> {
    /// Mean cross-entropy.
    pub loss: T,
    /// Gradient of `loss` for every parameter tensor, in storage order.
    pub grads: Vec<Vec<T>>,
    pub predictions: Vec<usize>,
}

pub fn loss_and_grads<T: Real, R: Rng + ?Sized>(
    weights: &ModelWeights<T>,
    batch: &[&LabeledExample],
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<Step<T>> {
    let mut tape = Tape::new();
    let params = weights.to_tape(&mut tape, true);
    let out = forward(&mut tape, &params, &weights.config, batch, opts, rng)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let loss = tape.cross_entropy(out.logits, &labels)?;
    tape.backward(loss)?;
    let predictions = argmax_rows(tape.value(out.logits));
    let grads = params
        .iter()
        .zip(&weights.tensors)
        .map(|(&v, t)| {
            tape.take_grad(v)
                .unwrap_or_else(|| vec![T::zero(); t.len()])
        })
        .collect();
    Ok(Step {
        loss: tape.value(loss).data()[0],
        grads,
        predictions,
    })
}
