//! Two-layer pre-norm Transformer encoder with CLS pooling.
//!
//! Sequences are packed: each example contributes a CLS row followed by one
//! row per unmasked token, and attention runs inside each example's block of
//! rows. Leaving masked positions out of the block gives exactly the result
//! of scoring them with `-inf`, without spending compute on padding.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::{Array, Graph, NodeId, NumericsError, Scalar, SeqLayout};
use crate::rng::Stream;
use crate::tokenizer::{TokenSequence, MAX_LEN, VOCAB_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalMode {
    LearnedAbsolute,
    Alibi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_width: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub positional: PositionalMode,
    /// Per-head distance penalties in ALiBi mode; `None` uses the standard
    /// geometric sequence.
    pub alibi_slopes: Option<Vec<f64>>,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            ff_width: 512,
            max_len: MAX_LEN,
            vocab_size: VOCAB_SIZE,
            n_classes: 97,
            positional: PositionalMode::LearnedAbsolute,
            alibi_slopes: None,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn alibi() -> Self {
        Self {
            positional: PositionalMode::Alibi,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let Some(s) = &self.alibi_slopes {
            if s.len() != self.n_heads {
                return Err(ModelError::Config(format!(
                    "{} ALiBi slopes for {} heads",
                    s.len(),
                    self.n_heads
                )));
            }
        }
        Ok(())
    }

    /// `2^(-8 (h + 1) / n_heads)`: 1/4, 1/16, 1/64, 1/256 for four heads.
    pub fn slopes(&self) -> Vec<f64> {
        self.alibi_slopes.clone().unwrap_or_else(|| {
            (0..self.n_heads)
                .map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / self.n_heads as f64))
                .collect()
        })
    }

    /// Names and shapes of every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.ff_width);
        let mut out = vec![("tok_emb".to_string(), vec![self.vocab_size, d])];
        if self.positional == PositionalMode::LearnedAbsolute {
            // Row 0 belongs to CLS; text token i uses row i + 1.
            out.push(("pos_emb".into(), vec![self.max_len + 1, d]));
        }
        out.push(("cls".into(), vec![1, d]));
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.gain"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            for w in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.w{w}")), vec![d, d]));
                out.push((p(&format!("attn.b{w}")), vec![d]));
            }
            out.push((p("ln2.gain"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
            out.push((p("ff.w1"), vec![d, f]));
            out.push((p("ff.b1"), vec![f]));
            out.push((p("ff.w2"), vec![f, d]));
            out.push((p("ff.b2"), vec![d]));
        }
        out.push(("final_ln.gain".into(), vec![d]));
        out.push(("final_ln.bias".into(), vec![d]));
        out.push(("head.w".into(), vec![d, self.n_classes]));
        out.push(("head.b".into(), vec![self.n_classes]));
        out
    }
}

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    names: Vec<String>,
    arrays: Vec<Array<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(entries: Vec<(String, Array<T>)>) -> Self {
        let (names, arrays): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            names,
            arrays,
            index,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array<T>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array<T>] {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.index.get(name).map(|&i| &mut self.arrays[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet::new(
            self.names
                .iter()
                .cloned()
                .zip(self.arrays.iter().map(Array::cast))
                .collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(Array::is_finite)
    }
}

/// Row bookkeeping for a packed batch.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    token_index: Vec<(usize, usize)>,
    positions: Vec<usize>,
    layout: Arc<SeqLayout>,
    cls_rows: Vec<usize>,
}

impl PackedBatch {
    pub fn new(batch: &[TokenSequence], config: &ModelConfig) -> Result<Self, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        let mut token_index = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(batch.len());
        let mut cls_rows = Vec::with_capacity(batch.len());
        for (s, seq) in batch.iter().enumerate() {
            if seq.ids.len() != config.max_len || seq.mask.len() != config.max_len {
                return Err(ModelError::Batch(format!(
                    "sequence {s} has length {}, expected {}",
                    seq.ids.len(),
                    config.max_len
                )));
            }
            cls_rows.push(positions.len());
            // Source 1 is the CLS vector.
            token_index.push((1, 0));
            positions.push(0);
            let mut len = 1;
            for (i, (&id, &m)) in seq.ids.iter().zip(&seq.mask).enumerate() {
                if !m {
                    continue;
                }
                if id as usize >= config.vocab_size {
                    return Err(ModelError::Batch(format!("token id {id} in sequence {s}")));
                }
                token_index.push((0, id as usize));
                positions.push(i + 1);
                len += 1;
            }
            lengths.push(len);
        }
        let layout = Arc::new(SeqLayout::new(&lengths, positions.clone())?);
        Ok(Self {
            token_index,
            positions,
            layout,
            cls_rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn layout(&self) -> &SeqLayout {
        &self.layout
    }
}

/// Graph nodes produced by one forward pass.
pub struct ForwardOutput {
    pub logits: NodeId,
    /// One attention node per layer.
    pub attention: Vec<NodeId>,
}

/// Places every parameter on the graph; `trainable` selects leaves that
/// receive gradients.
pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Vec<NodeId> {
    params
        .arrays()
        .iter()
        .map(|a| {
            if trainable {
                g.leaf(a.clone())
            } else {
                g.constant(a.clone())
            }
        })
        .collect()
}

/// Records the forward pass for `batch`. `bound[i]` is the node holding
/// `params.arrays()[i]`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    bound: &[NodeId],
    batch: &PackedBatch,
    config: &ModelConfig,
) -> Result<ForwardOutput, ModelError> {
    config.validate()?;
    let p = |name: &str| -> Result<NodeId, ModelError> {
        params
            .index
            .get(name)
            .map(|&i| bound[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    };
    let mut x = g.gather(&[p("tok_emb")?, p("cls")?], batch.token_index.clone())?;
    let slopes = match config.positional {
        PositionalMode::LearnedAbsolute => {
            let pos_rows = batch.positions.iter().map(|&i| (0, i)).collect();
            let pos = g.gather(&[p("pos_emb")?], pos_rows)?;
            x = g.add(x, pos)?;
            None
        }
        PositionalMode::Alibi => Some(config.slopes()),
    };
    let mut attention = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let linear = |g: &mut Graph<T>, x: NodeId, w: &str, b: &str| -> Result<NodeId, ModelError> {
            let y = g.matmul(x, p(&name(w))?)?;
            Ok(g.add_row(y, p(&name(b))?)?)
        };
        let h = g.layer_norm(x, p(&name("ln1.gain"))?, p(&name("ln1.bias"))?)?;
        let q = linear(g, h, "attn.wq", "attn.bq")?;
        let k = linear(g, h, "attn.wk", "attn.bk")?;
        let v = linear(g, h, "attn.wv", "attn.bv")?;
        let a = g.attention(q, k, v, batch.layout.clone(), config.n_heads, slopes.clone())?;
        attention.push(a);
        let o = linear(g, a, "attn.wo", "attn.bo")?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, p(&name("ln2.gain"))?, p(&name("ln2.bias"))?)?;
        let f = linear(g, h, "ff.w1", "ff.b1")?;
        let f = g.gelu(f);
        let f = linear(g, f, "ff.w2", "ff.b2")?;
        x = g.add(x, f)?;
    }
    let cls = g.gather(&[x], batch.cls_rows.iter().map(|&r| (0, r)).collect())?;
    let cls = g.layer_norm(cls, p("final_ln.gain")?, p("final_ln.bias")?)?;
    let logits = g.matmul(cls, p("head.w")?)?;
    let logits = g.add_row(logits, p("head.b")?)?;
    Ok(ForwardOutput { logits, attention })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A configured classifier with its `f32` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Model {
    /// Normal(0, init_std) weights and embeddings, zero biases, unit gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Stream::derived(seed, "init");
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = if name.ends_with("gain") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.normal(config.init_std) as f32).collect()
                };
                let array = Array::from_vec(&shape, data).expect("shape product");
                (name, array)
            })
            .collect();
        Ok(Self {
            config,
            params: ParamSet::new(entries),
        })
    }

    /// Checks names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamSet<f32>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(ModelError::Config(format!(
                    "parameter `{got_name}` {:?} does not match `{name}` {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Pre-softmax scores, one row per sequence.
    pub fn logits(&self, batch: &[TokenSequence]) -> Result<Array<f32>, ModelError> {
        let packed = PackedBatch::new(batch, &self.config)?;
        let mut g = Graph::new();
        let bound = bind(&mut g, &self.params, false);
        let out = forward(&mut g, &self.params, &bound, &packed, &self.config)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn predict(&self, batch: &[TokenSequence]) -> Result<Vec<usize>, ModelError> {
        let logits = self.logits(batch)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Predictions in fixed-size chunks, in input order.
    pub fn predict_all(&self, seqs: &[TokenSequence], chunk: usize) -> Result<Vec<usize>, ModelError> {
        let mut out = Vec::with_capacity(seqs.len());
        for c in seqs.chunks(chunk.max(1)) {
            out.extend(self.predict(c)?);
        }
        Ok(out)
    }

    /// Attention weights of one sequence as `[layer][head][query][key]`
    /// over the full `max_len + 1` positions (CLS at 0). Masked positions
    /// hold exactly zero.
    pub fn attention_maps(&self, seq: &TokenSequence) -> Result<Vec<Vec<Array<f32>>>, ModelError> {
        let packed = PackedBatch::new(std::slice::from_ref(seq), &self.config)?;
        let mut g = Graph::new();
        let bound = bind(&mut g, &self.params, false);
        let out = forward(&mut g, &self.params, &bound, &packed, &self.config)?;
        let pos = packed.layout.positions();
        let len = pos.len();
        let full = self.config.max_len + 1;
        let mut maps = Vec::new();
        for &node in &out.attention {
            let probs = g.attention_probs(node).expect("attention node");
            let heads = (0..self.config.n_heads)
                .map(|h| {
                    let mut m = Array::zeros(&[full, full]);
                    for i in 0..len {
                        for j in 0..len {
                            m.row_mut(pos[i])[pos[j]] = probs[h * len * len + i * len + j];
                        }
                    }
                    m
                })
                .collect();
            maps.push(heads);
        }
        Ok(maps)
    }
}
