//! Toy transformer encoder producing the pooled s-v-o representation.
//!
//! Word-level vocabulary with reserved PAD/UNK/SEP ids, per-head attention
//! parameters (separate matrices per head, so no tensor slicing is needed),
//! post-norm layers, GELU feed-forward, and mean pooling over non-PAD
//! positions. PAD keys are masked out of attention with a -1e9 additive
//! mask, so appending extra PAD tokens cannot change the encoding.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::Augment;
use crate::data::PlausibilityRecord;
use crate::snapshot;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "<sep>";

const ATTN_MASK: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
pub enum BackboneError {
    EmptyField(&'static str),
    SequenceTooLong { len: usize, max: usize },
    EmptySequence,
    EmptyCorpus,
    VocabFormat { line: usize, message: String },
    Tensor(TensorError),
    Io(std::io::Error),
}

impl fmt::Display for BackboneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyField(which) => write!(f, "empty {} in triple", which),
            Self::SequenceTooLong { len, max } => {
                write!(f, "sequence length {} exceeds max_seq_len {}", len, max)
            }
            Self::EmptySequence => write!(f, "empty id sequence"),
            Self::EmptyCorpus => write!(f, "empty corpus"),
            Self::VocabFormat { line, message } => {
                write!(f, "vocabulary line {}: {}", line, message)
            }
            Self::Tensor(e) => write!(f, "{}", e),
            Self::Io(e) => write!(f, "io error: {}", e),
        }
    }
}

impl std::error::Error for BackboneError {}

impl From<TensorError> for BackboneError {
    fn from(e: TensorError) -> Self {
        BackboneError::Tensor(e)
    }
}

impl From<std::io::Error> for BackboneError {
    fn from(e: std::io::Error) -> Self {
        BackboneError::Io(e)
    }
}

/// Word-level token map. Ids are dense: reserved ids first, then corpus
/// tokens in sorted order, so the same corpus always yields the same map.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus_tokens: I) -> Vocabulary {
        let mut unique: Vec<String> = corpus_tokens
            .into_iter()
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .filter(|t| t != PAD_TOKEN && t != UNK_TOKEN && t != SEP_TOKEN)
            .collect();
        unique.sort();
        unique.dedup();
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
        ];
        tokens.extend(unique);
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            tokens,
        }
    }

    pub fn from_records(records: &[PlausibilityRecord]) -> Vocabulary {
        Vocabulary::build(
            records
                .iter()
                .flat_map(|r| [r.subject.as_str(), r.verb.as_str(), r.object.as_str()]),
        )
    }

    /// Id of a token; UNK for anything unseen.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id
            .get(&token.trim().to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// One `token<TAB>id` line per entry.
    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary, BackboneError> {
        let content = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (i, line) in content.lines().enumerate() {
            let (token, id) = line.split_once('\t').ok_or(BackboneError::VocabFormat {
                line: i + 1,
                message: "missing tab separator".into(),
            })?;
            let id: usize = id.parse().map_err(|_| BackboneError::VocabFormat {
                line: i + 1,
                message: format!("bad id '{}'", id),
            })?;
            if id != i {
                return Err(BackboneError::VocabFormat {
                    line: i + 1,
                    message: format!("non-dense id {} at position {}", id, i),
                });
            }
            tokens.push(token.to_string());
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_seq_len: 8,
            dropout: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.ffn_dim == 0
            || self.max_seq_len == 0
        {
            return Err("all backbone dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `[subject, SEP, verb, SEP, object]` padded to `max_seq_len`.
pub fn tokenize(
    subject: &str,
    verb: &str,
    object: &str,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<usize>, BackboneError> {
    for (field, value) in [("subject", subject), ("verb", verb), ("object", object)] {
        if value.trim().is_empty() {
            return Err(BackboneError::EmptyField(field));
        }
    }
    let mut ids = vec![
        vocab.id(subject),
        SEP_ID,
        vocab.id(verb),
        SEP_ID,
        vocab.id(object),
    ];
    if ids.len() > max_seq_len {
        return Err(BackboneError::SequenceTooLong {
            len: ids.len(),
            max: max_seq_len,
        });
    }
    ids.resize(max_seq_len, PAD_ID);
    Ok(ids)
}

/// A verb-noun pair in the s-v-o slot layout with the unused slot padded:
/// subject relation gives `[noun, SEP, verb, SEP, PAD]`, object relation
/// gives `[PAD, SEP, verb, SEP, noun]`.
pub fn tokenize_pair(
    verb: &str,
    noun: &str,
    noun_is_subject: bool,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<usize>, BackboneError> {
    if verb.trim().is_empty() {
        return Err(BackboneError::EmptyField("verb"));
    }
    if noun.trim().is_empty() {
        return Err(BackboneError::EmptyField("noun"));
    }
    let mut ids = if noun_is_subject {
        vec![vocab.id(noun), SEP_ID, vocab.id(verb), SEP_ID, PAD_ID]
    } else {
        vec![PAD_ID, SEP_ID, vocab.id(verb), SEP_ID, vocab.id(noun)]
    };
    if ids.len() > max_seq_len {
        return Err(BackboneError::SequenceTooLong {
            len: ids.len(),
            max: max_seq_len,
        });
    }
    ids.resize(max_seq_len, PAD_ID);
    Ok(ids)
}

/// A single item token padded to `max_seq_len`.
pub fn tokenize_item(
    item: &str,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<usize>, BackboneError> {
    if item.trim().is_empty() {
        return Err(BackboneError::EmptyField("item"));
    }
    if max_seq_len == 0 {
        return Err(BackboneError::SequenceTooLong { len: 1, max: 0 });
    }
    let mut ids = vec![vocab.id(item)];
    ids.resize(max_seq_len, PAD_ID);
    Ok(ids)
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub b_attn: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

/// Encoder parameters plus the frozen flag. Once frozen, `bind` always
/// produces non-trainable leaves, so no training loop can touch the bytes.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub config: BackboneConfig,
    vocab_size: usize,
    embedding: Tensor,
    positional: Tensor,
    layers: Vec<LayerParams>,
    frozen: bool,
}

pub(crate) fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("gaussian tensor shape")
}

impl EncoderState {
    pub fn init(config: &BackboneConfig, vocab_size: usize, seed: u64) -> EncoderState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let dh = config.head_dim();
        let std = 0.02;
        let embedding = gaussian_tensor(&mut rng, &[vocab_size, d], std);
        let positional = gaussian_tensor(&mut rng, &[config.max_seq_len, d], std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                heads: (0..config.n_heads)
                    .map(|_| HeadParams {
                        w_q: gaussian_tensor(&mut rng, &[d, dh], std),
                        w_k: gaussian_tensor(&mut rng, &[d, dh], std),
                        w_v: gaussian_tensor(&mut rng, &[d, dh], std),
                        w_o: gaussian_tensor(&mut rng, &[dh, d], std),
                    })
                    .collect(),
                b_attn: Tensor::zeros(&[d]),
                ln1_gamma: Tensor::vector(vec![1.0; d]),
                ln1_beta: Tensor::zeros(&[d]),
                w_ff1: gaussian_tensor(&mut rng, &[d, config.ffn_dim], std),
                b_ff1: Tensor::zeros(&[config.ffn_dim]),
                w_ff2: gaussian_tensor(&mut rng, &[config.ffn_dim, d], std),
                b_ff2: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::vector(vec![1.0; d]),
                ln2_beta: Tensor::zeros(&[d]),
            })
            .collect();
        EncoderState {
            config: config.clone(),
            vocab_size,
            embedding,
            positional,
            layers,
            frozen: false,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Named parameters in a stable order (names sort identically on save).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("backbone.embedding".into(), &self.embedding),
            ("backbone.positional".into(), &self.positional),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("backbone.layer{}.head{}.w_q", l, h), &head.w_q));
                out.push((format!("backbone.layer{}.head{}.w_k", l, h), &head.w_k));
                out.push((format!("backbone.layer{}.head{}.w_v", l, h), &head.w_v));
                out.push((format!("backbone.layer{}.head{}.w_o", l, h), &head.w_o));
            }
            out.push((format!("backbone.layer{}.b_attn", l), &layer.b_attn));
            out.push((format!("backbone.layer{}.ln1_gamma", l), &layer.ln1_gamma));
            out.push((format!("backbone.layer{}.ln1_beta", l), &layer.ln1_beta));
            out.push((format!("backbone.layer{}.w_ff1", l), &layer.w_ff1));
            out.push((format!("backbone.layer{}.b_ff1", l), &layer.b_ff1));
            out.push((format!("backbone.layer{}.w_ff2", l), &layer.w_ff2));
            out.push((format!("backbone.layer{}.b_ff2", l), &layer.b_ff2));
            out.push((format!("backbone.layer{}.ln2_gamma", l), &layer.ln2_gamma));
            out.push((format!("backbone.layer{}.ln2_beta", l), &layer.ln2_beta));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("backbone.embedding".into(), &mut self.embedding),
            ("backbone.positional".into(), &mut self.positional),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("backbone.layer{}.head{}.w_q", l, h), &mut head.w_q));
                out.push((format!("backbone.layer{}.head{}.w_k", l, h), &mut head.w_k));
                out.push((format!("backbone.layer{}.head{}.w_v", l, h), &mut head.w_v));
                out.push((format!("backbone.layer{}.head{}.w_o", l, h), &mut head.w_o));
            }
            out.push((format!("backbone.layer{}.b_attn", l), &mut layer.b_attn));
            out.push((
                format!("backbone.layer{}.ln1_gamma", l),
                &mut layer.ln1_gamma,
            ));
            out.push((format!("backbone.layer{}.ln1_beta", l), &mut layer.ln1_beta));
            out.push((format!("backbone.layer{}.w_ff1", l), &mut layer.w_ff1));
            out.push((format!("backbone.layer{}.b_ff1", l), &mut layer.b_ff1));
            out.push((format!("backbone.layer{}.w_ff2", l), &mut layer.w_ff2));
            out.push((format!("backbone.layer{}.b_ff2", l), &mut layer.b_ff2));
            out.push((
                format!("backbone.layer{}.ln2_gamma", l),
                &mut layer.ln2_gamma,
            ));
            out.push((format!("backbone.layer{}.ln2_beta", l), &mut layer.ln2_beta));
        }
        out
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        snapshot::snapshot_bytes(&self.params())
    }

    pub fn save(&self, path: &Path) -> Result<(), snapshot::SnapshotError> {
        snapshot::save_snapshot(path, &self.params())
    }

    /// Rebuild from snapshot entries; the result is frozen.
    pub fn from_entries(
        config: &BackboneConfig,
        entries: &[(String, Tensor)],
    ) -> Result<EncoderState, BackboneError> {
        let map: HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let get = |name: String| -> Result<Tensor, BackboneError> {
            map.get(name.as_str())
                .map(|t| (*t).clone())
                .ok_or(BackboneError::VocabFormat {
                    line: 0,
                    message: format!("missing parameter '{}' in snapshot", name),
                })
        };
        let embedding = get("backbone.embedding".into())?;
        let vocab_size = embedding.shape()[0];
        let positional = get("backbone.positional".into())?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let heads = (0..config.n_heads)
                .map(|h| {
                    Ok(HeadParams {
                        w_q: get(format!("backbone.layer{}.head{}.w_q", l, h))?,
                        w_k: get(format!("backbone.layer{}.head{}.w_k", l, h))?,
                        w_v: get(format!("backbone.layer{}.head{}.w_v", l, h))?,
                        w_o: get(format!("backbone.layer{}.head{}.w_o", l, h))?,
                    })
                })
                .collect::<Result<Vec<_>, BackboneError>>()?;
            layers.push(LayerParams {
                heads,
                b_attn: get(format!("backbone.layer{}.b_attn", l))?,
                ln1_gamma: get(format!("backbone.layer{}.ln1_gamma", l))?,
                ln1_beta: get(format!("backbone.layer{}.ln1_beta", l))?,
                w_ff1: get(format!("backbone.layer{}.w_ff1", l))?,
                b_ff1: get(format!("backbone.layer{}.b_ff1", l))?,
                w_ff2: get(format!("backbone.layer{}.w_ff2", l))?,
                b_ff2: get(format!("backbone.layer{}.b_ff2", l))?,
                ln2_gamma: get(format!("backbone.layer{}.ln2_gamma", l))?,
                ln2_beta: get(format!("backbone.layer{}.ln2_beta", l))?,
            });
        }
        Ok(EncoderState {
            config: config.clone(),
            vocab_size,
            embedding,
            positional,
            layers,
            frozen: true,
        })
    }

    pub fn load(config: &BackboneConfig, path: &Path) -> Result<EncoderState, BackboneError> {
        let entries = snapshot::load_snapshot(path).map_err(|e| BackboneError::VocabFormat {
            line: 0,
            message: e.to_string(),
        })?;
        EncoderState::from_entries(config, &entries)
    }

    /// Insert parameter leaves into a graph. A frozen encoder is always
    /// bound non-trainable regardless of the flag.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderNodes {
        let trainable = trainable && !self.frozen;
        let mut named = Vec::new();
        let mut put = |g: &mut Graph, name: String, t: &Tensor| -> NodeId {
            let tensor = if trainable {
                t.clone().with_grad()
            } else {
                t.clone()
            };
            let id = g.leaf(tensor);
            if trainable {
                named.push((name, id));
            }
            id
        };
        let embedding = put(g, "backbone.embedding".into(), &self.embedding);
        let positional = put(g, "backbone.positional".into(), &self.positional);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| EncoderLayerNodes {
                heads: layer
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(h, head)| HeadNodes {
                        w_q: put(g, format!("backbone.layer{}.head{}.w_q", l, h), &head.w_q),
                        w_k: put(g, format!("backbone.layer{}.head{}.w_k", l, h), &head.w_k),
                        w_v: put(g, format!("backbone.layer{}.head{}.w_v", l, h), &head.w_v),
                        w_o: put(g, format!("backbone.layer{}.head{}.w_o", l, h), &head.w_o),
                    })
                    .collect(),
                b_attn: put(g, format!("backbone.layer{}.b_attn", l), &layer.b_attn),
                ln1_gamma: put(g, format!("backbone.layer{}.ln1_gamma", l), &layer.ln1_gamma),
                ln1_beta: put(g, format!("backbone.layer{}.ln1_beta", l), &layer.ln1_beta),
                w_ff1: put(g, format!("backbone.layer{}.w_ff1", l), &layer.w_ff1),
                b_ff1: put(g, format!("backbone.layer{}.b_ff1", l), &layer.b_ff1),
                w_ff2: put(g, format!("backbone.layer{}.w_ff2", l), &layer.w_ff2),
                b_ff2: put(g, format!("backbone.layer{}.b_ff2", l), &layer.b_ff2),
                ln2_gamma: put(g, format!("backbone.layer{}.ln2_gamma", l), &layer.ln2_gamma),
                ln2_beta: put(g, format!("backbone.layer{}.ln2_beta", l), &layer.ln2_beta),
            })
            .collect();
        EncoderNodes {
            embedding,
            positional,
            layers,
            named,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerNodes {
    pub heads: Vec<HeadNodes>,
    pub b_attn: NodeId,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub w_ff1: NodeId,
    pub b_ff1: NodeId,
    pub w_ff2: NodeId,
    pub b_ff2: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
}

/// Graph leaves for one bound encoder, plus the trainable-name index used
/// to harvest gradients after backward.
#[derive(Debug, Clone)]
pub struct EncoderNodes {
    pub embedding: NodeId,
    pub positional: NodeId,
    pub layers: Vec<EncoderLayerNodes>,
    named: Vec<(String, NodeId)>,
}

impl EncoderNodes {
    pub fn grads(&self, g: &Graph) -> Vec<(String, Vec<f64>)> {
        self.named
            .iter()
            .map(|(name, id)| {
                (
                    name.clone(),
                    g.grad(*id).map(|s| s.to_vec()).unwrap_or_default(),
                )
            })
            .collect()
    }
}

/// Per-position hidden states after all layers: an L x d node.
///
/// `augment` inserts an adapter or fusion block after each layer's
/// feed-forward sublayer (and optionally after attention).
pub fn encode_hidden(
    g: &mut Graph,
    nodes: &EncoderNodes,
    config: &BackboneConfig,
    ids: &[usize],
    augment: &Augment,
) -> Result<NodeId, BackboneError> {
    if ids.is_empty() {
        return Err(BackboneError::EmptySequence);
    }
    if ids.len() > config.max_seq_len {
        return Err(BackboneError::SequenceTooLong {
            len: ids.len(),
            max: config.max_seq_len,
        });
    }
    let len = ids.len();
    let d = config.d_model;

    let emb = g.embedding(nodes.embedding, ids)?;
    let pos_ids: Vec<usize> = (0..len).collect();
    let pos = g.embedding(nodes.positional, &pos_ids)?;
    let mut x = g.add(emb, pos)?;

    // -1e9 on PAD key columns zeroes their attention weight exactly.
    let mut mask_data = vec![0.0; len * len];
    for (j, &id) in ids.iter().enumerate() {
        if id == PAD_ID {
            for i in 0..len {
                mask_data[i * len + j] = ATTN_MASK;
            }
        }
    }
    let mask = g.constant(Tensor::new(vec![len, len], mask_data).expect("mask shape"));
    let inv_sqrt_dh = 1.0 / (config.head_dim() as f64).sqrt();

    for (l, layer) in nodes.layers.iter().enumerate() {
        // multi-head self-attention; per-head output projections summed
        let mut attn_out: Option<NodeId> = None;
        for head in &layer.heads {
            let q = g.matmul(x, head.w_q)?;
            let k = g.matmul(x, head.w_k)?;
            let v = g.matmul(x, head.w_v)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt_dh);
            let scores = g.add(scores, mask)?;
            let weights = g.softmax(scores);
            let ctx = g.matmul(weights, v)?;
            let proj = g.matmul(ctx, head.w_o)?;
            attn_out = Some(match attn_out {
                Some(acc) => g.add(acc, proj)?,
                None => proj,
            });
        }
        let attn = g.add(attn_out.expect("n_heads >= 1"), layer.b_attn)?;
        let res1 = g.add(x, attn)?;
        let mut h1 = g.layer_norm(res1, layer.ln1_gamma, layer.ln1_beta, LAYER_NORM_EPS)?;
        if augment.after_attention() {
            h1 = augment.apply(g, h1, l)?;
        }

        let ff = g.matmul(h1, layer.w_ff1)?;
        let ff = g.add(ff, layer.b_ff1)?;
        let ff = g.gelu(ff);
        let ff = g.matmul(ff, layer.w_ff2)?;
        let ff = g.add(ff, layer.b_ff2)?;
        let res2 = g.add(h1, ff)?;
        let h2 = g.layer_norm(res2, layer.ln2_gamma, layer.ln2_beta, LAYER_NORM_EPS)?;
        x = augment.apply(g, h2, l)?;
        let _ = d;
    }
    Ok(x)
}

/// Pooled d-dimensional representation: mean over non-PAD positions.
pub fn encode_graph(
    g: &mut Graph,
    nodes: &EncoderNodes,
    config: &BackboneConfig,
    ids: &[usize],
    augment: &Augment,
) -> Result<NodeId, BackboneError> {
    let hidden = encode_hidden(g, nodes, config, ids, augment)?;
    let mask: Vec<bool> = ids.iter().map(|&id| id != PAD_ID).collect();
    Ok(g.mean_pool(hidden, &mask)?)
}

/// Convenience eager encode with no adapters.
pub fn encode(state: &EncoderState, ids: &[usize]) -> Result<Tensor, BackboneError> {
    let mut g = Graph::new();
    let nodes = state.bind(&mut g, false);
    let out = encode_graph(&mut g, &nodes, &state.config, ids, &Augment::None)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackbonePretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Brief masked-token pretraining over s-v-o sequences, standing in for a
/// published checkpoint. One content position (subject, verb, or object)
/// is replaced by UNK per example and predicted back through tied
/// embeddings. The returned encoder is frozen.
pub fn pretrain_backbone(
    corpus: &[PlausibilityRecord],
    config: &BackboneConfig,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
) -> Result<(Vocabulary, EncoderState, BackbonePretrainReport), crate::trainer::TrainError> {
    use crate::trainer::{adam_step, batch_grads, derive_seed, losses, AdamState, TrainError};
    use rand::Rng;

    if corpus.is_empty() {
        return Err(TrainError::Backbone(BackboneError::EmptyCorpus));
    }
    let vocab = Vocabulary::from_records(corpus);
    let vocab_size = vocab.len();
    let mut encoder = EncoderState::init(config, vocab_size, derive_seed(seed, "backbone"));
    let sequences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|r| tokenize(&r.subject, &r.verb, &r.object, &vocab, config.max_seq_len))
        .collect::<Result<Vec<_>, BackboneError>>()?;

    // subject, verb, and object slots in the tokenized layout
    const CONTENT_POSITIONS: [usize; 3] = [0, 2, 4];
    let masked_examples = |rng: &mut ChaCha8Rng| -> Vec<(Vec<usize>, usize, usize)> {
        sequences
            .iter()
            .map(|ids| {
                let pos = CONTENT_POSITIONS[rng.gen_range(0..CONTENT_POSITIONS.len())];
                let target = ids[pos];
                let mut masked = ids.clone();
                masked[pos] = UNK_ID;
                (masked, pos, target)
            })
            .collect()
    };

    let forward = |encoder: &EncoderState,
                   example: &(Vec<usize>, usize, usize),
                   train: bool|
     -> Result<(f64, Vec<(String, Vec<f64>)>), TrainError> {
        let (ids, pos, target) = example;
        let mut g = Graph::new();
        let enc = encoder.bind(&mut g, train);
        let hidden = encode_hidden(&mut g, &enc, config, ids, &Augment::None)?;
        let mut pick = vec![false; ids.len()];
        pick[*pos] = true;
        let h = g.mean_pool(hidden, &pick)?;
        let row = g.reshape(h, &[1, config.d_model])?;
        let tied = g.transpose(enc.embedding)?;
        let logits = g.matmul(row, tied)?;
        let loss = losses::cross_entropy(&mut g, logits, target + 1, vocab_size)?;
        let value = g.value(loss).scalar_value();
        if !train {
            return Ok((value, vec![]));
        }
        g.backward(loss)?;
        Ok((value, enc.grads(&g)))
    };

    let eval_examples = masked_examples(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "mask-eval")));
    let eval_refs: Vec<&(Vec<usize>, usize, usize)> = eval_examples.iter().collect();
    let (initial_loss, _) = batch_grads(&eval_refs, |ex| forward(&encoder, ex, false))?;

    let mut adam = AdamState::new(learning_rate);
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("mask{}", epoch)));
        let examples = masked_examples(&mut rng);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&(Vec<usize>, usize, usize)> =
                chunk.iter().map(|&i| &examples[i]).collect();
            let (_, grads) = batch_grads(&batch, |ex| forward(&encoder, ex, true))?;
            let mut params = encoder.params_mut();
            adam_step(&mut params, &grads, &mut adam)?;
        }
    }
    let (final_loss, _) = batch_grads(&eval_refs, |ex| forward(&encoder, ex, false))?;
    encoder.freeze();
    Ok((
        vocab,
        encoder,
        BackbonePretrainReport {
            initial_loss,
            final_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetId, Split};

    fn toy_vocab() -> Vocabulary {
        Vocabulary::build(["man", "ate", "dinner", "rock", "saw"])
    }

    fn toy_state(vocab: &Vocabulary) -> EncoderState {
        let config = BackboneConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            max_seq_len: 8,
            dropout: 0.0,
        };
        EncoderState::init(&config, vocab.len(), 7)
    }

    #[test]
    fn vocabulary_reserved_ids_and_unk() {
        let vocab = toy_vocab();
        assert_eq!(vocab.id(PAD_TOKEN), PAD_ID);
        assert_eq!(vocab.id(UNK_TOKEN), UNK_ID);
        assert_eq!(vocab.id(SEP_TOKEN), SEP_ID);
        assert_eq!(vocab.id("zzyzx"), UNK_ID);
        assert!(vocab.id("man") >= 3);
        // stable under rebuild
        let again = Vocabulary::build(["saw", "rock", "dinner", "ate", "man"]);
        assert_eq!(vocab, again);
    }

    #[test]
    fn vocabulary_save_load_round_trip() {
        let vocab = toy_vocab();
        let f = tempfile::NamedTempFile::new().unwrap();
        vocab.save(f.path()).unwrap();
        let back = Vocabulary::load(f.path()).unwrap();
        assert_eq!(vocab, back);
    }

    #[test]
    fn tokenize_layout_and_oov() {
        let vocab = toy_vocab();
        let ids = tokenize("man", "ate", "dinner", &vocab, 8).unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[1], SEP_ID);
        assert_eq!(ids[3], SEP_ID);
        assert_eq!(&ids[5..], &[PAD_ID, PAD_ID, PAD_ID]);
        assert!(ids[..5].iter().all(|&i| i != PAD_ID));

        let ids = tokenize("man", "ate", "zzyzx", &vocab, 8).unwrap();
        assert_eq!(ids[4], UNK_ID);

        assert!(matches!(
            tokenize("", "ate", "dinner", &vocab, 8),
            Err(BackboneError::EmptyField("subject"))
        ));
    }

    #[test]
    fn tokenize_injective_on_in_vocab_triples() {
        let words: Vec<String> = (0..20).map(|i| format!("w{}", i)).collect();
        let vocab = Vocabulary::build(words.iter().map(|s| s.as_str()));
        let mut seen = std::collections::HashSet::new();
        for s in words.iter().take(5) {
            for v in words.iter().take(5) {
                for o in words.iter().take(5) {
                    let ids = tokenize(s, v, o, &vocab, 8).unwrap();
                    assert!(seen.insert(ids), "collision for ({}, {}, {})", s, v, o);
                }
            }
        }
    }

    #[test]
    fn encode_shape_and_determinism() {
        let vocab = toy_vocab();
        let state = toy_state(&vocab);
        let ids = tokenize("man", "ate", "dinner", &vocab, 8).unwrap();
        let a = encode(&state, &ids).unwrap();
        assert_eq!(a.shape(), &[16]);
        let b = encode(&state, &ids).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm.is_finite() && norm > 0.0);
    }

    #[test]
    fn encode_sensitive_to_argument_order() {
        let vocab = toy_vocab();
        let state = toy_state(&vocab);
        let ab = tokenize("man", "ate", "dinner", &vocab, 8).unwrap();
        let ba = tokenize("dinner", "ate", "man", &vocab, 8).unwrap();
        let ea = encode(&state, &ab).unwrap();
        let eb = encode(&state, &ba).unwrap();
        assert_ne!(ea.data(), eb.data());
    }

    #[test]
    fn extra_padding_never_changes_encoding() {
        let vocab = toy_vocab();
        let state = toy_state(&vocab);
        let short = tokenize("man", "ate", "dinner", &vocab, 5).unwrap();
        let long = tokenize("man", "ate", "dinner", &vocab, 8).unwrap();
        let a = encode(&state, &short).unwrap();
        let b = encode(&state, &long).unwrap();
        assert_eq!(a.data(), b.data(), "PAD suffix must be inert");
    }

    #[test]
    fn encode_rejects_out_of_vocab_id_and_overlong() {
        let vocab = toy_vocab();
        let state = toy_state(&vocab);
        let mut ids = tokenize("man", "ate", "dinner", &vocab, 8).unwrap();
        ids[0] = vocab.len(); // out of range
        assert!(encode(&state, &ids).is_err());
        let too_long = vec![SEP_ID; 9];
        assert!(matches!(
            encode(&state, &too_long),
            Err(BackboneError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn pair_and_item_sequences() {
        let vocab = toy_vocab();
        let sv = tokenize_pair("ate", "man", true, &vocab, 8).unwrap();
        assert_eq!(sv[0], vocab.id("man"));
        assert_eq!(sv[4], PAD_ID);
        let ov = tokenize_pair("ate", "dinner", false, &vocab, 8).unwrap();
        assert_eq!(ov[0], PAD_ID);
        assert_eq!(ov[4], vocab.id("dinner"));
        assert_ne!(sv, ov);

        let item = tokenize_item("rock", &vocab, 8).unwrap();
        assert_eq!(item[0], vocab.id("rock"));
        assert!(item[1..].iter().all(|&i| i == PAD_ID));
    }

    #[test]
    fn frozen_state_binds_non_trainable() {
        let vocab = toy_vocab();
        let mut state = toy_state(&vocab);
        state.freeze();
        let mut g = Graph::new();
        let nodes = state.bind(&mut g, true);
        assert!(nodes.grads(&g).is_empty());
        assert!(!g.value(nodes.embedding).requires_grad());
    }

    #[test]
    fn snapshot_round_trip_bit_exact() {
        let vocab = toy_vocab();
        let state = toy_state(&vocab);
        let f = tempfile::NamedTempFile::new().unwrap();
        state.save(f.path()).unwrap();
        let back = EncoderState::load(&state.config, f.path()).unwrap();
        assert_eq!(state.snapshot_bytes(), back.snapshot_bytes());
        assert!(back.frozen());
    }

    #[test]
    fn records_vocabulary() {
        let records = vec![PlausibilityRecord {
            subject: "Man".into(),
            verb: "ate".into(),
            object: "dinner".into(),
            label: 1,
            split: Split::Train,
            dataset: DatasetId::Pep3k,
        }];
        let vocab = Vocabulary::from_records(&records);
        assert_eq!(vocab.len(), 6); // 3 reserved + 3 tokens
        assert_ne!(vocab.id("man"), UNK_ID);
    }
}
