//! Sequential bottleneck adapters and the attention-based fusion layer
//! that composes pretrained task adapters.
//!
//! An adapter is `h + up(relu(down(h)))` with the up-projection initialized
//! to zero, so every stack starts as the identity. Fusion queries come from
//! the hidden state, keys and values from each adapter's output; the
//! softmax weights over adapters form a probability distribution at every
//! position and the fused output keeps the residual.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::snapshot;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Head-only baseline.
    N,
    /// Ten property adapters fused.
    P,
    /// Property plus both association adapters.
    #[serde(rename = "P+V")]
    PV,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::N => "N",
            Mode::P => "P",
            Mode::PV => "P+V",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "N" | "n" => Some(Mode::N),
            "P" | "p" => Some(Mode::P),
            "P+V" | "p+v" | "PV" | "pv" => Some(Mode::PV),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug)]
pub enum AdapterError {
    NoAdapters,
    Untrained(String),
    LayerCountMismatch { expected: usize, got: usize },
    WidthMismatch { expected: usize, got: usize },
    MissingParameter(String),
    Tensor(TensorError),
}

impl fmt::Display for AdapterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoAdapters => write!(f, "fusion requires at least one attached adapter"),
            Self::Untrained(task) => write!(f, "adapter '{}' is not trained", task),
            Self::LayerCountMismatch { expected, got } => {
                write!(f, "expected {} layers, got {}", expected, got)
            }
            Self::WidthMismatch { expected, got } => {
                write!(f, "expected width {}, got {}", expected, got)
            }
            Self::MissingParameter(name) => write!(f, "missing parameter '{}'", name),
            Self::Tensor(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for AdapterError {}

impl From<TensorError> for AdapterError {
    fn from(e: TensorError) -> Self {
        AdapterError::Tensor(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub reduction_factor: usize,
    /// Also insert the adapter after the attention sublayer. Off by
    /// default; when on, the same per-layer adapter is shared by both
    /// insertion points.
    pub after_attention: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            reduction_factor: 16,
            after_attention: false,
        }
    }
}

impl AdapterConfig {
    pub fn bottleneck_dim(&self, d_model: usize) -> usize {
        d_model.div_ceil(self.reduction_factor).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct AdapterLayerParams {
    pub down: Tensor,
    pub down_bias: Tensor,
    pub up: Tensor,
    pub up_bias: Tensor,
}

/// One task's adapters, one per backbone layer.
#[derive(Debug, Clone)]
pub struct AdapterStack {
    pub task: String,
    pub layers: Vec<AdapterLayerParams>,
    pub trained: bool,
    d_model: usize,
    bottleneck: usize,
}

impl AdapterStack {
    pub fn init(
        task: &str,
        n_layers: usize,
        d_model: usize,
        config: &AdapterConfig,
        seed: u64,
    ) -> AdapterStack {
        let b = config.bottleneck_dim(d_model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..n_layers)
            .map(|_| AdapterLayerParams {
                down: crate::backbone::gaussian_tensor(&mut rng, &[d_model, b], 0.02),
                down_bias: Tensor::zeros(&[b]),
                up: Tensor::zeros(&[b, d_model]),
                up_bias: Tensor::zeros(&[d_model]),
            })
            .collect();
        AdapterStack {
            task: task.to_string(),
            layers,
            trained: false,
            d_model,
            bottleneck: b,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    /// d*b + b + b*d + d trainable values per layer.
    pub fn params_per_layer(&self) -> usize {
        2 * self.d_model * self.bottleneck + self.bottleneck + self.d_model
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let prefix = format!("adapter.{}.{}", self.task, l);
            out.push((format!("{}.down", prefix), &layer.down));
            out.push((format!("{}.down_bias", prefix), &layer.down_bias));
            out.push((format!("{}.up", prefix), &layer.up));
            out.push((format!("{}.up_bias", prefix), &layer.up_bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let task = self.task.clone();
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("adapter.{}.{}", task, l);
            out.push((format!("{}.down", prefix), &mut layer.down));
            out.push((format!("{}.down_bias", prefix), &mut layer.down_bias));
            out.push((format!("{}.up", prefix), &mut layer.up));
            out.push((format!("{}.up_bias", prefix), &mut layer.up_bias));
        }
        out
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        snapshot::snapshot_bytes(&self.params())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AdapterNodes {
        let mut named = Vec::new();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let prefix = format!("adapter.{}.{}", self.task, l);
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
                AdapterLayerNodes {
                    down: put(g, format!("{}.down", prefix), &layer.down),
                    down_bias: put(g, format!("{}.down_bias", prefix), &layer.down_bias),
                    up: put(g, format!("{}.up", prefix), &layer.up),
                    up_bias: put(g, format!("{}.up_bias", prefix), &layer.up_bias),
                }
            })
            .collect();
        AdapterNodes {
            layers,
            named,
            after_attention: false,
        }
    }

    /// Rebuild a trained stack from snapshot entries.
    pub fn from_entries(
        task: &str,
        n_layers: usize,
        entries: &[(String, Tensor)],
    ) -> Result<AdapterStack, AdapterError> {
        let map: HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let get = |name: String| -> Result<Tensor, AdapterError> {
            map.get(name.as_str())
                .map(|t| (*t).clone())
                .ok_or(AdapterError::MissingParameter(name))
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let prefix = format!("adapter.{}.{}", task, l);
            layers.push(AdapterLayerParams {
                down: get(format!("{}.down", prefix))?,
                down_bias: get(format!("{}.down_bias", prefix))?,
                up: get(format!("{}.up", prefix))?,
                up_bias: get(format!("{}.up_bias", prefix))?,
            });
        }
        let d_model = layers[0].down.shape()[0];
        let bottleneck = layers[0].down.shape()[1];
        Ok(AdapterStack {
            task: task.to_string(),
            layers,
            trained: true,
            d_model,
            bottleneck,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterLayerNodes {
    pub down: NodeId,
    pub down_bias: NodeId,
    pub up: NodeId,
    pub up_bias: NodeId,
}

#[derive(Debug, Clone)]
pub struct AdapterNodes {
    pub layers: Vec<AdapterLayerNodes>,
    named: Vec<(String, NodeId)>,
    after_attention: bool,
}

impl AdapterNodes {
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

    pub fn with_after_attention(mut self, on: bool) -> Self {
        self.after_attention = on;
        self
    }
}

/// `h + up(relu(down(h)))` for an L x d hidden state.
pub fn adapter_forward(
    g: &mut Graph,
    h: NodeId,
    layer: &AdapterLayerNodes,
) -> Result<NodeId, TensorError> {
    let z = g.matmul(h, layer.down)?;
    let z = g.add(z, layer.down_bias)?;
    let z = g.relu(z);
    let u = g.matmul(z, layer.up)?;
    let u = g.add(u, layer.up_bias)?;
    g.add(h, u)
}

#[derive(Debug, Clone)]
pub struct FusionLayerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Attention over N frozen adapters, one set of projections per layer.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub layers: Vec<FusionLayerParams>,
    pub adapters: Vec<AdapterStack>,
    d_model: usize,
}

impl FusionLayer {
    /// Attach trained adapters. Query/key projections start at small
    /// Gaussian values and the value projection at the identity, so the
    /// fused output starts as the residual plus the mean adapter output
    /// and every projection receives gradient from the first step.
    pub fn init(
        adapters: Vec<AdapterStack>,
        n_layers: usize,
        d_model: usize,
        seed: u64,
    ) -> Result<FusionLayer, AdapterError> {
        if adapters.is_empty() {
            return Err(AdapterError::NoAdapters);
        }
        for stack in &adapters {
            if !stack.trained {
                return Err(AdapterError::Untrained(stack.task.clone()));
            }
            if stack.layers.len() != n_layers {
                return Err(AdapterError::LayerCountMismatch {
                    expected: n_layers,
                    got: stack.layers.len(),
                });
            }
            if stack.d_model != d_model {
                return Err(AdapterError::WidthMismatch {
                    expected: d_model,
                    got: stack.d_model,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut identity = Tensor::zeros(&[d_model, d_model]);
        for i in 0..d_model {
            identity.data_mut()[i * d_model + i] = 1.0;
        }
        let layers = (0..n_layers)
            .map(|_| FusionLayerParams {
                w_q: crate::backbone::gaussian_tensor(&mut rng, &[d_model, d_model], 0.02),
                w_k: crate::backbone::gaussian_tensor(&mut rng, &[d_model, d_model], 0.02),
                w_v: identity.clone(),
            })
            .collect();
        Ok(FusionLayer {
            layers,
            adapters,
            d_model,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Projection parameters only; attached adapters serialize separately.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("fusion.{}.w_q", l), &layer.w_q));
            out.push((format!("fusion.{}.w_k", l), &layer.w_k));
            out.push((format!("fusion.{}.w_v", l), &layer.w_v));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("fusion.{}.w_q", l), &mut layer.w_q));
            out.push((format!("fusion.{}.w_k", l), &mut layer.w_k));
            out.push((format!("fusion.{}.w_v", l), &mut layer.w_v));
        }
        out
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        snapshot::snapshot_bytes(&self.params())
    }

    /// Bind projections (trainable unless frozen) and adapters (always
    /// frozen during fusion).
    pub fn bind(&self, g: &mut Graph, train_projections: bool) -> FusionNodes {
        let mut named = Vec::new();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let mut put = |g: &mut Graph, name: String, t: &Tensor| -> NodeId {
                    let tensor = if train_projections {
                        t.clone().with_grad()
                    } else {
                        t.clone()
                    };
                    let id = g.leaf(tensor);
                    if train_projections {
                        named.push((name, id));
                    }
                    id
                };
                FusionLayerNodes {
                    w_q: put(g, format!("fusion.{}.w_q", l), &layer.w_q),
                    w_k: put(g, format!("fusion.{}.w_k", l), &layer.w_k),
                    w_v: put(g, format!("fusion.{}.w_v", l), &layer.w_v),
                }
            })
            .collect();
        let adapters = self.adapters.iter().map(|a| a.bind(g, false)).collect();
        FusionNodes {
            layers,
            adapters,
            named,
            d_model: self.d_model,
            after_attention: false,
        }
    }

    pub fn from_entries(
        adapters: Vec<AdapterStack>,
        n_layers: usize,
        d_model: usize,
        entries: &[(String, Tensor)],
    ) -> Result<FusionLayer, AdapterError> {
        let mut fusion = FusionLayer::init(adapters, n_layers, d_model, 0)?;
        let map: HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, tensor) in fusion.params_mut() {
            let loaded = map
                .get(name.as_str())
                .ok_or(AdapterError::MissingParameter(name.clone()))?;
            *tensor = (*loaded).clone();
        }
        Ok(fusion)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionLayerNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

#[derive(Debug, Clone)]
pub struct FusionNodes {
    pub layers: Vec<FusionLayerNodes>,
    pub adapters: Vec<AdapterNodes>,
    named: Vec<(String, NodeId)>,
    d_model: usize,
    after_attention: bool,
}

impl FusionNodes {
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

    pub fn with_after_attention(mut self, on: bool) -> Self {
        self.after_attention = on;
        self
    }
}

/// Fused output and the L x N attention weights over adapters.
pub struct FusionOut {
    pub output: NodeId,
    pub weights: NodeId,
}

/// Scaled dot-product attention over adapter outputs with residual:
/// query from `h`, key/value from each adapter's output.
pub fn fusion_forward(
    g: &mut Graph,
    h: NodeId,
    nodes: &FusionNodes,
    layer: usize,
) -> Result<FusionOut, AdapterError> {
    if nodes.adapters.is_empty() {
        return Err(AdapterError::NoAdapters);
    }
    if layer >= nodes.layers.len() {
        return Err(AdapterError::LayerCountMismatch {
            expected: nodes.layers.len(),
            got: layer,
        });
    }
    let proj = nodes.layers[layer];
    let d = nodes.d_model;
    let q = g.matmul(h, proj.w_q)?;
    let ones = g.constant(Tensor::new(vec![d, 1], vec![1.0; d]).expect("ones column"));
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let mut scores = Vec::with_capacity(nodes.adapters.len());
    let mut values = Vec::with_capacity(nodes.adapters.len());
    for adapter in &nodes.adapters {
        let a = adapter_forward(g, h, &adapter.layers[layer])?;
        let k = g.matmul(a, proj.w_k)?;
        let v = g.matmul(a, proj.w_v)?;
        let qk = g.mul(q, k)?;
        let s = g.matmul(qk, ones)?;
        scores.push(g.scale(s, inv_sqrt_d));
        values.push(v);
    }
    let stacked = g.concat_cols(&scores)?;
    let weights = g.softmax(stacked);
    let mut mixed: Option<NodeId> = None;
    for (i, &v) in values.iter().enumerate() {
        let w = g.slice_cols(weights, i, i + 1)?;
        let term = g.mul(v, w)?;
        mixed = Some(match mixed {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let output = g.add(h, mixed.expect("at least one adapter"))?;
    Ok(FusionOut { output, weights })
}

/// What to insert after each backbone sublayer.
pub enum Augment<'a> {
    None,
    Adapter(&'a AdapterNodes),
    Fusion(&'a FusionNodes),
}

impl<'a> Augment<'a> {
    pub fn after_attention(&self) -> bool {
        match self {
            Augment::None => false,
            Augment::Adapter(a) => a.after_attention,
            Augment::Fusion(f) => f.after_attention,
        }
    }

    pub fn apply(&self, g: &mut Graph, h: NodeId, layer: usize) -> Result<NodeId, TensorError> {
        match self {
            Augment::None => Ok(h),
            Augment::Adapter(nodes) => adapter_forward(g, h, &nodes.layers[layer]),
            Augment::Fusion(nodes) => fusion_forward(g, h, nodes, layer)
                .map(|out| out.output)
                .map_err(|e| match e {
                    AdapterError::Tensor(t) => t,
                    other => TensorError::EmptyInput(match other {
                        AdapterError::NoAdapters => "fusion with no adapters",
                        _ => "fusion",
                    }),
                }),
        }
    }
}

/// Exact count of parameters receiving gradient updates in a mode.
/// Adapters are frozen during fine-tuning and never counted; the head is
/// one affine map d -> 1.
pub fn count_trainable(
    d_model: usize,
    n_layers: usize,
    mode: Mode,
    freeze_fusion: bool,
) -> usize {
    let head = d_model + 1;
    match mode {
        Mode::N => head,
        Mode::P | Mode::PV => {
            let fusion = if freeze_fusion {
                0
            } else {
                n_layers * 3 * d_model * d_model
            };
            head + fusion
        }
    }
}
