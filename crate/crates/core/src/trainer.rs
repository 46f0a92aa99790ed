//! Optimization, losses, metrics, the training phases, the five-partition
//! evaluation protocol, and the ablation harness.
//!
//! Batches are processed as independent per-example graphs evaluated in
//! parallel; gradients are averaged in example order, so runs are
//! deterministic for a fixed (config, seed).

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{
    Augment, AdapterConfig, AdapterError, AdapterStack, FusionLayer, Mode,
};
use crate::association::{AssociationError, AssociationRecord, Relation};
use crate::backbone::{
    encode_graph, BackboneConfig, BackboneError, EncoderState, Vocabulary,
};
use crate::data::{
    partition_test, Category, DataError, DatasetId, PlausibilityRecord, PropertyRecord, Split,
    CATEGORIES, TEST_GROUPS,
};
use crate::snapshot;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug)]
pub enum TrainError {
    EmptyTaskData(String),
    BackboneNotFrozen,
    ModeAdapterMismatch {
        mode: Mode,
        expected: String,
        got: String,
    },
    NonFiniteGradient {
        name: String,
    },
    GradientShape {
        name: String,
        expected: usize,
        got: usize,
    },
    InvalidTarget {
        value: usize,
        classes: usize,
    },
    LengthMismatch {
        left: usize,
        right: usize,
    },
    NoTrainRecords,
    NoTestRecords(DatasetId),
    Tensor(TensorError),
    Backbone(BackboneError),
    Adapter(AdapterError),
    Association(AssociationError),
    Data(DataError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyTaskData(task) => write!(f, "no training data for task '{}'", task),
            Self::BackboneNotFrozen => write!(f, "backbone must be frozen before this phase"),
            Self::ModeAdapterMismatch {
                mode,
                expected,
                got,
            } => write!(
                f,
                "mode {} expects adapters [{}], got [{}]",
                mode, expected, got
            ),
            Self::NonFiniteGradient { name } => {
                write!(f, "non-finite gradient for parameter '{}'", name)
            }
            Self::GradientShape {
                name,
                expected,
                got,
            } => write!(
                f,
                "gradient for '{}' has {} values, parameter has {}",
                name, got, expected
            ),
            Self::InvalidTarget { value, classes } => {
                write!(f, "target class {} outside 1..={}", value, classes)
            }
            Self::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {} vs {}", left, right)
            }
            Self::NoTrainRecords => write!(f, "no training records for the requested setup"),
            Self::NoTestRecords(d) => write!(f, "no test records for dataset {}", d),
            Self::Tensor(e) => write!(f, "{}", e),
            Self::Backbone(e) => write!(f, "{}", e),
            Self::Adapter(e) => write!(f, "{}", e),
            Self::Association(e) => write!(f, "{}", e),
            Self::Data(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<BackboneError> for TrainError {
    fn from(e: BackboneError) -> Self {
        TrainError::Backbone(e)
    }
}

impl From<AdapterError> for TrainError {
    fn from(e: AdapterError) -> Self {
        TrainError::Adapter(e)
    }
}

impl From<AssociationError> for TrainError {
    fn from(e: AssociationError) -> Self {
        TrainError::Association(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

/// Derive a phase-specific seed so independent phases draw independent
/// but reproducible random streams.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction; moment buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> AdamState {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected update over the given trainable parameters. Names
/// absent from `params` are never touched, whatever the gradient map holds.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (name, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let zero;
        let grad = match grads.get(name) {
            Some(g) => {
                if g.len() != n {
                    return Err(TrainError::GradientShape {
                        name: name.clone(),
                        expected: n,
                        got: g.len(),
                    });
                }
                g
            }
            None => {
                zero = vec![0.0; n];
                &zero
            }
        };
        if let Some(bad) = grad.iter().find(|v| !v.is_finite()) {
            let _ = bad;
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let data = tensor.data_mut();
        for i in 0..n {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Losses (graph composites)
// ---------------------------------------------------------------------------

pub mod losses {
    use super::*;

    /// Cross entropy of a length-k logit row against a 1-based target
    /// class, via stable softmax then log.
    pub fn cross_entropy(
        g: &mut Graph,
        logits: NodeId,
        target_class: usize,
        n_classes: usize,
    ) -> Result<NodeId, TrainError> {
        if target_class == 0 || target_class > n_classes {
            return Err(TrainError::InvalidTarget {
                value: target_class,
                classes: n_classes,
            });
        }
        let len = g.value(logits).numel();
        if len != n_classes {
            return Err(TrainError::LengthMismatch {
                left: len,
                right: n_classes,
            });
        }
        let probs = g.softmax(logits);
        let logp = g.log(probs);
        let mut onehot = vec![0.0; n_classes];
        onehot[target_class - 1] = 1.0;
        let shape = g.value(logits).shape().to_vec();
        let pick = g.constant(Tensor::new(shape, onehot).expect("onehot shape"));
        let picked = g.mul(logp, pick)?;
        let total = g.sum(picked);
        Ok(g.scale(total, -1.0))
    }

    /// Mean squared error between a prediction node and fixed targets.
    pub fn mse(g: &mut Graph, pred: NodeId, target: &[f64]) -> Result<NodeId, TrainError> {
        let n = g.value(pred).numel();
        if n != target.len() {
            return Err(TrainError::LengthMismatch {
                left: n,
                right: target.len(),
            });
        }
        let shape = g.value(pred).shape().to_vec();
        let t = g.constant(Tensor::new(shape, target.to_vec()).expect("target shape"));
        let neg_t = g.scale(t, -1.0);
        let diff = g.add(pred, neg_t)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq);
        Ok(g.scale(total, 1.0 / n as f64))
    }

    /// Binary cross entropy of a probability in (0, 1) against a 0/1 label.
    pub fn bce(g: &mut Graph, prob: NodeId, label: u8) -> Result<NodeId, TrainError> {
        if label > 1 {
            return Err(TrainError::InvalidTarget {
                value: label as usize,
                classes: 1,
            });
        }
        let term = if label == 1 {
            g.log(prob)
        } else {
            let neg = g.scale(prob, -1.0);
            let one = g.constant(Tensor::scalar(1.0));
            let q = g.add(one, neg)?;
            g.log(q)
        };
        let total = g.sum(term);
        Ok(g.scale(total, -1.0))
    }

    /// BCE straight from the logit: softplus(z) - y*z. Same value as
    /// `bce(sigmoid(z), y)` but finite for any finite logit.
    pub fn bce_with_logit(g: &mut Graph, logit: NodeId, label: u8) -> Result<NodeId, TrainError> {
        if label > 1 {
            return Err(TrainError::InvalidTarget {
                value: label as usize,
                classes: 1,
            });
        }
        let sp = g.softplus(logit);
        let sp = g.sum(sp);
        if label == 1 {
            let neg_z = g.scale(logit, -1.0);
            let neg_z = g.sum(neg_z);
            Ok(g.add(sp, neg_z)?)
        } else {
            Ok(sp)
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, TrainError> {
    if preds.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(TrainError::LengthMismatch { left: 0, right: 0 });
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over classes `0..k`; classes absent from
/// both predictions and labels contribute 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64, TrainError> {
    if preds.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() || k == 0 {
        return Err(TrainError::LengthMismatch { left: 0, right: k });
    }
    let mut total = 0.0;
    for class in 0..k {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == class && **l == class)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == class && **l != class)
            .count() as f64;
        let fn_ = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p != class && **l == class)
            .count() as f64;
        let f1 = if tp == 0.0 && (fp > 0.0 || fn_ > 0.0 || true) {
            if 2.0 * tp + fp + fn_ == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
        total += f1;
    }
    Ok(total / k as f64)
}

/// Five-group statistics: per-group values, mean, sample std (n-1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat5 {
    pub groups: [f64; TEST_GROUPS],
    pub mean: f64,
    pub std: f64,
}

impl Stat5 {
    pub fn from_groups(groups: [f64; TEST_GROUPS]) -> Stat5 {
        let mean = groups.iter().sum::<f64>() / TEST_GROUPS as f64;
        let var = groups
            .iter()
            .map(|g| (g - mean) * (g - mean))
            .sum::<f64>()
            / (TEST_GROUPS - 1) as f64;
        Stat5 {
            groups,
            mean,
            std: var.sqrt(),
        }
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub combined: bool,
    pub dataset: DatasetId,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    /// Train fusion projections jointly with the head (default) or freeze
    /// them so only the head trains.
    pub freeze_fusion: bool,
    /// Brief masked-token pretraining for the backbone; off means a
    /// random-initialized frozen backbone.
    pub pretrain_backbone: bool,
    pub backbone_epochs: usize,
    pub adapter_epochs: usize,
    /// Add-alpha smoothing for association counts.
    pub alpha: f64,
    /// Which split feeds the association counts.
    pub association_split: Split,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::N,
            combined: false,
            dataset: DatasetId::Pep3k,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 7,
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            freeze_fusion: false,
            pretrain_backbone: true,
            backbone_epochs: 5,
            adapter_epochs: 5,
            alpha: 1.0,
            association_split: Split::Train,
        }
    }
}

/// Stable hash of the canonical JSON form of a config.
pub fn fingerprint(config: &ExperimentConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{:02x}", b)).collect()
}

// ---------------------------------------------------------------------------
// Batch machinery
// ---------------------------------------------------------------------------

/// Run `f` over every example in parallel and average losses and gradients
/// in example order (deterministic reduction).
pub(crate) fn batch_grads<E, F>(
    examples: &[&E],
    f: F,
) -> Result<(f64, BTreeMap<String, Vec<f64>>), TrainError>
where
    E: Sync,
    F: Fn(&E) -> Result<(f64, Vec<(String, Vec<f64>)>), TrainError> + Sync,
{
    let results: Vec<Result<(f64, Vec<(String, Vec<f64>)>), TrainError>> =
        examples.par_iter().map(|e| f(e)).collect();
    let scale = 1.0 / examples.len() as f64;
    let mut loss = 0.0;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for result in results {
        let (l, gs) = result?;
        loss += l * scale;
        for (name, g) in gs {
            let acc = grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v * scale;
            }
        }
    }
    Ok((loss, grads))
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

// ---------------------------------------------------------------------------
// Tasks and adapter pretraining
// ---------------------------------------------------------------------------

pub const PROPERTY_CLASSES: usize = 5;
pub const SV_TASK: &str = "verb_subject_score";
pub const OV_TASK: &str = "verb_object_score";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Property(Category),
    Association(Relation),
}

impl Task {
    pub fn name(&self) -> String {
        match self {
            Task::Property(c) => c.as_str().to_string(),
            Task::Association(Relation::Subject) => SV_TASK.to_string(),
            Task::Association(Relation::Object) => OV_TASK.to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        if let Some(c) = Category::parse(s) {
            return Some(Task::Property(c));
        }
        match s {
            SV_TASK => Some(Task::Association(Relation::Subject)),
            OV_TASK => Some(Task::Association(Relation::Object)),
            _ => None,
        }
    }

    /// The ten property tasks followed by the two association tasks.
    pub fn all() -> Vec<Task> {
        let mut out: Vec<Task> = CATEGORIES.iter().map(|&c| Task::Property(c)).collect();
        out.push(Task::Association(Relation::Subject));
        out.push(Task::Association(Relation::Object));
        out
    }

    pub fn for_mode(mode: Mode) -> Vec<Task> {
        match mode {
            Mode::N => vec![],
            Mode::P => CATEGORIES.iter().map(|&c| Task::Property(c)).collect(),
            Mode::PV => Task::all(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Pretraining metrics for one task, in the report layout of the
/// pretraining performance table: accuracy/F1 for property tasks, MSE for
/// association tasks, each over the five held-out partitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub accuracy: Option<Stat5>,
    pub macro_f1: Option<Stat5>,
    pub mse: Option<Stat5>,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

enum TaskExample {
    Classify { ids: Vec<usize>, label: usize },
    Regress { ids: Vec<usize>, target: f64 },
}

/// Pretrain one task adapter over the frozen backbone for 5 epochs with a
/// task head, evaluate on a held-out fifth, then discard the head and keep
/// the adapter representations.
pub fn pretrain_adapter(
    task: &Task,
    properties: &[PropertyRecord],
    association: &[AssociationRecord],
    vocab: &Vocabulary,
    encoder: &EncoderState,
    config: &ExperimentConfig,
) -> Result<(AdapterStack, TaskReport), TrainError> {
    if !encoder.frozen() {
        return Err(TrainError::BackboneNotFrozen);
    }
    let max_len = encoder.config.max_seq_len;
    let examples: Vec<TaskExample> = match task {
        Task::Property(category) => properties
            .iter()
            .filter(|r| r.category == *category)
            .map(|r| {
                Ok(TaskExample::Classify {
                    ids: crate::backbone::tokenize_item(&r.item, vocab, max_len)?,
                    label: r.label as usize,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?,
        Task::Association(relation) => association
            .iter()
            .filter(|r| r.relation == *relation)
            .map(|r| {
                Ok(TaskExample::Regress {
                    ids: crate::backbone::tokenize_pair(
                        &r.verb,
                        &r.noun,
                        *relation == Relation::Subject,
                        vocab,
                        max_len,
                    )?,
                    target: r.score,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?,
    };
    if examples.is_empty() {
        return Err(TrainError::EmptyTaskData(task.name()));
    }

    let task_seed = derive_seed(config.seed, &format!("adapter:{}", task.name()));
    let order = shuffled_indices(examples.len(), task_seed);
    let eval_n = (examples.len() / 5).max(TEST_GROUPS.min(examples.len() / 2));
    let (eval_idx, train_idx) = order.split_at(eval_n);

    let d = encoder.config.d_model;
    let mut stack = AdapterStack::init(
        &task.name(),
        encoder.config.n_layers,
        d,
        &config.adapter,
        derive_seed(task_seed, "init"),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task_seed, "head"));
    let is_classify = matches!(task, Task::Property(_));
    let head_cols = if is_classify { PROPERTY_CLASSES } else { 1 };
    let mut head_w = crate::backbone::gaussian_tensor(&mut rng, &[d, head_cols], 0.02);
    let mut head_b = Tensor::zeros(&[head_cols]);

    let mut adam = AdamState::new(config.learning_rate);
    let mut first_epoch_loss = f64::NAN;
    let mut last_epoch_loss = f64::NAN;

    let forward_loss = |stack: &AdapterStack,
                        head_w: &Tensor,
                        head_b: &Tensor,
                        example: &TaskExample,
                        train: bool|
     -> Result<(f64, Vec<(String, Vec<f64>)>), TrainError> {
        let mut g = Graph::new();
        let enc = encoder.bind(&mut g, false);
        let adapter = stack
            .bind(&mut g, train)
            .with_after_attention(config.adapter.after_attention);
        let (w, b) = if train {
            (
                g.leaf(head_w.clone().with_grad()),
                g.leaf(head_b.clone().with_grad()),
            )
        } else {
            (g.leaf(head_w.clone()), g.leaf(head_b.clone()))
        };
        let ids = match example {
            TaskExample::Classify { ids, .. } | TaskExample::Regress { ids, .. } => ids,
        };
        let pooled = encode_graph(
            &mut g,
            &enc,
            &encoder.config,
            ids,
            &Augment::Adapter(&adapter),
        )?;
        let row = g.reshape(pooled, &[1, d])?;
        let logits = g.matmul(row, w)?;
        let logits = g.add(logits, b)?;
        let loss = match example {
            TaskExample::Classify { label, .. } => {
                losses::cross_entropy(&mut g, logits, *label, PROPERTY_CLASSES)?
            }
            TaskExample::Regress { target, .. } => losses::mse(&mut g, logits, &[*target])?,
        };
        let value = g.value(loss).scalar_value();
        if !train {
            return Ok((value, vec![]));
        }
        g.backward(loss)?;
        let mut grads = adapter.grads(&g);
        grads.push(("head.w".into(), g.grad(w).unwrap_or(&[]).to_vec()));
        grads.push(("head.b".into(), g.grad(b).unwrap_or(&[]).to_vec()));
        Ok((value, grads))
    };

    for epoch in 0..config.adapter_epochs {
        let epoch_order = shuffled_indices(
            train_idx.len(),
            derive_seed(task_seed, &format!("epoch{}", epoch)),
        );
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in epoch_order.chunks(config.batch_size) {
            let batch: Vec<&TaskExample> =
                chunk.iter().map(|&i| &examples[train_idx[i]]).collect();
            let (loss, grads) =
                batch_grads(&batch, |ex| forward_loss(&stack, &head_w, &head_b, ex, true))?;
            let mut params: Vec<(String, &mut Tensor)> = stack.params_mut();
            params.push(("head.w".into(), &mut head_w));
            params.push(("head.b".into(), &mut head_b));
            adam_step(&mut params, &grads, &mut adam)?;
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        if epoch == 0 {
            first_epoch_loss = mean;
        }
        last_epoch_loss = mean;
    }
    stack.trained = true;

    // held-out evaluation over five partitions, then the head is dropped
    let partition = partition_test(eval_idx.len(), derive_seed(task_seed, "partition"))?;
    let predictions: Vec<(usize, f64, usize, f64)> = eval_idx
        .par_iter()
        .map(|&i| -> Result<(usize, f64, usize, f64), TrainError> {
            let example = &examples[i];
            let mut g = Graph::new();
            let enc = encoder.bind(&mut g, false);
            let adapter = stack
                .bind(&mut g, false)
                .with_after_attention(config.adapter.after_attention);
            let w = g.leaf(head_w.clone());
            let b = g.leaf(head_b.clone());
            let ids = match example {
                TaskExample::Classify { ids, .. } | TaskExample::Regress { ids, .. } => ids,
            };
            let pooled = encode_graph(
                &mut g,
                &enc,
                &encoder.config,
                ids,
                &Augment::Adapter(&adapter),
            )?;
            let row = g.reshape(pooled, &[1, d])?;
            let logits = g.matmul(row, w)?;
            let logits = g.add(logits, b)?;
            let out = g.value(logits).data().to_vec();
            match example {
                TaskExample::Classify { label, .. } => {
                    let pred = out
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                        .map(|(i, _)| i + 1)
                        .unwrap_or(1);
                    Ok((pred, 0.0, *label, 0.0))
                }
                TaskExample::Regress { target, .. } => Ok((0, out[0], 0, *target)),
            }
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    let groups = partition.groups();
    let report = if is_classify {
        let mut acc = [0.0; TEST_GROUPS];
        let mut f1 = [0.0; TEST_GROUPS];
        for (gi, group) in groups.iter().enumerate() {
            let preds: Vec<usize> = group.iter().map(|&i| predictions[i].0 - 1).collect();
            let labels: Vec<usize> = group.iter().map(|&i| predictions[i].2 - 1).collect();
            acc[gi] = accuracy(&preds, &labels)?;
            f1[gi] = macro_f1(&preds, &labels, PROPERTY_CLASSES)?;
        }
        TaskReport {
            task: task.name(),
            accuracy: Some(Stat5::from_groups(acc)),
            macro_f1: Some(Stat5::from_groups(f1)),
            mse: None,
            first_epoch_loss,
            last_epoch_loss,
        }
    } else {
        let mut mse = [0.0; TEST_GROUPS];
        for (gi, group) in groups.iter().enumerate() {
            let total: f64 = group
                .iter()
                .map(|&i| {
                    let (_, pred, _, target) = predictions[i];
                    (pred - target) * (pred - target)
                })
                .sum();
            mse[gi] = total / group.len().max(1) as f64;
        }
        TaskReport {
            task: task.name(),
            accuracy: None,
            macro_f1: None,
            mse: Some(Stat5::from_groups(mse)),
            first_epoch_loss,
            last_epoch_loss,
        }
    };
    Ok((stack, report))
}

// ---------------------------------------------------------------------------
// Plausibility fine-tuning
// ---------------------------------------------------------------------------

/// Single-layer MLP head (one affine map to a logit) plus the optional
/// fusion layer, depending on mode.
#[derive(Debug, Clone)]
pub struct PlausibilityModel {
    pub mode: Mode,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub fusion: Option<FusionLayer>,
}

impl PlausibilityModel {
    pub fn head_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.w".to_string(), &self.head_w),
            ("head.b".to_string(), &self.head_b),
        ]
    }
}

/// Per-epoch loss monitoring; the validation split is observed, never used
/// for selection.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

/// Evaluation over five disjoint test partitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetId,
    pub mode: Mode,
    pub combined: bool,
    pub accuracy: Stat5,
    pub macro_f1: Stat5,
    pub fingerprint: String,
}

fn expected_tasks(mode: Mode) -> Vec<String> {
    Task::for_mode(mode).iter().map(|t| t.name()).collect()
}

fn validate_mode_adapters(mode: Mode, adapters: &[AdapterStack]) -> Result<(), TrainError> {
    let mut expected = expected_tasks(mode);
    let mut got: Vec<String> = adapters.iter().map(|a| a.task.clone()).collect();
    expected.sort();
    got.sort();
    if expected != got {
        return Err(TrainError::ModeAdapterMismatch {
            mode,
            expected: expected.join(","),
            got: got.join(","),
        });
    }
    Ok(())
}

fn predict_probability(
    vocab: &Vocabulary,
    encoder: &EncoderState,
    model: &PlausibilityModel,
    after_attention: bool,
    record: &PlausibilityRecord,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let enc = encoder.bind(&mut g, false);
    let fusion_nodes = model
        .fusion
        .as_ref()
        .map(|f| f.bind(&mut g, false).with_after_attention(after_attention));
    let augment = match &fusion_nodes {
        Some(nodes) => Augment::Fusion(nodes),
        None => Augment::None,
    };
    let ids = crate::backbone::tokenize(
        &record.subject,
        &record.verb,
        &record.object,
        vocab,
        encoder.config.max_seq_len,
    )?;
    let d = encoder.config.d_model;
    let w = g.leaf(model.head_w.clone());
    let b = g.leaf(model.head_b.clone());
    let pooled = encode_graph(&mut g, &enc, &encoder.config, &ids, &augment)?;
    let row = g.reshape(pooled, &[1, d])?;
    let logit = g.matmul(row, w)?;
    let logit = g.add(logit, b)?;
    let prob = g.sigmoid(logit);
    Ok(g.value(prob).scalar_value())
}

/// Evaluate a trained model on one dataset's test split using the
/// five-partition protocol.
pub fn evaluate_plausibility(
    vocab: &Vocabulary,
    encoder: &EncoderState,
    model: &PlausibilityModel,
    after_attention: bool,
    records: &[PlausibilityRecord],
    dataset: DatasetId,
    combined: bool,
    seed: u64,
    config_fingerprint: &str,
) -> Result<EvalReport, TrainError> {
    let test: Vec<&PlausibilityRecord> = records
        .iter()
        .filter(|r| r.dataset == dataset && r.split == Split::Test)
        .collect();
    if test.is_empty() {
        return Err(TrainError::NoTestRecords(dataset));
    }
    let partition = partition_test(test.len(), seed)?;
    let probs: Vec<f64> = test
        .par_iter()
        .map(|r| predict_probability(vocab, encoder, model, after_attention, r))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let groups = partition.groups();
    let mut acc = [0.0; TEST_GROUPS];
    let mut f1 = [0.0; TEST_GROUPS];
    for (gi, group) in groups.iter().enumerate() {
        let preds: Vec<usize> = group
            .iter()
            .map(|&i| (probs[i] >= 0.5) as usize)
            .collect();
        let labels: Vec<usize> = group.iter().map(|&i| test[i].label as usize).collect();
        acc[gi] = accuracy(&preds, &labels)?;
        f1[gi] = macro_f1(&preds, &labels, 2)?;
    }
    Ok(EvalReport {
        dataset,
        mode: model.mode,
        combined,
        accuracy: Stat5::from_groups(acc),
        macro_f1: Stat5::from_groups(f1),
        fingerprint: config_fingerprint.to_string(),
    })
}

/// Train the plausibility head (and fusion projections unless frozen) with
/// BCE on the train split, then evaluate per dataset on the five test
/// partitions. `combined` trains on the union of both datasets' train
/// splits and reports one EvalReport per dataset present.
pub fn train_plausibility(
    config: &ExperimentConfig,
    vocab: &Vocabulary,
    encoder: &EncoderState,
    adapters: Vec<AdapterStack>,
    records: &[PlausibilityRecord],
) -> Result<(PlausibilityModel, Vec<EvalReport>, TrainLog), TrainError> {
    validate_mode_adapters(config.mode, &adapters)?;
    if !encoder.frozen() {
        return Err(TrainError::BackboneNotFrozen);
    }
    let in_scope = |r: &&PlausibilityRecord| config.combined || r.dataset == config.dataset;
    let train: Vec<&PlausibilityRecord> = records
        .iter()
        .filter(in_scope)
        .filter(|r| r.split == Split::Train)
        .collect();
    if train.is_empty() {
        return Err(TrainError::NoTrainRecords);
    }
    let valid: Vec<&PlausibilityRecord> = records
        .iter()
        .filter(in_scope)
        .filter(|r| r.split == Split::Valid)
        .collect();

    let d = encoder.config.d_model;
    let fusion = if config.mode == Mode::N {
        None
    } else {
        Some(FusionLayer::init(
            adapters,
            encoder.config.n_layers,
            d,
            derive_seed(config.seed, "fusion"),
        )?)
    };
    let mut model = PlausibilityModel {
        mode: config.mode,
        head_w: Tensor::zeros(&[d, 1]),
        head_b: Tensor::zeros(&[1]),
        fusion,
    };

    let fp = fingerprint(config);
    let train_fusion = !config.freeze_fusion;
    let after_attention = config.adapter.after_attention;

    let forward = |model: &PlausibilityModel,
                   record: &PlausibilityRecord,
                   with_grads: bool|
     -> Result<(f64, Vec<(String, Vec<f64>)>), TrainError> {
        let mut g = Graph::new();
        let enc = encoder.bind(&mut g, false);
        let fusion_nodes = model
            .fusion
            .as_ref()
            .map(|f| {
                f.bind(&mut g, with_grads && train_fusion)
                    .with_after_attention(after_attention)
            });
        let augment = match &fusion_nodes {
            Some(nodes) => Augment::Fusion(nodes),
            None => Augment::None,
        };
        let ids = crate::backbone::tokenize(
            &record.subject,
            &record.verb,
            &record.object,
            vocab,
            encoder.config.max_seq_len,
        )?;
        let (w, b) = if with_grads {
            (
                g.leaf(model.head_w.clone().with_grad()),
                g.leaf(model.head_b.clone().with_grad()),
            )
        } else {
            (g.leaf(model.head_w.clone()), g.leaf(model.head_b.clone()))
        };
        let pooled = encode_graph(&mut g, &enc, &encoder.config, &ids, &augment)?;
        let row = g.reshape(pooled, &[1, d])?;
        let logit = g.matmul(row, w)?;
        let logit = g.add(logit, b)?;
        let loss = losses::bce_with_logit(&mut g, logit, record.label)?;
        let value = g.value(loss).scalar_value();
        if !with_grads {
            return Ok((value, vec![]));
        }
        g.backward(loss)?;
        let mut grads = vec![
            ("head.w".to_string(), g.grad(w).unwrap_or(&[]).to_vec()),
            ("head.b".to_string(), g.grad(b).unwrap_or(&[]).to_vec()),
        ];
        if let Some(nodes) = &fusion_nodes {
            grads.extend(nodes.grads(&g));
        }
        Ok((value, grads))
    };

    let mut adam = AdamState::new(config.learning_rate);
    let mut log = TrainLog::default();
    let base = derive_seed(config.seed, "plausibility");
    for epoch in 0..config.epochs {
        let order = shuffled_indices(train.len(), derive_seed(base, &format!("epoch{}", epoch)));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PlausibilityRecord> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads) = batch_grads(&batch, |r| forward(&model, r, true))?;
            {
                let mut params: Vec<(String, &mut Tensor)> = vec![
                    ("head.w".to_string(), &mut model.head_w),
                    ("head.b".to_string(), &mut model.head_b),
                ];
                if train_fusion {
                    if let Some(f) = model.fusion.as_mut() {
                        params.extend(f.params_mut());
                    }
                }
                adam_step(&mut params, &grads, &mut adam)?;
            }
            epoch_loss += loss;
            batches += 1;
        }
        let valid_loss = if valid.is_empty() {
            None
        } else {
            let (loss, _) = batch_grads(&valid, |r| forward(&model, r, false))?;
            Some(loss)
        };
        log.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            valid_loss,
        });
    }

    let datasets: Vec<DatasetId> = if config.combined {
        let mut seen = Vec::new();
        for r in records {
            if !seen.contains(&r.dataset) {
                seen.push(r.dataset);
            }
        }
        seen
    } else {
        vec![config.dataset]
    };
    let mut reports = Vec::new();
    for dataset in datasets {
        reports.push(evaluate_plausibility(
            vocab,
            encoder,
            &model,
            after_attention,
            records,
            dataset,
            config.combined,
            config.seed,
            &fp,
        )?);
    }
    Ok((model, reports, log))
}

// ---------------------------------------------------------------------------
// Full pipeline and ablation harness
// ---------------------------------------------------------------------------

/// Everything one experiment produces.
pub struct PipelineOutcome {
    pub vocab: Vocabulary,
    pub encoder: EncoderState,
    pub task_reports: Vec<TaskReport>,
    pub model: PlausibilityModel,
    pub eval: Vec<EvalReport>,
    pub log: TrainLog,
}

/// Association records for both relations from the configured split.
pub fn association_records(
    records: &[PlausibilityRecord],
    split: Split,
    alpha: f64,
) -> Result<(Vec<AssociationRecord>, Vec<String>), TrainError> {
    let corpus: Vec<PlausibilityRecord> = records
        .iter()
        .filter(|r| r.split == split)
        .cloned()
        .collect();
    let mut all = Vec::new();
    let mut warnings = Vec::new();
    for relation in [Relation::Subject, Relation::Object] {
        let scored = crate::association::score_relation(&corpus, relation, alpha)?;
        warnings.extend(
            scored
                .zero_preference_verbs
                .iter()
                .map(|v| format!("{}:{}", relation, v)),
        );
        all.extend(scored.records);
    }
    Ok((all, warnings))
}

/// Run the whole experiment: backbone, adapter pretraining for the mode's
/// tasks, fusion + head fine-tuning, and the five-partition evaluation.
pub fn run_pipeline(
    config: &ExperimentConfig,
    properties: &[PropertyRecord],
    plausibility: &[PlausibilityRecord],
) -> Result<PipelineOutcome, TrainError> {
    let in_scope: Vec<PlausibilityRecord> = plausibility
        .iter()
        .filter(|r| config.combined || r.dataset == config.dataset)
        .cloned()
        .collect();
    let train: Vec<PlausibilityRecord> = in_scope
        .iter()
        .filter(|r| r.split == Split::Train)
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(TrainError::NoTrainRecords);
    }

    let (vocab, encoder) = if config.pretrain_backbone {
        let (vocab, encoder, _report) = crate::backbone::pretrain_backbone(
            &train,
            &config.backbone,
            config.seed,
            config.backbone_epochs,
            config.batch_size,
            config.learning_rate,
        )?;
        (vocab, encoder)
    } else {
        let vocab = Vocabulary::from_records(&train);
        let mut encoder = EncoderState::init(&config.backbone, vocab.len(), config.seed);
        encoder.freeze();
        (vocab, encoder)
    };

    let tasks = Task::for_mode(config.mode);
    let needs_association = tasks
        .iter()
        .any(|t| matches!(t, Task::Association(_)));
    let association = if needs_association {
        association_records(&in_scope, config.association_split, config.alpha)?.0
    } else {
        vec![]
    };

    let mut stacks = Vec::new();
    let mut task_reports = Vec::new();
    for task in &tasks {
        let (stack, report) =
            pretrain_adapter(task, properties, &association, &vocab, &encoder, config)?;
        stacks.push(stack);
        task_reports.push(report);
    }

    let (model, eval, log) =
        train_plausibility(config, &vocab, &encoder, stacks, &in_scope)?;
    Ok(PipelineOutcome {
        vocab,
        encoder,
        task_reports,
        model,
        eval,
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    ReductionFactor,
    DModel,
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::ReductionFactor => "reduction_factor",
            AblationAxis::DModel => "d_model",
        }
    }
}

pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: usize,
    pub outcome: Result<EvalReport, String>,
}

/// One full pipeline run per axis value with a shared seed. Failed runs
/// are marked and the sweep continues.
pub fn run_ablation(
    base: &ExperimentConfig,
    axis: AblationAxis,
    values: &[usize],
    properties: &[PropertyRecord],
    plausibility: &[PlausibilityRecord],
) -> Vec<AblationRow> {
    values
        .iter()
        .map(|&value| {
            let mut config = base.clone();
            match axis {
                AblationAxis::ReductionFactor => config.adapter.reduction_factor = value,
                AblationAxis::DModel => {
                    config.backbone.d_model = value;
                    config.backbone.ffn_dim = value * 4;
                }
            }
            let outcome = if value == 0 {
                Err("axis value must be positive".to_string())
            } else {
                run_pipeline(&config, properties, plausibility)
                    .map(|outcome| outcome.eval[0].clone())
                    .map_err(|e| e.to_string())
            };
            AblationRow {
                axis,
                value,
                outcome,
            }
        })
        .collect()
}

/// Snapshot bytes of a model's trainable parameters (head + fusion).
pub fn model_snapshot_bytes(model: &PlausibilityModel) -> Vec<u8> {
    let mut entries = model.head_params();
    if let Some(f) = &model.fusion {
        entries.extend(f.params());
    }
    snapshot::snapshot_bytes(&entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut w = Tensor::vector(vec![1.0, -2.0]);
        let mut adam = AdamState::new(1e-2);
        let grads: BTreeMap<String, Vec<f64>> =
            [("w".to_string(), vec![0.0, 0.0])].into_iter().collect();
        let mut params = vec![("w".to_string(), &mut w)];
        adam_step(&mut params, &grads, &mut adam).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let lr = 1e-4;
        let mut w = Tensor::vector(vec![0.5, 0.5]);
        let mut adam = AdamState::new(lr);
        let grads: BTreeMap<String, Vec<f64>> =
            [("w".to_string(), vec![3.0, -0.7])].into_iter().collect();
        let mut params = vec![("w".to_string(), &mut w)];
        adam_step(&mut params, &grads, &mut adam).unwrap();
        assert!((w.data()[0] - (0.5 - lr)).abs() < 1e-6 * lr.abs().max(1.0));
        assert!((w.data()[1] - (0.5 + lr)).abs() < 1e-6);
    }

    #[test]
    fn adam_ignores_gradients_for_absent_parameters() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut adam = AdamState::new(1e-2);
        let grads: BTreeMap<String, Vec<f64>> = [
            ("w".to_string(), vec![0.0]),
            ("frozen".to_string(), vec![100.0]),
        ]
        .into_iter()
        .collect();
        let mut params = vec![("w".to_string(), &mut w)];
        adam_step(&mut params, &grads, &mut adam).unwrap();
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut adam = AdamState::new(1e-2);
        let grads: BTreeMap<String, Vec<f64>> =
            [("w".to_string(), vec![f64::NAN])].into_iter().collect();
        let mut params = vec![("w".to_string(), &mut w)];
        let err = adam_step(&mut params, &grads, &mut adam).unwrap_err();
        assert!(err.to_string().contains("'w'"));
    }

    #[test]
    fn adam_zero_learning_rate_changes_nothing() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut adam = AdamState::new(0.0);
        let grads: BTreeMap<String, Vec<f64>> =
            [("w".to_string(), vec![5.0, -3.0])].into_iter().collect();
        let mut params = vec![("w".to_string(), &mut w)];
        adam_step(&mut params, &grads, &mut adam).unwrap();
        assert_eq!(w.data(), &[1.0, 2.0]);
    }

    #[test]
    fn loss_reference_values() {
        // uniform logits over 5 classes -> ln 5
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::vector(vec![0.3; 5]).with_grad());
        let loss = losses::cross_entropy(&mut g, logits, 3, 5).unwrap();
        assert!((g.value(loss).scalar_value() - 5.0f64.ln()).abs() < 1e-12);

        // mse(x, x) = 0
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = losses::mse(&mut g, x, &[1.0, 2.0]).unwrap();
        assert_eq!(g.value(loss).scalar_value(), 0.0);

        // bce(0.5, 1) = ln 2
        let mut g = Graph::new();
        let p = g.leaf(Tensor::scalar(0.5));
        let loss = losses::bce(&mut g, p, 1).unwrap();
        assert!((g.value(loss).scalar_value() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::vector(vec![0.0; 5]));
        assert!(matches!(
            losses::cross_entropy(&mut g, logits, 6, 5),
            Err(TrainError::InvalidTarget { .. })
        ));
        assert!(matches!(
            losses::cross_entropy(&mut g, logits, 0, 5),
            Err(TrainError::InvalidTarget { .. })
        ));
    }

    #[test]
    fn bce_with_logit_matches_bce_of_sigmoid() {
        for &(z, y) in &[(0.7, 1u8), (-1.3, 0u8), (2.5, 0u8), (-0.2, 1u8)] {
            let mut g = Graph::new();
            let logit = g.leaf(Tensor::scalar(z));
            let l1 = losses::bce_with_logit(&mut g, logit, y).unwrap();
            let p = g.sigmoid(logit);
            let l2 = losses::bce(&mut g, p, y).unwrap();
            let a = g.value(l1).scalar_value();
            let b = g.value(l2).scalar_value();
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn metrics_reference_values() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(macro_f1(&[1, 0, 1], &[1, 0, 1], 2).unwrap(), 1.0);
        assert_eq!(accuracy(&[0], &[0]).unwrap(), 1.0);

        // all-ones predictions on half-one labels: F1 = (0 + 2/3) / 2
        let preds = vec![1usize; 6];
        let labels = vec![1, 1, 1, 0, 0, 0];
        assert_eq!(accuracy(&preds, &labels).unwrap(), 0.5);
        let f1 = macro_f1(&preds, &labels, 2).unwrap();
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);

        assert!(matches!(
            accuracy(&[1], &[1, 0]),
            Err(TrainError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn stat5_mean_and_sample_std() {
        let s = Stat5::from_groups([1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.mean, 3.0);
        // sample variance of 1..5 is 2.5
        assert!((s.std - 2.5f64.sqrt()).abs() < 1e-12);
        // recomputing from stored groups reproduces mean/std exactly
        let again = Stat5::from_groups(s.groups);
        assert_eq!(again.mean, s.mean);
        assert_eq!(again.std, s.std);
    }

    #[test]
    fn fingerprint_is_stable_and_config_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        b.seed = 8;
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn task_roster() {
        let all = Task::all();
        assert_eq!(all.len(), 12);
        assert_eq!(Task::for_mode(Mode::N).len(), 0);
        assert_eq!(Task::for_mode(Mode::P).len(), 10);
        assert_eq!(Task::for_mode(Mode::PV).len(), 12);
        assert_eq!(Task::parse("size"), Some(Task::Property(Category::Size)));
        assert_eq!(
            Task::parse(SV_TASK),
            Some(Task::Association(Relation::Subject))
        );
        assert_eq!(Task::parse("nope"), None);
    }

    #[test]
    fn mode_adapter_mismatch_is_rejected_before_training() {
        let config = ExperimentConfig {
            mode: Mode::P,
            ..Default::default()
        };
        let vocab = Vocabulary::build(["a", "b"]);
        let mut encoder = EncoderState::init(
            &BackboneConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                ffn_dim: 16,
                max_seq_len: 8,
                dropout: 0.0,
            },
            vocab.len(),
            1,
        );
        encoder.freeze();
        let records = vec![PlausibilityRecord {
            subject: "a".into(),
            verb: "b".into(),
            object: "a".into(),
            label: 1,
            split: Split::Train,
            dataset: DatasetId::Pep3k,
        }];
        let err = train_plausibility(&config, &vocab, &encoder, vec![], &records).unwrap_err();
        assert!(matches!(err, TrainError::ModeAdapterMismatch { .. }));
    }
}
