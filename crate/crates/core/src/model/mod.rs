//! The group-aware embedding network: a shared feed-forward trunk feeding
//! an instance head, one head per latent group, and a small decision
//! network that scores group membership from the instance representation.
//! The per-group representations are ensembled (probability-weighted or
//! winner-take-all), fused with the instance representation, and classified
//! against unit-normalized identity weights, so logits are cosines.

mod checkpoint;
mod ensemble;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use ensemble::{fuse, hard_ensemble, identity_logits, soft_ensemble};
pub use layers::{BatchNorm, Linear, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Graph, Tensor, TensorRef};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ensemble {
    /// Probability-weighted sum of group representations.
    Soft,
    /// Representation of the argmax group only.
    Hard,
}

impl Ensemble {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Ensemble::Soft),
            "hard" => Ok(Ensemble::Hard),
            other => Err(Error::Config(format!("unknown ensemble_mode '{}', expected soft|hard", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ensemble::Soft => "soft",
            Ensemble::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Element-wise sum; the classifier sees `embed_dim` columns.
    Aggregate,
    /// Side-by-side columns; the classifier sees `2*embed_dim`.
    Concatenate,
}

impl Fusion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aggregate" => Ok(Fusion::Aggregate),
            "concatenate" => Ok(Fusion::Concatenate),
            other => Err(Error::Config(format!(
                "unknown fusion_mode '{}', expected aggregate|concatenate",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Aggregate => "aggregate",
            Fusion::Concatenate => "concatenate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the trunk's FC-BN-ReLU blocks; may be empty.
    pub backbone_layers: Vec<usize>,
    pub shared_dim: usize,
    pub embed_dim: usize,
    pub num_groups: usize,
    pub num_identities: usize,
    pub decision_hidden_dim: usize,
    pub ensemble_mode: Ensemble,
    pub fusion_mode: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            backbone_layers: vec![64],
            shared_dim: 64,
            embed_dim: 32,
            num_groups: 4,
            num_identities: 32,
            decision_hidden_dim: 32,
            ensemble_mode: Ensemble::Soft,
            fusion_mode: Fusion::Aggregate,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("shared_dim", self.shared_dim),
            ("embed_dim", self.embed_dim),
            ("decision_hidden_dim", self.decision_hidden_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if self.backbone_layers.iter().any(|&w| w == 0) {
            return Err(Error::Config("backbone layer widths must be positive".into()));
        }
        if self.num_groups < 2 {
            return Err(Error::Config(format!("num_groups must be at least 2, got {}", self.num_groups)));
        }
        if self.num_identities < 2 {
            return Err(Error::Config(format!(
                "num_identities must be at least 2, got {}",
                self.num_identities
            )));
        }
        Ok(())
    }

    /// Width of the fused representation the classifier consumes.
    pub fn classifier_input_dim(&self) -> usize {
        match self.fusion_mode {
            Fusion::Aggregate => self.embed_dim,
            Fusion::Concatenate => 2 * self.embed_dim,
        }
    }

    fn trunk_out_dim(&self) -> usize {
        *self.backbone_layers.last().unwrap_or(&self.input_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    fc: Linear,
    norm: BatchNorm,
}

/// All learnable state of the network. Parameter and normalization-layer
/// traversals follow one canonical order (trunk, shared block, instance
/// head, group heads, decision network, classifier); checkpoints and
/// optimizer state rely on it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAwareModel {
    cfg: ModelConfig,
    backbone: Vec<Block>,
    shared_norm: BatchNorm,
    shared_fc: Linear,
    instance_head: Linear,
    group_heads: Vec<Linear>,
    decision_norm1: BatchNorm,
    decision_fc1: Linear,
    decision_norm2: BatchNorm,
    decision_fc2: Linear,
    decision_out: Linear,
    /// One row per identity, used row-normalized.
    classifier: Tensor,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub shared: TensorRef,
    /// Instance representation, `[n x embed_dim]`.
    pub instance_rep: TensorRef,
    /// One `[n x embed_dim]` representation per group.
    pub group_reps: Vec<TensorRef>,
    /// Pre-softmax group scores, `[n x k]`.
    pub group_logits: TensorRef,
    /// Softmax group membership probabilities, rows sum to one.
    pub group_probs: TensorRef,
    /// Deepest hidden activation of the decision network, `[n x hidden]`;
    /// doubles as a group-descriptive feature at evaluation time.
    pub decision_feature: TensorRef,
    /// Ensembled group representation, `[n x embed_dim]`.
    pub group_ensemble: TensorRef,
    /// Fused representation fed to the classifier.
    pub fused: TensorRef,
    /// Cosine logits against the identity weights, `[n x m]`.
    pub logits: TensorRef,
}

/// A training-mode forward pass: outputs, the parameter handles that were
/// inserted (canonical order, aligned with [`GroupAwareModel::params`]),
/// and per-layer batch statistics in normalization-layer order.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub outputs: ForwardOutputs,
    pub param_refs: Vec<TensorRef>,
    pub bn_stats: Vec<BatchStats>,
}

struct Cursor<'a> {
    refs: &'a [TensorRef],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self) -> Result<TensorRef> {
        let r = self
            .refs
            .get(self.at)
            .copied()
            .ok_or_else(|| Error::invalid("forward", "too few parameter handles"))?;
        self.at += 1;
        Ok(r)
    }
}

fn apply_norm(
    g: &mut Graph,
    train: bool,
    layer: &BatchNorm,
    x: TensorRef,
    gamma: TensorRef,
    beta: TensorRef,
    stats: &mut Vec<BatchStats>,
) -> Result<TensorRef> {
    if train {
        let (out, s) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
        stats.push(s);
        Ok(out)
    } else {
        g.batch_norm_eval(x, gamma, beta, &layer.running_mean, &layer.running_var, BN_EPS)
    }
}

impl GroupAwareModel {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut backbone = Vec::with_capacity(cfg.backbone_layers.len());
        let mut width = cfg.input_dim;
        for &w in &cfg.backbone_layers {
            backbone.push(Block {
                fc: Linear::new(width, w, rng),
                norm: BatchNorm::new(w),
            });
            width = w;
        }
        let cls_in = cfg.classifier_input_dim();
        let bound = 1.0 / (cls_in as f64).sqrt();
        let classifier = Tensor::new(
            vec![cfg.num_identities, cls_in],
            (0..cfg.num_identities * cls_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        )?;
        Ok(GroupAwareModel {
            backbone,
            shared_norm: BatchNorm::new(width),
            shared_fc: Linear::new(width, cfg.shared_dim, rng),
            instance_head: Linear::new(cfg.shared_dim, cfg.embed_dim, rng),
            group_heads: (0..cfg.num_groups)
                .map(|_| Linear::new(cfg.shared_dim, cfg.embed_dim, rng))
                .collect(),
            decision_norm1: BatchNorm::new(cfg.embed_dim),
            decision_fc1: Linear::new(cfg.embed_dim, cfg.decision_hidden_dim, rng),
            decision_norm2: BatchNorm::new(cfg.decision_hidden_dim),
            decision_fc2: Linear::new(cfg.decision_hidden_dim, cfg.decision_hidden_dim, rng),
            decision_out: Linear::new(cfg.decision_hidden_dim, cfg.num_groups, rng),
            classifier,
            cfg,
        })
    }

    /// All-zero parameters; the checkpoint loader overwrites them.
    pub(crate) fn skeleton(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut backbone = Vec::with_capacity(cfg.backbone_layers.len());
        let mut width = cfg.input_dim;
        for &w in &cfg.backbone_layers {
            backbone.push(Block {
                fc: Linear::zeroed(width, w),
                norm: BatchNorm::new(w),
            });
            width = w;
        }
        Ok(GroupAwareModel {
            backbone,
            shared_norm: BatchNorm::new(width),
            shared_fc: Linear::zeroed(width, cfg.shared_dim),
            instance_head: Linear::zeroed(cfg.shared_dim, cfg.embed_dim),
            group_heads: (0..cfg.num_groups)
                .map(|_| Linear::zeroed(cfg.shared_dim, cfg.embed_dim))
                .collect(),
            decision_norm1: BatchNorm::new(cfg.embed_dim),
            decision_fc1: Linear::zeroed(cfg.embed_dim, cfg.decision_hidden_dim),
            decision_norm2: BatchNorm::new(cfg.decision_hidden_dim),
            decision_fc2: Linear::zeroed(cfg.decision_hidden_dim, cfg.decision_hidden_dim),
            decision_out: Linear::zeroed(cfg.decision_hidden_dim, cfg.num_groups),
            classifier: Tensor::zeros(vec![cfg.num_identities, cfg.classifier_input_dim()]),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Learnable tensors in canonical order. Keep in lockstep with
    /// [`GroupAwareModel::params_mut`] and the cursor walk in
    /// [`GroupAwareModel::forward_with_params`]; a unit test pins the two
    /// views to identical addresses.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for b in &self.backbone {
            v.extend([&b.fc.weight, &b.fc.bias, &b.norm.gamma, &b.norm.beta]);
        }
        v.extend([
            &self.shared_norm.gamma,
            &self.shared_norm.beta,
            &self.shared_fc.weight,
            &self.shared_fc.bias,
        ]);
        v.extend([&self.instance_head.weight, &self.instance_head.bias]);
        for h in &self.group_heads {
            v.extend([&h.weight, &h.bias]);
        }
        v.extend([
            &self.decision_norm1.gamma,
            &self.decision_norm1.beta,
            &self.decision_fc1.weight,
            &self.decision_fc1.bias,
            &self.decision_norm2.gamma,
            &self.decision_norm2.beta,
            &self.decision_fc2.weight,
            &self.decision_fc2.bias,
            &self.decision_out.weight,
            &self.decision_out.bias,
        ]);
        v.push(&self.classifier);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.backbone {
            v.extend([&mut b.fc.weight, &mut b.fc.bias, &mut b.norm.gamma, &mut b.norm.beta]);
        }
        v.extend([
            &mut self.shared_norm.gamma,
            &mut self.shared_norm.beta,
            &mut self.shared_fc.weight,
            &mut self.shared_fc.bias,
        ]);
        v.extend([&mut self.instance_head.weight, &mut self.instance_head.bias]);
        for h in &mut self.group_heads {
            v.extend([&mut h.weight, &mut h.bias]);
        }
        v.extend([
            &mut self.decision_norm1.gamma,
            &mut self.decision_norm1.beta,
            &mut self.decision_fc1.weight,
            &mut self.decision_fc1.bias,
            &mut self.decision_norm2.gamma,
            &mut self.decision_norm2.beta,
            &mut self.decision_fc2.weight,
            &mut self.decision_fc2.bias,
            &mut self.decision_out.weight,
            &mut self.decision_out.bias,
        ]);
        v.push(&mut self.classifier);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Positions of the group-head tensors within the canonical parameter
    /// order, e.g. for optimizer freezing.
    pub fn group_head_param_indices(&self) -> std::ops::Range<usize> {
        let start = 4 * self.backbone.len() + 4 + 2;
        start..start + 2 * self.group_heads.len()
    }

    /// Normalization layers in canonical order (matches the batch
    /// statistics returned by a training forward pass).
    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        let mut v: Vec<&BatchNorm> = self.backbone.iter().map(|b| &b.norm).collect();
        v.extend([&self.shared_norm, &self.decision_norm1, &self.decision_norm2]);
        v
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v: Vec<&mut BatchNorm> = self.backbone.iter_mut().map(|b| &mut b.norm).collect();
        v.extend([&mut self.shared_norm, &mut self.decision_norm1, &mut self.decision_norm2]);
        v
    }

    /// Folds one training step's batch statistics into the running
    /// estimates, layer by layer.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let mut layers = self.bn_layers_mut();
        if stats.len() != layers.len() {
            return Err(Error::invalid(
                "update_running_stats",
                format!("{} statistics for {} layers", stats.len(), layers.len()),
            ));
        }
        for (layer, s) in layers.iter_mut().zip(stats) {
            layer.absorb(s)?;
        }
        Ok(())
    }

    /// Zeroes every group head; with aggregate fusion the network then
    /// behaves exactly like its instance-only reduction.
    pub fn zero_group_heads(&mut self) {
        for h in &mut self.group_heads {
            h.weight.data_mut().fill(0.0);
            h.bias.data_mut().fill(0.0);
        }
    }

    /// Inserts every parameter into the graph as a differentiable node,
    /// canonical order.
    pub fn insert_params(&self, g: &mut Graph) -> Vec<TensorRef> {
        self.params().into_iter().map(|t| g.param(t.clone())).collect()
    }

    /// Inserts every parameter as a constant (no gradients), canonical order.
    pub fn insert_constants(&self, g: &mut Graph) -> Vec<TensorRef> {
        self.params().into_iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Forward pass over externally supplied parameter handles (canonical
    /// order). `train` selects batch-statistics normalization and returns
    /// those statistics; otherwise the stored running statistics are used
    /// and the statistics list comes back empty.
    pub fn forward_with_params(
        &self,
        g: &mut Graph,
        params: &[TensorRef],
        x: TensorRef,
        train: bool,
    ) -> Result<(ForwardOutputs, Vec<BatchStats>)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::invalid(
                "forward",
                format!("expected [n x {}] input, got {:?}", self.cfg.input_dim, shape),
            ));
        }
        if !g.value(x).all_finite() {
            return Err(Error::NonFinite { op: "forward" });
        }
        let mut cur = Cursor { refs: params, at: 0 };
        let mut stats = Vec::new();

        let mut h = x;
        for b in &self.backbone {
            let (w, bias) = (cur.take()?, cur.take()?);
            h = g.fully_connected(h, w, bias)?;
            let (gamma, beta) = (cur.take()?, cur.take()?);
            h = apply_norm(g, train, &b.norm, h, gamma, beta, &mut stats)?;
            h = g.relu(h)?;
        }

        let (gamma, beta) = (cur.take()?, cur.take()?);
        h = apply_norm(g, train, &self.shared_norm, h, gamma, beta, &mut stats)?;
        let (w, bias) = (cur.take()?, cur.take()?);
        h = g.fully_connected(h, w, bias)?;
        let shared = g.relu(h)?;

        let (w, bias) = (cur.take()?, cur.take()?);
        let instance_rep = g.fully_connected(shared, w, bias)?;

        let mut group_reps = Vec::with_capacity(self.cfg.num_groups);
        for _ in 0..self.cfg.num_groups {
            let (w, bias) = (cur.take()?, cur.take()?);
            group_reps.push(g.fully_connected(shared, w, bias)?);
        }

        // The decision network reads the instance representation, not the
        // shared feature.
        let (gamma, beta) = (cur.take()?, cur.take()?);
        let mut d = apply_norm(g, train, &self.decision_norm1, instance_rep, gamma, beta, &mut stats)?;
        let (w, bias) = (cur.take()?, cur.take()?);
        d = g.fully_connected(d, w, bias)?;
        d = g.relu(d)?;
        let (gamma, beta) = (cur.take()?, cur.take()?);
        d = apply_norm(g, train, &self.decision_norm2, d, gamma, beta, &mut stats)?;
        let (w, bias) = (cur.take()?, cur.take()?);
        d = g.fully_connected(d, w, bias)?;
        let decision_feature = g.relu(d)?;
        let (w, bias) = (cur.take()?, cur.take()?);
        let group_logits = g.fully_connected(decision_feature, w, bias)?;
        let group_probs = g.softmax(group_logits)?;

        let group_ensemble = match self.cfg.ensemble_mode {
            Ensemble::Soft => soft_ensemble(g, group_probs, &group_reps)?,
            Ensemble::Hard => hard_ensemble(g, group_probs, &group_reps)?,
        };
        let fused = fuse(g, instance_rep, group_ensemble, self.cfg.fusion_mode)?;

        let classifier = cur.take()?;
        let logits = identity_logits(g, fused, classifier)?;

        if cur.at != params.len() {
            return Err(Error::invalid(
                "forward",
                format!("{} parameter handles supplied, {} consumed", params.len(), cur.at),
            ));
        }
        Ok((
            ForwardOutputs {
                shared,
                instance_rep,
                group_reps,
                group_logits,
                group_probs,
                decision_feature,
                group_ensemble,
                fused,
                logits,
            },
            stats,
        ))
    }

    /// Training-mode forward: parameters become differentiable graph
    /// nodes, normalization uses batch statistics. Needs at least two rows.
    pub fn forward_train(&self, g: &mut Graph, x: &Tensor) -> Result<TrainForward> {
        let param_refs = self.insert_params(g);
        let xr = g.constant(x.clone());
        let (outputs, bn_stats) = self.forward_with_params(g, &param_refs, xr, true)?;
        Ok(TrainForward {
            outputs,
            param_refs,
            bn_stats,
        })
    }

    /// Evaluation-mode forward: parameters are constants, normalization
    /// uses running statistics. Works on a single row.
    pub fn forward_eval(&self, g: &mut Graph, x: &Tensor) -> Result<ForwardOutputs> {
        let refs = self.insert_constants(g);
        let xr = g.constant(x.clone());
        let (outputs, _) = self.forward_with_params(g, &refs, xr, false)?;
        Ok(outputs)
    }
}
