//! Two-phase training loop.
//!
//! Phase 1 optimizes the identity loss alone while the group expectation
//! window warms up; phase 2 adds the weighted grouping loss on
//! self-distributed labels. Each step assigns labels from the expectation
//! as it stood before the step, then folds the step's probabilities into
//! the window.
//!
//! With several workers the batch is sharded; every worker builds its own
//! graph and normalization statistics, and gradients, statistics, and
//! expectation windows are reduced in worker order so a run is
//! deterministic for a fixed worker count.

use crate::error::{Error, Result};
use crate::grouping::{self, GroupState};
use crate::metrics::label_distribution_stats;
use crate::model::{save_checkpoint, GroupAwareModel};
use crate::numerics::{BatchStats, Graph, Tensor};
use crate::objectives::{combined_loss, margin_softmax_loss, self_grouping_loss, LossConfig};
use crate::pipeline::data::Dataset;
use crate::pipeline::sgd::{Schedule, Sgd};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// How batch group labels are chosen during phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    /// Argmax of expectation-normalized probabilities.
    SelfDistributed,
    /// Argmax of raw probabilities.
    Naive,
}

impl Labeling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self_distributed" => Ok(Labeling::SelfDistributed),
            "naive" => Ok(Labeling::Naive),
            other => Err(Error::Config(format!(
                "unknown labeling '{}', expected self_distributed or naive",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Labeling::SelfDistributed => "self_distributed",
            Labeling::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub batch_size: usize,
    /// Explicit learning-rate schedule; `None` uses the staged default
    /// over the whole run.
    pub schedule: Option<Schedule>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Batches retained by the group expectation window.
    pub expectation_window: usize,
    pub workers: usize,
    pub labeling: Labeling,
    /// Zeroes the group heads and excludes them from updates, reducing
    /// the network to its instance-only form.
    pub disable_group_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_steps: 300,
            phase2_steps: 2000,
            batch_size: 64,
            schedule: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            expectation_window: 64,
            workers: 1,
            labeling: Labeling::SelfDistributed,
            disable_group_heads: false,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps() == 0 {
            return Err(Error::Config("run needs at least one step".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if self.batch_size % self.workers != 0 {
            return Err(Error::Config(format!(
                "batch size {} does not divide across {} workers",
                self.batch_size, self.workers
            )));
        }
        // Training-mode normalization needs at least two rows per shard.
        if self.batch_size / self.workers < 2 {
            return Err(Error::Config(format!(
                "shards of {} rows are too small for batch statistics",
                self.batch_size / self.workers
            )));
        }
        if self.expectation_window == 0 {
            return Err(Error::Config("expectation window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(s) = &self.schedule {
            // Re-run the constructor checks in case the struct was built
            // by hand.
            Schedule::new(s.entries().to_vec())?;
        }
        Ok(())
    }
}

/// One loss-curve row; the curve has exactly one row per executed step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub phase: u8,
    pub lr: f64,
    pub loss: f64,
    pub identity_loss: f64,
    pub grouping_loss: f64,
}

/// Batch label usage at one step: histogram over groups plus its
/// divergence from uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub kl: f64,
    pub histogram: Vec<u64>,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub label_trace: PathBuf,
    pub curve: Vec<LossRow>,
    pub trace: Vec<TraceRow>,
    pub group_state: GroupState,
}

struct StepOutcome {
    grads: Vec<Vec<f64>>,
    stats: Vec<BatchStats>,
    state: GroupState,
    labels: Vec<usize>,
    loss: f64,
    identity_loss: f64,
    grouping_loss: f64,
}

fn run_shard(
    model: &GroupAwareModel,
    features: &Tensor,
    ids: &[usize],
    base_state: &GroupState,
    losses: &LossConfig,
    labeling: Labeling,
    phase2: bool,
    step: u64,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let tf = model.forward_train(&mut g, features)?;
    let probs = g.value(tf.outputs.group_probs).clone();
    let labels = match labeling {
        Labeling::SelfDistributed => {
            let e = base_state.expectation_or_uniform();
            grouping::assign_labels_with_expectation(&probs, &e)?
        }
        Labeling::Naive => grouping::assign_labels_naive(&probs)?,
    };
    let mut state = base_state.clone();
    state.update(&probs)?;

    let l1 = margin_softmax_loss(&mut g, tf.outputs.logits, ids, losses)?;
    let l2 = self_grouping_loss(&mut g, tf.outputs.group_logits, &labels)?;
    let loss = if phase2 { combined_loss(&mut g, l1, l2, losses.lambda)? } else { l1 };

    let loss_v = g.value(loss).scalar_value()?;
    let l1_v = g.value(l1).scalar_value()?;
    let l2_v = g.value(l2).scalar_value()?;
    if !loss_v.is_finite() {
        return Err(Error::Training {
            step,
            msg: format!("loss became non-finite ({})", loss_v),
        });
    }
    g.backward(loss)?;
    let grads = tf
        .param_refs
        .iter()
        .map(|&r| {
            g.grad(r)
                .map(|s| s.to_vec())
                .ok_or_else(|| Error::invalid("train", "parameter missing its gradient"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StepOutcome {
        grads,
        stats: tf.bn_stats,
        state,
        labels,
        loss: loss_v,
        identity_loss: l1_v,
        grouping_loss: l2_v,
    })
}

/// Mean of per-worker values, reduced in worker order.
fn mean_in_order(values: impl Iterator<Item = f64>, count: usize) -> f64 {
    values.sum::<f64>() / count as f64
}

fn reduce_grads(outcomes: &[StepOutcome]) -> Vec<Vec<f64>> {
    let w = outcomes.len() as f64;
    let mut acc = outcomes[0].grads.clone();
    for o in &outcomes[1..] {
        for (a, g) in acc.iter_mut().zip(&o.grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= w;
        }
    }
    acc
}

fn reduce_stats(outcomes: &[StepOutcome]) -> Vec<BatchStats> {
    let w = outcomes.len() as f64;
    let mut acc = outcomes[0].stats.clone();
    for o in &outcomes[1..] {
        for (a, s) in acc.iter_mut().zip(&o.stats) {
            for (x, y) in a.mean.iter_mut().zip(&s.mean) {
                *x += y;
            }
            for (x, y) in a.var.iter_mut().zip(&s.var) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        a.mean.iter_mut().for_each(|x| *x /= w);
        a.var.iter_mut().for_each(|x| *x /= w);
    }
    acc
}

/// Trains `model` in place and writes the run's artifacts (checkpoint,
/// loss curve, label trace) into `out_dir`.
pub fn train(
    model: &mut GroupAwareModel,
    data: &Dataset,
    losses: &LossConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    losses.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    if data.dim() != model.config().input_dim {
        return Err(Error::invalid(
            "train",
            format!("data width {} but model expects {}", data.dim(), model.config().input_dim),
        ));
    }
    if cfg.batch_size > data.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} available samples",
            cfg.batch_size,
            data.len()
        )));
    }
    let num_classes = model.config().num_identities;
    if let Some(&bad) = data.identities.iter().find(|&&id| id >= num_classes) {
        return Err(Error::invalid(
            "train",
            format!("identity label {} outside the classifier's {} classes", bad, num_classes),
        ));
    }

    std::fs::create_dir_all(out_dir)?;
    let total = cfg.total_steps();
    let schedule = match &cfg.schedule {
        Some(s) => s.clone(),
        None => Schedule::staged(total),
    };
    let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
    let mut opt = Sgd::new(&sizes, cfg.momentum, cfg.weight_decay)?;
    if cfg.disable_group_heads {
        model.zero_group_heads();
        opt.freeze(model.group_head_param_indices())?;
    }
    let mut state = GroupState::new(model.config().num_groups, cfg.expectation_window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut curve = Vec::with_capacity(total as usize);
    let mut trace = Vec::with_capacity(total as usize);
    let shard_rows = cfg.batch_size / cfg.workers;

    for step in 0..total {
        let phase2 = step >= cfg.phase1_steps;
        let indices = rand::seq::index::sample(&mut rng, data.len(), cfg.batch_size).into_vec();

        let mut shards = Vec::with_capacity(cfg.workers);
        for w in 0..cfg.workers {
            let part = &indices[w * shard_rows..(w + 1) * shard_rows];
            let features = data.gather_rows(part)?;
            let ids: Vec<usize> = part.iter().map(|&i| data.identities[i]).collect();
            shards.push((features, ids));
        }

        let outcomes: Vec<StepOutcome> = if cfg.workers == 1 {
            let (features, ids) = &shards[0];
            vec![run_shard(model, features, ids, &state, losses, cfg.labeling, phase2, step)?]
        } else {
            let model_ref: &GroupAwareModel = model;
            let state_ref = &state;
            let labeling = cfg.labeling;
            let results: Vec<Result<StepOutcome>> = std::thread::scope(|scope| {
                let handles: Vec<_> = shards
                    .iter()
                    .map(|(features, ids)| {
                        scope.spawn(move || {
                            run_shard(model_ref, features, ids, state_ref, losses, labeling, phase2, step)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                    .collect()
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        };

        let loss = mean_in_order(outcomes.iter().map(|o| o.loss), cfg.workers);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("loss became non-finite ({})", loss),
            });
        }
        let identity_loss = mean_in_order(outcomes.iter().map(|o| o.identity_loss), cfg.workers);
        let grouping_loss = mean_in_order(outcomes.iter().map(|o| o.grouping_loss), cfg.workers);

        let grads = reduce_grads(&outcomes);
        let lr = schedule.rate_at(step);
        opt.step(&mut model.params_mut(), &grads, lr)?;
        model.update_running_stats(&reduce_stats(&outcomes))?;

        let states: Vec<GroupState> = outcomes.iter().map(|o| o.state.clone()).collect();
        state = GroupState::merge(&states)?;

        let labels: Vec<usize> = outcomes.iter().flat_map(|o| o.labels.iter().copied()).collect();
        let (histogram, kl) = label_distribution_stats(&labels, model.config().num_groups)?;

        curve.push(LossRow {
            step,
            phase: if phase2 { 2 } else { 1 },
            lr,
            loss,
            identity_loss,
            grouping_loss,
        });
        trace.push(TraceRow { step, kl, histogram });
    }

    let loss_curve = out_dir.join("loss_curve.csv");
    write_loss_curve(&loss_curve, &curve)?;
    let label_trace = out_dir.join("label_trace.csv");
    write_label_trace(&label_trace, &trace, model.config().num_groups)?;
    let checkpoint = out_dir.join("model.ckpt");
    save_checkpoint(&checkpoint, model, &state)?;

    Ok(RunArtifacts {
        checkpoint,
        loss_curve,
        label_trace,
        curve,
        trace,
        group_state: state,
    })
}

fn write_loss_curve(path: &Path, curve: &[LossRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,phase,lr,loss,identity_loss,grouping_loss")?;
    for r in curve {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.step, r.phase, r.lr, r.loss, r.identity_loss, r.grouping_loss
        )?;
    }
    f.flush()?;
    Ok(())
}

fn write_label_trace(path: &Path, trace: &[TraceRow], num_groups: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let counts: Vec<String> = (0..num_groups).map(|k| format!("count_{}", k)).collect();
    writeln!(f, "step,kl,{}", counts.join(","))?;
    for r in trace {
        let cells: Vec<String> = r.histogram.iter().map(|c| c.to_string()).collect();
        writeln!(f, "{},{},{}", r.step, r.kl, cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Labels every sample of a dataset with the final model in inference
/// mode, using the trained expectation window when `labeling` is
/// self-distributed.
pub fn assign_dataset_labels(
    model: &GroupAwareModel,
    data: &Dataset,
    state: &GroupState,
    labeling: Labeling,
) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::invalid("assign_dataset_labels", "dataset is empty"));
    }
    let mut g = Graph::new();
    let out = model.forward_eval(&mut g, &data.features)?;
    let probs = g.value(out.group_probs);
    match labeling {
        Labeling::SelfDistributed => {
            let e = state.expectation_or_uniform();
            grouping::assign_labels_with_expectation(probs, &e)
        }
        Labeling::Naive => grouping::assign_labels_naive(probs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::data::{generate_synthetic_dataset, SyntheticDataConfig};
    use rand::rngs::StdRng;

    fn tiny_data() -> SyntheticDataConfig {
        SyntheticDataConfig {
            num_identities: 10,
            samples_per_identity: 6,
            eval_identities: 2,
            input_dim: 6,
            num_latent_groups: 2,
            within_identity_noise: 0.2,
            within_group_spread: 0.3,
            seed: 11,
        }
    }

    fn tiny_model(num_identities: usize) -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            backbone_layers: vec![8],
            shared_dim: 8,
            embed_dim: 4,
            num_groups: 3,
            num_identities,
            decision_hidden_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            phase1_steps: 4,
            phase2_steps: 8,
            batch_size: 8,
            expectation_window: 4,
            ..TrainConfig::default()
        }
    }

    fn fresh_model(seed: u64, cfg: ModelConfig) -> GroupAwareModel {
        let mut rng: StdRng = SeedableRng::seed_from_u64(seed);
        GroupAwareModel::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn training_descends_and_fills_the_artifacts() {
        // Seed 11 data, seed 3 init: loss drops within a dozen steps.
        let data = generate_synthetic_dataset(&tiny_data()).unwrap();
        let mut model = fresh_model(3, tiny_model(8));
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train();
        let run = train(&mut model, &data.train, &LossConfig::default(), &cfg, dir.path()).unwrap();

        assert_eq!(run.curve.len(), 12);
        assert_eq!(run.trace.len(), 12);
        assert!(run.curve.last().unwrap().loss < run.curve[0].loss);
        assert_eq!(run.curve[3].phase, 1);
        assert_eq!(run.curve[4].phase, 2);
        assert!(run.checkpoint.exists());
        assert!(run.loss_curve.exists());
        assert!(run.label_trace.exists());
        assert_eq!(run.group_state.batches_seen(), 12);

        let text = std::fs::read_to_string(&run.loss_curve).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.starts_with("step,phase,lr,loss"));
        let trace_text = std::fs::read_to_string(&run.label_trace).unwrap();
        assert!(trace_text.starts_with("step,kl,count_0,count_1,count_2"));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let data = generate_synthetic_dataset(&tiny_data()).unwrap();
        let cfg = tiny_train();
        let dir = tempfile::tempdir().unwrap();

        let mut m1 = fresh_model(5, tiny_model(8));
        let r1 = train(&mut m1, &data.train, &LossConfig::default(), &cfg, &dir.path().join("a")).unwrap();
        let mut m2 = fresh_model(5, tiny_model(8));
        let r2 = train(&mut m2, &data.train, &LossConfig::default(), &cfg, &dir.path().join("b")).unwrap();

        assert_eq!(m1, m2);
        assert_eq!(r1.curve, r2.curve);
        assert_eq!(r1.trace, r2.trace);
        assert_eq!(r1.group_state, r2.group_state);
        let c1 = std::fs::read(&r1.checkpoint).unwrap();
        let c2 = std::fs::read(&r2.checkpoint).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn phase_one_ignores_the_grouping_weight() {
        // A run with no phase 2 must not depend on lambda at all.
        let data = generate_synthetic_dataset(&tiny_data()).unwrap();
        let cfg = TrainConfig {
            phase1_steps: 6,
            phase2_steps: 0,
            ..tiny_train()
        };
        let dir = tempfile::tempdir().unwrap();

        let mut m1 = fresh_model(9, tiny_model(8));
        let l1 = LossConfig {
            lambda: 0.7,
            ..LossConfig::default()
        };
        let r1 = train(&mut m1, &data.train, &l1, &cfg, &dir.path().join("a")).unwrap();

        let mut m2 = fresh_model(9, tiny_model(8));
        let l2 = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let r2 = train(&mut m2, &data.train, &l2, &cfg, &dir.path().join("b")).unwrap();

        assert_eq!(m1, m2);
        assert_eq!(r1.curve, r2.curve);
        // The window still warmed up during phase 1.
        assert_eq!(r1.group_state.batches_seen(), 6);
        assert!(!r1.group_state.is_empty());
    }

    #[test]
    fn disabled_group_heads_stay_zero_through_training() {
        let data = generate_synthetic_dataset(&tiny_data()).unwrap();
        let cfg = TrainConfig {
            disable_group_heads: true,
            ..tiny_train()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut model = fresh_model(13, tiny_model(8));
        train(&mut model, &data.train, &LossConfig::default(), &cfg, dir.path()).unwrap();

        let params = model.params();
        for i in model.group_head_param_indices() {
            assert!(params[i].data().iter().all(|&v| v == 0.0), "parameter {} moved", i);
        }
    }

    #[test]
    fn sharded_runs_are_deterministic_for_a_fixed_worker_count() {
        let data = generate_synthetic_dataset(&tiny_data()).unwrap();
        let cfg = TrainConfig {
            workers: 2,
            ..tiny_train()
        };
        let dir = tempfile::tempdir().unwrap();

        let mut m1 = fresh_model(21, tiny_model(8));
        let r1 = train(&mut m1, &data.train, &LossConfig::default(), &cfg, &dir.path().join("a")).unwrap();
        let mut m2 = fresh_model(21, tiny_model(8));
        let r2 = train(&mut m2, &data.train, &LossConfig::default(), &cfg, &dir.path().join("b")).unwrap();

        assert_eq!(m1, m2);
        assert_eq!(r1.curve, r2.curve);
        assert_eq!(r1.group_state, r2.group_state);
        // Sharded statistics still advance the window once per step.
        assert_eq!(r1.group_state.batches_seen(), 12);
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        assert!(TrainConfig {
            phase1_steps: 0,
            phase2_steps: 0,
            ..tiny_train()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 9,
            workers: 2,
            ..tiny_train()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 2,
            workers: 2,
            ..tiny_train()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            momentum: 1.0,
            ..tiny_train()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            expectation_window: 0,
            ..tiny_train()
        }
        .validate()
        .is_err());
        assert!(tiny_train().validate().is_ok());
    }

    #[test]
    fn oversized_batches_and_foreign_labels_are_rejected() {
        let data = generate_synthetic_dataset(&tiny_data()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut model = fresh_model(3, tiny_model(8));
        let cfg = TrainConfig {
            batch_size: 4096,
            ..tiny_train()
        };
        assert!(train(&mut model, &data.train, &LossConfig::default(), &cfg, dir.path()).is_err());

        // Eval identities exceed the classifier's class count.
        let mut model = fresh_model(3, tiny_model(8));
        let err = train(&mut model, &data.eval, &LossConfig::default(), &tiny_train(), dir.path());
        assert!(err.is_err());
    }

    #[test]
    fn final_labels_cover_the_dataset() {
        let data = generate_synthetic_dataset(&tiny_data()).unwrap();
        let mut model = fresh_model(3, tiny_model(8));
        let dir = tempfile::tempdir().unwrap();
        let run = train(&mut model, &data.train, &LossConfig::default(), &tiny_train(), dir.path()).unwrap();

        let labels =
            assign_dataset_labels(&model, &data.train, &run.group_state, Labeling::SelfDistributed).unwrap();
        assert_eq!(labels.len(), data.train.len());
        assert!(labels.iter().all(|&l| l < 3));
        let naive = assign_dataset_labels(&model, &data.train, &run.group_state, Labeling::Naive).unwrap();
        assert_eq!(naive.len(), data.train.len());
    }
}
