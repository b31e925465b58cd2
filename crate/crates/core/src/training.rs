//! Joint cross-entropy + consistency objective, the position curriculum,
//! K-variant batching, and the training loop.

use serde::{Deserialize, Serialize};

use crate::model::{bind, forward, Model, ModelError, PackedBatch};
use crate::numerics::{AdamW, AdamWConfig, Array, Graph, NodeId, NumericsError, Scalar};
use crate::rendering::{
    render_variants, Family, Mixture, PositionRange, RenderError, RenderedExample, TemplateRegistry,
};
use crate::rng::Stream;
use crate::task_data::Pair;
use crate::tokenizer::{TokenSequence, TokenizerError, Vocabulary};

/// Step budget the stage table below was written for.
pub const PAPER_STEPS: usize = 5000;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("step {step} is outside the schedule of {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("consistency loss needs at least 2 variants per pair, got {0}")]
    TooFewVariants(usize),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f32 },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Piecewise-constant position ranges indexed by optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub steps: usize,
    /// `(last step of stage, inclusive; range)`, ascending.
    pub stages: Vec<(usize, PositionRange)>,
}

impl CurriculumSchedule {
    /// Thirds of the step budget widening from [10,30] to [10,50] to
    /// [10,70]. For 5000 steps the boundaries are 1666 and 3333.
    pub fn standard(steps: usize) -> Self {
        let r = |hi| PositionRange { lo: 10, hi };
        Self {
            steps,
            stages: vec![(steps / 3, r(30)), (2 * steps / 3, r(50)), (steps, r(70))],
        }
    }

    /// A single range for the whole run.
    pub fn constant(steps: usize, range: PositionRange) -> Self {
        Self {
            steps,
            stages: vec![(steps, range)],
        }
    }

    pub fn range_at(&self, step: usize) -> Result<PositionRange, TrainError> {
        if step > self.steps {
            return Err(TrainError::StepOutOfRange {
                step,
                steps: self.steps,
            });
        }
        self.stages
            .iter()
            .find(|(last, _)| step <= *last)
            .map(|&(_, r)| r)
            .ok_or(TrainError::StepOutOfRange {
                step,
                steps: self.steps,
            })
    }

    /// Range of the last stage.
    pub fn final_range(&self) -> PositionRange {
        self.stages.last().map(|&(_, r)| r).unwrap_or(PositionRange::fixed(0))
    }

    fn validate(&self) -> Result<(), TrainError> {
        let ordered = self.stages.windows(2).all(|w| w[0].0 < w[1].0);
        match self.stages.last() {
            Some(&(last, _)) if ordered && last >= self.steps => Ok(()),
            _ => Err(TrainError::Config("curriculum stages must ascend and cover every step".into())),
        }
    }
}

/// Position range at `step` of the 5000-step schedule.
pub fn curriculum_range(step: usize) -> Result<PositionRange, TrainError> {
    CurriculumSchedule::standard(PAPER_STEPS).range_at(step)
}

/// Which templates a batch draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplatePlan {
    /// One registry template.
    Single(String),
    /// Family weights; templates uniform within a family.
    Families(Vec<(Family, f64)>),
}

impl TemplatePlan {
    pub fn mixture(&self, registry: &TemplateRegistry) -> Result<Mixture, TrainError> {
        match self {
            TemplatePlan::Single(id) => registry
                .get(id)
                .cloned()
                .map(Mixture::single)
                .ok_or_else(|| TrainError::Config(format!("unknown template `{id}`"))),
            TemplatePlan::Families(w) => Ok(Mixture::by_family(registry, w)?),
        }
    }
}

/// How `batch_size` is counted when `k > 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchAccounting {
    /// `batch_size` sequences per step (`batch_size / k` pairs).
    Sequences,
    /// `batch_size` pairs per step (`batch_size * k` sequences).
    Pairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub accounting: BatchAccounting,
    /// Variants per pair.
    pub k: usize,
    /// Consistency weight.
    pub lambda: f64,
    pub curriculum: CurriculumSchedule,
    pub templates: TemplatePlan,
    pub anchored: bool,
    pub optimizer: AdamWConfig,
    /// Steps between logged evaluation snapshots (0 disables them).
    pub snapshot_every: usize,
}

impl TrainConfig {
    pub fn pairs_per_batch(&self) -> usize {
        match self.accounting {
            BatchAccounting::Sequences => (self.batch_size / self.k).max(1),
            BatchAccounting::Pairs => self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k == 0 || self.batch_size == 0 || self.steps == 0 {
            return Err(TrainError::Config("k, batch size, and steps must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::Config(format!("negative consistency weight {}", self.lambda)));
        }
        if self.lambda > 0.0 && self.k < 2 {
            return Err(TrainError::TooFewVariants(self.k));
        }
        if self.curriculum.steps != self.steps {
            return Err(TrainError::Config(format!(
                "curriculum covers {} steps, training runs {}",
                self.curriculum.steps, self.steps
            )));
        }
        self.curriculum.validate()
    }
}

/// Mean over pairs of the mean pairwise MSE between the `k` logit rows of
/// each pair. Rows of one pair are contiguous.
///
/// Every row pair has the same element count, so this equals a single MSE
/// between the stacked first and second members of all row pairs.
pub fn consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    k: usize,
) -> Result<NodeId, TrainError> {
    if k < 2 {
        return Err(TrainError::TooFewVariants(k));
    }
    let rows = g.value(logits).rows();
    if rows % k != 0 {
        return Err(TrainError::Config(format!("{rows} logit rows do not split into groups of {k}")));
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    for base in (0..rows).step_by(k) {
        for i in 0..k {
            for j in i + 1..k {
                left.push((0, base + i));
                right.push((0, base + j));
            }
        }
    }
    let l = g.gather(&[logits], left)?;
    let r = g.gather(&[logits], right)?;
    Ok(g.mse(l, r)?)
}

/// A rendered and encoded training batch; rows of one pair are contiguous.
#[derive(Clone, Debug)]
pub struct Batch {
    pub examples: Vec<RenderedExample>,
    pub seqs: Vec<TokenSequence>,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Batch {
    pub fn groups(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.variant_group).collect()
    }
}

/// Everything batch construction needs besides randomness.
pub struct BatchSource<'a> {
    pub train: &'a [Pair],
    pub config: &'a TrainConfig,
    pub mixture: Mixture,
    pub vocab: &'a Vocabulary,
}

impl<'a> BatchSource<'a> {
    pub fn new(
        train: &'a [Pair],
        config: &'a TrainConfig,
        registry: &TemplateRegistry,
        vocab: &'a Vocabulary,
    ) -> Result<Self, TrainError> {
        if train.is_empty() {
            return Err(TrainError::Config("empty training split".into()));
        }
        Ok(Self {
            train,
            config,
            mixture: config.templates.mixture(registry)?,
            vocab,
        })
    }

    /// Samples pairs with replacement and renders `k` variants of each at
    /// positions from the curriculum stage active at `step`.
    pub fn make_batch(&self, step: usize, rng: &mut Stream) -> Result<Batch, TrainError> {
        let cfg = self.config;
        let range = cfg.curriculum.range_at(step)?;
        let n = cfg.pairs_per_batch();
        let mut batch = Batch {
            examples: Vec::with_capacity(n * cfg.k),
            seqs: Vec::with_capacity(n * cfg.k),
            labels: Vec::with_capacity(n * cfg.k),
            k: cfg.k,
        };
        for i in 0..n {
            let pair = self.train[rng.below(self.train.len() as u64) as usize];
            let group = (step * n + i) as u64;
            for ex in render_variants(&pair, cfg.k, range, &self.mixture, cfg.anchored, group, rng)? {
                batch.seqs.push(self.vocab.encode(&ex.text)?);
                batch.labels.push(pair.label as usize);
                batch.examples.push(ex);
            }
        }
        Ok(batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce: f32,
    pub cons: f32,
    pub total: f32,
}

/// Records `L_CE + lambda * L_cons` for a batch. The consistency term is
/// skipped when `lambda` is zero.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[usize],
    k: usize,
    lambda: f64,
) -> Result<(NodeId, Option<NodeId>, NodeId), TrainError> {
    let ce = g.cross_entropy(logits, labels)?;
    if lambda == 0.0 {
        return Ok((ce, None, ce));
    }
    let cons = consistency_loss(g, logits, k)?;
    let weighted = g.scale(cons, lambda);
    let total = g.add(ce, weighted)?;
    Ok((ce, Some(cons), total))
}

/// One optimizer update on `batch`.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW<f32>,
    batch: &Batch,
    lambda: f64,
    step: usize,
) -> Result<StepLosses, TrainError> {
    let packed = PackedBatch::new(&batch.seqs, &model.config)?;
    let mut g = Graph::new();
    let bound = bind(&mut g, &model.params, true);
    let out = forward(&mut g, &model.params, &bound, &packed, &model.config)?;
    let (ce, cons, total) = joint_loss(&mut g, out.logits, &batch.labels, batch.k, lambda)?;
    let losses = StepLosses {
        ce: g.value(ce).item(),
        cons: cons.map_or(0.0, |c| g.value(c).item()),
        total: g.value(total).item(),
    };
    if !losses.total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            loss: losses.total,
        });
    }
    let mut grads = g.backward(total)?;
    let grads: Vec<Array<f32>> = bound
        .iter()
        .zip(model.params.arrays())
        .map(|(&id, a)| grads.take(id).unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();
    let names: Vec<String> = model.params.names().to_vec();
    let mut pairs: Vec<(&str, &mut Array<f32>)> = names
        .iter()
        .map(String::as_str)
        .zip(model.params.arrays_mut().iter_mut())
        .collect();
    let grad_refs: Vec<&Array<f32>> = grads.iter().collect();
    opt.step(&mut pairs, &grad_refs)?;
    Ok(losses)
}

/// One line of the training-curve log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub ce: f32,
    pub cons: f32,
    pub total: f32,
    /// Curriculum range active at this step.
    pub range: PositionRange,
    /// Smallest and largest rendered position in the batch.
    pub pos_min: usize,
    pub pos_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<serde_json::Value>,
}

/// Runs `config.steps` updates from a fresh model. `snapshot` is called
/// every `snapshot_every` steps and after the last one; its value is stored
/// in that step's record.
pub fn train(
    model: &mut Model,
    config: &TrainConfig,
    train_pairs: &[Pair],
    registry: &TemplateRegistry,
    vocab: &Vocabulary,
    seed: u64,
    mut snapshot: impl FnMut(usize, &Model) -> Option<serde_json::Value>,
) -> Result<Vec<StepRecord>, TrainError> {
    config.validate()?;
    let source = BatchSource::new(train_pairs, config, registry, vocab)?;
    let mut rng = Stream::derived(seed, "train");
    let mut opt = AdamW::new(config.optimizer, model.params.arrays());
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = source.make_batch(step, &mut rng)?;
        let losses = train_step(model, &mut opt, &batch, config.lambda, step)?;
        let positions = batch.examples.iter().map(|e| e.position);
        let last = step + 1 == config.steps;
        let due = config.snapshot_every > 0 && (step + 1) % config.snapshot_every == 0;
        let record = StepRecord {
            step,
            ce: losses.ce,
            cons: losses.cons,
            total: losses.total,
            range: config.curriculum.range_at(step)?,
            pos_min: positions.clone().min().unwrap_or(0),
            pos_max: positions.max().unwrap_or(0),
            snapshot: if due || last { snapshot(step, model) } else { None },
        };
        if step % 100 == 0 || last {
            log::info!(
                "step {step}: ce {:.4} cons {:.4} total {:.4}",
                losses.ce,
                losses.cons,
                losses.total
            );
        }
        if let Some(snap) = &record.snapshot {
            log::info!("step {step}: snapshot {snap}");
        }
        log.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_boundaries() {
        let r = |lo, hi| PositionRange { lo, hi };
        assert_eq!(curriculum_range(0).unwrap(), r(10, 30));
        assert_eq!(curriculum_range(1666).unwrap(), r(10, 30));
        assert_eq!(curriculum_range(1667).unwrap(), r(10, 50));
        assert_eq!(curriculum_range(3333).unwrap(), r(10, 50));
        assert_eq!(curriculum_range(3334).unwrap(), r(10, 70));
        assert_eq!(curriculum_range(5000).unwrap(), r(10, 70));
        assert!(matches!(
            curriculum_range(5001),
            Err(TrainError::StepOutOfRange { step: 5001, .. })
        ));
    }

    #[test]
    fn consistency_of_identical_rows_is_zero() {
        let mut g = Graph::<f32>::new();
        let row: Vec<f32> = (0..97).map(|i| i as f32 * 0.1).collect();
        let logits = g.leaf(Array::from_rows(&vec![row; 4]));
        let c = consistency_loss(&mut g, logits, 4).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }

    #[test]
    fn consistency_of_constant_offset() {
        let mut g = Graph::<f32>::new();
        let logits = g.leaf(Array::from_rows(&[vec![1.0; 97], vec![3.0; 97]]));
        let c = consistency_loss(&mut g, logits, 2).unwrap();
        assert_eq!(g.value(c).item(), 4.0);
    }

    #[test]
    fn consistency_needs_two_variants() {
        let mut g = Graph::<f32>::new();
        let logits = g.leaf(Array::zeros(&[3, 97]));
        assert!(matches!(
            consistency_loss(&mut g, logits, 1),
            Err(TrainError::TooFewVariants(1))
        ));
    }

    #[test]
    fn zero_lambda_is_plain_cross_entropy() {
        let mut g = Graph::<f32>::new();
        let logits = g.leaf(Array::from_rows(&[vec![0.2, -0.1, 0.4], vec![1.0, 0.0, 0.0]]));
        let (ce, cons, total) = joint_loss(&mut g, logits, &[0, 2], 2, 0.0).unwrap();
        assert!(cons.is_none());
        assert_eq!(ce, total);
    }

    #[test]
    fn batch_accounting() {
        let mut cfg = crate::runner::ExperimentId::I1002a.spec(crate::runner::Scale::Full).train;
        assert_eq!(cfg.pairs_per_batch(), 64);
        cfg.accounting = BatchAccounting::Pairs;
        assert_eq!(cfg.pairs_per_batch(), 256);
    }
}
