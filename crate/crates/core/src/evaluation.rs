//! The robustness suite: in-distribution accuracy (A), position shift (B),
//! held-out templates without and with anchors (C0/C1), and agreement
//! across four variants.
//!
//! Every evaluation input is drawn from streams seeded by the protocol
//! seed, never the training seed, so all experiments see the same pairs.
//! Pair draws and rendering use separate streams; experiments that render
//! differently still score identical pairs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError};
use crate::rendering::{
    ood_templates, render, render_in_range, render_variants, Mixture, OodCategory, PositionRange,
    RenderError, RenderedExample, Template, TemplateRegistry, MAX_POSITION,
};
use crate::rng::Stream;
use crate::task_data::{universe, Pair, SplitSpec, TaskError};
use crate::tokenizer::{TokenizerError, Vocabulary, EXPR_CLOSE, EXPR_OPEN};
use crate::training::{TrainConfig, TrainError};

pub const EVAL_B_POSITIONS: [usize; 7] = [0, 8, 16, 24, 32, 48, 64];
pub const PROTOCOL_SEED: u64 = 7777;
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("cannot aggregate: {0}")]
    Aggregate(String),
}

/// Sample sizes and seed for one run of the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub eval_a_pairs: usize,
    pub eval_b_per_position: usize,
    /// Half of the C0/C1 examples are questions, half commands.
    pub eval_c_per_category: usize,
    pub consistency_pairs: usize,
    pub seed: u64,
}

impl Protocol {
    pub fn full() -> Self {
        Self {
            eval_a_pairs: 400,
            eval_b_per_position: 100,
            eval_c_per_category: 100,
            consistency_pairs: 400,
            seed: PROTOCOL_SEED,
        }
    }

    pub fn smoke() -> Self {
        Self {
            eval_a_pairs: 200,
            eval_b_per_position: 50,
            eval_c_per_category: 50,
            consistency_pairs: 200,
            seed: PROTOCOL_SEED,
        }
    }

    /// Reduced sets logged during training.
    pub fn snapshot() -> Self {
        Self {
            eval_a_pairs: 100,
            eval_b_per_position: 20,
            eval_c_per_category: 0,
            consistency_pairs: 0,
            seed: PROTOCOL_SEED,
        }
    }
}

/// How an experiment family renders its evaluation inputs.
#[derive(Clone, Debug)]
pub struct EvalSetup {
    pub anchored: bool,
    pub k: usize,
    /// Training templates of the family.
    pub mixture: Mixture,
    /// Final curriculum range: the in-distribution positions.
    pub in_range: PositionRange,
    /// Template shifted across the position-shift probes.
    pub shift_template: Template,
}

impl EvalSetup {
    /// The family's fixed training template when it has exactly one,
    /// otherwise the neutral `bare` padding template, is the shift template.
    pub fn for_config(config: &TrainConfig, registry: &TemplateRegistry) -> Result<Self, EvalError> {
        let mixture = config.templates.mixture(registry)?;
        let templates: Vec<&Template> = mixture.templates().collect();
        let shift_template = match templates[..] {
            [only] => only.clone(),
            _ => registry
                .get("bare")
                .cloned()
                .ok_or_else(|| EvalError::Protocol("registry lacks `bare`".into()))?,
        };
        Ok(Self {
            anchored: config.anchored,
            k: config.k,
            in_range: config.curriculum.final_range(),
            mixture,
            shift_template,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub n: usize,
}

impl Accuracy {
    pub fn percent(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.n as f64
        }
    }
}

/// Scores rendered examples against their oracle labels.
pub fn score(model: &Model, examples: &[RenderedExample], vocab: &Vocabulary) -> Result<Accuracy, EvalError> {
    let preds = predictions(model, examples, vocab)?;
    let correct = preds
        .iter()
        .zip(examples)
        .filter(|(&p, e)| p == e.pair.label as usize)
        .count();
    Ok(Accuracy {
        correct,
        n: examples.len(),
    })
}

fn predictions(model: &Model, examples: &[RenderedExample], vocab: &Vocabulary) -> Result<Vec<usize>, EvalError> {
    let seqs = examples
        .iter()
        .map(|e| vocab.encode(&e.text))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(model.predict_all(&seqs, PREDICT_CHUNK)?)
}

/// `n` distinct test pairs chosen by a partial shuffle of the test split.
pub fn eval_a_pairs(split: &SplitSpec, protocol: &Protocol) -> Vec<Pair> {
    let mut rng = Stream::derived(protocol.seed, "eval-a/pairs");
    let mut pool = split.test.clone();
    let n = protocol.eval_a_pairs.min(pool.len());
    for i in 0..n {
        let j = i + rng.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(n);
    pool
}

fn random_pairs(p: u32, n: usize, rng: &mut Stream) -> Result<Vec<Pair>, EvalError> {
    let all = universe(p)?;
    Ok((0..n).map(|_| all[rng.below(all.len() as u64) as usize]).collect())
}

/// In-distribution inputs: family templates at in-range positions.
pub fn eval_a_set(split: &SplitSpec, setup: &EvalSetup, protocol: &Protocol) -> Result<Vec<RenderedExample>, EvalError> {
    let mut rng = Stream::derived(protocol.seed, "eval-a/render");
    eval_a_pairs(split, protocol)
        .iter()
        .map(|pair| {
            let t = setup.mixture.draw(&mut rng).clone();
            Ok(render_in_range(pair, &t, setup.in_range, setup.anchored, &mut rng)?)
        })
        .collect()
}

pub fn eval_a(model: &Model, split: &SplitSpec, setup: &EvalSetup, protocol: &Protocol, vocab: &Vocabulary) -> Result<Accuracy, EvalError> {
    score(model, &eval_a_set(split, setup, protocol)?, vocab)
}

/// Position-shift inputs per probe position. Anchored models are probed
/// with anchors except where the opening marker cannot fit before the
/// expression (position 0); those positions are listed in the second value.
pub fn eval_b_set(
    setup: &EvalSetup,
    protocol: &Protocol,
    p: u32,
) -> Result<(BTreeMap<usize, Vec<RenderedExample>>, Vec<usize>), EvalError> {
    let mut pair_rng = Stream::derived(protocol.seed, "eval-b/pairs");
    let mut rng = Stream::derived(protocol.seed, "eval-b/render");
    let mut sets = BTreeMap::new();
    let mut unanchored = Vec::new();
    for &pos in &EVAL_B_POSITIONS {
        let pairs = random_pairs(p, protocol.eval_b_per_position, &mut pair_rng)?;
        let anchored = setup.anchored && pos >= EXPR_OPEN.len();
        if setup.anchored && !anchored {
            unanchored.push(pos);
        }
        let set = pairs
            .iter()
            .map(|pair| render(pair, &setup.shift_template, pos, anchored, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        sets.insert(pos, set);
    }
    Ok((sets, unanchored))
}

pub fn eval_b(model: &Model, setup: &EvalSetup, protocol: &Protocol, vocab: &Vocabulary, p: u32) -> Result<BTreeMap<usize, Accuracy>, EvalError> {
    let (sets, _) = eval_b_set(setup, protocol, p)?;
    sets.iter()
        .map(|(&pos, set)| Ok((pos, score(model, set, vocab)?)))
        .collect()
}

/// Held-out template inputs, questions first, at positions uniform over
/// `[0, 70]` (redrawn when a template cannot reach the position).
pub fn eval_c_set(
    setup: &EvalSetup,
    protocol: &Protocol,
    anchored: bool,
    registry: &TemplateRegistry,
    p: u32,
) -> Result<Vec<RenderedExample>, EvalError> {
    if anchored && !setup.anchored {
        return Err(EvalError::Protocol(
            "anchored held-out evaluation is only defined for anchor-trained models".into(),
        ));
    }
    let mut pair_rng = Stream::derived(protocol.seed, "eval-c/pairs");
    let mut rng = Stream::derived(protocol.seed, if anchored { "eval-c1/render" } else { "eval-c0/render" });
    let range = PositionRange::new(0, MAX_POSITION)?;
    let mut out = Vec::new();
    for category in [OodCategory::Question, OodCategory::Command] {
        let templates = ood_templates(registry, category);
        if templates.is_empty() {
            return Err(EvalError::Protocol(format!("no held-out {category:?} templates")));
        }
        let pairs = random_pairs(p, protocol.eval_c_per_category, &mut pair_rng)?;
        for pair in &pairs {
            let t = &templates[rng.below(templates.len() as u64) as usize];
            out.push(render_in_range(pair, t, range, anchored, &mut rng)?);
        }
    }
    Ok(out)
}

pub fn eval_c(
    model: &Model,
    setup: &EvalSetup,
    protocol: &Protocol,
    anchored: bool,
    registry: &TemplateRegistry,
    vocab: &Vocabulary,
    p: u32,
) -> Result<Accuracy, EvalError> {
    let set = eval_c_set(setup, protocol, anchored, registry, p)?;
    if !anchored && set.iter().any(|e| e.text.contains(EXPR_OPEN) || e.text.contains(EXPR_CLOSE)) {
        return Err(EvalError::Protocol("anchor found in no-anchor evaluation".into()));
    }
    score(model, &set, vocab)
}

/// Four variants per pair drawn like training batches at the final
/// curriculum stage.
pub fn consistency_set(
    split: &SplitSpec,
    setup: &EvalSetup,
    protocol: &Protocol,
) -> Result<Vec<RenderedExample>, EvalError> {
    if setup.k != 4 {
        return Err(EvalError::Protocol(format!(
            "variant agreement is defined for K = 4, experiment uses K = {}",
            setup.k
        )));
    }
    let pairs = eval_a_pairs(
        split,
        &Protocol {
            eval_a_pairs: protocol.consistency_pairs,
            ..*protocol
        },
    );
    let mut rng = Stream::derived(protocol.seed, "consistency/render");
    let mut out = Vec::with_capacity(pairs.len() * 4);
    for (i, pair) in pairs.iter().enumerate() {
        out.extend(render_variants(pair, 4, setup.in_range, &setup.mixture, setup.anchored, i as u64, &mut rng)?);
    }
    Ok(out)
}

/// Share of pairs whose four variants all predict the same, correct class.
pub fn consistency_correct_4(
    model: &Model,
    split: &SplitSpec,
    setup: &EvalSetup,
    protocol: &Protocol,
    vocab: &Vocabulary,
) -> Result<Accuracy, EvalError> {
    let set = consistency_set(split, setup, protocol)?;
    let preds = predictions(model, &set, vocab)?;
    let correct = preds
        .chunks(4)
        .zip(set.chunks(4))
        .filter(|(p, ex)| p.iter().all(|&x| x == ex[0].pair.label as usize))
        .count();
    Ok(Accuracy {
        correct,
        n: set.len() / 4,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub eval_a: usize,
    pub eval_b_per_position: usize,
    pub eval_b_total: usize,
    pub eval_c_questions: usize,
    pub eval_c_commands: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_pairs: Option<usize>,
}

/// Percentages for one (experiment, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub seed: u64,
    pub eval_a: f64,
    pub eval_b_overall: f64,
    pub eval_b_by_position: BTreeMap<usize, f64>,
    pub eval_c0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_correct_4: Option<f64>,
    pub n: EvalCounts,
    /// Position-shift probes rendered without anchors for an anchored model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unanchored_positions: Vec<usize>,
}

/// Runs every protocol that applies to the experiment.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    experiment: &str,
    seed: u64,
    split: &SplitSpec,
    setup: &EvalSetup,
    protocol: &Protocol,
    registry: &TemplateRegistry,
    vocab: &Vocabulary,
) -> Result<EvalReport, EvalError> {
    let a = eval_a(model, split, setup, protocol, vocab)?;
    let (b_sets, unanchored) = eval_b_set(setup, protocol, split.p)?;
    let mut by_position = BTreeMap::new();
    for (&pos, set) in &b_sets {
        by_position.insert(pos, score(model, set, vocab)?.percent());
    }
    let overall = by_position.values().sum::<f64>() / by_position.len() as f64;
    let c0 = eval_c(model, setup, protocol, false, registry, vocab, split.p)?;
    let c1 = if setup.anchored {
        Some(eval_c(model, setup, protocol, true, registry, vocab, split.p)?.percent())
    } else {
        None
    };
    let cc4 = if setup.k == 4 {
        Some(consistency_correct_4(model, split, setup, protocol, vocab)?)
    } else {
        None
    };
    Ok(EvalReport {
        experiment: experiment.to_string(),
        seed,
        eval_a: a.percent(),
        eval_b_overall: overall,
        eval_b_by_position: by_position,
        eval_c0: c0.percent(),
        eval_c1: c1,
        consistency_correct_4: cc4.map(|c| c.percent()),
        n: EvalCounts {
            eval_a: a.n,
            eval_b_per_position: protocol.eval_b_per_position,
            eval_b_total: protocol.eval_b_per_position * EVAL_B_POSITIONS.len(),
            eval_c_questions: protocol.eval_c_per_category,
            eval_c_commands: protocol.eval_c_per_category,
            consistency_pairs: cc4.map(|c| c.n),
        },
        unanchored_positions: unanchored,
    })
}

/// Mean, sample standard deviation (n - 1), and the raw per-seed values.
/// `std` is absent for a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub per_seed: Vec<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Self {
            mean,
            std,
            per_seed: values.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub eval_a: Summary,
    pub eval_b_overall: Summary,
    pub eval_b_by_position: BTreeMap<usize, Summary>,
    pub eval_c0: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_c1: Option<Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_correct_4: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentAggregate {
    pub seeds: Vec<u64>,
    pub metrics: AggregateMetrics,
}

/// Combines the reports of one experiment across seeds.
pub fn aggregate(reports: &[EvalReport]) -> Result<ExperimentAggregate, EvalError> {
    let first = reports
        .first()
        .ok_or_else(|| EvalError::Aggregate("no reports".into()))?;
    if reports.iter().any(|r| r.experiment != first.experiment) {
        return Err(EvalError::Aggregate("reports mix experiments".into()));
    }
    let collect = |f: &dyn Fn(&EvalReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
    let optional = |name: &str, f: &dyn Fn(&EvalReport) -> Option<f64>| -> Result<Option<Summary>, EvalError> {
        let vals: Vec<Option<f64>> = reports.iter().map(f).collect();
        match (vals.iter().all(Option::is_some), vals.iter().all(Option::is_none)) {
            (true, _) => Ok(Some(Summary::of(&vals.into_iter().flatten().collect::<Vec<_>>()))),
            (_, true) => Ok(None),
            _ => Err(EvalError::Aggregate(format!("`{name}` present for only some seeds"))),
        }
    };
    let mut by_position = BTreeMap::new();
    for &pos in first.eval_b_by_position.keys() {
        let vals = reports
            .iter()
            .map(|r| {
                r.eval_b_by_position
                    .get(&pos)
                    .copied()
                    .ok_or_else(|| EvalError::Aggregate(format!("position {pos} missing")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        by_position.insert(pos, Summary::of(&vals));
    }
    Ok(ExperimentAggregate {
        seeds: reports.iter().map(|r| r.seed).collect(),
        metrics: AggregateMetrics {
            eval_a: collect(&|r| r.eval_a),
            eval_b_overall: collect(&|r| r.eval_b_overall),
            eval_b_by_position: by_position,
            eval_c0: collect(&|r| r.eval_c0),
            eval_c1: optional("eval_c1", &|r| r.eval_c1)?,
            consistency_correct_4: optional("consistency_correct_4", &|r| r.consistency_correct_4)?,
        },
    })
}
