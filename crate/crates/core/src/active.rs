//! Batch-mode active learning: uncertainty scores, batch queries and the
//! query / label / refine loop.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{compute_metrics, LabelMap, Metrics, SampleSet};
use crate::error::{Error, Result};
use crate::network::{finetune, logit_margin, Classifier, FinetuneConfig, Trainable};
use crate::numcore::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    /// Uniform sampling without replacement.
    Random,
    /// Smallest gap between the two largest logits.
    Margin,
    /// Smallest gap between the two largest class probabilities.
    Mclu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryStrategy {
    pub kind: QueryKind,
    pub batch_size: usize,
}

impl Default for QueryStrategy {
    fn default() -> Self {
        Self {
            kind: QueryKind::Mclu,
            batch_size: 50,
        }
    }
}

impl QueryStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("query batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Positions in the candidate set chosen by one query, with their scores.
/// Uncertainty queries list samples from most to least uncertain; a random
/// query lists them in draw order with all scores 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Gap between the largest and second-largest probability.
pub fn c_diff(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "c_diff needs at least two classes, got {}",
            probs.len()
        )));
    }
    Ok(logit_margin(probs))
}

/// Positions of the `k` smallest `(score, id)` keys, in ascending key order.
pub fn smallest_k(scores: &[f64], ids: &[usize], k: usize) -> Vec<usize> {
    let key = |&i: &usize| (scores[i], ids[i]);
    let cmp = |a: &usize, b: &usize| {
        let (sa, ia) = key(a);
        let (sb, ib) = key(b);
        sa.total_cmp(&sb).then(ia.cmp(&ib))
    };
    let mut pos: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(pos.len());
    if k == 0 {
        return Vec::new();
    }
    if k < pos.len() {
        pos.select_nth_unstable_by(k - 1, cmp);
        pos.truncate(k);
    }
    pos.sort_unstable_by(cmp);
    pos
}

/// Per-sample uncertainty scores of a candidate set (lower is more
/// uncertain).
pub fn uncertainty_scores<C: Classifier>(
    kind: QueryKind,
    model: &C,
    candidate: &SampleSet,
) -> Result<Vec<f64>> {
    match kind {
        QueryKind::Random => Ok(vec![0.0; candidate.len()]),
        QueryKind::Mclu => model
            .predict_proba_batch(candidate.features())?
            .row_iter()
            .map(c_diff)
            .collect(),
        QueryKind::Margin => {
            let logits = model.logits_batch(candidate.features())?;
            if logits.cols() < 2 {
                return Err(Error::InvalidParameter(
                    "margin sampling needs at least two classes".into(),
                ));
            }
            Ok(logits.row_iter().map(logit_margin).collect())
        }
    }
}

/// Picks the next query batch from `candidate`. Ties between equal scores go
/// to the lower pixel index.
pub fn select_batch<C: Classifier>(
    strategy: &QueryStrategy,
    model: &C,
    candidate: &SampleSet,
    rng: &mut RngState,
) -> Result<QueryBatch> {
    strategy.validate()?;
    if candidate.is_empty() {
        return Err(Error::Empty("query selection (candidate set)"));
    }
    let k = strategy.batch_size.min(candidate.len());
    if strategy.kind == QueryKind::Random {
        let indices = sample(rng, candidate.len(), k).into_vec();
        return Ok(QueryBatch {
            scores: vec![0.0; indices.len()],
            indices,
        });
    }
    let scores = uncertainty_scores(strategy.kind, model, candidate)?;
    let indices = smallest_k(&scores, candidate.pixels(), k);
    Ok(QueryBatch {
        scores: indices.iter().map(|&i| scores[i]).collect(),
        indices,
    })
}

/// The supervisor that reveals the class of a queried pixel.
pub trait Labeler {
    /// Zero-based class of `pixel`.
    fn label(&self, pixel: usize) -> Result<usize>;
}

/// Labeler backed by reference data.
#[derive(Debug, Clone)]
pub struct GroundTruth<'a> {
    labels: &'a LabelMap,
}

impl<'a> GroundTruth<'a> {
    pub fn new(labels: &'a LabelMap) -> Self {
        Self { labels }
    }
}

impl Labeler for GroundTruth<'_> {
    fn label(&self, pixel: usize) -> Result<usize> {
        self.labels.class_of(pixel).ok_or(Error::OracleFailure(pixel))
    }
}

/// Labels the chosen candidates and moves them into `training`.
pub(crate) fn move_queried(
    training: &mut SampleSet,
    candidate: &mut SampleSet,
    indices: &[usize],
    oracle: &dyn Labeler,
) -> Result<()> {
    let (kept, mut chosen) = candidate.partition(indices);
    for i in 0..chosen.len() {
        let class = oracle.label(chosen.pixels()[i])?;
        chosen.set_label(i, class);
    }
    training.extend(&chosen)?;
    *candidate = kept;
    Ok(())
}

/// Metrics of `model` on a labeled set.
pub fn evaluate<C: Classifier>(model: &C, test: &SampleSet) -> Result<Metrics> {
    let truth = test.required_labels()?;
    let pred = model.predict_batch(test.features())?;
    compute_metrics(&pred, &truth, model.class_count())
}

/// One row of the learning curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlRecord {
    pub iteration: usize,
    pub labeled_count: usize,
    #[serde(rename = "OA")]
    pub oa: f64,
    #[serde(rename = "AA")]
    pub aa: f64,
    #[serde(rename = "Kappa")]
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlConfig {
    pub strategy: QueryStrategy,
    pub max_iters: usize,
    /// Fine-tuning of the whole network after each query.
    pub refine: FinetuneConfig,
}

impl Default for AlConfig {
    fn default() -> Self {
        Self {
            strategy: QueryStrategy::default(),
            max_iters: 26,
            refine: FinetuneConfig {
                epochs: 100,
                ..FinetuneConfig::default()
            },
        }
    }
}

impl AlConfig {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.refine.validate()
    }
}

/// Training and candidate sets around a model, with the learning curve so far.
#[derive(Debug, Clone)]
pub struct AlState<M> {
    pub training: SampleSet,
    pub candidate: SampleSet,
    pub model: M,
    pub iteration: usize,
    pub history: Vec<AlRecord>,
}

impl<M: Trainable> AlState<M> {
    pub fn new(training: SampleSet, candidate: SampleSet, model: M) -> Result<Self> {
        training.required_labels()?;
        let mut check = training.clone();
        check.extend(&candidate)?;
        Ok(Self {
            training,
            candidate,
            model,
            iteration: 0,
            history: Vec::new(),
        })
    }

    fn record(&mut self, test: &SampleSet) -> Result<()> {
        let m = evaluate(&self.model, test)?;
        self.history.push(AlRecord {
            iteration: self.iteration,
            labeled_count: self.training.len(),
            oa: m.oa,
            aa: m.aa,
            kappa: m.kappa,
        });
        Ok(())
    }
}

/// Runs up to `cfg.max_iters` query rounds: score the candidates, query a
/// batch, label it, move it to the training set, fine-tune the whole model
/// and record the held-out accuracy. The starting accuracy is recorded
/// first when the history is empty. Stops early once the candidate set is
/// exhausted.
pub fn al_pretrain_loop<M: Trainable>(
    state: &mut AlState<M>,
    cfg: &AlConfig,
    oracle: &dyn Labeler,
    test: &SampleSet,
    rng: &mut RngState,
) -> Result<()> {
    cfg.validate()?;
    if state.history.is_empty() {
        state.record(test)?;
    }
    for _ in 0..cfg.max_iters {
        if state.candidate.is_empty() {
            break;
        }
        let batch = select_batch(&cfg.strategy, &state.model, &state.candidate, rng)?;
        move_queried(&mut state.training, &mut state.candidate, &batch.indices, oracle)?;
        finetune(&mut state.model, &state.training, &cfg.refine, rng)?;
        state.iteration += 1;
        state.record(test)?;
    }
    Ok(())
}

/// Writes `iteration,labeled_count,OA,AA,Kappa` rows.
pub fn write_history_csv(path: &Path, history: &[AlRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
