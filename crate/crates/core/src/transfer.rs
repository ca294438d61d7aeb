//! Active transfer of a source-trained model to a target scene: each round
//! queries the most uncertain target samples, drops the source samples whose
//! class posterior has drifted most since transfer, and fine-tunes on the
//! updated mixed training set until the objective falls below `epsilon`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::active::{evaluate, move_queried, select_batch, smallest_k, Labeler, QueryKind, QueryStrategy};
use crate::data::{Domain, SampleSet};
use crate::error::{Error, Result};
use crate::network::{finetune, FinetuneConfig, Trainable};
use crate::numcore::RngState;

/// What happens to the source softmax head when the model moves to the
/// target scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    /// Keep the trained head (classes are shared), growing it with zero rows
    /// if the target has more classes.
    Keep,
    /// Start from a zero head; only the encoders carry over.
    Reinit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Target samples queried per round.
    pub t_plus: usize,
    /// Source samples removed per round.
    pub s_minus: usize,
    /// Stop once the fine-tuning objective falls below this.
    pub epsilon: f64,
    pub max_iters: usize,
    pub query: QueryKind,
    pub head: HeadPolicy,
    /// Fine-tuning of the whole network after each round.
    pub refine: FinetuneConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            t_plus: 80,
            s_minus: 50,
            epsilon: 5e-6,
            max_iters: 10,
            query: QueryKind::Mclu,
            head: HeadPolicy::Keep,
            refine: FinetuneConfig {
                epochs: 100,
                ..FinetuneConfig::default()
            },
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_plus == 0 {
            return Err(Error::InvalidParameter("transfer: t_plus must be >= 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "transfer: epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        self.refine.validate()
    }
}

/// Difference between the initial and current probability of a sample's
/// labeled class; large values mean the sample no longer fits its class.
pub fn c_rem(p0: &[f64], pi: &[f64], class: usize) -> Result<f64> {
    if p0.len() != pi.len() {
        return Err(Error::DimensionMismatch {
            op: "c_rem",
            expected: p0.len(),
            actual: pi.len(),
        });
    }
    if class >= p0.len() {
        return Err(Error::ClassOutOfRange {
            class,
            class_count: p0.len(),
        });
    }
    Ok(p0[class] - pi[class])
}

/// Mixed training set, target pool and model during transfer.
#[derive(Debug, Clone)]
pub struct TransferState<M> {
    pub training: SampleSet,
    pub candidate: SampleSet,
    pub model: M,
    /// Class probabilities of every source training sample under the model
    /// as transferred, keyed by source pixel. Never updated afterwards.
    source_p0: BTreeMap<usize, Vec<f64>>,
    pub loss_history: Vec<f64>,
}

impl<M: Trainable> TransferState<M> {
    /// Caches the transferred model's probabilities for every source sample.
    pub fn new(model: M, source_training: SampleSet, target_pool: SampleSet) -> Result<Self> {
        if source_training.count_domain(Domain::Target) > 0 {
            return Err(Error::InvalidParameter(
                "transfer: the initial training set must hold source samples only".into(),
            ));
        }
        if target_pool.count_domain(Domain::Source) > 0 {
            return Err(Error::InvalidParameter(
                "transfer: the candidate pool must hold target samples only".into(),
            ));
        }
        source_training.required_labels()?;
        let probs = model.predict_proba_batch(source_training.features())?;
        let source_p0 = source_training
            .pixels()
            .iter()
            .zip(probs.row_iter())
            .map(|(&p, row)| (p, row.to_vec()))
            .collect();
        Ok(Self {
            training: source_training,
            candidate: target_pool,
            model,
            source_p0,
            loss_history: Vec::new(),
        })
    }

    pub fn initial_probs(&self, source_pixel: usize) -> Option<&[f64]> {
        self.source_p0.get(&source_pixel).map(Vec::as_slice)
    }

    pub fn source_count(&self) -> usize {
        self.training.count_domain(Domain::Source)
    }

    pub fn target_count(&self) -> usize {
        self.training.count_domain(Domain::Target)
    }
}

/// Removes the `s_minus` source samples with the largest `c_rem` under the
/// current model (ties to the lower pixel) and returns their pixels. Target
/// samples are never removed.
pub fn remove_source_batch<M: Trainable>(state: &mut TransferState<M>, s_minus: usize) -> Result<Vec<usize>> {
    let source: Vec<usize> = (0..state.training.len())
        .filter(|&i| state.training.domains()[i] == Domain::Source)
        .collect();
    if s_minus == 0 || source.is_empty() {
        return Ok(Vec::new());
    }
    let subset = state.training.select(&source);
    let probs = state.model.predict_proba_batch(subset.features())?;
    let labels = subset.required_labels()?;
    let mut negated = Vec::with_capacity(source.len());
    for (i, row) in probs.row_iter().enumerate() {
        let pixel = subset.pixels()[i];
        let p0 = state.source_p0.get(&pixel).ok_or_else(|| {
            Error::InvalidParameter(format!("no cached probabilities for source pixel {pixel}"))
        })?;
        negated.push(-c_rem(p0, row, labels[i])?);
    }
    let chosen = smallest_k(&negated, subset.pixels(), s_minus);
    let positions: Vec<usize> = chosen.iter().map(|&i| source[i]).collect();
    let removed: Vec<usize> = chosen.iter().map(|&i| subset.pixels()[i]).collect();
    let (kept, _) = state.training.partition(&positions);
    state.training = kept;
    Ok(removed)
}

/// One row of the transfer report. Row 0 describes the transferred model
/// before any round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferRecord {
    pub iteration: usize,
    pub loss: f64,
    pub source_count: usize,
    pub target_count: usize,
    #[serde(rename = "OA")]
    pub oa: f64,
    #[serde(rename = "AA")]
    pub aa: f64,
    #[serde(rename = "Kappa")]
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub rows: Vec<TransferRecord>,
    /// Set when the loss fell below `epsilon`.
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl TransferReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Prepares a source model for the target scene according to `policy`,
/// sized for `class_count` classes.
pub fn adapt_head<M: Trainable>(model: &mut M, policy: HeadPolicy, class_count: usize) {
    let head = model.head_mut();
    match policy {
        HeadPolicy::Keep => head.extend_to(class_count),
        HeadPolicy::Reinit => {
            let features = head.w.cols();
            *head = crate::network::SoftmaxHead::zeros(class_count.max(head.class_count()), features);
        }
    }
}

/// Runs the transfer rounds. `source_training` holds the labeled source
/// samples, `target_pool` the unlabeled target candidates, and `target_test`
/// the labeled target samples used for the report. `model` must already be
/// in the shared feature space of both scenes.
#[allow(clippy::too_many_arguments)]
pub fn active_transfer<M: Trainable>(
    mut model: M,
    source_training: SampleSet,
    target_pool: SampleSet,
    target_test: &SampleSet,
    cfg: &TransferConfig,
    oracle: &dyn Labeler,
    rng: &mut RngState,
) -> Result<(M, TransferReport)> {
    cfg.validate()?;
    let classes = source_training
        .required_labels()?
        .into_iter()
        .chain(target_test.required_labels()?)
        .max()
        .map_or(0, |c| c + 1)
        .max(model.class_count());
    adapt_head(&mut model, cfg.head, classes);
    let mut state = TransferState::new(model, source_training, target_pool)?;
    let strategy = QueryStrategy {
        kind: cfg.query,
        batch_size: cfg.t_plus,
    };
    let mut report = TransferReport {
        rows: Vec::new(),
        converged: false,
        warnings: Vec::new(),
    };

    let labels = state.training.required_labels()?;
    let loss0 = state
        .model
        .objective(state.training.features(), &labels, cfg.refine.lambda)?;
    push_row(&mut report, &state, 0, loss0, target_test)?;

    for iteration in 1..=cfg.max_iters {
        if state.candidate.is_empty() {
            report.warnings.push(format!(
                "target candidate pool exhausted before round {iteration}; stopping without reaching epsilon"
            ));
            break;
        }
        let batch = select_batch(&strategy, &state.model, &state.candidate, rng)?;
        remove_source_batch(&mut state, cfg.s_minus)?;
        move_queried(&mut state.training, &mut state.candidate, &batch.indices, oracle)?;
        let ft = finetune(&mut state.model, &state.training, &cfg.refine, rng)?;
        state.loss_history.push(ft.final_loss);
        push_row(&mut report, &state, iteration, ft.final_loss, target_test)?;
        if ft.final_loss < cfg.epsilon {
            report.converged = true;
            break;
        }
    }
    Ok((state.model, report))
}

fn push_row<M: Trainable>(
    report: &mut TransferReport,
    state: &TransferState<M>,
    iteration: usize,
    loss: f64,
    test: &SampleSet,
) -> Result<()> {
    let m = evaluate(&state.model, test)?;
    report.rows.push(TransferRecord {
        iteration,
        loss,
        source_count: state.source_count(),
        target_count: state.target_count(),
        oa: m.oa,
        aa: m.aa,
        kappa: m.kappa,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::active::GroundTruth;
    use crate::data::LabelMap;
    use crate::network::{SoftmaxHead, SsaeNetwork};
    use crate::numcore::{seeded_rng, Matrix};
    use rand::Rng;

    #[test]
    fn c_rem_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(c_rem(&p, &p, 1).unwrap(), 0.0);
        assert!((c_rem(&[0.9, 0.1], &[0.2, 0.8], 0).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(c_rem(&[0.5, 0.5], &[1.0, 0.0], 0).unwrap(), -0.5);
        assert!(matches!(
            c_rem(&p, &p, 3),
            Err(Error::ClassOutOfRange { class: 3, .. })
        ));
    }

    /// Two-class network whose class-0 probability is `sigmoid(x₀ − x₁)`.
    fn linear_model() -> SsaeNetwork {
        let head = SoftmaxHead {
            w: Matrix::identity(2),
            b: vec![0.0; 2],
        };
        SsaeNetwork::new(2, vec![], Some(head)).unwrap()
    }

    fn source_set(rows: &[[f64; 2]], labels: &[usize]) -> SampleSet {
        let n = rows.len();
        let f = Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        SampleSet::new(
            f,
            labels.iter().copied().map(Some).collect(),
            (0..n).map(|i| 100 + i).collect(),
            vec![Domain::Source; n],
        )
        .unwrap()
    }

    #[test]
    fn removes_the_largest_drift_first() {
        // Class-0 probability is sigmoid(x0 - x1): start every sample at 0.95
        // and move the inputs so the drops are {0.1, 0.9, 0.3, 0.9, 0.0}.
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let model = linear_model();
        let set = source_set(&[[logit(0.95), 0.0]; 5], &[0, 0, 0, 0, 0]);
        let mut state = TransferState::new(model, set, SampleSet::empty(2)).unwrap();
        let drops = [0.1, 0.9, 0.3, 0.9, 0.0];
        let f = Matrix::from_fn(5, 2, |i, j| if j == 0 { logit(0.95 - drops[i]) } else { 0.0 });
        // swap in the drifted inputs while keeping p0 from the transfer time
        state.training = state.training.with_features(f).unwrap();
        let removed = remove_source_batch(&mut state, 2).unwrap();
        assert_eq!(removed, vec![101, 103]);
        assert_eq!(state.training.pixels(), &[100, 102, 104]);
        assert!(remove_source_batch(&mut state, 0).unwrap().is_empty());
    }

    #[test]
    fn equal_drift_removes_lowest_ids() {
        let set = source_set(&[[0.3, 0.1]; 4], &[1, 0, 1, 0]);
        let mut state = TransferState::new(linear_model(), set, SampleSet::empty(2)).unwrap();
        let removed = remove_source_batch(&mut state, 2).unwrap();
        // unchanged model: every c_rem is 0
        assert_eq!(removed, vec![100, 101]);
        let removed = remove_source_batch(&mut state, 5).unwrap();
        assert_eq!(removed, vec![102, 103]);
        assert_eq!(state.source_count(), 0);
    }

    /// Two-class source and target sets; target class 0 sits on the source
    /// model's class-1 side of the boundary.
    fn shifted_problem(seed: u64, n_target: usize) -> (SampleSet, SampleSet, SampleSet, LabelMap) {
        let mut rng = seeded_rng(seed);
        let src_rows: Vec<[f64; 2]> = (0..40)
            .map(|i| {
                let c = (i % 2) as f64;
                [
                    c + rng.random_range(-0.2..0.2),
                    1.0 - c + rng.random_range(-0.2..0.2),
                ]
            })
            .collect();
        let src_labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let source = source_set(&src_rows, &src_labels);

        let classes: Vec<u16> = (0..n_target).map(|i| (i % 2 + 1) as u16).collect();
        let labels = LabelMap::new(1, n_target, classes).unwrap();
        let f = Matrix::from_fn(n_target, 2, |i, j| {
            let c = (i % 2) as f64;
            let centre = if j == 0 { 0.9 + 0.5 * c } else { 0.6 - 0.5 * c };
            centre + rng.random_range(-0.2..0.2)
        });
        let pool_px: Vec<usize> = (0..n_target / 2).collect();
        let test_px: Vec<usize> = (n_target / 2..n_target).collect();
        let pool = SampleSet::new(
            f.select_rows(&pool_px),
            vec![None; pool_px.len()],
            pool_px,
            vec![Domain::Target; n_target / 2],
        )
        .unwrap();
        let test = SampleSet::from_pixels(&f, &labels, &test_px, Domain::Target).unwrap();
        (source, pool, test, labels)
    }

    fn trained_source(source: &SampleSet) -> SsaeNetwork {
        let mut m = SsaeNetwork::identity(2).with_head(2);
        let cfg = FinetuneConfig {
            epochs: 200,
            lr: 1.0,
            ..FinetuneConfig::default()
        };
        finetune(&mut m, source, &cfg, &mut seeded_rng(0)).unwrap();
        m
    }

    #[test]
    fn bookkeeping_over_rounds() {
        let (source, pool, test, labels) = shifted_problem(1, 200);
        let cfg = TransferConfig {
            t_plus: 8,
            s_minus: 5,
            epsilon: 1e-12,
            max_iters: 4,
            refine: FinetuneConfig {
                epochs: 5,
                ..FinetuneConfig::default()
            },
            ..TransferConfig::default()
        };
        let model = trained_source(&source);
        let (_, report) = active_transfer(
            model,
            source,
            pool,
            &test,
            &cfg,
            &GroundTruth::new(&labels),
            &mut seeded_rng(3),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 5);
        for (i, row) in report.rows.iter().enumerate() {
            assert_eq!(row.iteration, i);
            assert_eq!(row.source_count, 40 - 5 * i);
            assert_eq!(row.target_count, 8 * i);
        }
        assert!(!report.converged);
    }

    #[test]
    fn infinite_epsilon_stops_after_one_round() {
        let (source, pool, test, labels) = shifted_problem(2, 100);
        let cfg = TransferConfig {
            t_plus: 4,
            s_minus: 2,
            epsilon: f64::INFINITY,
            refine: FinetuneConfig {
                epochs: 3,
                ..FinetuneConfig::default()
            },
            ..TransferConfig::default()
        };
        let model = trained_source(&source);
        let (_, report) = active_transfer(
            model,
            source,
            pool,
            &test,
            &cfg,
            &GroundTruth::new(&labels),
            &mut seeded_rng(3),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.converged);
    }

    #[test]
    fn stop_rule_fires_between_recorded_losses() {
        let (source, pool, test, labels) = shifted_problem(3, 200);
        let base = TransferConfig {
            t_plus: 6,
            s_minus: 4,
            epsilon: 1e-300,
            max_iters: 6,
            refine: FinetuneConfig {
                epochs: 20,
                lr: 0.5,
                ..FinetuneConfig::default()
            },
            ..TransferConfig::default()
        };
        let model = trained_source(&source);
        let run = |cfg: &TransferConfig| {
            active_transfer(
                model.clone(),
                source.clone(),
                pool.clone(),
                &test,
                cfg,
                &GroundTruth::new(&labels),
                &mut seeded_rng(9),
            )
            .unwrap()
            .1
        };
        let full = run(&base);
        let losses: Vec<f64> = full.rows[1..].iter().map(|r| r.loss).collect();
        // first round reaching the smallest loss; every earlier loss is larger
        let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let k = losses.iter().position(|&l| l == min).unwrap();
        let eps = if k == 0 {
            2.0 * min
        } else {
            0.5 * (min + losses[..k].iter().copied().fold(f64::INFINITY, f64::min))
        };
        let stopped = run(&TransferConfig {
            epsilon: eps,
            ..base.clone()
        });
        assert!(stopped.converged);
        assert_eq!(stopped.rows.len(), k + 2);
        assert_eq!(stopped.rows, full.rows[..k + 2]);
    }

    #[test]
    fn transfer_improves_a_shifted_target() {
        let (source, pool, test, labels) = shifted_problem(4, 400);
        let model = trained_source(&source);
        let cfg = TransferConfig {
            t_plus: 10,
            s_minus: 10,
            epsilon: 1e-9,
            max_iters: 4,
            refine: FinetuneConfig {
                epochs: 100,
                lr: 1.0,
                ..FinetuneConfig::default()
            },
            ..TransferConfig::default()
        };
        let (_, report) = active_transfer(
            model,
            source,
            pool,
            &test,
            &cfg,
            &GroundTruth::new(&labels),
            &mut seeded_rng(1),
        )
        .unwrap();
        let first = report.rows.first().unwrap().oa;
        let last = report.rows.last().unwrap().oa;
        assert!(last > first + 0.1, "{first} -> {last}");
    }

    #[test]
    fn p0_cache_is_frozen() {
        let (source, pool, test, labels) = shifted_problem(5, 100);
        let model = trained_source(&source);
        let state = TransferState::new(model.clone(), source.clone(), pool.clone()).unwrap();
        let before: Vec<Vec<f64>> = source
            .pixels()
            .iter()
            .map(|&p| state.initial_probs(p).unwrap().to_vec())
            .collect();
        let mut state = state;
        let cfg = FinetuneConfig {
            epochs: 10,
            ..FinetuneConfig::default()
        };
        finetune(&mut state.model, &source, &cfg, &mut seeded_rng(0)).unwrap();
        remove_source_batch(&mut state, 3).unwrap();
        for (i, &p) in source.pixels().iter().enumerate() {
            assert_eq!(state.initial_probs(p).unwrap(), before[i].as_slice());
        }
        let _ = (test, labels);
    }

    #[test]
    fn exhausted_pool_is_reported() {
        let (source, pool, test, labels) = shifted_problem(6, 20);
        let cfg = TransferConfig {
            t_plus: 4,
            s_minus: 1,
            epsilon: 1e-300,
            max_iters: 10,
            refine: FinetuneConfig {
                epochs: 2,
                ..FinetuneConfig::default()
            },
            ..TransferConfig::default()
        };
        let model = trained_source(&source);
        let (_, report) = active_transfer(
            model,
            source,
            pool,
            &test,
            &cfg,
            &GroundTruth::new(&labels),
            &mut seeded_rng(3),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn head_policies() {
        let mut m = SsaeNetwork::identity(3).with_head(2);
        m.head_mut().w.set(0, 0, 1.0);
        let mut kept = m.clone();
        adapt_head(&mut kept, HeadPolicy::Keep, 4);
        assert_eq!(kept.head().class_count(), 4);
        assert_eq!(kept.head().w.get(0, 0), 1.0);
        adapt_head(&mut m, HeadPolicy::Reinit, 2);
        assert_eq!(m.head().w.get(0, 0), 0.0);
    }
}
