//! Stratified train / candidate / test splits of the labeled pixels.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Domain, LabelMap, SampleSet};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, RngState};

/// How many labeled pixels of each class go to training and to the
/// active-learning candidate pool. Everything else is test data.
///
/// Exactly one of `train_per_class` and `train_ratio` is set. The candidate
/// pool takes `candidate_ratio` of what remains after the training draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_per_class: Option<usize>,
    pub train_ratio: Option<f64>,
    pub candidate_ratio: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_per_class: Some(25),
            train_ratio: None,
            candidate_ratio: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn per_class(r: usize) -> Self {
        Self {
            train_per_class: Some(r),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.train_per_class, self.train_ratio) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::InvalidParameter(
                    "split: set exactly one of train_per_class and train_ratio".into(),
                ))
            }
            (None, Some(f)) if !(f > 0.0 && f < 1.0) => {
                return Err(Error::InvalidParameter(format!(
                    "split: train_ratio must lie in (0, 1), got {f}"
                )))
            }
            (Some(0), None) => {
                return Err(Error::InvalidParameter(
                    "split: train_per_class must be positive".into(),
                ))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.candidate_ratio) {
            return Err(Error::InvalidParameter(format!(
                "split: candidate_ratio must lie in [0, 1], got {}",
                self.candidate_ratio
            )));
        }
        Ok(())
    }

    fn train_count(&self, available: usize) -> usize {
        match (self.train_per_class, self.train_ratio) {
            (Some(r), _) => r,
            (None, Some(f)) => ((f * available as f64).round() as usize).max(1),
            (None, None) => 0,
        }
    }
}

/// Pixel indices of the three disjoint parts, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub candidate: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws the split class by class in ascending class order, shuffling each
/// class's pixels with `rng`.
pub fn split_indices(labels: &LabelMap, spec: &SplitSpec, rng: &mut RngState) -> Result<SplitIndices> {
    spec.validate()?;
    draw_indices(labels, |n| spec.train_count(n), spec.candidate_ratio, rng)
}

/// Target-scene draw with no training part: `candidate_ratio` of every
/// class goes to the unlabeled pool, the rest to the test set.
pub fn holdout_indices(labels: &LabelMap, candidate_ratio: f64, rng: &mut RngState) -> Result<SplitIndices> {
    if !(0.0..=1.0).contains(&candidate_ratio) {
        return Err(Error::InvalidParameter(format!(
            "holdout: candidate_ratio must lie in [0, 1], got {candidate_ratio}"
        )));
    }
    draw_indices(labels, |_| 0, candidate_ratio, rng)
}

fn draw_indices(
    labels: &LabelMap,
    train_count: impl Fn(usize) -> usize,
    candidate_ratio: f64,
    rng: &mut RngState,
) -> Result<SplitIndices> {
    let classes = labels.class_count();
    if classes == 0 {
        return Err(Error::Empty("split (no labeled pixels)"));
    }
    let mut by_class = vec![Vec::new(); classes];
    for p in labels.labeled_pixels() {
        by_class[labels.class_of(p).expect("labeled")].push(p);
    }
    let mut out = SplitIndices {
        train: Vec::new(),
        candidate: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut pixels) in by_class.into_iter().enumerate() {
        let available = pixels.len();
        if available == 0 {
            continue;
        }
        let r = train_count(available);
        if available < r + 1 {
            return Err(Error::ClassTooSmall {
                class: class + 1,
                available,
                required: r + 1,
            });
        }
        pixels.shuffle(rng);
        let rest = available - r;
        let c = (candidate_ratio * rest as f64).round() as usize;
        out.train.extend_from_slice(&pixels[..r]);
        out.candidate.extend_from_slice(&pixels[r..r + c]);
        out.test.extend_from_slice(&pixels[r + c..]);
    }
    out.train.sort_unstable();
    out.candidate.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Splits the rows of a per-pixel feature matrix into `(train, candidate,
/// test)` sample sets. Training and test samples carry their labels; the
/// candidate pool is returned unlabeled, to be revealed by an oracle.
pub fn split(
    features: &Matrix,
    labels: &LabelMap,
    spec: &SplitSpec,
    domain: Domain,
    rng: &mut RngState,
) -> Result<(SampleSet, SampleSet, SampleSet)> {
    check_rows(features, labels, "split")?;
    let idx = split_indices(labels, spec, rng)?;
    let train = SampleSet::from_pixels(features, labels, &idx.train, domain)?;
    let (candidate, test) = pool_and_test(features, labels, &idx, domain)?;
    Ok((train, candidate, test))
}

/// Splits a target scene into an unlabeled candidate pool and a labeled
/// test set (see [`holdout_indices`]).
pub fn holdout(
    features: &Matrix,
    labels: &LabelMap,
    candidate_ratio: f64,
    domain: Domain,
    rng: &mut RngState,
) -> Result<(SampleSet, SampleSet)> {
    check_rows(features, labels, "holdout")?;
    let idx = holdout_indices(labels, candidate_ratio, rng)?;
    pool_and_test(features, labels, &idx, domain)
}

fn check_rows(features: &Matrix, labels: &LabelMap, op: &'static str) -> Result<()> {
    let plane = labels.height() * labels.width();
    if features.rows() != plane {
        return Err(Error::DimensionMismatch {
            op,
            expected: plane,
            actual: features.rows(),
        });
    }
    Ok(())
}

fn pool_and_test(
    features: &Matrix,
    labels: &LabelMap,
    idx: &SplitIndices,
    domain: Domain,
) -> Result<(SampleSet, SampleSet)> {
    let candidate = SampleSet::new(
        features.select_rows(&idx.candidate),
        vec![None; idx.candidate.len()],
        idx.candidate.clone(),
        vec![domain; idx.candidate.len()],
    )?;
    let test = SampleSet::from_pixels(features, labels, &idx.test, domain)?;
    Ok((candidate, test))
}
