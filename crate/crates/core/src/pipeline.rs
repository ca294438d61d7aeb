//! End-to-end runs driven by one declarative [`RunConfig`]: scene loading,
//! feature extraction, source pretraining with active learning, active
//! transfer to a target scene, and whole-scene classification.
//!
//! Every random draw comes from a sub-stream of `RunConfig::seed`
//! (see [`Stream`]), so a run is a pure function of its configuration and
//! input files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::{al_pretrain_loop, write_history_csv, AlConfig, AlRecord, AlState, GroundTruth};
use crate::data::{
    compute_metrics, holdout, load_cube, load_labels, split, split_indices, synth_benchmark, Domain,
    HyperCube, LabelMap, Metrics, SampleSet, SplitSpec, SynthConfig,
};
use crate::emap::{build_emap_on, emap_basis, EmapConfig};
use crate::error::{Error, Result};
use crate::network::{
    pretrain_joint, pretrain_single, train_supervised, BranchConfig, Classifier, ModelFile, SupervisedConfig,
    Trainable,
};
use crate::numcore::{substream, Matrix, Pca, Stream};
use crate::transfer::{active_transfer, TransferConfig, TransferReport};

pub const MODEL_FILE: &str = "model.ssae";
pub const HISTORY_FILE: &str = "al_history.csv";
pub const SOURCE_TRAINING_FILE: &str = "source_training.csv";
pub const TRANSFERRED_MODEL_FILE: &str = "transferred_model.ssae";
pub const TRANSFER_REPORT_FILE: &str = "transfer_report.csv";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where the scenes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated source/target pair.
    Synthetic(SynthConfig),
    /// Cube and label files; the target pair is needed only for transfer.
    Files(FileSources),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSources {
    pub source_cube: PathBuf,
    pub source_labels: PathBuf,
    pub target_cube: Option<PathBuf>,
    pub target_labels: Option<PathBuf>,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthConfig::default())
    }
}

/// Which per-pixel features feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Spectral and EMAP branches fused by a third stack.
    Joint,
    /// Scaled spectra only, one stack built from the spectral branch settings.
    Spectral,
    /// EMAP only, one stack built from the spatial branch settings.
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
    pub emap: EmapConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            mode: FeatureMode::Joint,
            emap: EmapConfig::default(),
        }
    }
}

/// Target-scene holdout for transfer: `candidate_ratio` of each class forms
/// the unlabeled query pool, the rest is the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub candidate_ratio: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { candidate_ratio: 0.2 }
    }
}

/// Everything a run needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub features: FeatureConfig,
    pub branches: BranchConfig,
    pub supervised: SupervisedConfig,
    pub split: SplitSpec,
    pub active: AlConfig,
    pub transfer: TransferConfig,
    pub target: TargetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataSource::default(),
            features: FeatureConfig::default(),
            branches: BranchConfig::default(),
            supervised: SupervisedConfig::default(),
            split: SplitSpec::default(),
            active: AlConfig::default(),
            transfer: TransferConfig::default(),
            target: TargetConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        self.features.emap.validate()?;
        self.branches.validate()?;
        self.supervised.validate()?;
        self.split.validate()?;
        self.active.validate()?;
        self.transfer.validate()?;
        if !(0.0..=1.0).contains(&self.target.candidate_ratio) {
            return Err(Error::InvalidParameter(format!(
                "target.candidate_ratio must lie in [0, 1], got {}",
                self.target.candidate_ratio
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scenes and features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Scene {
    pub cube: HyperCube,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct Scenes {
    pub source: Scene,
    pub target: Option<Scene>,
}

/// Generates or reads the scenes named by `data`.
pub fn load_scenes(data: &DataSource, seed: u64) -> Result<Scenes> {
    match data {
        DataSource::Synthetic(cfg) => {
            let (source, target) = synth_benchmark(cfg, &mut substream(seed, Stream::Synthetic))?;
            Ok(Scenes {
                source: Scene {
                    cube: source.cube,
                    labels: source.labels,
                },
                target: Some(Scene {
                    cube: target.cube,
                    labels: target.labels,
                }),
            })
        }
        DataSource::Files(f) => {
            let source = read_scene(&f.source_cube, &f.source_labels)?;
            let target = match (&f.target_cube, &f.target_labels) {
                (Some(c), Some(l)) => Some(read_scene(c, l)?),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "data: target_cube and target_labels must be given together".into(),
                    ))
                }
            };
            Ok(Scenes { source, target })
        }
    }
}

fn read_scene(cube: &Path, labels: &Path) -> Result<Scene> {
    let cube = load_cube(cube)?;
    let labels = load_labels(labels)?;
    labels.matches(&cube)?;
    Ok(Scene { cube, labels })
}

/// Per-pixel feature rows of a scene.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    /// `pixels × (spectral_dim + spatial columns)`.
    pub x: Matrix,
    /// Width of the leading spectral block (0 in spatial mode).
    pub spectral_dim: usize,
}

/// Principal directions the EMAP of every scene of a run is built on: those
/// of the source scene. `None` when the features use no EMAP.
pub fn emap_reference(source: &HyperCube, cfg: &FeatureConfig) -> Result<Option<Pca>> {
    match cfg.mode {
        FeatureMode::Spectral => Ok(None),
        FeatureMode::Joint | FeatureMode::Spatial => emap_basis(source, &cfg.emap).map(Some),
    }
}

/// Builds the feature rows for `mode`: the first `bands` scaled bands, the
/// EMAP of the whole cube, or `[spectra | EMAP]`.
///
/// The EMAP component images are projections on `reference` when it has
/// the cube's band count, so that scenes share one set of principal
/// directions; otherwise the cube's own principal directions are used.
pub fn scene_features(
    cube: &HyperCube,
    cfg: &FeatureConfig,
    bands: usize,
    reference: Option<&Pca>,
) -> Result<SceneFeatures> {
    if bands == 0 || bands > cube.bands() {
        return Err(Error::InvalidParameter(format!(
            "spectral block of {bands} bands requested from a {}-band cube",
            cube.bands()
        )));
    }
    let spectra = || cube.spectra().truncate_cols(bands);
    let emap = || match reference {
        Some(basis) if basis.means.len() == cube.bands() => build_emap_on(cube, basis, &cfg.emap),
        _ => build_emap_on(cube, &emap_basis(cube, &cfg.emap)?, &cfg.emap),
    };
    Ok(match cfg.mode {
        FeatureMode::Spectral => SceneFeatures {
            x: spectra(),
            spectral_dim: bands,
        },
        FeatureMode::Spatial => SceneFeatures {
            x: emap()?,
            spectral_dim: 0,
        },
        FeatureMode::Joint => SceneFeatures {
            x: spectra().hcat(&emap()?)?,
            spectral_dim: bands,
        },
    })
}

// ---------------------------------------------------------------------------
// Pretraining on the source scene
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: ModelFile,
    pub history: Vec<AlRecord>,
    /// Final labeled source set: the initial draw plus every queried batch.
    pub training: SampleSet,
}

/// Splits the source scene, pretrains the branches on the training draw,
/// runs the supervised schedule and then the active-learning loop.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let scenes = load_scenes(&cfg.data, cfg.seed)?;
    pretrain_on(cfg, &scenes.source)
}

/// [`run_pretrain`] on an already loaded source scene.
pub fn pretrain_on(cfg: &RunConfig, source: &Scene) -> Result<PretrainOutcome> {
    let reference = emap_reference(&source.cube, &cfg.features)?;
    let feats = scene_features(
        &source.cube,
        &cfg.features,
        source.cube.bands(),
        reference.as_ref(),
    )?;
    let (train, candidate, test) = split(
        &feats.x,
        &source.labels,
        &cfg.split,
        Domain::Source,
        &mut substream(cfg.seed, Stream::Split),
    )?;
    let classes = source.labels.class_count();
    let oracle = GroundTruth::new(&source.labels);
    match cfg.features.mode {
        FeatureMode::Joint => {
            let model = pretrain_joint(
                train.features(),
                feats.spectral_dim,
                classes,
                &cfg.branches,
                cfg.seed,
            )?;
            let (model, history, training) =
                supervised_and_active(cfg, model, train, candidate, &test, &oracle)?;
            Ok(PretrainOutcome {
                model: ModelFile::Joint(model),
                history,
                training,
            })
        }
        mode => {
            let (hidden, hyper) = match mode {
                FeatureMode::Spectral => (&cfg.branches.spectral_hidden, &cfg.branches.spectral_sae),
                _ => (&cfg.branches.spatial_hidden, &cfg.branches.spatial_sae),
            };
            let model = pretrain_single(train.features(), hidden, hyper, classes, cfg.seed)?;
            let (model, history, training) =
                supervised_and_active(cfg, model, train, candidate, &test, &oracle)?;
            Ok(PretrainOutcome {
                model: ModelFile::Single(model),
                history,
                training,
            })
        }
    }
}

fn supervised_and_active<M: Trainable>(
    cfg: &RunConfig,
    mut model: M,
    train: SampleSet,
    candidate: SampleSet,
    test: &SampleSet,
    oracle: &GroundTruth<'_>,
) -> Result<(M, Vec<AlRecord>, SampleSet)> {
    train_supervised(&mut model, &train, &cfg.supervised, cfg.seed)?;
    let mut state = AlState::new(train, candidate, model)?;
    al_pretrain_loop(
        &mut state,
        &cfg.active,
        oracle,
        test,
        &mut substream(cfg.seed, Stream::ActiveLearning),
    )?;
    Ok((state.model, state.history, state.training))
}

/// Writes the model, the learning curve and the labeled source pixels.
pub fn write_pretrain(outcome: &PretrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.model.save(&dir.join(MODEL_FILE))?;
    write_history_csv(&dir.join(HISTORY_FILE), &outcome.history)?;
    let labels = outcome.training.required_labels()?;
    let rows: Vec<(usize, usize)> = outcome.training.pixels().iter().copied().zip(labels).collect();
    write_training_csv(&dir.join(SOURCE_TRAINING_FILE), &rows)
}

#[derive(Serialize, Deserialize)]
struct TrainingRow {
    pixel: usize,
    /// One-based class id, as in label files.
    class: usize,
}

/// Writes `pixel,class` rows (pixel row-major, class one-based).
pub fn write_training_csv(path: &Path, rows: &[(usize, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for &(pixel, class) in rows {
        w.serialize(TrainingRow {
            pixel,
            class: class + 1,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the rows written by [`write_training_csv`], returning zero-based
/// classes.
pub fn read_training_csv(path: &Path) -> Result<Vec<(usize, usize)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let offset = record.position().map_or(0, |p| p.byte() as usize);
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            offset,
            reason,
        };
        let row: TrainingRow = record
            .deserialize(Some(&headers))
            .map_err(|e| malformed(e.to_string()))?;
        if row.class == 0 {
            return Err(malformed("class ids are one-based".into()));
        }
        out.push((row.pixel, row.class - 1));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Transfer to the target scene
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub model: ModelFile,
    pub report: TransferReport,
}

/// Loads the scenes of `cfg` and transfers `model`, trained on the labeled
/// source pixels `source_training` (`(pixel, zero-based class)`), to the
/// target scene.
pub fn run_transfer(
    cfg: &RunConfig,
    model: ModelFile,
    source_training: &[(usize, usize)],
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let scenes = load_scenes(&cfg.data, cfg.seed)?;
    let target = scenes
        .target
        .as_ref()
        .ok_or_else(|| Error::Config("transfer needs target_cube and target_labels in [data]".into()))?;
    transfer_on(cfg, model, &scenes.source, source_training, target)
}

/// [`run_transfer`] on already loaded scenes.
///
/// When the scenes have different band counts, both are cut to the common
/// leading bands and the spectral inputs of the model are truncated to match;
/// the target EMAP then falls back to the target's own principal directions.
/// The target holdout continues the split stream after replaying the source
/// split, so it does not depend on what the source run learned.
pub fn transfer_on(
    cfg: &RunConfig,
    model: ModelFile,
    source: &Scene,
    source_training: &[(usize, usize)],
    target: &Scene,
) -> Result<TransferOutcome> {
    let bands = source.cube.bands().min(target.cube.bands());
    let reference = emap_reference(&source.cube, &cfg.features)?;
    let src = scene_features(&source.cube, &cfg.features, bands, reference.as_ref())?;
    let tgt = scene_features(&target.cube, &cfg.features, bands, reference.as_ref())?;

    let plane = source.labels.height() * source.labels.width();
    if let Some(&(pixel, _)) = source_training.iter().find(|&&(p, _)| p >= plane) {
        return Err(Error::InvalidParameter(format!(
            "source training pixel {pixel} lies outside the {plane}-pixel source scene"
        )));
    }
    let pixels: Vec<usize> = source_training.iter().map(|&(p, _)| p).collect();
    let source_set = SampleSet::new(
        src.x.select_rows(&pixels),
        source_training.iter().map(|&(_, c)| Some(c)).collect(),
        pixels,
        vec![Domain::Source; source_training.len()],
    )?;

    let mut rng = substream(cfg.seed, Stream::Split);
    split_indices(&source.labels, &cfg.split, &mut rng)?;
    let (pool, test) = holdout(
        &tgt.x,
        &target.labels,
        cfg.target.candidate_ratio,
        Domain::Target,
        &mut rng,
    )?;

    let oracle = GroundTruth::new(&target.labels);
    let mut rng = substream(cfg.seed, Stream::Transfer);
    match (model, cfg.features.mode) {
        (ModelFile::Joint(mut m), FeatureMode::Joint) => {
            if m.spectral_dim() > bands {
                m.truncate_spectral(bands);
            }
            check_input(&m, src.x.cols())?;
            let (m, report) = active_transfer(m, source_set, pool, &test, &cfg.transfer, &oracle, &mut rng)?;
            Ok(TransferOutcome {
                model: ModelFile::Joint(m),
                report,
            })
        }
        (ModelFile::Single(mut m), FeatureMode::Spectral | FeatureMode::Spatial) => {
            if cfg.features.mode == FeatureMode::Spectral && m.input_dim() > bands {
                m.truncate_inputs(bands);
            }
            check_input(&m, src.x.cols())?;
            let (m, report) = active_transfer(m, source_set, pool, &test, &cfg.transfer, &oracle, &mut rng)?;
            Ok(TransferOutcome {
                model: ModelFile::Single(m),
                report,
            })
        }
        (_, mode) => Err(mode_mismatch(mode)),
    }
}

/// Writes the transferred model and the per-round report.
pub fn write_transfer(outcome: &TransferOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.model.save(&dir.join(TRANSFERRED_MODEL_FILE))?;
    outcome.report.write_csv(&dir.join(TRANSFER_REPORT_FILE))
}

fn check_input<C: Classifier>(model: &C, cols: usize) -> Result<()> {
    if model.input_dim() != cols {
        return Err(Error::DimensionMismatch {
            op: "model input vs scene features",
            expected: model.input_dim(),
            actual: cols,
        });
    }
    Ok(())
}

fn mode_mismatch(mode: FeatureMode) -> Error {
    Error::Config(format!(
        "features.mode = {mode:?} does not match the model file (joint models need mode joint, \
         single stacks need spectral or spatial)"
    ))
}

// ---------------------------------------------------------------------------
// Classification and evaluation
// ---------------------------------------------------------------------------

/// Predicts a class for every pixel of `cube`; the result uses one-based
/// class ids like label files. `reference` is the run's EMAP basis
/// (see [`emap_reference`]).
pub fn classify(
    model: &ModelFile,
    cube: &HyperCube,
    features: &FeatureConfig,
    reference: Option<&Pca>,
) -> Result<LabelMap> {
    let pred = match (model, features.mode) {
        (ModelFile::Joint(m), FeatureMode::Joint) => {
            predict_scene(m, cube, features, m.spectral_dim(), reference)?
        }
        (ModelFile::Single(m), FeatureMode::Spectral) => {
            predict_scene(m, cube, features, m.input_dim(), reference)?
        }
        (ModelFile::Single(m), FeatureMode::Spatial) => {
            predict_scene(m, cube, features, cube.bands(), reference)?
        }
        (_, mode) => return Err(mode_mismatch(mode)),
    };
    let classes = pred
        .into_iter()
        .map(|c| {
            u16::try_from(c + 1)
                .map_err(|_| Error::InvalidParameter(format!("class {c} exceeds the label range")))
        })
        .collect::<Result<Vec<u16>>>()?;
    LabelMap::new(cube.height(), cube.width(), classes)
}

fn predict_scene<C: Classifier>(
    model: &C,
    cube: &HyperCube,
    features: &FeatureConfig,
    bands: usize,
    reference: Option<&Pca>,
) -> Result<Vec<usize>> {
    if bands > cube.bands() {
        return Err(Error::DimensionMismatch {
            op: "model spectral inputs vs cube bands",
            expected: bands,
            actual: cube.bands(),
        });
    }
    let feats = scene_features(cube, features, bands, reference)?;
    check_input(model, feats.x.cols())?;
    model.predict_batch(&feats.x)
}

/// Scores a predicted map against a reference map on the labeled pixels of
/// the reference. Unlabeled predictions count as errors.
pub fn eval(predicted: &LabelMap, truth: &LabelMap) -> Result<Metrics> {
    if (predicted.height(), predicted.width()) != (truth.height(), truth.width()) {
        return Err(Error::DimensionMismatch {
            op: "predicted vs reference label map",
            expected: truth.height() * truth.width(),
            actual: predicted.height() * predicted.width(),
        });
    }
    let pixels = truth.labeled_pixels();
    let classes = truth.class_count().max(predicted.class_count());
    let unlabeled = classes;
    let pred: Vec<usize> = pixels
        .iter()
        .map(|&p| predicted.class_of(p).unwrap_or(unlabeled))
        .collect();
    let reference: Vec<usize> = pixels
        .iter()
        .map(|&p| truth.class_of(p).expect("labeled"))
        .collect();
    let class_count = if pred.contains(&unlabeled) {
        classes + 1
    } else {
        classes
    };
    compute_metrics(&pred, &reference, class_count)
}

/// Writes a one-row `OA,AA,Kappa` CSV.
pub fn write_metrics_csv(path: &Path, m: &Metrics) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        #[serde(rename = "OA")]
        oa: f64,
        #[serde(rename = "AA")]
        aa: f64,
        #[serde(rename = "Kappa")]
        kappa: f64,
    }
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(Row {
        oa: m.oa,
        aa: m.aa,
        kappa: m.kappa,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}
