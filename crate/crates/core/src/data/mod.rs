//! Hyperspectral cubes, label maps, sample sets, splits and accuracy metrics.

mod io;
mod metrics;
mod split;
mod synth;

pub use io::{
    load_cube, load_features, load_labels, save_cube, save_features, save_labels, CUBE_MAGIC, FEATURE_MAGIC,
    LABEL_MAGIC,
};
pub use metrics::{compute_metrics, Metrics};
pub use split::{holdout, holdout_indices, split, split_indices, SplitIndices, SplitSpec};
pub use synth::{synth_benchmark, SynthConfig, SyntheticScene};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Band-sequential hyperspectral cube.
///
/// Raw 32-bit values are kept as stored; every numeric consumer reads the
/// per-band min-max scaled view in `[0, 1]`. A constant band scales to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    raw: Vec<f32>,
    band_min: Vec<f32>,
    band_max: Vec<f32>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, raw: Vec<f32>) -> Result<Self> {
        let expected = height * width * bands;
        if raw.len() != expected {
            return Err(Error::DimensionMismatch {
                op: "HyperCube::new",
                expected,
                actual: raw.len(),
            });
        }
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Empty("HyperCube"));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("HyperCube values"));
        }
        let plane = height * width;
        let (band_min, band_max) = raw
            .chunks_exact(plane)
            .map(|band| {
                band.iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .unzip();
        Ok(Self {
            height,
            width,
            bands,
            raw,
            band_min,
            band_max,
        })
    }

    /// Cube from per-pixel spectra in row-major pixel order.
    pub fn from_spectra(height: usize, width: usize, spectra: &Matrix) -> Result<Self> {
        let bands = spectra.cols();
        let plane = height * width;
        if spectra.rows() != plane {
            return Err(Error::DimensionMismatch {
                op: "HyperCube::from_spectra",
                expected: plane,
                actual: spectra.rows(),
            });
        }
        let mut raw = vec![0f32; plane * bands];
        for p in 0..plane {
            for (b, &v) in spectra.row(p).iter().enumerate() {
                raw[b * plane + p] = v as f32;
            }
        }
        Self::new(height, width, bands, raw)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn raw(&self) -> &[f32] {
        &self.raw
    }

    pub fn raw_value(&self, band: usize, row: usize, col: usize) -> f32 {
        self.raw[band * self.pixel_count() + row * self.width + col]
    }

    /// Per-band `(min, max)` of the raw values, the scaling applied on read.
    pub fn band_range(&self, band: usize) -> (f32, f32) {
        (self.band_min[band], self.band_max[band])
    }

    #[inline]
    fn scale(&self, band: usize, v: f32) -> f64 {
        let (lo, hi) = (self.band_min[band] as f64, self.band_max[band] as f64);
        if hi > lo {
            (v as f64 - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    /// Scaled values of one band, row-major.
    pub fn band_scaled(&self, band: usize) -> Vec<f64> {
        let plane = self.pixel_count();
        self.raw[band * plane..(band + 1) * plane]
            .iter()
            .map(|&v| self.scale(band, v))
            .collect()
    }

    pub fn spectrum(&self, pixel: usize) -> Vec<f64> {
        let plane = self.pixel_count();
        (0..self.bands)
            .map(|b| self.scale(b, self.raw[b * plane + pixel]))
            .collect()
    }

    /// Scaled spectra of every pixel, `pixels × bands`.
    pub fn spectra(&self) -> Matrix {
        let plane = self.pixel_count();
        let mut out = Matrix::zeros(plane, self.bands);
        for b in 0..self.bands {
            for (p, v) in self.band_scaled(b).into_iter().enumerate() {
                out.set(p, b, v);
            }
        }
        out
    }

    /// Keeps the first `bands` bands.
    pub fn truncate_bands(&self, bands: usize) -> HyperCube {
        let bands = bands.min(self.bands);
        let plane = self.pixel_count();
        Self {
            height: self.height,
            width: self.width,
            bands,
            raw: self.raw[..bands * plane].to_vec(),
            band_min: self.band_min[..bands].to_vec(),
            band_max: self.band_max[..bands].to_vec(),
        }
    }
}

/// Per-pixel class ids; 0 marks an unlabeled pixel, classes are `1..=C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u16>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::DimensionMismatch {
                op: "LabelMap::new",
                expected: height * width,
                actual: classes.len(),
            });
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.classes
    }

    /// Largest class id present.
    pub fn class_count(&self) -> usize {
        self.classes.iter().copied().max().unwrap_or(0) as usize
    }

    /// Zero-based class of a pixel, `None` when unlabeled.
    pub fn class_of(&self, pixel: usize) -> Option<usize> {
        match self.classes.get(pixel) {
            Some(&c) if c > 0 => Some(c as usize - 1),
            _ => None,
        }
    }

    pub fn labeled_pixels(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&p| self.classes[p] > 0).collect()
    }

    pub fn matches(&self, cube: &HyperCube) -> Result<()> {
        if self.height != cube.height() || self.width != cube.width() {
            return Err(Error::Malformed {
                path: "<label map>".into(),
                offset: 0,
                reason: format!(
                    "label map is {}x{} but the cube is {}x{}",
                    self.height,
                    self.width,
                    cube.height(),
                    cube.width()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

/// Feature rows with optional zero-based labels, their pixel positions and
/// the scene they came from. A `(domain, pixel)` pair appears at most once.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    features: Matrix,
    labels: Vec<Option<usize>>,
    pixels: Vec<usize>,
    domains: Vec<Domain>,
}

impl SampleSet {
    pub fn new(
        features: Matrix,
        labels: Vec<Option<usize>>,
        pixels: Vec<usize>,
        domains: Vec<Domain>,
    ) -> Result<Self> {
        let n = features.rows();
        for len in [labels.len(), pixels.len(), domains.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    op: "SampleSet::new",
                    expected: n,
                    actual: len,
                });
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for (d, p) in domains.iter().zip(&pixels) {
            if !seen.insert((*d, *p)) {
                return Err(Error::DuplicateSample(*p));
            }
        }
        Ok(Self {
            features,
            labels,
            pixels,
            domains,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dim),
            labels: Vec::new(),
            pixels: Vec::new(),
            domains: Vec::new(),
        }
    }

    /// Rows of `features` (one per pixel of the scene) at `pixels`, labeled
    /// from `labels`.
    pub fn from_pixels(
        features: &Matrix,
        labels: &LabelMap,
        pixels: &[usize],
        domain: Domain,
    ) -> Result<Self> {
        Self::new(
            features.select_rows(pixels),
            pixels.iter().map(|&p| labels.class_of(p)).collect(),
            pixels.to_vec(),
            vec![domain; pixels.len()],
        )
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn set_label(&mut self, i: usize, class: usize) {
        self.labels[i] = Some(class);
    }

    /// Labels of every sample; fails on the first unlabeled one.
    pub fn required_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.pixels)
            .map(|(l, &p)| l.ok_or(Error::OracleFailure(p)))
            .collect()
    }

    pub fn count_domain(&self, domain: Domain) -> usize {
        self.domains.iter().filter(|&&d| d == domain).count()
    }

    pub fn select(&self, indices: &[usize]) -> SampleSet {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels: indices.iter().map(|&i| self.pixels[i]).collect(),
            domains: indices.iter().map(|&i| self.domains[i]).collect(),
        }
    }

    /// Splits off the samples at `indices`, returning `(kept, removed)`.
    pub fn partition(&self, indices: &[usize]) -> (SampleSet, SampleSet) {
        let chosen: HashSet<usize> = indices.iter().copied().collect();
        let kept: Vec<usize> = (0..self.len()).filter(|i| !chosen.contains(i)).collect();
        (self.select(&kept), self.select(indices))
    }

    /// Appends `other`; fails if any `(domain, pixel)` would repeat.
    pub fn extend(&mut self, other: &SampleSet) -> Result<()> {
        let merged = Self::new(
            self.features.vcat(&other.features)?,
            self.labels.iter().chain(&other.labels).copied().collect(),
            self.pixels.iter().chain(&other.pixels).copied().collect(),
            self.domains.iter().chain(&other.domains).copied().collect(),
        )?;
        *self = merged;
        Ok(())
    }

    /// Same samples with features cut to the column range `[start, start+len)`.
    pub fn with_feature_block(&self, start: usize, len: usize) -> SampleSet {
        Self {
            features: self.features.column_block(start, len),
            ..self.clone()
        }
    }

    pub fn with_features(&self, features: Matrix) -> Result<SampleSet> {
        Self::new(
            features,
            self.labels.clone(),
            self.pixels.clone(),
            self.domains.clone(),
        )
    }
}
