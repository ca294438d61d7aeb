//! Synthetic two-scene benchmark: Gaussian class signatures laid out in
//! spatial blobs, with a controllable class-wise spectral shift between the
//! source and the target scene.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{HyperCube, LabelMap};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Size of the per-class mean displacement of the target scene, in the
    /// same units as `separation` (each displacement curve has unit RMS
    /// per band).
    pub shift: f64,
    /// Standard deviation of the i.i.d. per-band Gaussian pixel noise.
    pub noise: f64,
    /// Voronoi regions per class in each scene.
    pub blobs_per_class: usize,
    /// Scale of the class-specific part of each signature.
    pub separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            bands: 30,
            height: 64,
            width: 64,
            shift: 0.0,
            noise: 0.05,
            blobs_per_class: 4,
            separation: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("synthetic benchmark: {what}")));
        if self.classes < 1 || self.classes > u16::MAX as usize {
            return bad("classes must lie in 1..=65535");
        }
        if self.bands == 0 || self.height == 0 || self.width == 0 {
            return bad("bands, height and width must be positive");
        }
        if self.blobs_per_class == 0 {
            return bad("blobs_per_class must be positive");
        }
        if self.classes * self.blobs_per_class > self.height * self.width {
            return bad("more blobs than pixels");
        }
        for (name, v) in [
            ("shift", self.shift),
            ("noise", self.noise),
            ("separation", self.separation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// One generated scene with its class means (`classes × bands`, raw units).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cube: HyperCube,
    pub labels: LabelMap,
    pub means: Matrix,
}

/// Zero-mean smooth random curve over the bands with unit RMS.
fn smooth_curve(bands: usize, rng: &mut RngState) -> Vec<f64> {
    let mut curve = vec![0.0; bands];
    for _ in 0..3 {
        let amp: f64 = rng.random_range(0.5..1.0);
        let freq: f64 = rng.random_range(0.5..3.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for (b, v) in curve.iter_mut().enumerate() {
            let t = b as f64 / bands as f64;
            *v += amp * (std::f64::consts::TAU * freq * t + phase).sin();
        }
    }
    let mean = curve.iter().sum::<f64>() / bands as f64;
    curve.iter_mut().for_each(|v| *v -= mean);
    let rms = (curve.iter().map(|v| v * v).sum::<f64>() / bands as f64).sqrt();
    if rms > 0.0 {
        curve.iter_mut().for_each(|v| *v /= rms);
    } else {
        // A single band has no shape; use a unit offset instead.
        curve.iter_mut().for_each(|v| *v = 1.0);
    }
    curve
}

/// Voronoi partition of the image into `classes × blobs_per_class` cells;
/// cell `i` belongs to class `i mod classes`. Returns 1-based class ids.
fn blob_layout(cfg: &SynthConfig, rng: &mut RngState) -> Vec<u16> {
    let cells = cfg.classes * cfg.blobs_per_class;
    let seeds: Vec<(f64, f64)> = (0..cells)
        .map(|_| {
            (
                rng.random_range(0.0..cfg.height as f64),
                rng.random_range(0.0..cfg.width as f64),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.height * cfg.width);
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = seeds
                .iter()
                .enumerate()
                .map(|(i, &(sy, sx))| (i, (sy - y).powi(2) + (sx - x).powi(2)))
                .fold(
                    (0, f64::INFINITY),
                    |best, cur| if cur.1 < best.1 { cur } else { best },
                )
                .0;
            out.push((nearest % cfg.classes + 1) as u16);
        }
    }
    out
}

fn render(cfg: &SynthConfig, means: &Matrix, rng: &mut RngState) -> Result<SyntheticScene> {
    let classes = blob_layout(cfg, rng);
    let plane = cfg.height * cfg.width;
    let mut spectra = Matrix::zeros(plane, cfg.bands);
    for (p, &class) in classes.iter().enumerate() {
        let mean = means.row(class as usize - 1);
        for (v, &m) in spectra.row_mut(p).iter_mut().zip(mean) {
            let z: f64 = StandardNormal.sample(rng);
            *v = m + cfg.noise * z;
        }
    }
    Ok(SyntheticScene {
        cube: HyperCube::from_spectra(cfg.height, cfg.width, &spectra)?,
        labels: LabelMap::new(cfg.height, cfg.width, classes)?,
        means: means.clone(),
    })
}

/// Generates `(source, target)` scenes. Every pixel is labeled.
///
/// Class `c` has mean `base + separation·u_c` in the source and
/// `base + separation·u_c + shift·d_c` in the target, where `u_c` and `d_c`
/// are independent smooth unit-RMS curves. A class-dependent displacement is
/// used rather than a common offset because the per-band min-max scaling
/// applied on load would cancel a common offset.
pub fn synth_benchmark(cfg: &SynthConfig, rng: &mut RngState) -> Result<(SyntheticScene, SyntheticScene)> {
    cfg.validate()?;
    let base: Vec<f64> = (0..cfg.bands)
        .map(|b| 0.5 + 0.1 * (std::f64::consts::PI * b as f64 / cfg.bands as f64).sin())
        .collect();
    let signatures: Vec<Vec<f64>> = (0..cfg.classes).map(|_| smooth_curve(cfg.bands, rng)).collect();
    let drifts: Vec<Vec<f64>> = (0..cfg.classes).map(|_| smooth_curve(cfg.bands, rng)).collect();
    let source_means = Matrix::from_fn(cfg.classes, cfg.bands, |c, b| {
        base[b] + cfg.separation * signatures[c][b]
    });
    let target_means = Matrix::from_fn(cfg.classes, cfg.bands, |c, b| {
        source_means.get(c, b) + cfg.shift * drifts[c][b]
    });
    let source = render(cfg, &source_means, rng)?;
    let target = render(cfg, &target_means, rng)?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded_rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn small() -> SynthConfig {
        SynthConfig {
            height: 16,
            width: 16,
            classes: 3,
            bands: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_shift_keeps_means() {
        let (s, t) = synth_benchmark(&small(), &mut seeded_rng(4)).unwrap();
        assert_eq!(s.means, t.means);
        let shifted = SynthConfig {
            shift: 0.2,
            ..small()
        };
        let (s, t) = synth_benchmark(&shifted, &mut seeded_rng(4)).unwrap();
        assert_ne!(s.means, t.means);
    }

    #[test]
    fn zero_noise_gives_identical_class_spectra() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..small()
        };
        let (s, _) = synth_benchmark(&cfg, &mut seeded_rng(5)).unwrap();
        let plane = s.cube.pixel_count();
        for p in 0..plane {
            let c = s.labels.class_of(p).unwrap();
            for b in 0..cfg.bands {
                let raw = s.cube.raw()[b * plane + p];
                assert_eq!(raw, s.means.get(c, b) as f32);
            }
        }
    }

    #[test]
    fn reproducible_and_every_class_present() {
        let cfg = SynthConfig::default();
        let a = synth_benchmark(&cfg, &mut seeded_rng(6)).unwrap();
        let b = synth_benchmark(&cfg, &mut seeded_rng(6)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.labels.class_count(), cfg.classes);
        assert_eq!(a.1.labels.class_count(), cfg.classes);
    }

    #[test]
    fn bayes_accuracy_matches_gaussian_overlap() {
        // Two isotropic Gaussians: the nearest-mean rule is Bayes optimal and
        // its accuracy is Φ(‖μ₀ − μ₁‖ / 2σ), whatever the class proportions.
        let cfg = SynthConfig {
            classes: 2,
            bands: 10,
            height: 100,
            width: 100,
            noise: 0.1,
            separation: 0.03,
            blobs_per_class: 3,
            shift: 0.0,
        };
        let (s, _) = synth_benchmark(&cfg, &mut seeded_rng(7)).unwrap();
        let plane = s.cube.pixel_count();
        let dist = (0..cfg.bands)
            .map(|b| (s.means.get(0, b) - s.means.get(1, b)).powi(2))
            .sum::<f64>()
            .sqrt();
        let expected = Normal::standard().cdf(dist / (2.0 * cfg.noise));
        assert!(
            expected > 0.6 && expected < 0.95,
            "oracle {expected} is not informative"
        );
        let mut correct = 0;
        for p in 0..plane {
            let d = |c: usize| -> f64 {
                (0..cfg.bands)
                    .map(|b| (s.cube.raw()[b * plane + p] as f64 - s.means.get(c, b)).powi(2))
                    .sum()
            };
            let guess = if d(0) <= d(1) { 0 } else { 1 };
            correct += usize::from(Some(guess) == s.labels.class_of(p));
        }
        let observed = correct as f64 / plane as f64;
        assert!((observed - expected).abs() <= 0.02, "{observed} vs {expected}");
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig {
            classes: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            noise: -1.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            noise: f64::NAN,
            ..small()
        }
        .validate()
        .is_err());
    }
}
