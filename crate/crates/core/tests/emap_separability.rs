//! A linear classifier on EMAP features alone separates two spatial blobs
//! with distinct spectra.

use atlnet::data::{Domain, HyperCube, SampleSet};
use atlnet::emap::{build_emap, EmapConfig};
use atlnet::network::{accuracy, finetune, FinetuneConfig, SsaeNetwork};
use atlnet::numcore::seeded_rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn two_blob_emap_is_linearly_separable() {
    let (h, w, bands) = (24, 24, 8);
    let mut rng = seeded_rng(11);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let left: Vec<f64> = (0..bands).map(|b| 0.3 + 0.05 * b as f64).collect();
    let right: Vec<f64> = (0..bands).map(|b| 0.7 - 0.04 * b as f64).collect();
    let mut raw = vec![0f32; h * w * bands];
    let mut labels = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let (r, c) = (p / w, p % w);
        // a disc in the middle of the scene against the background
        let inside = (r as f64 - 11.5).powi(2) + (c as f64 - 11.5).powi(2) < 49.0;
        let mean = if inside { &right } else { &left };
        for b in 0..bands {
            raw[b * h * w + p] = (mean[b] + noise.sample(&mut rng)) as f32;
        }
        labels.push(Some(usize::from(inside)));
    }
    let cube = HyperCube::new(h, w, bands, raw).unwrap();
    let cfg = EmapConfig {
        pc_count: 2,
        area_thresholds: vec![10.0, 50.0, 100.0],
        std_thresholds: vec![0.05, 0.1],
        ..EmapConfig::default()
    };
    let features = build_emap(&cube, &cfg).unwrap();
    assert_eq!(features.cols(), cfg.feature_dim());

    let set = SampleSet::new(
        features.clone(),
        labels,
        (0..h * w).collect(),
        vec![Domain::Source; h * w],
    )
    .unwrap();
    let mut linear = SsaeNetwork::identity(features.cols()).with_head(2);
    let train = FinetuneConfig {
        epochs: 300,
        lr: 2.0,
        lambda: 0.0,
        batch_size: 1024,
        update_encoders: false,
    };
    finetune(&mut linear, &set, &train, &mut seeded_rng(rng.random())).unwrap();
    assert_eq!(accuracy(&linear, &set).unwrap(), 1.0);
}
