//! Statistical properties of whole training runs on the synthetic benchmark.

use atlnet::active::QueryKind;
use atlnet::autoencoder::SaeHyper;
use atlnet::data::{SampleSet, SplitSpec, SynthConfig};
use atlnet::network::{BranchConfig, FinetuneConfig, ModelFile, SupervisedConfig};
use atlnet::pipeline::{
    classify, emap_reference, eval, load_scenes, pretrain_on, transfer_on, DataSource, RunConfig,
};

const SEEDS: u64 = 10;

fn training_rows(training: &SampleSet) -> Vec<(usize, usize)> {
    training
        .pixels()
        .iter()
        .copied()
        .zip(training.required_labels().unwrap())
        .collect()
}

/// Held-out OA straight after greedy pretraining and softmax-head training,
/// and after the subsequent end-to-end fine-tuning, under the benchmark's
/// training settings. (With the library's default rates and batch size, 25
/// labels per class leave both stages at chance level on this scene.)
#[test]
fn finetuning_beats_pretrained_only_model() {
    let mut improved = 0;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let mut cfg = benchmark(seed);
        cfg.split = SplitSpec::per_class(25);
        cfg.active.max_iters = 0;
        let scene = load_scenes(&cfg.data, seed).unwrap().source;
        let tuned = pretrain_on(&cfg, &scene).unwrap().history[0].oa;
        cfg.supervised.finetune.epochs = 0;
        let pretrained_only = pretrain_on(&cfg, &scene).unwrap().history[0].oa;
        improved += usize::from(tuned > pretrained_only);
        pairs.push((pretrained_only, tuned));
    }
    println!("held-out OA (pretrained only, fine-tuned): {pairs:?}");
    assert!(
        improved >= 9,
        "fine-tuning improved {improved}/{SEEDS} seeds: {pairs:?}"
    );
}

fn refine(epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        lr: 0.5,
        batch_size: 16,
        ..FinetuneConfig::default()
    }
}

fn benchmark(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.data = DataSource::Synthetic(SynthConfig {
        noise: 0.07,
        blobs_per_class: 12,
        ..SynthConfig::default()
    });
    let sae = SaeHyper {
        epochs: 1000,
        lr: 5.0,
        ..SaeHyper::default()
    };
    cfg.branches = BranchConfig {
        spectral_hidden: vec![40, 30],
        spatial_hidden: vec![40, 30],
        fusion_hidden: vec![40, 20],
        spectral_sae: sae.clone(),
        spatial_sae: sae.clone(),
        fusion_sae: sae,
    };
    cfg.supervised = SupervisedConfig {
        softmax: FinetuneConfig {
            update_encoders: false,
            ..refine(200)
        },
        finetune: refine(500),
    };
    cfg.features.emap.pc_count = 2;
    cfg.split = SplitSpec::per_class(10);
    cfg.active.strategy.kind = QueryKind::Mclu;
    cfg.active.strategy.batch_size = 10;
    cfg.active.refine = refine(100);
    cfg
}

/// With the source scene as its own target and no source removal, transfer
/// rounds are further active learning rounds on the same distribution. Both
/// models are scored on the whole scene.
#[test]
fn transfer_without_shift_or_removal_continues_active_learning() {
    const FIRST: usize = 5;
    const MORE: usize = 5;
    let mut per_seed = Vec::new();
    for seed in 0..SEEDS {
        let mut cfg = benchmark(seed);
        let scenes = load_scenes(&cfg.data, seed).unwrap();
        let target = &scenes.source;
        let reference = emap_reference(&scenes.source.cube, &cfg.features).unwrap();
        let features = cfg.features.clone();
        let target_oa = |model: &ModelFile| {
            let map = classify(model, &target.cube, &features, reference.as_ref()).unwrap();
            eval(&map, &target.labels).unwrap().oa
        };

        cfg.active.max_iters = FIRST + MORE;
        let continued = target_oa(&pretrain_on(&cfg, &scenes.source).unwrap().model);

        cfg.active.max_iters = FIRST;
        cfg.transfer.t_plus = cfg.active.strategy.batch_size;
        cfg.transfer.s_minus = 0;
        cfg.transfer.max_iters = MORE;
        cfg.transfer.epsilon = f64::MIN_POSITIVE;
        cfg.transfer.query = cfg.active.strategy.kind;
        cfg.transfer.refine = cfg.active.refine.clone();
        let first = pretrain_on(&cfg, &scenes.source).unwrap();
        let rows = training_rows(&first.training);
        let outcome = transfer_on(&cfg, first.model, &scenes.source, &rows, target).unwrap();
        assert_eq!(outcome.report.rows.len(), MORE + 1);
        per_seed.push((continued, target_oa(&outcome.model)));
    }
    let mean = |f: fn(&(f64, f64)) -> f64| per_seed.iter().map(f).sum::<f64>() / SEEDS as f64;
    let (continued, transferred) = (mean(|p| p.0), mean(|p| p.1));
    println!("mean OA: continued {continued:.4}, transferred {transferred:.4}");
    assert!(
        (continued - transferred).abs() <= 0.005,
        "mean target OA: continued {continued:.4}, transferred {transferred:.4}; per seed {per_seed:?}"
    );
}
