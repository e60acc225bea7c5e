use vipa_core::metrics::iou;
use vipa_core::model::{ModelConfig, Sample, Vipa};
use vipa_core::optim::AdamWConfig;
use vipa_core::scene::{generate_split, SceneGrammar, Split};
use vipa_core::train::{TrainConfig, Trainer};

fn samples(n: usize, root: u64) -> (SceneGrammar, Vec<Sample>) {
    let g = SceneGrammar::default();
    let vocab = g.vocabulary();
    let data = generate_split(&g, root, Split::Train, n, 64).unwrap().iter().map(|s| s.to_sample(&vocab)).collect();
    (g, data)
}

#[test]
fn single_sample_overfits() {
    let (g, data) = samples(1, 3);
    let (model, params) = Vipa::new::<f32>(ModelConfig::default(), g.vocabulary(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 1,
        optim: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&model, params, cfg, 1).unwrap();
    t.fit(&data, |_| {}, |_| {}).unwrap();
    let pred = model.predict(&t.params, &data[0]).unwrap();
    let score = iou(&pred.prediction, &data[0].mask).unwrap();
    assert!(score >= 0.95, "IoU {score}");
}

#[test]
fn loss_falls_over_first_fifty_steps() {
    let (g, data) = samples(400, 0);
    let (model, params) = Vipa::new::<f32>(ModelConfig::default(), g.vocabulary(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&model, params, cfg, 50).unwrap();
    let mut losses = Vec::new();
    t.run_epoch(&data, |s| losses.push(s.seg_loss + s.contrastive_loss)).unwrap();
    assert_eq!(losses.len(), 50);
    // 10-step averages, one per block of ten steps
    let avg: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] < w[0], "average rose: {avg:?}");
    }
}
