mod common;

use rand::Rng;
use saane::config::RunConfig;
use saane::io::FeatureRecord;
use saane::synth::generate_synthetic;
use saane::trainer::{
    batch_triplet_loss, fit, mine_triplets, negative_weights, train_batch, triplet_loss, AdamState, Sample,
    SamplingConfig, Triplet, TrainingSet, TripletBatch,
};
use saane::{Model, Tensor};

const SAMPLING: SamplingConfig = SamplingConfig {
    alpha: 10.0,
    min_distance: 0.5,
    max_weight: 1e4,
};

fn toy_set(seed: u64, places: usize, conditions: usize) -> (RunConfig, TrainingSet) {
    let cfg = RunConfig::toy();
    let data = generate_synthetic(places, conditions, &cfg, seed).unwrap();
    (cfg, TrainingSet::from_records(&data.train).unwrap())
}

fn all_triplets(labels: &[u32]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            for n in 0..labels.len() {
                if a != p && labels[a] == labels[p] && labels[n] != labels[a] {
                    out.push(Triplet { anchor: a, positive: p, negative: n });
                }
            }
        }
    }
    out
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let (mut cfg, set) = toy_set(1, 16, 4);
    cfg.train.lr = 0.0;
    cfg.train.epochs = 2;
    let (trained, state) = fit(&cfg, &set, |_, _| {}).unwrap();
    assert_eq!(state.step, 2);
    let init: Model<f32> = Model::new(cfg.model.clone(), &mut common::rng(cfg.seed)).unwrap();
    for (a, b) in trained.params.iter().zip(init.params.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
}

#[test]
fn single_batch_overfits() {
    let mut cfg = RunConfig::toy();
    cfg.train.lr = 1e-3;
    let mut r = common::rng(5);
    let samples: Vec<Sample> = (0..4)
        .map(|i| Sample {
            class_id: i / 2,
            appearance: common::uniform(&mut r, &[16, 8, 8]).cast(),
            semantic: common::uniform(&mut r, &[12, 8, 8]).cast(),
        })
        .collect();
    let set = TrainingSet::new(samples);
    let mut model: Model<f32> = Model::new(cfg.model.clone(), &mut r).unwrap();
    let mut state = AdamState::from_config(&model.params, &cfg.train);
    let batch = [0, 1, 2, 3];
    for _ in 0..200 {
        train_batch(&set, &batch, &mut model, &mut state, &cfg.train, &mut r).unwrap();
    }
    let embeddings: Vec<Vec<f32>> = set
        .samples()
        .iter()
        .map(|s| model.embed(&s.appearance, &s.semantic).unwrap().into_data())
        .collect();
    let loss = batch_triplet_loss(&embeddings, &all_triplets(&[0, 0, 1, 1]), cfg.train.margin).loss;
    assert!(loss < 0.05, "{loss}");
}

#[test]
fn toy_loss_decreases_over_first_epochs() {
    let mut decreasing = 0;
    for seed in 0..10 {
        let (mut cfg, set) = toy_set(100 + seed, 256, 4);
        cfg.seed = seed;
        cfg.train.epochs = 10;
        cfg.train.lr = 1e-3;
        let mut losses = Vec::new();
        fit(&cfg, &set, |_, s| losses.push(s.mean_loss)).unwrap();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 8, "{decreasing} of 10 seeds decreased monotonically");
}

#[test]
fn training_is_bitwise_reproducible() {
    let (mut cfg, set) = toy_set(2, 16, 4);
    cfg.train.epochs = 3;
    cfg.train.lr = 1e-3;
    let run = || {
        let mut losses = Vec::new();
        let (m, _) = fit(&cfg, &set, |_, s| losses.push(s.mean_loss.to_bits())).unwrap();
        let bits: Vec<u32> = m.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
        (bits, losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn sampled_negatives_follow_weights() {
    let mut r = common::rng(6);
    let emb: Vec<Vec<f32>> = (0..4).map(|_| (0..8).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
    let batch = TripletBatch::new(emb, vec![0, 0, 1, 1]).unwrap();
    let draws = 100_000;
    for anchor in 0..4 {
        let weights = negative_weights(&batch, anchor, &SAMPLING);
        assert_eq!(weights.len(), 2);
        let total: f64 = weights.iter().map(|w| w.1).sum();
        let mut hits = 0usize;
        for _ in 0..draws {
            let t = mine_triplets(&batch, &SAMPLING, &mut r);
            let mine: Vec<&Triplet> = t.iter().filter(|t| t.anchor == anchor).collect();
            assert_eq!(mine.len(), 1);
            if mine[0].negative == weights[0].0 {
                hits += 1;
            }
        }
        let observed = hits as f64 / draws as f64;
        let expected = weights[0].1 / total;
        assert!((observed - expected).abs() < 0.02, "anchor {anchor}: {observed} vs {expected}");
    }
}

#[test]
fn equidistant_negatives_are_uniform() {
    // two classes on opposite corners of a square: both negatives are equally far
    let s = 10.0 / 2f32.sqrt();
    let emb = vec![vec![s, s], vec![s, s], vec![-s, s], vec![-s, s]];
    let batch = TripletBatch::new(emb, vec![0, 0, 1, 1]).unwrap();
    let mut r = common::rng(7);
    let mut hits = 0;
    let draws = 100_000;
    for _ in 0..draws {
        let t = mine_triplets(&batch, &SAMPLING, &mut r);
        hits += usize::from(t[0].negative == 2);
    }
    assert!((hits as f64 / draws as f64 - 0.5).abs() < 0.02);
}

#[test]
fn default_batch_has_192_anchor_positive_pairs() {
    let mut r = common::rng(8);
    let labels: Vec<u32> = (0..64).map(|i| i / 4).collect();
    let emb: Vec<Vec<f32>> = (0..64).map(|_| (0..32).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
    let batch = TripletBatch::new(emb, labels).unwrap();
    assert_eq!(mine_triplets(&batch, &SAMPLING, &mut r).len(), 192);
}

#[test]
fn loss_depends_only_on_distances() {
    let emb = vec![vec![0.0f32, 0.0], vec![1.0, 0.0], vec![0.0, 1.2], vec![1.2, 0.0]];
    let a = batch_triplet_loss(&emb, &[Triplet { anchor: 0, positive: 1, negative: 2 }], 0.5);
    let b = batch_triplet_loss(&emb, &[Triplet { anchor: 0, positive: 1, negative: 3 }], 0.5);
    assert!((a.loss - b.loss).abs() < 1e-7);
    assert!((a.loss - triplet_loss(1.0, 1.2, 0.5)).abs() < 1e-6);
}

#[test]
fn trainer_rejects_undersized_classes() {
    let (mut cfg, set) = toy_set(3, 16, 3);
    cfg.train.epochs = 1;
    assert!(fit(&cfg, &set, |_, _| {}).is_err());
    let records: Vec<FeatureRecord> = Vec::new();
    assert_eq!(TrainingSet::from_records(&records).unwrap().num_classes(), 0);
}
