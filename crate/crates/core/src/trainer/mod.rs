//! Triplet-ranking training of the fusion and attention parameters.

pub mod adam;
pub mod loss;
pub mod mining;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::FeatureRecord;
use crate::model::Model;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;
use crate::config::{RunConfig, TrainConfig};

pub use adam::AdamState;
pub use loss::{batch_triplet_loss, triplet_loss, BatchLoss};
pub use mining::{mine_triplets, negative_weights, SamplingConfig, Triplet, TripletBatch};

/// One training example: a class label and its two input maps.
#[derive(Clone, Debug)]
pub struct Sample {
    pub class_id: u32,
    pub appearance: Tensor<f32>,
    pub semantic: Tensor<f32>,
}

/// Class-labeled samples, indexed by class.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    samples: Vec<Sample>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl TrainingSet {
    pub fn new(samples: Vec<Sample>) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.class_id).or_default().push(i);
        }
        Self { samples, by_class }
    }

    pub fn from_records(records: &[FeatureRecord]) -> Result<Self> {
        let samples = records
            .iter()
            .map(|r| {
                Ok(Sample {
                    class_id: r.class_id,
                    appearance: r.appearance.to_tensor()?,
                    semantic: r.semantic.to_tensor()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(samples))
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Batches for one epoch: classes are shuffled and consumed `P` at a
    /// time without replacement. A short final group is topped up with
    /// randomly chosen classes from outside it. Each class contributes `K`
    /// distinct samples.
    pub fn compose_batches<R: Rng + ?Sized>(
        &self,
        classes_per_batch: usize,
        per_class: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<usize>>> {
        if self.num_classes() < classes_per_batch {
            return Err(Error::InvalidBatch(format!(
                "dataset has {} classes, a batch needs {classes_per_batch}",
                self.num_classes()
            )));
        }
        if let Some((class, members)) = self.by_class.iter().find(|(_, m)| m.len() < per_class) {
            return Err(Error::InvalidBatch(format!(
                "class {class} has {} samples, a batch needs {per_class}",
                members.len()
            )));
        }
        let mut classes: Vec<u32> = self.by_class.keys().copied().collect();
        classes.shuffle(rng);
        let mut batches = Vec::new();
        for chunk in classes.chunks(classes_per_batch) {
            let mut chosen = chunk.to_vec();
            if chosen.len() < classes_per_batch {
                let mut rest: Vec<u32> = classes.iter().copied().filter(|c| !chunk.contains(c)).collect();
                rest.shuffle(rng);
                chosen.extend(rest.into_iter().take(classes_per_batch - chunk.len()));
            }
            let mut batch = Vec::with_capacity(classes_per_batch * per_class);
            for class in chosen {
                let mut members = self.by_class[&class].clone();
                members.shuffle(rng);
                batch.extend(members.into_iter().take(per_class));
            }
            batches.push(batch);
        }
        Ok(batches)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub active_triplets: usize,
    pub total_triplets: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub active_fraction: f64,
    pub batches: usize,
}

pub fn sampling_config(model_alpha: f64, cfg: &TrainConfig) -> SamplingConfig {
    SamplingConfig {
        alpha: model_alpha,
        min_distance: cfg.sampling_min_distance,
        max_weight: cfg.sampling_max_weight,
    }
}

/// Forward, mine, backpropagate and take one Adam step on the samples at
/// `indices`. Returns the loss measured before the step.
pub fn train_batch<R: Rng + ?Sized>(
    set: &TrainingSet,
    indices: &[usize],
    model: &mut Model<f32>,
    state: &mut AdamState<f32>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<BatchStats> {
    let forwards = {
        let model = &*model;
        indices
            .par_iter()
            .map(|&i| {
                let s = &set.samples[i];
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &s.appearance, &s.semantic)?;
                Ok((tape, out.embedding))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let embeddings: Vec<Vec<f32>> = forwards.iter().map(|(t, v)| t.value(*v).data().to_vec()).collect();
    let labels = indices.iter().map(|&i| set.samples[i].class_id).collect();
    let batch = TripletBatch::new(embeddings, labels)?;
    let triplets = mine_triplets(&batch, &sampling_config(model.config.alpha, cfg), rng);
    let loss = batch_triplet_loss(batch.embeddings(), &triplets, cfg.margin);

    model.params.zero_grad();
    if loss.active > 0 {
        let grads: Vec<Gradients<f32>> = forwards
            .into_par_iter()
            .zip(loss.grads.par_iter())
            .map(|((mut tape, emb), g)| {
                let seed = Tensor::from_vec(g.iter().map(|&x| x as f32).collect());
                tape.backward_with(emb, seed)
            })
            .collect::<Result<_>>()?;
        for g in &grads {
            g.accumulate_into(&mut model.params);
        }
    }
    state.step(&mut model.params)?;
    Ok(BatchStats {
        loss: loss.loss,
        active_triplets: loss.active,
        total_triplets: loss.total,
    })
}

pub fn train_epoch<R: Rng + ?Sized>(
    set: &TrainingSet,
    model: &mut Model<f32>,
    state: &mut AdamState<f32>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<EpochStats> {
    let batches = set.compose_batches(cfg.batch_classes, cfg.batch_per_class, rng)?;
    let mut loss_sum = 0.0;
    let mut active = 0;
    let mut total = 0;
    for batch in &batches {
        let stats = train_batch(set, batch, model, state, cfg, rng)?;
        loss_sum += stats.loss;
        active += stats.active_triplets;
        total += stats.total_triplets;
    }
    Ok(EpochStats {
        mean_loss: loss_sum / batches.len() as f64,
        active_fraction: if total == 0 { 0.0 } else { active as f64 / total as f64 },
        batches: batches.len(),
    })
}

/// Initializes a model from `config.seed` and trains it for
/// `config.train.epochs` epochs, reporting each epoch to `on_epoch`.
/// The same seed and data always give bitwise-identical parameters.
pub fn fit<F>(config: &RunConfig, set: &TrainingSet, mut on_epoch: F) -> Result<(Model<f32>, AdamState<f32>)>
where
    F: FnMut(usize, &EpochStats),
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(config.model.clone(), &mut rng)?;
    let mut state = AdamState::from_config(&model.params, &config.train);
    for epoch in 0..config.train.epochs {
        let stats = train_epoch(set, &mut model, &mut state, &config.train, &mut rng)?;
        on_epoch(epoch, &stats);
    }
    Ok((model, state))
}
