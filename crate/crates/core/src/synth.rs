//! Seeded synthetic place-recognition data.
//!
//! Each place owns a latent appearance map and a latent semantic map. A
//! record of that place under some viewing condition is
//!
//! ```text
//! appearance = latent_a ⊙ exp(gain_strength · z) + appearance_noise · n_a + blobs
//! semantic   = latent_s + semantic_noise · n_s + blobs
//! ```
//!
//! with `z`, `n_a`, `n_s` fresh standard normals per record. The blobs are
//! `distractors` square patches at random positions whose per-channel
//! profile is random and large, standing in for transient objects.
//!
//! Training places and test places are disjoint. Test files put condition 0
//! in the database and the last condition in the query set, both with
//! `frame_id` equal to the place index, so a correct match has frame
//! difference 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{RunConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::io::{FeatureMap, FeatureRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<FeatureRecord>,
    pub db: Vec<FeatureRecord>,
    pub query: Vec<FeatureRecord>,
}

struct Place {
    appearance: Vec<f32>,
    semantic: Vec<f32>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    ca: usize,
    cs: usize,
}

impl Generator<'_> {
    fn hw(&self) -> usize {
        self.cfg.height * self.cfg.width
    }

    fn place<R: Rng>(&self, rng: &mut R) -> Place {
        let mut latent = |c: usize| (0..c * self.hw()).map(|_| normal(rng).abs() as f32).collect();
        Place {
            appearance: latent(self.ca),
            semantic: latent(self.cs),
        }
    }

    fn add_blobs<R: Rng>(&self, a: &mut [f32], s: &mut [f32], rng: &mut R) {
        let (h, w, size) = (self.cfg.height, self.cfg.width, self.cfg.distractor_size);
        for _ in 0..self.cfg.distractors {
            let y0 = rng.random_range(0..=h - size);
            let x0 = rng.random_range(0..=w - size);
            for (map, channels) in [(&mut *a, self.ca), (&mut *s, self.cs)] {
                for c in 0..channels {
                    let v = (self.cfg.distractor_amplitude * normal(rng).abs()) as f32;
                    for y in y0..y0 + size {
                        for x in x0..x0 + size {
                            map[(c * h + y) * w + x] += v;
                        }
                    }
                }
            }
        }
    }

    fn record<R: Rng>(&self, place: &Place, frame_id: u32, class_id: u32, condition_id: u32, rng: &mut R) -> Result<FeatureRecord> {
        let cfg = self.cfg;
        let mut a: Vec<f32> = place
            .appearance
            .iter()
            .map(|&l| {
                let gain = (cfg.gain_strength * normal(rng)).exp();
                (f64::from(l) * gain + cfg.appearance_noise * normal(rng)) as f32
            })
            .collect();
        let mut s: Vec<f32> = place
            .semantic
            .iter()
            .map(|&l| (f64::from(l) + cfg.semantic_noise * normal(rng)) as f32)
            .collect();
        self.add_blobs(&mut a, &mut s, rng);
        Ok(FeatureRecord {
            frame_id,
            class_id,
            condition_id,
            appearance: FeatureMap::new(self.ca, cfg.height, cfg.width, a)?,
            semantic: FeatureMap::new(self.cs, cfg.height, cfg.width, s)?,
        })
    }
}

/// Builds `n_places` training places and `n_places` disjoint test places,
/// each seen under `n_conditions` conditions. Channel counts come from
/// `config.model`, spatial size and magnitudes from `config.synth`.
pub fn generate_synthetic(n_places: usize, n_conditions: usize, config: &RunConfig, seed: u64) -> Result<SyntheticDataset> {
    let cfg = &config.synth;
    let p = config.train.batch_classes;
    if n_places < p {
        return Err(Error::InvalidArgument(format!(
            "{n_places} places cannot fill a batch of {p} classes"
        )));
    }
    if n_conditions < 2 {
        return Err(Error::InvalidArgument("at least 2 conditions are needed".into()));
    }
    let finest = config.model.spp_levels.iter().copied().max().unwrap_or(1);
    if cfg.height < finest || cfg.width < finest {
        return Err(Error::InvalidArgument(format!(
            "{}x{} maps are too small for a {finest}x{finest} pooling level",
            cfg.height, cfg.width
        )));
    }
    if cfg.distractors > 0 && (cfg.distractor_size == 0 || cfg.distractor_size > cfg.height.min(cfg.width)) {
        return Err(Error::InvalidArgument("distractor size must fit inside the map".into()));
    }
    let gen = Generator {
        cfg,
        ca: config.model.appearance_dim,
        cs: config.model.semantic_dim,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_places: Vec<Place> = (0..n_places).map(|_| gen.place(&mut rng)).collect();
    let test_places: Vec<Place> = (0..n_places).map(|_| gen.place(&mut rng)).collect();

    let mut train = Vec::with_capacity(n_places * n_conditions);
    for (i, place) in train_places.iter().enumerate() {
        for c in 0..n_conditions {
            let frame = (i * n_conditions + c) as u32;
            train.push(gen.record(place, frame, i as u32, c as u32, &mut rng)?);
        }
    }
    let last = n_conditions - 1;
    let mut db = Vec::with_capacity(n_places);
    let mut query = Vec::with_capacity(n_places);
    for (i, place) in test_places.iter().enumerate() {
        db.push(gen.record(place, i as u32, i as u32, 0, &mut rng)?);
        query.push(gen.record(place, i as u32, i as u32, last as u32, &mut rng)?);
    }
    Ok(SyntheticDataset { train, db, query })
}
