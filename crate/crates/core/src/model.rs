//! The full embedding network and its pooling head.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::{AttentionMaps, AttentionModule, AttentionOutput};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::fusion::{FusionModule, Projection};
use crate::io::FeatureRecord;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{PoolMode, Real, Tensor};

/// A normalized, scaled descriptor of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub source_id: u32,
    pub values: Vec<f32>,
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.values
    }
}

/// Spatial pyramid pooling followed by L2 normalization and scaling.
#[derive(Clone, Debug)]
pub struct EmbeddingHead {
    pub levels: Vec<usize>,
    pub mode: PoolMode,
    pub alpha: f64,
}

impl EmbeddingHead {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let pooled = tape.spp(f, &self.levels, self.mode)?;
        tape.normalize_scale(pooled, T::lit(self.alpha))
    }
}

#[derive(Clone, Debug)]
enum Layout {
    App {
        proj: Projection,
    },
    AppSem {
        fusion: FusionModule,
    },
    Saane {
        fusion1: FusionModule,
        attention: AttentionModule,
        fusion2: FusionModule,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Map handed to the pooling head.
    pub pooled_input: Var,
    pub embedding: Var,
    pub attention: Option<AttentionOutput>,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    head: EmbeddingHead,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Builds the network with zero-mean gaussian weights of variance
    /// `2 / fan_in` and zero biases.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = config.common_dim;
        let layout = match config.variant {
            Variant::App => Layout::App {
                proj: Projection::new(&mut params, "fusion1.proj_a", config.appearance_dim, c, rng)?,
            },
            Variant::AppSem => Layout::AppSem {
                fusion: FusionModule::new(
                    &mut params,
                    "fusion1",
                    config.appearance_dim,
                    config.semantic_dim,
                    c,
                    rng,
                )?,
            },
            Variant::Saane => Layout::Saane {
                fusion1: FusionModule::new(
                    &mut params,
                    "fusion1",
                    config.appearance_dim,
                    config.semantic_dim,
                    c,
                    rng,
                )?,
                attention: AttentionModule::new(
                    &mut params,
                    "attention",
                    c,
                    config.hidden_dim(),
                    config.share_channel_attention,
                    rng,
                )?,
                fusion2: FusionModule::new(&mut params, "fusion2", c, c, c, rng)?,
            },
        };
        let head = EmbeddingHead {
            levels: config.spp_levels.clone(),
            mode: config.spp_mode,
            alpha: config.alpha,
        };
        Ok(Self {
            config,
            params,
            head,
            layout,
        })
    }

    /// Rebuilds a model around existing parameter values. The parameter
    /// census (names and shapes, in order) must match what `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        let expected = model.params.census();
        let found = params.census();
        if expected != found {
            return Err(Error::InvalidArgument(format!(
                "parameter census mismatch: expected {expected:?}, found {found:?}"
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn head(&self) -> &EmbeddingHead {
        &self.head
    }

    pub fn attention_module(&self) -> Option<&AttentionModule> {
        match &self.layout {
            Layout::Saane { attention, .. } => Some(attention),
            _ => None,
        }
    }

    pub fn fusion_modules(&self) -> Vec<&FusionModule> {
        match &self.layout {
            Layout::App { .. } => vec![],
            Layout::AppSem { fusion } => vec![fusion],
            Layout::Saane { fusion1, fusion2, .. } => vec![fusion1, fusion2],
        }
    }

    fn check_inputs(&self, f_a: &Tensor<T>, f_s: &Tensor<T>) -> Result<()> {
        let (ca, _, _) = f_a.dims3()?;
        if ca != self.config.appearance_dim {
            return Err(Error::InvalidArgument(format!(
                "appearance map has {ca} channels, model expects {}",
                self.config.appearance_dim
            )));
        }
        if self.config.variant != Variant::App {
            let (cs, _, _) = f_s.dims3()?;
            if cs != self.config.semantic_dim {
                return Err(Error::InvalidArgument(format!(
                    "semantic map has {cs} channels, model expects {}",
                    self.config.semantic_dim
                )));
            }
        }
        Ok(())
    }

    /// Records the full forward pass; the feature maps enter as constants.
    pub fn forward(&self, tape: &mut Tape<T>, f_a: &Tensor<T>, f_s: &Tensor<T>) -> Result<ForwardOutput> {
        self.check_inputs(f_a, f_s)?;
        let a = tape.constant(f_a.clone());
        let s = tape.constant(f_s.clone());
        self.forward_vars(tape, a, s)
    }

    pub fn forward_vars(&self, tape: &mut Tape<T>, a: Var, s: Var) -> Result<ForwardOutput> {
        let store = &self.params;
        let (pooled_input, attention) = match &self.layout {
            Layout::App { proj } => (proj.forward(tape, store, a)?, None),
            Layout::AppSem { fusion } => (fusion.fuse(tape, store, a, s)?.fused, None),
            Layout::Saane {
                fusion1,
                attention,
                fusion2,
            } => {
                let first = fusion1.fuse(tape, store, a, s)?;
                let att = attention.attend(tape, store, first.appearance, first.semantic)?;
                let second = fusion2.fuse(tape, store, att.refined_a, att.refined_s)?;
                (second.fused, Some(att))
            }
        };
        let embedding = self.head.forward(tape, pooled_input)?;
        Ok(ForwardOutput {
            pooled_input,
            embedding,
            attention,
        })
    }

    /// Embedding values of one frame.
    pub fn embed(&self, f_a: &Tensor<T>, f_s: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, f_a, f_s)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// Attention maps of one frame, or `None` for variants without attention.
    pub fn attention_maps(&self, f_a: &Tensor<T>, f_s: &Tensor<T>) -> Result<Option<AttentionMaps<T>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, f_a, f_s)?;
        Ok(out.attention.map(|att| AttentionMaps::from_tape(&tape, &att)))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            head: self.head.clone(),
            layout: self.layout.clone(),
        }
    }
}

impl Model<f32> {
    /// Embeds every record in parallel, keeping record order and using the
    /// frame id as the source id.
    pub fn embed_records(&self, records: &[FeatureRecord]) -> Result<Vec<Embedding>> {
        records
            .par_iter()
            .map(|r| {
                let e = self.embed(&r.appearance.to_tensor()?, &r.semantic.to_tensor()?)?;
                Ok(Embedding {
                    source_id: r.frame_id,
                    values: e.into_data(),
                })
            })
            .collect()
    }
}
