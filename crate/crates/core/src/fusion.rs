//! Projected-sum fusion of the appearance and semantic streams.

use rand::Rng;

use crate::error::{shape_mismatch, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Bias-free 1×1 convolution from `in_channels` to `out_channels`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Projection {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register_he(name, &[out_channels, in_channels, 1, 1], in_channels, rng)?;
        Ok(Self {
            weight,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.conv2d(x, w, None, 0)
    }
}

/// The three outputs of a fusion: the fused map and both aligned streams.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub fused: Var,
    pub appearance: Var,
    pub semantic: Var,
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub proj_a: Projection,
    pub proj_s: Projection,
    pub common_dim: usize,
}

impl FusionModule {
    /// Registers `{prefix}.proj_a` and `{prefix}.proj_s`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        appearance_dim: usize,
        semantic_dim: usize,
        common_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            proj_a: Projection::new(store, &format!("{prefix}.proj_a"), appearance_dim, common_dim, rng)?,
            proj_s: Projection::new(store, &format!("{prefix}.proj_s"), semantic_dim, common_dim, rng)?,
            common_dim,
        })
    }

    pub fn fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_a: Var,
        f_s: Var,
    ) -> Result<Fused> {
        let (_, ha, wa) = tape.value(f_a).dims3()?;
        let (_, hs, ws) = tape.value(f_s).dims3()?;
        if (ha, wa) != (hs, ws) {
            return Err(shape_mismatch(
                "fuse (spatial extents differ)",
                tape.value(f_a).shape(),
                tape.value(f_s).shape(),
            ));
        }
        let appearance = self.proj_a.forward(tape, store, f_a)?;
        let semantic = self.proj_s.forward(tape, store, f_s)?;
        let fused = tape.add(appearance, semantic)?;
        Ok(Fused {
            fused,
            appearance,
            semantic,
        })
    }
}
