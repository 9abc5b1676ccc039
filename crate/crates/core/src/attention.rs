//! Multimodal attention: one channel gate shared by both modalities and a
//! separate spatial gate per modality.
//!
//! Given the aligned maps `F_A`, `F_S` and their sum `F_M`:
//!
//! ```text
//! M_c    = sigmoid(mlp(avgpool(F_M)) + mlp(maxpool(F_M)))          (C)
//! F'_M   = F_M * M_c                                               (C×H×W)
//! M_xy^Z = M_c * sigmoid(conv7x7_Z([chan_avg(F'_M); chan_max(F'_M)]))  (C×H×W)
//! F'_Z   = F_Z * M_xy^Z
//! ```
//!
//! With `share_channel_attention` off, each modality gets its own MLP and
//! derives `M_c` and `F'_M` from its own aligned map instead.

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{PoolMode, Real, Tensor};

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Appearance,
    Semantic,
}

/// Parameters of the two-layer channel MLP.
#[derive(Clone, Debug)]
pub struct ChannelMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ChannelMlp {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.register_he(format!("{prefix}.w1"), &[hidden, channels], channels, rng)?,
            b1: store.register(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.register_he(format!("{prefix}.w2"), &[channels, hidden], hidden, rng)?,
            b2: store.register(format!("{prefix}.b2"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        tape.mlp2(x, w1, b1, w2, b2)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub channels: usize,
    pub hidden: usize,
    /// Shared MLP, or the appearance MLP when sharing is off.
    pub mlp: ChannelMlp,
    /// Semantic MLP, present only when sharing is off.
    pub mlp_s: Option<ChannelMlp>,
    pub conv_a: ParamId,
    pub conv_s: ParamId,
}

/// Tape handles of everything the attention module computes.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `M_c` used for the appearance stream, shape `C`.
    pub channel_a: Var,
    /// `M_c` used for the semantic stream; the same var as `channel_a` when shared.
    pub channel_s: Var,
    /// Sigmoid spatial factors, `1×H×W`.
    pub spatial_a: Var,
    pub spatial_s: Var,
    /// Full `M_xy` volumes, `C×H×W`.
    pub volume_a: Var,
    pub volume_s: Var,
    /// Attended features `F'_A`, `F'_S`.
    pub refined_a: Var,
    pub refined_s: Var,
}

/// Attention values copied off a tape, for export.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T = f32> {
    pub channel_a: Tensor<T>,
    pub channel_s: Tensor<T>,
    pub spatial_a: Tensor<T>,
    pub spatial_s: Tensor<T>,
    pub volume_a: Tensor<T>,
    pub volume_s: Tensor<T>,
}

impl<T: Real> AttentionMaps<T> {
    pub fn from_tape(tape: &Tape<T>, out: &AttentionOutput) -> Self {
        Self {
            channel_a: tape.value(out.channel_a).clone(),
            channel_s: tape.value(out.channel_s).clone(),
            spatial_a: tape.value(out.spatial_a).clone(),
            spatial_s: tape.value(out.spatial_s).clone(),
            volume_a: tape.value(out.volume_a).clone(),
            volume_s: tape.value(out.volume_s).clone(),
        }
    }
}

impl AttentionModule {
    /// Registers `{prefix}.mlp.*` (or `{prefix}.mlp_a.*` and `{prefix}.mlp_s.*`
    /// when unshared), `{prefix}.conv_a` and `{prefix}.conv_s`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        hidden: usize,
        share_channel_attention: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (mlp, mlp_s) = if share_channel_attention {
            (ChannelMlp::new(store, &format!("{prefix}.mlp"), channels, hidden, rng)?, None)
        } else {
            let a = ChannelMlp::new(store, &format!("{prefix}.mlp_a"), channels, hidden, rng)?;
            let s = ChannelMlp::new(store, &format!("{prefix}.mlp_s"), channels, hidden, rng)?;
            (a, Some(s))
        };
        let k = SPATIAL_KERNEL;
        let fan_in = 2 * k * k;
        let conv_a = store.register_he(format!("{prefix}.conv_a"), &[1, 2, k, k], fan_in, rng)?;
        let conv_s = store.register_he(format!("{prefix}.conv_s"), &[1, 2, k, k], fan_in, rng)?;
        Ok(Self {
            channels,
            hidden,
            mlp,
            mlp_s,
            conv_a,
            conv_s,
        })
    }

    pub fn shares_channel_attention(&self) -> bool {
        self.mlp_s.is_none()
    }

    /// `sigmoid(mlp(avg) + mlp(max))` over spatially pooled `f_m`.
    pub fn channel_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mlp: &ChannelMlp,
        f_m: Var,
    ) -> Result<Var> {
        let avg = tape.pool_spatial(f_m, PoolMode::Avg)?;
        let max = tape.pool_spatial(f_m, PoolMode::Max)?;
        let a = mlp.forward(tape, store, avg)?;
        let b = mlp.forward(tape, store, max)?;
        let s = tape.add(a, b)?;
        Ok(tape.sigmoid(s))
    }

    /// Scales every channel of `f_m` by the matching entry of `m_c`.
    pub fn refine_channels<T: Real>(&self, tape: &mut Tape<T>, f_m: Var, m_c: Var) -> Result<Var> {
        let c = tape.value(m_c).len();
        let gate = tape.reshape(m_c, &[c, 1, 1])?;
        tape.mul_broadcast(f_m, gate)
    }

    /// Returns the `1×H×W` sigmoid factor and the `C×H×W` attention volume.
    pub fn spatial_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        refined: Var,
        m_c: Var,
        which: Modality,
    ) -> Result<(Var, Var)> {
        let avg = tape.pool_channel(refined, PoolMode::Avg)?;
        let max = tape.pool_channel(refined, PoolMode::Max)?;
        let stacked = tape.concat_channels(avg, max)?;
        let kernel = match which {
            Modality::Appearance => self.conv_a,
            Modality::Semantic => self.conv_s,
        };
        let kernel = tape.param(store, kernel);
        let logits = tape.conv2d(stacked, kernel, None, SPATIAL_KERNEL / 2)?;
        let spatial = tape.sigmoid(logits);
        let c = tape.value(m_c).len();
        let gate = tape.reshape(m_c, &[c, 1, 1])?;
        let volume = tape.mul_broadcast(gate, spatial)?;
        Ok((spatial, volume))
    }

    /// `(F_A * M_xy^A, F_S * M_xy^S)`.
    pub fn apply_maps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        f_m_a: Var,
        f_m_s: Var,
        volume_a: Var,
        volume_s: Var,
    ) -> Result<(Var, Var)> {
        Ok((tape.mul_broadcast(f_m_a, volume_a)?, tape.mul_broadcast(f_m_s, volume_s)?))
    }

    pub fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_m_a: Var,
        f_m_s: Var,
    ) -> Result<AttentionOutput> {
        let (channel_a, channel_s, refined_m_a, refined_m_s) = match &self.mlp_s {
            None => {
                let f_m = tape.add(f_m_a, f_m_s)?;
                let m_c = self.channel_attention(tape, store, &self.mlp, f_m)?;
                let refined = self.refine_channels(tape, f_m, m_c)?;
                (m_c, m_c, refined, refined)
            }
            Some(mlp_s) => {
                let m_a = self.channel_attention(tape, store, &self.mlp, f_m_a)?;
                let m_s = self.channel_attention(tape, store, mlp_s, f_m_s)?;
                let r_a = self.refine_channels(tape, f_m_a, m_a)?;
                let r_s = self.refine_channels(tape, f_m_s, m_s)?;
                (m_a, m_s, r_a, r_s)
            }
        };
        let (spatial_a, volume_a) =
            self.spatial_attention(tape, store, refined_m_a, channel_a, Modality::Appearance)?;
        let (spatial_s, volume_s) =
            self.spatial_attention(tape, store, refined_m_s, channel_s, Modality::Semantic)?;
        let (refined_a, refined_s) = self.apply_maps(tape, f_m_a, f_m_s, volume_a, volume_s)?;
        Ok(AttentionOutput {
            channel_a,
            channel_s,
            spatial_a,
            spatial_s,
            volume_a,
            volume_s,
            refined_a,
            refined_s,
        })
    }
}
