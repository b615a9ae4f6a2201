//! Building blocks of the 3D fully-convolutional network.
//!
//! Blocks only hold indices into [`ModelParams`]; values are bound to tape
//! leaves by a [`Ctx`] for each forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::params::{Init, ModelParams, ParamKind, ParamLayout};
use crate::error::Result;
use crate::ops::batchnorm::{BatchNormState, BnMode};
use crate::ops::conv::Conv3dSpec;
use crate::tape::{Tape, Var};

/// New running statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub mean_index: usize,
    pub var_index: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass: a tape with every parameter bound to a leaf.
pub struct Ctx<'t, 'p> {
    pub tape: &'t mut Tape,
    params: &'p ModelParams,
    vars: Vec<Var>,
    mode: BnMode,
    updates: Vec<StatUpdate>,
}

impl<'t, 'p> Ctx<'t, 'p> {
    /// Registers all parameters on `tape`. Learnable arrays require gradients
    /// when `track_grads` is set.
    pub fn bind(tape: &'t mut Tape, params: &'p ModelParams, mode: BnMode, track_grads: bool) -> Self {
        let vars = params
            .entries()
            .iter()
            .map(|e| tape.leaf(e.tensor.clone(), track_grads && e.kind.learnable()))
            .collect();
        Self {
            tape,
            params,
            vars,
            mode,
            updates: Vec::new(),
        }
    }

    /// Uses caller-provided leaves, one per parameter array in layout order.
    pub fn from_vars(tape: &'t mut Tape, params: &'p ModelParams, vars: Vec<Var>, mode: BnMode) -> Self {
        assert_eq!(vars.len(), params.len(), "one var per parameter array");
        Self {
            tape,
            params,
            vars,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.updates
    }

    pub fn into_stat_updates(self) -> Vec<StatUpdate> {
        self.updates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: Conv3dSpec,
    pub weight: usize,
    pub bias: usize,
}

impl ConvLayer {
    pub fn register(layout: &mut ParamLayout, path: &str, spec: Conv3dSpec, zero: bool) -> Self {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Kaiming(spec.fan_in())
        };
        let weight = layout.register(
            format!("{path}.weights"),
            ParamKind::ConvWeight,
            &spec.weight_shape(),
            init,
        );
        let bias = layout.register(
            format!("{path}.bias"),
            ParamKind::ConvBias,
            &[spec.out_channels],
            Init::Zeros,
        );
        Self { spec, weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.tape.conv3d(x, w, Some(b), &self.spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub scale: usize,
    pub shift: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BnLayer {
    pub fn register(layout: &mut ParamLayout, path: &str, channels: usize) -> Self {
        let c = [channels];
        Self {
            scale: layout.register(format!("{path}.scale"), ParamKind::BnScale, &c, Init::Ones),
            shift: layout.register(format!("{path}.shift"), ParamKind::BnShift, &c, Init::Zeros),
            running_mean: layout.register(format!("{path}.running_mean"), ParamKind::RunningMean, &c, Init::Zeros),
            running_var: layout.register(format!("{path}.running_var"), ParamKind::RunningVar, &c, Init::Ones),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut state = BatchNormState::new(ctx.params.tensor(self.scale).len());
        state.running_mean = ctx.params.tensor(self.running_mean).data().to_vec();
        state.running_var = ctx.params.tensor(self.running_var).data().to_vec();
        let (g, b) = (ctx.var(self.scale), ctx.var(self.shift));
        let y = ctx.tape.batchnorm(x, g, b, &mut state, ctx.mode)?;
        if ctx.mode == BnMode::Train {
            ctx.updates.push(StatUpdate {
                mean_index: self.running_mean,
                var_index: self.running_var,
                mean: state.running_mean,
                var: state.running_var,
            });
        }
        Ok(y)
    }
}

/// Convolution, batch norm and ReLU, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub conv: ConvLayer,
    pub bn: BnLayer,
}

impl ConvUnit {
    pub fn register(layout: &mut ParamLayout, path: &str, spec: Conv3dSpec) -> Self {
        Self {
            conv: ConvLayer::register(layout, &format!("{path}.conv"), spec, false),
            bn: BnLayer::register(layout, &format!("{path}.bn"), spec.out_channels),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.tape.relu(y)
    }
}

pub const SPATIAL_KERNEL: [usize; 3] = [1, 3, 3];
pub const SPECTRAL_KERNEL: [usize; 3] = [3, 1, 1];

/// Dual separable residual unit: `x + left(x) + right(x)` where the left branch
/// runs spatial then spectral convolutions and the right branch the reverse.
#[derive(Debug, Clone, PartialEq)]
pub struct DsrUnit {
    pub left: [ConvUnit; 2],
    pub right: [ConvUnit; 2],
}

impl DsrUnit {
    pub fn register(layout: &mut ParamLayout, path: &str, channels: usize) -> Self {
        let spec = |k| Conv3dSpec::new(channels, channels, k, [1, 1, 1]);
        Self {
            left: [
                ConvUnit::register(layout, &format!("{path}.left.spatial"), spec(SPATIAL_KERNEL)),
                ConvUnit::register(layout, &format!("{path}.left.spectral"), spec(SPECTRAL_KERNEL)),
            ],
            right: [
                ConvUnit::register(layout, &format!("{path}.right.spectral"), spec(SPECTRAL_KERNEL)),
                ConvUnit::register(layout, &format!("{path}.right.spatial"), spec(SPATIAL_KERNEL)),
            ],
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let l = self.left[0].forward(ctx, x)?;
        let l = self.left[1].forward(ctx, l)?;
        let r = self.right[0].forward(ctx, x)?;
        let r = self.right[1].forward(ctx, r)?;
        let y = ctx.tape.add(x, l)?;
        ctx.tape.add(y, r)
    }

    /// Kernel weights per (input, output) channel pair over all four convolutions.
    pub fn weights_per_channel_pair(&self) -> usize {
        self.left
            .iter()
            .chain(&self.right)
            .map(|u| u.conv.spec.kernel_volume())
            .sum()
    }
}

/// Channel gate: conv(3x3x3) -> global average pool -> conv(1x1x1) -> BN ->
/// ReLU -> sigmoid, multiplied back onto the input per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub conv: ConvLayer,
    pub squeeze: ConvLayer,
    pub bn: BnLayer,
}

impl ChannelAttention {
    pub fn register(layout: &mut ParamLayout, path: &str, channels: usize) -> Self {
        Self {
            conv: ConvLayer::register(
                layout,
                &format!("{path}.conv"),
                Conv3dSpec::new(channels, channels, [3, 3, 3], [1, 1, 1]),
                false,
            ),
            squeeze: ConvLayer::register(
                layout,
                &format!("{path}.squeeze"),
                Conv3dSpec::new(channels, channels, [1, 1, 1], [1, 1, 1]),
                false,
            ),
            bn: BnLayer::register(layout, &format!("{path}.bn"), channels),
        }
    }

    /// Per-channel weights `[N, C, 1, 1, 1]`.
    pub fn gate(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let a = self.conv.forward(ctx, x)?;
        let p = ctx.tape.adaptive_avg_pool(a)?;
        let s = self.squeeze.forward(ctx, p)?;
        let s = self.bn.forward(ctx, s)?;
        let s = ctx.tape.relu(s)?;
        ctx.tape.sigmoid(s)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = self.gate(ctx, x)?;
        ctx.tape.mul(x, w)
    }
}

/// Channel-doubling, extent-halving encoder stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DownBlock {
    pub conv_a: ConvUnit,
    pub conv_b: ConvUnit,
    pub dsr: Vec<DsrUnit>,
    pub attention: Option<ChannelAttention>,
}

impl DownBlock {
    pub fn register(layout: &mut ParamLayout, path: &str, in_channels: usize, dsr: usize, attention: bool) -> Self {
        let out = in_channels * 2;
        Self {
            conv_a: ConvUnit::register(
                layout,
                &format!("{path}.conv_a"),
                Conv3dSpec::new(in_channels, out, [3, 3, 3], [2, 1, 1]),
            ),
            conv_b: ConvUnit::register(
                layout,
                &format!("{path}.conv_b"),
                Conv3dSpec::new(out, out, [1, 3, 3], [1, 2, 2]),
            ),
            dsr: (0..dsr)
                .map(|i| DsrUnit::register(layout, &format!("{path}.dsr{}", i + 1), out))
                .collect(),
            attention: attention.then(|| ChannelAttention::register(layout, &format!("{path}.attention"), out)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut y = self.conv_a.forward(ctx, x)?;
        y = self.conv_b.forward(ctx, y)?;
        for unit in &self.dsr {
            y = unit.forward(ctx, y)?;
        }
        if let Some(att) = &self.attention {
            y = att.forward(ctx, y)?;
        }
        Ok(y)
    }
}

/// Decoder stage: resize to the mirrored encoder input, concatenate it, then
/// conv(5x1x1) and conv(3x3x3), both stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock {
    pub conv_a: ConvUnit,
    pub conv_b: ConvUnit,
}

impl UpBlock {
    pub fn register(layout: &mut ParamLayout, path: &str, in_channels: usize, mirror_channels: usize) -> Self {
        let out = mirror_channels;
        Self {
            conv_a: ConvUnit::register(
                layout,
                &format!("{path}.conv_a"),
                Conv3dSpec::new(in_channels + mirror_channels, out, [5, 1, 1], [1, 1, 1]),
            ),
            conv_b: ConvUnit::register(
                layout,
                &format!("{path}.conv_b"),
                Conv3dSpec::new(out, out, [3, 3, 3], [1, 1, 1]),
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mirror: Var) -> Result<Var> {
        let ms = ctx.tape.shape(mirror).to_vec();
        if ms.len() != 5 || ms[1] != self.conv_a.conv.spec.out_channels {
            return Err(crate::error::Error::ShapeMismatch {
                op: "up_block mirror",
                left: ms,
                right: alloc::vec![self.conv_a.conv.spec.out_channels],
            });
        }
        let up = ctx.tape.trilinear_upsample(x, [ms[2], ms[3], ms[4]])?;
        let cat = ctx.tape.concat_channels(up, mirror)?;
        let y = self.conv_a.forward(ctx, cat)?;
        self.conv_b.forward(ctx, y)
    }
}

pub(crate) fn path(prefix: &str, i: usize) -> String {
    format!("{prefix}{}", i + 1)
}
