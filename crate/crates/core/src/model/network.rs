use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use super::blocks::{path, ConvLayer, ConvUnit, Ctx, DownBlock, UpBlock};
use super::params::{ModelParams, ParamKind, ParamLayout};
use crate::cspn::PropagationConfig;
use crate::error::{precondition, Error, Result};
use crate::ops::conv::Conv3dSpec;
use crate::tape::{Reduction, Var};

pub const STAGES: usize = 3;
pub const MIN_SPATIAL: usize = 8;
pub const STEM_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_bands: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub dsr_per_stage: usize,
    pub attention_enabled: bool,
    pub cspn_steps: usize,
}

impl ModelConfig {
    pub fn new(in_bands: usize, num_classes: usize) -> Self {
        Self {
            in_bands,
            num_classes,
            base_channels: 16,
            dsr_per_stage: 1,
            attention_enabled: true,
            cspn_steps: crate::cspn::DEFAULT_STEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands < STEM_KERNEL {
            return Err(precondition(format!(
                "in_bands must be >= {STEM_KERNEL}, got {}",
                self.in_bands
            )));
        }
        if self.num_classes < 1 {
            return Err(precondition("num_classes must be >= 1"));
        }
        if self.base_channels < 1 {
            return Err(precondition("base_channels must be >= 1"));
        }
        Ok(())
    }

    /// Channel width entering down block `i` (and leaving up block `STAGES - 1 - i`).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig { steps: self.cspn_steps }
    }
}

/// Two 3x3 spatial convolutions mapping decoder features to eight raw affinities.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityBranch {
    pub hidden: ConvUnit,
    pub out: ConvLayer,
}

/// Extents `(C, D, H, W)` of every stage for one input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub input: [usize; 4],
    pub stem: [usize; 4],
    pub down: [[usize; 4]; STAGES],
    pub up: [[usize; 4]; STAGES],
    pub logits: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DsrLedgerEntry {
    pub path: String,
    pub kernel: usize,
    pub weights_per_channel_pair: usize,
    pub dense_weights_per_channel_pair: usize,
}

/// Vars produced by one network pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[N, c, H, W]` class scores from the 3D-FCN.
    pub logits: Var,
    /// `[N, 8, H, W]`.
    pub raw_affinity: Var,
    /// `[N, 9, H, W]` normalized kernels.
    pub kappa: Var,
    /// Refined scores, or `logits` when refinement is off.
    pub scores: Var,
}

/// The full network: stem, encoder, decoder, classification head and affinity branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Fcspn {
    config: ModelConfig,
    layout: ParamLayout,
    pub stem: ConvUnit,
    pub down: Vec<DownBlock>,
    pub up: Vec<UpBlock>,
    pub head: ConvLayer,
    pub affinity: AffinityBranch,
}

impl Fcspn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let base = config.base_channels;
        let stem = ConvUnit::register(
            &mut layout,
            "stem",
            Conv3dSpec::new(1, base, [STEM_KERNEL, 1, 1], [STEM_KERNEL, 1, 1]),
        );
        let down = (0..STAGES)
            .map(|i| {
                DownBlock::register(
                    &mut layout,
                    &path("down", i),
                    config.stage_channels(i),
                    config.dsr_per_stage,
                    config.attention_enabled,
                )
            })
            .collect();
        let up = (0..STAGES)
            .map(|i| {
                let mirror = config.stage_channels(STAGES - 1 - i);
                UpBlock::register(&mut layout, &path("up", i), mirror * 2, mirror)
            })
            .collect();
        let head = ConvLayer::register(
            &mut layout,
            "head",
            Conv3dSpec::new(base, config.num_classes, [1, 1, 1], [1, 1, 1]),
            false,
        );
        let spatial = |i, o| Conv3dSpec::new(i, o, [1, 3, 3], [1, 1, 1]);
        let affinity = AffinityBranch {
            hidden: ConvUnit::register(&mut layout, "affinity.hidden", spatial(base, base)),
            out: ConvLayer::register(&mut layout, "affinity.out", spatial(base, 8), true),
        };
        Ok(Self {
            config,
            layout,
            stem,
            down,
            up,
            head,
            affinity,
        })
    }

    /// Network plus freshly initialized parameters.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<(Self, ModelParams)> {
        let net = Self::new(config)?;
        let params = ModelParams::initialize(&net.layout, rng)?;
        Ok((net, params))
    }

    /// `build` with a ChaCha8 generator on stream 0 of `seed`.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<(Self, ModelParams)> {
        Self::build(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Indices of convolution weight arrays (the L2-penalized set).
    pub fn conv_weight_indices(&self) -> Vec<usize> {
        self.layout
            .specs()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == ParamKind::ConvWeight)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn dsr_ledger(&self) -> Vec<DsrLedgerEntry> {
        let mut out = Vec::new();
        for (i, block) in self.down.iter().enumerate() {
            for (j, unit) in block.dsr.iter().enumerate() {
                let m = unit.left[0].conv.spec.kernel[1];
                out.push(DsrLedgerEntry {
                    path: format!("{}.dsr{}", path("down", i), j + 1),
                    kernel: m,
                    weights_per_channel_pair: unit.weights_per_channel_pair(),
                    dense_weights_per_channel_pair: m * m * m,
                });
            }
        }
        out
    }

    pub fn shape_plan(&self, rows: usize, cols: usize) -> Result<ShapePlan> {
        if rows < MIN_SPATIAL || cols < MIN_SPATIAL {
            return Err(precondition(format!(
                "spatial extent {rows}x{cols} is below {MIN_SPATIAL}x{MIN_SPATIAL}"
            )));
        }
        let dims = |u: &ConvUnit, d: [usize; 4]| -> Result<[usize; 4]> {
            let [dd, hh, ww] = u.conv.spec.output_dims([d[1], d[2], d[3]])?;
            Ok([u.conv.spec.out_channels, dd, hh, ww])
        };
        let input = [1, self.config.in_bands, rows, cols];
        let stem = dims(&self.stem, input)?;
        let mut down = [[0; 4]; STAGES];
        let mut cur = stem;
        for (i, block) in self.down.iter().enumerate() {
            cur = dims(&block.conv_b, dims(&block.conv_a, cur)?)?;
            down[i] = cur;
        }
        // Each up block restores the extents of its mirrored encoder input.
        let up = [down[1], down[0], stem];
        Ok(ShapePlan {
            input,
            stem,
            down,
            up,
            logits: [self.config.num_classes, rows, cols],
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != 1 || shape[2] != self.config.in_bands {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: shape.to_vec(),
                right: vec![1, 1, self.config.in_bands],
            });
        }
        self.shape_plan(shape[3], shape[4]).map(|_| ())
    }

    /// Encoder-decoder pass on `x: [N, 1, B, H, W]`, returning the last decoder
    /// features `[N, base, D, H, W]`.
    pub fn features(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.check_input(ctx.tape.shape(x))?;
        let mut mirrors = Vec::with_capacity(STAGES);
        let mut y = self.stem.forward(ctx, x)?;
        for block in &self.down {
            mirrors.push(y);
            y = block.forward(ctx, y)?;
        }
        for block in &self.up {
            let mirror = mirrors.pop().expect("one mirror per stage");
            y = block.forward(ctx, y, mirror)?;
        }
        Ok(y)
    }

    /// Spectral mean of decoder features as a single-slice volume `[N, C, 1, H, W]`.
    pub fn collapse_spectral(&self, ctx: &mut Ctx, features: Var) -> Result<Var> {
        let s = ctx.tape.shape(features).to_vec();
        let m = ctx.tape.reduce(features, Reduction::Mean, &[2])?;
        ctx.tape.reshape(m, &[s[0], s[1], 1, s[3], s[4]])
    }

    /// Class logits `[N, c, H, W]` from collapsed features.
    pub fn head(&self, ctx: &mut Ctx, collapsed: Var) -> Result<Var> {
        let y = self.head.forward(ctx, collapsed)?;
        let s = ctx.tape.shape(y).to_vec();
        ctx.tape.reshape(y, &[s[0], s[1], s[3], s[4]])
    }

    /// Raw affinities `[N, 8, H, W]` from collapsed features.
    pub fn affinity_branch(&self, ctx: &mut Ctx, collapsed: Var) -> Result<Var> {
        let y = self.affinity.hidden.forward(ctx, collapsed)?;
        let y = self.affinity.out.forward(ctx, y)?;
        let s = ctx.tape.shape(y).to_vec();
        ctx.tape.reshape(y, &[s[0], 8, s[3], s[4]])
    }

    /// Full pass. `refine = None` skips propagation (scores are the raw logits).
    pub fn forward(&self, ctx: &mut Ctx, x: Var, refine: Option<PropagationConfig>) -> Result<ForwardOutput> {
        let features = self.features(ctx, x)?;
        let collapsed = self.collapse_spectral(ctx, features)?;
        let logits = self.head(ctx, collapsed)?;
        let raw_affinity = self.affinity_branch(ctx, collapsed)?;
        let kappa = ctx.tape.normalize_affinity(raw_affinity)?;
        let scores = match refine {
            Some(cfg) => ctx.tape.refine(logits, kappa, cfg)?,
            None => logits,
        };
        Ok(ForwardOutput {
            logits,
            raw_affinity,
            kappa,
            scores,
        })
    }
}
