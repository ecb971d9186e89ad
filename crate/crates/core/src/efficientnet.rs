//! EfficientNet-style feature extractor built from MBConv blocks with
//! squeeze-and-excitation and Swish (SiLU) activations.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::limits::{MAX_BLOCKS_PER_STAGE, MAX_CHANNELS, MAX_EXPANSION, MAX_KERNEL, MAX_SCALING_COEFF, MAX_STAGES};
use crate::error::{config_err, shape_err, Result};
use crate::layers::{act, BatchNorm2d, Conv2d, Ctx, Dense};
use crate::ops::{Activation, Conv2dParams};
use crate::params::ParamBuilder;
use crate::tensor::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-3;
const WIDTH_DIVISOR: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MBConvSpec {
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Squeeze ratio relative to `in_ch`; `None` disables squeeze-and-excitation.
    #[serde(default = "default_se_ratio")]
    pub se_ratio: Option<f64>,
    #[serde(default = "one")]
    pub repeats: usize,
}

fn default_se_ratio() -> Option<f64> {
    Some(0.25)
}

fn one() -> usize {
    1
}

impl MBConvSpec {
    pub fn new(expansion: usize, kernel: usize, stride: usize, in_ch: usize, out_ch: usize, repeats: usize) -> Self {
        MBConvSpec {
            expansion,
            kernel,
            stride,
            in_ch,
            out_ch,
            se_ratio: default_se_ratio(),
            repeats,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(config_err!("mbconv kernel must be odd, got {}", self.kernel));
        }
        if self.kernel > MAX_KERNEL {
            return Err(config_err!("mbconv kernel must be at most {MAX_KERNEL}, got {}", self.kernel));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(config_err!("mbconv stride must be 1 or 2, got {}", self.stride));
        }
        if self.expansion == 0 || self.in_ch == 0 || self.out_ch == 0 || self.repeats == 0 {
            return Err(config_err!(
                "mbconv expansion, in_ch, out_ch and repeats must be positive"
            ));
        }
        if self.expansion > MAX_EXPANSION || self.in_ch.max(self.out_ch) > MAX_CHANNELS || self.repeats > MAX_BLOCKS_PER_STAGE {
            return Err(config_err!(
                "mbconv limits: expansion <= {MAX_EXPANSION}, channels <= {MAX_CHANNELS}, repeats <= {MAX_BLOCKS_PER_STAGE}"
            ));
        }
        if let Some(r) = self.se_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(config_err!("mbconv se_ratio must be in (0, 1], got {r}"));
            }
        }
        Ok(())
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }

    pub fn expanded_ch(&self) -> usize {
        self.in_ch * self.expansion
    }

    /// `max(1, floor(in_ch * se_ratio))`, or `None` when SE is off.
    pub fn squeeze_width(&self) -> Option<usize> {
        self.se_ratio
            .map(|r| ((self.in_ch as f64 * r).floor() as usize).max(1))
    }

    /// The individual blocks of this stage: the first carries the stride and
    /// channel change, the rest are stride-1 and channel-preserving.
    pub fn unrolled(&self) -> Vec<MBConvSpec> {
        (0..self.repeats)
            .map(|i| MBConvSpec {
                stride: if i == 0 { self.stride } else { 1 },
                in_ch: if i == 0 { self.in_ch } else { self.out_ch },
                repeats: 1,
                ..self.clone()
            })
            .collect()
    }

    /// Trainable parameters of one unrolled block.
    pub fn block_param_count(&self) -> usize {
        let e = self.expanded_ch();
        let mut n = 0;
        if self.expansion != 1 {
            n += self.in_ch * e + 2 * e;
        }
        n += e * self.kernel * self.kernel + 2 * e;
        if let Some(s) = self.squeeze_width() {
            n += e * s + s + s * e + e;
        }
        n + e * self.out_ch + 2 * self.out_ch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EfficientNetConfig {
    pub base_blocks: Vec<MBConvSpec>,
    pub stem_width: usize,
    pub head_width: usize,
    pub depth_coeff: f64,
    pub width_coeff: f64,
}

impl Default for EfficientNetConfig {
    fn default() -> Self {
        EfficientNetConfig {
            base_blocks: vec![
                MBConvSpec::new(1, 3, 1, 16, 16, 1),
                MBConvSpec::new(6, 3, 2, 16, 24, 2),
                MBConvSpec::new(6, 5, 2, 24, 40, 2),
            ],
            stem_width: 16,
            head_width: 128,
            depth_coeff: 1.0,
            width_coeff: 1.0,
        }
    }
}

/// A config after compound scaling, ready to instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledEfficientNet {
    pub stem_width: usize,
    pub stages: Vec<MBConvSpec>,
    pub head_width: usize,
}

impl ScaledEfficientNet {
    pub fn blocks(&self) -> Vec<MBConvSpec> {
        self.stages.iter().flat_map(|s| s.unrolled()).collect()
    }

    /// Closed-form trainable count: stem conv + BN, every block, head conv + BN.
    pub fn param_count(&self) -> usize {
        let first_in = self.stages.first().map_or(self.stem_width, |s| s.in_ch);
        let last_out = self.stages.last().map_or(self.stem_width, |s| s.out_ch);
        let stem = 3 * self.stem_width * 9 + 2 * self.stem_width;
        debug_assert_eq!(first_in, self.stem_width);
        let head = last_out * self.head_width + 2 * self.head_width;
        stem + self.blocks().iter().map(MBConvSpec::block_param_count).sum::<usize>() + head
    }
}

/// Rounds a scaled channel count to the nearest multiple of 8, never below 8
/// and never below 90% of the unrounded value.
pub fn round_width(width: usize, coeff: f64) -> usize {
    let scaled = width as f64 * coeff;
    let d = WIDTH_DIVISOR as f64;
    let mut rounded = (((scaled + d / 2.0) / d).floor() * d).max(d);
    if rounded < 0.9 * scaled {
        rounded += d;
    }
    rounded as usize
}

/// `ceil(depth_coeff * repeats)`.
pub fn round_repeats(repeats: usize, coeff: f64) -> usize {
    (coeff * repeats as f64).ceil() as usize
}

/// Applies depth and width coefficients. Input resolution is not scaled.
pub fn compound_scale(config: &EfficientNetConfig) -> Result<ScaledEfficientNet> {
    config.validate()?;
    let (d, w) = (config.depth_coeff, config.width_coeff);
    Ok(ScaledEfficientNet {
        stem_width: round_width(config.stem_width, w),
        stages: config
            .base_blocks
            .iter()
            .map(|s| MBConvSpec {
                in_ch: round_width(s.in_ch, w),
                out_ch: round_width(s.out_ch, w),
                repeats: round_repeats(s.repeats, d),
                ..s.clone()
            })
            .collect(),
        head_width: round_width(config.head_width, w),
    })
}

impl EfficientNetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("depth_coeff", self.depth_coeff), ("width_coeff", self.width_coeff)] {
            if !(1.0..=MAX_SCALING_COEFF).contains(&c) {
                return Err(config_err!("efficientnet.{name} must be in [1, {MAX_SCALING_COEFF}], got {c}"));
            }
        }
        for (name, w) in [("stem_width", self.stem_width), ("head_width", self.head_width)] {
            if !(1..=MAX_CHANNELS).contains(&w) {
                return Err(config_err!("efficientnet.{name} must be in 1..={MAX_CHANNELS}, got {w}"));
            }
        }
        if self.base_blocks.is_empty() {
            return Err(config_err!("efficientnet.base_blocks must not be empty"));
        }
        if self.base_blocks.len() > MAX_STAGES * 2 {
            return Err(config_err!("efficientnet has {} stages, at most {} allowed", self.base_blocks.len(), MAX_STAGES * 2));
        }
        let mut prev = self.stem_width;
        for (i, s) in self.base_blocks.iter().enumerate() {
            s.validate()
                .map_err(|e| config_err!("efficientnet.base_blocks[{i}]: {e}"))?;
            if s.in_ch != prev {
                return Err(config_err!(
                    "efficientnet.base_blocks[{i}].in_ch is {} but the previous stage outputs {prev}",
                    s.in_ch
                ));
            }
            prev = s.out_ch;
        }
        Ok(())
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(compound_scale(self)?.head_width)
    }

    /// Checks that every stride-2 stage has at least 2 pixels to halve.
    pub fn check_input_size(&self, size: usize) -> Result<()> {
        let scaled = compound_scale(self)?;
        let mut s = size;
        for (i, stride) in std::iter::once(2)
            .chain(scaled.blocks().iter().map(|b| b.stride))
            .enumerate()
        {
            if stride == 2 {
                if s < 2 {
                    return Err(config_err!(
                        "input size {size} underflows at stride-2 stage {i}: too many downsampling stages"
                    ));
                }
                s = s.div_ceil(2);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SqueezeExcite {
    pub squeeze: Dense,
    pub expand: Dense,
}

impl SqueezeExcite {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, channels: usize, squeeze: usize) -> Result<Self> {
        let mut b = b.scope("se");
        Ok(SqueezeExcite {
            squeeze: Dense::new(&mut b, "reduce", channels, squeeze)?,
            expand: Dense::new(&mut b, "expand", squeeze, channels)?,
        })
    }

    /// `x * sigmoid(expand(swish(squeeze(gap(x)))))`, scale broadcast over H×W.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.global_avg_pool(x)?;
        let s = self.squeeze.forward(ctx, s)?;
        let s = act(ctx, s, Activation::Silu)?;
        let s = self.expand.forward(ctx, s)?;
        let s = act(ctx, s, Activation::Sigmoid)?;
        ctx.tape.scale_channels(x, s)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MBConv {
    pub spec: MBConvSpec,
    pub expand: Option<(Conv2d, BatchNorm2d)>,
    pub depthwise: Conv2d,
    pub bn_dw: BatchNorm2d,
    pub se: Option<SqueezeExcite>,
    pub project: Conv2d,
    pub bn_project: BatchNorm2d,
}

impl MBConv {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, spec: &MBConvSpec) -> Result<Self> {
        spec.validate()?;
        let e = spec.expanded_ch();
        let expand = if spec.expansion != 1 {
            Some((
                Conv2d::new(b, "expand_conv", spec.in_ch, e, 1, Conv2dParams::default(), false)?,
                BatchNorm2d::new(b, "bn0", e, BN_MOMENTUM, BN_EPS)?,
            ))
        } else {
            None
        };
        let dw = Conv2dParams {
            stride: spec.stride,
            padding: spec.kernel / 2,
            groups: e,
        };
        let depthwise = Conv2d::new(b, "dwconv", e, e, spec.kernel, dw, false)?;
        let bn_dw = BatchNorm2d::new(b, "bn1", e, BN_MOMENTUM, BN_EPS)?;
        let se = match spec.squeeze_width() {
            Some(s) => Some(SqueezeExcite::new(b, e, s)?),
            None => None,
        };
        let project = Conv2d::new(b, "project_conv", e, spec.out_ch, 1, Conv2dParams::default(), false)?;
        let bn_project = BatchNorm2d::new(b, "bn2", spec.out_ch, BN_MOMENTUM, BN_EPS)?;
        Ok(MBConv {
            spec: spec.clone(),
            expand,
            depthwise,
            bn_dw,
            se,
            project,
            bn_project,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).get(1).copied();
        if c != Some(self.spec.in_ch) {
            return Err(shape_err!(
                "mbconv expects {} input channels, got shape {:?}",
                self.spec.in_ch,
                ctx.tape.shape(x)
            ));
        }
        let mut h = x;
        if let Some((conv, bn)) = &self.expand {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = act(ctx, h, Activation::Silu)?;
        }
        h = self.depthwise.forward(ctx, h)?;
        h = self.bn_dw.forward(ctx, h)?;
        h = act(ctx, h, Activation::Silu)?;
        if let Some(se) = &self.se {
            h = se.forward(ctx, h)?;
        }
        h = self.project.forward(ctx, h)?;
        h = self.bn_project.forward(ctx, h)?;
        if self.spec.has_residual() {
            h = ctx.tape.add(x, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EfficientNet {
    pub config: EfficientNetConfig,
    pub stem: Conv2d,
    pub bn_stem: BatchNorm2d,
    pub blocks: Vec<MBConv>,
    pub head: Conv2d,
    pub bn_head: BatchNorm2d,
}

impl EfficientNet {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: &EfficientNetConfig) -> Result<Self> {
        let scaled = compound_scale(config)?;
        let stem = Conv2d::new(
            b,
            "stem",
            3,
            scaled.stem_width,
            3,
            Conv2dParams {
                stride: 2,
                padding: 1,
                groups: 1,
            },
            false,
        )?;
        let bn_stem = BatchNorm2d::new(b, "bn_stem", scaled.stem_width, BN_MOMENTUM, BN_EPS)?;
        let mut blocks = Vec::new();
        for (i, stage) in scaled.stages.iter().enumerate() {
            for (j, spec) in stage.unrolled().iter().enumerate() {
                let mut bb = b.scope(&format!("stage{i}.block{j}"));
                blocks.push(MBConv::new(&mut bb, spec)?);
            }
        }
        let last = scaled.stages.last().map_or(scaled.stem_width, |s| s.out_ch);
        let head = Conv2d::new(b, "head_conv", last, scaled.head_width, 1, Conv2dParams::default(), false)?;
        let bn_head = BatchNorm2d::new(b, "bn_head", scaled.head_width, BN_MOMENTUM, BN_EPS)?;
        Ok(EfficientNet {
            config: config.clone(),
            stem,
            bn_stem,
            blocks,
            head,
            bn_head,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let shape = ctx.tape.shape(image).to_vec();
        let [_, 3, h, w] = shape[..] else {
            return Err(shape_err!("efficientnet expects N×3×H×W input, got {shape:?}"));
        };
        self.config.check_input_size(h.min(w))?;
        let mut x = self.stem.forward(ctx, image)?;
        x = self.bn_stem.forward(ctx, x)?;
        x = act(ctx, x, Activation::Silu)?;
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        x = self.head.forward(ctx, x)?;
        x = self.bn_head.forward(ctx, x)?;
        x = act(ctx, x, Activation::Silu)?;
        ctx.tape.global_avg_pool(x)
    }
}
