//! ConvNeXt-style feature extractor.
//!
//! Patchify stem, then stages of residual blocks
//! `x + layer_scale * project(gelu(expand(layer_norm(depthwise7x7(x)))))`,
//! with 2×2 stride-2 convolutions between stages, a final channel layer
//! norm and global average pooling.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::limits::{MAX_BLOCKS_PER_STAGE, MAX_CHANNELS, MAX_EXPANSION, MAX_STAGES, MAX_STEM_PATCH};
use crate::error::{config_err, shape_err, Result};
use crate::layers::{act, Conv2d, Ctx, LayerNorm};
use crate::ops::{Activation, Conv2dParams};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Scalar;

pub const DWCONV_KERNEL: usize = 7;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvNeXtConfig {
    pub stage_depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub stem_patch: usize,
    pub expansion_ratio: usize,
    pub layer_scale_init: f64,
}

impl Default for ConvNeXtConfig {
    fn default() -> Self {
        ConvNeXtConfig {
            stage_depths: vec![2, 2, 2],
            stage_widths: vec![24, 48, 96],
            stem_patch: 4,
            expansion_ratio: 4,
            layer_scale_init: 1e-6,
        }
    }
}

impl ConvNeXtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.is_empty() {
            return Err(config_err!("convnext.stage_depths must not be empty"));
        }
        if self.stage_depths.len() != self.stage_widths.len() {
            return Err(config_err!(
                "convnext.stage_depths has {} entries but convnext.stage_widths has {}",
                self.stage_depths.len(),
                self.stage_widths.len()
            ));
        }
        if self.stage_depths.len() > MAX_STAGES {
            return Err(config_err!("convnext has {} stages, at most {MAX_STAGES} allowed", self.stage_depths.len()));
        }
        if self.stage_depths.iter().any(|&d| d == 0 || d > MAX_BLOCKS_PER_STAGE) {
            return Err(config_err!("convnext.stage_depths entries must be in 1..={MAX_BLOCKS_PER_STAGE}"));
        }
        if self.stage_widths.iter().any(|&w| w == 0 || w > MAX_CHANNELS) {
            return Err(config_err!("convnext.stage_widths entries must be in 1..={MAX_CHANNELS}"));
        }
        if !(1..=MAX_STEM_PATCH).contains(&self.stem_patch) {
            return Err(config_err!("convnext.stem_patch must be in 1..={MAX_STEM_PATCH}"));
        }
        if !(1..=MAX_EXPANSION).contains(&self.expansion_ratio) {
            return Err(config_err!("convnext.expansion_ratio must be in 1..={MAX_EXPANSION}"));
        }
        if !(self.layer_scale_init >= 0.0 && self.layer_scale_init.is_finite()) {
            return Err(config_err!("convnext.layer_scale_init must be a nonnegative number"));
        }
        Ok(())
    }

    /// Total spatial reduction from input to the last stage.
    pub fn reduction(&self) -> usize {
        self.stem_patch << (self.stage_depths.len() - 1)
    }

    pub fn check_input_size(&self, size: usize) -> Result<()> {
        let r = self.reduction();
        if size == 0 || size % r != 0 {
            return Err(config_err!(
                "input size {size} is not divisible by stem_patch * 2^(stages-1) = {r}"
            ));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.stage_widths.last().expect("validated non-empty")
    }

    /// Closed-form trainable parameter count.
    ///
    /// stem `3·w0·p² + w0`; each block at width C with expansion e:
    /// depthwise `49C + C`, norm `2C`, expand `eC² + eC`, project `eC² + C`,
    /// layer scale `C`; downsample `4·Cin·Cout + Cout`; final norm `2·C_last`.
    pub fn param_count(&self) -> usize {
        let p = self.stem_patch;
        let e = self.expansion_ratio;
        let k2 = DWCONV_KERNEL * DWCONV_KERNEL;
        let w0 = self.stage_widths[0];
        let mut total = 3 * w0 * p * p + w0;
        for (i, (&d, &c)) in self.stage_depths.iter().zip(&self.stage_widths).enumerate() {
            if i > 0 {
                let cin = self.stage_widths[i - 1];
                total += 4 * cin * c + c;
            }
            let block = k2 * c + c + 2 * c + (e * c * c + e * c) + (e * c * c + c) + c;
            total += d * block;
        }
        total + 2 * self.output_dim()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvNeXtBlock {
    pub dwconv: Conv2d,
    pub norm: LayerNorm,
    pub pw_expand: Conv2d,
    pub pw_project: Conv2d,
    pub layer_scale: ParamId,
    pub channels: usize,
}

impl ConvNeXtBlock {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, channels: usize, expansion: usize, layer_scale_init: f64) -> Result<Self> {
        let hidden = channels * expansion;
        let dw = Conv2dParams {
            stride: 1,
            padding: DWCONV_KERNEL / 2,
            groups: channels,
        };
        Ok(ConvNeXtBlock {
            dwconv: Conv2d::new(b, "dwconv", channels, channels, DWCONV_KERNEL, dw, true)?,
            norm: LayerNorm::new(b, "norm", channels, LN_EPS)?,
            pw_expand: Conv2d::new(b, "pwconv1", channels, hidden, 1, Conv2dParams::default(), true)?,
            pw_project: Conv2d::new(b, "pwconv2", hidden, channels, 1, Conv2dParams::default(), true)?,
            layer_scale: b.constant("layer_scale", &[channels], layer_scale_init)?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).get(1).copied();
        if c != Some(self.channels) {
            return Err(config_err!(
                "convnext block built for {} channels received shape {:?}",
                self.channels,
                ctx.tape.shape(x)
            ));
        }
        let h = self.dwconv.forward(ctx, x)?;
        let h = self.norm.forward(ctx, h)?;
        let h = self.pw_expand.forward(ctx, h)?;
        let h = act(ctx, h, Activation::Gelu)?;
        let h = self.pw_project.forward(ctx, h)?;
        let gamma = ctx.param(self.layer_scale);
        let h = ctx.tape.scale_channels(h, gamma)?;
        ctx.tape.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvNeXt {
    pub config: ConvNeXtConfig,
    pub stem: Conv2d,
    pub downsamples: Vec<Conv2d>,
    pub stages: Vec<Vec<ConvNeXtBlock>>,
    pub norm: LayerNorm,
}

impl ConvNeXt {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: &ConvNeXtConfig) -> Result<Self> {
        config.validate()?;
        let widths = &config.stage_widths;
        let stem = Conv2d::new(
            b,
            "stem",
            3,
            widths[0],
            config.stem_patch,
            Conv2dParams {
                stride: config.stem_patch,
                padding: 0,
                groups: 1,
            },
            true,
        )?;
        let mut downsamples = Vec::new();
        let mut stages = Vec::new();
        for (i, &depth) in config.stage_depths.iter().enumerate() {
            if i > 0 {
                downsamples.push(Conv2d::new(
                    b,
                    &format!("downsample{}", i - 1),
                    widths[i - 1],
                    widths[i],
                    2,
                    Conv2dParams {
                        stride: 2,
                        padding: 0,
                        groups: 1,
                    },
                    true,
                )?);
            }
            let mut sb = b.scope(&format!("stage{i}"));
            let blocks = (0..depth)
                .map(|j| {
                    ConvNeXtBlock::new(
                        &mut sb.scope(&format!("block{j}")),
                        widths[i],
                        config.expansion_ratio,
                        config.layer_scale_init,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let norm = LayerNorm::new(b, "norm", config.output_dim(), LN_EPS)?;
        Ok(ConvNeXt {
            config: config.clone(),
            stem,
            downsamples,
            stages,
            norm,
        })
    }

    /// N×3×S×S image batch → N×D pooled features.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let shape = ctx.tape.shape(image).to_vec();
        let [_, 3, h, w] = shape[..] else {
            return Err(shape_err!("convnext expects N×3×H×W input, got {shape:?}"));
        };
        self.config.check_input_size(h)?;
        self.config.check_input_size(w)?;
        let mut x = self.stem.forward(ctx, image)?;
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                x = self.downsamples[i - 1].forward(ctx, x)?;
            }
            for block in blocks {
                x = block.forward(ctx, x)?;
            }
        }
        let x = self.norm.forward(ctx, x)?;
        ctx.tape.global_avg_pool(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testing::{build, gradcheck, random, run};
    use crate::tensor::Tensor;
    use crate::Error;

    #[test]
    fn default_param_count_by_hand() {
        // stem 1176; stage0 2×6000; ds0 4656; stage1 2×21216; ds1 18528;
        // stage2 2×79296; final norm 192.
        assert_eq!(ConvNeXtConfig::default().param_count(), 237_576);
    }

    #[test]
    fn divisibility_rule() {
        let c = ConvNeXtConfig::default();
        assert_eq!(c.reduction(), 16);
        assert!(c.check_input_size(128).is_ok());
        assert!(c.check_input_size(120).is_err());
    }

    #[test]
    fn mismatched_stage_lists_are_rejected() {
        let c = ConvNeXtConfig {
            stage_depths: vec![1, 1],
            ..ConvNeXtConfig::default()
        };
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_layer_scale_block_is_identity() {
        let (store, block) = build::<f64, _>(1, |b| ConvNeXtBlock::new(b, 24, 4, 0.0));
        let x = random(&[2, 24, 32, 32], 2);
        let y = run(&store, &x, true, |ctx, v| block.forward(ctx, v));
        assert_eq!(y, x);
    }

    #[test]
    fn block_matches_finite_differences() {
        let (store, block) = build::<f64, _>(3, |b| ConvNeXtBlock::new(b, 4, 2, 0.5));
        gradcheck(&store, &random(&[2, 4, 5, 5], 4), true, 1e-4, |ctx, v| block.forward(ctx, v));
    }

    #[test]
    fn block_rejects_channel_mismatch() {
        let (store, block) = build::<f64, _>(5, |b| ConvNeXtBlock::new(b, 4, 2, 0.5));
        let mut tape = crate::Tape::new();
        let x = tape.constant(random(&[1, 5, 3, 3], 6));
        let mut ctx = Ctx::new(&mut tape, &store, false);
        assert!(matches!(block.forward(&mut ctx, x), Err(Error::Config(_))));
    }

    #[test]
    fn zero_layer_scale_branch_is_the_linear_path() {
        let config = ConvNeXtConfig { layer_scale_init: 0.0, ..ConvNeXtConfig::default() };
        let (store, net) = build::<f64, _>(7, |b| ConvNeXt::new(b, &config));
        let x = random(&[2, 3, 32, 32], 8);
        let full = run(&store, &x, false, |ctx, v| net.forward(ctx, v));
        let linear = run(&store, &x, false, |ctx, v| {
            let mut h = net.stem.forward(ctx, v)?;
            for ds in &net.downsamples {
                h = ds.forward(ctx, h)?;
            }
            let h = net.norm.forward(ctx, h)?;
            ctx.tape.global_avg_pool(h)
        });
        assert_eq!(full, linear);
    }

    #[test]
    fn default_branch_output_and_batch_independence() {
        let config = ConvNeXtConfig::default();
        let (store, net) = build::<f32, _>(9, |b| ConvNeXt::new(b, &config));
        let images: Vec<Tensor<f32>> = (0..3).map(|i| random(&[3, 128, 128], 10 + i).cast()).collect();
        let batch = Tensor::stack(&[images[0].clone(), images[1].clone(), images[0].clone(), images[2].clone()]).unwrap();
        let out = run(&store, &batch, false, |ctx, v| net.forward(ctx, v));
        assert_eq!(out.shape(), &[4, 96]);
        assert_eq!(out.data()[..96], out.data()[2 * 96..3 * 96]);
        for (row, &i) in [0usize, 1, 0, 2].iter().enumerate() {
            let single = images[i].clone().reshape([1, 3, 128, 128]).unwrap();
            let alone = run(&store, &single, false, |ctx, v| net.forward(ctx, v));
            for (a, b) in alone.data().iter().zip(&out.data()[row * 96..(row + 1) * 96]) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stage_widths_set_channels() {
        let config = ConvNeXtConfig::default();
        let (store, net) = build::<f64, _>(11, |b| ConvNeXt::new(b, &config));
        let x = random(&[1, 3, 32, 32], 12);
        let mut sizes = Vec::new();
        run(&store, &x, false, |ctx, v| {
            let mut h = net.stem.forward(ctx, v)?;
            for (i, blocks) in net.stages.iter().enumerate() {
                if i > 0 {
                    h = net.downsamples[i - 1].forward(ctx, h)?;
                }
                for block in blocks {
                    h = block.forward(ctx, h)?;
                }
                sizes.push(ctx.tape.shape(h).to_vec());
            }
            Ok(h)
        });
        assert_eq!(sizes, vec![vec![1, 24, 8, 8], vec![1, 48, 4, 4], vec![1, 96, 2, 2]]);
    }
}
