//! Parameterized building blocks shared by both branches and the head.

use crate::autograd::{BatchNormStats, ObservedStats, Tape, Var};
use crate::error::Result;
use crate::ops::{Activation, Conv2dParams};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Forward-pass context: the tape being recorded, read access to the
/// parameters, the mode, and batch-norm statistics waiting to be folded into
/// running estimates once the pass completes.
pub(crate) struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    pub bn_updates: Vec<PendingStats<T>>,
}

pub(crate) struct PendingStats<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub observed: ObservedStats<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool) -> Self {
        Ctx {
            tape,
            store,
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Folds observed batch statistics into running estimates:
/// `running = (1 - momentum) * running + momentum * observed`.
pub(crate) fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<PendingStats<T>>) {
    for u in updates {
        let m = T::from_f64_lossy(u.momentum);
        let keep = T::from_f64_lossy(1.0 - u.momentum);
        for (id, obs) in [(u.running_mean, &u.observed.mean), (u.running_var, &u.observed.var_unbiased)] {
            for (r, &o) in store.get_mut(id).value.data_mut().iter_mut().zip(obs) {
                *r = if u.momentum == 1.0 { o } else { keep * *r + m * o };
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: Conv2dParams,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        params: Conv2dParams,
        bias: bool,
    ) -> Result<Self> {
        let mut b = b.scope(name);
        let cpg = in_ch / params.groups;
        let weight = b.he_uniform("weight", &[out_ch, cpg, kernel, kernel], cpg * kernel * kernel)?;
        let bias = if bias { Some(b.constant("bias", &[out_ch], 0.0)?) } else { None };
        Ok(Conv2d { weight, bias, params })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.params)
    }
}

/// Layer norm over the channel axis.
#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, ch: usize, eps: f64) -> Result<Self> {
        let mut b = b.scope(name);
        Ok(LayerNorm {
            gamma: b.constant("weight", &[ch], 1.0)?,
            beta: b.constant("bias", &[ch], 0.0)?,
            eps,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        ch: usize,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        let mut b = b.scope(name);
        Ok(BatchNorm2d {
            gamma: b.constant("weight", &[ch], 1.0)?,
            beta: b.constant("bias", &[ch], 0.0)?,
            running_mean: b.buffer("running_mean", &[ch], 0.0)?,
            running_var: b.buffer("running_var", &[ch], 1.0)?,
            momentum,
            eps,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if ctx.training {
            let (y, observed) = ctx.tape.batch_norm(x, g, b, BatchNormStats::Batch, self.eps)?;
            ctx.bn_updates.push(PendingStats {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                observed: observed.expect("training mode reports batch statistics"),
            });
            Ok(y)
        } else {
            let store = ctx.store;
            let stats = BatchNormStats::Running {
                mean: store.get(self.running_mean).value.data(),
                var: store.get(self.running_var).value.data(),
            };
            Ok(ctx.tape.batch_norm(x, g, b, stats, self.eps)?.0)
        }
    }
}

/// Affine map on N×F rows; weight is stored F×K.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut b = b.scope(name);
        Ok(Dense {
            weight: b.he_uniform("weight", &[fan_in, fan_out], fan_in)?,
            bias: b.constant("bias", &[fan_out], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.dense(x, w, Some(b))
    }
}

pub(crate) fn act<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, kind: Activation) -> Result<Var> {
    ctx.tape.activation(x, kind)
}


#[cfg(test)]
mod tests {
    use super::testing::{build, random, run};
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn momentum_one_copies_batch_statistics() {
        let (mut store, bn) = build::<f64, _>(1, |b| BatchNorm2d::new(b, "bn", 3, 1.0, 1e-3));
        let x = random(&[4, 3, 2, 2], 2);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let mut ctx = Ctx::new(&mut tape, &store, true);
        bn.forward(&mut ctx, v).unwrap();
        let updates = std::mem::take(&mut ctx.bn_updates);
        apply_bn_updates(&mut store, updates);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| x.data()[(n * 3 + c) * 4..(n * 3 + c + 1) * 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0;
            assert_eq!(store.get(bn.running_mean).value.data()[c], mean);
            assert!((store.get(bn.running_var).value.data()[c] - var).abs() < 1e-15);
        }
    }

    #[test]
    fn running_statistics_follow_the_momentum_rule() {
        let (mut store, bn) = build::<f64, _>(3, |b| BatchNorm2d::new(b, "bn", 2, 0.1, 1e-3));
        let x = Tensor::from_fn([2, 2, 1, 2], |i| i as f64);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let mut ctx = Ctx::new(&mut tape, &store, true);
        bn.forward(&mut ctx, v).unwrap();
        let updates = std::mem::take(&mut ctx.bn_updates);
        apply_bn_updates(&mut store, updates);
        // Channel 0 sees {0, 1, 4, 5}: mean 2.5, unbiased variance 17/3.
        assert!((store.get(bn.running_mean).value.data()[0] - 0.25).abs() < 1e-15);
        assert!((store.get(bn.running_var).value.data()[0] - (0.9 + 0.1 * 17.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_with_initial_statistics_divides_by_sqrt_one_plus_eps() {
        let (store, bn) = build::<f64, _>(4, |b| BatchNorm2d::new(b, "bn", 2, 0.1, 1e-3));
        let x = random(&[1, 2, 3, 3], 5);
        let y = run(&store, &x, false, |ctx, v| bn.forward(ctx, v));
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - i / 1.001f64.sqrt()).abs() < 1e-15);
        }
    }
}
