//! Central finite-difference checks of every tape operation and of the full
//! model, all in f64. Each check panics with the offending coordinate.

use falconfuse_core::autograd::BatchNormStats;
use falconfuse_core::fusion::{Mode, StepKey};
use falconfuse_core::ops::{Activation, Conv2dParams};
use falconfuse_core::{build_model, ModelConfig, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so kinked activations stay differentiable.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Coordinates to probe: all of them for small tensors, otherwise the two
/// ends plus a seeded sample, at least ten in total.
pub fn probe_coords(n: usize, seed: u64) -> Vec<usize> {
    if n <= 12 {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0, n - 1];
    idx.extend((0..10).map(|_| rng.random_range(0..n)));
    idx
}

pub fn mixed_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Scalar objective `sum(f(inputs) * r)` for a fixed random projection `r`.
pub fn objective<F>(inputs: &[Tensor<f64>], f: &F, grads: bool) -> (f64, Vec<Tensor<f64>>)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(&mut tape, &vars).unwrap();
    let r = tape.constant(random(tape.shape(y), 999));
    let yr = tape.mul(y, r).unwrap();
    let loss = tape.sum(yr).unwrap();
    let value = tape.value(loss).data()[0];
    let mut out = Vec::new();
    if grads {
        tape.backward(loss).unwrap();
        out = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
    }
    (value, out)
}

pub fn check_op<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, grads) = objective(&inputs, &f, true);
    for (k, input) in inputs.iter().enumerate() {
        for i in probe_coords(input.numel(), k as u64) {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (objective(&plus, &f, false).0 - objective(&minus, &f, false).0) / (2.0 * H);
            let analytic = grads[k].data()[i];
            let err = mixed_error(analytic, numeric);
            assert!(err < 1e-5, "{name}: input {k} coord {i}: analytic {analytic} numeric {numeric}");
        }
    }
}

pub fn conv2d_dense_layouts() {
    for (stride, padding, k) in [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 2)] {
        let p = Conv2dParams { stride, padding, groups: 1 };
        check_op(
            &format!("conv s{stride} p{padding} k{k}"),
            vec![random(&[2, 3, 6, 6], 1), random(&[4, 3, k, k], 2), random(&[4], 3)],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), p),
        );
    }
}

pub fn conv2d_grouped_and_depthwise() {
    let grouped = Conv2dParams { stride: 1, padding: 1, groups: 2 };
    check_op(
        "grouped conv",
        vec![random(&[2, 4, 5, 5], 4), random(&[6, 2, 3, 3], 5)],
        move |t, v| t.conv2d(v[0], v[1], None, grouped),
    );
    for (stride, k) in [(1, 7), (2, 3), (2, 5), (3, 3)] {
        let dw = Conv2dParams { stride, padding: k / 2, groups: 3 };
        check_op(
            &format!("depthwise s{stride} k{k}"),
            vec![random(&[2, 3, 7, 7], 6), random(&[3, 1, k, k], 7), random(&[3], 8)],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), dw),
        );
    }
}

pub fn activations() {
    for kind in [Activation::Relu, Activation::Gelu, Activation::Silu, Activation::Sigmoid] {
        check_op(&format!("{kind}"), vec![away_from_zero(&[2, 3, 4], 10)], move |t, v| {
            t.activation(v[0], kind)
        });
    }
}

pub fn layer_norm_over_channels() {
    check_op(
        "layer_norm",
        vec![random(&[2, 5, 3, 3], 11), random(&[5], 12), random(&[5], 13)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
    );
}

pub fn batch_norm_both_modes() {
    check_op(
        "batch_norm batch stats",
        vec![random(&[3, 4, 3, 3], 14), random(&[4], 15), random(&[4], 16)],
        |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BatchNormStats::Batch, 1e-3)?.0),
    );
    let mean = [0.1, -0.2, 0.3, 0.0];
    let var = [1.5, 0.5, 2.0, 1.0];
    check_op(
        "batch_norm running stats",
        vec![random(&[2, 4, 3, 3], 17), random(&[4], 18), random(&[4], 19)],
        move |t, v| {
            let stats = BatchNormStats::Running { mean: &mean, var: &var };
            Ok(t.batch_norm(v[0], v[1], v[2], stats, 1e-3)?.0)
        },
    );
}

pub fn pooling_concat_dense() {
    check_op("global_avg_pool", vec![random(&[2, 3, 4, 5], 20)], |t, v| t.global_avg_pool(v[0]));
    check_op("concat", vec![random(&[3, 4], 21), random(&[3, 2], 22)], |t, v| t.concat(v[0], v[1]));
    check_op(
        "dense",
        vec![random(&[3, 5], 23), random(&[5, 4], 24), random(&[4], 25)],
        |t, v| t.dense(v[0], v[1], Some(v[2])),
    );
}

pub fn softmax_cross_entropy_loss() {
    check_op("cross entropy", vec![random(&[4, 3], 26)], |t, v| {
        Ok(t.softmax_cross_entropy(v[0], &[0, 2, 1, 2])?.0)
    });
}

pub fn elementwise_and_broadcast() {
    check_op("add", vec![random(&[2, 3, 2, 2], 27), random(&[2, 3, 2, 2], 28)], |t, v| t.add(v[0], v[1]));
    check_op("mul", vec![random(&[2, 3, 2, 2], 29), random(&[2, 3, 2, 2], 30)], |t, v| t.mul(v[0], v[1]));
    check_op("scale_channels shared", vec![random(&[2, 3, 2, 2], 31), random(&[3], 32)], |t, v| {
        t.scale_channels(v[0], v[1])
    });
    check_op("scale_channels per sample", vec![random(&[2, 3, 2, 2], 33), random(&[2, 3], 34)], |t, v| {
        t.scale_channels(v[0], v[1])
    });
    check_op("sum", vec![random(&[3, 4], 35)], |t, v| t.sum(v[0]));
}

pub fn dropout_with_a_fixed_mask() {
    check_op("dropout", vec![random(&[4, 6], 36)], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        t.dropout(v[0], 0.3, &mut rng)
    });
}

pub fn tiny_batch(model_size: usize, n: usize) -> (Tensor<f64>, Vec<usize>) {
    (random(&[n, 3, model_size, model_size], 40), (0..n).map(|i| i % 3).collect())
}

/// Cross-entropy of the whole model against parameter perturbations.
pub fn check_model(mode: Mode, tol: f64) {
    let config = ModelConfig::tiny();
    let mut model = build_model::<f64>(&config).unwrap();
    model.set_mode(mode);
    model.set_step_key(StepKey { epoch: 1, step: 2 });
    let (images, labels) = tiny_batch(config.image_size, 4);
    let base = model.loss(&images, &labels).unwrap();
    model.params_mut().zero_grad();
    let out = model.loss_and_backward(&images, &labels).unwrap();
    assert!((out.loss - base).abs() < 1e-12);

    let ids: Vec<_> = model.params().iter().filter(|(_, p)| p.is_trainable()).map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = model.params().get(id).clone();
        let grad = p.grad.clone().expect("every trainable parameter receives a gradient");
        for i in probe_coords(p.value.numel(), 100 + k as u64) {
            let orig = p.value.data()[i];
            model.params_mut().get_mut(id).value.data_mut()[i] = orig + H;
            let up = model.loss(&images, &labels).unwrap();
            model.params_mut().get_mut(id).value.data_mut()[i] = orig - H;
            let down = model.loss(&images, &labels).unwrap();
            model.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grad.data()[i];
            assert!(
                mixed_error(analytic, numeric) < tol,
                "{} [{i}]: analytic {analytic} numeric {numeric}",
                p.name
            );
        }
    }
}

pub fn full_model_training_mode() {
    check_model(Mode::Training, 1e-4);
}

pub fn full_model_eval_mode() {
    check_model(Mode::Eval, 1e-4);
}

/// Every per-op check, in order.
pub fn all_ops() {
    conv2d_dense_layouts();
    conv2d_grouped_and_depthwise();
    activations();
    layer_norm_over_channels();
    batch_norm_both_modes();
    pooling_concat_dense();
    softmax_cross_entropy_loss();
    elementwise_and_broadcast();
    dropout_with_a_fixed_mask();
}
