//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each forward operation appends a node holding its output value plus what
//! its backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into every reachable leaf that requires them.

use rand::Rng;

use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::ops::conv::{self, ConvGeometry, ConvGrads};
use crate::ops::{norm, Activation, Conv2dParams};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which statistics a batch-norm node normalizes with.
pub enum BatchNormStats<'a, T> {
    /// Training mode: statistics of the current batch.
    Batch,
    /// Eval mode: stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch mean and unbiased variance observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Activation {
        x: Var,
        kind: Activation,
        aux: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation for one backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// (N, C, P) view of a rank-2 (N×C) or rank-4 (N×C×H×W) shape.
fn ncp(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(shape_err!("expected N×C or N×C×H×W, got {shape:?}")),
    }
}

fn check_vector(name: &str, shape: &[usize], len: usize) -> Result<()> {
    if shape != [len] {
        return Err(shape_err!("{name} must have shape [{len}], got {shape:?}"));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        crate::parallel::retain_freed_memory();
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`. Leaves that
    /// require grad but were not reached get zeros; `None` before backward
    /// or for nodes that do not track gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !self.consumed || !node.requires_grad {
            return None;
        }
        match self.grads.get(v.0)?.as_ref() {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).ok(),
            None if matches!(node.op, Op::Leaf) => Some(Tensor::zeros(node.value.shape().to_vec())),
            None => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{what} produced a non-finite value")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input tensor. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Adds a parameter from `store` as a leaf linked back to it.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.is_trainable());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, params: Conv2dParams) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), params)?;
        if let Some(b) = b {
            check_vector("conv2d bias", self.shape(b), geom.out_ch)?;
        }
        let out_shape = geom.output_shape();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        conv::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new(out_shape.to_vec(), out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &parents, "conv2d")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let mut aux = Vec::new();
        kind.forward(xv.data(), out.data_mut(), &mut aux);
        self.push(out, Op::Activation { x, kind, aux }, &[x], "activation")
    }

    /// Normalizes over the channel axis (axis 1) independently at every
    /// sample and spatial position, then applies a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(config_err!("layer_norm eps must be positive, got {eps}"));
        }
        let (n, c, p) = ncp(self.shape(x))?;
        check_vector("layer_norm gamma", self.shape(gamma), c)?;
        check_vector("layer_norm beta", self.shape(beta), c)?;
        let mut out = Tensor::zeros(self.shape(x).to_vec());
        let mut mean = vec![T::zero(); n * p];
        let mut rstd = vec![T::zero(); n * p];
        norm::layer_norm_channels_forward(
            self.value(x).data(),
            (n, c, p),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64_lossy(eps),
            out.data_mut(),
            &mut mean,
            &mut rstd,
        );
        self.push(
            out,
            Op::LayerNorm { x, gamma, beta, mean, rstd },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Batch normalization over (N, H, W) per channel. In training mode the
    /// observed batch statistics are returned so the caller can update its
    /// running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<ObservedStats<T>>)> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(config_err!("batch_norm eps must be positive, got {eps}"));
        }
        let (n, c, p) = ncp(self.shape(x))?;
        check_vector("batch_norm gamma", self.shape(gamma), c)?;
        check_vector("batch_norm beta", self.shape(beta), c)?;
        let eps_t = T::from_f64_lossy(eps);
        let (mean, var, observed, batch_stats) = match stats {
            BatchNormStats::Batch => {
                if n * p < 2 {
                    return Err(data_err!(
                        "batch_norm in training mode needs at least 2 values per channel, got {}",
                        n * p
                    ));
                }
                let (mean, var) = norm::channel_moments(self.value(x).data(), (n, c, p));
                let count = T::from_usize(n * p).unwrap();
                let correction = count / (count - T::one());
                let observed = ObservedStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|&v| v * correction).collect(),
                };
                (mean, var, Some(observed), true)
            }
            BatchNormStats::Running { mean, var } => {
                check_vector("running mean", &[mean.len()], c)?;
                check_vector("running var", &[var.len()], c)?;
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut out = Tensor::zeros(self.shape(x).to_vec());
        norm::channel_affine_normalize(
            self.value(x).data(),
            (n, c, p),
            &mean,
            &rstd,
            self.value(gamma).data(),
            self.value(beta).data(),
            out.data_mut(),
        );
        let v = self.push(
            out,
            Op::BatchNorm { x, gamma, beta, mean, rstd, batch_stats },
            &[x, gamma, beta],
            "batch_norm",
        )?;
        Ok((v, observed))
    }

    /// N×C×H×W → N×C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(shape_err!("global_avg_pool needs a non-empty plane"));
        }
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        self.push(out, Op::GlobalAvgPool { x }, &[x], "global_avg_pool")
    }

    /// Joins N×Ca and N×Cb feature rows into N×(Ca+Cb).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.value(a).dims2()?;
        let (nb, cb) = self.value(b).dims2()?;
        if na != nb {
            return Err(shape_err!("concat batch mismatch: {na} vs {nb}"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb));
        for i in 0..na {
            data.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::new(vec![na, ca + cb], data)?;
        self.push(out, Op::Concat { a, b }, &[a, b], "concat")
    }

    /// N×F · F×K (+ K) → N×K.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let (fw, k) = self.value(w).dims2()?;
        if f != fw {
            return Err(shape_err!("dense inner dimensions disagree: input {f}, weight {fw}"));
        }
        if let Some(b) = b {
            check_vector("dense bias", self.shape(b), k)?;
        }
        let mut out = vec![T::zero(); n * k];
        gemm(n, f, k, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(bv).for_each(|(o, &v)| *o += v);
            }
        }
        let out = Tensor::new(vec![n, k], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Dense { x, w, b }, &parents, "dense")
    }

    /// Mean softmax cross-entropy over the batch. Returns the scalar loss
    /// node and the row-wise softmax probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<T>)> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for a batch of {n}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(data_err!("label {bad} out of range for {k} classes"));
        }
        let (probs, log_probs) = softmax_rows(self.value(logits).data(), k);
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            loss -= log_probs[i * k + l];
        }
        loss /= T::from_usize(n.max(1)).unwrap();
        let probs_t = Tensor::new(vec![n, k], probs.clone())?;
        let v = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
            "softmax_cross_entropy",
        )?;
        Ok((v, probs_t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, Op::Mul { a, b }, &[a, b], "mul")
    }

    /// Scales every channel plane of `x` (N×C×H×W or N×C) by `s`, which is
    /// either per-sample (N×C) or shared across the batch (C).
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, p) = ncp(self.shape(x))?;
        let shared = match *self.shape(s) {
            [sc] if sc == c => true,
            [sn, sc] if sn == n && sc == c => false,
            ref other => {
                return Err(shape_err!(
                    "channel scale must be [{c}] or [{n}, {c}], got {other:?}"
                ))
            }
        };
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (idx, plane) in out.data_mut().chunks_mut(p).enumerate() {
            let scale = if shared { sv[idx % c] } else { sv[idx] };
            plane.iter_mut().for_each(|v| *v *= scale);
        }
        self.push(out, Op::ScaleChannels { x, s }, &[x, s], "scale_channels")
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(config_err!("dropout rate must be in [0, 1), got {rate}"));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        self.push(out, Op::Dropout { x, mask }, &[x], "dropout")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x], "sum")
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what} operands differ in shape: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    /// Back-propagates from the scalar `root`. Afterwards [`Tape::grad`]
    /// returns gradients for leaves; see [`ParamStore::collect_grads`] to move
    /// parameter gradients into a store. A tape can be consumed only once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage(
                "backward called twice on the same tape; record a new forward pass".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &dy);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.value(v).numel()]
    }

    fn send(&mut self, v: Var, g: Vec<T>) {
        accumulate(&mut self.grads[v.0], g);
    }

    fn backward_node(&mut self, i: usize, dy: &[T]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut out: Vec<(Var, Vec<T>)> = Vec::with_capacity(3);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.needs(*x).then(|| self.zeros_like(*x));
                let mut dw = self.needs(*w).then(|| self.zeros_like(*w));
                let mut db = b.filter(|b| self.needs(*b)).map(|b| self.zeros_like(b));
                conv::conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    dy,
                    ConvGrads {
                        input: dx.as_deref_mut(),
                        weight: dw.as_deref_mut(),
                        bias: db.as_deref_mut(),
                    },
                );
                out.extend(dx.map(|g| (*x, g)));
                out.extend(dw.map(|g| (*w, g)));
                if let (Some(b), Some(g)) = (b, db) {
                    out.push((*b, g));
                }
            }
            Op::Activation { x, kind, aux } => {
                if self.needs(*x) {
                    let mut dx = self.zeros_like(*x);
                    kind.backward(val(*x), nodes[i].value.data(), aux, dy, &mut dx);
                    out.push((*x, dx));
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let dims = ncp(nodes[x.0].value.shape()).expect("validated in forward");
                let mut dx = self.needs(*x).then(|| self.zeros_like(*x));
                let mut dg = self.needs(*gamma).then(|| self.zeros_like(*gamma));
                let mut db = self.needs(*beta).then(|| self.zeros_like(*beta));
                norm::layer_norm_channels_backward(
                    val(*x),
                    dims,
                    val(*gamma),
                    mean,
                    rstd,
                    dy,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|g| (*x, g)));
                out.extend(dg.map(|g| (*gamma, g)));
                out.extend(db.map(|g| (*beta, g)));
            }
            Op::BatchNorm { x, gamma, beta, mean, rstd, batch_stats } => {
                let dims = ncp(nodes[x.0].value.shape()).expect("validated in forward");
                let mut dx = self.needs(*x).then(|| self.zeros_like(*x));
                let mut dg = self.needs(*gamma).then(|| self.zeros_like(*gamma));
                let mut db = self.needs(*beta).then(|| self.zeros_like(*beta));
                norm::batch_norm_backward(
                    val(*x),
                    dims,
                    val(*gamma),
                    mean,
                    rstd,
                    *batch_stats,
                    dy,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|g| (*x, g)));
                out.extend(dg.map(|g| (*gamma, g)));
                out.extend(db.map(|g| (*beta, g)));
            }
            Op::GlobalAvgPool { x } => {
                if self.needs(*x) {
                    let (_, _, h, w) = nodes[x.0].value.dims4().expect("validated in forward");
                    let inv = T::one() / T::from_usize(h * w).unwrap();
                    let mut dx = self.zeros_like(*x);
                    for (plane, &d) in dx.chunks_mut(h * w).zip(dy) {
                        plane.fill(d * inv);
                    }
                    out.push((*x, dx));
                }
            }
            Op::Concat { a, b } => {
                let (n, ca) = nodes[a.0].value.dims2().expect("validated in forward");
                let cb = nodes[b.0].value.dims2().expect("validated in forward").1;
                let w = ca + cb;
                if self.needs(*a) {
                    let g = (0..n).flat_map(|r| dy[r * w..r * w + ca].iter().copied()).collect();
                    out.push((*a, g));
                }
                if self.needs(*b) {
                    let g = (0..n).flat_map(|r| dy[r * w + ca..(r + 1) * w].iter().copied()).collect();
                    out.push((*b, g));
                }
            }
            Op::Dense { x, w, b } => {
                let (n, f) = nodes[x.0].value.dims2().expect("validated in forward");
                let k = nodes[w.0].value.dims2().expect("validated in forward").1;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(n, k, f, dy, false, val(*w), true, &mut dx, false);
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); f * k];
                    gemm(f, n, k, val(*x), true, dy, false, &mut dw, false);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); k];
                    for row in dy.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((b, db));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.needs(*logits) {
                    let k = probs.len() / labels.len().max(1);
                    let scale = dy[0] / T::from_usize(labels.len().max(1)).unwrap();
                    let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        g[r * k + l] -= scale;
                    }
                    out.push((*logits, g));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, dy.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    out.push((*a, dy.iter().zip(val(*b)).map(|(&d, &v)| d * v).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, dy.iter().zip(val(*a)).map(|(&d, &v)| d * v).collect()));
                }
            }
            Op::ScaleChannels { x, s } => {
                let (_, c, p) = ncp(nodes[x.0].value.shape()).expect("validated in forward");
                let sv = val(*s);
                let shared = sv.len() == c;
                if self.needs(*x) {
                    let mut dx = dy.to_vec();
                    for (idx, plane) in dx.chunks_mut(p).enumerate() {
                        let scale = if shared { sv[idx % c] } else { sv[idx] };
                        plane.iter_mut().for_each(|v| *v *= scale);
                    }
                    out.push((*x, dx));
                }
                if self.needs(*s) {
                    let mut ds = vec![T::zero(); sv.len()];
                    for (idx, (dp, xp)) in dy.chunks(p).zip(val(*x).chunks(p)).enumerate() {
                        let dot = dp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
                        ds[if shared { idx % c } else { idx }] += dot;
                    }
                    out.push((*s, ds));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    out.push((*x, dy.iter().zip(mask).map(|(&d, &m)| d * m).collect()));
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    out.push((*x, vec![dy[0]; nodes[x.0].value.numel()]));
                }
            }
        }
        for (v, g) in out {
            self.send(v, g);
        }
    }

    /// Parameter leaves on this tape paired with their gradients.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let id = n.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((id, g))
        })
    }
}

/// Numerically stable softmax and log-softmax of each row.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> (Vec<T>, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut logp = vec![T::zero(); logits.len()];
    for ((row, p), lp) in logits.chunks(k).zip(probs.chunks_mut(k)).zip(logp.chunks_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in p.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        let log_z = z.ln();
        for ((o, l), &v) in p.iter_mut().zip(lp.iter_mut()).zip(row) {
            *o /= z;
            *l = v - max - log_z;
        }
    }
    (probs, logp)
}
