//! Normalization kernels over N×C×P buffers (P = flattened spatial extent).

use crate::tensor::Scalar;

/// Layer norm across the channel axis at every (sample, position).
///
/// Writes the output and the per-position `mean` / `rstd` (length N·P) used
/// by the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_channels_forward<T: Scalar>(
    x: &[T],
    (n, c, p): (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    eps: T,
    y: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let inv_c = T::one() / T::from_usize(c).unwrap();
    for s in 0..n {
        let xs = &x[s * c * p..(s + 1) * c * p];
        let ys = &mut y[s * c * p..(s + 1) * c * p];
        let mu = &mut mean[s * p..(s + 1) * p];
        let rs = &mut rstd[s * p..(s + 1) * p];
        mu.fill(T::zero());
        for plane in xs.chunks(p) {
            for (m, &v) in mu.iter_mut().zip(plane) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m *= inv_c);
        rs.fill(T::zero());
        for plane in xs.chunks(p) {
            for ((r, &m), &v) in rs.iter_mut().zip(mu.iter()).zip(plane) {
                let d = v - m;
                *r += d * d;
            }
        }
        rs.iter_mut()
            .for_each(|r| *r = T::one() / (*r * inv_c + eps).sqrt());
        for (ch, (yp, xp)) in ys.chunks_mut(p).zip(xs.chunks(p)).enumerate() {
            let (gm, bt) = (gamma[ch], beta[ch]);
            for (((o, &v), &m), &r) in yp.iter_mut().zip(xp).zip(mu.iter()).zip(rs.iter()) {
                *o = (v - m) * r * gm + bt;
            }
        }
    }
}

/// Accumulates gradients of [`layer_norm_channels_forward`].
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_channels_backward<T: Scalar>(
    x: &[T],
    (n, c, p): (usize, usize, usize),
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let mut s1 = vec![T::zero(); p];
    let mut s2 = vec![T::zero(); p];
    let mut xhat = vec![T::zero(); p];
    for s in 0..n {
        let xs = &x[s * c * p..(s + 1) * c * p];
        let dys = &dy[s * c * p..(s + 1) * c * p];
        let mu = &mean[s * p..(s + 1) * p];
        let rs = &rstd[s * p..(s + 1) * p];
        s1.fill(T::zero());
        s2.fill(T::zero());
        for ch in 0..c {
            let xp = &xs[ch * p..(ch + 1) * p];
            let dp = &dys[ch * p..(ch + 1) * p];
            let gm = gamma[ch];
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in 0..p {
                let xh = (xp[i] - mu[i]) * rs[i];
                let dxh = dp[i] * gm;
                s1[i] += dxh;
                s2[i] += dxh * xh;
                dg += dp[i] * xh;
                db += dp[i];
            }
            if let Some(g) = dgamma.as_deref_mut() {
                g[ch] += dg;
            }
            if let Some(b) = dbeta.as_deref_mut() {
                b[ch] += db;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * c * p..(s + 1) * c * p];
            for ch in 0..c {
                let xp = &xs[ch * p..(ch + 1) * p];
                let dp = &dys[ch * p..(ch + 1) * p];
                let gm = gamma[ch];
                let out = &mut dxs[ch * p..(ch + 1) * p];
                for i in 0..p {
                    xhat[i] = (xp[i] - mu[i]) * rs[i];
                    out[i] += rs[i] * (dp[i] * gm - inv_c * (s1[i] + xhat[i] * s2[i]));
                }
            }
        }
    }
}

/// Per-channel mean and biased variance over (N, P).
pub fn channel_moments<T: Scalar>(x: &[T], (n, c, p): (usize, usize, usize)) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * p).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            acc += x[(s * c + ch) * p..(s * c + ch + 1) * p].iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut v = T::zero();
        for s in 0..n {
            for &xv in &x[(s * c + ch) * p..(s * c + ch + 1) * p] {
                let d = xv - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// `y = (x - mean[c]) * rstd[c] * gamma[c] + beta[c]`.
pub fn channel_affine_normalize<T: Scalar>(
    x: &[T],
    (n, c, p): (usize, usize, usize),
    mean: &[T],
    rstd: &[T],
    gamma: &[T],
    beta: &[T],
    y: &mut [T],
) {
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * p..(s * c + ch + 1) * p;
            let scale = rstd[ch] * gamma[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                *o = v * scale + shift;
            }
        }
    }
}

/// Gradients of batch norm. With `batch_stats` the statistics are treated as
/// functions of `x` (training mode); otherwise they are constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Scalar>(
    x: &[T],
    (n, c, p): (usize, usize, usize),
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    batch_stats: bool,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let count = T::from_usize(n * p).unwrap();
    for ch in 0..c {
        let (m, r, gm) = (mean[ch], rstd[ch], gamma[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for s in 0..n {
            let rg = (s * c + ch) * p..(s * c + ch + 1) * p;
            for (&d, &v) in dy[rg.clone()].iter().zip(&x[rg]) {
                sum_dy += d;
                sum_dy_xh += d * (v - m) * r;
            }
        }
        if let Some(g) = dgamma.as_deref_mut() {
            g[ch] += sum_dy_xh;
        }
        if let Some(b) = dbeta.as_deref_mut() {
            b[ch] += sum_dy;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let k = gm * r;
            let (mean_dy, mean_dy_xh) = (sum_dy / count, sum_dy_xh / count);
            for s in 0..n {
                let rg = (s * c + ch) * p..(s * c + ch + 1) * p;
                let (xs, ds) = (&x[rg.clone()], &dy[rg.clone()]);
                for ((o, &d), &v) in dx[rg].iter_mut().zip(ds).zip(xs) {
                    if batch_stats {
                        let xh = (v - m) * r;
                        *o += k * (d - mean_dy - xh * mean_dy_xh);
                    } else {
                        *o += k * d;
                    }
                }
            }
        }
    }
}
