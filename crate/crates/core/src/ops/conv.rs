//! 2-D cross-correlation with zero padding, stride and channel groups.
//!
//! Depthwise convolutions (one filter per input channel) take a direct
//! spatial path; everything else goes through im2col and a matrix product.

use crate::error::{config_err, shape_err, Result};
use crate::parallel;
use crate::tensor::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Fully resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], p: Conv2dParams) -> Result<Self> {
        let [batch, in_ch, in_h, in_w] = *input else {
            return Err(shape_err!("conv2d input must be N×C×H×W, got {input:?}"));
        };
        let [out_ch, cpg, kh, kw] = *weight else {
            return Err(shape_err!("conv2d weight must be O×C/g×kH×kW, got {weight:?}"));
        };
        if p.stride == 0 {
            return Err(config_err!("conv2d stride must be positive"));
        }
        if p.groups == 0 || in_ch % p.groups != 0 || out_ch % p.groups != 0 {
            return Err(config_err!(
                "conv2d groups={} must divide input channels {in_ch} and output channels {out_ch}",
                p.groups
            ));
        }
        if cpg != in_ch / p.groups {
            return Err(shape_err!(
                "conv2d weight expects {cpg} channels per group, input provides {} ({} channels / {} groups)",
                in_ch / p.groups,
                in_ch,
                p.groups
            ));
        }
        if kh == 0 || kw == 0 {
            return Err(shape_err!("conv2d kernel must be non-empty, got {kh}×{kw}"));
        }
        let (ph, pw) = (in_h + 2 * p.padding, in_w + 2 * p.padding);
        if ph < kh || pw < kw {
            return Err(shape_err!(
                "conv2d kernel {kh}×{kw} larger than padded input {ph}×{pw}"
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            out_h: (ph - kh) / p.stride + 1,
            out_w: (pw - kw) / p.stride + 1,
            stride: p.stride,
            padding: p.padding,
            groups: p.groups,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_ch && self.out_ch == self.in_ch
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn cin_g(&self) -> usize {
        self.in_ch / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_ch / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    /// Output indices `lo..hi` along one axis whose input tap `o * stride + k - pad`
    /// lands inside `0..len`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(s)
        };
        let hi = if len + self.padding < k + 1 {
            0
        } else {
            ((len + self.padding - k - 1) / s + 1).min(out_len)
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let in_len = g.in_ch * g.in_plane();
    let out_len = g.out_ch * g.out_plane();
    debug_assert_eq!(out.len(), g.batch * out_len);
    parallel::for_each_chunk(out, out_len, |n, y| {
        let xs = &x[n * in_len..(n + 1) * in_len];
        if g.is_depthwise() {
            depthwise_forward_sample(g, xs, w, bias, y);
        } else {
            gemm_forward_sample(g, xs, w, bias, y);
        }
    });
}

fn gemm_forward_sample<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    y: &mut [T],
) {
    let (cin_g, cout_g, rows, op) = (g.cin_g(), g.cout_g(), g.col_rows(), g.out_plane());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * op]
    };
    for grp in 0..g.groups {
        let xg = &x[grp * cin_g * g.in_plane()..(grp + 1) * cin_g * g.in_plane()];
        let rhs: &[T] = if g.is_pointwise() {
            xg
        } else {
            im2col(g, xg, &mut cols);
            &cols
        };
        let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
        let yg = &mut y[grp * cout_g * op..(grp + 1) * cout_g * op];
        gemm(cout_g, rows, op, wg, false, rhs, false, yg, false);
    }
    if let Some(b) = bias {
        for (plane, &bv) in y.chunks_mut(op).zip(b) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow, op) = (g.out_h, g.out_w, g.out_plane());
    for c in 0..g.cin_g() {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.in_h, oh);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.in_w, ow);
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * op..][..op];
                row.fill(T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in ox0..ox1 {
                        dst[ox] = src[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow, op) = (g.out_h, g.out_w, g.out_plane());
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, g.in_h, oh);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, g.in_w, ow);
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * op..][..op];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + kx - g.padding] += src[ox];
                    }
                }
            }
        }
    }
}

/// Depthwise kernels view a strided input as `stride²` phase planes: phase
/// `(py, px)` holds input pixels `(s·i + py, s·j + px)`. Every kernel tap then
/// reads one phase plane at a fixed offset with unit stride.
struct Phases {
    /// `(offset, height, width)` of each phase plane in the scratch buffer.
    dims: Vec<(usize, usize, usize)>,
    len: usize,
}

impl Phases {
    fn new(g: &ConvGeometry) -> Self {
        let s = g.stride;
        let mut dims = Vec::with_capacity(s * s);
        let mut len = 0;
        let count = |len: usize, p: usize| if p < len { (len - p).div_ceil(s) } else { 0 };
        for py in 0..s {
            for px in 0..s {
                let (h, w) = (count(g.in_h, py), count(g.in_w, px));
                dims.push((len, h, w));
                len += h * w;
            }
        }
        Phases { dims, len }
    }

    fn split<T: Scalar>(&self, g: &ConvGeometry, plane: &[T], out: &mut [T]) {
        let s = g.stride;
        for (p, &(off, h, w)) in self.dims.iter().enumerate() {
            let (py, px) = (p / s, p % s);
            for i in 0..h {
                let src = &plane[(s * i + py) * g.in_w..][..g.in_w];
                let dst = &mut out[off + i * w..][..w];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[s * j + px];
                }
            }
        }
    }

    fn merge_add<T: Scalar>(&self, g: &ConvGeometry, phases: &[T], plane: &mut [T]) {
        let s = g.stride;
        for (p, &(off, h, w)) in self.dims.iter().enumerate() {
            let (py, px) = (p / s, p % s);
            for i in 0..h {
                let dst = &mut plane[(s * i + py) * g.in_w..][..g.in_w];
                let src = &phases[off + i * w..][..w];
                for (j, &v) in src.iter().enumerate() {
                    dst[s * j + px] += v;
                }
            }
        }
    }
}

/// One kernel tap resolved against the phase layout: which plane it reads,
/// the output rows/columns that stay in bounds, and the plane offsets.
struct Tap {
    plane: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    dy: isize,
    dx: isize,
}

fn taps(g: &ConvGeometry, phases: &Phases) -> Vec<Tap> {
    let s = g.stride as isize;
    let span = |off: isize, len: usize, out_len: usize| {
        let lo = (-off).max(0) as usize;
        let hi = (len as isize - off).clamp(0, out_len as isize) as usize;
        (lo.min(hi), hi)
    };
    let mut out = Vec::with_capacity(g.kh * g.kw);
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let qy = ky as isize - g.padding as isize;
            let qx = kx as isize - g.padding as isize;
            let plane = (qy.rem_euclid(s) * s + qx.rem_euclid(s)) as usize;
            let (_, h, w) = phases.dims[plane];
            let (dy, dx) = (qy.div_euclid(s), qx.div_euclid(s));
            let (mut rows, mut cols) = (span(dy, h, g.out_h), span(dx, w, g.out_w));
            // A tap that never lands inside the input touches nothing.
            if rows.0 == rows.1 || cols.0 == cols.1 {
                (rows, cols) = ((0, 0), (0, 0));
            }
            out.push(Tap {
                plane,
                rows,
                cols,
                dy,
                dx,
            });
        }
    }
    out
}

/// Sum with a fixed lane layout so the compiler can vectorize it while the
/// result stays independent of the target.
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + tail
}

fn depthwise_forward_sample<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    y: &mut [T],
) {
    let (ip, op, ks) = (g.in_plane(), g.out_plane(), g.kh * g.kw);
    let phases = Phases::new(g);
    let taps = taps(g, &phases);
    let mut scratch = vec![T::zero(); if g.stride > 1 { phases.len } else { 0 }];
    for c in 0..g.in_ch {
        let xin = &x[c * ip..(c + 1) * ip];
        let src: &[T] = if g.stride > 1 {
            phases.split(g, xin, &mut scratch);
            &scratch
        } else {
            xin
        };
        let k = &w[c * ks..(c + 1) * ks];
        let out = &mut y[c * op..(c + 1) * op];
        out.fill(bias.map_or(T::zero(), |b| b[c]));
        for (t, &wv) in taps.iter().zip(k) {
            let (off, _, pw) = phases.dims[t.plane];
            let (ox0, ox1) = t.cols;
            let ix0 = (ox0 as isize + t.dx) as usize;
            for oy in t.rows.0..t.rows.1 {
                let iy = (oy as isize + t.dy) as usize;
                let orow = &mut out[oy * g.out_w + ox0..oy * g.out_w + ox1];
                let irow = &src[off + iy * pw + ix0..][..orow.len()];
                for (o, &i) in orow.iter_mut().zip(irow) {
                    *o += wv * i;
                }
            }
        }
    }
}

/// Gradient buffers requested from [`conv2d_backward`]; `None` skips that term.
pub struct ConvGrads<'a, T> {
    pub input: Option<&'a mut [T]>,
    pub weight: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

/// Accumulates (adds) gradients into the provided buffers.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    grads: ConvGrads<'_, T>,
) {
    let in_len = g.in_ch * g.in_plane();
    let out_len = g.out_ch * g.out_plane();
    let op = g.out_plane();

    if let Some(db) = grads.bias {
        for n in 0..g.batch {
            let dys = &dy[n * out_len..(n + 1) * out_len];
            for (acc, plane) in db.iter_mut().zip(dys.chunks(op)) {
                *acc += plane.iter().copied().sum::<T>();
            }
        }
    }

    if let Some(dx) = grads.input {
        parallel::for_each_chunk(dx, in_len, |n, dxs| {
            let dys = &dy[n * out_len..(n + 1) * out_len];
            if g.is_depthwise() {
                depthwise_input_grad(g, w, dys, dxs);
            } else {
                gemm_input_grad(g, w, dys, dxs);
            }
        });
    }

    if let Some(dw) = grads.weight {
        // Per-sample partials are reduced in sample order so the result does
        // not depend on how samples were scheduled.
        let partials = parallel::map_range(g.batch, |n| {
            let xs = &x[n * in_len..(n + 1) * in_len];
            let dys = &dy[n * out_len..(n + 1) * out_len];
            let mut part = vec![T::zero(); dw.len()];
            if g.is_depthwise() {
                depthwise_weight_grad(g, xs, dys, &mut part);
            } else {
                gemm_weight_grad(g, xs, dys, &mut part);
            }
            part
        });
        for part in partials {
            for (a, p) in dw.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
}

fn gemm_input_grad<T: Scalar>(g: &ConvGeometry, w: &[T], dy: &[T], dx: &mut [T]) {
    let (cin_g, cout_g, rows, op, ip) = (g.cin_g(), g.cout_g(), g.col_rows(), g.out_plane(), g.in_plane());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * op]
    };
    for grp in 0..g.groups {
        let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
        let dyg = &dy[grp * cout_g * op..(grp + 1) * cout_g * op];
        let dxg = &mut dx[grp * cin_g * ip..(grp + 1) * cin_g * ip];
        if g.is_pointwise() {
            gemm(rows, cout_g, op, wg, true, dyg, false, dxg, true);
        } else {
            gemm(rows, cout_g, op, wg, true, dyg, false, &mut cols, false);
            col2im(g, &cols, dxg);
        }
    }
}

fn gemm_weight_grad<T: Scalar>(g: &ConvGeometry, x: &[T], dy: &[T], dw: &mut [T]) {
    let (cin_g, cout_g, rows, op, ip) = (g.cin_g(), g.cout_g(), g.col_rows(), g.out_plane(), g.in_plane());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * op]
    };
    for grp in 0..g.groups {
        let xg = &x[grp * cin_g * ip..(grp + 1) * cin_g * ip];
        let rhs: &[T] = if g.is_pointwise() {
            xg
        } else {
            im2col(g, xg, &mut cols);
            &cols
        };
        let dyg = &dy[grp * cout_g * op..(grp + 1) * cout_g * op];
        let dwg = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
        gemm(cout_g, op, rows, dyg, false, rhs, true, dwg, true);
    }
}

fn depthwise_input_grad<T: Scalar>(g: &ConvGeometry, w: &[T], dy: &[T], dx: &mut [T]) {
    let (ip, op, ks) = (g.in_plane(), g.out_plane(), g.kh * g.kw);
    let phases = Phases::new(g);
    let taps = taps(g, &phases);
    let mut scratch = vec![T::zero(); if g.stride > 1 { phases.len } else { 0 }];
    for c in 0..g.in_ch {
        let k = &w[c * ks..(c + 1) * ks];
        let dout = &dy[c * op..(c + 1) * op];
        let din = &mut dx[c * ip..(c + 1) * ip];
        let dst: &mut [T] = if g.stride > 1 {
            scratch.fill(T::zero());
            &mut scratch
        } else {
            din
        };
        for (t, &wv) in taps.iter().zip(k) {
            let (off, _, pw) = phases.dims[t.plane];
            let (ox0, ox1) = t.cols;
            let ix0 = (ox0 as isize + t.dx) as usize;
            for oy in t.rows.0..t.rows.1 {
                let iy = (oy as isize + t.dy) as usize;
                let drow = &dout[oy * g.out_w + ox0..oy * g.out_w + ox1];
                let irow = &mut dst[off + iy * pw + ix0..][..drow.len()];
                for (i, &d) in irow.iter_mut().zip(drow) {
                    *i += wv * d;
                }
            }
        }
        if g.stride > 1 {
            phases.merge_add(g, &scratch, &mut dx[c * ip..(c + 1) * ip]);
        }
    }
}

fn depthwise_weight_grad<T: Scalar>(g: &ConvGeometry, x: &[T], dy: &[T], dw: &mut [T]) {
    let (ip, op, ks) = (g.in_plane(), g.out_plane(), g.kh * g.kw);
    let phases = Phases::new(g);
    let taps = taps(g, &phases);
    let mut scratch = vec![T::zero(); if g.stride > 1 { phases.len } else { 0 }];
    for c in 0..g.in_ch {
        let xin = &x[c * ip..(c + 1) * ip];
        let src: &[T] = if g.stride > 1 {
            phases.split(g, xin, &mut scratch);
            &scratch
        } else {
            xin
        };
        let dout = &dy[c * op..(c + 1) * op];
        let k = &mut dw[c * ks..(c + 1) * ks];
        for (t, kv) in taps.iter().zip(k.iter_mut()) {
            let (off, _, pw) = phases.dims[t.plane];
            let (ox0, ox1) = t.cols;
            let ix0 = (ox0 as isize + t.dx) as usize;
            let mut acc = T::zero();
            for oy in t.rows.0..t.rows.1 {
                let iy = (oy as isize + t.dy) as usize;
                let drow = &dout[oy * g.out_w + ox0..oy * g.out_w + ox1];
                let irow = &src[off + iy * pw + ix0..][..drow.len()];
                acc += lane_dot(irow, drow);
            }
            *kv += acc;
        }
    }
}
