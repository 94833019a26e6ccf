//! Layer primitives with hand-written backward passes.
//!
//! Convolutions are 3x3x3 over `(time, height, width)` with zero "same"
//! padding. Narrow layers accumulate shifted rows of a padded copy
//! directly; wide layers use tiled im2col followed by a GEMM. Weights are
//! stored `[out][in][dt][dh][dw]`, which is also the `out x (in*27)` GEMM
//! operand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, FeatureBlock, MatMut, MatRef, Scalar};

pub const KERNEL_VOLUME: usize = 27;

/// Upper bound on im2col buffer elements per tile.
const COL_BUDGET: usize = 1 << 22;

fn rows_per_tile(cin: usize, width: usize, total_rows: usize) -> usize {
    (COL_BUDGET / (cin * KERNEL_VOLUME * width).max(1)).clamp(1, total_rows)
}

/// Fills `col` (`cin*27` rows of `(r1-r0)*W` columns) for output rows `r0..r1`,
/// where a row is one `(t, h)` pair.
fn im2col<T: Scalar>(x: &FeatureBlock<T>, r0: usize, r1: usize, col: &mut [T]) {
    let (tt, hh, ww) = (x.time, x.height, x.width);
    let n = (r1 - r0) * ww;
    let plane = tt * hh * ww;
    for ci in 0..x.channels {
        let src_c = &x.data[ci * plane..(ci + 1) * plane];
        for k in 0..KERNEL_VOLUME {
            let (dt, dh, dw) = (k / 9, (k / 3) % 3, k % 3);
            let dst = &mut col[(ci * KERNEL_VOLUME + k) * n..(ci * KERNEL_VOLUME + k + 1) * n];
            for r in r0..r1 {
                let seg = &mut dst[(r - r0) * ww..(r - r0 + 1) * ww];
                let (t, h) = (r / hh, r % hh);
                let (st, sh) = ((t + dt).wrapping_sub(1), (h + dh).wrapping_sub(1));
                if st >= tt || sh >= hh {
                    seg.fill(T::zero());
                    continue;
                }
                let src = &src_c[(st * hh + sh) * ww..(st * hh + sh + 1) * ww];
                match dw {
                    0 => {
                        seg[0] = T::zero();
                        seg[1..].copy_from_slice(&src[..ww - 1]);
                    }
                    1 => seg.copy_from_slice(src),
                    _ => {
                        seg[..ww - 1].copy_from_slice(&src[1..]);
                        seg[ww - 1] = T::zero();
                    }
                }
            }
        }
    }
}

/// Zero-padded copy and linear-index geometry for direct convolution.
/// Position `(t, h, w)` of the output maps to `t*st + h*sh + w` in a buffer
/// of length `n`; other indices of that buffer are padding columns.
struct Padded {
    st: usize,
    sh: usize,
    np: usize,
    n: usize,
}

impl Padded {
    fn new(t: usize, h: usize, w: usize) -> Self {
        let sh = w + 2;
        let st = (h + 2) * sh;
        Padded {
            st,
            sh,
            np: (t + 2) * st,
            n: (t - 1) * st + (h - 1) * sh + w,
        }
    }

    /// Start of the source window for taps `(dt, dh, 0..3)`.
    fn row_offset(&self, dt: usize, dh: usize) -> usize {
        dt * self.st + dh * self.sh
    }

    fn pad<T: Scalar>(&self, x: &FeatureBlock<T>) -> Vec<T> {
        let mut out = vec![T::zero(); x.channels * self.np];
        let (tt, hh, ww) = (x.time, x.height, x.width);
        for c in 0..x.channels {
            for t in 0..tt {
                for h in 0..hh {
                    let src = ((c * tt + t) * hh + h) * ww;
                    let dst = c * self.np + (t + 1) * self.st + (h + 1) * self.sh + 1;
                    out[dst..dst + ww].copy_from_slice(&x.data[src..src + ww]);
                }
            }
        }
        out
    }

    /// Spreads one channel into buffer geometry, zeroing padding columns.
    fn spread<T: Scalar>(&self, x: &FeatureBlock<T>, c: usize, buf: &mut [T]) {
        buf.fill(T::zero());
        let (tt, hh, ww) = (x.time, x.height, x.width);
        for t in 0..tt {
            for h in 0..hh {
                let src = ((c * tt + t) * hh + h) * ww;
                let dst = t * self.st + h * self.sh;
                buf[dst..dst + ww].copy_from_slice(&x.data[src..src + ww]);
            }
        }
    }

    fn gather<T: Scalar>(&self, buf: &[T], out: &mut FeatureBlock<T>, c: usize) {
        let (tt, hh, ww) = (out.time, out.height, out.width);
        for t in 0..tt {
            for h in 0..hh {
                let src = t * self.st + h * self.sh;
                let dst = ((c * tt + t) * hh + h) * ww;
                out.data[dst..dst + ww].copy_from_slice(&buf[src..src + ww]);
            }
        }
    }
}

/// `y[j] += sum_k w[k] * src[k][j]`.
#[inline(always)]
fn accumulate_taps<T: Scalar, const K: usize>(y: &mut [T], src: [&[T]; K], w: [T; K]) {
    let n = y.len();
    let src = src.map(|s| &s[..n]);
    for j in 0..n {
        let mut acc = y[j];
        for k in 0..K {
            acc += w[k] * src[k][j];
        }
        y[j] = acc;
    }
}

/// `out[k] = sum_j a[j] * src[k][j]`, summed in fixed lane order.
#[inline(always)]
fn dot_taps<T: Scalar, const K: usize>(a: &[T], src: [&[T]; K]) -> [T; K] {
    const LANES: usize = 16;
    let n = a.len();
    let full = n / LANES * LANES;
    let mut out = [T::zero(); K];
    for k in 0..K {
        let s = &src[k][..n];
        let mut acc = [T::zero(); LANES];
        for (ca, cs) in a[..full].chunks_exact(LANES).zip(s[..full].chunks_exact(LANES)) {
            for l in 0..LANES {
                acc[l] += ca[l] * cs[l];
            }
        }
        let mut total = acc.iter().copied().sum::<T>();
        for j in full..n {
            total += a[j] * s[j];
        }
        out[k] = total;
    }
    out
}

#[inline(always)]
fn conv3_direct_body<T: Scalar>(x: &FeatureBlock<T>, weight: &[T], bias: &[T], cout: usize) -> FeatureBlock<T> {
    let cin = x.channels;
    let g = Padded::new(x.time, x.height, x.width);
    let xpad = g.pad(x);
    let mut out = FeatureBlock::zeros(cout, x.time, x.height, x.width);
    let mut ybuf = vec![T::zero(); g.n];
    for co in 0..cout {
        ybuf.fill(bias[co]);
        for ci in 0..cin {
            let xp = &xpad[ci * g.np..(ci + 1) * g.np];
            let w = &weight[(co * cin + ci) * KERNEL_VOLUME..(co * cin + ci + 1) * KERNEL_VOLUME];
            for dt in 0..3 {
                let o = [0, 1, 2].map(|dh| g.row_offset(dt, dh));
                let src = [0, 1, 2, 3, 4, 5, 6, 7, 8].map(|k| &xp[o[k / 3] + k % 3..]);
                let wk: [T; 9] = std::array::from_fn(|k| w[dt * 9 + k]);
                accumulate_taps(&mut ybuf, src, wk);
            }
        }
        g.gather(&ybuf, &mut out, co);
    }
    out
}

#[inline(always)]
fn conv3_direct_dweight_body<T: Scalar>(x: &FeatureBlock<T>, dy: &FeatureBlock<T>, dweight: &mut [T]) {
    let (cin, cout) = (x.channels, dy.channels);
    let g = Padded::new(x.time, x.height, x.width);
    let xpad = g.pad(x);
    let mut dybuf = vec![T::zero(); g.n];
    for co in 0..cout {
        g.spread(dy, co, &mut dybuf);
        for ci in 0..cin {
            let xp = &xpad[ci * g.np..(ci + 1) * g.np];
            let dw = &mut dweight[(co * cin + ci) * KERNEL_VOLUME..(co * cin + ci + 1) * KERNEL_VOLUME];
            for dt in 0..3 {
                let o = [0, 1, 2].map(|dh| g.row_offset(dt, dh));
                let src = [0, 1, 2, 3, 4, 5, 6, 7, 8].map(|k| &xp[o[k / 3] + k % 3..]);
                for (d, v) in dw[dt * 9..dt * 9 + 9].iter_mut().zip(dot_taps(&dybuf, src)) {
                    *d += v;
                }
            }
        }
    }
}

/// Instantiates `$body` for AVX-512 and AVX2 and picks the widest one the
/// CPU supports at run time. Every variant performs the same operations in
/// the same order, so results are identical across them.
macro_rules! dispatch_simd {
    ($name:ident, $body:ident, ($($arg:ident: $ty:ty),*) $(-> $ret:ty)?) => {
        fn $name<T: Scalar>($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f")]
                fn wide<T: Scalar>($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                #[target_feature(enable = "avx2")]
                fn narrow<T: Scalar>($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: the required CPU feature was detected above.
                    return unsafe { wide($($arg),*) };
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: as above.
                    return unsafe { narrow($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

dispatch_simd!(conv3_direct, conv3_direct_body, (x: &FeatureBlock<T>, weight: &[T], bias: &[T], cout: usize) -> FeatureBlock<T>);
dispatch_simd!(conv3_direct_dweight, conv3_direct_dweight_body, (x: &FeatureBlock<T>, dy: &FeatureBlock<T>, dweight: &mut [T]));

/// Weights of the adjoint convolution: `[in][out]` with taps reversed.
fn adjoint_weights<T: Scalar>(weight: &[T], cin: usize, cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..KERNEL_VOLUME {
                out[(ci * cout + co) * KERNEL_VOLUME + KERNEL_VOLUME - 1 - k] = weight[(co * cin + ci) * KERNEL_VOLUME + k];
            }
        }
    }
    out
}

fn check_conv_shapes(cin: usize, wlen: usize, blen: usize, cout: usize) -> Result<()> {
    if wlen != cout * cin * KERNEL_VOLUME || blen != cout {
        return Err(Error::Config(format!(
            "conv {cin}->{cout} expects {} weights and {cout} biases, got {wlen} and {blen}",
            cout * cin * KERNEL_VOLUME
        )));
    }
    Ok(())
}

/// Small layers use direct accumulation; wider ones im2col + GEMM.
fn use_direct(cin: usize, cout: usize) -> bool {
    cin * cout <= DIRECT_MAX_PAIRS
}

const DIRECT_MAX_PAIRS: usize = 1024;

/// 3x3x3 convolution with same padding (no activation).
pub fn conv3<T: Scalar>(x: &FeatureBlock<T>, weight: &[T], bias: &[T], cout: usize) -> Result<FeatureBlock<T>> {
    check_conv_shapes(x.channels, weight.len(), bias.len(), cout)?;
    if use_direct(x.channels, cout) {
        Ok(conv3_direct(x, weight, bias, cout))
    } else {
        Ok(conv3_gemm(x, weight, bias, cout))
    }
}

fn conv3_gemm<T: Scalar>(x: &FeatureBlock<T>, weight: &[T], bias: &[T], cout: usize) -> FeatureBlock<T> {
    let cin = x.channels;
    let p = x.positions();
    let k = cin * KERNEL_VOLUME;
    let mut out = FeatureBlock::zeros(cout, x.time, x.height, x.width);
    for (co, b) in bias.iter().enumerate() {
        out.data[co * p..(co + 1) * p].fill(*b);
    }
    let total_rows = x.time * x.height;
    let step = rows_per_tile(cin, x.width, total_rows);
    let mut col = vec![T::zero(); k * step * x.width];
    let mut r0 = 0;
    while r0 < total_rows {
        let r1 = (r0 + step).min(total_rows);
        let n = (r1 - r0) * x.width;
        let col = &mut col[..k * n];
        im2col(x, r0, r1, col);
        gemm(
            T::one(),
            MatRef::row_major(weight, cout, k),
            MatRef::row_major(col, k, n),
            T::one(),
            MatMut {
                data: &mut out.data[r0 * x.width..],
                rows: cout,
                cols: n,
                row_stride: p,
                col_stride: 1,
            },
        );
        r0 = r1;
    }
    out
}

fn conv3_gemm_dweight<T: Scalar>(x: &FeatureBlock<T>, dy: &FeatureBlock<T>, dweight: &mut [T]) {
    let cin = x.channels;
    let cout = dy.channels;
    let p = x.positions();
    let k = cin * KERNEL_VOLUME;
    let total_rows = x.time * x.height;
    let step = rows_per_tile(cin, x.width, total_rows);
    let mut col = vec![T::zero(); k * step * x.width];
    let mut r0 = 0;
    while r0 < total_rows {
        let r1 = (r0 + step).min(total_rows);
        let n = (r1 - r0) * x.width;
        let col = &mut col[..k * n];
        im2col(x, r0, r1, col);
        gemm(
            T::one(),
            MatRef {
                data: &dy.data[r0 * x.width..],
                rows: cout,
                cols: n,
                row_stride: p,
                col_stride: 1,
            },
            MatRef::row_major(col, k, n).t(),
            T::one(),
            MatMut {
                data: dweight,
                rows: cout,
                cols: k,
                row_stride: k,
                col_stride: 1,
            },
        );
        r0 = r1;
    }
}

/// Backward of [`conv3`]: accumulates into `dweight`/`dbias` and, when
/// requested, returns the gradient with respect to `x`.
pub fn conv3_backward<T: Scalar>(
    x: &FeatureBlock<T>,
    weight: &[T],
    dy: &FeatureBlock<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<FeatureBlock<T>> {
    let (cin, cout) = (x.channels, dy.channels);
    let p = x.positions();
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dy.data[co * p..(co + 1) * p].iter().copied().sum::<T>();
    }
    if use_direct(cin, cout) {
        conv3_direct_dweight(x, dy, dweight);
    } else {
        conv3_gemm_dweight(x, dy, dweight);
    }
    need_dx.then(|| {
        let adjoint = adjoint_weights(weight, cin, cout);
        let zero = vec![T::zero(); cin];
        if use_direct(cout, cin) {
            conv3_direct(dy, &adjoint, &zero, cin)
        } else {
            conv3_gemm(dy, &adjoint, &zero, cin)
        }
    })
}

pub fn relu_in_place<T: Scalar>(x: &mut FeatureBlock<T>) {
    for v in &mut x.data {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Masks `grad` where the rectified output was not positive.
pub fn relu_backward_in_place<T: Scalar>(activated: &FeatureBlock<T>, grad: &mut FeatureBlock<T>) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if !(*a > T::zero()) {
            *g = T::zero();
        }
    }
}

/// Intermediate values of one double convolution.
#[derive(Debug, Clone)]
pub struct DoubleConvCache<T> {
    pub input: FeatureBlock<T>,
    pub hidden: FeatureBlock<T>,
    pub output: FeatureBlock<T>,
}

/// Parameters of a double convolution, borrowed from the model.
#[derive(Clone, Copy)]
pub struct DoubleConvParams<'a, T> {
    pub w1: &'a [T],
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: &'a [T],
}

/// Two 3x3x3 convolutions, each followed by a rectifier.
pub fn double_conv<T: Scalar>(
    x: FeatureBlock<T>,
    params: DoubleConvParams<'_, T>,
    out_channels: usize,
) -> Result<DoubleConvCache<T>> {
    let mut hidden = conv3(&x, params.w1, params.b1, out_channels)?;
    relu_in_place(&mut hidden);
    let mut output = conv3(&hidden, params.w2, params.b2, out_channels)?;
    relu_in_place(&mut output);
    Ok(DoubleConvCache {
        input: x,
        hidden,
        output,
    })
}

pub struct DoubleConvGrads<'a, T> {
    pub w1: &'a mut [T],
    pub b1: &'a mut [T],
    pub w2: &'a mut [T],
    pub b2: &'a mut [T],
}

pub fn double_conv_backward<T: Scalar>(
    cache: &DoubleConvCache<T>,
    params: DoubleConvParams<'_, T>,
    mut d_output: FeatureBlock<T>,
    grads: DoubleConvGrads<'_, T>,
    need_dx: bool,
) -> Option<FeatureBlock<T>> {
    relu_backward_in_place(&cache.output, &mut d_output);
    let mut d_hidden = conv3_backward(&cache.hidden, params.w2, &d_output, grads.w2, grads.b2, true)
        .expect("requested input gradient");
    relu_backward_in_place(&cache.hidden, &mut d_hidden);
    conv3_backward(&cache.input, params.w1, &d_hidden, grads.w1, grads.b1, need_dx)
}

/// Result of [`down`]: the pooled block plus what backward needs.
#[derive(Debug, Clone)]
pub struct DownCache<T> {
    /// Per-element dropout scale (`0` or `1/(1-p)`), absent in evaluation.
    pub mask: Option<Vec<T>>,
    /// Position of the maximum within each 2x2 window, row-major `0..4`.
    pub argmax: Vec<u8>,
    pub input_shape: [usize; 4],
}

/// Dropout (training only) followed by 1x2x2 max pooling.
pub fn down<T: Scalar>(
    x: &FeatureBlock<T>,
    dropout_rate: f64,
    dropout_seed: Option<u64>,
) -> Result<(FeatureBlock<T>, DownCache<T>)> {
    if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "spatial pooling needs even dimensions, got {}x{}",
            x.height, x.width
        )));
    }
    let mask = match dropout_seed {
        Some(seed) if dropout_rate > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = T::of(1.0 / (1.0 - dropout_rate));
            Some(
                (0..x.data.len())
                    .map(|_| if rng.random::<f64>() < dropout_rate { T::zero() } else { keep })
                    .collect::<Vec<T>>(),
            )
        }
        _ => None,
    };
    let (c, t, h, w) = (x.channels, x.time, x.height, x.width);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureBlock::zeros(c, t, oh, ow);
    let mut argmax = vec![0u8; out.data.len()];
    let value = |i: usize| match &mask {
        Some(m) => x.data[i] * m[i],
        None => x.data[i],
    };
    let mut o = 0;
    for plane in 0..c * t {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = value(candidates[0]);
                let mut arg = 0u8;
                for (j, &i) in candidates.iter().enumerate().skip(1) {
                    let v = value(i);
                    if v > best {
                        best = v;
                        arg = j as u8;
                    }
                }
                out.data[o] = best;
                argmax[o] = arg;
                o += 1;
            }
        }
    }
    Ok((
        out,
        DownCache {
            mask,
            argmax,
            input_shape: x.shape(),
        },
    ))
}

pub fn down_backward<T: Scalar>(cache: &DownCache<T>, dy: &FeatureBlock<T>) -> FeatureBlock<T> {
    let [c, t, h, w] = cache.input_shape;
    let mut dx = FeatureBlock::zeros(c, t, h, w);
    let (oh, ow) = (h / 2, w / 2);
    let mut o = 0;
    for plane in 0..c * t {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let a = cache.argmax[o] as usize;
                let i = base + (2 * y + a / 2) * w + 2 * xx + a % 2;
                dx.data[i] += dy.data[o];
                o += 1;
            }
        }
    }
    if let Some(mask) = &cache.mask {
        for (g, m) in dx.data.iter_mut().zip(mask) {
            *g *= *m;
        }
    }
    dx
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample<T: Scalar>(x: &FeatureBlock<T>) -> FeatureBlock<T> {
    let (c, t, h, w) = (x.channels, x.time, x.height, x.width);
    let mut out = FeatureBlock::zeros(c, t, 2 * h, 2 * w);
    let ow = 2 * w;
    for plane in 0..c * t {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(dy: &FeatureBlock<T>) -> FeatureBlock<T> {
    let (c, t, h, w) = (dy.channels, dy.time, dy.height / 2, dy.width / 2);
    let mut dx = FeatureBlock::zeros(c, t, h, w);
    let ow = 2 * w;
    for plane in 0..c * t {
        let src = &dy.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    dx
}

/// Channel concatenation, `first` channels then `second`.
pub fn concat_channels<T: Scalar>(first: &FeatureBlock<T>, second: &FeatureBlock<T>) -> Result<FeatureBlock<T>> {
    if first.shape()[1..] != second.shape()[1..] {
        return Err(Error::Config(format!(
            "cannot concatenate {:?} with {:?}",
            first.shape(),
            second.shape()
        )));
    }
    let mut data = Vec::with_capacity(first.data.len() + second.data.len());
    data.extend_from_slice(&first.data);
    data.extend_from_slice(&second.data);
    Ok(FeatureBlock {
        channels: first.channels + second.channels,
        time: first.time,
        height: first.height,
        width: first.width,
        data,
    })
}

/// Splits a concatenated gradient back into `(first, second)` parts.
pub fn split_channels<T: Scalar>(d: FeatureBlock<T>, first_channels: usize) -> (FeatureBlock<T>, FeatureBlock<T>) {
    let p = d.positions();
    let mut data = d.data;
    let tail = data.split_off(first_channels * p);
    let first = FeatureBlock {
        channels: first_channels,
        time: d.time,
        height: d.height,
        width: d.width,
        data,
    };
    let second = FeatureBlock {
        channels: d.channels - first_channels,
        time: d.time,
        height: d.height,
        width: d.width,
        data: tail,
    };
    (first, second)
}

/// Upsample `x`, place `skip` in front of it on the channel axis, then
/// apply a double convolution.
pub fn up_and_concat<T: Scalar>(
    x: &FeatureBlock<T>,
    skip: &FeatureBlock<T>,
    params: DoubleConvParams<'_, T>,
    out_channels: usize,
) -> Result<DoubleConvCache<T>> {
    if skip.height != 2 * x.height || skip.width != 2 * x.width || skip.time != x.time {
        return Err(Error::Config(format!(
            "skip {:?} is not twice the spatial size of {:?}",
            skip.shape(),
            x.shape()
        )));
    }
    let joined = concat_channels(skip, &upsample(x))?;
    double_conv(joined, params, out_channels)
}

/// Convolution with a `(lag, 1, 1)` kernel and no temporal padding, mapping
/// `(C, lag, H, W)` to a single `H x W` map. `weight` is `[C][lag]`.
pub fn final_projection<T: Scalar>(x: &FeatureBlock<T>, weight: &[T], bias: T) -> Result<Vec<T>> {
    let k = x.channels * x.time;
    if weight.len() != k {
        return Err(Error::Config(format!(
            "projection over {} channels x {} steps needs {k} weights, got {}",
            x.channels,
            x.time,
            weight.len()
        )));
    }
    let hw = x.height * x.width;
    let mut out = vec![bias; hw];
    gemm(
        T::one(),
        MatRef::row_major(weight, 1, k),
        MatRef::row_major(&x.data, k, hw),
        T::one(),
        MatMut {
            data: &mut out,
            rows: 1,
            cols: hw,
            row_stride: hw,
            col_stride: 1,
        },
    );
    Ok(out)
}

pub fn final_projection_backward<T: Scalar>(
    x: &FeatureBlock<T>,
    weight: &[T],
    d_out: &[T],
    dweight: &mut [T],
    dbias: &mut T,
) -> FeatureBlock<T> {
    let k = x.channels * x.time;
    let hw = x.height * x.width;
    *dbias += d_out.iter().copied().sum::<T>();
    gemm(
        T::one(),
        MatRef::row_major(d_out, 1, hw),
        MatRef::row_major(&x.data, k, hw).t(),
        T::one(),
        MatMut {
            data: dweight,
            rows: 1,
            cols: k,
            row_stride: k,
            col_stride: 1,
        },
    );
    let mut dx = FeatureBlock::zeros(x.channels, x.time, x.height, x.width);
    gemm(
        T::one(),
        MatRef::row_major(weight, k, 1),
        MatRef::row_major(d_out, 1, hw),
        T::zero(),
        MatMut {
            data: &mut dx.data,
            rows: k,
            cols: hw,
            row_stride: hw,
            col_stride: 1,
        },
    );
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(c: usize, t: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> FeatureBlock<f64> {
        FeatureBlock::from_vec(c, t, h, w, (0..c * t * h * w).map(f).collect()).unwrap()
    }

    /// Direct sextuple-loop 3x3x3 same-padding convolution.
    fn naive_conv(x: &FeatureBlock<f64>, w: &[f64], b: &[f64], cout: usize) -> FeatureBlock<f64> {
        let (cin, tt, hh, ww) = (x.channels, x.time, x.height, x.width);
        let mut out = FeatureBlock::zeros(cout, tt, hh, ww);
        for co in 0..cout {
            for t in 0..tt {
                for h in 0..hh {
                    for x_ in 0..ww {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for dt in 0..3 {
                                for dh in 0..3 {
                                    for dw in 0..3 {
                                        let (st, sh, sw) = (t + dt, h + dh, x_ + dw);
                                        if st < 1 || sh < 1 || sw < 1 || st > tt || sh > hh || sw > ww {
                                            continue;
                                        }
                                        let xv = x.data[((ci * tt + st - 1) * hh + sh - 1) * ww + sw - 1];
                                        acc += w[((co * cin + ci) * 27) + dt * 9 + dh * 3 + dw] * xv;
                                    }
                                }
                            }
                        }
                        out.data[((co * tt + t) * hh + h) * ww + x_] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = block(2, 3, 4, 5, |i| ((i * 37) % 17) as f64 / 8.0 - 1.0);
        let w: Vec<f64> = (0..3 * 2 * 27).map(|i| ((i * 13) % 11) as f64 / 10.0 - 0.5).collect();
        let b = vec![0.1, -0.2, 0.3];
        let fast = conv3(&x, &w, &b, 3).unwrap();
        let slow = naive_conv(&x, &w, &b, 3);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_and_gemm_paths_agree() {
        let x = block(5, 3, 6, 4, |i| ((i * 29) % 23) as f64 / 11.0 - 1.0);
        let w: Vec<f64> = (0..7 * 5 * 27).map(|i| ((i * 17) % 13) as f64 / 12.0 - 0.5).collect();
        let b: Vec<f64> = (0..7).map(|i| i as f64 * 0.1).collect();
        let slow = naive_conv(&x, &w, &b, 7);
        for y in [conv3_direct(&x, &w, &b, 7), conv3_gemm(&x, &w, &b, 7)] {
            for (a, b) in y.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let dy = block(7, 3, 6, 4, |i| ((i * 7) % 5) as f64 - 2.0);
        let mut dw_direct = vec![0.0; w.len()];
        let mut dw_gemm = vec![0.0; w.len()];
        conv3_direct_dweight(&x, &dy, &mut dw_direct);
        conv3_gemm_dweight(&x, &dy, &mut dw_gemm);
        for (a, b) in dw_direct.iter().zip(&dw_gemm) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <conv(x), dy> is bilinear, so d/dx = conv^T(dy) and d/dw = x (*) dy.
        let x = block(3, 2, 4, 6, |i| ((i * 31) % 19) as f64 / 9.0 - 1.0);
        let w: Vec<f64> = (0..2 * 3 * 27).map(|i| ((i * 11) % 7) as f64 / 6.0 - 0.5).collect();
        let dy = block(2, 2, 4, 6, |i| ((i * 13) % 11) as f64 / 5.0 - 1.0);
        let inner = |x: &FeatureBlock<f64>, w: &[f64]| -> f64 {
            let y = naive_conv(x, w, &[0.0, 0.0], 2);
            y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 2];
        let dx = conv3_backward(&x, &w, &dy, &mut dw, &mut db, true).unwrap();
        for i in [0, 17, x.data.len() - 1] {
            let mut e = x.clone();
            e.data.iter_mut().for_each(|v| *v = 0.0);
            e.data[i] = 1.0;
            assert!((inner(&e, &w) - dx.data[i]).abs() < 1e-12);
        }
        for i in [0, 40, w.len() - 1] {
            let mut e = vec![0.0; w.len()];
            e[i] = 1.0;
            assert!((inner(&x, &e) - dw[i]).abs() < 1e-12);
        }
        assert_eq!(db[0], dy.channel(0).iter().sum::<f64>());
    }

    #[test]
    fn tiny_hand_set_kernel_matches_direct_sum() {
        // (1, 2, 4, 4) input, centre tap 1 and right neighbour 2: y = x + 2*x[w+1].
        let x = block(1, 2, 4, 4, |i| i as f64);
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        w[14] = 2.0;
        let y = conv3(&x, &w, &[0.5], 1).unwrap();
        for t in 0..2 {
            for h in 0..4 {
                for c in 0..4 {
                    let i = (t * 4 + h) * 4 + c;
                    let right = if c + 1 < 4 { x.data[i + 1] } else { 0.0 };
                    assert_eq!(y.data[i], x.data[i] + 2.0 * right + 0.5);
                }
            }
        }
    }

    #[test]
    fn zero_parameters_give_zero_double_conv() {
        let x = block(1, 3, 4, 4, |i| i as f64);
        let w1 = vec![0.0; 4 * 27];
        let w2 = vec![0.0; 16 * 27];
        let b = vec![0.0; 4];
        let out = double_conv(
            x,
            DoubleConvParams {
                w1: &w1,
                b1: &b,
                w2: &w2,
                b2: &b,
            },
            4,
        )
        .unwrap();
        assert_eq!(out.output.shape(), [4, 3, 4, 4]);
        assert!(out.output.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_mismatch_is_config_error() {
        let x = block(2, 1, 2, 2, |_| 1.0);
        assert!(matches!(conv3(&x, &[0.0; 27], &[0.0], 1), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_takes_window_maximum() {
        let x = block(1, 1, 2, 2, |i| [1.0, 3.0, 2.0, 0.0][i]);
        let (y, cache) = down(&x, 0.5, None).unwrap();
        assert_eq!(y.data, vec![3.0]);
        assert_eq!(cache.argmax, vec![1]);
        assert!(cache.mask.is_none());
        let dx = down_backward(&cache, &block(1, 1, 1, 1, |_| 2.0));
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_shapes_and_odd_rejection() {
        let x = block(3, 2, 6, 4, |i| i as f64);
        assert_eq!(down(&x, 0.0, None).unwrap().0.shape(), [3, 2, 3, 2]);
        let odd = block(1, 1, 3, 4, |i| i as f64);
        assert!(matches!(down(&odd, 0.0, None), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_is_seeded_and_scaled() {
        let x = block(1, 1, 8, 8, |_| 1.0);
        let (a, ca) = down(&x, 0.5, Some(3)).unwrap();
        let (b, _) = down(&x, 0.5, Some(3)).unwrap();
        assert_eq!(a, b);
        let mask = ca.mask.unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        assert!(mask.contains(&0.0));
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = block(1, 1, 1, 1, |_| 7.0);
        assert_eq!(upsample(&x).data, vec![7.0; 4]);
        let x = block(1, 1, 1, 2, |i| i as f64);
        assert_eq!(upsample(&x).data, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let back = upsample_backward(&upsample(&x));
        assert_eq!(back.data, vec![0.0, 4.0]);
    }

    #[test]
    fn up_and_concat_shapes() {
        let x = block(8, 3, 4, 4, |i| (i % 5) as f64);
        let skip = block(4, 3, 8, 8, |i| (i % 3) as f64);
        let w1 = vec![0.01; 4 * 12 * 27];
        let w2 = vec![0.01; 4 * 4 * 27];
        let b = vec![0.0; 4];
        let out = up_and_concat(
            &x,
            &skip,
            DoubleConvParams {
                w1: &w1,
                b1: &b,
                w2: &w2,
                b2: &b,
            },
            4,
        )
        .unwrap();
        assert_eq!(out.input.shape(), [12, 3, 8, 8]);
        assert_eq!(&out.input.data[..skip.data.len()], &skip.data[..]);
        assert_eq!(out.output.shape(), [4, 3, 8, 8]);
        let bad = block(4, 3, 6, 8, |_| 0.0);
        assert!(up_and_concat(&x, &bad, DoubleConvParams { w1: &w1, b1: &b, w2: &w2, b2: &b }, 4).is_err());
    }

    #[test]
    fn projection_cases() {
        let x = block(3, 4, 2, 2, |i| i as f64);
        let out = final_projection(&x, &[0.0; 12], 1.5).unwrap();
        assert_eq!(out, vec![1.5; 4]);
        // One channel, lag 2, unit kernel: temporal sum.
        let x = block(1, 2, 2, 2, |i| i as f64);
        let out = final_projection(&x, &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(out, vec![4.0, 6.0, 8.0, 10.0]);
        assert!(final_projection(&x, &[1.0; 3], 0.0).is_err());
    }
}
