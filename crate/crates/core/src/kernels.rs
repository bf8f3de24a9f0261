//! Fused CPU kernels: last-axis softmax, SiLU, group normalization with
//! affine output and channels-last convolution with bias. Each forward op has
//! a matching backward op; the backward ops are not differentiable again.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};
use num_traits::Float;

/// Element type of the fused kernels.
pub(crate) trait Real: Float + 'static {
    fn fast_exp(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn fast_exp(self) -> Self {
        self.exp()
    }
}

impl Real for f32 {
    /// Range reduction by `ln 2` and a degree-6 polynomial, within 2 ulp of
    /// `f32::exp` on the clamped range. Written branch-free so loops over it
    /// vectorize.
    #[inline]
    fn fast_exp(self) -> Self {
        const MAGIC: f32 = 12_582_912.0;
        let x = if self < -87.0 { -87.0 } else if self > 88.0 { 88.0 } else { self };
        let t = x * std::f32::consts::LOG2_E + MAGIC;
        let n = t - MAGIC;
        let r = x - n * 0.693_359_4 - n * -2.121_944_4e-4;
        let p = 1.987_569_1e-4;
        let p = p * r + 1.398_2e-3;
        let p = p * r + 8.333_452e-3;
        let p = p * r + 4.166_579_6e-2;
        let p = p * r + 1.666_666_5e-1;
        let p = p * r + 5.000_000_1e-1;
        let y = p * r * r + r + 1.0;
        // The low mantissa bits of `t` hold `n` as an integer.
        let scale = (t.to_bits().wrapping_sub(MAGIC.to_bits()).wrapping_add(127)) << 23;
        y * f32::from_bits(scale)
    }
}

fn slice<'a, T>(v: &'a [T], l: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{op}: expects contiguous input"),
    }
}

macro_rules! dispatch1 {
    ($op:expr, $s:expr, $l:expr, |$v:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $v = slice(v, $l, $op)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $v = slice(v, $l, $op)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: unsupported dtype", $op),
        }
    };
}

macro_rules! dispatch2 {
    ($op:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (slice(a, $l1, $op)?, slice(b, $l2, $op)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (slice(a, $l1, $op)?, slice(b, $l2, $op)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: unsupported or mixed dtypes", $op),
        }
    };
}

macro_rules! dispatch3 {
    ($op:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, |$a:ident, $b:ident, $c:ident| $body:expr) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(c)) => {
                let ($a, $b, $c) = (slice(a, $l1, $op)?, slice(b, $l2, $op)?, slice(c, $l3, $op)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(c)) => {
                let ($a, $b, $c) = (slice(a, $l1, $op)?, slice(b, $l2, $op)?, slice(c, $l3, $op)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: unsupported or mixed dtypes", $op),
        }
    };
}

fn row_len(l: &Layout) -> usize {
    *l.shape().dims().last().unwrap_or(&1)
}

struct Softmax;
struct SoftmaxBackward;

fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).fast_exp();
        }
        let sum = dst.iter().fold(T::zero(), |a, &d| a + d);
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

fn softmax_grad<T: Real>(p: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p.len()];
    for ((pr, gr), dst) in p.chunks_exact(n).zip(g.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
        let dot = pr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &a), &b) in dst.iter_mut().zip(pr).zip(gr) {
            *d = a * (b - dot);
        }
    }
    out
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = row_len(l);
        Ok((dispatch1!(self.name(), s, l, |v| softmax_rows(v, n)), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxBackward)?))
    }
}

impl CustomOp2 for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax-last-backward"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = row_len(l1);
        Ok((dispatch2!(self.name(), s1, l1, s2, l2, |p, g| softmax_grad(p, g, n)), l1.shape().clone()))
    }
}

/// Softmax over the last axis.
pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

struct Silu;
struct SiluBackward;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn f<T: Real>(x: &[T]) -> Vec<T> {
            x.iter().map(|&v| v / (T::one() + (-v).fast_exp())).collect()
        }
        Ok((dispatch1!(self.name(), s, l, |v| f(v)), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &SiluBackward)?))
    }
}

impl CustomOp2 for SiluBackward {
    fn name(&self) -> &'static str {
        "silu-backward"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn f<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
            x.iter()
                .zip(g)
                .map(|(&v, &g)| {
                    let s = T::one() / (T::one() + (-v).fast_exp());
                    g * s * (T::one() + v * (T::one() - s))
                })
                .collect()
        }
        Ok((dispatch2!(self.name(), s1, l1, s2, l2, |x, g| f(x, g)), l1.shape().clone()))
    }
}

pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

/// Group normalization of `[B, ..., C]` over (spatial, channels-in-group)
/// followed by a per-channel affine map.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
}

struct GroupNormBackward(GroupNormOp);

impl GroupNormOp {
    /// `(batch, positions, channels)` of a channels-last layout.
    fn dims(l: &Layout) -> (usize, usize, usize) {
        let d = l.shape().dims();
        let b = d[0];
        let c = *d.last().unwrap();
        (b, l.shape().elem_count() / (b * c), c)
    }

    /// Per (batch, group) mean and inverse standard deviation.
    fn stats<T: Real>(&self, x: &[T], b: usize, n: usize, c: usize) -> Vec<(T, T)> {
        let cg = c / self.groups;
        let count = T::from(n * cg).unwrap();
        let eps = T::from(self.eps).unwrap();
        let mut out = Vec::with_capacity(b * self.groups);
        for bi in 0..b {
            let xb = &x[bi * n * c..(bi + 1) * n * c];
            for g in 0..self.groups {
                let mut sum = T::zero();
                for p in 0..n {
                    for &v in &xb[p * c + g * cg..p * c + (g + 1) * cg] {
                        sum = sum + v;
                    }
                }
                let mean = sum / count;
                let mut var = T::zero();
                for p in 0..n {
                    for &v in &xb[p * c + g * cg..p * c + (g + 1) * cg] {
                        var = var + (v - mean) * (v - mean);
                    }
                }
                out.push((mean, T::one() / (var / count + eps).sqrt()));
            }
        }
        out
    }

    fn forward<T: Real>(&self, x: &[T], w: &[T], bias: &[T], b: usize, n: usize, c: usize) -> Vec<T> {
        let cg = c / self.groups;
        let stats = self.stats(x, b, n, c);
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for p in 0..n {
                let off = (bi * n + p) * c;
                for ch in 0..c {
                    let (mean, inv) = stats[bi * self.groups + ch / cg];
                    out[off + ch] = (x[off + ch] - mean) * inv * w[ch] + bias[ch];
                }
            }
        }
        out
    }

    /// Packed `[dx (B*N*C), dw (C), db (C)]`.
    fn backward<T: Real>(&self, x: &[T], w: &[T], gy: &[T], b: usize, n: usize, c: usize) -> Vec<T> {
        let cg = c / self.groups;
        let stats = self.stats(x, b, n, c);
        let count = T::from(n * cg).unwrap();
        let mut out = vec![T::zero(); x.len() + 2 * c];
        let (dx, rest) = out.split_at_mut(x.len());
        let (dw, db) = rest.split_at_mut(c);
        for bi in 0..b {
            for g in 0..self.groups {
                let (mean, inv) = stats[bi * self.groups + g];
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for p in 0..n {
                    let off = (bi * n + p) * c;
                    for ch in g * cg..(g + 1) * cg {
                        let xhat = (x[off + ch] - mean) * inv;
                        let gh = gy[off + ch] * w[ch];
                        sum_g = sum_g + gh;
                        sum_gx = sum_gx + gh * xhat;
                        dw[ch] = dw[ch] + gy[off + ch] * xhat;
                        db[ch] = db[ch] + gy[off + ch];
                    }
                }
                let mg = sum_g / count;
                let mgx = sum_gx / count;
                for p in 0..n {
                    let off = (bi * n + p) * c;
                    for ch in g * cg..(g + 1) * cg {
                        let xhat = (x[off + ch] - mean) * inv;
                        dx[off + ch] = inv * (gy[off + ch] * w[ch] - mg - xhat * mgx);
                    }
                }
            }
        }
        out
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, n, c) = Self::dims(l1);
        let out = dispatch3!(self.name(), s1, l1, s2, l2, s3, l3, |x, w, bias| self.forward(x, w, bias, b, n, c));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(w, &grad.contiguous()?, &GroupNormBackward(*self))?;
        let n = x.elem_count();
        let c = w.elem_count();
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dw = packed.narrow(0, n, c)?.reshape(w.shape())?;
        let db = packed.narrow(0, n + c, c)?.reshape(w.shape())?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

impl CustomOp3 for GroupNormBackward {
    fn name(&self) -> &'static str {
        "group-norm-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, n, c) = GroupNormOp::dims(l1);
        let out = dispatch3!(self.name(), s1, l1, s2, l2, s3, l3, |x, w, g| self.0.backward(x, w, g, b, n, c));
        Ok((out, Shape::from(l1.shape().elem_count() + 2 * c)))
    }
}

pub(crate) fn group_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, op: GroupNormOp) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, op)
}

/// `dst (m x n, row-major) = [dst +] lhs * rhs` with explicit row and column
/// strides for the operands.
fn gemm_into<T: Real>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    lhs_strides: (usize, usize),
    rhs: &[T],
    rhs_strides: (usize, usize),
) {
    gemm_strided((m, n, k), (dst, n), accumulate, lhs, lhs_strides, rhs, rhs_strides)
}

/// As [`gemm_into`] with destination row stride `dst_rs`.
fn gemm_strided<T: Real>(
    (m, n, k): (usize, usize, usize),
    (dst, dst_rs): (&mut [T], usize),
    accumulate: bool,
    lhs: &[T],
    (lhs_rs, lhs_cs): (usize, usize),
    rhs: &[T],
    (rhs_rs, rhs_cs): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(dst.len() > (m - 1) * dst_rs + (n - 1));
    assert!(k == 0 || lhs.len() > (m - 1) * lhs_rs + (k - 1) * lhs_cs);
    assert!(k == 0 || rhs.len() > (k - 1) * rhs_rs + (n - 1) * rhs_cs);
    // SAFETY: the bounds above cover every element gemm reads or writes.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

/// Square-kernel patch geometry with zero padding `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2dOp {
    pub k: usize,
    pub stride: usize,
}

struct Conv2dBackward(Conv2dOp);

impl Conv2dOp {
    fn pad(&self) -> usize {
        self.k / 2
    }

    pub(crate) fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Calls `f(patch_offset, image_offset)` for every (output pixel, kernel
    /// tap) pair that lands inside the input.
    fn for_each_tap(&self, (b, h, w, c): (usize, usize, usize, usize), mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw(h, w);
        let (k, pad) = (self.k, self.pad() as isize);
        let row = k * k * c;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ((bi * oh + oy) * ow + ox) * row;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            f(base + (ky * k + kx) * c, ((bi * h + iy as usize) * w + ix as usize) * c);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, h, w, c) = dims;
        let (oh, ow) = self.out_hw(h, w);
        let mut out = vec![T::zero(); b * oh * ow * self.k * self.k * c];
        self.for_each_tap(dims, |dst, src| out[dst..dst + c].copy_from_slice(&x[src..src + c]));
        out
    }

    fn col2im<T: Real>(&self, cols: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, h, w, c) = dims;
        let mut out = vec![T::zero(); b * h * w * c];
        self.for_each_tap(dims, |patch, img| {
            for (o, &v) in out[img..img + c].iter_mut().zip(&cols[patch..patch + c]) {
                *o = *o + v;
            }
        });
        out
    }

    fn forward<T: Real>(&self, x: &[T], wt: &[T], bias: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, h, w, c) = dims;
        let (oh, ow) = self.out_hw(h, w);
        let (rows, kkc, co) = (b * oh * ow, self.k * self.k * c, bias.len());
        let gathered;
        let cols = if self.is_pointwise() {
            x
        } else {
            gathered = self.im2col(x, dims);
            &gathered
        };
        let mut y: Vec<T> = bias.iter().copied().cycle().take(rows * co).collect();
        gemm_into((rows, co, kkc), &mut y, true, cols, (kkc, 1), wt, (co, 1));
        y
    }

    /// Packed `[dx, dw, db]`.
    fn backward<T: Real>(&self, x: &[T], wt: &[T], gy: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, h, w, c) = dims;
        let (oh, ow) = self.out_hw(h, w);
        let kkc = self.k * self.k * c;
        let co = wt.len() / kkc;
        let rows = b * oh * ow;
        let mut out = vec![T::zero(); x.len() + wt.len() + co];
        let (dx, rest) = out.split_at_mut(x.len());
        let (dw, db) = rest.split_at_mut(wt.len());
        for row in gy.chunks_exact(co) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d = *d + g;
            }
        }
        if self.is_pointwise() {
            gemm_into((kkc, co, rows), dw, false, x, (1, kkc), gy, (co, 1));
            gemm_into((rows, kkc, co), dx, false, gy, (co, 1), wt, (1, co));
        } else {
            let cols = self.im2col(x, dims);
            gemm_into((kkc, co, rows), dw, false, &cols, (1, kkc), gy, (co, 1));
            let mut dcols = cols;
            gemm_into((rows, kkc, co), &mut dcols, false, gy, (co, 1), wt, (1, co));
            dx.copy_from_slice(&self.col2im(&dcols, dims));
        }
        out
    }
}

fn conv_dims(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = conv_dims(l1)?;
        let (b, h, w, _) = dims;
        let (oh, ow) = self.out_hw(h, w);
        let co = l3.shape().elem_count();
        let out = dispatch3!(self.name(), s1, l1, s2, l2, s3, l3, |x, wt, bias| self.forward(x, wt, bias, dims));
        Ok((out, Shape::from((b, oh, ow, co))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(w, &grad.contiguous()?, &Conv2dBackward(*self))?;
        let (nx, nw, nb) = (x.elem_count(), w.elem_count(), bias.elem_count());
        let dx = packed.narrow(0, 0, nx)?.reshape(x.shape())?;
        let dw = packed.narrow(0, nx, nw)?.reshape(w.shape())?;
        let db = packed.narrow(0, nx + nw, nb)?.reshape(bias.shape())?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

impl CustomOp3 for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = conv_dims(l1)?;
        let (nx, nw) = (l1.shape().elem_count(), l2.shape().elem_count());
        let co = l3.shape().dims()[3];
        let out = dispatch3!(self.name(), s1, l1, s2, l2, s3, l3, |x, wt, g| self.0.backward(x, wt, g, dims));
        Ok((out, Shape::from(nx + nw + co)))
    }
}

/// `x [B, H, W, C_in]`, `weight [k*k*C_in, C_out]`, `bias [C_out]`.
pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, op: Conv2dOp) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, op)
}

/// Multi-head token softmax of `q kᵀ · scale` on flat projections:
/// `q [B, N, H*d]`, `k [B, L, H*d]` to probabilities `[B, H, N, L]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionProbs {
    pub heads: usize,
    pub scale: f64,
}

struct AttentionProbsBackward(AttentionProbs);

/// `p [B, H, N, L]` applied to `v [B, L, H*d]`, giving `[B, N, H*d]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionApply {
    pub heads: usize,
}

struct AttentionApplyBackward(AttentionApply);

impl AttentionProbs {
    fn probs<T: Real>(&self, q: &[T], k: &[T], (b, n, l, hd): (usize, usize, usize, usize)) -> Vec<T> {
        let (heads, d) = (self.heads, hd / self.heads);
        let scale = T::from(self.scale).unwrap();
        let mut out = vec![T::zero(); b * heads * n * l];
        for bi in 0..b {
            for h in 0..heads {
                let dst = &mut out[(bi * heads + h) * n * l..][..n * l];
                let qh = &q[bi * n * hd + h * d..];
                let kh = &k[bi * l * hd + h * d..];
                gemm_into((n, l, d), dst, false, qh, (hd, 1), kh, (1, hd));
                for row in dst.chunks_exact_mut(l) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    for r in row.iter_mut() {
                        *r = ((*r - max) * scale).fast_exp();
                    }
                    let inv = T::one() / row.iter().fold(T::zero(), |a, &r| a + r);
                    for r in row.iter_mut() {
                        *r = *r * inv;
                    }
                }
            }
        }
        out
    }

    /// Packed `[dq, dk]` from the logit gradient `ds` (before scaling).
    fn backward<T: Real>(&self, q: &[T], k: &[T], ds: &[T], (b, n, l, hd): (usize, usize, usize, usize)) -> Vec<T> {
        let (heads, d) = (self.heads, hd / self.heads);
        let scale = T::from(self.scale).unwrap();
        let ds: Vec<T> = ds.iter().map(|&v| v * scale).collect();
        let mut out = vec![T::zero(); q.len() + k.len()];
        let (dq, dk) = out.split_at_mut(q.len());
        for bi in 0..b {
            for h in 0..heads {
                let dsh = &ds[(bi * heads + h) * n * l..][..n * l];
                let (qo, ko) = (bi * n * hd + h * d, bi * l * hd + h * d);
                gemm_strided((n, d, l), (&mut dq[qo..], hd), false, dsh, (l, 1), &k[ko..], (hd, 1));
                gemm_strided((l, d, n), (&mut dk[ko..], hd), false, dsh, (1, l), &q[qo..], (hd, 1));
            }
        }
        out
    }
}

fn attention_dims(lq: &Layout, lk: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    let (b, n, hd) = lq.shape().dims3()?;
    let (_, l, _) = lk.shape().dims3()?;
    Ok((b, n, l, hd))
}

impl CustomOp2 for AttentionProbs {
    fn name(&self) -> &'static str {
        "attention-probs"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = attention_dims(l1, l2)?;
        let (b, n, l, _) = dims;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |q, k| self.probs(q, k, dims));
        Ok((out, Shape::from((b, self.heads, n, l))))
    }

    fn bwd(&self, q: &Tensor, k: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let ds = res.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxBackward)?;
        let packed = q.apply_op3_no_bwd(k, &ds, &AttentionProbsBackward(*self))?;
        let nq = q.elem_count();
        let dq = packed.narrow(0, 0, nq)?.reshape(q.shape())?;
        let dk = packed.narrow(0, nq, k.elem_count())?.reshape(k.shape())?;
        Ok((Some(dq), Some(dk)))
    }
}

impl CustomOp3 for AttentionProbsBackward {
    fn name(&self) -> &'static str {
        "attention-probs-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = attention_dims(l1, l2)?;
        let total = l1.shape().elem_count() + l2.shape().elem_count();
        let out = dispatch3!(self.name(), s1, l1, s2, l2, s3, l3, |q, k, g| self.0.backward(q, k, g, dims));
        Ok((out, Shape::from(total)))
    }
}

impl AttentionApply {
    /// `(B, H, N, L, H*d)` from the probability and value layouts.
    fn dims(&self, lp: &Layout, lv: &Layout) -> candle_core::Result<(usize, usize, usize, usize, usize)> {
        let (b, h, n, l) = lp.shape().dims4()?;
        if h != self.heads {
            candle_core::bail!("attention-apply: {h} probability heads for {} heads", self.heads);
        }
        let (_, _, hd) = lv.shape().dims3()?;
        Ok((b, h, n, l, hd))
    }

    fn forward<T: Real>(&self, p: &[T], v: &[T], (b, heads, n, l, hd): (usize, usize, usize, usize, usize)) -> Vec<T> {
        let d = hd / heads;
        let mut out = vec![T::zero(); b * n * hd];
        for bi in 0..b {
            for h in 0..heads {
                let ph = &p[(bi * heads + h) * n * l..][..n * l];
                let dst = &mut out[bi * n * hd + h * d..];
                gemm_strided((n, d, l), (dst, hd), false, ph, (l, 1), &v[bi * l * hd + h * d..], (hd, 1));
            }
        }
        out
    }

    /// Packed `[dp, dv]`.
    fn backward<T: Real>(&self, p: &[T], v: &[T], go: &[T], dims: (usize, usize, usize, usize, usize)) -> Vec<T> {
        let (b, heads, n, l, hd) = dims;
        let d = hd / heads;
        let mut out = vec![T::zero(); p.len() + v.len()];
        let (dp, dv) = out.split_at_mut(p.len());
        for bi in 0..b {
            for h in 0..heads {
                let po = (bi * heads + h) * n * l;
                let (go_h, vo) = (&go[bi * n * hd + h * d..], bi * l * hd + h * d);
                gemm_into((n, l, d), &mut dp[po..po + n * l], false, go_h, (hd, 1), &v[vo..], (1, hd));
                gemm_strided((l, d, n), (&mut dv[vo..], hd), false, &p[po..po + n * l], (1, l), go_h, (hd, 1));
            }
        }
        out
    }
}

impl CustomOp2 for AttentionApply {
    fn name(&self) -> &'static str {
        "attention-apply"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = self.dims(l1, l2)?;
        let (b, _, n, _, hd) = dims;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |p, v| self.forward(p, v, dims));
        Ok((out, Shape::from((b, n, hd))))
    }

    fn bwd(&self, p: &Tensor, v: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let packed = p.apply_op3_no_bwd(v, &grad.contiguous()?, &AttentionApplyBackward(*self))?;
        let np = p.elem_count();
        let dp = packed.narrow(0, 0, np)?.reshape(p.shape())?;
        let dv = packed.narrow(0, np, v.elem_count())?.reshape(v.shape())?;
        Ok((Some(dp), Some(dv)))
    }
}

impl CustomOp3 for AttentionApplyBackward {
    fn name(&self) -> &'static str {
        "attention-apply-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = self.0.dims(l1, l2)?;
        let total = l1.shape().elem_count() + l2.shape().elem_count();
        let out = dispatch3!(self.name(), s1, l1, s2, l2, s3, l3, |p, v, g| self.0.backward(p, v, g, dims));
        Ok((out, Shape::from(total)))
    }
}

/// Mean over axis 1 of a contiguous `[B, H, ...]` tensor.
struct HeadMean;

impl CustomOp1 for HeadMean {
    fn name(&self) -> &'static str {
        "head-mean"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn f<T: Real>(x: &[T], b: usize, h: usize) -> Vec<T> {
            let inner = x.len() / (b * h);
            let inv = T::one() / T::from(h).unwrap();
            let mut out = vec![T::zero(); b * inner];
            for (dst, src) in out.chunks_exact_mut(inner).zip(x.chunks_exact(h * inner)) {
                for head in src.chunks_exact(inner) {
                    for (d, &v) in dst.iter_mut().zip(head) {
                        *d = *d + v;
                    }
                }
                for d in dst.iter_mut() {
                    *d = *d * inv;
                }
            }
            out
        }
        let dims = l.shape().dims();
        if dims.len() < 2 {
            candle_core::bail!("head-mean: needs at least two axes");
        }
        let (b, h) = (dims[0], dims[1]);
        let mut out_dims = dims.to_vec();
        out_dims.remove(1);
        Ok((dispatch1!(self.name(), s, l, |v| f(v, b, h)), Shape::from(out_dims)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let h = arg.dims()[1];
        Ok(Some((grad.unsqueeze(1)?.broadcast_as(arg.shape())? / h as f64)?))
    }
}

/// Mean over the head axis of `[B, H, ...]`.
pub(crate) fn head_mean(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(HeadMean)
}

/// `q [B, N, H*d]`, `k [B, L, H*d]` to per-head probabilities `[B, H, N, L]`.
pub(crate) fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (_, _, hd) = q.dims3()?;
    let op = AttentionProbs { heads, scale: 1.0 / ((hd / heads) as f64).sqrt() };
    q.contiguous()?.apply_op2(&k.contiguous()?, op)
}

/// `p [B, H, N, L]`, `v [B, L, H*d]` to `[B, N, H*d]`.
pub(crate) fn attention_apply(p: &Tensor, v: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    p.contiguous()?.apply_op2(&v.contiguous()?, AttentionApply { heads })
}
