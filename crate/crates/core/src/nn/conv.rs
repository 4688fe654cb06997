//! N-d convolution (1, 2 or 3 spatial dims) via im2col + GEMM, registered as a
//! candle custom op with an explicit backward pass.
//!
//! Tensors are always viewed as `[N, C, D, H, W]`; 1-D and 2-D convolutions
//! use unit leading spatial dims. The batch loop runs through [`Exec`], and
//! per-sample weight gradients are reduced in sample order so results do not
//! depend on the execution strategy.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};

use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl ConvGeom {
    pub fn conv1d(
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Self {
        Self {
            kernel: [1, 1, kernel],
            stride: [1, 1, stride],
            padding: [0, 0, padding],
            dilation: [1, 1, dilation],
            groups,
        }
    }

    pub fn conv2d(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
            dilation: [1, 1, 1],
            groups: 1,
        }
    }

    pub fn conv3d(kernel: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [1; 3],
            padding: [padding; 3],
            dilation: [1; 3],
            groups: 1,
        }
    }

    pub fn out_len(&self, axis: usize, input: usize) -> Option<usize> {
        let span = self.dilation[axis] * (self.kernel[axis] - 1) + 1;
        let padded = input + 2 * self.padding[axis];
        if padded < span {
            None
        } else {
            Some((padded - span) / self.stride[axis] + 1)
        }
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Problem dimensions resolved from concrete tensor shapes.
#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    c_in: usize,
    c_out: usize,
    inp: [usize; 3],
    out: [usize; 3],
    geom: ConvGeom,
}

impl Dims {
    fn in_sample(&self) -> usize {
        self.c_in * self.inp.iter().product::<usize>()
    }
    fn out_pixels(&self) -> usize {
        self.out.iter().product()
    }
    fn out_sample(&self) -> usize {
        self.c_out * self.out_pixels()
    }
    fn cin_g(&self) -> usize {
        self.c_in / self.geom.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.geom.groups
    }
    /// Rows of the per-group column matrix.
    fn k_g(&self) -> usize {
        self.cin_g() * self.geom.kernel_volume()
    }
}

pub trait Scalar:
    Copy + Send + Sync + Default + std::ops::AddAssign + candle_core::WithDType + 'static
{
    /// `c = a·b + beta·c` with explicit row/column strides.
    ///
    /// # Safety
    /// The pointers must address `m x k`, `k x n` and `m x n` matrices under the
    /// given strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Valid output index range along one axis for kernel tap `k`: outputs `o` with
/// `0 <= o*s - p + k*d < input`.
fn valid_range(out: usize, input: usize, s: usize, p: usize, k: usize, d: usize) -> (usize, usize) {
    let off = k * d;
    // o*s + off >= p
    let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
    // o*s + off - p <= input - 1
    let hi = if input + p > off {
        ((input + p - off - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Fills `cols` ([k_g, P]) for channel group `g` of one sample.
fn im2col<T: Scalar>(x: &[T], d: &Dims, g: usize, cols: &mut [T]) {
    let geo = &d.geom;
    let [id, ih, iw] = d.inp;
    let [od, oh, ow] = d.out;
    let p = d.out_pixels();
    let [kd, kh, kw] = geo.kernel;
    let mut row = 0;
    for c in 0..d.cin_g() {
        let ch = &x[(g * d.cin_g() + c) * id * ih * iw..][..id * ih * iw];
        for a in 0..kd {
            let (d_lo, d_hi) =
                valid_range(od, id, geo.stride[0], geo.padding[0], a, geo.dilation[0]);
            for b in 0..kh {
                let (h_lo, h_hi) =
                    valid_range(oh, ih, geo.stride[1], geo.padding[1], b, geo.dilation[1]);
                for e in 0..kw {
                    let (w_lo, w_hi) =
                        valid_range(ow, iw, geo.stride[2], geo.padding[2], e, geo.dilation[2]);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    dst.fill(T::zero());
                    for zo in d_lo..d_hi {
                        let zi = zo * geo.stride[0] + a * geo.dilation[0] - geo.padding[0];
                        for yo in h_lo..h_hi {
                            let yi = yo * geo.stride[1] + b * geo.dilation[1] - geo.padding[1];
                            let src_row = &ch[(zi * ih + yi) * iw..][..iw];
                            let dst_row = &mut dst[(zo * oh + yo) * ow..][..ow];
                            if w_lo >= w_hi {
                                continue;
                            }
                            if geo.stride[2] == 1 {
                                let xi0 = w_lo + e * geo.dilation[2] - geo.padding[2];
                                dst_row[w_lo..w_hi]
                                    .copy_from_slice(&src_row[xi0..xi0 + (w_hi - w_lo)]);
                            } else {
                                for xo in w_lo..w_hi {
                                    let xi =
                                        xo * geo.stride[2] + e * geo.dilation[2] - geo.padding[2];
                                    dst_row[xo] = src_row[xi];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the input-gradient sample for group `g`.
fn col2im<T: Scalar>(cols: &[T], d: &Dims, g: usize, dx: &mut [T]) {
    let geo = &d.geom;
    let [id, ih, iw] = d.inp;
    let [od, oh, ow] = d.out;
    let p = d.out_pixels();
    let [kd, kh, kw] = geo.kernel;
    let mut row = 0;
    for c in 0..d.cin_g() {
        let ch = &mut dx[(g * d.cin_g() + c) * id * ih * iw..][..id * ih * iw];
        for a in 0..kd {
            let (d_lo, d_hi) =
                valid_range(od, id, geo.stride[0], geo.padding[0], a, geo.dilation[0]);
            for b in 0..kh {
                let (h_lo, h_hi) =
                    valid_range(oh, ih, geo.stride[1], geo.padding[1], b, geo.dilation[1]);
                for e in 0..kw {
                    let (w_lo, w_hi) =
                        valid_range(ow, iw, geo.stride[2], geo.padding[2], e, geo.dilation[2]);
                    let src = &cols[row * p..(row + 1) * p];
                    for zo in d_lo..d_hi {
                        let zi = zo * geo.stride[0] + a * geo.dilation[0] - geo.padding[0];
                        for yo in h_lo..h_hi {
                            let yi = yo * geo.stride[1] + b * geo.dilation[1] - geo.padding[1];
                            let dst_row = &mut ch[(zi * ih + yi) * iw..][..iw];
                            let src_row = &src[(zo * oh + yo) * ow..][..ow];
                            for xo in w_lo..w_hi {
                                let xi = xo * geo.stride[2] + e * geo.dilation[2] - geo.padding[2];
                                dst_row[xi] += src_row[xo];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn forward_host<T: Scalar>(x: &[T], w: &[T], d: &Dims, exec: Exec) -> Vec<T> {
    let p = d.out_pixels();
    let (kg, cog) = (d.k_g(), d.cout_g());
    let samples: Vec<Vec<T>> = exec.map_range(d.n, |n| {
        let xs = &x[n * d.in_sample()..(n + 1) * d.in_sample()];
        let mut out = vec![T::zero(); d.out_sample()];
        let mut cols = vec![T::zero(); kg * p];
        for g in 0..d.geom.groups {
            im2col(xs, d, g, &mut cols);
            let wg = &w[g * cog * kg..(g + 1) * cog * kg];
            let og = &mut out[g * cog * p..(g + 1) * cog * p];
            // SAFETY: slices sized [cog, kg], [kg, p], [cog, p], row-major.
            unsafe {
                T::gemm(
                    cog,
                    kg,
                    p,
                    wg.as_ptr(),
                    kg as isize,
                    1,
                    cols.as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    og.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
        out
    });
    samples.concat()
}

/// Input and weight gradients; either is skipped (returned empty) when not needed.
fn backward_host<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &Dims,
    exec: Exec,
    need: (bool, bool),
) -> (Vec<T>, Vec<T>) {
    let p = d.out_pixels();
    let (kg, cog) = (d.k_g(), d.cout_g());
    let per_sample: Vec<(Vec<T>, Vec<T>)> = exec.map_range(d.n, |n| {
        let xs = &x[n * d.in_sample()..(n + 1) * d.in_sample()];
        let dys = &dy[n * d.out_sample()..(n + 1) * d.out_sample()];
        let mut dx = vec![T::zero(); if need.0 { d.in_sample() } else { 0 }];
        let mut dw = vec![T::zero(); if need.1 { w.len() } else { 0 }];
        let mut cols = vec![T::zero(); if need.1 { kg * p } else { 0 }];
        let mut dcols = vec![T::zero(); if need.0 { kg * p } else { 0 }];
        for g in 0..d.geom.groups {
            let wg = &w[g * cog * kg..(g + 1) * cog * kg];
            let dyg = &dys[g * cog * p..(g + 1) * cog * p];
            // SAFETY: dW_g[cog,kg] = dY_g[cog,p] · cols^T[p,kg]; dcols[kg,p] = W_g^T[kg,cog] · dY_g[cog,p].
            if need.1 {
                im2col(xs, d, g, &mut cols);
                let dwg = &mut dw[g * cog * kg..(g + 1) * cog * kg];
                unsafe {
                    T::gemm(
                        cog,
                        p,
                        kg,
                        dyg.as_ptr(),
                        p as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        p as isize,
                        T::zero(),
                        dwg.as_mut_ptr(),
                        kg as isize,
                        1,
                    );
                }
            }
            if need.0 {
                unsafe {
                    T::gemm(
                        kg,
                        cog,
                        p,
                        wg.as_ptr(),
                        1,
                        kg as isize,
                        dyg.as_ptr(),
                        p as isize,
                        1,
                        T::zero(),
                        dcols.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                col2im(&dcols, d, g, &mut dx);
            }
        }
        (dx, dw)
    });
    let mut dw = vec![T::zero(); if need.1 { w.len() } else { 0 }];
    let mut dx = Vec::with_capacity(x.len());
    for (sx, sw) in per_sample {
        dx.extend_from_slice(&sx);
        for (acc, v) in dw.iter_mut().zip(sw) {
            *acc += v;
        }
    }
    (dx, dw)
}

struct ConvOp {
    dims: Dims,
    exec: Exec,
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv-nd expects contiguous operands"),
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv-nd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = &self.dims;
        let shape = Shape::from(vec![d.n, d.c_out, d.out[0], d.out[1], d.out[2]]);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(forward_host(
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                d,
                self.exec,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(forward_host(
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                d,
                self.exec,
            )),
            _ => candle_core::bail!("conv-nd supports matching f32 or f64 operands only"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = &self.dims;
        let need = (x.track_op(), w.track_op());
        let (dx, dw) = match x.dtype() {
            DType::F32 => {
                let (dx, dw) = backward_host(
                    &x.flatten_all()?.to_vec1::<f32>()?,
                    &w.flatten_all()?.to_vec1::<f32>()?,
                    &grad.flatten_all()?.to_vec1::<f32>()?,
                    d,
                    self.exec,
                    need,
                );
                (
                    need.0
                        .then(|| Tensor::from_vec(dx, x.shape(), x.device()))
                        .transpose()?,
                    need.1
                        .then(|| Tensor::from_vec(dw, w.shape(), w.device()))
                        .transpose()?,
                )
            }
            DType::F64 => {
                let (dx, dw) = backward_host(
                    &x.flatten_all()?.to_vec1::<f64>()?,
                    &w.flatten_all()?.to_vec1::<f64>()?,
                    &grad.flatten_all()?.to_vec1::<f64>()?,
                    d,
                    self.exec,
                    need,
                );
                (
                    need.0
                        .then(|| Tensor::from_vec(dx, x.shape(), x.device()))
                        .transpose()?,
                    need.1
                        .then(|| Tensor::from_vec(dw, w.shape(), w.device()))
                        .transpose()?,
                )
            }
            dt => candle_core::bail!("conv-nd backward: unsupported dtype {dt:?}"),
        };
        Ok((dx, dw))
    }
}

/// Convolution over 5-D input `[N, C, D, H, W]` with weight `[Co, C/groups, kd, kh, kw]`.
pub fn conv_nd(x: &Tensor, w: &Tensor, geom: ConvGeom, exec: Exec) -> candle_core::Result<Tensor> {
    let (n, c_in, id, ih, iw) = x.dims5()?;
    let (c_out, cin_g, kd, kh, kw) = w.dims5()?;
    if geom.groups == 0 || c_in % geom.groups != 0 || c_out % geom.groups != 0 {
        candle_core::bail!(
            "conv-nd: groups {} must divide channels {c_in}->{c_out}",
            geom.groups
        );
    }
    if cin_g * geom.groups != c_in || [kd, kh, kw] != geom.kernel {
        candle_core::bail!(
            "conv-nd: weight {:?} does not match input channels {c_in} / kernel {:?}",
            w.dims(),
            geom.kernel
        );
    }
    let inp = [id, ih, iw];
    let mut out = [0; 3];
    for axis in 0..3 {
        out[axis] = match geom.out_len(axis, inp[axis]) {
            Some(o) if geom.stride[axis] > 0 && geom.dilation[axis] > 0 => o,
            _ => candle_core::bail!(
                "conv-nd: input {:?} too small for kernel {:?}",
                x.dims(),
                geom.kernel
            ),
        };
    }
    let dims = Dims {
        n,
        c_in,
        c_out,
        inp,
        out,
        geom,
    };
    x.contiguous()?
        .apply_op2(&w.contiguous()?, ConvOp { dims, exec })
}

/// `[N, C, L]` input, `[Co, C/groups, k]` weight.
pub fn conv1d(x: &Tensor, w: &Tensor, geom: ConvGeom, exec: Exec) -> candle_core::Result<Tensor> {
    let (n, c, l) = x.dims3()?;
    let (co, ci, k) = w.dims3()?;
    let y = conv_nd(
        &x.reshape((n, c, 1, 1, l))?,
        &w.reshape((co, ci, 1, 1, k))?,
        geom,
        exec,
    )?;
    let (_, co, _, _, lo) = y.dims5()?;
    y.reshape((n, co, lo))
}

/// `[N, C, H, W]` input, `[Co, C/groups, kh, kw]` weight.
pub fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeom, exec: Exec) -> candle_core::Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (co, ci, kh, kw) = w.dims4()?;
    let y = conv_nd(
        &x.reshape((n, c, 1, h, wd))?,
        &w.reshape((co, ci, 1, kh, kw))?,
        geom,
        exec,
    )?;
    let (_, co, _, ho, wo) = y.dims5()?;
    y.reshape((n, co, ho, wo))
}
