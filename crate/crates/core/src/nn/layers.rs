//! Layers shared by the encoders, the generator and the discriminators.

use candle_core::{DType, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvGeom};
use super::params::{Init, ParamStore};
use crate::error::{shape_err, Result};
use crate::exec::Exec;

/// Forward-pass mode.
///
/// `train` selects batch statistics and enables dropout; `track` keeps
/// parameters on the autodiff graph. Eval passes detach parameters so no
/// graph is retained.
pub struct Mode<'r> {
    pub train: bool,
    pub track: bool,
    pub exec: Exec,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Mode<'static> {
    pub fn eval() -> Self {
        Mode {
            train: false,
            track: false,
            exec: Exec::Parallel,
            rng: None,
        }
    }

    /// Eval numerics (running statistics, no dropout) with gradients kept.
    pub fn eval_tracked() -> Self {
        Mode {
            track: true,
            ..Mode::eval()
        }
    }
}

impl<'r> Mode<'r> {
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Mode {
            train: true,
            track: true,
            exec: Exec::Parallel,
            rng: Some(rng),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn param(&self, v: &Var) -> Tensor {
        if self.track {
            v.as_tensor().clone()
        } else {
            v.as_detached_tensor()
        }
    }

    fn keep_mask(&mut self, n: usize, p: f64) -> Option<Vec<f64>> {
        if !self.train || p <= 0.0 {
            return None;
        }
        let rng = self.rng.as_deref_mut()?;
        let scale = 1.0 / (1.0 - p);
        Some(
            (0..n)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
                .collect(),
        )
    }
}

struct LeakyRelu {
    slope: f64,
}

impl candle_core::CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(
        &self,
        s: &candle_core::CpuStorage,
        l: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let Some((a, b)) = l.contiguous_offsets() else {
            candle_core::bail!("leaky-relu expects a contiguous input")
        };
        let out = match s {
            S::F32(x) => {
                let k = self.slope as f32;
                S::F32(
                    x[a..b]
                        .iter()
                        .map(|&v| if v > 0.0 { v } else { v * k })
                        .collect(),
                )
            }
            S::F64(x) => S::F64(
                x[a..b]
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { v * self.slope })
                    .collect(),
            ),
            _ => candle_core::bail!("leaky-relu supports f32/f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let scale = x
            .gt(0.0)?
            .to_dtype(x.dtype())?
            .affine(1.0 - self.slope, self.slope)?;
        Ok(Some(grad.mul(&scale)?))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyRelu { slope })?)
}

/// Element-wise inverted dropout.
pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    match mode.keep_mask(x.elem_count(), p) {
        None => Ok(x.clone()),
        Some(m) => {
            let mask = Tensor::from_vec(m, x.shape(), x.device())?.to_dtype(x.dtype())?;
            Ok(x.mul(&mask)?)
        }
    }
}

/// Drops whole channels of an `[N, C, ...]` tensor.
pub fn channel_dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 3 {
        return Err(shape_err!(
            "channel dropout expects [N, C, ...], got {dims:?}"
        ));
    }
    match mode.keep_mask(dims[0] * dims[1], p) {
        None => Ok(x.clone()),
        Some(m) => {
            let mut shape = vec![dims[0], dims[1]];
            shape.resize(dims.len(), 1);
            let mask = Tensor::from_vec(m, shape, x.device())?.to_dtype(x.dtype())?;
            Ok(x.broadcast_mul(&mask)?)
        }
    }
}

fn as_4d(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let dims = x.dims().to_vec();
    match dims.len() {
        4 => Ok((x.clone(), dims)),
        5 => Ok((
            x.reshape((dims[0], dims[1] * dims[2], dims[3], dims[4]))?,
            dims,
        )),
        _ => Err(shape_err!(
            "spatial pooling expects a 4-D or 5-D tensor, got {dims:?}"
        )),
    }
}

/// Floor-mode `k`x`k` max pool over `[N, C, H, W]`. The backward pass routes
/// each window's gradient to its first maximal element.
struct MaxPool2d {
    k: usize,
}

fn max_pool_host<T: candle_core::WithDType + PartialOrd>(
    x: &[T],
    (nc, h, w): (usize, usize, usize),
    k: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / k, w / k);
    let mut out = Vec::with_capacity(nc * ho * wo);
    let mut arg = Vec::with_capacity(nc * ho * wo);
    for plane in 0..nc {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + i * k * w + j * k;
                for a in 0..k {
                    for b in 0..k {
                        let idx = base + (i * k + a) * w + j * k + b;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push((best - base) as u32);
            }
        }
    }
    (out, arg)
}

impl candle_core::CustomOp1 for MaxPool2d {
    fn name(&self) -> &'static str {
        "max-pool2d"
    }

    fn cpu_fwd(
        &self,
        s: &candle_core::CpuStorage,
        l: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (n, c, h, w) = l.shape().dims4()?;
        let Some((a, b)) = l.contiguous_offsets() else {
            candle_core::bail!("max-pool2d expects a contiguous input")
        };
        let dims = (n * c, h, w);
        let out = match s {
            S::F32(x) => S::F32(max_pool_host(&x[a..b], dims, self.k).0),
            S::F64(x) => S::F64(max_pool_host(&x[a..b], dims, self.k).0),
            _ => candle_core::bail!("max-pool2d supports f32/f64"),
        };
        Ok((out, (n, c, h / self.k, w / self.k).into()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = x.dims4()?;
        let xs = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let (_, arg) = max_pool_host(&xs, (n * c, h, w), self.k);
        let g = grad.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let per_plane = (h / self.k) * (w / self.k);
        let mut dx = vec![0.0f64; xs.len()];
        for (o, (&idx, gv)) in arg.iter().zip(&g).enumerate() {
            dx[(o / per_plane) * h * w + idx as usize] += gv;
        }
        Tensor::from_vec(dx, (n, c, h, w), x.device())?
            .to_dtype(x.dtype())
            .map(Some)
    }
}

fn spatial_pool(x: &Tensor, k: usize, max: bool) -> Result<Tensor> {
    if k <= 1 {
        return Ok(x.clone());
    }
    let (x4, dims) = as_4d(x)?;
    let (_, _, h, w) = x4.dims4()?;
    if h < k || w < k {
        return Err(shape_err!("cannot pool {h}x{w} by {k}"));
    }
    let y = if max {
        x4.contiguous()?.apply_op1(MaxPool2d { k })?
    } else {
        // Crop to a multiple of k so windows tile exactly (floor mode).
        x4.narrow(2, 0, h / k * k)?
            .narrow(3, 0, w / k * k)?
            .contiguous()?
            .avg_pool2d(k)?
    };
    if dims.len() == 5 {
        Ok(y.reshape((dims[0], dims[1], dims[2], h / k, w / k))?)
    } else {
        Ok(y)
    }
}

/// Max-pool over the last two (spatial) axes of `[N, C, H, W]` or `[N, C, T, H, W]`.
pub fn max_pool_spatial(x: &Tensor, k: usize) -> Result<Tensor> {
    spatial_pool(x, k, true)
}

pub fn avg_pool_spatial(x: &Tensor, k: usize) -> Result<Tensor> {
    spatial_pool(x, k, false)
}

/// Average-pool the last axis of `[N, C, T]` by `k`, dropping a ragged tail.
pub fn avg_pool_time(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, t) = x.dims3()?;
    if t < k {
        return Err(shape_err!("cannot pool length {t} by {k}"));
    }
    Ok(x.narrow(2, 0, t / k * k)?
        .reshape((n, c, t / k, k))?
        .mean(3)?)
}

/// Reflect-pads the last axis of `[N, C, T]` on the right.
pub fn reflect_pad_right(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let t = x.dim(D::Minus1)?;
    if pad >= t {
        return Err(shape_err!(
            "reflect pad {pad} needs length > {pad}, got {t}"
        ));
    }
    let idx: Vec<u32> = (0..t as u32)
        .chain((0..pad as u32).map(|i| t as u32 - 2 - i))
        .collect();
    let idx = Tensor::new(idx.as_slice(), x.device())?;
    Ok(x.index_select(&idx, 2)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Var,
    b: Option<Var>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_init(
            ps,
            name,
            din,
            dout,
            Init::fan_in(din),
            Some(Init::fan_in(din)),
            rng,
        )
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        w_init: Init,
        b_init: Option<Init>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = ps.param(&format!("{name}.weight"), &[dout, din], w_init, rng)?;
        let b = match b_init {
            Some(i) => Some(ps.param(&format!("{name}.bias"), &[dout], i, rng)?),
            None => None,
        };
        Ok(Self { w, b })
    }

    pub fn weight(&self) -> &Var {
        &self.w
    }

    pub fn bias(&self) -> Option<&Var> {
        self.b.as_ref()
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[0]
    }

    /// `x` is `[..., din]`.
    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims
            .last()
            .ok_or_else(|| shape_err!("linear input is a scalar"))?;
        let (dout, want) = self.w.dims2()?;
        if din != want {
            return Err(shape_err!("linear expects last dim {want}, got {dims:?}"));
        }
        let rows = x.elem_count() / din;
        let mut y = x.reshape((rows, din))?.matmul(&mode.param(&self.w).t()?)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(&mode.param(b))?;
        }
        let mut out = dims;
        *out.last_mut().unwrap() = dout;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    rank: usize,
}

impl Conv {
    /// `rank` is the number of spatial axes (1, 2 or 3); unused leading
    /// entries of `geom` must be trivial.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rank: usize,
        bias: bool,
        w_init: Option<Init>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = geom.kernel;
        let cin_g = cin / geom.groups;
        let fan_in = cin_g * k.iter().product::<usize>();
        let shape: Vec<usize> = match rank {
            1 => vec![cout, cin_g, k[2]],
            2 => vec![cout, cin_g, k[1], k[2]],
            3 => vec![cout, cin_g, k[0], k[1], k[2]],
            r => return Err(shape_err!("unsupported conv rank {r}")),
        };
        let w = ps.param(
            &format!("{name}.weight"),
            &shape,
            w_init.unwrap_or(Init::fan_in(fan_in)),
            rng,
        )?;
        let b = if bias {
            Some(ps.param(&format!("{name}.bias"), &[cout], Init::fan_in(fan_in), rng)?)
        } else {
            None
        };
        Ok(Self { w, b, geom, rank })
    }

    pub fn weight(&self) -> &Var {
        &self.w
    }

    pub fn bias(&self) -> Option<&Var> {
        self.b.as_ref()
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let w = mode.param(&self.w);
        let y = match self.rank {
            1 => conv::conv1d(x, &w, self.geom, mode.exec)?,
            2 => conv::conv2d(x, &w, self.geom, mode.exec)?,
            _ => conv::conv_nd(x, &w, self.geom, mode.exec)?,
        };
        match &self.b {
            None => Ok(y),
            Some(b) => {
                let mut shape = vec![1, b.dims()[0]];
                shape.resize(y.rank(), 1);
                Ok(y.broadcast_add(&mode.param(b).reshape(shape)?)?)
            }
        }
    }
}

/// Transposed 1-D convolution with output length exactly `L * stride`,
/// computed as zero-stuffing plus asymmetric zero padding and a forward conv.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    conv: Conv,
    stride: usize,
    pad_left: usize,
    pad_right: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        w_init: Option<Init>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 || kernel + stride < 2 {
            return Err(shape_err!(
                "invalid transposed conv kernel {kernel} stride {stride}"
            ));
        }
        let total = stride + kernel - 2;
        let pad_left = total.div_ceil(2);
        let conv = Conv::new(
            ps,
            name,
            cin,
            cout,
            ConvGeom::conv1d(kernel, 1, 0, 1, 1),
            1,
            true,
            w_init,
            rng,
        )?;
        Ok(Self {
            conv,
            stride,
            pad_left,
            pad_right: total - pad_left,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let (n, c, l) = x.dims3()?;
        let s = self.stride;
        let x = if s == 1 {
            x.clone()
        } else {
            let zeros = Tensor::zeros((n, c, l, s - 1), x.dtype(), x.device())?;
            Tensor::cat(&[&x.unsqueeze(3)?, &zeros], 3)?
                .reshape((n, c, l * s))?
                .narrow(2, 0, (l - 1) * s + 1)?
        };
        let x = x.pad_with_zeros(2, self.pad_left, self.pad_right)?;
        self.conv.forward(&x, mode)
    }
}

/// Batch normalization over axis 1 of `[N, C, ...]`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[channels], Init::Ones, rng)?,
            beta: ps.param(&format!("{name}.beta"), &[channels], Init::Zeros, rng)?,
            running_mean: ps.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: ps.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let rank = x.rank();
        let c = self.gamma.dims()[0];
        if rank < 2 || x.dims()[1] != c {
            return Err(shape_err!(
                "batch norm over {c} channels got {:?}",
                x.dims()
            ));
        }
        let mut bshape = vec![1, c];
        bshape.resize(rank, 1);
        let reduce: Vec<usize> = (0..rank).filter(|&d| d != 1).collect();
        let count = x.elem_count() / c;
        let (mean, var) = if mode.train && count > 1 {
            let mean = x.mean_keepdim(reduce.as_slice())?;
            let var = x
                .broadcast_sub(&mean)?
                .sqr()?
                .mean_keepdim(reduce.as_slice())?;
            let m = self.momentum;
            let bm = mean.detach().flatten_all()?;
            let bv = (var.detach().flatten_all()? * (count as f64 / (count - 1) as f64))?;
            self.running_mean
                .set(&((self.running_mean.as_detached_tensor() * (1.0 - m))? + (bm * m)?)?)?;
            self.running_var
                .set(&((self.running_var.as_detached_tensor() * (1.0 - m))? + (bv * m)?)?)?;
            (mean, var)
        } else {
            (
                self.running_mean
                    .as_detached_tensor()
                    .reshape(bshape.as_slice())?,
                self.running_var
                    .as_detached_tensor()
                    .reshape(bshape.as_slice())?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = mode.param(&self.gamma).reshape(bshape.as_slice())?;
        let b = mode.param(&self.beta).reshape(bshape.as_slice())?;
        Ok(xhat.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

/// Single-direction GRU layer (gate order r, z, n).
#[derive(Debug, Clone)]
pub struct Gru {
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    hidden: usize,
}

impl Gru {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let init = Init::fan_in(hidden);
        Ok(Self {
            w_ih: ps.param(&format!("{name}.w_ih"), &[input, 3 * hidden], init, rng)?,
            w_hh: ps.param(&format!("{name}.w_hh"), &[hidden, 3 * hidden], init, rng)?,
            b_ih: ps.param(&format!("{name}.b_ih"), &[3 * hidden], init, rng)?,
            b_hh: ps.param(&format!("{name}.b_hh"), &[3 * hidden], init, rng)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `x` is `[B, T, I]`; returns all states `[B, T, H]` and the final state `[B, H]`.
    /// With `reverse` the sequence is consumed from the end, and outputs stay
    /// aligned with their input frames.
    pub fn forward(&self, x: &Tensor, reverse: bool, mode: &Mode) -> Result<(Tensor, Tensor)> {
        let (b, t, i) = x.dims3()?;
        let h = self.hidden;
        if t == 0 {
            return Err(shape_err!("GRU input has no frames"));
        }
        let w_ih = mode.param(&self.w_ih);
        let w_hh = mode.param(&self.w_hh);
        let b_hh = mode.param(&self.b_hh);
        let xi = x
            .reshape((b * t, i))?
            .matmul(&w_ih)?
            .broadcast_add(&mode.param(&self.b_ih))?
            .reshape((b, t, 3 * h))?;
        let mut state = Tensor::zeros((b, h), x.dtype(), x.device())?;
        let mut outs = vec![None; t];
        for step in 0..t {
            let k = if reverse { t - 1 - step } else { step };
            let xk = xi.narrow(1, k, 1)?.squeeze(1)?;
            let hk = state.matmul(&w_hh)?.broadcast_add(&b_hh)?;
            let rz =
                candle_nn::ops::sigmoid(&(xk.narrow(1, 0, 2 * h)? + hk.narrow(1, 0, 2 * h)?)?)?;
            let r = rz.narrow(1, 0, h)?;
            let z = rz.narrow(1, h, h)?;
            let n = (xk.narrow(1, 2 * h, h)? + r.mul(&hk.narrow(1, 2 * h, h)?)?)?.tanh()?;
            state = (&n + z.mul(&(&state - &n)?)?)?;
            outs[k] = Some(state.clone());
        }
        let outs: Vec<Tensor> = outs
            .into_iter()
            .map(|o| o.expect("every frame visited"))
            .collect();
        Ok((Tensor::stack(&outs, 1)?, state))
    }
}

/// Stacked bidirectional GRU; each layer concatenates forward and backward states.
#[derive(Debug, Clone)]
pub struct BiGru {
    layers: Vec<(Gru, Gru)>,
}

impl BiGru {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let din = if l == 0 { input } else { 2 * hidden };
            out.push((
                Gru::new(ps, &format!("{name}.l{l}.fwd"), din, hidden, rng)?,
                Gru::new(ps, &format!("{name}.l{l}.bwd"), din, hidden, rng)?,
            ));
        }
        Ok(Self { layers: out })
    }

    /// `[B, T, I]` → `[B, T, 2H]`.
    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (f, b) in &self.layers {
            let (yf, _) = f.forward(&h, false, mode)?;
            let (yb, _) = b.forward(&h, true, mode)?;
            h = Tensor::cat(&[&yf, &yb], 2)?;
        }
        Ok(h)
    }
}

/// Converts a tensor to `f64` host values in row-major order.
pub fn to_host(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn transposed_conv_lengths_are_exact_multiples() {
        let mut r = rng();
        let mut ps = ParamStore::new(DType::F32);
        for (k, s) in [(16, 1), (4, 2), (3, 3), (1, 1)] {
            let up = ConvTranspose1d::new(&mut ps, &format!("up{k}{s}"), 3, 2, k, s, None, &mut r)
                .unwrap();
            for l in [1, 5, 75] {
                let x = Tensor::ones((2, 3, l), DType::F32, &Device::Cpu).unwrap();
                let y = up.forward(&x, &Mode::eval()).unwrap();
                assert_eq!(y.dims(), &[2, 2, l * s], "k{k} s{s} l{l}");
            }
        }
    }

    #[test]
    fn transposed_conv_matches_scatter_definition() {
        // Zero-stuffed conv equals sum_i x[i] * w_flip placed at i*s - offset.
        let mut r = rng();
        let mut ps = ParamStore::new(DType::F64);
        let up = ConvTranspose1d::new(&mut ps, "up", 1, 1, 4, 2, None, &mut r).unwrap();
        let w = to_host(up.conv.weight().as_tensor()).unwrap();
        let bias = to_host(up.conv.b.as_ref().unwrap().as_tensor()).unwrap()[0];
        let x = [0.5, -1.0, 2.0];
        let y = to_host(
            &up.forward(
                &Tensor::new(&x[..], &Device::Cpu)
                    .unwrap()
                    .reshape((1, 1, 3))
                    .unwrap(),
                &Mode::eval(),
            )
            .unwrap(),
        )
        .unwrap();
        let mut want = vec![bias; 6];
        for (i, xi) in x.iter().enumerate() {
            for (j, wj) in w.iter().enumerate() {
                // stuffed index of x[i] is 2i, shifted by the left pad (2)
                let pos = 2 * i as isize + 2 - j as isize;
                if (0..6).contains(&pos) {
                    want[pos as usize] += xi * wj;
                }
            }
        }
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_normalizes_in_train_and_tracks_running_stats() {
        let mut r = rng();
        let mut ps = ParamStore::new(DType::F64);
        let bn = BatchNorm::new(&mut ps, "bn", 2, &mut r).unwrap();
        let x = Tensor::new(
            &[[[1.0f64, 3.0], [10.0, 10.0]], [[5.0, 7.0], [20.0, 20.0]]],
            &Device::Cpu,
        )
        .unwrap();
        let mut dr = rng();
        let y = bn.forward(&x, &Mode::train(&mut dr)).unwrap();
        let y = to_host(&y).unwrap();
        // channel 0 values 1,3,5,7: mean 4, var 5
        let want0 = (1.0 - 4.0) / (5.0f64 + 1e-5).sqrt();
        assert!((y[0] - want0).abs() < 1e-9);
        let rm = to_host(ps.get("bn.running_mean").unwrap().as_tensor()).unwrap();
        assert!((rm[0] - 0.4).abs() < 1e-12 && (rm[1] - 1.5).abs() < 1e-12);
        let rv = to_host(ps.get("bn.running_var").unwrap().as_tensor()).unwrap();
        assert!((rv[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let x = Tensor::ones((4, 8, 3), DType::F32, &Device::Cpu).unwrap();
        let y = channel_dropout(&x, 0.5, &mut Mode::eval()).unwrap();
        assert_eq!(to_host(&y).unwrap(), to_host(&x).unwrap());
        let (mut a, mut b) = (rng(), rng());
        let ya = to_host(&channel_dropout(&x, 0.5, &mut Mode::train(&mut a)).unwrap()).unwrap();
        let yb = to_host(&channel_dropout(&x, 0.5, &mut Mode::train(&mut b)).unwrap()).unwrap();
        assert_eq!(ya, yb);
        // whole channels share one mask value
        for ch in ya.chunks(3) {
            assert!(ch.iter().all(|&v| v == ch[0]) && (ch[0] == 0.0 || ch[0] == 2.0));
        }
    }

    #[test]
    fn odd_sizes_pool_in_floor_mode_with_correct_gradient() {
        let x = Var::from_vec(
            (0..2 * 9 * 9).map(|v| v as f64).collect::<Vec<_>>(),
            (1, 2, 9, 9),
            &Device::Cpu,
        )
        .unwrap();
        let y = max_pool_spatial(x.as_tensor(), 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 4]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = to_host(g.get(x.as_tensor()).unwrap()).unwrap();
        assert_eq!(g.iter().sum::<f64>(), 32.0);
        // the maximum of the first window is x[1,1]
        assert_eq!(g[10], 1.0);
        assert_eq!(g[8], 0.0);
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let x = Var::new(&[-2.0f64, 0.5, 3.0], &Device::Cpu).unwrap();
        let y = leaky_relu(x.as_tensor(), 0.1).unwrap();
        assert_eq!(to_host(&y).unwrap(), vec![-0.2, 0.5, 3.0]);
        let g = (y * Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let g = g.backward().unwrap();
        let g = to_host(g.get(x.as_tensor()).unwrap()).unwrap();
        assert!((g[0] - 0.1).abs() < 1e-12 && g[1] == 2.0 && g[2] == 3.0);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::new(&[[[1.0f32, 2.0, 3.0, 4.0]]], &Device::Cpu).unwrap();
        let y = to_host(&reflect_pad_right(&x, 2).unwrap()).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn gru_reverse_keeps_frame_alignment() {
        let mut r = rng();
        let mut ps = ParamStore::new(DType::F64);
        let g = Gru::new(&mut ps, "g", 2, 3, &mut r).unwrap();
        let x = Tensor::new(&[[[1.0f64, 0.0], [0.0, 1.0], [0.5, 0.5]]], &Device::Cpu).unwrap();
        let (yr, last) = g.forward(&x, true, &Mode::eval()).unwrap();
        // The final reverse state belongs to frame 0.
        assert_eq!(
            to_host(&yr.narrow(1, 0, 1).unwrap()).unwrap(),
            to_host(&last).unwrap()
        );
        // Reverse on x equals forward on time-flipped x, flipped back.
        let xf = Tensor::new(&[[[0.5f64, 0.5], [0.0, 1.0], [1.0, 0.0]]], &Device::Cpu).unwrap();
        let (yf, _) = g.forward(&xf, false, &Mode::eval()).unwrap();
        let a = to_host(&yr.narrow(1, 2, 1).unwrap()).unwrap();
        let b = to_host(&yf.narrow(1, 0, 1).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
