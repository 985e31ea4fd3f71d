//! 2-D convolution (cross-correlation) with stride, zero padding and dilation,
//! lowered to im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dParams { stride, padding, dilation }
    }

    /// Output extent along one spatial axis, or `None` if the dilated kernel
    /// does not fit inside the padded input.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (span <= padded).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    p: Conv2dParams,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Samples per GEMM so the column buffer stays around a few million entries.
    fn group(&self) -> usize {
        let per_sample = self.patch() * self.out_plane();
        (4_000_000 / per_sample.max(1)).clamp(1, self.n.max(1))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.padding == 0
    }
}

fn geometry<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<Geometry> {
    if input.ndim() != 4 {
        return Err(shape_err("conv2d", format!("input must be [N,C_in,H,W], got {:?}", input.shape())));
    }
    if weight.ndim() != 4 {
        return Err(shape_err("conv2d", format!("weight must be [C_out,C_in,kh,kw], got {:?}", weight.shape())));
    }
    if p.stride == 0 || p.dilation == 0 {
        return Err(shape_err("conv2d", format!("stride and dilation must be positive, got {p:?}")));
    }
    let [n, cin, h, w] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    let [cout, wcin, kh, kw] = [weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3)];
    if wcin != cin {
        return Err(shape_err("conv2d", format!("C_in: input has {cin} channels, weight expects {wcin}")));
    }
    if kh == 0 || kw == 0 {
        return Err(shape_err("conv2d", format!("kernel extent must be >= 1, got {kh}x{kw}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err("conv2d", format!("C_out: weight has {cout}, bias shape {:?}", b.shape())));
        }
    }
    let ho = p
        .output_extent(h, kh)
        .ok_or_else(|| shape_err("conv2d", format!("H: dilated kernel {kh} (dilation {}) exceeds padded height {}", p.dilation, h + 2 * p.padding)))?;
    let wo = p
        .output_extent(w, kw)
        .ok_or_else(|| shape_err("conv2d", format!("W: dilated kernel {kw} (dilation {}) exceeds padded width {}", p.dilation, w + 2 * p.padding)))?;
    Ok(Geometry { n, cin, h, w, cout, kh, kw, ho, wo, p })
}

/// Fills `cols` (`[C_in*kh*kw, group*Ho*Wo]`) from samples `first..first+group`.
fn im2col<T: Real>(x: &[T], g: &Geometry, first: usize, group: usize, cols: &mut [T]) {
    let plane = g.out_plane();
    let width = group * plane;
    let (s, pad, d) = (g.p.stride as isize, g.p.padding as isize, g.p.dilation as isize);
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for b in 0..group {
                    let src = &x[((first + b) * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = oh as isize * s - pad + ki as isize * d;
                        let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                        if ih < 0 || ih >= g.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (ow, o) in out_row.iter_mut().enumerate() {
                            let iw = ow as isize * s - pad + kj as isize * d;
                            *o = if iw < 0 || iw >= g.w as isize { T::zero() } else { src_row[iw as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the input-gradient buffer.
fn col2im<T: Real>(cols: &[T], g: &Geometry, first: usize, group: usize, dx: &mut [T]) {
    let plane = g.out_plane();
    let width = group * plane;
    let (s, pad, d) = (g.p.stride as isize, g.p.padding as isize, g.p.dilation as isize);
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * width..(row + 1) * width];
                for b in 0..group {
                    let dst = &mut dx[((first + b) * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = oh as isize * s - pad + ki as isize * d;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (ow, &v) in src[oh * g.wo..(oh + 1) * g.wo].iter().enumerate() {
                            let iw = ow as isize * s - pad + kj as isize * d;
                            if iw >= 0 && iw < g.w as isize {
                                dst_row[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[Cout, group*plane]` <-> `[group, Cout, plane]` block of the NCHW output.
fn scatter_group<T: Real>(src: &[T], out: &mut [T], g: &Geometry, first: usize, group: usize) {
    let plane = g.out_plane();
    for co in 0..g.cout {
        for b in 0..group {
            let s = &src[co * group * plane + b * plane..][..plane];
            out[((first + b) * g.cout + co) * plane..][..plane].copy_from_slice(s);
        }
    }
}

fn gather_group<T: Real>(grad: &[T], dst: &mut [T], g: &Geometry, first: usize, group: usize) {
    let plane = g.out_plane();
    for co in 0..g.cout {
        for b in 0..group {
            dst[co * group * plane + b * plane..][..plane]
                .copy_from_slice(&grad[((first + b) * g.cout + co) * plane..][..plane]);
        }
    }
}

fn forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &Geometry) -> Tensor<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let patch = g.patch();
    if g.is_pointwise() {
        for i in 0..g.n {
            let xs = &x.data()[i * g.cin * plane..(i + 1) * g.cin * plane];
            let os = &mut out[i * g.cout * plane..(i + 1) * g.cout * plane];
            T::gemm(false, false, g.cout, plane, patch, T::one(), w.data(), xs, T::zero(), os);
        }
    } else {
        let group = g.group();
        let mut cols = vec![T::zero(); patch * group * plane];
        let mut buf = vec![T::zero(); g.cout * group * plane];
        let mut first = 0;
        while first < g.n {
            let cur = group.min(g.n - first);
            let width = cur * plane;
            im2col(x.data(), g, first, cur, &mut cols[..patch * width]);
            T::gemm(false, false, g.cout, width, patch, T::one(), w.data(), &cols[..patch * width], T::zero(), &mut buf[..g.cout * width]);
            scatter_group(&buf[..g.cout * width], &mut out, g, first, cur);
            first += cur;
        }
    }
    if let Some(b) = b {
        for (chunk, idx) in out.chunks_mut(plane).zip(0..) {
            let bias = b.data()[idx % g.cout];
            for v in chunk {
                *v += bias;
            }
        }
    }
    Tensor::from_vec(&[g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients with respect to input and weight.
fn backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    g: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    if g.is_pointwise() {
        for i in 0..g.n {
            let gs = &grad.data()[i * g.cout * plane..(i + 1) * g.cout * plane];
            if let Some(dw) = dw.as_mut() {
                let xs = &x.data()[i * g.cin * plane..(i + 1) * g.cin * plane];
                T::gemm(false, true, g.cout, patch, plane, T::one(), gs, xs, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let ds = &mut dx[i * g.cin * plane..(i + 1) * g.cin * plane];
                T::gemm(true, false, patch, plane, g.cout, T::one(), w.data(), gs, T::zero(), ds);
            }
        }
    } else {
        let group = g.group();
        let mut cols = vec![T::zero(); patch * group * plane];
        let mut gbuf = vec![T::zero(); g.cout * group * plane];
        let mut first = 0;
        while first < g.n {
            let cur = group.min(g.n - first);
            let width = cur * plane;
            gather_group(grad.data(), &mut gbuf[..g.cout * width], g, first, cur);
            if let Some(dw) = dw.as_mut() {
                im2col(x.data(), g, first, cur, &mut cols[..patch * width]);
                T::gemm(false, true, g.cout, patch, width, T::one(), &gbuf[..g.cout * width], &cols[..patch * width], T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(true, false, patch, width, g.cout, T::one(), w.data(), &gbuf[..g.cout * width], T::zero(), &mut cols[..patch * width]);
                col2im(&cols[..patch * width], g, first, cur, dx);
            }
            first += cur;
        }
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d)),
        dw.map(|d| Tensor::from_vec(w.shape(), d)),
    )
}

/// Output spatial size for an input of `h x w` under kernel `kh x kw`.
pub fn conv2d_output_size(h: usize, w: usize, kh: usize, kw: usize, p: Conv2dParams) -> Option<(usize, usize)> {
    Some((p.output_extent(h, kh)?, p.output_extent(w, kw)?))
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, bias, params)?;
    Ok(forward(input, weight, bias, &g))
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, params: Conv2dParams) -> Result<Var> {
        let g = geometry(self.value(input), self.value(weight), bias.map(|b| self.value(b)), params)?;
        let out = forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)), &g);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push("conv2d", out, inputs, Box::new(move |args| {
            let (dx, dw) = backward(args.inputs[0], args.inputs[1], args.grad, &g, args.needs[0], args.needs[1]);
            let mut grads = vec![dx, dw];
            if args.inputs.len() == 3 {
                let plane = g.out_plane();
                let mut db = vec![T::zero(); g.cout];
                for (chunk, idx) in args.grad.data().chunks(plane).zip(0..) {
                    db[idx % g.cout] += chunk.iter().copied().sum::<T>();
                }
                grads.push(Some(Tensor::from_vec(&[g.cout], db)));
            }
            Ok(grads)
        })))
    }
}
