//! Convolution kernels: dense (im2col + GEMM), depthwise, and per-pixel
//! dynamic filtering. All are cross-correlations with zero padding.

use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{arg_err, shape_err, Result};

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn output_extent(op: &'static str, name: &str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return shape_err(
            op,
            format!("{name} {size} with padding {pad} is smaller than kernel {k}; output {name} would not be a positive integer"),
        );
    }
    Ok((padded - k) / stride + 1)
}

/// Unfolds one image `[cin, h, w]` into `[cin*k*k, ho*wo]`.
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * p];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `[cin*k*k, ho*wo]` back onto `[cin, h, w]`.
fn col2im_add(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let p = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution `[N,Cin,H,W] * [Cout,Cin,k,k] -> [N,Cout,H',W']`.
///
/// Output extent is `floor((H + 2*padding - k) / stride) + 1`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (cout, wcin, kh, kw) = weight.dims4(OP)?;
    if kh != kw || kh % 2 == 0 {
        return arg_err(OP, format!("kernel must be square with odd size, got {kh}x{kw}"));
    }
    if stride == 0 {
        return arg_err(OP, "stride must be at least 1");
    }
    if wcin != cin {
        return shape_err(
            OP,
            format!("weight expects {wcin} input channels but input has {cin} (input {:?}, weight {:?})", input.shape(), weight.shape()),
        );
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return shape_err(OP, format!("bias shape {:?} does not match {cout} output channels", b.shape()));
        }
    }
    let k = kh;
    let ho = output_extent(OP, "height", h, k, stride, padding)?;
    let wo = output_extent(OP, "width", w, k, stride, padding)?;
    let geo = Geometry {
        cin,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho,
        wo,
    };
    let (kk, p) = (geo.patch_len(), geo.out_len());

    let mut out = vec![0.0; n * cout * p];
    {
        let x = input.data();
        let wt = weight.data();
        for b in 0..n {
            let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
            let ob = &mut out[b * cout * p..(b + 1) * cout * p];
            if geo.is_pointwise() {
                gemm(cout, kk, p, Mat::rows(&wt, kk), Mat::rows(xb, p), 0.0, ob);
            } else {
                let cols = im2col(xb, &geo);
                gemm(cout, kk, p, Mat::rows(&wt, kk), Mat::rows(&cols, p), 0.0, ob);
            }
        }
        if let Some(bias) = bias {
            let bv = bias.data();
            for (i, plane) in out.chunks_mut(p).enumerate() {
                let bo = bv[i % cout];
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
    }

    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        OP,
        vec![n, cout, ho, wo],
        out,
        inputs,
        Box::new(move |ins, _, g| {
            let x = ins[0].data();
            let wt = ins[1].data();
            let want_x = ins[0].requires_grad();
            let want_w = ins[1].requires_grad();
            let mut gx = want_x.then(|| vec![0.0; n * cin * h * w]);
            let mut gw = want_w.then(|| vec![0.0; cout * kk]);
            for b in 0..n {
                let gb = &g[b * cout * p..(b + 1) * cout * p];
                let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
                if let Some(gw) = gw.as_mut() {
                    if geo.is_pointwise() {
                        gemm(cout, p, kk, Mat::rows(gb, p), Mat::transposed(xb, p), 1.0, gw);
                    } else {
                        let cols = im2col(xb, &geo);
                        gemm(cout, p, kk, Mat::rows(gb, p), Mat::transposed(&cols, p), 1.0, gw);
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * cin * h * w..(b + 1) * cin * h * w];
                    if geo.is_pointwise() {
                        gemm(kk, cout, p, Mat::transposed(&wt, kk), Mat::rows(gb, p), 1.0, gxb);
                    } else {
                        let mut gcols = vec![0.0; kk * p];
                        gemm(kk, cout, p, Mat::transposed(&wt, kk), Mat::rows(gb, p), 0.0, &mut gcols);
                        col2im_add(&gcols, &geo, gxb);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if ins.len() == 3 {
                grads.push(ins[2].requires_grad().then(|| {
                    let mut gbias = vec![0.0; cout];
                    for (i, plane) in g.chunks(p).enumerate() {
                        gbias[i % cout] += plane.iter().sum::<f64>();
                    }
                    gbias
                }));
            }
            grads
        }),
    ))
}

/// Per-channel convolution with weight `[C,1,k,k]`, stride 1, zero padding.
pub fn depthwise_conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    const OP: &str = "depthwise_conv2d";
    let (n, c, h, w) = input.dims4(OP)?;
    let (wc, one, kh, kw) = weight.dims4(OP)?;
    if wc != c || one != 1 {
        return shape_err(OP, format!("weight {:?} does not match {c} channels", weight.shape()));
    }
    if kh != kw || kh % 2 == 0 {
        return arg_err(OP, format!("kernel must be square with odd size, got {kh}x{kw}"));
    }
    if let Some(b) = bias {
        if b.shape() != [c] {
            return shape_err(OP, format!("bias shape {:?} does not match {c} channels", b.shape()));
        }
    }
    let k = kh;
    let ho = output_extent(OP, "height", h, k, 1, padding)?;
    let wo = output_extent(OP, "width", w, k, 1, padding)?;
    let pad = padding as isize;

    let visit = move |ci: usize, f: &mut dyn FnMut(usize, usize, usize)| {
        // f(output index within plane, input index within plane, kernel index)
        for oy in 0..ho {
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..wo {
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            f(oy * wo + ox, iy as usize * w + ix as usize, (ci * k + ky) * k + kx);
                        }
                    }
                }
            }
        }
    };

    let mut out = vec![0.0; n * c * ho * wo];
    {
        let x = input.data();
        let wt = weight.data();
        let bv = bias.map(|b| b.data().clone());
        for b in 0..n {
            for ci in 0..c {
                let plane = b * c + ci;
                let xs = &x[plane * h * w..(plane + 1) * h * w];
                let os = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
                if let Some(bv) = &bv {
                    os.iter_mut().for_each(|v| *v = bv[ci]);
                }
                visit(ci, &mut |o, i, kidx| os[o] += wt[kidx] * xs[i]);
            }
        }
    }

    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        OP,
        vec![n, c, ho, wo],
        out,
        inputs,
        Box::new(move |ins, _, g| {
            let x = ins[0].data();
            let wt = ins[1].data();
            let mut gx = vec![0.0; n * c * h * w];
            let mut gw = vec![0.0; c * k * k];
            for b in 0..n {
                for ci in 0..c {
                    let plane = b * c + ci;
                    let xs = &x[plane * h * w..(plane + 1) * h * w];
                    let gs = &g[plane * ho * wo..(plane + 1) * ho * wo];
                    let gxs = &mut gx[plane * h * w..(plane + 1) * h * w];
                    let gw_ref = &mut gw;
                    visit(ci, &mut |o, i, kidx| {
                        gxs[i] += wt[kidx] * gs[o];
                        gw_ref[kidx] += xs[i] * gs[o];
                    });
                }
            }
            let mut grads = vec![ins[0].requires_grad().then_some(gx), ins[1].requires_grad().then_some(gw)];
            if ins.len() == 3 {
                grads.push(ins[2].requires_grad().then(|| {
                    let mut gb = vec![0.0; c];
                    for (i, plane) in g.chunks(ho * wo).enumerate() {
                        gb[i % c] += plane.iter().sum::<f64>();
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}

/// Per-pixel filtering: every output pixel `(y, x)` is the `k x k`
/// neighbourhood of `feature` around `(y, x)` weighted by that pixel's own
/// kernel from `kernels: [N, k*k, H, W]`. The kernel is shared across channels.
pub fn per_pixel_filter(feature: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    const OP: &str = "per_pixel_filter";
    let (n, c, h, w) = feature.dims4(OP)?;
    let (kn, kk, kh, kw) = kernels.dims4(OP)?;
    if kn != n || kh != h || kw != w {
        return shape_err(
            OP,
            format!("kernel field {:?} does not match feature {:?}", kernels.shape(), feature.shape()),
        );
    }
    let k = (kk as f64).sqrt().round() as usize;
    if k * k != kk || k % 2 == 0 {
        return arg_err(OP, format!("kernel field has {kk} maps; expected an odd square"));
    }
    let r = (k / 2) as isize;
    let hw = h * w;

    // f(output pixel, input pixel, kernel map index)
    let visit = move |f: &mut dyn FnMut(usize, usize, usize)| {
        for y in 0..h {
            for x in 0..w {
                for ky in 0..k {
                    let iy = y as isize + ky as isize - r;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - r;
                        if ix >= 0 && ix < w as isize {
                            f(y * w + x, iy as usize * w + ix as usize, ky * k + kx);
                        }
                    }
                }
            }
        }
    };

    let mut out = vec![0.0; n * c * hw];
    {
        let fd = feature.data();
        let kd = kernels.data();
        for b in 0..n {
            let kb = &kd[b * kk * hw..(b + 1) * kk * hw];
            for ci in 0..c {
                let plane = b * c + ci;
                let fs = &fd[plane * hw..(plane + 1) * hw];
                let os = &mut out[plane * hw..(plane + 1) * hw];
                visit(&mut |o, i, j| os[o] += kb[j * hw + o] * fs[i]);
            }
        }
    }

    Ok(Tensor::from_op(
        OP,
        vec![n, c, h, w],
        out,
        vec![feature.clone(), kernels.clone()],
        Box::new(move |ins, _, g| {
            let fd = ins[0].data();
            let kd = ins[1].data();
            let mut gf = vec![0.0; n * c * hw];
            let mut gk = vec![0.0; n * kk * hw];
            for b in 0..n {
                let kb = &kd[b * kk * hw..(b + 1) * kk * hw];
                let gkb = &mut gk[b * kk * hw..(b + 1) * kk * hw];
                for ci in 0..c {
                    let plane = b * c + ci;
                    let fs = &fd[plane * hw..(plane + 1) * hw];
                    let gs = &g[plane * hw..(plane + 1) * hw];
                    let gfs = &mut gf[plane * hw..(plane + 1) * hw];
                    visit(&mut |o, i, j| {
                        gfs[i] += kb[j * hw + o] * gs[o];
                        gkb[j * hw + o] += fs[i] * gs[o];
                    });
                }
            }
            vec![ins[0].requires_grad().then_some(gf), ins[1].requires_grad().then_some(gk)]
        }),
    ))
}
