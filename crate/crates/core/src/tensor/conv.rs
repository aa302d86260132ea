//! 3D convolution and transposed convolution via chunked im2col + GEMM.
//!
//! Layouts: activations `[N, C, D, H, W]`, conv weights
//! `[C_out, C_in, k, k, k]`, transposed-conv weights `[C_in, C_out, k, k, k]`.
//! Both operators share one column geometry: a transposed convolution is
//! the input-adjoint of the convolution that maps its output back to its
//! input, so forward of one is the backward of the other.

use super::gemm::{gemm, Strides};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the number of scalars in one column buffer.
const COLUMN_BUDGET: usize = 1 << 20;

const AXES: [&str; 3] = ["D", "H", "W"];

/// `floor((d + 2*pad - k) / stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_dim(d: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || d + 2 * pad < k {
        return None;
    }
    Some((d + 2 * pad - k) / stride + 1)
}

/// `(d - 1) * stride + k`.
pub fn conv_transpose_output_dim(d: usize, k: usize, stride: usize) -> usize {
    (d - 1) * stride + k
}

/// Geometry of a convolution between an "image" side (the conv input) and a
/// "column" side (the conv output).
#[derive(Clone, Copy, Debug)]
struct ColumnGeometry {
    channels: usize,
    image: [usize; 3],
    out: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
}

impl ColumnGeometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn out_volume(&self) -> usize {
        self.out.iter().product()
    }

    fn image_volume(&self) -> usize {
        self.image.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output depth planes processed per column buffer.
    fn chunk_planes(&self) -> usize {
        (COLUMN_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.out[0])
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.chunk_planes();
        let depth = self.out[0];
        (0..depth)
            .step_by(step)
            .map(move |z0| (z0, (z0 + step).min(depth)))
    }

    /// Valid output range along one axis for kernel offset `koff`:
    /// outputs `o` with `0 <= o*stride + koff - pad < extent`.
    fn valid_range(&self, koff: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > koff {
            (self.pad - koff).div_ceil(s)
        } else {
            0
        };
        let hi = if extent + self.pad > koff {
            (extent + self.pad - koff).div_ceil(s).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Fills `cols` (rows × pc, row-major) for output planes `z0..z1`.
    fn im2col(&self, src: &[Real], z0: usize, z1: usize, cols: &mut [Real]) {
        let [d, h, w] = self.image;
        let [_, oh, ow] = self.out;
        let (k, s, pad) = (self.k, self.stride, self.pad);
        let plane = self.plane();
        let pc = (z1 - z0) * plane;
        let vol = self.image_volume();
        let mut row = 0;
        for c in 0..self.channels {
            let src_c = &src[c * vol..(c + 1) * vol];
            for kd in 0..k {
                for kh in 0..k {
                    let (y_lo, y_hi) = self.valid_range(kh, h, oh);
                    for kw in 0..k {
                        let (x_lo, x_hi) = self.valid_range(kw, w, ow);
                        let dst_row = &mut cols[row * pc..(row + 1) * pc];
                        row += 1;
                        for oz in z0..z1 {
                            let seg = &mut dst_row[(oz - z0) * plane..(oz - z0 + 1) * plane];
                            let iz = (oz * s + kd) as isize - pad as isize;
                            if iz < 0 || iz as usize >= d {
                                seg.fill(0.0);
                                continue;
                            }
                            let src_z = &src_c[iz as usize * h * w..(iz as usize + 1) * h * w];
                            for oy in 0..oh {
                                let out_row = &mut seg[oy * ow..(oy + 1) * ow];
                                if oy < y_lo || oy >= y_hi {
                                    out_row.fill(0.0);
                                    continue;
                                }
                                let iy = oy * s + kh - pad;
                                let src_row = &src_z[iy * w..(iy + 1) * w];
                                out_row[..x_lo].fill(0.0);
                                out_row[x_hi..].fill(0.0);
                                if s == 1 {
                                    let off = x_lo + kw - pad;
                                    out_row[x_lo..x_hi]
                                        .copy_from_slice(&src_row[off..off + (x_hi - x_lo)]);
                                } else {
                                    for ox in x_lo..x_hi {
                                        out_row[ox] = src_row[ox * s + kw - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` (rows × pc) for output planes `z0..z1` into `dst`.
    fn col2im_add(&self, cols: &[Real], z0: usize, z1: usize, dst: &mut [Real]) {
        let [d, h, w] = self.image;
        let [_, oh, ow] = self.out;
        let (k, s, pad) = (self.k, self.stride, self.pad);
        let plane = self.plane();
        let pc = (z1 - z0) * plane;
        let vol = self.image_volume();
        let mut row = 0;
        for c in 0..self.channels {
            let dst_c = &mut dst[c * vol..(c + 1) * vol];
            for kd in 0..k {
                for kh in 0..k {
                    let (y_lo, y_hi) = self.valid_range(kh, h, oh);
                    for kw in 0..k {
                        let (x_lo, x_hi) = self.valid_range(kw, w, ow);
                        let src_row = &cols[row * pc..(row + 1) * pc];
                        row += 1;
                        for oz in z0..z1 {
                            let iz = (oz * s + kd) as isize - pad as isize;
                            if iz < 0 || iz as usize >= d {
                                continue;
                            }
                            let seg = &src_row[(oz - z0) * plane..(oz - z0 + 1) * plane];
                            let dst_z = &mut dst_c[iz as usize * h * w..(iz as usize + 1) * h * w];
                            for oy in y_lo..y_hi {
                                let iy = oy * s + kh - pad;
                                let dst_row = &mut dst_z[iy * w..(iy + 1) * w];
                                let in_row = &seg[oy * ow..(oy + 1) * ow];
                                if s == 1 {
                                    let off = x_lo + kw - pad;
                                    dst_row[off..off + (x_hi - x_lo)]
                                        .iter_mut()
                                        .zip(&in_row[x_lo..x_hi])
                                        .for_each(|(a, b)| *a += *b);
                                } else {
                                    for ox in x_lo..x_hi {
                                        dst_row[ox * s + kw - pad] += in_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn cubic_kernel(weight: &Tensor, name: &str) -> Result<usize> {
    let ws = weight.shape();
    if ws.len() != 5 {
        return Err(Error::shape(format!(
            "{name} weight must be 5-D, got {ws:?}"
        )));
    }
    if ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::shape(format!(
            "{name} kernel must be cubic, got {:?}",
            &ws[2..]
        )));
    }
    Ok(ws[2])
}

fn five_d(input: &Tensor, name: &str) -> Result<[usize; 5]> {
    let s = input.shape();
    if s.len() != 5 {
        return Err(Error::shape(format!(
            "{name} input must be [N, C, D, H, W], got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

fn bias_sum(grad: &[Real], batch: usize, channels: usize, vol: usize) -> Vec<Real> {
    let mut gb = vec![0.0; channels];
    for b in 0..batch {
        for (c, g) in gb.iter_mut().enumerate() {
            let start = (b * channels + c) * vol;
            *g += grad[start..start + vol].iter().sum::<Real>();
        }
    }
    gb
}

fn add_bias(out: &mut [Real], bias: &[Real], vol: usize) {
    for (ch, chunk) in out.chunks_mut(vol).enumerate() {
        let b = bias[ch % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// 3D convolution with zero padding.
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [n, cin, d, h, w] = five_d(input, "conv3d")?;
    let k = cubic_kernel(weight, "conv3d")?;
    let cout = weight.shape()[0];
    if weight.shape()[1] != cin {
        return Err(Error::shape(format!(
            "conv3d axis C: input has {cin} channels but weight expects {}",
            weight.shape()[1]
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "conv3d bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv3d stride must be positive"));
    }
    let mut out = [0usize; 3];
    for (i, &extent) in [d, h, w].iter().enumerate() {
        out[i] = conv_output_dim(extent, k, stride, padding).ok_or_else(|| {
            Error::shape(format!(
                "conv3d axis {}: extent {extent} + 2*padding {padding} is smaller than kernel {k}",
                AXES[i]
            ))
        })?;
    }
    let geom = ColumnGeometry {
        channels: cin,
        image: [d, h, w],
        out,
        k,
        stride,
        pad: padding,
    };
    let rows = geom.rows();
    let ivol = geom.image_volume();
    let ovol = geom.out_volume();
    let plane = geom.plane();

    let x = input.values();
    let wv = weight.values();
    let mut y = vec![0.0; n * cout * ovol];
    let mut cols = Vec::new();
    for b in 0..n {
        let xb = &x[b * cin * ivol..(b + 1) * cin * ivol];
        let yb = &mut y[b * cout * ovol..(b + 1) * cout * ovol];
        if geom.is_pointwise() {
            gemm(
                cout,
                cin,
                ovol,
                wv,
                Strides::row_major(cin),
                xb,
                Strides::row_major(ivol),
                0.0,
                yb,
                Strides::row_major(ovol),
            );
            continue;
        }
        for (z0, z1) in geom.chunks() {
            let pc = (z1 - z0) * plane;
            cols.resize(rows * pc, 0.0);
            geom.im2col(xb, z0, z1, &mut cols);
            gemm(
                cout,
                rows,
                pc,
                wv,
                Strides::row_major(rows),
                &cols,
                Strides::row_major(pc),
                0.0,
                &mut yb[z0 * plane..],
                Strides::row_major(ovol),
            );
        }
    }
    add_bias(&mut y, bias.values(), ovol);

    let shape = vec![n, cout, out[0], out[1], out[2]];
    Ok(Tensor::from_op(
        "conv3d",
        shape,
        y,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |ctx| {
            let g = ctx.grad;
            let x = ctx.parents[0].values();
            let wv = ctx.parents[1].values();
            let (need_x, need_w, need_b) = (ctx.needs(0), ctx.needs(1), ctx.needs(2));
            let gb = need_b.then(|| bias_sum(g, n, cout, ovol));
            let mut gw = need_w.then(|| vec![0.0; cout * rows]);
            let mut gx = need_x.then(|| vec![0.0; n * cin * ivol]);
            let mut cols = Vec::new();
            for b in 0..n {
                let xb = &x[b * cin * ivol..(b + 1) * cin * ivol];
                let gbatch = &g[b * cout * ovol..(b + 1) * cout * ovol];
                if geom.is_pointwise() {
                    if let Some(gw) = gw.as_mut() {
                        gemm(
                            cout,
                            ovol,
                            cin,
                            gbatch,
                            Strides::row_major(ovol),
                            xb,
                            Strides::transposed(ivol),
                            1.0,
                            gw,
                            Strides::row_major(cin),
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxb = &mut gx[b * cin * ivol..(b + 1) * cin * ivol];
                        gemm(
                            cin,
                            cout,
                            ovol,
                            wv,
                            Strides::transposed(cin),
                            gbatch,
                            Strides::row_major(ovol),
                            0.0,
                            gxb,
                            Strides::row_major(ivol),
                        );
                    }
                    continue;
                }
                for (z0, z1) in geom.chunks() {
                    let pc = (z1 - z0) * plane;
                    let gchunk = &gbatch[z0 * plane..];
                    cols.resize(rows * pc, 0.0);
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(xb, z0, z1, &mut cols);
                        gemm(
                            cout,
                            pc,
                            rows,
                            gchunk,
                            Strides::row_major(ovol),
                            &cols,
                            Strides::transposed(pc),
                            1.0,
                            gw,
                            Strides::row_major(rows),
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            rows,
                            cout,
                            pc,
                            wv,
                            Strides::transposed(rows),
                            gchunk,
                            Strides::row_major(ovol),
                            0.0,
                            &mut cols,
                            Strides::row_major(pc),
                        );
                        geom.col2im_add(
                            &cols,
                            z0,
                            z1,
                            &mut gx[b * cin * ivol..(b + 1) * cin * ivol],
                        );
                    }
                }
            }
            vec![gx, gw, gb]
        }),
    ))
}

/// 3D transposed convolution (no padding); the input-adjoint of [`conv3d`].
pub fn conv_transpose3d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let [n, cin, d, h, w] = five_d(input, "conv_transpose3d")?;
    let k = cubic_kernel(weight, "conv_transpose3d")?;
    if weight.shape()[0] != cin {
        return Err(Error::shape(format!(
            "conv_transpose3d axis C: input has {cin} channels but weight expects {}",
            weight.shape()[0]
        )));
    }
    let cout = weight.shape()[1];
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "conv_transpose3d bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv_transpose3d stride must be positive"));
    }
    let image = [
        conv_transpose_output_dim(d, k, stride),
        conv_transpose_output_dim(h, k, stride),
        conv_transpose_output_dim(w, k, stride),
    ];
    let geom = ColumnGeometry {
        channels: cout,
        image,
        out: [d, h, w],
        k,
        stride,
        pad: 0,
    };
    let rows = geom.rows();
    let ivol = geom.out_volume();
    let ovol = geom.image_volume();
    let plane = geom.plane();

    let x = input.values();
    let wv = weight.values();
    let mut y = vec![0.0; n * cout * ovol];
    let mut cols = Vec::new();
    for b in 0..n {
        let xb = &x[b * cin * ivol..(b + 1) * cin * ivol];
        let yb = &mut y[b * cout * ovol..(b + 1) * cout * ovol];
        for (z0, z1) in geom.chunks() {
            let pc = (z1 - z0) * plane;
            cols.resize(rows * pc, 0.0);
            gemm(
                rows,
                cin,
                pc,
                wv,
                Strides::transposed(rows),
                &xb[z0 * plane..],
                Strides::row_major(ivol),
                0.0,
                &mut cols,
                Strides::row_major(pc),
            );
            geom.col2im_add(&cols, z0, z1, yb);
        }
    }
    add_bias(&mut y, bias.values(), ovol);

    let shape = vec![n, cout, image[0], image[1], image[2]];
    Ok(Tensor::from_op(
        "conv_transpose3d",
        shape,
        y,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |ctx| {
            let g = ctx.grad;
            let x = ctx.parents[0].values();
            let wv = ctx.parents[1].values();
            let (need_x, need_w, need_b) = (ctx.needs(0), ctx.needs(1), ctx.needs(2));
            let gb = need_b.then(|| bias_sum(g, n, cout, ovol));
            let mut gw = need_w.then(|| vec![0.0; cin * rows]);
            let mut gx = need_x.then(|| vec![0.0; n * cin * ivol]);
            if need_x || need_w {
                let mut cols = Vec::new();
                for b in 0..n {
                    let xb = &x[b * cin * ivol..(b + 1) * cin * ivol];
                    let gbatch = &g[b * cout * ovol..(b + 1) * cout * ovol];
                    for (z0, z1) in geom.chunks() {
                        let pc = (z1 - z0) * plane;
                        cols.resize(rows * pc, 0.0);
                        geom.im2col(gbatch, z0, z1, &mut cols);
                        if let Some(gx) = gx.as_mut() {
                            let gxb = &mut gx[b * cin * ivol..(b + 1) * cin * ivol];
                            gemm(
                                cin,
                                rows,
                                pc,
                                wv,
                                Strides::row_major(rows),
                                &cols,
                                Strides::row_major(pc),
                                0.0,
                                &mut gxb[z0 * plane..],
                                Strides::row_major(ivol),
                            );
                        }
                        if let Some(gw) = gw.as_mut() {
                            gemm(
                                cin,
                                pc,
                                rows,
                                &xb[z0 * plane..],
                                Strides::row_major(ivol),
                                &cols,
                                Strides::transposed(pc),
                                1.0,
                                gw,
                                Strides::row_major(rows),
                            );
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        }),
    ))
}
