//! im2col-based convolution kernels. Two-dimensional convolutions are the
//! depth-1 case of the three-dimensional geometry.

use serde::{Deserialize, Serialize};

use super::float::{matmul, Float};

/// Kernel extent, stride and zero padding along (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn planar(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Spatial output extent of a forward convolution, `None` when the kernel
    /// does not fit inside the padded input.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Output extent of the transposed convolution: `(i-1)·s - 2p + k + op`.
    pub fn transpose_output_dims(
        &self,
        input: [usize; 3],
        output_padding: [usize; 3],
    ) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] == 0 || output_padding[a] >= self.stride[a].max(1) {
                return None;
            }
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a] + output_padding[a];
            if full <= 2 * self.padding[a] {
                return None;
            }
            out[a] = full - 2 * self.padding[a];
        }
        Some(out)
    }
}

#[inline]
fn source_index(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
}

/// Unfolds one `channels × input` volume into `col[channels·K, P]`.
pub(crate) fn im2col<T: Float>(
    x: &[T],
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeometry,
    output: [usize; 3],
    col: &mut [T],
) {
    let [id, ih, iw] = input;
    let [od, oh, ow] = output;
    let [kd, kh, kw] = geom.kernel;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = source_index(oz, kz, geom.stride[0], geom.padding[0], id);
                        for oy in 0..oh {
                            let iy = source_index(oy, ky, geom.stride[1], geom.padding[1], ih);
                            match (iz, iy) {
                                (Some(iz), Some(iy)) => {
                                    let line = &plane[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                    for ox in 0..ow {
                                        dst[o + ox] = match source_index(
                                            ox,
                                            kx,
                                            geom.stride[2],
                                            geom.padding[2],
                                            iw,
                                        ) {
                                            Some(ix) => line[ix],
                                            None => T::zero(),
                                        };
                                    }
                                }
                                _ => dst[o..o + ow].fill(T::zero()),
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back, accumulating into `x`.
pub(crate) fn col2im<T: Float>(
    col: &[T],
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeometry,
    output: [usize; 3],
    x: &mut [T],
) {
    let [id, ih, iw] = input;
    let [od, oh, ow] = output;
    let [kd, kh, kw] = geom.kernel;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = source_index(oz, kz, geom.stride[0], geom.padding[0], id);
                        for oy in 0..oh {
                            let iy = source_index(oy, ky, geom.stride[1], geom.padding[1], ih);
                            if let (Some(iz), Some(iy)) = (iz, iy) {
                                let base = (iz * ih + iy) * iw;
                                for ox in 0..ow {
                                    if let Some(ix) =
                                        source_index(ox, kx, geom.stride[2], geom.padding[2], iw)
                                    {
                                        plane[base + ix] += src[o + ox];
                                    }
                                }
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Shapes of one convolution call. For a transposed convolution `input` and
/// `output` still refer to the tensors flowing forward through the op.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeometry,
}

impl ConvShape {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }
}

/// `y = conv(x, w) + b`, weight laid out `[out_channels, in_channels·K]`.
pub(crate) fn conv_forward<T: Float>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    y: &mut [T],
) {
    let k = s.in_channels * s.geom.kernel_volume();
    let (pin, pout) = (s.in_volume(), s.out_volume());
    let mut col = vec![T::zero(); k * pout];
    for n in 0..s.batch {
        let xn = &x[n * s.in_channels * pin..(n + 1) * s.in_channels * pin];
        let yn = &mut y[n * s.out_channels * pout..(n + 1) * s.out_channels * pout];
        im2col(xn, s.in_channels, s.input, &s.geom, s.output, &mut col);
        matmul(s.out_channels, k, pout, w, false, &col, false, yn, false);
        if let Some(b) = b {
            for (co, &bias) in b.iter().enumerate() {
                yn[co * pout..(co + 1) * pout]
                    .iter_mut()
                    .for_each(|v| *v += bias);
            }
        }
    }
}

pub(crate) fn conv_backward<T: Float>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let k = s.in_channels * s.geom.kernel_volume();
    let (pin, pout) = (s.in_volume(), s.out_volume());
    let mut col = vec![T::zero(); k * pout];
    for n in 0..s.batch {
        let xn = &x[n * s.in_channels * pin..(n + 1) * s.in_channels * pin];
        let dyn_ = &dy[n * s.out_channels * pout..(n + 1) * s.out_channels * pout];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(xn, s.in_channels, s.input, &s.geom, s.output, &mut col);
            // dW[co, k] += dY[co, p] · col[k, p]^T
            matmul(s.out_channels, pout, k, dyn_, false, &col, true, dw, true);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, g) in db.iter_mut().enumerate() {
                *g += dyn_[co * pout..(co + 1) * pout].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcol[k, p] = W[co, k]^T · dY[co, p]
            matmul(
                k,
                s.out_channels,
                pout,
                w,
                true,
                dyn_,
                false,
                &mut col,
                false,
            );
            let dxn = &mut dx[n * s.in_channels * pin..(n + 1) * s.in_channels * pin];
            col2im(&col, s.in_channels, s.input, &s.geom, s.output, dxn);
        }
    }
}

/// Transposed convolution, weight laid out `[in_channels, out_channels·K]`.
/// The underlying forward convolution maps `output` back onto `input`.
pub(crate) fn conv_transpose_forward<T: Float>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    y: &mut [T],
) {
    let k = s.out_channels * s.geom.kernel_volume();
    let (pin, pout) = (s.in_volume(), s.out_volume());
    let mut col = vec![T::zero(); k * pin];
    for n in 0..s.batch {
        let xn = &x[n * s.in_channels * pin..(n + 1) * s.in_channels * pin];
        let yn = &mut y[n * s.out_channels * pout..(n + 1) * s.out_channels * pout];
        // col[k, p_in] = W[ci, k]^T · X[ci, p_in]
        matmul(k, s.in_channels, pin, w, true, xn, false, &mut col, false);
        yn.fill(T::zero());
        col2im(&col, s.out_channels, s.output, &s.geom, s.input, yn);
        if let Some(b) = b {
            for (co, &bias) in b.iter().enumerate() {
                yn[co * pout..(co + 1) * pout]
                    .iter_mut()
                    .for_each(|v| *v += bias);
            }
        }
    }
}

pub(crate) fn conv_transpose_backward<T: Float>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let k = s.out_channels * s.geom.kernel_volume();
    let (pin, pout) = (s.in_volume(), s.out_volume());
    let mut col = vec![T::zero(); k * pin];
    for n in 0..s.batch {
        let dyn_ = &dy[n * s.out_channels * pout..(n + 1) * s.out_channels * pout];
        if let Some(db) = db.as_deref_mut() {
            for (co, g) in db.iter_mut().enumerate() {
                *g += dyn_[co * pout..(co + 1) * pout].iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(dyn_, s.out_channels, s.output, &s.geom, s.input, &mut col);
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * s.in_channels * pin..(n + 1) * s.in_channels * pin];
            matmul(s.in_channels, k, pin, w, false, &col, false, dxn, true);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * s.in_channels * pin..(n + 1) * s.in_channels * pin];
            matmul(s.in_channels, pin, k, xn, false, &col, true, dw, true);
        }
    }
}
