//! Strided convolution and its exact adjoint, for 2D images and 3D volumes.
//!
//! Layout is channels-last: images are (batch, h, w, c) and volumes are
//! (batch, d, h, w, c). Padding follows the "same" rule: the output extent
//! of a forward convolution is ceil(input / stride), and the total padding
//! max((out-1)*stride + k - in, 0) is split with the smaller half in front.
//!
//! A transposed convolution is *defined* as the adjoint of the forward
//! convolution that maps its output extent back to its input extent, with
//! the same kernel tensor. The three primitives below (forward, input
//! cotangent, kernel cotangent) therefore serve double duty: the forward
//! pass of a transposed layer is the input-cotangent of the matching
//! forward layer and vice versa.

use super::{Tensor, TensorError};

/// Geometry of one convolution, stored from the viewpoint of the underlying
/// forward map: `wide` is its input extent, `narrow = ceil(wide / stride)`
/// its output extent. `transposed` flips which side the layer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub rank: usize,
    pub kernel: usize,
    pub stride: usize,
    pub transposed: bool,
    pub batch: usize,
    /// Channels on the wide side (input of the forward map).
    pub wide_ch: usize,
    /// Channels on the narrow side (output of the forward map).
    pub narrow_ch: usize,
    pub wide: Vec<usize>,
    pub narrow: Vec<usize>,
    pub pad: Vec<usize>,
}

impl ConvSpec {
    /// Derives the geometry for a layer consuming `input_shape` with the
    /// given kernel tensor shape. Kernels are (k.., wide_ch, narrow_ch);
    /// a forward layer reads its input channels at position `rank`, a
    /// transposed layer at position `rank + 1`.
    pub fn for_layer(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        transposed: bool,
    ) -> Result<Self, TensorError> {
        if input_shape.len() < 4 || input_shape.len() > 5 {
            return Err(TensorError::invalid(format!(
                "convolution input must be rank 4 or 5, got shape {input_shape:?}"
            )));
        }
        let rank = input_shape.len() - 2;
        if stride == 0 {
            return Err(TensorError::invalid("convolution stride must be >= 1"));
        }
        if kernel_shape.len() != rank + 2 {
            return Err(TensorError::ShapeMismatch {
                context: "conv kernel rank",
                expected: vec![rank + 2],
                got: kernel_shape.to_vec(),
            });
        }
        let kernel = kernel_shape[0];
        if kernel == 0 || kernel_shape[..rank].iter().any(|&d| d != kernel) {
            return Err(TensorError::invalid(format!(
                "kernel spatial extents must be equal and positive, got {kernel_shape:?}"
            )));
        }
        let batch = input_shape[0];
        let in_ch = *input_shape.last().unwrap();
        let spatial = &input_shape[1..1 + rank];
        if batch == 0 || in_ch == 0 || spatial.contains(&0) {
            return Err(TensorError::invalid(format!(
                "convolution input dimensions must be positive, got {input_shape:?}"
            )));
        }
        let (wide_ch, narrow_ch, wide, narrow): (usize, usize, Vec<usize>, Vec<usize>) =
            if transposed {
                if kernel_shape[rank + 1] != in_ch {
                    return Err(TensorError::ShapeMismatch {
                        context: "transposed conv input channels",
                        expected: vec![kernel_shape[rank + 1]],
                        got: vec![in_ch],
                    });
                }
                let wide: Vec<usize> = spatial.iter().map(|&d| d * stride).collect();
                (kernel_shape[rank], in_ch, wide, spatial.to_vec())
            } else {
                if kernel_shape[rank] != in_ch {
                    return Err(TensorError::ShapeMismatch {
                        context: "conv input channels",
                        expected: vec![kernel_shape[rank]],
                        got: vec![in_ch],
                    });
                }
                let narrow: Vec<usize> = spatial.iter().map(|&d| d.div_ceil(stride)).collect();
                (in_ch, kernel_shape[rank + 1], spatial.to_vec(), narrow)
            };
        let pad = wide
            .iter()
            .zip(&narrow)
            .map(|(&w, &n)| ((n - 1) * stride + kernel).saturating_sub(w) / 2)
            .collect();
        Ok(ConvSpec {
            rank,
            kernel,
            stride,
            transposed,
            batch,
            wide_ch,
            narrow_ch,
            wide,
            narrow,
            pad,
        })
    }

    pub fn in_channels(&self) -> usize {
        if self.transposed {
            self.narrow_ch
        } else {
            self.wide_ch
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.transposed {
            self.wide_ch
        } else {
            self.narrow_ch
        }
    }

    /// Shape the layer consumes, batch and channels included.
    pub fn input_shape(&self) -> Vec<usize> {
        let spatial = if self.transposed { &self.narrow } else { &self.wide };
        let mut s = vec![self.batch];
        s.extend_from_slice(spatial);
        s.push(self.in_channels());
        s
    }

    /// Shape the layer produces, batch and channels included.
    pub fn output_shape(&self) -> Vec<usize> {
        let spatial = if self.transposed { &self.wide } else { &self.narrow };
        let mut s = vec![self.batch];
        s.extend_from_slice(spatial);
        s.push(self.out_channels());
        s
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        let mut s = vec![self.kernel; self.rank];
        s.push(self.wide_ch);
        s.push(self.narrow_ch);
        s
    }

    fn wide_len(&self) -> usize {
        self.batch * self.wide.iter().product::<usize>() * self.wide_ch
    }

    fn narrow_len(&self) -> usize {
        self.batch * self.narrow.iter().product::<usize>() * self.narrow_ch
    }

    /// Forward map, wide side to narrow side, no bias.
    pub fn apply_forward(&self, wide: &[f64], kernels: &[f64]) -> Vec<f64> {
        debug_assert_eq!(wide.len(), self.wide_len());
        let mut out = vec![0.0; self.narrow_len()];
        match self.rank {
            2 => self.forward_2d(wide, kernels, &mut out),
            _ => self.forward_3d(wide, kernels, &mut out),
        }
        out
    }

    /// Adjoint of [`Self::apply_forward`] in its first argument: scatters a
    /// narrow-side cotangent back onto the wide side.
    pub fn apply_adjoint(&self, narrow: &[f64], kernels: &[f64]) -> Vec<f64> {
        debug_assert_eq!(narrow.len(), self.narrow_len());
        let mut out = vec![0.0; self.wide_len()];
        match self.rank {
            2 => self.adjoint_2d(narrow, kernels, &mut out),
            _ => self.adjoint_3d(narrow, kernels, &mut out),
        }
        out
    }

    /// Cotangent of the kernel tensor given both sides of the forward map.
    pub fn kernel_cotangent(&self, wide: &[f64], narrow: &[f64]) -> Vec<f64> {
        debug_assert_eq!(wide.len(), self.wide_len());
        debug_assert_eq!(narrow.len(), self.narrow_len());
        let mut out = vec![0.0; self.kernel_shape().iter().product()];
        match self.rank {
            2 => self.kernel_cotangent_2d(wide, narrow, &mut out),
            _ => self.kernel_cotangent_3d(wide, narrow, &mut out),
        }
        out
    }

    fn forward_2d(&self, wide: &[f64], kernels: &[f64], out: &mut [f64]) {
        let (ci, co, k, s) = (self.wide_ch, self.narrow_ch, self.kernel, self.stride);
        let (wh, ww) = (self.wide[0], self.wide[1]);
        let (nh, nw) = (self.narrow[0], self.narrow[1]);
        let (ph, pw) = (self.pad[0], self.pad[1]);
        for b in 0..self.batch {
            let wbase = b * wh * ww * ci;
            let nbase = b * nh * nw * co;
            for oy in 0..nh {
                for ox in 0..nw {
                    let acc = &mut out[nbase + (oy * nw + ox) * co..][..co];
                    for ky in 0..k {
                        let iy = oy * s + ky;
                        if iy < ph || iy - ph >= wh {
                            continue;
                        }
                        let iy = iy - ph;
                        for kx in 0..k {
                            let ix = ox * s + kx;
                            if ix < pw || ix - pw >= ww {
                                continue;
                            }
                            let ix = ix - pw;
                            let pix = &wide[wbase + (iy * ww + ix) * ci..][..ci];
                            let slab = &kernels[(ky * k + kx) * ci * co..][..ci * co];
                            for (c, &v) in pix.iter().enumerate() {
                                let row = &slab[c * co..][..co];
                                for (a, &w) in acc.iter_mut().zip(row) {
                                    *a += v * w;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn adjoint_2d(&self, narrow: &[f64], kernels: &[f64], out: &mut [f64]) {
        let (ci, co, k, s) = (self.wide_ch, self.narrow_ch, self.kernel, self.stride);
        let (wh, ww) = (self.wide[0], self.wide[1]);
        let (nh, nw) = (self.narrow[0], self.narrow[1]);
        let (ph, pw) = (self.pad[0], self.pad[1]);
        for b in 0..self.batch {
            let wbase = b * wh * ww * ci;
            let nbase = b * nh * nw * co;
            for oy in 0..nh {
                for ox in 0..nw {
                    let g = &narrow[nbase + (oy * nw + ox) * co..][..co];
                    for ky in 0..k {
                        let iy = oy * s + ky;
                        if iy < ph || iy - ph >= wh {
                            continue;
                        }
                        let iy = iy - ph;
                        for kx in 0..k {
                            let ix = ox * s + kx;
                            if ix < pw || ix - pw >= ww {
                                continue;
                            }
                            let ix = ix - pw;
                            let pix = &mut out[wbase + (iy * ww + ix) * ci..][..ci];
                            let slab = &kernels[(ky * k + kx) * ci * co..][..ci * co];
                            for (c, p) in pix.iter_mut().enumerate() {
                                let row = &slab[c * co..][..co];
                                let mut acc = 0.0;
                                for (&gv, &w) in g.iter().zip(row) {
                                    acc += gv * w;
                                }
                                *p += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    fn kernel_cotangent_2d(&self, wide: &[f64], narrow: &[f64], out: &mut [f64]) {
        let (ci, co, k, s) = (self.wide_ch, self.narrow_ch, self.kernel, self.stride);
        let (wh, ww) = (self.wide[0], self.wide[1]);
        let (nh, nw) = (self.narrow[0], self.narrow[1]);
        let (ph, pw) = (self.pad[0], self.pad[1]);
        for b in 0..self.batch {
            let wbase = b * wh * ww * ci;
            let nbase = b * nh * nw * co;
            for oy in 0..nh {
                for ox in 0..nw {
                    let g = &narrow[nbase + (oy * nw + ox) * co..][..co];
                    for ky in 0..k {
                        let iy = oy * s + ky;
                        if iy < ph || iy - ph >= wh {
                            continue;
                        }
                        let iy = iy - ph;
                        for kx in 0..k {
                            let ix = ox * s + kx;
                            if ix < pw || ix - pw >= ww {
                                continue;
                            }
                            let ix = ix - pw;
                            let pix = &wide[wbase + (iy * ww + ix) * ci..][..ci];
                            let slab = &mut out[(ky * k + kx) * ci * co..][..ci * co];
                            for (c, &v) in pix.iter().enumerate() {
                                let row = &mut slab[c * co..][..co];
                                for (r, &gv) in row.iter_mut().zip(g) {
                                    *r += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward_3d(&self, wide: &[f64], kernels: &[f64], out: &mut [f64]) {
        let (ci, co, k, s) = (self.wide_ch, self.narrow_ch, self.kernel, self.stride);
        let (wd, wh, ww) = (self.wide[0], self.wide[1], self.wide[2]);
        let (nd, nh, nw) = (self.narrow[0], self.narrow[1], self.narrow[2]);
        let (pd, ph, pw) = (self.pad[0], self.pad[1], self.pad[2]);
        for b in 0..self.batch {
            let wbase = b * wd * wh * ww * ci;
            let nbase = b * nd * nh * nw * co;
            for oz in 0..nd {
                for oy in 0..nh {
                    for ox in 0..nw {
                        let acc = &mut out[nbase + ((oz * nh + oy) * nw + ox) * co..][..co];
                        for kz in 0..k {
                            let iz = oz * s + kz;
                            if iz < pd || iz - pd >= wd {
                                continue;
                            }
                            let iz = iz - pd;
                            for ky in 0..k {
                                let iy = oy * s + ky;
                                if iy < ph || iy - ph >= wh {
                                    continue;
                                }
                                let iy = iy - ph;
                                for kx in 0..k {
                                    let ix = ox * s + kx;
                                    if ix < pw || ix - pw >= ww {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    let pix =
                                        &wide[wbase + ((iz * wh + iy) * ww + ix) * ci..][..ci];
                                    let slab = &kernels
                                        [((kz * k + ky) * k + kx) * ci * co..][..ci * co];
                                    for (c, &v) in pix.iter().enumerate() {
                                        let row = &slab[c * co..][..co];
                                        for (a, &w) in acc.iter_mut().zip(row) {
                                            *a += v * w;
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

    fn adjoint_3d(&self, narrow: &[f64], kernels: &[f64], out: &mut [f64]) {
        let (ci, co, k, s) = (self.wide_ch, self.narrow_ch, self.kernel, self.stride);
        let (wd, wh, ww) = (self.wide[0], self.wide[1], self.wide[2]);
        let (nd, nh, nw) = (self.narrow[0], self.narrow[1], self.narrow[2]);
        let (pd, ph, pw) = (self.pad[0], self.pad[1], self.pad[2]);
        for b in 0..self.batch {
            let wbase = b * wd * wh * ww * ci;
            let nbase = b * nd * nh * nw * co;
            for oz in 0..nd {
                for oy in 0..nh {
                    for ox in 0..nw {
                        let g = &narrow[nbase + ((oz * nh + oy) * nw + ox) * co..][..co];
                        for kz in 0..k {
                            let iz = oz * s + kz;
                            if iz < pd || iz - pd >= wd {
                                continue;
                            }
                            let iz = iz - pd;
                            for ky in 0..k {
                                let iy = oy * s + ky;
                                if iy < ph || iy - ph >= wh {
                                    continue;
                                }
                                let iy = iy - ph;
                                for kx in 0..k {
                                    let ix = ox * s + kx;
                                    if ix < pw || ix - pw >= ww {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    let pix = &mut out
                                        [wbase + ((iz * wh + iy) * ww + ix) * ci..][..ci];
                                    let slab = &kernels
                                        [((kz * k + ky) * k + kx) * ci * co..][..ci * co];
                                    for (c, p) in pix.iter_mut().enumerate() {
                                        let row = &slab[c * co..][..co];
                                        let mut acc = 0.0;
                                        for (&gv, &w) in g.iter().zip(row) {
                                            acc += gv * w;
                                        }
                                        *p += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn kernel_cotangent_3d(&self, wide: &[f64], narrow: &[f64], out: &mut [f64]) {
        let (ci, co, k, s) = (self.wide_ch, self.narrow_ch, self.kernel, self.stride);
        let (wd, wh, ww) = (self.wide[0], self.wide[1], self.wide[2]);
        let (nd, nh, nw) = (self.narrow[0], self.narrow[1], self.narrow[2]);
        let (pd, ph, pw) = (self.pad[0], self.pad[1], self.pad[2]);
        for b in 0..self.batch {
            let wbase = b * wd * wh * ww * ci;
            let nbase = b * nd * nh * nw * co;
            for oz in 0..nd {
                for oy in 0..nh {
                    for ox in 0..nw {
                        let g = &narrow[nbase + ((oz * nh + oy) * nw + ox) * co..][..co];
                        for kz in 0..k {
                            let iz = oz * s + kz;
                            if iz < pd || iz - pd >= wd {
                                continue;
                            }
                            let iz = iz - pd;
                            for ky in 0..k {
                                let iy = oy * s + ky;
                                if iy < ph || iy - ph >= wh {
                                    continue;
                                }
                                let iy = iy - ph;
                                for kx in 0..k {
                                    let ix = ox * s + kx;
                                    if ix < pw || ix - pw >= ww {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    let pix =
                                        &wide[wbase + ((iz * wh + iy) * ww + ix) * ci..][..ci];
                                    let slab = &mut out
                                        [((kz * k + ky) * k + kx) * ci * co..][..ci * co];
                                    for (c, &v) in pix.iter().enumerate() {
                                        let row = &mut slab[c * co..][..co];
                                        for (r, &gv) in row.iter_mut().zip(g) {
                                            *r += v * gv;
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
}

/// Runs the layer the spec describes: forward convolution when
/// `spec.transposed` is false, transposed convolution otherwise, plus an
/// optional per-output-channel bias.
pub fn layer_forward(
    spec: &ConvSpec,
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor, TensorError> {
    check_layer_shapes(spec, input, kernels, bias)?;
    let mut out = if spec.transposed {
        spec.apply_adjoint(input.data(), kernels.data())
    } else {
        spec.apply_forward(input.data(), kernels.data())
    };
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data());
    }
    Tensor::new(spec.output_shape(), out)
}

/// Cotangents of a conv layer: (input, kernels, bias).
pub fn layer_backward(
    spec: &ConvSpec,
    input: &Tensor,
    kernels: &Tensor,
    out_grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    if out_grad.shape() != spec.output_shape().as_slice() {
        return Err(TensorError::ShapeMismatch {
            context: "conv out_grad",
            expected: spec.output_shape(),
            got: out_grad.shape().to_vec(),
        });
    }
    let (d_input, d_kernels) = if spec.transposed {
        (
            spec.apply_forward(out_grad.data(), kernels.data()),
            spec.kernel_cotangent(out_grad.data(), input.data()),
        )
    } else {
        (
            spec.apply_adjoint(out_grad.data(), kernels.data()),
            spec.kernel_cotangent(input.data(), out_grad.data()),
        )
    };
    let d_bias = channel_sums(out_grad.data(), spec.out_channels());
    Ok((
        Tensor::new(spec.input_shape(), d_input)?,
        Tensor::new(spec.kernel_shape(), d_kernels)?,
        Tensor::new(vec![spec.out_channels()], d_bias)?,
    ))
}

fn check_layer_shapes(
    spec: &ConvSpec,
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(), TensorError> {
    if input.shape() != spec.input_shape().as_slice() {
        return Err(TensorError::ShapeMismatch {
            context: "conv input",
            expected: spec.input_shape(),
            got: input.shape().to_vec(),
        });
    }
    if kernels.shape() != spec.kernel_shape().as_slice() {
        return Err(TensorError::ShapeMismatch {
            context: "conv kernels",
            expected: spec.kernel_shape(),
            got: kernels.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels()] {
            return Err(TensorError::ShapeMismatch {
                context: "conv bias",
                expected: vec![spec.out_channels()],
                got: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Adds `bias[c]` to every element whose last-axis index is `c`.
pub fn add_channel_bias(data: &mut [f64], bias: &[f64]) {
    for chunk in data.chunks_exact_mut(bias.len()) {
        for (v, b) in chunk.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Sums over every axis except the last; the bias cotangent.
pub fn channel_sums(data: &[f64], channels: usize) -> Vec<f64> {
    let mut sums = vec![0.0; channels];
    for chunk in data.chunks_exact(channels) {
        for (s, v) in sums.iter_mut().zip(chunk) {
            *s += v;
        }
    }
    sums
}
