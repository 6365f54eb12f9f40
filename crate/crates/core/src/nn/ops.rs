//! Per-sample layer kernels on flat row-major slices.
//!
//! All loops run in a fixed order so results are bit-reproducible.

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Output rows `y` whose input row `y*stride + k - pad` lies inside the image.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(self.stride).min(out_extent)
        } else {
            0
        };
        // need y*stride + k - pad <= extent - 1
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / self.stride + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// `out[o] = bias[o] + Σ_i weight[o,i] ⋆ input[i]` with zero padding.
pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w, k, s) = (g.height, g.width, g.kernel, g.stride);
    for o in 0..g.out_channels {
        let out_o = &mut out[o * oh * ow..(o + 1) * oh * ow];
        out_o.fill(bias[o]);
        for i in 0..g.in_channels {
            let in_i = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..k {
                    let wv = weight[((o * g.in_channels + i) * k + ky) * k + kx];
                    let (x0, x1) = g.valid_range(kx, w, ow);
                    for y in y0..y1 {
                        let iy = y * s + ky - g.pad;
                        let row_in = &in_i[iy * w..(iy + 1) * w];
                        let row_out = &mut out_o[y * ow..(y + 1) * ow];
                        if s == 1 {
                            let off = kx as isize - g.pad as isize;
                            let src = &row_in[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                            for (dst, &v) in row_out[x0..x1].iter_mut().zip(src) {
                                *dst += wv * v;
                            }
                        } else {
                            for x in x0..x1 {
                                row_out[x] += wv * row_in[x * s + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, if requested, the input gradient.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: Option<(&mut [f64], &mut [f64])>,
    mut grad_input: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w, k, s) = (g.height, g.width, g.kernel, g.stride);
    let mut grad_weight = grad_weight;
    for o in 0..g.out_channels {
        let go = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        if let Some((_, gb)) = grad_weight.as_mut() {
            gb[o] += go.iter().sum::<f64>();
        }
        for i in 0..g.in_channels {
            let in_i = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..k {
                    let widx = ((o * g.in_channels + i) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (x0, x1) = g.valid_range(kx, w, ow);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y * s + ky - g.pad;
                        let row_go = &go[y * ow..(y + 1) * ow];
                        if s == 1 {
                            let off = kx as isize - g.pad as isize;
                            let start = iy * w + (x0 as isize + off) as usize;
                            let len = x1 - x0;
                            let row_in = &in_i[start..start + len];
                            for (&gv, &v) in row_go[x0..x1].iter().zip(row_in) {
                                acc += gv * v;
                            }
                            if let Some(gi) = grad_input.as_deref_mut() {
                                let gi_row = &mut gi[i * h * w + start..i * h * w + start + len];
                                for (dst, &gv) in gi_row.iter_mut().zip(&row_go[x0..x1]) {
                                    *dst += wv * gv;
                                }
                            }
                        } else {
                            for x in x0..x1 {
                                let ix = x * s + kx - g.pad;
                                acc += row_go[x] * in_i[iy * w + ix];
                                if let Some(gi) = grad_input.as_deref_mut() {
                                    gi[i * h * w + iy * w + ix] += wv * row_go[x];
                                }
                            }
                        }
                    }
                    if let Some((gw, _)) = grad_weight.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

pub fn relu_forward(input: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(input) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub fn relu_backward(input: &[f64], grad_out: &[f64], grad_input: &mut [f64]) {
    for ((gi, &go), &v) in grad_input.iter_mut().zip(grad_out).zip(input) {
        *gi = if v > 0.0 { go } else { 0.0 };
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    /// Flat input index of the maximum of window `(c, y, x)`; first wins on ties.
    fn argmax(&self, input: &[f64], c: usize, y: usize, x: usize) -> usize {
        let (h, w) = (self.height, self.width);
        let mut best = c * h * w + y * self.stride * w + x * self.stride;
        for dy in 0..self.kernel {
            for dx in 0..self.kernel {
                let idx = c * h * w + (y * self.stride + dy) * w + x * self.stride + dx;
                if input[idx] > input[best] {
                    best = idx;
                }
            }
        }
        best
    }
}

pub fn maxpool_forward(g: &PoolGeom, input: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    for c in 0..g.channels {
        for y in 0..oh {
            for x in 0..ow {
                out[(c * oh + y) * ow + x] = input[g.argmax(input, c, y, x)];
            }
        }
    }
}

pub fn maxpool_backward(g: &PoolGeom, input: &[f64], grad_out: &[f64], grad_input: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    grad_input.fill(0.0);
    for c in 0..g.channels {
        for y in 0..oh {
            for x in 0..ow {
                grad_input[g.argmax(input, c, y, x)] += grad_out[(c * oh + y) * ow + x];
            }
        }
    }
}

/// `out = W x + b`, `W` stored `(out_dim, in_dim)`.
pub fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (o, dst) in out.iter_mut().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        let mut acc = bias[o];
        for (&wv, &x) in row.iter().zip(input) {
            acc += wv * x;
        }
        *dst = acc;
    }
}

pub fn dense_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: Option<(&mut [f64], &mut [f64])>,
    grad_input: Option<&mut [f64]>,
) {
    let n_in = input.len();
    if let Some((gw, gb)) = grad_weight {
        for (o, &go) in grad_out.iter().enumerate() {
            gb[o] += go;
            let row = &mut gw[o * n_in..(o + 1) * n_in];
            for (dst, &x) in row.iter_mut().zip(input) {
                *dst += go * x;
            }
        }
    }
    if let Some(gi) = grad_input {
        gi.fill(0.0);
        for (o, &go) in grad_out.iter().enumerate() {
            let row = &weight[o * n_in..(o + 1) * n_in];
            for (dst, &wv) in gi.iter_mut().zip(row) {
                *dst += wv * go;
            }
        }
    }
}
