//! Raw numeric kernels shared by the forward, reverse and tangent rules.

/// Geometry of a strided, zero-padded 2D windowed sum over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.in_channels, self.height, self.width]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.out_height(), self.out_width()]
    }

    /// Input coordinate hit by output `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }

    /// `y[o, oy, ox] = sum_{c, ky, kx} w[o, c, ky, kx] * x[c, oy*s + ky - p, ox*s + kx - p]`
    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let mut y = vec![0.0; self.out_channels * ho * wo];
        for o in 0..self.out_channels {
            let yo = &mut y[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..self.in_channels {
                let xc = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((o * self.in_channels + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let Some(iy) = self.source(oy, ky, self.height) else {
                                continue;
                            };
                            let row = &xc[iy * self.width..(iy + 1) * self.width];
                            let yrow = &mut yo[oy * wo..(oy + 1) * wo];
                            for (ox, yv) in yrow.iter_mut().enumerate() {
                                if let Some(ix) = self.source(ox, kx, self.width) {
                                    *yv += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Adjoint of [`forward`](Self::forward) in its input: maps an output-shaped `g` to input shape.
    pub fn input_grad(&self, g: &[f64], w: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let mut dx = vec![0.0; self.in_channels * self.height * self.width];
        for o in 0..self.out_channels {
            let go = &g[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..self.in_channels {
                let dxc = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((o * self.in_channels + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let Some(iy) = self.source(oy, ky, self.height) else {
                                continue;
                            };
                            let grow = &go[oy * wo..(oy + 1) * wo];
                            let row = &mut dxc[iy * self.width..(iy + 1) * self.width];
                            for (ox, gv) in grow.iter().enumerate() {
                                if let Some(ix) = self.source(ox, kx, self.width) {
                                    row[ix] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Adjoint of [`forward`](Self::forward) in its weights.
    pub fn weight_grad(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let mut dw = vec![0.0; self.out_channels * self.in_channels * k * k];
        for o in 0..self.out_channels {
            let go = &g[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..self.in_channels {
                let xc = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let Some(iy) = self.source(oy, ky, self.height) else {
                                continue;
                            };
                            let grow = &go[oy * wo..(oy + 1) * wo];
                            let row = &xc[iy * self.width..(iy + 1) * self.width];
                            for (ox, gv) in grow.iter().enumerate() {
                                if let Some(ix) = self.source(ox, kx, self.width) {
                                    acc += row[ix] * gv;
                                }
                            }
                        }
                        dw[((o * self.in_channels + c) * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
        dw
    }
}

/// `C[m, n] = A[m, k] * B[k, n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut y = vec![0.0; g.out_channels * ho * wo];
        for o in 0..g.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += w[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx]
                                    * x[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                    y[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    fn geom() -> ConvGeom {
        ConvGeom {
            in_channels: 2,
            out_channels: 3,
            height: 5,
            width: 6,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7 + 3) % 11) as f64 * scale - 0.4).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = geom();
        let x = seq(2 * 5 * 6, 0.1);
        let w = seq(3 * 2 * 9, 0.07);
        assert_eq!(g.forward(&x, &w), naive_conv(&g, &x, &w));
        assert_eq!(g.output_shape(), vec![3, 3, 3]);
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        let g = geom();
        let x = seq(60, 0.1);
        let w = seq(54, 0.07);
        let gy = seq(27, 0.13);
        let y = g.forward(&x, &w);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let dx = g.input_grad(&gy, &w);
        let rhs_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let dw = g.weight_grad(&x, &gy);
        let rhs_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-12);
        assert!((lhs - rhs_w).abs() < 1e-12);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
