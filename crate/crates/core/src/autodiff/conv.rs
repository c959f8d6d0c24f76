//! 2-D convolution (im2col + gemm) and bilinear resampling.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use super::ops::{as_mat, reshaped};
use super::Var;

fn conv_out(dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    (dim + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ArrayD<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let xs = x.as_slice().expect("im2col: non-contiguous input");
    let mut cols = Array2::<f64>::zeros((ho * wo, c * k * k));
    let cs = cols.as_slice_mut().unwrap();
    let row_len = c * k * k;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * row_len;
            for ci in 0..c {
                let plane = ci * h * w;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane + iy as usize * w;
                    let dst = row + ci * k * k + ky * k;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[dst + kx] = xs[src + ix as usize];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(
    dcols: &Array2<f64>,
    shape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut dx = ArrayD::<f64>::zeros(IxDyn(shape));
    let ds = dx.as_slice_mut().unwrap();
    let cs = dcols.as_slice().expect("col2im: non-contiguous grad");
    let row_len = c * k * k;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * row_len;
            for ci in 0..c {
                let plane = ci * h * w;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = plane + iy as usize * w;
                    let src = row + ci * k * k + ky * k;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        ds[dst + ix as usize] += cs[src + kx];
                    }
                }
            }
        }
    }
    dx
}

/// Per-axis source indices and weights for bilinear sampling with
/// half-pixel centers (`align_corners = false`); weights are convex.
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let w1 = pos - lo as f64;
            (lo, hi, 1.0 - w1, w1)
        })
        .collect()
}

/// Bilinear resize of a plain (C, H, W) array (no gradient tracking).
pub fn resize_bilinear(x: &ArrayD<f64>, h2: usize, w2: usize) -> ArrayD<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h == h2 && w == w2 {
        return x.clone();
    }
    let ys = resize_axis(h, h2);
    let xs = resize_axis(w, w2);
    let src = x.as_slice().expect("resize: non-contiguous");
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h2, w2]));
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = ci * h * w;
        let oplane = ci * h2 * w2;
        for (i, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            let r0 = plane + y0 * w;
            let r1 = plane + y1 * w;
            let orow = oplane + i * w2;
            for (j, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                os[orow + j] = wy0 * (wx0 * src[r0 + x0] + wx1 * src[r0 + x1])
                    + wy1 * (wx0 * src[r1 + x0] + wx1 * src[r1 + x1]);
            }
        }
    }
    out
}

/// Bilinear resize of a 2-D map (no gradient tracking).
pub fn resize_bilinear_2d(x: &ndarray::Array2<f64>, h2: usize, w2: usize) -> ndarray::Array2<f64> {
    let dynd = x
        .clone()
        .into_shape_with_order(IxDyn(&[1, x.nrows(), x.ncols()]))
        .unwrap();
    let out = resize_bilinear(&dynd, h2, w2);
    out.into_shape_with_order((h2, w2))
        .unwrap()
        .into_dimensionality()
        .unwrap()
}

impl Var {
    /// Convolution over a (C_in, H, W) input with weights (C_out, C_in, k, k).
    pub fn conv2d(&self, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Var {
        let &[c_in, h, w] = self.shape() else {
            panic!("conv2d: expected (C, H, W) input")
        };
        let &[c_out, wc_in, k, k2] = weight.shape() else {
            panic!("conv2d: expected (C_out, C_in, k, k) weights")
        };
        assert_eq!(c_in, wc_in, "conv2d: channel mismatch");
        assert_eq!(k, k2, "conv2d: non-square kernel");
        assert_eq!(bias.shape(), [c_out]);

        let (cols, ho, wo) = im2col(self.value(), k, stride, pad);
        let wv = weight.value.clone();
        let wmat = reshaped(&wv, &[c_out, c_in * k * k]);
        // (HoWo, CK2) x (CK2, C_out) -> (HoWo, C_out)
        let mut out_mat = cols.dot(&as_mat(&wmat).t());
        {
            let bv = bias.value();
            for mut row in out_mat.rows_mut() {
                for (o, b) in row.iter_mut().zip(bv.iter()) {
                    *o += b;
                }
            }
        }
        let value = out_mat
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[c_out, ho, wo]))
            .unwrap();

        let cols = Arc::new(cols);
        let in_shape = vec![c_in, h, w];
        let x_needs = self.requires_grad;
        self.graph().op(&[self, weight, bias], value, move |g| {
            // g: (C_out, Ho, Wo) -> (HoWo, C_out)
            let g_mat = reshaped(g, &[c_out, ho * wo]);
            let g_mat = as_mat(&g_mat).t().as_standard_layout().into_owned();
            let wmat = reshaped(&wv, &[c_out, c_in * k * k]);
            let dw = g_mat
                .t()
                .dot(&cols.view())
                .into_shape_with_order(IxDyn(&[c_out, c_in, k, k]))
                .unwrap();
            let db = g_mat.sum_axis(Axis(0)).into_dyn();
            let dx = if x_needs {
                let dcols = g_mat.dot(&as_mat(&wmat));
                Some(col2im(&dcols, &in_shape, k, stride, pad))
            } else {
                None
            };
            vec![dx, Some(dw), Some(db)]
        })
    }

    /// Differentiable bilinear resize of a (C, H, W) map.
    pub fn resize(&self, h2: usize, w2: usize) -> Var {
        let &[c, h, w] = self.shape() else {
            panic!("resize: expected (C, H, W)")
        };
        if h == h2 && w == w2 {
            return self.clone();
        }
        let value = resize_bilinear(self.value(), h2, w2);
        let ys = resize_axis(h, h2);
        let xs = resize_axis(w, w2);
        self.graph().op(&[self], value, move |g| {
            let gs = g.as_slice().expect("resize grad: non-contiguous");
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            let ds = dx.as_slice_mut().unwrap();
            for ci in 0..c {
                let plane = ci * h * w;
                let oplane = ci * h2 * w2;
                for (i, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                    let r0 = plane + y0 * w;
                    let r1 = plane + y1 * w;
                    let orow = oplane + i * w2;
                    for (j, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                        let gv = gs[orow + j];
                        ds[r0 + x0] += wy0 * wx0 * gv;
                        ds[r0 + x1] += wy0 * wx1 * gv;
                        ds[r1 + x0] += wy1 * wx0 * gv;
                        ds[r1 + x1] += wy1 * wx1 * gv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}
