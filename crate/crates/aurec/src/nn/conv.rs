//! Convolution-family ops: conv2d, transposed conv2d, max pooling, bilinear
//! 2x upsampling and RoI window cropping. Convolutions are lowered to GEMM
//! through im2col/col2im; the transposed conv reuses the same plumbing with
//! the roles of the two grids swapped.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Ix2, Ix4};

use super::scalar::{s, Scalar};
use super::tape::{Tape, Var};

/// Output spatial size of a convolution.
pub fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_t_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h - 1) * stride + k - 2 * pad
}

/// Unfold `[B,C,H,W]` into `[C*k*k, B*ho*wo]` patches.
fn im2col<S: Scalar>(
    x: &ArrayView4<S>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<S> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut cols = Array2::<S>::zeros((c * k * k, b * ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut out_row = cols.row_mut(row);
                let out = out_row.as_slice_mut().expect("contiguous row");
                for bi in 0..b {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let base = (bi * ho + oy) * wo;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out[base + ox] = x[[bi, ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold `[C*k*k, B*ho*wo]` patch gradients back onto the `[B,C,H,W]` grid
/// (scatter-add; the exact adjoint of [`im2col`]).
fn col2im<S: Scalar>(
    cols: &ArrayView2<S>,
    b: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let c = cols.nrows() / (k * k);
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    debug_assert_eq!(cols.nrows(), c * k * k);
    debug_assert_eq!(cols.ncols(), b * ho * wo);
    let mut x = Array4::<S>::zeros((b, c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let in_row = cols.row(row);
                let src = in_row.as_slice().expect("contiguous row");
                for bi in 0..b {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (bi * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x[[bi, ci, iy as usize, ix as usize]] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[M, B*ho*wo]` GEMM output rearranged to `[B,M,ho,wo]`.
fn gemm_out_to_nchw<S: Scalar>(y2: &Array2<S>, b: usize, m: usize, ho: usize, wo: usize) -> Array4<S> {
    let mut y = Array4::<S>::zeros((b, m, ho, wo));
    for mi in 0..m {
        let row = y2.row(mi);
        let src = row.as_slice().expect("contiguous row");
        for bi in 0..b {
            let seg = &src[bi * ho * wo..(bi + 1) * ho * wo];
            y.index_axis_mut(ndarray::Axis(0), bi)
                .index_axis_mut(ndarray::Axis(0), mi)
                .as_slice_mut()
                .expect("contiguous plane")
                .copy_from_slice(seg);
        }
    }
    y
}

/// `[B,M,ho,wo]` rearranged to `[M, B*ho*wo]` for GEMM.
fn nchw_to_gemm_rows<S: Scalar>(y: &ArrayView4<S>) -> Array2<S> {
    let (b, m, ho, wo) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let mut y2 = Array2::<S>::zeros((m, b * ho * wo));
    for mi in 0..m {
        let mut row = y2.row_mut(mi);
        let dst = row.as_slice_mut().expect("contiguous row");
        for bi in 0..b {
            let plane = y.index_axis(ndarray::Axis(0), bi);
            let plane = plane.index_axis(ndarray::Axis(0), mi);
            dst[bi * ho * wo..(bi + 1) * ho * wo]
                .copy_from_slice(plane.as_slice().expect("contiguous plane"));
        }
    }
    y2
}

impl<S: Scalar> Tape<S> {
    /// 2-d convolution, weight layout `[Cout, Cin, k, k]`, square kernel.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = self.value(x).into_dimensionality::<Ix4>().expect("conv input 4-d");
        let vw = self.value(w).into_dimensionality::<Ix4>().expect("conv weight 4-d");
        let (bs, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (cout, cin_w, k, k2) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        assert_eq!(cin, cin_w, "conv channel mismatch");
        assert_eq!(k, k2, "square kernels only");
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let kk = cin * k * k;

        let cols = im2col(&vx.view(), k, stride, pad, ho, wo);
        let w2 = vw.into_shape_clone((cout, kk)).expect("weight 2-d");
        let y2 = S::gemm(w2.view(), cols.view());
        let mut y = gemm_out_to_nchw(&y2, bs, cout, ho, wo);
        if let Some(bias) = b {
            let vb = self.value(bias).into_shape_clone(cout).expect("bias 1-d");
            for bi in 0..bs {
                for co in 0..cout {
                    let bv = vb[co];
                    y.index_axis_mut(ndarray::Axis(0), bi)
                        .index_axis_mut(ndarray::Axis(0), co)
                        .mapv_inplace(|v| v + bv);
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(bias) = b {
            parents.push(bias);
        }
        self.op(
            y.into_dyn(),
            parents,
            Box::new(move |g, p, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("grad 4-d");
                let x4 = p[0].view().into_dimensionality::<Ix4>().expect("x 4-d");
                let w4 = p[1].view().into_dimensionality::<Ix4>().expect("w 4-d");
                let g2 = nchw_to_gemm_rows(&g4);
                let w2 = w4
                    .to_owned()
                    .into_shape_clone((cout, kk))
                    .expect("weight 2-d");
                // dW = g2 . colsᵀ  (cols recomputed to avoid caching them)
                let cols = im2col(&x4, k, stride, pad, ho, wo);
                let dw2 = S::gemm(g2.view(), cols.t());
                let dw = dw2.into_shape_clone((cout, cin, k, k)).expect("dw 4-d");
                // dX = col2im(w2ᵀ . g2)
                let dcols = S::gemm(w2.t(), g2.view());
                let dx = col2im(&dcols.view(), bs, h, wd, k, stride, pad);
                let mut grads = vec![Some(dx.into_dyn()), Some(dw.into_dyn())];
                if p.len() == 3 {
                    let mut db = Array1::<S>::zeros(cout);
                    for co in 0..cout {
                        db[co] = g2.row(co).sum();
                    }
                    grads.push(Some(db.into_dyn()));
                }
                grads
            }),
        )
    }

    /// Transposed 2-d convolution, weight layout `[Cin, Cout, k, k]`.
    /// Forward is the adjoint of a conv with the same (k, stride, pad), so
    /// the output grid is the "large" grid of that conv.
    pub fn conv_t2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = self.value(x).into_dimensionality::<Ix4>().expect("convt input 4-d");
        let vw = self.value(w).into_dimensionality::<Ix4>().expect("convt weight 4-d");
        let (bs, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (cin_w, cout, k, k2) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        assert_eq!(cin, cin_w, "convt channel mismatch");
        assert_eq!(k, k2, "square kernels only");
        let ho = conv_t_out(h, k, stride, pad);
        let wo = conv_t_out(wd, k, stride, pad);
        let kk = cout * k * k;

        let x2 = nchw_to_gemm_rows(&vx.view());
        let w2 = vw.into_shape_clone((cin, kk)).expect("weight 2-d");
        // cols[kk, B*h*w] = w2ᵀ . x2, folded onto the large grid.
        let cols = S::gemm(w2.t(), x2.view());
        let mut y = col2im(&cols.view(), bs, ho, wo, k, stride, pad);
        if let Some(bias) = b {
            let vb = self.value(bias).into_shape_clone(cout).expect("bias 1-d");
            for bi in 0..bs {
                for co in 0..cout {
                    let bv = vb[co];
                    y.index_axis_mut(ndarray::Axis(0), bi)
                        .index_axis_mut(ndarray::Axis(0), co)
                        .mapv_inplace(|v| v + bv);
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(bias) = b {
            parents.push(bias);
        }
        self.op(
            y.into_dyn(),
            parents,
            Box::new(move |g, p, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("grad 4-d");
                let x4 = p[0].view().into_dimensionality::<Ix4>().expect("x 4-d");
                let w4 = p[1].view().into_dimensionality::<Ix4>().expect("w 4-d");
                let w2 = w4
                    .to_owned()
                    .into_shape_clone((cin, kk))
                    .expect("weight 2-d");
                // dX = w2 . im2col(g) viewed on the large grid.
                let gcols = im2col(&g4, k, stride, pad, h, wd);
                let dx2 = S::gemm(w2.view(), gcols.view());
                let dx = gemm_out_to_nchw(&dx2, bs, cin, h, wd);
                // dW = x2 . im2col(g)ᵀ
                let x2 = nchw_to_gemm_rows(&x4);
                let dw2 = S::gemm(x2.view(), gcols.t());
                let dw = dw2.into_shape_clone((cin, cout, k, k)).expect("dw 4-d");
                let mut grads = vec![Some(dx.into_dyn()), Some(dw.into_dyn())];
                if p.len() == 3 {
                    let mut db = Array1::<S>::zeros(cout);
                    for bi in 0..bs {
                        for co in 0..cout {
                            db[co] += g4
                                .index_axis(ndarray::Axis(0), bi)
                                .index_axis(ndarray::Axis(0), co)
                                .sum();
                        }
                    }
                    grads.push(Some(db.into_dyn()));
                }
                grads
            }),
        )
    }

    /// 3x3 stride-2 max pooling with padding 1 (the stem pool).
    pub fn max_pool_3x3_s2(&self, x: Var) -> Var {
        let v = self.value(x).into_dimensionality::<Ix4>().expect("pool input 4-d");
        let (bs, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let (k, stride, pad) = (3usize, 2usize, 1usize);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(w, k, stride, pad);
        let mut out = Array4::<S>::zeros((bs, c, ho, wo));
        let mut argmax = vec![0usize; bs * c * ho * wo];
        let mut idx = 0;
        for bi in 0..bs {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = S::neg_infinity();
                        let mut best_pos = 0usize;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let val = v[[bi, ci, iy as usize, ix as usize]];
                                if val > best {
                                    best = val;
                                    best_pos = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        out[[bi, ci, oy, ox]] = best;
                        argmax[idx] = best_pos;
                        idx += 1;
                    }
                }
            }
        }
        self.op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("grad 4-d");
                let mut dx = Array4::<S>::zeros((bs, c, h, w));
                let mut idx = 0;
                for bi in 0..bs {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let pos = argmax[idx];
                                dx[[bi, ci, pos / w, pos % w]] += g4[[bi, ci, oy, ox]];
                                idx += 1;
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Bilinear x2 upsampling (half-pixel centers, edge clamped).
    pub fn upsample2x(&self, x: Var) -> Var {
        let v = self.value(x).into_dimensionality::<Ix4>().expect("upsample input 4-d");
        let (bs, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let (ho, wo) = (h * 2, w * 2);
        // For scale 2 with half-pixel centers the source coordinate of output
        // index o is o/2 - 0.25, so the interpolation weights are always
        // (0.25, 0.75) or (0.75, 0.25).
        let taps = |o: usize, n: usize| -> (usize, usize, f64) {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = floor.max(0.0) as usize;
            let i1 = ((floor as isize + 1).clamp(0, n as isize - 1)) as usize;
            let i0 = i0.min(n - 1);
            (i0, i1, frac.clamp(0.0, 1.0))
        };
        let mut out = Array4::<S>::zeros((bs, c, ho, wo));
        for bi in 0..bs {
            for ci in 0..c {
                for oy in 0..ho {
                    let (y0, y1, fy) = taps(oy, h);
                    let (wy0, wy1): (S, S) = (s(1.0 - fy), s(fy));
                    for ox in 0..wo {
                        let (x0, x1, fx) = taps(ox, w);
                        let (wx0, wx1): (S, S) = (s(1.0 - fx), s(fx));
                        out[[bi, ci, oy, ox]] = v[[bi, ci, y0, x0]] * wy0 * wx0
                            + v[[bi, ci, y0, x1]] * wy0 * wx1
                            + v[[bi, ci, y1, x0]] * wy1 * wx0
                            + v[[bi, ci, y1, x1]] * wy1 * wx1;
                    }
                }
            }
        }
        self.op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("grad 4-d");
                let mut dx = Array4::<S>::zeros((bs, c, h, w));
                for bi in 0..bs {
                    for ci in 0..c {
                        for oy in 0..ho {
                            let (y0, y1, fy) = taps(oy, h);
                            let (wy0, wy1): (S, S) = (s(1.0 - fy), s(fy));
                            for ox in 0..wo {
                                let (x0, x1, fx) = taps(ox, w);
                                let (wx0, wx1): (S, S) = (s(1.0 - fx), s(fx));
                                let gv = g4[[bi, ci, oy, ox]];
                                dx[[bi, ci, y0, x0]] += gv * wy0 * wx0;
                                dx[[bi, ci, y0, x1]] += gv * wy0 * wx1;
                                dx[[bi, ci, y1, x0]] += gv * wy1 * wx0;
                                dx[[bi, ci, y1, x1]] += gv * wy1 * wx1;
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Gather square windows from a feature map: window `i` reads
    /// `x[batch_idx, :, y0..y0+size, x0..x0+size]`. Windows may overlap;
    /// the backward pass scatter-adds.
    pub fn crop_windows(&self, x: Var, windows: &[(usize, usize, usize)], size: usize) -> Var {
        let v = self.value(x).into_dimensionality::<Ix4>().expect("crop input 4-d");
        let (bs, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let wins = windows.to_vec();
        for &(bi, y0, x0) in &wins {
            assert!(bi < bs && y0 + size <= h && x0 + size <= w, "window out of bounds");
        }
        let mut out = Array4::<S>::zeros((wins.len(), c, size, size));
        for (i, &(bi, y0, x0)) in wins.iter().enumerate() {
            for ci in 0..c {
                for dy in 0..size {
                    for dx in 0..size {
                        out[[i, ci, dy, dx]] = v[[bi, ci, y0 + dy, x0 + dx]];
                    }
                }
            }
        }
        self.op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("grad 4-d");
                let mut dx = Array4::<S>::zeros((bs, c, h, w));
                for (i, &(bi, y0, x0)) in wins.iter().enumerate() {
                    for ci in 0..c {
                        for dy in 0..size {
                            for dxx in 0..size {
                                dx[[bi, ci, y0 + dy, x0 + dxx]] += g4[[i, ci, dy, dxx]];
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}

/// Plain (non-differentiable) average pooling by an integer factor; used to
/// bring ground-truth flow down to the predicted grid.
pub fn avg_pool_factor<S: Scalar>(x: &ArrayD<S>, factor: usize) -> ArrayD<S> {
    let v = x.view().into_dimensionality::<Ix4>().expect("avg pool 4-d");
    let (bs, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    assert!(h % factor == 0 && w % factor == 0, "size divisible by factor");
    let (ho, wo) = (h / factor, w / factor);
    let inv: S = s(1.0 / (factor * factor) as f64);
    let mut out = Array4::<S>::zeros((bs, c, ho, wo));
    for bi in 0..bs {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += v[[bi, ci, oy * factor + dy, ox * factor + dx]];
                        }
                    }
                    out[[bi, ci, oy, ox]] = acc * inv;
                }
            }
        }
    }
    out.into_dyn()
}

/// Nearest-neighbour 2-d view helper for tests.
pub fn as_matrix<S: Scalar>(x: &ArrayD<S>) -> Array2<S> {
    x.view()
        .into_dimensionality::<Ix2>()
        .expect("2-d value")
        .to_owned()
}
