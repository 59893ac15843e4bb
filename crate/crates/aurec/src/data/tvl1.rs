//! Duality-based total-variation flow between two grayscale frames.
//!
//! Estimates the displacement field u with b(p + u(p)) ~= a(p). The solver
//! runs a fixed iteration budget (no convergence test) so results are
//! reproducible across runs.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::flow_io::FlowField;
use super::luma;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvL1Params {
    /// Data attachment weight.
    pub lambda: f32,
    /// Tightness of the coupling between the flow and its auxiliary field.
    pub theta: f32,
    /// Dual ascent step.
    pub tau: f32,
    pub levels: usize,
    pub warps: usize,
    pub iterations: usize,
}

impl Default for TvL1Params {
    fn default() -> Self {
        TvL1Params {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            levels: 5,
            warps: 5,
            iterations: 30,
        }
    }
}

const GRAD_FLOOR: f32 = 1e-10;

fn bilinear(img: &Array2<f32>, x: f32, y: f32) -> f32 {
    let (h, w) = (img.shape()[0] as i64, img.shape()[1] as i64);
    let xf = x.floor();
    let yf = y.floor();
    let dx = x - xf;
    let dy = y - yf;
    let x0 = (xf as i64).clamp(0, w - 1);
    let y0 = (yf as i64).clamp(0, h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
    let top = img[[y0, x0]] * (1.0 - dx) + img[[y0, x1]] * dx;
    let bot = img[[y1, x0]] * (1.0 - dx) + img[[y1, x1]] * dx;
    top * (1.0 - dy) + bot * dy
}

fn resize(img: &Array2<f32>, h2: usize, w2: usize) -> Array2<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let sy = h as f32 / h2 as f32;
    let sx = w as f32 / w2 as f32;
    Array2::from_shape_fn((h2, w2), |(y, x)| {
        bilinear(
            img,
            (x as f32 + 0.5) * sx - 0.5,
            (y as f32 + 0.5) * sy - 0.5,
        )
    })
}

/// Separable 5-tap binomial blur with replicated borders.
fn blur5(img: &Array2<f32>) -> Array2<f32> {
    const K: [f32; 5] = [0.0625, 0.25, 0.375, 0.25, 0.0625];
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in K.iter().enumerate() {
                let xi = (x as i64 + t as i64 - 2).clamp(0, w as i64 - 1) as usize;
                acc += img[[y, xi]] * k;
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in K.iter().enumerate() {
                let yi = (y as i64 + t as i64 - 2).clamp(0, h as i64 - 1) as usize;
                acc += tmp[[yi, x]] * k;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn downsample(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    resize(&blur5(img), h.div_ceil(2), w.div_ceil(2))
}

fn central_gradients(img: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            gx[[y, x]] = 0.5 * (img[[y, xp]] - img[[y, xm]]);
            gy[[y, x]] = 0.5 * (img[[yp, x]] - img[[ym, x]]);
        }
    }
    (gx, gy)
}

fn warp(img: &Array2<f32>, u1: &Array2<f32>, u2: &Array2<f32>) -> Array2<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        bilinear(img, x as f32 + u1[[y, x]], y as f32 + u2[[y, x]])
    })
}

/// Forward differences with a zero gradient on the last row/column.
fn forward_grad(u: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = (u.shape()[0], u.shape()[1]);
    let mut ux = Array2::zeros((h, w));
    let mut uy = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                ux[[y, x]] = u[[y, x + 1]] - u[[y, x]];
            }
            if y + 1 < h {
                uy[[y, x]] = u[[y + 1, x]] - u[[y, x]];
            }
        }
    }
    (ux, uy)
}

/// Adjoint of `forward_grad`.
fn divergence(p1: &Array2<f32>, p2: &Array2<f32>) -> Array2<f32> {
    let (h, w) = (p1.shape()[0], p1.shape()[1]);
    let mut div = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let dx = if x == 0 {
                p1[[y, 0]]
            } else if x == w - 1 {
                -p1[[y, x - 1]]
            } else {
                p1[[y, x]] - p1[[y, x - 1]]
            };
            let dy = if y == 0 {
                p2[[0, x]]
            } else if y == h - 1 {
                -p2[[y - 1, x]]
            } else {
                p2[[y, x]] - p2[[y - 1, x]]
            };
            div[[y, x]] = dx + dy;
        }
    }
    div
}

fn median3x3(u: &Array2<f32>) -> Array2<f32> {
    let (h, w) = (u.shape()[0], u.shape()[1]);
    let mut out = Array2::zeros((h, w));
    let mut buf = [0f32; 9];
    for y in 0..h {
        for x in 0..w {
            let mut n = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    buf[n] = u[[yy, xx]];
                    n += 1;
                }
            }
            buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[[y, x]] = buf[4];
        }
    }
    out
}

fn solve_level(
    i0: &Array2<f32>,
    i1: &Array2<f32>,
    u1: &mut Array2<f32>,
    u2: &mut Array2<f32>,
    p: &TvL1Params,
) {
    let (h, w) = (i0.shape()[0], i0.shape()[1]);
    let l_t = p.lambda * p.theta;
    let taut = p.tau / p.theta;
    let (i1x, i1y) = central_gradients(i1);
    let mut p11: Array2<f32> = Array2::zeros((h, w));
    let mut p12: Array2<f32> = Array2::zeros((h, w));
    let mut p21: Array2<f32> = Array2::zeros((h, w));
    let mut p22: Array2<f32> = Array2::zeros((h, w));

    for _ in 0..p.warps {
        let i1w = warp(i1, u1, u2);
        let i1wx = warp(&i1x, u1, u2);
        let i1wy = warp(&i1y, u1, u2);
        let grad = Array2::from_shape_fn((h, w), |(y, x)| {
            i1wx[[y, x]] * i1wx[[y, x]] + i1wy[[y, x]] * i1wy[[y, x]]
        });
        // Constant part of the linearised residual around the warp flow.
        let rho_c = Array2::from_shape_fn((h, w), |(y, x)| {
            i1w[[y, x]] - i1wx[[y, x]] * u1[[y, x]] - i1wy[[y, x]] * u2[[y, x]] - i0[[y, x]]
        });

        for _ in 0..p.iterations {
            let mut v1 = Array2::zeros((h, w));
            let mut v2 = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let rho = rho_c[[y, x]] + i1wx[[y, x]] * u1[[y, x]] + i1wy[[y, x]] * u2[[y, x]];
                    let g = grad[[y, x]];
                    let (d1, d2) = if rho < -l_t * g {
                        (l_t * i1wx[[y, x]], l_t * i1wy[[y, x]])
                    } else if rho > l_t * g {
                        (-l_t * i1wx[[y, x]], -l_t * i1wy[[y, x]])
                    } else if g > GRAD_FLOOR {
                        (-rho * i1wx[[y, x]] / g, -rho * i1wy[[y, x]] / g)
                    } else {
                        (0.0, 0.0)
                    };
                    v1[[y, x]] = u1[[y, x]] + d1;
                    v2[[y, x]] = u2[[y, x]] + d2;
                }
            }
            let div1 = divergence(&p11, &p12);
            let div2 = divergence(&p21, &p22);
            for y in 0..h {
                for x in 0..w {
                    u1[[y, x]] = v1[[y, x]] + p.theta * div1[[y, x]];
                    u2[[y, x]] = v2[[y, x]] + p.theta * div2[[y, x]];
                }
            }
            let (u1x, u1y) = forward_grad(u1);
            let (u2x, u2y) = forward_grad(u2);
            for y in 0..h {
                for x in 0..w {
                    let n1 = 1.0 + taut * (u1x[[y, x]].powi(2) + u1y[[y, x]].powi(2)).sqrt();
                    let n2 = 1.0 + taut * (u2x[[y, x]].powi(2) + u2y[[y, x]].powi(2)).sqrt();
                    p11[[y, x]] = (p11[[y, x]] + taut * u1x[[y, x]]) / n1;
                    p12[[y, x]] = (p12[[y, x]] + taut * u1y[[y, x]]) / n1;
                    p21[[y, x]] = (p21[[y, x]] + taut * u2x[[y, x]]) / n2;
                    p22[[y, x]] = (p22[[y, x]] + taut * u2y[[y, x]]) / n2;
                }
            }
        }
        *u1 = median3x3(u1);
        *u2 = median3x3(u2);
    }
}

/// Runs the coarse-to-fine solver on two grayscale frames in [0, 1].
pub fn tv_l1(i0: &Array2<f32>, i1: &Array2<f32>, params: &TvL1Params) -> Result<FlowField> {
    if i0.shape() != i1.shape() {
        return Err(Error::Shape(format!(
            "flow frames {:?} vs {:?}",
            i0.shape(),
            i1.shape()
        )));
    }
    let (h, w) = (i0.shape()[0], i0.shape()[1]);
    if h < 8 || w < 8 {
        return Err(Error::Data(format!("frames {h}x{w} too small for flow")));
    }
    if params.levels == 0 || params.warps == 0 || params.iterations == 0 {
        return Err(Error::Config("flow solver budgets must be positive".into()));
    }
    // The data weights are tuned for a 0..255 intensity range.
    let mut pyr0 = vec![i0.mapv(|v| v * 255.0)];
    let mut pyr1 = vec![i1.mapv(|v| v * 255.0)];
    let mut levels = 1;
    while levels < params.levels {
        let last = &pyr0[levels - 1];
        if last.shape()[0].min(last.shape()[1]) < 32 {
            break;
        }
        pyr0.push(downsample(&pyr0[levels - 1]));
        pyr1.push(downsample(&pyr1[levels - 1]));
        levels += 1;
    }

    let (ch, cw) = (pyr0[levels - 1].shape()[0], pyr0[levels - 1].shape()[1]);
    let mut u1: Array2<f32> = Array2::zeros((ch, cw));
    let mut u2: Array2<f32> = Array2::zeros((ch, cw));
    for level in (0..levels).rev() {
        solve_level(&pyr0[level], &pyr1[level], &mut u1, &mut u2, params);
        if level > 0 {
            let (nh, nw) = (pyr0[level - 1].shape()[0], pyr0[level - 1].shape()[1]);
            let rx = nw as f32 / u1.shape()[1] as f32;
            let ry = nh as f32 / u1.shape()[0] as f32;
            u1 = resize(&u1, nh, nw).mapv(|v| v * rx);
            u2 = resize(&u2, nh, nw).mapv(|v| v * ry);
        }
    }
    let flow = FlowField { u: u1, v: u2 };
    flow.validate()?;
    Ok(flow)
}

/// Convenience wrapper for color frames: converts to luma, then solves.
pub fn extract_flow(a: &Array3<f32>, b: &Array3<f32>, params: &TvL1Params) -> Result<FlowField> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "frame pair {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    tv_l1(&luma(a), &luma(b), params)
}
