//! Least-squares similarity alignment of faces onto a reference landmark
//! frame, plus the bilinear warp that applies it.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Similarity transform `(x, y) -> (a*x - b*y + tx, b*x + a*y + ty)`,
/// i.e. scale * rotation + translation (no reflection).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            a: 1.0,
            b: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a * p[0] - self.b * p[1] + self.tx,
            self.b * p[0] + self.a * p[1] + self.ty,
        ]
    }

    pub fn scale(&self) -> f64 {
        (self.a * self.a + self.b * self.b).sqrt()
    }

    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn inverse(&self) -> Similarity {
        let s2 = self.a * self.a + self.b * self.b;
        let (ai, bi) = (self.a / s2, -self.b / s2);
        Similarity {
            a: ai,
            b: bi,
            tx: -(ai * self.tx - bi * self.ty),
            ty: -(bi * self.tx + ai * self.ty),
        }
    }

    /// Least-squares similarity mapping `src` points onto `dst`. Treating
    /// points as complex numbers, the optimum of `min Σ|a p + t - q|^2` is
    /// `a = Σ q̃ conj(p̃) / Σ |p̃|²` over centered points.
    pub fn fit(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Similarity> {
        if src.len() != dst.len() || src.len() < 2 {
            return Err(Error::Data(format!(
                "similarity fit needs >= 2 correspondences, got {} / {}",
                src.len(),
                dst.len()
            )));
        }
        let n = src.len() as f64;
        let mean = |pts: &[[f64; 2]]| {
            let mut m = [0.0f64; 2];
            for p in pts {
                m[0] += p[0];
                m[1] += p[1];
            }
            [m[0] / n, m[1] / n]
        };
        let mp = mean(src);
        let mq = mean(dst);
        let mut num_re = 0.0;
        let mut num_im = 0.0;
        let mut den = 0.0;
        for (p, q) in src.iter().zip(dst.iter()) {
            let (px, py) = (p[0] - mp[0], p[1] - mp[1]);
            let (qx, qy) = (q[0] - mq[0], q[1] - mq[1]);
            num_re += qx * px + qy * py;
            num_im += qy * px - qx * py;
            den += px * px + py * py;
        }
        if den < 1e-12 {
            return Err(Error::Data(
                "degenerate landmarks: all source points coincide".into(),
            ));
        }
        let a = num_re / den;
        let b = num_im / den;
        Ok(Similarity {
            a,
            b,
            tx: mq[0] - (a * mp[0] - b * mp[1]),
            ty: mq[1] - (b * mp[0] + a * mp[1]),
        })
    }
}

/// Warp `image` ([H,W,3], values in [0,1]) with `t` into an `out_size` square
/// canvas. Output pixel p samples the input at t⁻¹(p) bilinearly; samples
/// outside the input are black.
pub fn warp_image(image: &Array3<f32>, t: &Similarity, out_size: usize) -> Array3<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let inv = t.inverse();
    let mut out = Array3::<f32>::zeros((out_size, out_size, 3));
    for oy in 0..out_size {
        for ox in 0..out_size {
            let src = inv.apply([ox as f64, oy as f64]);
            let (sx, sy) = (src[0], src[1]);
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..3 {
                let v00 = image[[y0, x0, c]];
                let v01 = image[[y0, x1, c]];
                let v10 = image[[y1, x0, c]];
                let v11 = image[[y1, x1, c]];
                out[[oy, ox, c]] = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
            }
        }
    }
    out
}

/// Align a face image onto reference landmarks: fits the least-squares
/// similarity from `landmarks` to `reference` and warps into an
/// `out_size`-square canvas (200 by convention; cropping to the network
/// input happens downstream).
pub fn align_face(
    image: &Array3<f32>,
    landmarks: &[[f64; 2]],
    reference: &[[f64; 2]],
    out_size: usize,
) -> Result<(Array3<f32>, Similarity)> {
    let t = Similarity::fit(landmarks, reference)?;
    Ok((warp_image(image, &t, out_size), t))
}
