//! Figure emitters: flow grayscale pairs, inpainting grids and query
//! similarity heatmaps. All builders return H x W x 3 images in [0, 1]
//! ready for [`crate::data::write_png`].

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

const GAP: usize = 2;
const GAP_VALUE: f32 = 1.0;

/// Convert a C x H x W tensor in [0, 1] to H x W x 3.
pub fn chw_to_hwc(image: &ArrayView3<f32>) -> Result<Array3<f32>> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut out = Array3::zeros((h, w, 3));
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[[y, x, ch]] = image[[ch, y, x]].clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn solid(h: usize, w: usize) -> Array3<f32> {
    Array3::from_elem((h, w, 3), GAP_VALUE)
}

/// Place images left to right with a thin gap; all must share the height.
pub fn hstack(images: &[Array3<f32>]) -> Result<Array3<f32>> {
    if images.is_empty() {
        return Err(Error::Data("nothing to stack".into()));
    }
    let h = images[0].shape()[0];
    if images.iter().any(|i| i.shape()[0] != h || i.shape()[2] != 3) {
        return Err(Error::Shape("hstack needs equal heights".into()));
    }
    let mut parts: Vec<Array3<f32>> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if i > 0 {
            parts.push(solid(h, GAP));
        }
        parts.push(img.clone());
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Place images top to bottom with a thin gap; all must share the width.
pub fn vstack(images: &[Array3<f32>]) -> Result<Array3<f32>> {
    if images.is_empty() {
        return Err(Error::Data("nothing to stack".into()));
    }
    let w = images[0].shape()[1];
    if images.iter().any(|i| i.shape()[1] != w || i.shape()[2] != 3) {
        return Err(Error::Shape("vstack needs equal widths".into()));
    }
    let mut parts: Vec<Array3<f32>> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if i > 0 {
            parts.push(solid(GAP, w));
        }
        parts.push(img.clone());
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn gray(channel: &Array2<f32>, scale: f32) -> Array3<f32> {
    let (h, w) = channel.dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let v = (channel[[y, x]] / scale * 0.5 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                out[[y, x, c]] = v;
            }
        }
    }
    out
}

/// Horizontal and vertical flow as two grayscale panes side by side.
/// Zero motion renders mid-gray; both panes share one symmetric scale.
pub fn flow_panes(u: &Array2<f32>, v: &Array2<f32>) -> Result<Array3<f32>> {
    if u.dim() != v.dim() {
        return Err(Error::Shape(format!(
            "flow components {:?} vs {:?}",
            u.dim(),
            v.dim()
        )));
    }
    let peak = u
        .iter()
        .chain(v.iter())
        .fold(0.0f32, |m, &x| m.max(x.abs()))
        .max(1e-6);
    hstack(&[gray(u, peak), gray(v, peak)])
}

/// Three-row grid: cropped inputs, originals, recovered results. One column
/// per example.
pub fn inpaint_grid(
    cropped: &[Array3<f32>],
    original: &[Array3<f32>],
    recovered: &[Array3<f32>],
) -> Result<Array3<f32>> {
    if cropped.len() != original.len() || original.len() != recovered.len() {
        return Err(Error::Shape("grid rows need equal example counts".into()));
    }
    vstack(&[hstack(cropped)?, hstack(original)?, hstack(recovered)?])
}

/// Diverging heatmap of a [-1, 1] matrix: blue for -1, white for 0, red
/// for +1, each matrix entry rendered as a `cell` x `cell` block.
pub fn similarity_heatmap(sim: &Array2<f64>, cell: usize) -> Result<Array3<f32>> {
    if cell == 0 || sim.is_empty() {
        return Err(Error::Data("empty heatmap".into()));
    }
    let (n, m) = sim.dim();
    let mut out = Array3::zeros((n * cell, m * cell, 3));
    for i in 0..n {
        for j in 0..m {
            let v = sim[[i, j]].clamp(-1.0, 1.0) as f32;
            let (r, g, b) = if v >= 0.0 {
                (1.0, 1.0 - v, 1.0 - v)
            } else {
                (1.0 + v, 1.0 + v, 1.0)
            };
            for dy in 0..cell {
                for dx in 0..cell {
                    out[[i * cell + dy, j * cell + dx, 0]] = r;
                    out[[i * cell + dy, j * cell + dx, 1]] = g;
                    out[[i * cell + dy, j * cell + dx, 2]] = b;
                }
            }
        }
    }
    Ok(out)
}

/// CSV of an N x N similarity matrix with an AU-name header column/row.
pub fn similarity_csv(sim: &Array2<f64>) -> String {
    let (n, m) = sim.dim();
    let mut out = String::new();
    out.push_str("au");
    for j in 0..m {
        out.push_str(&format!(",AU{j}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("AU{i}"));
        for j in 0..m {
            out.push_str(&format!(",{:.6}", sim[[i, j]]));
        }
        out.push('\n');
    }
    out
}

/// CSV of the raw query bank, one row per AU, one column per dimension.
pub fn queries_csv(queries: &Array2<f64>) -> String {
    let (n, d) = queries.dim();
    let mut out = String::new();
    for i in 0..n {
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.8}", queries[[i, j]]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_panes_share_scale_and_center_zero() {
        let mut u = Array2::zeros((4, 4));
        u[[1, 1]] = 2.0;
        let v = Array2::zeros((4, 4));
        let img = flow_panes(&u, &v).unwrap();
        assert_eq!(img.dim(), (4, 10, 3));
        assert_eq!(img[[1, 1, 0]], 1.0, "peak u renders white");
        assert_eq!(img[[0, 0, 0]], 0.5, "zero flow renders mid-gray");
        assert_eq!(img[[1, 4 + GAP + 1, 0]], 0.5, "zero v renders mid-gray");
    }

    #[test]
    fn grid_shapes() {
        let a = Array3::from_elem((5, 4, 3), 0.2);
        let grid = inpaint_grid(
            &[a.clone(), a.clone()],
            &[a.clone(), a.clone()],
            &[a.clone(), a.clone()],
        )
        .unwrap();
        assert_eq!(grid.dim(), (3 * 5 + 2 * GAP, 2 * 4 + GAP, 3));
        let one = std::slice::from_ref(&a);
        assert!(inpaint_grid(one, &[a.clone(), a.clone()], one).is_err());
    }

    #[test]
    fn heatmap_colors() {
        let mut sim = Array2::zeros((2, 2));
        sim[[0, 0]] = 1.0;
        sim[[1, 1]] = 1.0;
        sim[[0, 1]] = -1.0;
        sim[[1, 0]] = -1.0;
        let img = similarity_heatmap(&sim, 3).unwrap();
        assert_eq!(img.dim(), (6, 6, 3));
        assert_eq!(img[[0, 0, 0]], 1.0);
        assert_eq!(img[[0, 0, 1]], 0.0, "+1 is red");
        assert_eq!(img[[0, 3, 2]], 1.0);
        assert_eq!(img[[0, 3, 0]], 0.0, "-1 is blue");
    }

    #[test]
    fn csv_shapes() {
        let sim = Array2::from_elem((3, 3), 0.25);
        let csv = similarity_csv(&sim);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("au,AU0,AU1,AU2"));
        let q = Array2::from_elem((3, 5), 1.0);
        let qc = queries_csv(&q);
        assert_eq!(qc.lines().count(), 3);
        assert_eq!(qc.lines().next().unwrap().split(',').count(), 5);
    }
}
