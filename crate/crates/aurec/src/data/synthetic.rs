//! Synthetic face corpus with known AU structure.
//!
//! Each sample is a radial-gradient "face" with per-subject tone and speckle,
//! plus one oriented grating stamp per active AU at the rule-table centers
//! (both sides). A second frame translates the patch around the lowest
//! active AU by a fixed displacement, which yields an analytic flow field.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::rules::AuRuleTable;
use super::Sample;
use crate::config::{ModelConfig, SyntheticConfig};
use crate::error::{Error, Result};

pub struct SyntheticSet {
    pub samples: Vec<Sample>,
    /// Second frame of each sample's pair, aligned by index.
    pub frames_b: Vec<Array3<f32>>,
}

struct SubjectLook {
    tone: f32,
    tint: [f32; 3],
    speckle: Array3<f32>,
}

fn subject_look(seed: u64, subject: usize, canvas: usize) -> SubjectLook {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * subject as u64 + 1);
    let tone = 0.52 + 0.12 * rng.gen::<f32>();
    let tint = [
        1.0 + 0.03 * (rng.gen::<f32>() - 0.5),
        1.0,
        1.0 - 0.03 * (rng.gen::<f32>() - 0.5),
    ];
    let mut speckle = Array3::zeros((canvas, canvas, 1));
    for v in speckle.iter_mut() {
        *v = 0.04 * (rng.gen::<f32>() * 2.0 - 1.0);
    }
    SubjectLook {
        tone,
        tint,
        speckle,
    }
}

fn draw_labels(rng: &mut ChaCha8Rng, n: usize, syn: &SyntheticConfig) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n)
        .map(|_| u8::from(rng.gen::<f64>() < syn.activation_prob))
        .collect();
    if syn.activation_prob > 0.0 {
        if n >= 2 {
            // AU1 copies AU0 with a flip probability p, giving corr = 1 - 2p
            // under the symmetric default activation probability.
            let p_flip = ((1.0 - syn.co_occur_correlation) / 2.0).clamp(0.0, 0.5);
            labels[1] = labels[0] ^ u8::from(rng.gen::<f64>() < p_flip);
        }
        if n >= 4 && labels[2] == 1 && labels[3] == 1 {
            if rng.gen::<bool>() {
                labels[3] = 0;
            } else {
                labels[2] = 0;
            }
        }
    }
    labels
}

/// Continuous stamp centers in canvas coordinates for every AU. Offsets scale
/// with the crop-target side so recomputed centers track the stamps under
/// any crop window.
fn stamp_centers(table: &AuRuleTable, margin: f64, side: usize) -> Vec<([f64; 2], [f64; 2])> {
    let s = (side - 1) as f64;
    let lm0 = [margin, margin];
    let lm1 = [margin + s, margin];
    table
        .rules
        .iter()
        .map(|r| {
            (
                [lm0[0] + r.offset[0] * s, lm0[1] + r.offset[1] * s],
                [lm1[0] - r.offset[0] * s, lm1[1] + r.offset[1] * s],
            )
        })
        .collect()
}

/// Oriented grating under a raised-cosine window, added in place.
fn render_stamp(field: &mut ndarray::Array2<f32>, center: [f64; 2], theta: f64, au: usize, side: usize) {
    let radius = (0.055 * side as f64).max(4.0);
    // Wavelengths start at 4.5px so the default 2px frame displacement stays
    // below half a period (no phase aliasing for the flow solver).
    let wavenum = 2.0 * std::f64::consts::PI / (4.5 + 1.1 * (au % 4) as f64);
    let (h, w) = (field.shape()[0], field.shape()[1]);
    let y0 = ((center[1] - radius).floor().max(0.0)) as usize;
    let y1 = ((center[1] + radius).ceil() as usize).min(h - 1);
    let x0 = ((center[0] - radius).floor().max(0.0)) as usize;
    let x1 = ((center[0] + radius).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - center[1];
            let dx = x as f64 - center[0];
            let r = (dx * dx + dy * dy).sqrt();
            if r >= radius {
                continue;
            }
            let window = (std::f64::consts::FRAC_PI_2 * r / radius).cos().powi(2);
            let phase = wavenum * (dx * theta.cos() + dy * theta.sin());
            field[[y, x]] += (0.35 * window * phase.cos()) as f32;
        }
    }
}

fn render_face(
    look: &SubjectLook,
    labels: &[u8],
    centers: &[([f64; 2], [f64; 2])],
    canvas: usize,
    side: usize,
) -> Array3<f32> {
    let c = canvas as f64 / 2.0;
    let rmax = side as f64 * 0.52;
    let n = labels.len();
    let mut field = ndarray::Array2::<f32>::zeros((canvas, canvas));
    for y in 0..canvas {
        for x in 0..canvas {
            let r2 = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)) / (rmax * rmax);
            let shade = (1.0 - 0.35 * r2).max(0.3) as f32;
            field[[y, x]] = look.tone * shade + look.speckle[[y, x, 0]];
        }
    }
    for (au, &(left, right)) in centers.iter().enumerate() {
        if labels[au] == 1 {
            let theta = std::f64::consts::PI * au as f64 / n as f64;
            render_stamp(&mut field, left, theta, au, side);
            // Mirrored orientation on the right so a horizontal flip of the
            // whole face maps stamps onto valid stamps.
            render_stamp(&mut field, right, std::f64::consts::PI - theta, au, side);
        }
    }
    let mut img = Array3::zeros((canvas, canvas, 3));
    for y in 0..canvas {
        for x in 0..canvas {
            for ch in 0..3 {
                img[[y, x, ch]] = (field[[y, x]] * look.tint[ch]).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Translate the patch boxes of the lowest active AU by `d` to build the
/// second frame; returns the frame and the dense ground-truth flow (u, v in
/// the last axis) satisfying `b(p + flow(p)) = a(p)` wherever defined.
fn make_pair(
    frame_a: &Array3<f32>,
    labels: &[u8],
    centers: &[([f64; 2], [f64; 2])],
    patch: usize,
    d: [i64; 2],
) -> (Array3<f32>, Array3<f32>) {
    let canvas = frame_a.shape()[0] as i64;
    let mut frame_b = frame_a.clone();
    let mut flow = Array3::<f32>::zeros((canvas as usize, canvas as usize, 2));
    let mover = labels.iter().position(|&l| l == 1);
    let Some(mover) = mover else {
        return (frame_b, flow);
    };
    let half = (patch / 2) as i64;
    for &side_center in &[centers[mover].0, centers[mover].1] {
        let cx = side_center[0].round() as i64;
        let cy = side_center[1].round() as i64;
        let (bx0, bx1) = ((cx - half).max(0), (cx - half + patch as i64).min(canvas));
        let (by0, by1) = ((cy - half).max(0), (cy - half + patch as i64).min(canvas));
        for y in by0..by1 {
            for x in bx0..bx1 {
                let (sx, sy) = (x - d[0], y - d[1]);
                if sx >= bx0 && sx < bx1 && sy >= by0 && sy < by1 {
                    for ch in 0..3 {
                        frame_b[[y as usize, x as usize, ch]] =
                            frame_a[[sy as usize, sx as usize, ch]];
                    }
                    flow[[sy as usize, sx as usize, 0]] = d[0] as f32;
                    flow[[sy as usize, sx as usize, 1]] = d[1] as f32;
                }
            }
        }
    }
    (frame_b, flow)
}

pub fn generate(model: &ModelConfig, syn: &SyntheticConfig, seed: u64) -> Result<SyntheticSet> {
    model.validate()?;
    let side = model.image_size;
    let canvas = side + 2 * syn.margin;
    let patch = model.patch_size();
    if d_too_large(syn.displacement, patch) {
        return Err(Error::Config(format!(
            "displacement {:?} must be smaller than the {patch}px patch",
            syn.displacement
        )));
    }
    if syn.subjects == 0 || syn.samples_per_subject == 0 {
        return Err(Error::Config("synthetic corpus must be non-empty".into()));
    }
    let table = AuRuleTable::synthetic_default(model.au_count, patch);
    let centers = stamp_centers(&table, syn.margin as f64, side);
    let m = syn.margin as f64;
    let s = (side - 1) as f64;
    let landmarks = vec![[m, m], [m + s, m]];

    let per = syn.samples_per_subject;
    let n_unlabeled = ((per as f64) * syn.unlabeled_fraction).round() as usize;
    let n_unlabeled = n_unlabeled.min(per);
    let mut samples = Vec::with_capacity(syn.subjects * per);
    let mut frames_b = Vec::with_capacity(syn.subjects * per);
    for subject in 0..syn.subjects {
        let look = subject_look(seed, subject, canvas);
        for k in 0..per {
            let idx = subject * per + k;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * idx as u64 + 2);
            let labels = draw_labels(&mut rng, model.au_count, syn);
            let frame_a = render_face(&look, &labels, &centers, canvas, side);
            let (frame_b, flow) = make_pair(&frame_a, &labels, &centers, patch, syn.displacement);
            let is_labeled = k < per - n_unlabeled;
            let sample = Sample {
                image: frame_a,
                landmarks: landmarks.clone(),
                labels: is_labeled.then(|| labels.clone()),
                flow_gt: Some(flow),
                subject_id: format!("S{subject:02}"),
                is_labeled,
            };
            sample.validate(model.au_count)?;
            samples.push(sample);
            frames_b.push(frame_b);
        }
    }
    Ok(SyntheticSet { samples, frames_b })
}

fn d_too_large(d: [i64; 2], patch: usize) -> bool {
    d[0].unsigned_abs() as usize >= patch || d[1].unsigned_abs() as usize >= patch
}
