//! Data plumbing: sample container, manifest ingest, synthetic corpus,
//! alignment, flow ground truth and batch preparation.

use ndarray::{Array2, Array3, ArrayView3};
use serde::Deserialize;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};

pub mod align;
pub mod batch;
pub mod flow_io;
pub mod rules;
pub mod synthetic;
pub mod tvl1;

/// One face sample.
///
/// `image` is H x W x 3 in [0, 1]; `landmarks` are (x, y) pixel coordinates;
/// `labels` is the optional N-vector of AU activations in {0, 1}; `flow_gt`
/// is the optional dense H x W x 2 displacement field (u, v); `is_labeled`
/// mirrors `labels.is_some()`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f32>,
    pub landmarks: Vec<[f64; 2]>,
    pub labels: Option<Vec<u8>>,
    pub flow_gt: Option<Array3<f32>>,
    pub subject_id: String,
    pub is_labeled: bool,
}

impl Sample {
    pub fn validate(&self, au_count: usize) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::Shape(format!("sample image shape {shape:?}")));
        }
        if !self.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "subject {}: image intensities outside [0, 1]",
                self.subject_id
            )));
        }
        if self.landmarks.is_empty() || self.landmarks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "subject {}: missing or non-finite landmarks",
                self.subject_id
            )));
        }
        if self.is_labeled != self.labels.is_some() {
            return Err(Error::Data(format!(
                "subject {}: is_labeled flag disagrees with labels",
                self.subject_id
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != au_count || l.iter().any(|&v| v > 1) {
                return Err(Error::Data(format!(
                    "subject {}: labels must be {au_count} values in {{0, 1}}",
                    self.subject_id
                )));
            }
        }
        if let Some(f) = &self.flow_gt {
            if f.shape() != [shape[0], shape[1], 2] {
                return Err(Error::Shape(format!(
                    "flow ground truth {:?} for image {shape:?}",
                    f.shape()
                )));
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!(
                    "subject {}: non-finite flow ground truth",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// ITU-R 601 luma of an H x W x 3 image.
pub fn luma(image: &Array3<f32>) -> Array2<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * image[[y, x, 0]] + 0.587 * image[[y, x, 1]] + 0.114 * image[[y, x, 2]]
    })
}

pub fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &ArrayView3<f32>) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Landmark text files: one "x y" pair per line.
pub fn read_landmarks(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<f64> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| {
                Error::Data(format!("{}:{}: expected 'x y'", path.display(), ln + 1))
            })
        };
        let x = parse(it.next())?;
        let y = parse(it.next())?;
        out.push([x, y]);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no landmarks", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    image_path: PathBuf,
    #[serde(default)]
    landmarks: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    landmarks_path: Option<PathBuf>,
    #[serde(default)]
    labels: Option<Vec<u8>>,
    subject_id: String,
    #[serde(default)]
    flow_path: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load a JSON-lines manifest. `require_labels` marks the labeled stream;
/// records in the unlabeled stream have their labels dropped. Ordinal label
/// values are binarised at `label_threshold` when one is configured.
pub fn load_manifest(
    path: &Path,
    au_count: usize,
    label_threshold: Option<u8>,
    require_labels: bool,
) -> Result<Vec<Sample>> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), ln + 1))
        })?;
        let image = read_png(&resolve(&base, &rec.image_path))?;
        let landmarks = match (&rec.landmarks, &rec.landmarks_path) {
            (Some(lm), None) => lm.clone(),
            (None, Some(p)) => read_landmarks(&resolve(&base, p))?,
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: exactly one of landmarks / landmarks_path required",
                    path.display(),
                    ln + 1
                )))
            }
        };
        let labels = if require_labels {
            let raw = rec.labels.ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: labeled manifest record lacks labels",
                    path.display(),
                    ln + 1
                ))
            })?;
            Some(match label_threshold {
                Some(t) => raw.iter().map(|&v| u8::from(v >= t)).collect(),
                None => raw,
            })
        } else {
            None
        };
        let flow_gt = match &rec.flow_path {
            Some(p) => {
                let f = flow_io::read_wflo(&resolve(&base, p))?;
                let (h, w) = f.shape();
                let mut dense = Array3::zeros((h, w, 2));
                for y in 0..h {
                    for x in 0..w {
                        dense[[y, x, 0]] = f.u[[y, x]];
                        dense[[y, x, 1]] = f.v[[y, x]];
                    }
                }
                Some(dense)
            }
            None => None,
        };
        let sample = Sample {
            image,
            landmarks,
            labels,
            flow_gt,
            subject_id: rec.subject_id,
            is_labeled: require_labels,
        };
        sample.validate(au_count)?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", path.display())));
    }
    Ok(out)
}

/// Rule table for a run: configured rules when present, otherwise the
/// synthetic two-corner default.
pub fn rule_table(run: &RunConfig) -> rules::AuRuleTable {
    let patch = run.model.patch_size();
    match &run.data.rules {
        Some(r) => rules::AuRuleTable::from_config(r.clone(), patch),
        None => rules::AuRuleTable::synthetic_default(run.model.au_count, patch),
    }
}

/// Materialise the configured dataset (labeled + unlabeled samples).
pub fn build_dataset(run: &RunConfig, seed: u64) -> Result<Vec<Sample>> {
    match run.data.source {
        DataSource::Synthetic => {
            Ok(synthetic::generate(&run.model, &run.data.synthetic, seed)?.samples)
        }
        DataSource::Manifest => {
            let manifest = run.data.manifest.as_ref().ok_or_else(|| {
                Error::Config("manifest source requires data.manifest".into())
            })?;
            let mut samples = load_manifest(
                manifest,
                run.model.au_count,
                run.data.label_threshold,
                true,
            )?;
            if let Some(unl) = &run.data.unlabeled_manifest {
                samples.extend(load_manifest(
                    unl,
                    run.model.au_count,
                    run.data.label_threshold,
                    false,
                )?);
            }
            Ok(samples)
        }
    }
}
