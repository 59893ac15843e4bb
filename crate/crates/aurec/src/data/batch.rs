//! Seeded batch preparation: crop to the model input size, optional
//! horizontal flip, AU-center recomputation and flow pooling.

use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rules::{compute_au_centers, flip_center, AuRuleTable, CenterPair};
use super::Sample;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// One model-ready sample. The image is CHW, the flow target is pooled to
/// the prediction grid with u and v leading the channel axis.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Array3<f32>,
    pub labels: Option<Vec<u8>>,
    pub flow: Option<Array3<f32>>,
    pub centers: Vec<CenterPair>,
    pub subject_id: String,
}

/// Average-pool a dense H x W x 2 flow field into [2, H/f, W/f].
pub fn pool_flow(flow: &ArrayView3<f32>, factor: usize) -> Array3<f32> {
    let (h, w) = (flow.shape()[0], flow.shape()[1]);
    let (ph, pw) = (h / factor, w / factor);
    let mut out = Array3::zeros((2, ph, pw));
    let norm = (factor * factor) as f32;
    for c in 0..2 {
        for y in 0..ph {
            for x in 0..pw {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += flow[[y * factor + dy, x * factor + dx, c]];
                    }
                }
                out[[c, y, x]] = acc / norm;
            }
        }
    }
    out
}

/// Prepare one sample with an explicit crop window and flip flag. The random
/// augmentation path and the deterministic evaluation path both reduce to
/// this function.
pub fn prepare_with(
    sample: &Sample,
    table: &AuRuleTable,
    size: usize,
    flow_factor: usize,
    ox: usize,
    oy: usize,
    flip: bool,
) -> Result<PreparedSample> {
    let (h, w) = (sample.image.shape()[0], sample.image.shape()[1]);
    if h < size + oy || w < size + ox {
        return Err(Error::Shape(format!(
            "crop {size}+({ox},{oy}) exceeds image {w}x{h}"
        )));
    }
    let mut image = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let sx = if flip { ox + size - 1 - x } else { ox + x };
            for c in 0..3 {
                image[[c, y, x]] = sample.image[[oy + y, sx, c]];
            }
        }
    }

    let shifted: Vec<[f64; 2]> = sample
        .landmarks
        .iter()
        .map(|lm| [lm[0] - ox as f64, lm[1] - oy as f64])
        .collect();
    let mut centers = compute_au_centers(&shifted, table, size, size)?;
    if flip {
        for pair in centers.iter_mut() {
            let l = *pair;
            pair.left = [flip_center(l.right[0], size), l.right[1]];
            pair.right = [flip_center(l.left[0], size), l.left[1]];
        }
    }

    let flow = match &sample.flow_gt {
        Some(f) => {
            let mut crop = Array3::zeros((size, size, 2));
            for y in 0..size {
                for x in 0..size {
                    let sx = if flip { ox + size - 1 - x } else { ox + x };
                    let su = f[[oy + y, sx, 0]];
                    crop[[y, x, 0]] = if flip { -su } else { su };
                    crop[[y, x, 1]] = f[[oy + y, sx, 1]];
                }
            }
            Some(pool_flow(&crop.view(), flow_factor))
        }
        None => None,
    };

    Ok(PreparedSample {
        image,
        labels: sample.labels.clone(),
        flow,
        centers,
        subject_id: sample.subject_id.clone(),
    })
}

/// Deterministic center-crop preparation used at evaluation time.
pub fn prepare_eval(sample: &Sample, model: &ModelConfig, table: &AuRuleTable) -> Result<PreparedSample> {
    let (h, w) = (sample.image.shape()[0], sample.image.shape()[1]);
    let size = model.image_size;
    if h < size || w < size {
        return Err(Error::Shape(format!(
            "image {w}x{h} smaller than model input {size}"
        )));
    }
    let factor = size / model.flow_size();
    prepare_with(sample, table, size, factor, (w - size) / 2, (h - size) / 2, false)
}

/// Serializable iterator position for exact training resume.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterState {
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub labeled_order: Vec<usize>,
    pub labeled_pos: usize,
    pub unlabeled_order: Vec<usize>,
    pub unlabeled_pos: usize,
}

pub struct BatchIterator {
    rng: ChaCha8Rng,
    augment: bool,
    size: usize,
    flow_factor: usize,
    table: AuRuleTable,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    labeled_order: Vec<usize>,
    labeled_pos: usize,
    unlabeled_order: Vec<usize>,
    unlabeled_pos: usize,
}

impl BatchIterator {
    pub fn new(
        samples: &[Sample],
        model: &ModelConfig,
        table: &AuRuleTable,
        seed: u64,
        augment: bool,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let labeled: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].is_labeled).collect();
        let unlabeled: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].is_labeled).collect();
        Ok(BatchIterator {
            rng: ChaCha8Rng::seed_from_u64(seed),
            augment,
            size: model.image_size,
            flow_factor: model.image_size / model.flow_size(),
            table: table.clone(),
            labeled,
            unlabeled,
            labeled_order: Vec::new(),
            labeled_pos: 0,
            unlabeled_order: Vec::new(),
            unlabeled_pos: 0,
        })
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled.len()
    }

    /// Crop/flip one sample with this iterator's random stream.
    pub fn prepare(&mut self, sample: &Sample) -> Result<PreparedSample> {
        let (h, w) = (sample.image.shape()[0], sample.image.shape()[1]);
        if h < self.size || w < self.size {
            return Err(Error::Shape(format!(
                "image {w}x{h} smaller than model input {}",
                self.size
            )));
        }
        let (ox, oy, flip) = if self.augment {
            (
                self.rng.gen_range(0..=w - self.size),
                self.rng.gen_range(0..=h - self.size),
                self.rng.gen::<bool>(),
            )
        } else {
            ((w - self.size) / 2, (h - self.size) / 2, false)
        };
        prepare_with(sample, &self.table, self.size, self.flow_factor, ox, oy, flip)
    }

    fn next_index(&mut self, labeled: bool) -> Result<usize> {
        let (pool, order, pos) = if labeled {
            (&self.labeled, &mut self.labeled_order, &mut self.labeled_pos)
        } else {
            (&self.unlabeled, &mut self.unlabeled_order, &mut self.unlabeled_pos)
        };
        if pool.is_empty() {
            return Err(Error::Data(format!(
                "no {} samples available",
                if labeled { "labeled" } else { "unlabeled" }
            )));
        }
        if *pos >= order.len() {
            *order = pool.clone();
            order.shuffle(&mut self.rng);
            *pos = 0;
        }
        let idx = order[*pos];
        *pos += 1;
        Ok(idx)
    }

    pub fn next_labeled(&mut self, samples: &[Sample], n: usize) -> Result<Vec<PreparedSample>> {
        (0..n)
            .map(|_| {
                let idx = self.next_index(true)?;
                self.prepare(&samples[idx])
            })
            .collect()
    }

    pub fn next_unlabeled(&mut self, samples: &[Sample], n: usize) -> Result<Vec<PreparedSample>> {
        Ok(self
            .next_unlabeled_indexed(samples, n)?
            .into_iter()
            .map(|(_, p)| p)
            .collect())
    }

    /// Like [`BatchIterator::next_unlabeled`] but keeps the source index of
    /// each draw, so callers can prepare extra augmented views of the same
    /// sample (pseudo-label averaging).
    pub fn next_unlabeled_indexed(
        &mut self,
        samples: &[Sample],
        n: usize,
    ) -> Result<Vec<(usize, PreparedSample)>> {
        (0..n)
            .map(|_| {
                let idx = self.next_index(false)?;
                Ok((idx, self.prepare(&samples[idx])?))
            })
            .collect()
    }

    pub fn state(&self) -> IterState {
        let pos = self.rng.get_word_pos();
        IterState {
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            labeled_order: self.labeled_order.clone(),
            labeled_pos: self.labeled_pos,
            unlabeled_order: self.unlabeled_order.clone(),
            unlabeled_pos: self.unlabeled_pos,
        }
    }

    pub fn restore(&mut self, st: &IterState) {
        self.rng
            .set_word_pos(((st.word_pos_hi as u128) << 64) | st.word_pos_lo as u128);
        self.labeled_order = st.labeled_order.clone();
        self.labeled_pos = st.labeled_pos;
        self.unlabeled_order = st.unlabeled_order.clone();
        self.unlabeled_pos = st.unlabeled_pos;
    }
}
