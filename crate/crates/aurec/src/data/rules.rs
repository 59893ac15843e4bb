//! AU-center rule tables: map landmarks to the symmetric left/right RoI
//! center pair of every AU. The rule content for real landmark schemes is
//! configuration; a documented default exists for the synthetic two-corner
//! scheme.

use crate::config::AuRule;
use crate::error::{Error, Result};

/// Rule table plus the RoII patch side in image pixels.
#[derive(Debug, Clone)]
pub struct AuRuleTable {
    pub rules: Vec<AuRule>,
    pub roi_image_size: usize,
}

/// Integer image-space center pair of one AU, `[x, y]` each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenterPair {
    pub left: [i64; 2],
    pub right: [i64; 2],
}

impl AuRuleTable {
    /// Default synthetic scheme: anchors are the two top corners
    /// (landmark 0 = top-left, landmark 1 = top-right); AU i sits in a
    /// two-column grid down the face, rows spread evenly over the face
    /// height. Offsets are fractions of the image side, mirrored in x on
    /// the right side.
    pub fn synthetic_default(au_count: usize, roi_image_size: usize) -> Self {
        let rows = au_count.div_ceil(2).max(1);
        let rules = (0..au_count)
            .map(|i| AuRule {
                left_anchor: 0,
                right_anchor: 1,
                offset: [
                    0.18 + 0.14 * (i % 2) as f64,
                    0.16 + 0.64 * (i / 2) as f64 / (rows - 1).max(1) as f64,
                ],
            })
            .collect();
        AuRuleTable {
            rules,
            roi_image_size,
        }
    }

    pub fn from_config(rules: Vec<AuRule>, roi_image_size: usize) -> Self {
        AuRuleTable {
            rules,
            roi_image_size,
        }
    }

    pub fn validate(&self, au_count: usize, landmark_count: usize) -> Result<()> {
        if self.rules.len() != au_count {
            return Err(Error::Config(format!(
                "rule table has {} entries, expected {au_count}",
                self.rules.len()
            )));
        }
        for (i, r) in self.rules.iter().enumerate() {
            if r.left_anchor >= landmark_count || r.right_anchor >= landmark_count {
                return Err(Error::Config(format!(
                    "rule {i} anchors ({}, {}) out of range for {landmark_count} landmarks",
                    r.left_anchor, r.right_anchor
                )));
            }
        }
        Ok(())
    }
}

fn clamp_center(c: i64, side: usize, patch: usize) -> i64 {
    // Patch box is [c - patch/2, c - patch/2 + patch); keep it fully interior.
    let lo = (patch / 2) as i64;
    let hi = side as i64 - patch as i64 + lo;
    c.clamp(lo, hi)
}

/// Compute the 2N AU centers in image pixels: left center is
/// `landmark[left_anchor] + offset * (side - 1)` rounded; the right center
/// mirrors the x offset from the right anchor. Centers are clamped so every
/// `s x s` patch stays inside the image; an image smaller than the patch is
/// an error.
pub fn compute_au_centers(
    landmarks: &[[f64; 2]],
    table: &AuRuleTable,
    width: usize,
    height: usize,
) -> Result<Vec<CenterPair>> {
    let s = table.roi_image_size;
    if width < s || height < s {
        return Err(Error::Data(format!(
            "image {width}x{height} cannot fit a {s}x{s} RoI patch"
        )));
    }
    table.validate(table.rules.len(), landmarks.len())?;
    let sx = (width - 1) as f64;
    let sy = (height - 1) as f64;
    let mut out = Vec::with_capacity(table.rules.len());
    for r in &table.rules {
        let la = landmarks[r.left_anchor];
        let ra = landmarks[r.right_anchor];
        let left = [
            clamp_center((la[0] + r.offset[0] * sx).round() as i64, width, s),
            clamp_center((la[1] + r.offset[1] * sy).round() as i64, height, s),
        ];
        let right = [
            clamp_center((ra[0] - r.offset[0] * sx).round() as i64, width, s),
            clamp_center((ra[1] + r.offset[1] * sy).round() as i64, height, s),
        ];
        out.push(CenterPair { left, right });
    }
    Ok(out)
}

/// Convert an image-space center to the stride-4 fused-map grid. Ties round
/// to even so that `map_center(S - c) == map_size - map_center(c)` holds
/// exactly (the horizontal-flip rule in map space).
pub fn map_center(c: i64, map_size: usize) -> usize {
    let m = (c as f64 / crate::config::MAP_STRIDE as f64).round_ties_even() as i64;
    let half = (crate::config::ROI_WINDOW / 2) as i64;
    m.clamp(half, map_size as i64 - half) as usize
}

/// Horizontal flip of an image-space center whose patch box convention is
/// `[c - s/2, c + s/2)`.
pub fn flip_center(cx: i64, side: usize) -> i64 {
    side as i64 - cx
}
