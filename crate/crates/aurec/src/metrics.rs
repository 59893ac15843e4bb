//! Per-AU F1, subject-independent k-fold splits, dataset evaluation, and
//! report emission (markdown and CSV, one row per AU plus the average).

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use crate::data::batch::prepare_eval;
use crate::data::rules::AuRuleTable;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{s, Scalar};

#[derive(Debug, Clone)]
pub struct F1Report {
    pub per_au: Vec<f64>,
    pub average: f64,
    /// True where 2TP + FP + FN = 0, i.e. the F1 = 0 convention fired on an
    /// AU with no positive predictions and no positive labels.
    pub degenerate: Vec<bool>,
    /// (TP, FP, FN) per AU.
    pub counts: Vec<(usize, usize, usize)>,
}

/// F1 per AU from probabilities and binary labels: `2TP / (2TP + FP + FN)`,
/// 0 when that denominator is 0. The average is the unweighted mean over AUs.
pub fn f1_per_au(probs: &Array2<f32>, labels: &Array2<u8>, threshold: f64) -> Result<F1Report> {
    if probs.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "probs {:?} vs labels {:?}",
            probs.dim(),
            labels.dim()
        )));
    }
    if probs.nrows() == 0 {
        return Err(Error::Data("f1 needs at least one sample".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be binary".into()));
    }
    let n = probs.ncols();
    let mut per_au = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for au in 0..n {
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for i in 0..probs.nrows() {
            let pred = f64::from(probs[[i, au]]) >= threshold;
            let truth = labels[[i, au]] == 1;
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fnn;
        per_au.push(if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        });
        degenerate.push(denom == 0);
        counts.push((tp, fp, fnn));
    }
    let average = per_au.iter().sum::<f64>() / n as f64;
    Ok(F1Report {
        per_au,
        average,
        degenerate,
        counts,
    })
}

/// Subject-independent folds: distinct subjects are shuffled by `seed` and
/// dealt round-robin, so fold sizes differ by at most one and every subject
/// tests exactly once. Returns `(train_subjects, test_subjects)` per fold.
pub fn subject_kfold(
    subject_ids: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let distinct: BTreeSet<&String> = subject_ids.iter().collect();
    if distinct.len() < k {
        return Err(Error::Data(format!(
            "{} distinct subjects cannot fill {k} folds",
            distinct.len()
        )));
    }
    let mut subjects: Vec<String> = distinct.into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, subj) in subjects.into_iter().enumerate() {
        folds[i % k].push(subj);
    }
    Ok((0..k)
        .map(|f| {
            let test = folds[f].clone();
            let mut train: Vec<String> = folds
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != f)
                .flat_map(|(_, s)| s.iter().cloned())
                .collect();
            train.sort();
            (train, test)
        })
        .collect())
}

/// Center-crop evaluation over a fully labeled sample list: batched
/// prediction, then per-AU F1 at `threshold`.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    samples: &[Sample],
    table: &AuRuleTable,
    threshold: f64,
) -> Result<F1Report> {
    let (probs, labels) = predict_dataset(model, samples, table)?;
    f1_per_au(&probs, &labels, threshold)
}

/// Center-crop predictions and label matrix for a fully labeled sample list.
pub fn predict_dataset<S: Scalar>(
    model: &Model<S>,
    samples: &[Sample],
    table: &AuRuleTable,
) -> Result<(Array2<f32>, Array2<u8>)> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let n = model.cfg.au_count;
    let size = model.cfg.image_size;
    let mut probs = Array2::<f32>::zeros((samples.len(), n));
    let mut labels = Array2::<u8>::zeros((samples.len(), n));
    let chunk = 8;
    let mut row = 0;
    for group in samples.chunks(chunk) {
        let prepared: Vec<_> = group
            .iter()
            .map(|smp| prepare_eval(smp, &model.cfg, table))
            .collect::<Result<_>>()?;
        let mut images = Array4::<S>::zeros((group.len(), 3, size, size));
        let mut centers = Vec::with_capacity(group.len());
        for (i, p) in prepared.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), i)
                .assign(&p.image.mapv(|v| s::<S>(f64::from(v))));
            centers.push(p.centers.clone());
            let Some(l) = &p.labels else {
                return Err(Error::Data(format!(
                    "subject {}: evaluation needs labels on every sample",
                    p.subject_id
                )));
            };
            for (au, &v) in l.iter().enumerate() {
                labels[[row + i, au]] = v;
            }
        }
        let out = model.predict(images.into_dyn(), &centers)?;
        probs
            .slice_mut(ndarray::s![row..row + group.len(), ..])
            .assign(&out);
        row += group.len();
    }
    Ok((probs, labels))
}

/// Markdown table with one row per AU and a final "Avg." row.
pub fn report_markdown(report: &F1Report) -> String {
    let mut out = String::from("| AU | F1 | TP | FP | FN |\n|---|---|---|---|---|\n");
    for (i, f1) in report.per_au.iter().enumerate() {
        let (tp, fp, fnn) = report.counts[i];
        let flag = if report.degenerate[i] { " (degenerate)" } else { "" };
        out.push_str(&format!("| AU{i} | {f1:.4}{flag} | {tp} | {fp} | {fnn} |\n"));
    }
    out.push_str(&format!("| Avg. | {:.4} |  |  |  |\n", report.average));
    out
}

/// CSV with the same layout as the markdown report.
pub fn report_csv(report: &F1Report) -> String {
    let mut out = String::from("au,f1,tp,fp,fn,degenerate\n");
    for (i, f1) in report.per_au.iter().enumerate() {
        let (tp, fp, fnn) = report.counts[i];
        out.push_str(&format!(
            "AU{i},{f1:.6},{tp},{fp},{fnn},{}\n",
            report.degenerate[i]
        ));
    }
    out.push_str(&format!("Avg.,{:.6},,,,\n", report.average));
    out
}
