//! Multi-label MixMatch: sigmoid sharpening of guessed logits, Beta mixup of
//! inputs and targets against a shuffled pool, and the combined
//! semi-supervised loss.

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::data::batch::PreparedSample;
use crate::data::rules::CenterPair;
use crate::error::{Error, Result};
use crate::model::roii::PROB_EPS;
use crate::nn::{Scalar, Tape, Var};

/// `sigma(g / T)` elementwise over the logit matrix. `T` must lie in (0, 1];
/// smaller temperatures push the pseudo labels toward {0, 1}.
pub fn sharpen(logits: &Array2<f32>, temperature: f64) -> Result<Array2<f32>> {
    if !(temperature > 0.0 && temperature <= 1.0) {
        return Err(Error::Config(format!(
            "sharpening temperature {temperature} outside (0, 1]"
        )));
    }
    let t = temperature as f32;
    Ok(logits.mapv(|g| 1.0 / (1.0 + (-g / t).exp())))
}

/// Output of the mixup stage. Inputs and targets are convex combinations
/// with the dominant coefficient (>= 0.5) on the original stream sample, so
/// labeled mixes stay labeled-dominant and unlabeled mixes unlabeled-dominant.
pub struct MixedBatch {
    /// `[n, 3, S, S]` mixed labeled inputs.
    pub labeled_images: Array4<f32>,
    /// `[n, N]` soft targets of the labeled mixes.
    pub labeled_targets: Array2<f32>,
    pub unlabeled_images: Array4<f32>,
    pub unlabeled_targets: Array2<f32>,
    /// RoI centers of the dominant sample of each mix, labeled stream first.
    pub labeled_centers: Vec<Vec<CenterPair>>,
    pub unlabeled_centers: Vec<Vec<CenterPair>>,
    /// Mix coefficients lambda' in batch order (labeled then unlabeled).
    pub coefficients: Vec<f64>,
}

fn stack_images(items: &[&PreparedSample]) -> Array4<f32> {
    let c = items[0].image.dim();
    let mut out = Array4::zeros((items.len(), c.0, c.1, c.2));
    for (i, it) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&it.image);
    }
    out
}

/// MixMatch mixup: shuffle the pooled 2n samples, then mix each stream item
/// with its pool partner using `lambda' = max(lambda, 1 - lambda)`,
/// `lambda ~ Beta(alpha, alpha)`. Targets mix with the same coefficient.
pub fn mixmatch<R: Rng>(
    labeled: &[PreparedSample],
    labeled_targets: &Array2<f32>,
    unlabeled: &[PreparedSample],
    unlabeled_targets: &Array2<f32>,
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    let n = labeled.len();
    if n == 0 || unlabeled.len() != n {
        return Err(Error::Data(format!(
            "mixmatch needs equal nonempty streams, got {} labeled / {} unlabeled",
            n,
            unlabeled.len()
        )));
    }
    if labeled_targets.nrows() != n || unlabeled_targets.nrows() != n {
        return Err(Error::Shape("mixmatch target row count".into()));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;

    let all: Vec<&PreparedSample> = labeled.iter().chain(unlabeled.iter()).collect();
    let all_targets: Vec<_> = (0..2 * n)
        .map(|i| {
            if i < n {
                labeled_targets.row(i)
            } else {
                unlabeled_targets.row(i - n)
            }
        })
        .collect();
    let mut pool: Vec<usize> = (0..2 * n).collect();
    pool.shuffle(rng);

    let mut images = stack_images(&all);
    let mut targets = Array2::<f32>::zeros((2 * n, labeled_targets.ncols()));
    let mut coefficients = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let lambda = beta.sample(rng);
        let lp = lambda.max(1.0 - lambda);
        coefficients.push(lp);
        let w = all[pool[i]];
        let (a, b) = (lp as f32, (1.0 - lp) as f32);
        let mut img = images.index_axis_mut(Axis(0), i);
        img.zip_mut_with(&w.image, |x, &y| *x = a * *x + b * y);
        let trow = &all_targets[i] * a + &all_targets[pool[i]] * b;
        targets.row_mut(i).assign(&trow);
    }

    let (img_l, img_u) = images.view().split_at(Axis(0), n);
    let (tgt_l, tgt_u) = targets.view().split_at(Axis(0), n);
    Ok(MixedBatch {
        labeled_images: img_l.to_owned(),
        labeled_targets: tgt_l.to_owned(),
        unlabeled_images: img_u.to_owned(),
        unlabeled_targets: tgt_u.to_owned(),
        labeled_centers: labeled.iter().map(|p| p.centers.clone()).collect(),
        unlabeled_centers: unlabeled.iter().map(|p| p.centers.clone()).collect(),
        coefficients,
    })
}

/// `L_semi = BCE(y'_l, f(l')) + lambda_u * MSE(y'_u, f(u'))`, both terms
/// mean-reduced over batch and AUs. Targets are constants (stop-gradient).
pub fn semi_loss<S: Scalar>(
    t: &Tape<S>,
    labeled_probs: Var,
    labeled_targets: &ArrayD<S>,
    unlabeled_probs: Var,
    unlabeled_targets: &ArrayD<S>,
    lambda_u: f64,
) -> Var {
    let bce = t.bce_mean(labeled_probs, labeled_targets, None, PROB_EPS);
    let mse = t.mse_mean(unlabeled_probs, unlabeled_targets, None);
    t.add(bce, t.scale(mse, lambda_u))
}
