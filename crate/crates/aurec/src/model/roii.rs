//! RoI inpainting auxiliary task: crop one AU's two patches out of the
//! image (filled white), regenerate them from the AU's relation features,
//! and score them with an adversarial discriminator plus a patch classifier.

use ndarray::{ArrayD, Ix4};
use rand::Rng;

use super::layers::{Conv, ConvT, Linear, Norm};
use crate::config::ModelConfig;
use crate::data::rules::CenterPair;
use crate::nn::{ParamStore, Scalar, Tape, Var};

/// Crop geometry and patch data for one batch. Boxes are `(item, y0, x0)`
/// top-left corners of the `patch x patch` regions.
pub struct RoiiCrop<S: Scalar> {
    /// Input images with both patches of the chosen AU filled white.
    pub images_cropped: ArrayD<S>,
    /// Chosen AU index per batch item.
    pub au: Vec<usize>,
    pub left_patches: ArrayD<S>,
    pub right_patches: ArrayD<S>,
    pub left_boxes: Vec<(usize, usize, usize)>,
    pub right_boxes: Vec<(usize, usize, usize)>,
}

/// Pick one AU per item and cut out its symmetric patch pair.
pub fn crop_random_au<S: Scalar, R: Rng>(
    images: &ArrayD<S>,
    centers: &[Vec<CenterPair>],
    patch: usize,
    rng: &mut R,
) -> RoiiCrop<S> {
    let v = images.view().into_dimensionality::<Ix4>().expect("images 4-d");
    let b = v.shape()[0];
    assert_eq!(b, centers.len(), "one center set per item");
    let au: Vec<usize> = (0..b).map(|_| rng.gen_range(0..centers[0].len())).collect();
    let half = (patch / 2) as i64;
    let corner = |c: [i64; 2]| ((c[1] - half) as usize, (c[0] - half) as usize);

    let mut cropped = images.clone();
    let mut left = ArrayD::<S>::zeros(vec![b, 3, patch, patch]);
    let mut right = ArrayD::<S>::zeros(vec![b, 3, patch, patch]);
    let mut left_boxes = Vec::with_capacity(b);
    let mut right_boxes = Vec::with_capacity(b);
    for bi in 0..b {
        let pair = centers[bi][au[bi]];
        for (side, (patches, boxes)) in [
            (pair.left, (&mut left, &mut left_boxes)),
            (pair.right, (&mut right, &mut right_boxes)),
        ] {
            let (y0, x0) = corner(side);
            boxes.push((bi, y0, x0));
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        patches[[bi, c, dy, dx]] = v[[bi, c, y0 + dy, x0 + dx]];
                        cropped[[bi, c, y0 + dy, x0 + dx]] = S::one();
                    }
                }
            }
        }
    }
    RoiiCrop {
        images_cropped: cropped,
        au,
        left_patches: left,
        right_patches: right,
        left_boxes,
        right_boxes,
    }
}

fn up_stages(patch: usize) -> usize {
    let mut s = patch;
    let mut n = 0;
    while s > 3 {
        s /= 2;
        n += 1;
    }
    n
}

/// Patch generator: a dense seed reshaped to a 3x3 map, then stride-2
/// transposed convolutions up to the patch side, sigmoid output.
pub struct Generator {
    seed: Linear,
    seed_ch: usize,
    stages: Vec<(ConvT, Norm)>,
    last: ConvT,
}

impl Generator {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let n_up = up_stages(cfg.patch_size());
        let seed_ch = cfg.ch(128);
        let seed = Linear::new(store, rng, "gen.seed", cfg.embed_dim, seed_ch * 9, true);
        let mut stages = Vec::new();
        let mut cin = seed_ch;
        for k in 0..n_up {
            let cout = cfg.ch(64 << (n_up - k));
            stages.push((
                ConvT::new(store, rng, &format!("gen.up{k}"), cin, cout, 4, 2, 1, false),
                Norm::new(store, &format!("gen.n{k}"), cout),
            ));
            cin = cout;
        }
        let last = ConvT::new(store, rng, "gen.out", cin, 3, 3, 1, 1, true);
        Generator {
            seed,
            seed_ch,
            stages,
            last,
        }
    }

    /// `z` is `[B, d]`; the result is `[B, 3, patch, patch]` in (0, 1).
    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, z: Var) -> Var {
        let b = t.shape(z)[0];
        let mut x = self.seed.apply(t, store, z, false);
        x = t.reshape(x, &[b, self.seed_ch, 3, 3]);
        for (conv, norm) in &self.stages {
            x = conv.apply(t, store, x, false);
            x = norm.apply(t, store, x, false);
            x = t.relu(x);
        }
        t.sigmoid(self.last.apply(t, store, x, false))
    }
}

/// Shared topology for the discriminator (1 output) and the patch
/// classifier (N outputs): stride-2 convolutions down to 3x3, then a valid
/// 3x3 convolution to the output vector, sigmoid.
pub struct PatchCritic {
    stages: Vec<(Conv, Option<Norm>)>,
    last: Conv,
    out: usize,
}

impl PatchCritic {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        cfg: &ModelConfig,
        out: usize,
    ) -> Self {
        let n_down = up_stages(cfg.patch_size());
        let mut stages = Vec::new();
        let mut cin = 3;
        for k in 0..n_down {
            let cout = cfg.ch(64 << (k + 1));
            let conv = Conv::new(store, rng, &format!("{name}.d{k}"), cin, cout, 4, 2, 1, k == 0);
            let norm = (k > 0).then(|| Norm::new(store, &format!("{name}.n{k}"), cout));
            stages.push((conv, norm));
            cin = cout;
        }
        let last = Conv::new(store, rng, &format!("{name}.out"), cin, out, 3, 1, 0, true);
        PatchCritic { stages, last, out }
    }

    /// `x` is `[B, 3, patch, patch]`; the result is `[B, out]` probabilities.
    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, x: Var, frozen: bool) -> Var {
        let b = t.shape(x)[0];
        let mut h = x;
        for (conv, norm) in &self.stages {
            h = conv.apply(t, store, h, frozen);
            if let Some(n) = norm {
                h = n.apply(t, store, h, frozen);
            }
            h = t.leaky_relu(h, 0.2);
        }
        h = self.last.apply(t, store, h, frozen);
        let logits = t.reshape(h, &[b, self.out]);
        t.sigmoid(logits)
    }
}

/// Probability clip used inside every log of the adversarial objective.
pub const PROB_EPS: f64 = 1e-7;

/// `(L_adv, L_adv_g)` from discriminator probabilities on real and fake
/// patches. `d_fake` must already be detached (or come from a frozen
/// discriminator) as appropriate for the consuming step.
pub fn adversarial_losses<S: Scalar>(t: &Tape<S>, d_real: Var, d_fake: Var) -> (Var, Var) {
    let l_adv = t.add(t.log_mean(d_real, PROB_EPS), t.log1m_mean(d_fake, PROB_EPS));
    (l_adv, generator_adversarial_loss(t, d_fake))
}

/// `L_adv_g = -E[log D(G(x))]`, the non-saturating generator objective.
pub fn generator_adversarial_loss<S: Scalar>(t: &Tape<S>, d_fake: Var) -> Var {
    t.scale(t.log_mean(d_fake, PROB_EPS), -1.0)
}

/// `L_D = -L_adv`: the discriminator ascends the adversarial objective.
pub fn discriminator_loss<S: Scalar>(t: &Tape<S>, l_adv: Var) -> Var {
    t.scale(l_adv, -1.0)
}

/// Mean absolute error between generated and original patch content.
pub fn reconstruction_loss<S: Scalar>(t: &Tape<S>, fake: Var, real: &ArrayD<S>) -> Var {
    t.l1_mean(fake, real, None)
}

/// Mean BCE of patch-classifier probabilities against the (pseudo) labels.
pub fn classification_loss<S: Scalar>(t: &Tape<S>, probs: Var, targets: &ArrayD<S>) -> Var {
    t.bce_mean(probs, targets, None, PROB_EPS)
}

/// `L_G = lambda1 * L_adv_g + (1 - lambda1) * L_rec + lambda2 * L_c_g`.
pub fn generator_loss<S: Scalar>(
    t: &Tape<S>,
    l_adv_g: Var,
    l_rec: Var,
    l_c_g: Var,
    lambda1: f64,
    lambda2: f64,
) -> Var {
    t.add_many(&[
        t.scale(l_adv_g, lambda1),
        t.scale(l_rec, 1.0 - lambda1),
        t.scale(l_c_g, lambda2),
    ])
}
